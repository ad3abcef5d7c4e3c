//! Distillation loss, normalized similarity, similarity-scaled latent
//! re-sampling and the two-step training loop.

use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{
    self, Dims, Embedding, FrozenNet, GeneratorStack, NetSpec, OutputActivation, Student, Teacher,
};
use crate::numcore::{self, Activation, AdamState, Reduce, Rng, Scalar, Tape, Tensor, Var};

/// One normalized similarity per sample, each in `[0, 1]`.
pub type SimScore<T> = Vec<T>;

const STREAM_TRAIN: u64 = 0x5452_4149;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleSpace {
    W,
    Z,
    None,
}

/// Which student embeddings feed the similarity used for re-sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SimSource {
    /// Embeddings from the Step-1 forward pass, before the update.
    #[default]
    PreUpdate,
    /// Student re-evaluated on the Step-1 images after the update.
    PostUpdate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Teacher with its own architecture (`teacher_*` settings).
    #[default]
    Independent,
    /// Teacher with the student's exact architecture.
    Realizable,
}

/// Hidden widths and their shared activation for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl LayerPlan {
    pub fn spec(&self, input: usize, output: usize, out_act: OutputActivation) -> Result<NetSpec> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(input);
        widths.extend(&self.hidden);
        widths.push(output);
        NetSpec::uniform(widths, self.activation, out_act)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub mapping: LayerPlan,
    pub generator: LayerPlan,
    pub teacher: LayerPlan,
    /// Backbone widths; the final layer onto `d_emb` is the projection head.
    pub student: LayerPlan,
    pub teacher_kind: TeacherKind,
    pub teacher_l2_normalize: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            mapping: LayerPlan {
                hidden: vec![16],
                activation: Activation::Tanh,
            },
            generator: LayerPlan {
                hidden: vec![64, 64, 64],
                activation: Activation::LeakyRelu(0.2),
            },
            teacher: LayerPlan {
                hidden: vec![128],
                activation: Activation::Tanh,
            },
            student: LayerPlan {
                hidden: vec![64, 48],
                activation: Activation::Tanh,
            },
            teacher_kind: TeacherKind::Independent,
            teacher_l2_normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_epoch: usize,
    /// Iterations per epoch.
    pub n_iteration: usize,
    pub batch_size: usize,
    pub alpha: f64,
    /// Re-sampling coefficient.
    pub c: f64,
    pub resample_space: ResampleSpace,
    pub sim_source: SimSource,
    /// Seeds the frozen networks.
    pub net_seed: u64,
    /// Seeds the student initialisation and every training draw.
    pub data_seed: u64,
    pub dims: Dims,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epoch: 1,
            n_iteration: 1000,
            batch_size: 64,
            alpha: 1e-3,
            c: 1.0,
            resample_space: ResampleSpace::W,
            sim_source: SimSource::PreUpdate,
            net_seed: 0,
            data_seed: 1,
            dims: Dims::default(),
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.n_epoch == 0 || self.n_iteration == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_epoch, n_iteration and batch_size must be positive".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::Config(format!("c must be >= 0, got {}", self.c)));
        }
        self.mapping_spec()?;
        self.generator_spec()?;
        self.teacher_spec()?;
        self.student_spec()?;
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        (self.n_epoch * self.n_iteration) as u64
    }

    pub fn mapping_spec(&self) -> Result<NetSpec> {
        self.arch
            .mapping
            .spec(self.dims.d_z, self.dims.d_w, OutputActivation::None)
    }

    pub fn generator_spec(&self) -> Result<NetSpec> {
        self.arch
            .generator
            .spec(self.dims.d_w, self.dims.d_img, OutputActivation::Tanh)
    }

    pub fn student_spec(&self) -> Result<NetSpec> {
        self.arch
            .student
            .spec(self.dims.d_img, self.dims.d_emb, OutputActivation::None)
    }

    pub fn teacher_spec(&self) -> Result<NetSpec> {
        match self.arch.teacher_kind {
            TeacherKind::Independent => {
                self.arch
                    .teacher
                    .spec(self.dims.d_img, self.dims.d_emb, OutputActivation::None)
            }
            TeacherKind::Realizable => self.student_spec(),
        }
    }
}

/// Frozen generator stack and teacher shared by every run with the same `net_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWorld {
    pub stack: GeneratorStack<f64>,
    pub teacher: Teacher<f64>,
}

impl FrozenWorld {
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let stack = nets::init_frozen_stack(
            cfg.net_seed,
            cfg.dims,
            &cfg.mapping_spec()?,
            &cfg.generator_spec()?,
        )?;
        let net: FrozenNet<f64> = match cfg.arch.teacher_kind {
            TeacherKind::Independent => nets::init_teacher(cfg.net_seed, &cfg.teacher_spec()?),
            TeacherKind::Realizable => nets::make_realizable_teacher(&cfg.student_spec()?, cfg.net_seed),
        };
        Ok(Self {
            stack,
            teacher: Teacher::new(net, cfg.arch.teacher_l2_normalize),
        })
    }

    /// Hashes of M, G and F_T, in that order.
    pub fn fingerprints(&self) -> [String; 3] {
        [
            self.stack.mapping().fingerprint(),
            self.stack.generator().fingerprint(),
            self.teacher.fingerprint(),
        ]
    }
}

/// Records the batch-mean squared L2 distance `mean_i ‖e_T,i − e_S,i‖²`.
///
/// The teacher side is a constant, so gradients reach only `student_out`.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, teacher: &Embedding<T>, student_out: Var) -> Result<Var> {
    let target = tape.constant(teacher.clone());
    tape.squared_error(student_out, target, Reduce::MeanRows)
}

/// Value-only version of [`kd_loss`].
pub fn kd_loss_value<T: Scalar>(teacher: &Embedding<T>, student: &Embedding<T>) -> Result<T> {
    let rows = numcore::row_squared_distance(teacher, student)?;
    if rows.is_empty() {
        return Ok(T::zero());
    }
    let n = T::from_usize(rows.len()).unwrap();
    Ok(rows.into_iter().sum::<T>() / n)
}

/// `0.5 · (1 + cos(e_T, e_S))` per row. Rows where either side has zero
/// norm score 0.5.
pub fn sim<T: Scalar>(e_t: &Embedding<T>, e_s: &Embedding<T>) -> Result<SimScore<T>> {
    if e_t.shape() != e_s.shape() {
        return Err(Error::dim("sim", e_t.shape(), e_s.shape()));
    }
    let (rows, _) = e_t.dims2()?;
    let half = T::from_f64_lossy(0.5);
    let mut out = Vec::with_capacity(rows);
    let mut degenerate = 0usize;
    for i in 0..rows {
        let (a, b) = (e_t.row(i), e_s.row(i));
        let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
        let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
        if na > T::zero() && nb > T::zero() {
            let cos = (dot / (na * nb)).max(-T::one()).min(T::one());
            out.push(half * (T::one() + cos));
        } else {
            degenerate += 1;
            out.push(half);
        }
    }
    if degenerate > 0 {
        warn!("{degenerate} of {rows} embedding pairs have zero norm; using similarity 0.5");
    }
    Ok(out)
}

/// `latent + c · s_i · n_i` with `n ~ N(0, I)` drawn per sample and coordinate.
///
/// The full noise block is always drawn so stream consumption does not
/// depend on `c` or `s`. Rows whose scale is zero are copied unchanged.
pub fn resample_latent<T: Scalar>(latent: &Tensor<T>, s: &[T], c: T, rng: &mut Rng) -> Result<Tensor<T>> {
    let (rows, cols) = latent.dims2()?;
    if s.len() != rows {
        return Err(Error::dim("resample", latent.shape(), &[s.len()]));
    }
    if c < T::zero() {
        return Err(Error::Contract("re-sampling coefficient must be >= 0".into()));
    }
    if s.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Contract("similarity scores must lie in [0, 1]".into()));
    }
    let noise = rng.sample_normal::<T>(&[rows, cols]);
    let mut out = latent.clone();
    for (i, &si) in s.iter().enumerate() {
        let k = c * si;
        if k == T::zero() {
            continue;
        }
        let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
        for (v, &n) in row.iter_mut().zip(noise.row(i)) {
            *v = *v + k * n;
        }
    }
    Ok(out)
}

/// Re-sampling around intermediate latents `w`.
pub fn resample_w<T: Scalar>(w: &Tensor<T>, s: &[T], c: T, rng: &mut Rng) -> Result<Tensor<T>> {
    resample_latent(w, s, c, rng)
}

/// Re-sampling around input latents `z`; callers map the result through M again.
pub fn resample_z<T: Scalar>(z: &Tensor<T>, s: &[T], c: T, rng: &mut Rng) -> Result<Tensor<T>> {
    resample_latent(z, s, c, rng)
}

/// Telemetry for one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    /// 1-based.
    pub epoch: usize,
    /// 1-based within the epoch.
    pub iteration: usize,
    pub step1_loss: f64,
    pub step2_loss: Option<f64>,
    pub sim_mean: f64,
    pub sim_min: f64,
    pub sim_max: f64,
    #[serde(skip)]
    pub wall: Duration,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub student: Student<f64>,
    pub adam: AdamState<f64>,
    /// Completed iterations.
    pub global_step: u64,
}

impl TrainerState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let student = Student::init(&cfg.student_spec()?, cfg.data_seed);
        let adam = AdamState::new(student.params().tensors().into_iter().map(|t| t.shape()));
        Ok(Self {
            student,
            adam,
            global_step: 0,
        })
    }

    /// Stream position for the next iteration's draws.
    pub fn training_rng(&self, cfg: &TrainConfig) -> Rng {
        Rng::new(cfg.data_seed).derive_path(&[STREAM_TRAIN, self.global_step])
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    world: FrozenWorld,
    state: TrainerState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let world = FrozenWorld::build(&cfg)?;
        let state = TrainerState::fresh(&cfg)?;
        Ok(Self { cfg, world, state })
    }

    pub fn with_world(cfg: TrainConfig, world: FrozenWorld) -> Result<Self> {
        cfg.validate()?;
        let state = TrainerState::fresh(&cfg)?;
        Ok(Self { cfg, world, state })
    }

    /// Continues from a saved state.
    pub fn resume(cfg: TrainConfig, state: TrainerState) -> Result<Self> {
        let world = FrozenWorld::build(&cfg)?;
        if state.student.spec() != &cfg.student_spec()? {
            return Err(Error::Config("saved student does not match the configured architecture".into()));
        }
        state.student.params().validate()?;
        Ok(Self { cfg, world, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn world(&self) -> &FrozenWorld {
        &self.world
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    /// Replaces the student, resetting the optimizer. Used to start from known parameters.
    pub fn set_student(&mut self, student: Student<f64>) -> Result<()> {
        if student.spec() != &self.cfg.student_spec()? {
            return Err(Error::Config("student does not match the configured architecture".into()));
        }
        self.state.adam = AdamState::new(student.params().tensors().into_iter().map(|t| t.shape()));
        self.state.student = student;
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.state.global_step >= self.cfg.total_iterations()
    }

    fn position(&self) -> (usize, usize) {
        let g = self.state.global_step as usize;
        (g / self.cfg.n_iteration + 1, g % self.cfg.n_iteration + 1)
    }

    fn non_finite(&self, what: &'static str) -> Error {
        let (epoch, iteration) = self.position();
        Error::NonFinite {
            what,
            epoch,
            iteration,
            global: self.state.global_step,
        }
    }

    /// Forward, loss, backward and one Adam update on `images`. Returns the
    /// loss and the pre-update student embeddings.
    fn distill_step(&mut self, images: &Tensor<f64>, e_t: &Embedding<f64>) -> Result<(f64, Embedding<f64>)> {
        let mut fwd = nets::student_embed(&self.state.student, images)?;
        let loss_var = kd_loss(&mut fwd.tape, e_t, fwd.output)?;
        let loss = fwd.tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(self.non_finite("distillation loss"));
        }
        let mut grads = fwd.tape.backward(loss_var)?;
        let params = self.state.student.params_mut();
        let g: Vec<Tensor<f64>> = fwd
            .params
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
            .collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(self.non_finite("gradient"));
        }
        self.state
            .adam
            .update(self.state.student.params_mut().tensors_mut(), &g, self.cfg.alpha)?;
        if self
            .state
            .student
            .params()
            .tensors()
            .iter()
            .any(|t| !t.is_finite())
        {
            return Err(self.non_finite("student parameters"));
        }
        let e_s = fwd.tape.value(fwd.output).clone();
        Ok((loss, e_s))
    }

    /// One iteration: Step 1 on fresh latents, then (unless disabled) Step 2
    /// on latents re-sampled around them.
    pub fn train_iteration(&mut self) -> Result<IterationResult> {
        let started = Instant::now();
        let (epoch, iteration) = self.position();
        let step_rng = self.state.training_rng(&self.cfg);
        let d = self.cfg.dims;
        let b = self.cfg.batch_size;

        let z = step_rng.derive(0).sample_normal::<f64>(&[b, d.d_z]);
        let w = self.world.stack.mapping_forward(&z)?;
        let images = self.world.stack.generator_forward(&w)?;
        let e_t = self.world.teacher.embed(&images)?;
        let (step1_loss, e_s) = self.distill_step(&images, &e_t)?;

        let s = match self.cfg.sim_source {
            SimSource::PreUpdate => sim(&e_t, &e_s)?,
            SimSource::PostUpdate => sim(&e_t, &self.state.student.forward(&images)?)?,
        };

        let step2_loss = match self.cfg.resample_space {
            ResampleSpace::None => None,
            space => {
                let mut noise = step_rng.derive(1);
                let w2 = match space {
                    ResampleSpace::W => resample_w(&w, &s, self.cfg.c, &mut noise)?,
                    _ => {
                        let z2 = resample_z(&z, &s, self.cfg.c, &mut noise)?;
                        self.world.stack.mapping_forward(&z2)?
                    }
                };
                let images2 = self.world.stack.generator_forward(&w2)?;
                let e_t2 = self.world.teacher.embed(&images2)?;
                Some(self.distill_step(&images2, &e_t2)?.0)
            }
        };

        self.state.global_step += 1;
        let n = s.len().max(1) as f64;
        Ok(IterationResult {
            epoch,
            iteration,
            step1_loss,
            step2_loss,
            sim_mean: s.iter().sum::<f64>() / n,
            sim_min: s.iter().copied().fold(f64::INFINITY, f64::min),
            sim_max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            wall: started.elapsed(),
        })
    }

    /// Runs until `stop_at` completed iterations (capped at the configured
    /// total), calling `on_iter` after each one.
    pub fn run_until(
        &mut self,
        stop_at: u64,
        mut on_iter: impl FnMut(&TrainerState, &IterationResult) -> Result<()>,
    ) -> Result<()> {
        let end = stop_at.min(self.cfg.total_iterations());
        while self.state.global_step < end {
            let r = self.train_iteration()?;
            on_iter(&self.state, &r)?;
        }
        Ok(())
    }
}

/// Single training step on the supplied state, for callers that manage
/// their own world and loop.
pub fn train_iteration(trainer: &mut Trainer) -> Result<IterationResult> {
    trainer.train_iteration()
}

/// Runs every configured iteration from scratch.
pub fn train_run(cfg: &TrainConfig) -> Result<(TrainerState, Vec<IterationResult>)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut metrics = Vec::with_capacity(cfg.total_iterations() as usize);
    trainer.run_until(u64::MAX, |_, r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.into_state(), metrics))
}
