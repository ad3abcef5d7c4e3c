//! Synthetic verification protocol, teacher–student agreement and the
//! ablation runner.
//!
//! "Same identity" means "same base latent `w`": a genuine pair renders `w`
//! and a small perturbation of it, an impostor pair renders two independent
//! latents. Accuracy is measured at the single best cosine threshold.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{self, FrozenWorld, IterationResult, ResampleSpace, TrainConfig, Trainer, TrainerState};
use crate::error::{Error, Result};
use crate::nets::{FrozenNet, GeneratorStack, Student, Teacher};
use crate::numcore::{Rng, Tensor};

const STREAM_EVAL: u64 = 0x4556_414C;
const STREAM_PAIRS: u64 = 1;
const STREAM_AGREEMENT: u64 = 2;

/// Anything that maps an image batch to an embedding batch.
pub trait Embedder {
    fn embed(&self, images: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl Embedder for Teacher<f64> {
    fn embed(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        Teacher::embed(self, images)
    }
}

impl Embedder for Student<f64> {
    fn embed(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.forward(images)
    }
}

impl Embedder for FrozenNet<f64> {
    fn embed(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.forward(images)
    }
}

/// Emits the same vector for every input.
pub struct ConstantEmbedder(pub Vec<f64>);

impl Embedder for ConstantEmbedder {
    fn embed(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let rows = images.rows();
        let data = (0..rows).flat_map(|_| self.0.iter().copied()).collect();
        Tensor::new(vec![rows, self.0.len()], data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Genuine,
    Impostor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub image_a: Vec<f64>,
    pub image_b: Vec<f64>,
    pub label: PairLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub genuine_sigma: f64,
    pub eval_seed: u64,
    pub agreement_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            genuine_sigma: 0.3,
            eval_seed: 7,
            agreement_samples: 2000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 || !self.n_pairs.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_pairs must be a positive even number, got {}",
                self.n_pairs
            )));
        }
        if !(self.genuine_sigma.is_finite() && self.genuine_sigma >= 0.0) {
            return Err(Error::Config("genuine_sigma must be >= 0".into()));
        }
        if self.agreement_samples == 0 {
            return Err(Error::Config("agreement_samples must be positive".into()));
        }
        Ok(())
    }

    /// Root of the evaluation streams; disjoint from every training stream.
    pub fn rng(&self) -> Rng {
        Rng::new(self.eval_seed).derive(STREAM_EVAL)
    }
}

/// `n_pairs / 2` genuine pairs followed by `n_pairs / 2` impostor pairs.
pub fn gen_pairs(
    stack: &GeneratorStack<f64>,
    rng: &mut Rng,
    n_pairs: usize,
    genuine_sigma: f64,
) -> Result<Vec<VerificationPair>> {
    if !n_pairs.is_multiple_of(2) {
        return Err(Error::Protocol(format!("n_pairs must be even, got {n_pairs}")));
    }
    let half = n_pairs / 2;
    let d = stack.dims();

    let z = rng.sample_normal::<f64>(&[half, d.d_z]);
    let w = stack.mapping_forward(&z)?;
    let noise = rng.sample_normal::<f64>(&[half, d.d_w]);
    let w2 = if genuine_sigma == 0.0 {
        w.clone()
    } else {
        w.zip_map(&noise, "gen_pairs", |a, n| a + genuine_sigma * n)?
    };
    let ga = stack.generator_forward(&w)?;
    let gb = stack.generator_forward(&w2)?;

    let za = rng.sample_normal::<f64>(&[half, d.d_z]);
    let zb = rng.sample_normal::<f64>(&[half, d.d_z]);
    let ia = stack.generator_forward(&stack.mapping_forward(&za)?)?;
    let ib = stack.generator_forward(&stack.mapping_forward(&zb)?)?;

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..half {
        pairs.push(VerificationPair {
            image_a: ga.row(i).to_vec(),
            image_b: gb.row(i).to_vec(),
            label: PairLabel::Genuine,
        });
    }
    for i in 0..half {
        pairs.push(VerificationPair {
            image_a: ia.row(i).to_vec(),
            image_b: ib.row(i).to_vec(),
            label: PairLabel::Impostor,
        });
    }
    Ok(pairs)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Cosine similarity of the two embeddings of every pair.
pub fn pair_scores(embedder: &dyn Embedder, pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let stack = |f: fn(&VerificationPair) -> &Vec<f64>| -> Result<Tensor<f64>> {
        let cols = f(&pairs[0]).len();
        let data = pairs.iter().flat_map(|p| f(p).iter().copied()).collect();
        Tensor::new(vec![pairs.len(), cols], data)
    };
    let ea = embedder.embed(&stack(|p| &p.image_a)?)?;
    let eb = embedder.embed(&stack(|p| &p.image_b)?)?;
    Ok((0..pairs.len()).map(|i| cosine(ea.row(i), eb.row(i))).collect())
}

/// Accuracy of "genuine iff score >= t" maximised over every observed
/// score `t`; ties go to the lower threshold. Returns `(accuracy, t)`.
pub fn best_threshold(scores: &[f64], genuine: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != genuine.len() {
        return Err(Error::Protocol("scores and labels differ in length".into()));
    }
    let n_gen = genuine.iter().filter(|&&g| g).count();
    if scores.is_empty() || n_gen == 0 || n_gen == scores.len() {
        return Err(Error::Protocol(
            "need a non-empty pair set containing both genuine and impostor pairs".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Protocol("non-finite similarity score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Threshold at the smallest score: everything is called genuine.
    let mut correct = n_gen;
    let mut best = (correct, scores[order[0]]);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        if correct > best.0 {
            best = (correct, t);
        }
        // Move every pair scoring exactly t below the next threshold.
        while i < order.len() && scores[order[i]] == t {
            if genuine[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
    }
    Ok((best.0 as f64 / scores.len() as f64, best.1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub accuracy: f64,
    pub threshold: f64,
    pub pair_count: usize,
}

pub fn verification_accuracy(embedder: &dyn Embedder, pairs: &[VerificationPair]) -> Result<Verification> {
    let scores = pair_scores(embedder, pairs)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label == PairLabel::Genuine).collect();
    let (accuracy, threshold) = best_threshold(&scores, &labels)?;
    Ok(Verification {
        accuracy,
        threshold,
        pair_count: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Mean normalized similarity `0.5 · (1 + cos)`.
    pub mean_sim: f64,
    /// Mean per-sample squared L2 distance.
    pub mean_mse: f64,
}

/// Teacher–student agreement on `n_samples` fresh generator outputs.
pub fn agreement(
    student: &dyn Embedder,
    teacher: &Teacher<f64>,
    stack: &GeneratorStack<f64>,
    rng: &mut Rng,
    n_samples: usize,
) -> Result<Agreement> {
    if n_samples == 0 {
        return Err(Error::Protocol("agreement needs at least one sample".into()));
    }
    let z = rng.sample_normal::<f64>(&[n_samples, stack.dims().d_z]);
    let images = stack.generator_forward(&stack.mapping_forward(&z)?)?;
    let e_t = teacher.embed(&images)?;
    let e_s = student.embed(&images)?;
    let s = distill::sim(&e_t, &e_s)?;
    Ok(Agreement {
        mean_sim: s.iter().sum::<f64>() / n_samples as f64,
        mean_mse: distill::kd_loss_value(&e_t, &e_s)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub mean_sim: f64,
    pub mean_mse: f64,
    pub pair_count: usize,
}

/// Verification on `pairs` plus agreement on the evaluation agreement stream.
pub fn evaluate(
    student: &dyn Embedder,
    world: &FrozenWorld,
    pairs: &[VerificationPair],
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let v = verification_accuracy(student, pairs)?;
    let mut rng = eval.rng().derive(STREAM_AGREEMENT);
    let a = agreement(student, &world.teacher, &world.stack, &mut rng, eval.agreement_samples)?;
    Ok(EvalReport {
        accuracy: v.accuracy,
        threshold: v.threshold,
        mean_sim: a.mean_sim,
        mean_mse: a.mean_mse,
        pair_count: v.pair_count,
    })
}

/// The fixed evaluation pair set for `world`.
pub fn eval_pairs(world: &FrozenWorld, eval: &EvalConfig) -> Result<Vec<VerificationPair>> {
    eval.validate()?;
    gen_pairs(
        &world.stack,
        &mut eval.rng().derive(STREAM_PAIRS),
        eval.n_pairs,
        eval.genuine_sigma,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    SamplingMode,
    SamplesPerEpoch,
    Coefficient,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::SamplingMode => "sampling-mode",
            AblationAxis::SamplesPerEpoch => "samples-per-epoch",
            AblationAxis::Coefficient => "coefficient",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling-mode" => Ok(AblationAxis::SamplingMode),
            "samples-per-epoch" => Ok(AblationAxis::SamplesPerEpoch),
            "coefficient" => Ok(AblationAxis::Coefficient),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?} (sampling-mode, samples-per-epoch, coefficient)"
            ))),
        }
    }
}

/// Value presets for the three ablation tables.
pub fn preset(name: &str) -> Result<(AblationAxis, Vec<String>)> {
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    match name {
        "table3" => Ok((
            AblationAxis::SamplingMode,
            strs(&["static-N", "static-2N", "dynamic-Z", "dynamic-W"]),
        )),
        "table4" => Ok((AblationAxis::SamplesPerEpoch, strs(&["0.5N", "N", "2N"]))),
        "table5" => Ok((
            AblationAxis::Coefficient,
            strs(&["0.8", "0.9", "1", "1.1", "1.2", "1.3", "1.4", "1.5"]),
        )),
        _ => Err(Error::Config(format!("unknown preset {name:?} (table3, table4, table5)"))),
    }
}

fn parse_multiple_of_n(value: &str) -> Option<f64> {
    let v = value.strip_suffix('N')?;
    if v.is_empty() {
        Some(1.0)
    } else {
        v.parse().ok()
    }
}

/// Derives the configuration of one ablation cell.
///
/// `N` is `base.n_iteration · base.batch_size` samples per epoch. Sampling
/// modes: `static-N`, `static-2N` (no re-sampling), `dynamic-Z`, `dynamic-W`
/// (N fresh plus N re-sampled). Samples-per-epoch values are either absolute
/// sample counts or multiples such as `0.5N`; they set the number of Step-1
/// samples and keep the base re-sampling mode.
pub fn cell_config(base: &TrainConfig, axis: AblationAxis, value: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let bad = || Error::Config(format!("invalid {axis} value {value:?}"));
    match axis {
        AblationAxis::SamplingMode => match value {
            "static-N" => cfg.resample_space = ResampleSpace::None,
            "static-2N" => {
                cfg.resample_space = ResampleSpace::None;
                cfg.n_iteration = 2 * base.n_iteration;
            }
            "dynamic-Z" => cfg.resample_space = ResampleSpace::Z,
            "dynamic-W" => cfg.resample_space = ResampleSpace::W,
            _ => return Err(bad()),
        },
        AblationAxis::SamplesPerEpoch => {
            let samples = match parse_multiple_of_n(value) {
                Some(k) => k * (base.n_iteration * base.batch_size) as f64,
                None => value.parse::<f64>().map_err(|_| bad())?,
            };
            if !(samples.is_finite() && samples >= 1.0) {
                return Err(bad());
            }
            cfg.n_iteration = ((samples / base.batch_size as f64).round() as usize).max(1);
        }
        AblationAxis::Coefficient => {
            cfg.c = value.parse().map_err(|_| bad())?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One trained and evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: String,
    pub seed_index: usize,
    pub data_seed: u64,
    pub report: EvalReport,
    pub frozen_fingerprints: [String; 3],
    #[serde(skip)]
    pub metrics: Vec<IterationResult>,
    /// Final trainer state, kept so callers can checkpoint each cell.
    #[serde(skip)]
    pub state: Option<TrainerState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub value: String,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub sim_mean: f64,
    pub sim_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub frozen_fingerprints: [String; 3],
    pub pair_set_hash: String,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<AblationRun>,
}

impl AblationGrid {
    pub fn cell(&self, value: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.value == value)
    }
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean_a − mean_b > pooled_std / √n`, with `pooled_std = √((s_a² + s_b²)/2)`.
pub fn significantly_greater(a: &CellSummary, b: &CellSummary) -> bool {
    let pooled = ((a.accuracy_std.powi(2) + b.accuracy_std.powi(2)) / 2.0).sqrt();
    let n = a.n_seeds.min(b.n_seeds).max(1) as f64;
    a.accuracy_mean - b.accuracy_mean > pooled / n.sqrt()
}

fn hash_pairs(pairs: &[VerificationPair]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in pairs {
        for v in p.image_a.iter().chain(&p.image_b) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update([p.label as u8]);
    }
    hex::encode(h.finalize())
}

/// Trains one run per `(value, seed)` and evaluates each on a shared pair
/// set. Seed `k` uses `data_seed = base.data_seed + k`; the frozen networks
/// are shared by every cell. Runs execute in parallel.
pub fn run_ablation(
    base: &TrainConfig,
    eval: &EvalConfig,
    axis: AblationAxis,
    values: &[String],
    n_seeds: usize,
) -> Result<AblationGrid> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let world = FrozenWorld::build(base)?;
    let frozen = world.fingerprints();
    let pairs = eval_pairs(&world, eval)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| base.data_seed.wrapping_add(k)).collect();

    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|v| (0..n_seeds).map(move |s| (v, s)))
        .collect();
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(vi, si)| {
            let value = &values[vi];
            let cell_err = |e: Error| Error::Cell {
                cell: format!("{axis}={value} seed#{si}"),
                source: Box::new(e),
            };
            let mut cfg = cell_config(base, axis, value).map_err(cell_err)?;
            cfg.data_seed = seeds[si];
            let mut trainer = Trainer::with_world(cfg, world.clone()).map_err(cell_err)?;
            let mut metrics = Vec::new();
            trainer
                .run_until(u64::MAX, |_, r| {
                    metrics.push(r.clone());
                    Ok(())
                })
                .map_err(cell_err)?;
            let report = evaluate(&trainer.state().student, trainer.world(), &pairs, eval).map_err(cell_err)?;
            let frozen_fingerprints = trainer.world().fingerprints();
            Ok(AblationRun {
                value: value.clone(),
                seed_index: si,
                data_seed: seeds[si],
                report,
                frozen_fingerprints,
                metrics,
                state: Some(trainer.into_state()),
            })
        })
        .collect::<Result<_>>()?;

    let cells = values
        .iter()
        .map(|v| {
            let rs: Vec<&EvalReport> = runs.iter().filter(|r| &r.value == v).map(|r| &r.report).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let (sim_mean, sim_std) = mean_std(&rs.iter().map(|r| r.mean_sim).collect::<Vec<_>>());
            let (mse_mean, mse_std) = mean_std(&rs.iter().map(|r| r.mean_mse).collect::<Vec<_>>());
            CellSummary {
                value: v.clone(),
                n_seeds: rs.len(),
                accuracy_mean,
                accuracy_std,
                sim_mean,
                sim_std,
                mse_mean,
                mse_std,
            }
        })
        .collect();

    Ok(AblationGrid {
        axis,
        values: values.to_vec(),
        seeds,
        frozen_fingerprints: frozen,
        pair_set_hash: hash_pairs(&pairs),
        cells,
        runs,
    })
}
