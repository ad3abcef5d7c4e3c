//! Run configuration file: flat TOML key = value pairs.
//!
//! Every key is optional and defaults to the library defaults. Unknown keys
//! are rejected so a misspelled setting never silently falls back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthdistill::distill::{Architecture, LayerPlan, ResampleSpace, SimSource, TeacherKind, TrainConfig};
use synthdistill::eval::EvalConfig;
use synthdistill::nets::Dims;
use synthdistill::numcore::Activation;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub n_epoch: usize,
    pub n_iteration: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub c: f64,
    pub resample_space: ResampleSpace,
    pub sim_source: SimSource,
    pub net_seed: u64,
    pub data_seed: u64,

    pub d_z: usize,
    pub d_w: usize,
    pub d_img: usize,
    pub d_emb: usize,

    pub mapping_hidden: Vec<usize>,
    pub mapping_activation: Activation,
    pub generator_hidden: Vec<usize>,
    pub generator_activation: Activation,
    pub teacher_kind: TeacherKind,
    pub teacher_hidden: Vec<usize>,
    pub teacher_activation: Activation,
    pub teacher_l2_normalize: bool,
    pub student_hidden: Vec<usize>,
    pub student_activation: Activation,

    pub n_pairs: usize,
    pub genuine_sigma: f64,
    pub eval_seed: u64,
    pub agreement_samples: usize,

    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    /// Metrics records buffered between flushes.
    pub metrics_flush_interval: usize,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default(), &EvalConfig::default())
    }
}

impl RunConfigFile {
    pub fn from_parts(train: &TrainConfig, eval: &EvalConfig) -> Self {
        let a = &train.arch;
        Self {
            n_epoch: train.n_epoch,
            n_iteration: train.n_iteration,
            batch_size: train.batch_size,
            alpha: train.alpha,
            c: train.c,
            resample_space: train.resample_space,
            sim_source: train.sim_source,
            net_seed: train.net_seed,
            data_seed: train.data_seed,
            d_z: train.dims.d_z,
            d_w: train.dims.d_w,
            d_img: train.dims.d_img,
            d_emb: train.dims.d_emb,
            mapping_hidden: a.mapping.hidden.clone(),
            mapping_activation: a.mapping.activation,
            generator_hidden: a.generator.hidden.clone(),
            generator_activation: a.generator.activation,
            teacher_kind: a.teacher_kind,
            teacher_hidden: a.teacher.hidden.clone(),
            teacher_activation: a.teacher.activation,
            teacher_l2_normalize: a.teacher_l2_normalize,
            student_hidden: a.student.hidden.clone(),
            student_activation: a.student.activation,
            n_pairs: eval.n_pairs,
            genuine_sigma: eval.genuine_sigma,
            eval_seed: eval.eval_seed,
            agreement_samples: eval.agreement_samples,
            output_dir: PathBuf::from("run"),
            metrics_flush_interval: 50,
            checkpoint_interval: 500,
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    /// Reads, parses and validates a config file. `output_dir` comes back
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train().validate()?;
        self.eval().validate()?;
        if self.metrics_flush_interval == 0 {
            return Err(CliError::Config("metrics_flush_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            n_epoch: self.n_epoch,
            n_iteration: self.n_iteration,
            batch_size: self.batch_size,
            alpha: self.alpha,
            c: self.c,
            resample_space: self.resample_space,
            sim_source: self.sim_source,
            net_seed: self.net_seed,
            data_seed: self.data_seed,
            dims: Dims {
                d_z: self.d_z,
                d_w: self.d_w,
                d_img: self.d_img,
                d_emb: self.d_emb,
            },
            arch: Architecture {
                mapping: LayerPlan {
                    hidden: self.mapping_hidden.clone(),
                    activation: self.mapping_activation,
                },
                generator: LayerPlan {
                    hidden: self.generator_hidden.clone(),
                    activation: self.generator_activation,
                },
                teacher: LayerPlan {
                    hidden: self.teacher_hidden.clone(),
                    activation: self.teacher_activation,
                },
                student: LayerPlan {
                    hidden: self.student_hidden.clone(),
                    activation: self.student_activation,
                },
                teacher_kind: self.teacher_kind,
                teacher_l2_normalize: self.teacher_l2_normalize,
            },
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            n_pairs: self.n_pairs,
            genuine_sigma: self.genuine_sigma,
            eval_seed: self.eval_seed,
            agreement_samples: self.agreement_samples,
        }
    }
}

/// SHA-256 over the canonical JSON of the training settings. Output and
/// evaluation keys are excluded, so moving a run or changing the eval
/// protocol does not invalidate its checkpoints.
pub fn config_hash(train: &TrainConfig) -> String {
    let json = serde_json::to_vec(train).expect("TrainConfig serializes");
    hex::encode(Sha256::digest(&json))
}

fn list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn float(x: f64) -> String {
    // TOML floats need a decimal point or exponent.
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn quoted<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain enum serializes")
}

/// A commented config holding every default.
pub fn default_config_text() -> String {
    let d = RunConfigFile::default();
    format!(
        r#"# synthdistill run configuration. Every key is optional; unknown keys are errors.

# -- training --
# Epochs, and iterations per epoch. Total samples per step = n_iteration * batch_size.
n_epoch = {n_epoch}
n_iteration = {n_iteration}
batch_size = {batch_size}
# Adam learning rate.
alpha = {alpha}
# Re-sampling coefficient: latent' = latent + c * sim * noise.
c = {c}
# Latent space re-sampled in Step 2: "w", "z" or "none" (Step 1 only).
resample_space = {resample_space}
# Student embeddings used for the similarity: "pre-update" or "post-update".
sim_source = {sim_source}
# Seeds the frozen mapping, generator and teacher networks.
net_seed = {net_seed}
# Seeds the student initialisation and every training draw.
data_seed = {data_seed}

# -- dimensions --
d_z = {d_z}
d_w = {d_w}
d_img = {d_img}
d_emb = {d_emb}

# -- architectures (hidden widths; activation = "relu", "tanh" or "leaky_relu:<slope>") --
mapping_hidden = {mapping_hidden}
mapping_activation = {mapping_activation}
generator_hidden = {generator_hidden}
generator_activation = {generator_activation}
# "independent" uses the teacher_* settings; "realizable" copies the student architecture.
teacher_kind = {teacher_kind}
teacher_hidden = {teacher_hidden}
teacher_activation = {teacher_activation}
teacher_l2_normalize = {teacher_l2_normalize}
student_hidden = {student_hidden}
student_activation = {student_activation}

# -- evaluation --
# Verification pairs (even; first half genuine).
n_pairs = {n_pairs}
# Std of the latent perturbation that makes a genuine pair.
genuine_sigma = {genuine_sigma}
eval_seed = {eval_seed}
# Held-out samples for teacher/student agreement.
agreement_samples = {agreement_samples}

# -- output --
# Relative to this file's directory.
output_dir = {output_dir}
# Metrics records buffered between flushes.
metrics_flush_interval = {metrics_flush_interval}
# Iterations between checkpoints; 0 writes only the final checkpoint.
checkpoint_interval = {checkpoint_interval}
"#,
        n_epoch = d.n_epoch,
        n_iteration = d.n_iteration,
        batch_size = d.batch_size,
        alpha = float(d.alpha),
        c = float(d.c),
        resample_space = quoted(&d.resample_space),
        sim_source = quoted(&d.sim_source),
        net_seed = d.net_seed,
        data_seed = d.data_seed,
        d_z = d.d_z,
        d_w = d.d_w,
        d_img = d.d_img,
        d_emb = d.d_emb,
        mapping_hidden = list(&d.mapping_hidden),
        mapping_activation = quoted(&d.mapping_activation),
        generator_hidden = list(&d.generator_hidden),
        generator_activation = quoted(&d.generator_activation),
        teacher_kind = quoted(&d.teacher_kind),
        teacher_hidden = list(&d.teacher_hidden),
        teacher_activation = quoted(&d.teacher_activation),
        teacher_l2_normalize = d.teacher_l2_normalize,
        student_hidden = list(&d.student_hidden),
        student_activation = quoted(&d.student_activation),
        n_pairs = d.n_pairs,
        genuine_sigma = float(d.genuine_sigma),
        eval_seed = d.eval_seed,
        agreement_samples = d.agreement_samples,
        output_dir = quoted(&d.output_dir),
        metrics_flush_interval = d.metrics_flush_interval,
        checkpoint_interval = d.checkpoint_interval,
    )
}
