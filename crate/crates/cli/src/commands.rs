use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use synthdistill::distill::{TrainConfig, Trainer};
use synthdistill::eval::{self, AblationAxis, AblationGrid, EvalConfig, EvalReport};
use synthdistill::gradcheck::{self, GradcheckOptions, TensorCheck};
use synthdistill::nets::{NetSpec, OutputActivation};
use synthdistill::numcore::Activation;

use crate::checkpoint::Checkpoint;
use crate::config::{default_config_text, RunConfigFile};
use crate::error::CliError;
use crate::metrics::MetricsWriter;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const STUDENT_FILE: &str = "student.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint whose config hash differs from the config.
    pub force: bool,
    /// Stop once this many iterations have completed, checkpointing there.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub global_step: u64,
    pub finished: bool,
    pub last_step1_loss: Option<f64>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn cmd_gen_config(out: &Path, overwrite: bool) -> Result<(), CliError> {
    if out.exists() && !overwrite {
        return Err(CliError::Config(format!(
            "{} already exists (pass --force to overwrite)",
            out.display()
        )));
    }
    fs::write(out, default_config_text()).map_err(|e| CliError::io(out, e))
}

pub fn cmd_train(config_path: &Path, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    let file = RunConfigFile::load(config_path)?;
    let train = file.train();
    let eval = file.eval();
    let dir = file.output_dir.clone();
    create_dir(&dir)?;
    let metrics_path = dir.join(METRICS_FILE);

    let (mut trainer, mut metrics) = match &opts.resume {
        Some(ck_path) => {
            let ck = Checkpoint::load(ck_path)?;
            ck.check_config(&train, opts.force, ck_path)?;
            let keep = ck.state.global_step as usize;
            info!("resuming from {} at iteration {keep}", ck_path.display());
            let trainer = Trainer::resume(train.clone(), ck.state)?;
            (trainer, MetricsWriter::resume(&metrics_path, keep, file.metrics_flush_interval)?)
        }
        None => (
            Trainer::new(train.clone())?,
            MetricsWriter::create(&metrics_path, file.metrics_flush_interval)?,
        ),
    };

    let total = train.total_iterations();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let ck_path = dir.join(CHECKPOINT_FILE);
    let mut last = None;
    while trainer.state().global_step < stop {
        let r = match trainer.train_iteration() {
            Ok(r) => r,
            Err(e) => {
                metrics.flush()?;
                return Err(e.into());
            }
        };
        metrics.write(&r)?;
        last = Some(r.step1_loss);
        let g = trainer.state().global_step;
        if file.checkpoint_interval > 0 && g % file.checkpoint_interval as u64 == 0 && g < stop {
            metrics.flush()?;
            Checkpoint::new(&train, &eval, trainer.state().clone()).save(&ck_path)?;
            info!("iteration {g}/{total}: loss {:.3e}, checkpoint written", r.step1_loss);
        }
    }
    metrics.flush()?;
    Checkpoint::new(&train, &eval, trainer.state().clone()).save(&ck_path)?;

    let finished = trainer.is_finished();
    if finished {
        write_json(&dir.join(STUDENT_FILE), &trainer.state().student)?;
    }
    Ok(TrainSummary {
        output_dir: dir,
        global_step: trainer.state().global_step,
        finished,
        last_step1_loss: last,
    })
}

/// Evaluates the checkpointed student and writes `eval.json` to the output directory.
pub fn cmd_eval(ckpt_path: &Path, config_path: &Path, force: bool) -> Result<EvalReport, CliError> {
    let file = RunConfigFile::load(config_path)?;
    let train = file.train();
    let eval = file.eval();
    let ck = Checkpoint::load(ckpt_path)?;
    ck.check_config(&train, force, ckpt_path)?;
    let report = evaluate_state(&train, &eval, &ck)?;
    create_dir(&file.output_dir)?;
    write_json(&file.output_dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

fn evaluate_state(train: &TrainConfig, eval: &EvalConfig, ck: &Checkpoint) -> Result<EvalReport, CliError> {
    let world = synthdistill::distill::FrozenWorld::build(train)?;
    let pairs = eval::eval_pairs(&world, eval)?;
    Ok(eval::evaluate(&ck.state.student, &world, &pairs, eval)?)
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub n_seeds: usize,
}

impl AblateOptions {
    /// Resolves a preset name, or explicit axis and values.
    pub fn resolve(
        preset: Option<&str>,
        axis: Option<AblationAxis>,
        values: Option<Vec<String>>,
        n_seeds: usize,
    ) -> Result<Self, CliError> {
        let (axis, values) = match (preset, axis, values) {
            (Some(p), None, None) => eval::preset(p)?,
            (Some(p), a, v) => {
                let (pa, pv) = eval::preset(p)?;
                if a.is_some_and(|a| a != pa) {
                    return Err(CliError::Config(format!("preset {p} sweeps {pa}, not {}", a.unwrap())));
                }
                (pa, v.unwrap_or(pv))
            }
            (None, Some(a), Some(v)) => (a, v),
            (None, _, _) => return Err(CliError::Config("ablate needs --preset, or --axis with --values".into())),
        };
        if n_seeds == 0 {
            return Err(CliError::Config("--seeds must be positive".into()));
        }
        Ok(Self { axis, values, n_seeds })
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    axis: String,
    value: &'a str,
    n_seeds: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    sim_mean: f64,
    sim_std: f64,
    mse_mean: f64,
    mse_std: f64,
}

fn dir_name(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Directory holding the artifacts of one `(value, seed)` cell.
pub fn cell_dir(ablation_dir: &Path, value: &str, seed_index: usize) -> PathBuf {
    ablation_dir
        .join("cells")
        .join(dir_name(value))
        .join(format!("seed-{seed_index}"))
}

/// Runs the grid and writes `summary.csv`, `runs.jsonl`, `grid.json` and one
/// directory per cell under `<output_dir>/ablation-<axis>/`.
pub fn cmd_ablate(config_path: &Path, opts: &AblateOptions) -> Result<(AblationGrid, PathBuf), CliError> {
    let file = RunConfigFile::load(config_path)?;
    let base = file.train();
    let eval = file.eval();
    let out = file.output_dir.join(format!("ablation-{}", opts.axis));
    create_dir(&out)?;
    info!(
        "ablating {} over {:?} with {} seeds",
        opts.axis, opts.values, opts.n_seeds
    );
    let grid = eval::run_ablation(&base, &eval, opts.axis, &opts.values, opts.n_seeds)?;

    for run in &grid.runs {
        let dir = cell_dir(&out, &run.value, run.seed_index);
        create_dir(&dir)?;
        let mut w = MetricsWriter::create(&dir.join(METRICS_FILE), usize::MAX)?;
        for r in &run.metrics {
            w.write(r)?;
        }
        w.flush()?;
        let mut cfg = eval::cell_config(&base, opts.axis, &run.value)?;
        cfg.data_seed = run.data_seed;
        if let Some(state) = &run.state {
            Checkpoint::new(&cfg, &eval, state.clone()).save(&dir.join(CHECKPOINT_FILE))?;
            write_json(&dir.join(STUDENT_FILE), &state.student)?;
        }
        write_json(&dir.join(EVAL_FILE), &run.report)?;
    }

    let csv_path = out.join("summary.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e.into()))?;
    for c in &grid.cells {
        csv.serialize(CsvRow {
            axis: grid.axis.to_string(),
            value: &c.value,
            n_seeds: c.n_seeds,
            accuracy_mean: c.accuracy_mean,
            accuracy_std: c.accuracy_std,
            sim_mean: c.sim_mean,
            sim_std: c.sim_std,
            mse_mean: c.mse_mean,
            mse_std: c.mse_std,
        })
        .map_err(|e| CliError::io(&csv_path, e.into()))?;
    }
    csv.flush().map_err(|e| CliError::io(&csv_path, e))?;

    let runs_path = out.join("runs.jsonl");
    let mut lines = String::new();
    for run in &grid.runs {
        lines.push_str(&serde_json::to_string(run).expect("run serializes"));
        lines.push('\n');
    }
    fs::write(&runs_path, lines).map_err(|e| CliError::io(&runs_path, e))?;
    write_json(&out.join("grid.json"), &grid)?;
    Ok((grid, out))
}

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    pub seed: u64,
    /// Full layer widths, input to output. Defaults to [`gradcheck::TOY_WIDTHS`].
    pub widths: Option<Vec<usize>>,
    pub activation: Activation,
    pub batch: usize,
    /// Test hook: offset added to every analytic gradient entry.
    pub fault: Option<f64>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            seed: 0,
            widths: None,
            activation: Activation::Tanh,
            batch: gradcheck::TOY_BATCH,
            fault: None,
        }
    }
}

/// Per-tensor report; fails with the offending tensors listed.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<TensorCheck>, CliError> {
    let widths = args.widths.clone().unwrap_or_else(|| gradcheck::TOY_WIDTHS.to_vec());
    let spec = NetSpec::uniform(widths, args.activation, OutputActivation::None)?;
    if args.batch == 0 {
        return Err(CliError::Config("batch must be positive".into()));
    }
    let opts = GradcheckOptions {
        fault: args.fault,
        ..GradcheckOptions::default()
    };
    Ok(gradcheck::check_seeded(&spec, args.seed, args.batch, &opts)?)
}

pub fn gradcheck_failures(checks: &[TensorCheck]) -> Result<(), CliError> {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} (max rel. error {:.3e})", c.name, c.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failed.join(", ")))
    }
}
