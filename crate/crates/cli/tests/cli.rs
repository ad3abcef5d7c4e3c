use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use synthdistill::distill::{FrozenWorld, TrainerState};
use synthdistill::eval::{self, EvalReport};
use synthdistill::nets::{MlpParams, Student};
use synthdistill_cli::commands::{self, AblateOptions, GradcheckArgs, TrainOptions};
use synthdistill_cli::metrics::read_metrics;
use synthdistill_cli::{Checkpoint, RunConfigFile};

const SMALL: &str = "n_iteration = 20\nbatch_size = 16\nn_pairs = 200\nagreement_samples = 200\ncheckpoint_interval = 0\n";

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthdistill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn hundred_iterations_write_hundred_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_iteration = 100\nbatch_size = 16\n");
    let out = bin(&["train", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = dir.path().join("run");
    let recs = read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 100);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!((r.epoch, r.iteration), (1, i + 1));
        assert!(r.step2_loss.is_some());
    }
    assert_eq!(fs::read_to_string(run.join("metrics.timing.jsonl")).unwrap().lines().count(), 100);
    assert!(run.join("checkpoint.ckpt").exists());
    assert!(run.join("student.json").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let body = "n_epoch = 2\nn_iteration = 15\nbatch_size = 16\ncheckpoint_interval = 7\nmetrics_flush_interval = 4\n";
    let full_dir = dir.path().join("full");
    let part_dir = dir.path().join("part");
    fs::create_dir_all(&full_dir).unwrap();
    fs::create_dir_all(&part_dir).unwrap();
    let full_cfg = write_config(&full_dir, body);
    let part_cfg = write_config(&part_dir, body);

    commands::cmd_train(&full_cfg, &TrainOptions::default()).unwrap();
    let stopped = commands::cmd_train(
        &part_cfg,
        &TrainOptions {
            stop_after: Some(17),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert!(!stopped.finished);
    assert_eq!(stopped.global_step, 17);

    // Simulate a crash that left records past the checkpoint behind.
    let ck = part_dir.join("run/checkpoint.ckpt");
    let ck_copy = part_dir.join("at17.ckpt");
    fs::copy(&ck, &ck_copy).unwrap();
    commands::cmd_train(
        &part_cfg,
        &TrainOptions {
            resume: Some(ck_copy.clone()),
            stop_after: Some(24),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let resumed = commands::cmd_train(
        &part_cfg,
        &TrainOptions {
            resume: Some(ck_copy),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert!(resumed.finished);

    for f in ["metrics.jsonl", "checkpoint.ckpt", "student.json"] {
        assert_eq!(
            fs::read(full_dir.join("run").join(f)).unwrap(),
            fs::read(part_dir.join("run").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_rejects_a_different_config_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    commands::cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let ck = dir.path().join("run/checkpoint.ckpt");

    let cfg = write_config(dir.path(), &format!("{SMALL}n_epoch = 2\n"));
    let out = bin(&["train", "--config", s(&cfg), "--resume", s(&ck)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash mismatch"));

    let out = bin(&["train", "--config", s(&cfg), "--resume", s(&ck), "--force"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_metrics(&dir.path().join("run/metrics.jsonl")).unwrap().len(), 40);
}

#[test]
fn long_schedule_config_parses_and_starts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_epoch = 17\nn_iteration = 2000\n");
    let out = bin(&["train", "--config", s(&cfg), "--stop-after", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stopped after 2 iterations"));
    let ck = Checkpoint::load(&dir.path().join("run/checkpoint.ckpt")).unwrap();
    assert_eq!((ck.epoch, ck.iteration), (0, 2));
}

#[test]
fn invalid_config_exits_1_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_epoch = 1\nbatch_size = 8\nlearning_rate = 0.1\n");
    let out = bin(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn divergence_exits_2_and_keeps_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = bin(&["train", "--config", s(&cfg), "--stop-after", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = dir.path().join("at10.ckpt");
    fs::copy(dir.path().join("run/checkpoint.ckpt"), &ck).unwrap();

    let cfg = write_config(dir.path(), &format!("{SMALL}alpha = 1e200\nmetrics_flush_interval = 1000\n"));
    let out = bin(&["train", "--config", s(&cfg), "--resume", s(&ck), "--force"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite") && err.contains("global step 10"), "{err}");
    let recs = read_metrics(&dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| r.step1_loss.is_finite()));
}

#[test]
fn missing_config_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["train", "--config", s(&dir.path().join("nope.toml"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin(&[]).status.code(), Some(1));
    assert_eq!(bin(&["train"]).status.code(), Some(1));
    assert_eq!(bin(&["ablate", "--config", "x.toml", "--axis", "colour"]).status.code(), Some(1));
    assert!(bin(&["--help"]).status.success());
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    commands::cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let ck = dir.path().join("run/checkpoint.ckpt");

    let first = bin(&["eval", "--ckpt", s(&ck), "--config", s(&cfg)]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let written = fs::read(dir.path().join("run/eval.json")).unwrap();
    let second = bin(&["eval", "--ckpt", s(&ck), "--config", s(&cfg)]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(written, fs::read(dir.path().join("run/eval.json")).unwrap());

    let report: EvalReport = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(report.pair_count, 200);
    assert!((0.0..=1.0).contains(&report.accuracy));
}

#[test]
fn teacher_as_student_scores_teacher_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &format!("{SMALL}teacher_kind = \"realizable\"\n"));
    let file = RunConfigFile::load(&cfg_path).unwrap();
    let train = file.train();
    let world = FrozenWorld::build(&train).unwrap();

    let teacher_params: MlpParams<f64> = world.teacher.net().params().clone();
    let mut state = TrainerState::fresh(&train).unwrap();
    state.student = Student::new(teacher_params);
    let ck = dir.path().join("teacher.ckpt");
    Checkpoint::new(&train, &file.eval(), state).save(&ck).unwrap();

    let report = commands::cmd_eval(&ck, &cfg_path, false).unwrap();
    let pairs = eval::eval_pairs(&world, &file.eval()).unwrap();
    let own = eval::verification_accuracy(&world.teacher, &pairs).unwrap();
    assert_eq!(report.accuracy, own.accuracy);
    assert_eq!(report.threshold, own.threshold);
    assert!((report.mean_sim - 1.0).abs() < 1e-12);
    assert_eq!(report.mean_mse, 0.0);
}

#[test]
fn corrupted_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    commands::cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let good = fs::read_to_string(dir.path().join("run/checkpoint.ckpt")).unwrap();

    let cases = [
        ("truncated", good[..good.len() / 2].to_string(), "corrupt checkpoint"),
        ("future", good.replacen(" 1\n", " 7\n", 1), "format version 7"),
        ("foreign", "{\"hello\": 1}".to_string(), "missing header"),
        ("binary", String::from_utf8_lossy(&[0xff, 0x00, 0x13]).into_owned(), "missing header"),
    ];
    for (name, text, expect) in cases {
        let p = dir.path().join(format!("{name}.ckpt"));
        fs::write(&p, text).unwrap();
        let out = bin(&["eval", "--ckpt", s(&p), "--config", s(&cfg)]);
        assert_eq!(out.status.code(), Some(1), "{name}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(expect), "{name}: {err}");
    }
}

#[test]
fn table3_preset_runs_four_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = bin(&["ablate", "--config", s(&cfg), "--preset", "table3", "--seeds", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ab = dir.path().join("run/ablation-sampling-mode");
    let csv = fs::read_to_string(ab.join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("axis,value,n_seeds,accuracy_mean"));
    let values: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["static-N", "static-2N", "dynamic-Z", "dynamic-W"]);
    assert_eq!(fs::read_to_string(ab.join("runs.jsonl")).unwrap().lines().count(), 8);

    let records = |v: &str| read_metrics(&ab.join("cells").join(v).join("seed-1/metrics.jsonl")).unwrap();
    assert_eq!(records("static-N").len(), 20);
    assert_eq!(records("static-2N").len(), 40);
    assert!(records("static-N").iter().all(|r| r.step2_loss.is_none()));
    assert!(records("dynamic-W").iter().all(|r| r.step2_loss.is_some()));
}

#[test]
fn table5_preset_sweeps_coefficients() {
    let (axis, values) = eval::preset("table5").unwrap();
    let opts = AblateOptions::resolve(Some("table5"), None, None, 1).unwrap();
    assert_eq!(opts.axis, axis);
    assert_eq!(opts.values, values);
    let cs: Vec<f64> = values.iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(cs.first(), Some(&0.8));
    assert_eq!(cs.last(), Some(&1.5));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_iteration = 3\nbatch_size = 8\nn_pairs = 40\nagreement_samples = 40\n");
    let (grid, _) = commands::cmd_ablate(&cfg, &opts).unwrap();
    assert_eq!(grid.cells.len(), 8);
}

#[test]
fn single_cell_grid_matches_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}c = 1.2\n"));
    let opts = AblateOptions::resolve(None, Some("coefficient".parse().unwrap()), Some(vec!["1.2".into()]), 1).unwrap();
    let (_, ab) = commands::cmd_ablate(&cfg, &opts).unwrap();
    let cell = commands::cell_dir(&ab, "1.2", 0);

    commands::cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let run = dir.path().join("run");
    commands::cmd_eval(&run.join("checkpoint.ckpt"), &cfg, false).unwrap();

    for f in ["metrics.jsonl", "checkpoint.ckpt", "student.json", "eval.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(cell.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_artifacts_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_iteration = 5\nbatch_size = 8\nn_pairs = 40\nagreement_samples = 40\n");
    let opts = AblateOptions::resolve(Some("table4"), None, None, 2).unwrap();
    let (_, ab) = commands::cmd_ablate(&cfg, &opts).unwrap();
    let first: Vec<Vec<u8>> = ["summary.csv", "runs.jsonl", "grid.json"]
        .iter()
        .map(|f| fs::read(ab.join(f)).unwrap())
        .collect();
    commands::cmd_ablate(&cfg, &opts).unwrap();
    for (f, bytes) in ["summary.csv", "runs.jsonl", "grid.json"].iter().zip(first) {
        assert_eq!(fs::read(ab.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn gradcheck_default_passes() {
    let out = bin(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.ends_with("ok")), "{text}");
}

#[test]
fn gradcheck_fault_fails_and_names_layers() {
    let out = bin(&["gradcheck", "--widths", "6,5,3", "--fault", "0.01"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layer0.weight") && err.contains("layer1.bias"), "{err}");
}

#[test]
fn gradcheck_single_layer_passes() {
    let checks = commands::cmd_gradcheck(&GradcheckArgs {
        widths: Some(vec![7, 4]),
        seed: 3,
        ..GradcheckArgs::default()
    })
    .unwrap();
    assert_eq!(checks.len(), 2);
    commands::gradcheck_failures(&checks).unwrap();
}

#[test]
fn gen_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("default.toml");
    assert!(bin(&["gen-config", "--out", s(&p)]).status.success());
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.lines().filter(|l| l.starts_with('#')).count() > 10);
    let mut loaded = RunConfigFile::load(&p).unwrap();
    loaded.output_dir = RunConfigFile::default().output_dir;
    assert_eq!(loaded, RunConfigFile::default());

    assert_eq!(bin(&["gen-config", "--out", s(&p)]).status.code(), Some(1));
    assert!(bin(&["gen-config", "--out", s(&p), "--force"]).status.success());
}
