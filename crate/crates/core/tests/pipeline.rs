use std::fs;

use eve::harness::{load_config, run_stderr, run_training, write_csv_file, StderrConfig, TrainConfig};
use eve::optim::Variant;

const HEADER: &str =
    "step,train_loss,train_accuracy,eval_loss,eval_accuracy,step_length,per_coord_abs_mean,step_length_std";

#[test]
fn config_file_to_metrics_file_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "hidden = [6]\nsteps = 120\neval_every = 40\nbatch_size = 8\nseed = 17\n",
    )
    .unwrap();
    let c: TrainConfig = load_config(&cfg).unwrap();
    let mut files = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("m{k}.csv"));
        write_csv_file(&run_training(&c).unwrap().rows, &out).unwrap();
        files.push(fs::read_to_string(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let lines: Vec<_> = files[0].lines().collect();
    assert_eq!(lines[0], HEADER);
    // step 0 plus every 40th step
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[4].starts_with("120,"));
}

#[test]
fn unit_batch_eve_reproduces_adam_metrics() {
    let base = TrainConfig {
        batch_size: 1,
        steps: 300,
        eval_every: 50,
        seed: 4,
        ..TrainConfig::default()
    };
    let adam = run_training(&TrainConfig {
        optimizer: Variant::Adam,
        ..base.clone()
    })
    .unwrap();
    let eve = run_training(&TrainConfig {
        optimizer: Variant::Eve,
        ..base
    })
    .unwrap();
    assert_eq!(adam.rows.len(), eve.rows.len());
    for (a, e) in adam.rows.iter().zip(&eve.rows) {
        for (x, y) in [
            (a.train_loss, e.train_loss),
            (a.eval_loss, e.eval_loss),
            (a.step_length, e.step_length),
        ] {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "step {}: {x} vs {y}", a.step);
        }
    }
}

#[test]
fn file_dataset_runs_with_explicit_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("xor-ish.csv");
    let mut text = String::from("# x0, x1, label\n");
    for i in 0..40 {
        let (a, b) = ((i % 2) as f64, ((i / 2) % 2) as f64);
        text.push_str(&format!("{}, {}, {}\n", a * 2.0 - 1.0, b * 2.0 - 1.0, a));
    }
    fs::write(&data, text).unwrap();
    let cfg = dir.path().join("file.toml");
    fs::write(
        &cfg,
        format!(
            "task = \"file-dataset\"\ndata_path = {:?}\nloss = \"logistic\"\nsteps = 400\neval_every = 400\nalpha = 0.05\nbatch_size = 4\n",
            data.display().to_string()
        ),
    )
    .unwrap();
    let c: TrainConfig = load_config(&cfg).unwrap();
    let run = run_training(&c).unwrap();
    assert_eq!(run.summary.final_train_accuracy, Some(1.0));
    assert!(run.summary.final_train_loss < run.summary.initial_train_loss);
}

#[test]
fn missing_and_malformed_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_config::<TrainConfig>(&dir.path().join("absent.toml")).is_err());
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "batch_size = -3\n").unwrap();
    assert!(load_config::<TrainConfig>(&bad).is_err());
    let c = TrainConfig {
        batch_size: 5000,
        examples: 100,
        ..TrainConfig::default()
    };
    assert!(run_training(&c).is_err());
}

#[test]
fn stderr_report_unit_batch_ratio_is_one() {
    let c = StderrConfig {
        n: 64,
        batch_sizes: vec![1, 4],
        trials: 1000,
        ..StderrConfig::default()
    };
    let rows = run_stderr(&c).unwrap();
    assert_eq!(rows[0].ratio, 1.0);
    assert!(rows[1].ratio < 1.0);
    assert!(run_stderr(&StderrConfig { trials: 999, ..c }).is_err());
}
