use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"scenario = "synthetic"
seed = 3
[data]
n = 12
m = 24
s_min = 1
s_max = 3
batch_size = 16
[network]
fixed_depth = 3
adaptive_depth = 4
[train]
fixed_batches = 12
stage1_batches = 8
stage2_batches = 8
plateau_patience = 4
[eval]
holdout_batches = 1
epsilons = [0.5, 0.2, 0.05]
"#;

fn adun(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adun")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = adun(dir.path(), &["experiment", "--config", "c.toml", "--dry-run", "--out", "run"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("pretrain") && text.contains("stage 1"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\ntau = -1.0\n[eval]\nholdout_batches = 0\n").unwrap();
    let o = adun(dir.path(), &["experiment", "--config", "bad.toml"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("tau") && err.contains("holdout_batches"), "{err}");
    assert_eq!(code(&adun(dir.path(), &["experiment", "--config", "missing.toml"])), 4);
    assert_eq!(code(&adun(dir.path(), &["infer", "--checkpoint", "no.adnw", "--dataset", "no.adun"])), 4);
    assert_eq!(code(&adun(dir.path(), &["solve", "--algo", "ista", "--lambda", "-1"])), 2);
    assert_eq!(code(&adun(dir.path(), &["grad-check", "--tol", "0"])), 3);
}

#[test]
fn train_then_infer_eval_sweep_compare() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.toml"), TINY).unwrap();
    assert_eq!(code(&adun(p, &["gen-data", "--config", "c.toml", "--holdout", "--dataset-out", "data"])), 0);
    assert_eq!(code(&adun(p, &["train", "--config", "c.toml", "--out", "ck/adaptive.adnw"])), 0);
    let history = fs::read_to_string(p.join("ck/history.csv")).unwrap();
    assert!(history.starts_with("batch,loss,lr,stage\n"));
    assert!(history.contains(",fixed\n") && history.contains(",halting_only\n") && history.contains(",fine_tune_all\n"));
    assert_eq!(code(&adun(p, &["train", "--config", "c.toml", "--fixed-only", "--out", "ck/fixed.adnw"])), 0);

    let ds = "data/batch_00000.adun";
    assert_eq!(code(&adun(p, &["infer", "--checkpoint", "ck/adaptive.adnw", "--dataset", ds, "--epsilon", "0.2", "--out", "inf"])), 0);
    let infer = fs::read_to_string(p.join("inf/infer.csv")).unwrap();
    assert_eq!(infer.lines().next().unwrap(), "sample_id,exit_layer,nmse_db,h1,h2,h3,h4");
    assert_eq!(infer.lines().count(), 17);
    let hist = fs::read_to_string(p.join("inf/histogram.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 16);

    assert_eq!(code(&adun(p, &["eval", "--checkpoint", "ck/adaptive.adnw", "--dataset", ds, "--out", "ev"])), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ev/eval.json")).unwrap()).unwrap();
    for key in ["epsilon", "samples", "nmse_db_mean", "error_std", "success_rate", "avg_exit_layer", "exit_histogram", "per_sparsity"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(code(&adun(p, &["sweep", "--checkpoint", "ck/adaptive.adnw", "--dataset", ds, "--epsilons", "0.1,0.5", "--out", "sw"])), 0);
    let sweep = fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    assert!(sweep.lines().nth(1).unwrap().starts_with("0.5,"));
    assert_eq!(
        code(&adun(p, &["compare", "--fixed", "ck/fixed.adnw", "--adaptive", "ck/adaptive.adnw", "--dataset", ds, "--out", "cmp"])),
        0
    );
    assert!(fs::read_to_string(p.join("cmp/comparison.csv")).unwrap().starts_with("epsilon,avg_layers_adaptive,nmse_adaptive_db,nmse_fixed_db"));
}

#[test]
fn solve_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    for algo in ["ista", "pgd-l1", "pgd-l0"] {
        let o = adun(dir.path(), &["solve", "--algo", algo, "--n", "20", "--m", "40", "--s", "3", "--iters", "50", "--out", algo]);
        assert_eq!(code(&o), 0, "{algo}");
        let trace = fs::read_to_string(dir.path().join(algo).join("trace.csv")).unwrap();
        assert_eq!(trace.lines().next().unwrap(), "iter,objective,error_vs_truth");
    }
    let o = adun(dir.path(), &["solve", "--algo", "oracle-pgd", "--n", "40", "--m", "80", "--sparsities", "2,3", "--iters", "20", "--out", "oracle"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("oracle/oracle.csv").exists());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    fs::create_dir(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/.adun.lock"), "1").unwrap();
    assert_eq!(code(&adun(dir.path(), &["experiment", "--config", "c.toml", "--out", "run"])), 4);
}
