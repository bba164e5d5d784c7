use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.n_movies=6",
    "--set",
    "data.eval_movies=4",
    "--set",
    "contrastive.steps=3",
    "--set",
    "mask.steps=3",
    "--set",
    "probe.epochs=1",
    "--set",
    "probe.e2e_epochs=1",
    "--set",
    "retrieval.pool_size=16",
];

fn evctx(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evctx"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(evctx(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(evctx(dir.path(), &["ablate", "--axis", "depth"]).status.code(), Some(2));
}

#[test]
fn bad_config_key_is_reported_with_its_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = evctx(dir.path(), &["--set", "mask.bogus=1", "generate-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("code=config"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.push("pretrain-txe");
    let o = evctx(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("code=missing_checkpoint"), "{}", stderr(&o));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "1\n").unwrap();
    let o = evctx(dir.path(), &["generate-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("code=locked"), "{}", stderr(&o));
}

#[test]
fn generate_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut args = TINY.to_vec();
        args.extend(["--seed", "7", "generate-data"]);
        assert!(evctx(d.path(), &args).status.success());
    }
    for f in ["train.evsq", "eval.evsq", "config.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stages_run_in_sequence_and_log_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate-data", "pretrain-backbone", "pretrain-txe", "probe", "eval"] {
        let mut args = TINY.to_vec();
        args.push(stage);
        let o = evctx(dir.path(), &args);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let metrics = evctx_core::runtime::metrics::read_metrics(dir.path().join("metrics.jsonl")).unwrap();
    assert!(metrics.iter().any(|r| r.task.starts_with("verb")));
    assert!(metrics.iter().any(|r| r.task.starts_with("retrieval")));
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn changed_data_config_is_not_silently_reused() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.push("generate-data");
    assert!(evctx(dir.path(), &args).status.success());
    let mut args = TINY.to_vec();
    args.extend(["--set", "data.n_movies=7", "pretrain-backbone"]);
    let o = evctx(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("code=config"), "{}", stderr(&o));
}
