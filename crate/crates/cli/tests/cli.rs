use std::path::Path;
use std::process::{Command, Output};

use metatroll::continual::ForgettingReport;
use metatroll::meta::read_eval_csv;

const TINY: &[&str] = &[
    "encoder.d_model=8",
    "encoder.d_ff=16",
    "encoder.n_layers=1",
    "train.stage1.epochs=1",
    "train.total_tasks=8",
    "train.stage3_tasks=2",
    "train.adapter_bottleneck=2",
    "generator.shape.trolls=40",
    "generator.shape.random_non_trolls=20",
    "generator.shape.hashtag_non_trolls=20",
    "eval.episodes=2",
];

fn metatroll(dir: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metatroll"));
    cmd.current_dir(dir).env_remove("METATROLL_CONFIG");
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&metatroll(dir.path(), &[], &["generate"]));
    ok(&metatroll(dir.path(), &[], &["train"]));
    dir
}

#[test]
fn gradcheck_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&metatroll(dir.path(), &[], &["gradcheck"]));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{out}");
}

#[test]
fn generate_writes_ten_campaigns_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&metatroll(a.path(), &[], &["generate"]));
    ok(&metatroll(b.path(), &[], &["generate"]));
    let dirs: Vec<_> = std::fs::read_dir(a.path().join("data")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(dirs.len(), 10);
    for id in ["P", "G", "C"] {
        let f = |d: &Path| std::fs::read(d.join("data").join(id).join("users.jsonl")).unwrap();
        assert_eq!(f(a.path()), f(b.path()));
    }
}

#[test]
fn empty_suite_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = metatroll(dir.path(), &["generator.meta_train=[]", "generator.meta_test=[]"], &["generate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_override_and_missing_checkpoint_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(metatroll(dir.path(), &["train.gama=1"], &["gradcheck"]).status.code(), Some(1));
    let out = metatroll(dir.path(), &[], &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("state error"));
}

#[test]
fn config_file_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"generator": {"meta_train": [], "meta_test": []}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_metatroll"))
        .current_dir(dir.path())
        .env("METATROLL_CONFIG", &cfg)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_bit_reproducible() {
    let a = trained();
    let b = tempfile::tempdir().unwrap();
    ok(&metatroll(b.path(), &[], &["generate"]));
    ok(&metatroll(b.path(), &[], &["train"]));
    for f in ["stage1.json", "stage2.json", "stage3/manifest.json", "stage3/000-B.json"] {
        let read = |d: &Path| std::fs::read(d.join("checkpoints").join(f)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{f}");
    }
}

#[test]
fn skipping_stage1_keeps_the_random_encoder() {
    let dir = tempfile::tempdir().unwrap();
    ok(&metatroll(dir.path(), &[], &["generate"]));
    let stage1 = |epochs: &str| {
        ok(&metatroll(dir.path(), &["ablations.skip_stage1=true", epochs], &["train"]));
        std::fs::read(dir.path().join("checkpoints/stage1.json")).unwrap()
    };
    assert_eq!(stage1("train.stage1.epochs=1"), stage1("train.stage1.epochs=3"));
}

#[test]
fn eval_rows_parse_back() {
    let dir = trained();
    let out = ok(&metatroll(dir.path(), &["eval.n_runs=1"], &["eval", "--campaign", "G", "--campaign", "I", "--shots", "5"]));
    let rows = read_eval_csv(out.as_bytes()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.shots == 5 && r.stddev == 0.0 && r.mean == r.accuracy));
    let file = std::fs::read(dir.path().join("reports/eval.csv")).unwrap();
    assert_eq!(read_eval_csv(&file[..]).unwrap(), rows);

    let out = ok(&metatroll(dir.path(), &["eval.n_runs=3"], &["eval", "--campaign", "U"]));
    let rows = read_eval_csv(out.as_bytes()).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r.shots == 10).count(), 3);

    assert_eq!(metatroll(dir.path(), &[], &["eval", "--campaign", "nope"]).status.code(), Some(1));
}

#[test]
fn continual_reports() {
    let dir = trained();
    let out = ok(&metatroll(dir.path(), &[], &["continual", "--plan", "G,I,U,C"]));
    let report = ForgettingReport::read_csv(out.as_bytes()).unwrap();
    assert_eq!(report.order, ["G", "I", "U", "C"]);
    for k in 1..=4 {
        assert_eq!(report.cells.iter().filter(|c| c.checkpoint == k).count(), k);
        assert_eq!(report.back_cells().filter(|c| c.checkpoint == k).count(), k - 1);
    }
    let file = std::fs::read(dir.path().join("reports/forgetting_registry.csv")).unwrap();
    assert_eq!(ForgettingReport::read_csv(&file[..]).unwrap(), report);

    let single = ForgettingReport::read_csv(ok(&metatroll(dir.path(), &[], &["continual", "--plan", "G"])).as_bytes()).unwrap();
    assert_eq!(single.cells.len(), 1);
    assert_eq!(single.back_cells().count(), 0);

    assert_eq!(metatroll(dir.path(), &[], &["continual", "--plan", "G,I,G"]).status.code(), Some(1));
    ok(&metatroll(dir.path(), &[], &["continual", "--plan", "G,I", "--mode", "shared"]));
    assert!(dir.path().join("reports/forgetting_shared_adapter.csv").is_file());
}

#[test]
fn adapt_saves_a_bundle() {
    let dir = trained();
    let out = ok(&metatroll(dir.path(), &[], &["adapt", "--campaign", "C", "--shots", "5"]));
    assert!(out.contains("held-out accuracy"));
    assert!(dir.path().join("checkpoints/adapted/C.json").is_file());
}
