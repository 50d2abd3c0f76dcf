//! End-to-end runs of the `ruas` binary on tiny synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "search": {"epochs": 1},
  "train": {"epochs": 1, "pretrain_epochs": 1},
  "data": {"synthetic": {"count": 4, "size": 12}},
  "architecture": {
    "scene": ["3-C", "1-C", "3-RC", "SC", "1-RC", "3-2-DC", "3-C"],
    "task": ["3-C", "3-C", "3-C", "3-C", "3-C", "3-C", "3-C"]
  }
}"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Sandbox { dir: tempfile::tempdir().unwrap() };
        fs::write(s.path("cfg.json"), TINY).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ruas"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("RUAS_SEED")
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap()
    }

    /// Synthetic data on disk plus a trained checkpoint at `t/model.ckpt`.
    fn trained(&self) {
        self.ok(&["synth", "--out", "data", "--count", "4", "--size", "12"]);
        self.ok(&["train", "--config", "cfg.json", "--data", "data", "--out", "t"]);
    }
}

fn csv_rows(text: &str) -> usize {
    text.lines().count() - 1
}

fn count_files(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().count()
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let s = Sandbox::new();
    assert_eq!(s.code(&["search", "--config", "cfg.json", "--strategy", "bogus", "--out", "o"]), 2);
    assert_eq!(s.code(&["train", "--config", "cfg.json", "--strategy", "sideways", "--out", "o"]), 2);
}

#[test]
fn unknown_config_key_and_missing_architecture_exit_2() {
    let s = Sandbox::new();
    fs::write(s.path("bad.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(s.code(&["search", "--config", "bad.json", "--out", "o"]), 2);
    fs::write(s.path("noarch.json"), r#"{"train": {"epochs": 1}}"#).unwrap();
    assert_eq!(s.code(&["train", "--config", "noarch.json", "--out", "o"]), 2);
}

#[test]
fn empty_data_dir_is_a_config_error() {
    let s = Sandbox::new();
    fs::create_dir(s.path("empty")).unwrap();
    assert_eq!(s.code(&["search", "--config", "cfg.json", "--data", "empty", "--out", "o"]), 2);
}

#[test]
fn corrupt_png_is_an_io_error() {
    let s = Sandbox::new();
    s.trained();
    fs::write(s.path("broken.png"), b"not a png").unwrap();
    let out = s.run(&["enhance", "--model", "t/model.ckpt", "--input", "broken.png", "--out", "e"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
}

#[test]
fn search_is_deterministic_and_writes_artifacts() {
    let s = Sandbox::new();
    s.ok(&["search", "--config", "cfg.json", "--out", "a", "--seed", "3"]);
    s.ok(&["search", "--config", "cfg.json", "--out", "b", "--seed", "3"]);
    for f in ["history.csv", "alpha_final.json", "arch.dot"] {
        assert_eq!(s.read(&format!("a/{f}")), s.read(&format!("b/{f}")), "{f}");
    }
    assert_eq!(csv_rows(&s.read("a/history.csv")), 2);
    assert_eq!(s.read("a/arch.dot").matches("edge ").count(), 14);
    assert!(s.read("a/run.log").contains("search finished"));
    let echoed: serde_json::Value = serde_json::from_str(&s.read("a/run_config.json")).unwrap();
    assert_eq!(echoed["seed"], 3);
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let s = Sandbox::new();
    let seed_of = |out: &str| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&s.read(&format!("{out}/run_config.json"))).unwrap();
        v["seed"].as_u64().unwrap()
    };
    let run_with_env = |args: &[&str]| {
        let st = Command::new(env!("CARGO_BIN_EXE_ruas"))
            .args(args)
            .current_dir(s.path(""))
            .env("RUAS_SEED", "22")
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(st.success());
    };
    fs::write(
        s.path("zero.json"),
        r#"{"seed": 11, "search": {"epochs": 0}, "data": {"synthetic": {"count": 4, "size": 12}}}"#,
    )
    .unwrap();
    run_with_env(&["search", "--config", "zero.json", "--out", "env"]);
    run_with_env(&["search", "--config", "zero.json", "--seed", "33", "--out", "flag"]);
    s.ok(&["search", "--config", "zero.json", "--out", "cfg"]);
    assert_eq!((seed_of("flag"), seed_of("env"), seed_of("cfg")), (33, 22, 11));
}

#[test]
fn train_enhance_eval_round_trip() {
    let s = Sandbox::new();
    s.trained();
    assert!(csv_rows(&s.read("t/curve.csv")) >= 2);
    s.ok(&["enhance", "--model", "t/model.ckpt", "--input", "data/low", "--out", "e", "--dump-stages", "--variant", "ruas_a"]);
    for id in ["img000", "img001", "img002", "img003"] {
        assert!(s.path(&format!("e/{id}.png")).is_file());
        // Three stages with t and u each, plus the noise map.
        assert_eq!(count_files(&s.path(&format!("e/{id}"))), 7);
    }
    s.ok(&["enhance", "--model", "t/model.ckpt", "--input", "data/low/img001.png", "--out", "one", "--dump-stages", "--variant", "ruas_s"]);
    assert_eq!(count_files(&s.path("one/img001")), 6);
    s.ok(&["eval", "--model", "t/model.ckpt", "--data", "data", "--out", "v"]);
    let metrics = s.read("v/metrics.csv");
    assert_eq!(csv_rows(&metrics), 5);
    assert!(metrics.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn every_warm_start_mode_renders_stages() {
    let s = Sandbox::new();
    s.trained();
    for mode in ["fixed", "no_rectify", "rectify"] {
        let out = format!("w_{mode}");
        s.ok(&["enhance", "--model", "t/model.ckpt", "--input", "data/low/img000.png", "--out", &out, "--dump-stages", "--warm-start", mode]);
        assert_eq!(count_files(&s.path(&format!("{out}/img000"))), 6);
    }
}

#[test]
fn checkpoint_config_mismatch_exits_2() {
    let s = Sandbox::new();
    s.trained();
    fs::write(s.path("other.json"), r#"{"scene": {"eta": 0.5}}"#).unwrap();
    let out = s.run(&["enhance", "--config", "other.json", "--model", "t/model.ckpt", "--input", "data/low", "--out", "e"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn compare_strategies_reports_three_rows() {
    let s = Sandbox::new();
    s.ok(&["compare-strategies", "--config", "cfg.json", "--out", "c"]);
    let csv = s.read("c/strategies.csv");
    assert_eq!(csv_rows(&csv), 3);
    for k in ["global", "independent", "cooperative"] {
        assert!(csv.contains(&format!("\n{k},")), "{k}");
        assert!(s.path(&format!("c/history_{k}.csv")).is_file());
    }
}

#[test]
fn fixed_op_and_ablate_k_tables() {
    let s = Sandbox::new();
    fs::write(
        s.path("zero.json"),
        TINY.replace(r#""train": {"epochs": 1, "pretrain_epochs": 1}"#, r#""train": {"epochs": 0, "pretrain_epochs": 0}"#),
    )
    .unwrap();
    s.ok(&["fixed-op", "--config", "zero.json", "--out", "f"]);
    assert_eq!(csv_rows(&s.read("f/fixed_op.csv")), 8);
    s.ok(&["ablate-k", "--config", "zero.json", "--k-list", "1..3", "--out", "k"]);
    let csv = s.read("k/ablation.csv");
    assert_eq!(csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["1", "2", "3"]);
    assert_eq!(s.code(&["ablate-k", "--config", "zero.json", "--k-list", "3..1", "--out", "k2"]), 2);
}
