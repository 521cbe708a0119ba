use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(
            w.path("prompts.txt"),
            "compute 3 + 4\nlet x be the sum of y\nfind the value\n",
        )
        .unwrap();
        std::fs::write(
            w.path("text.txt"),
            "the sum of two numbers is a number. ".repeat(20),
        )
        .unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn rac(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rac"))
            .args(args)
            .env_remove("RAC_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.rac(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn model(&self, name: &str, seed: &str) -> String {
        let out = self.p(name);
        self.ok(&[
            "gen-model",
            "--d-model",
            "16",
            "--layers",
            "2",
            "--heads",
            "2",
            "--max-positions",
            "128",
            "--seed",
            seed,
            "--out",
            &out,
        ]);
        out
    }

    fn calib(&self, model: &str, name: &str, extra: &[&str]) -> Value {
        let prompts = self.p("prompts.txt");
        let out = self.p(name);
        let mut args = vec![
            "calibrate",
            "--model",
            model,
            "--prompts",
            &prompts,
            "--out",
            &out,
        ];
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn sha(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

#[test]
fn validation_errors_exit_one() {
    let w = Work::new();
    assert_eq!(
        code(&w.rac(&["gen-model", "--layers", "2", "--heads", "2"])),
        1
    );
    assert_eq!(
        code(&w.rac(&[
            "gen-model",
            "--d-model",
            "10",
            "--layers",
            "2",
            "--heads",
            "4",
            "--out",
            &w.p("x.tmc")
        ])),
        1
    );
    assert!(!w.path("x.tmc").exists());
    let m = w.model("m.tmc", "1");
    let prompts = w.p("prompts.txt");
    let c = w.p("c.bin");
    assert_eq!(
        code(&w.rac(&[
            "calibrate",
            "--model",
            &m,
            "--mode",
            "off-policy",
            "--prompts",
            &prompts,
            "--out",
            &c
        ])),
        1
    );
    assert_eq!(
        code(&w.rac(&[
            "calibrate",
            "--model",
            &m,
            "--mode",
            "rac",
            "--prompts",
            &prompts,
            "--t-max",
            "0",
            "--out",
            &c
        ])),
        1
    );
    w.calib(&m, "c.bin", &["--mode", "rac", "--t-max", "8"]);
    assert_eq!(
        code(&w.rac(&[
            "prune",
            "--model",
            &m,
            "--calib",
            &c,
            "--sparsity",
            "0.5",
            "--nm",
            "2:4"
        ])),
        1
    );
    assert_eq!(
        code(&w.rac(&["prune", "--model", &m, "--calib", &c, "--sparsity", "1.5"])),
        1
    );
}

#[test]
fn missing_inputs_exit_three() {
    let w = Work::new();
    let o = w.rac(&[
        "eval",
        "--model",
        &w.p("nope.tmc"),
        "--text",
        &w.p("text.txt"),
    ]);
    assert_eq!(code(&o), 3);
    let m = w.model("m.tmc", "1");
    let o = w.rac(&[
        "prune",
        "--model",
        &m,
        "--calib",
        &w.p("nope.bin"),
        "--sparsity",
        "0.5",
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gen_model_is_byte_reproducible() {
    let w = Work::new();
    let a = w.model("a.tmc", "5");
    let b = w.model("b.tmc", "5");
    let c = w.model("c.tmc", "6");
    assert_eq!(sha(Path::new(&a)), sha(Path::new(&b)));
    assert_ne!(sha(Path::new(&a)), sha(Path::new(&c)));
}

#[test]
fn decode_tokens_depend_on_mode() {
    let w = Work::new();
    let m = w.model("m.tmc", "2");
    let rac = w.calib(&m, "rac.bin", &["--mode", "rac", "--t-max", "16"]);
    let prompt = w.calib(&m, "p.bin", &["--mode", "prompt-only"]);
    assert!(rac["n_decode"].as_u64().unwrap() > 0);
    assert_eq!(prompt["n_decode"].as_u64().unwrap(), 0);
    assert_eq!(rac["n_prompt"], prompt["n_prompt"]);
}

#[test]
fn prune_zero_sparsity_keeps_model_and_nm_is_exact() {
    let w = Work::new();
    let m = w.model("m.tmc", "3");
    w.calib(&m, "c.bin", &["--mode", "rac", "--t-max", "8"]);
    let c = w.p("c.bin");
    let before = w.ok(&["eval", "--model", &m, "--text", &w.p("text.txt")]);
    let out = w.ok(&[
        "prune",
        "--model",
        &m,
        "--calib",
        &c,
        "--sparsity",
        "0",
        "--out",
        &w.p("same.tmc"),
    ]);
    assert_eq!(out["output_model_hash"], before["model_hash"]);

    w.ok(&[
        "prune",
        "--model",
        &m,
        "--calib",
        &c,
        "--nm",
        "2:4",
        "--out",
        &w.p("nm.tmc"),
    ]);
    let report: Value =
        serde_json::from_slice(&std::fs::read(w.path("nm.report.json")).unwrap()).unwrap();
    for r in report["refs"].as_array().unwrap() {
        let audit = &r["mask_audit"];
        assert_eq!(audit["units_on_target"], audit["units"]);
        assert_eq!(audit["max_deviation"], 0);
        assert!((r["achieved_sparsity"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    }
    assert!(report["refs"][0].get("seconds").is_none());
}

#[test]
fn diagnose_outputs_are_consistent() {
    let w = Work::new();
    let m = w.model("m.tmc", "4");
    w.calib(&m, "c.bin", &["--mode", "rac", "--t-max", "8"]);
    w.ok(&[
        "prune",
        "--model",
        &m,
        "--calib",
        &w.p("c.bin"),
        "--method",
        "magnitude",
        "--sparsity",
        "0.5",
        "--out",
        &w.p("mag.tmc"),
    ]);
    let mag = format!("a={}", w.p("mag.tmc"));
    let again = format!("b={}", w.p("mag.tmc"));
    let out_dir = w.p("diag");
    let summary = w.ok(&[
        "diagnose",
        "--dense",
        &m,
        "--compressed",
        &mag,
        "--compressed",
        &again,
        "--prompts",
        &w.p("prompts.txt"),
        "--max-new",
        "12",
        "--out-dir",
        &out_dir,
    ]);

    let mut ratios = csv::Reader::from_path(w.path("diag/ratios.csv")).unwrap();
    for rec in ratios.records() {
        let rec = rec.unwrap();
        if !rec[2].is_empty() {
            assert_eq!(rec[2].parse::<f64>().unwrap(), 1.0);
        }
    }

    let mut errors = csv::Reader::from_path(w.path("diag/errors.csv")).unwrap();
    let (mut sum, mut n, mut rows) = (0.0, 0usize, 0usize);
    for rec in errors.records() {
        let rec = rec.unwrap();
        rows += 1;
        if &rec[3] == "a" && &rec[2] == "decode" {
            sum += rec[4].parse::<f64>().unwrap();
            n += 1;
        }
    }
    assert_eq!(
        n,
        summary["methods"][0]["decode_tokens"].as_u64().unwrap() as usize
    );
    let tokens: u64 = ["prompt_tokens", "decode_tokens"]
        .iter()
        .map(|k| summary["methods"][0][k].as_u64().unwrap())
        .sum();
    assert_eq!(rows as u64, 2 * tokens);
    assert_eq!(summary["methods"][0]["label"], "a");
    let mean = summary["methods"][0]["mean_decode_error"].as_f64().unwrap();
    assert!((mean - sum / n as f64).abs() <= 1e-6 * mean.abs().max(1.0));
}

#[test]
fn eval_respects_budget() {
    let w = Work::new();
    let m = w.model("m.tmc", "5");
    let r = w.ok(&[
        "eval",
        "--model",
        &m,
        "--text",
        &w.p("text.txt"),
        "--budget",
        "50",
    ]);
    assert_eq!(r["tokens"].as_u64().unwrap(), 50);
    assert!(r["mean_nll"].as_f64().unwrap() > 0.0);
}

#[test]
fn command_line_overrides_config_file() {
    let w = Work::new();
    let cfg = w.path("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"d-model": 16, "layers": 1, "heads": 2, "max-positions": 64, "seed": 9}"#,
    )
    .unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    let from_cfg = w.ok(&["gen-model", "--config", &cfg, "--out", &w.p("a.tmc")]);
    assert_eq!(from_cfg["seed"].as_u64().unwrap(), 9);
    let over = w.ok(&[
        "gen-model",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--out",
        &w.p("b.tmc"),
    ]);
    assert_eq!(over["seed"].as_u64().unwrap(), 3);
    assert_eq!(over["config"]["n_layers"], from_cfg["config"]["n_layers"]);
}
