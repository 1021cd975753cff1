//! End-to-end runs of the `xit` binary on small synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use xit_core::eval::{dbi, EmbeddingSet};

fn xit(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xit"))
        .args(args)
        .env("XIT_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn xit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(o),
        stderr(o)
    );
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Two synthetic source datasets, a labeled probe split and a run config.
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        for (family, seed, file) in [
            ("sine-freq", "1", "data/sine.tsv"),
            ("square-duty", "2", "data/square.tsv"),
            ("sawtooth-slope", "3", "data/saw_TRAIN.tsv"),
            ("sawtooth-slope", "4", "data/saw_TEST.tsv"),
        ] {
            let out = ws.path(file);
            let o = xit(
                &[
                    "synth",
                    "--family",
                    family,
                    "--classes",
                    "2",
                    "--samples-per-class",
                    "12",
                    "--length",
                    "32",
                    "--seed",
                    seed,
                    "--out",
                    out.to_str().unwrap(),
                ],
                ws.root(),
            );
            assert_ok(&o);
        }
        fs::write(
            ws.path("data/manifest.json"),
            r#"{"datasets": [
                {"path": "sine.tsv", "domain": "periodic"},
                {"path": "square.tsv", "domain": "pulse"}
            ]}"#,
        )
        .unwrap();
        ws.write_config("run.json", "");
        ws
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// A tiny model and a short run; `extra` adds top-level keys.
    fn write_config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"{{
  "manifest": "data/manifest.json",
  "output_dir": "out",
  "seed": 3,
  {extra}
  "model": {{
    "encoder": {{"channels": [4, 8, 8], "kernel_sizes": [3, 3, 3]}},
    "summarizer": {{"token_dim": 8, "heads": 2, "layers": 1, "ffn_hidden": 8}}
  }},
  "train": {{"batch_size": 8, "steps": 4, "learning_rate": 0.001}},
  "finetune": {{"batch_size": 8, "min_steps": 5, "max_steps": 30}}
}}"#
        );
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn pretrain(&self, config: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["pretrain", "--config", config.to_str().unwrap()];
        args.extend_from_slice(extra);
        xit(&args, self.root())
    }

    fn finetune(&self, config: &Path, extra: &[&str]) -> Output {
        let train = self.path("data/saw_TRAIN.tsv");
        let test = self.path("data/saw_TEST.tsv");
        let mut args = vec![
            "finetune",
            "--config",
            config.to_str().unwrap(),
            "--train",
            train.to_str().unwrap(),
            "--test",
            test.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        xit(&args, self.root())
    }
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_balanced_table() {
    let ws = Workspace::new();
    let text = fs::read_to_string(ws.path("data/sine.tsv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r.split('\t').count() == 33));
    let bad = xit(&["synth", "--family", "noise", "--out", "x.tsv"], ws.root());
    assert_eq!(bad.status.code(), Some(2), "{}", stderr(&bad));
    assert!(stderr(&bad).contains("noise"));
}

#[test]
fn missing_manifest_exits_2_naming_the_path() {
    let ws = Workspace::new();
    fs::remove_file(ws.path("data/manifest.json")).unwrap();
    let o = ws.pretrain(&ws.path("run.json"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_exits_2_naming_the_key() {
    let ws = Workspace::new();
    let cfg = ws.write_config("bad.json", r#""loss": {"tau": 0.2, "temperature": 1},"#);
    let o = ws.pretrain(&cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.temperature"), "{}", stderr(&o));
    let o = ws.pretrain(&ws.path("run.json"), &["--ablation", "mixup_only"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mixup_only"), "{}", stderr(&o));
}

#[test]
fn pretrain_is_deterministic_and_echoes_its_config() {
    let ws = Workspace::new();
    let cfg = ws.path("run.json");
    assert_ok(&ws.pretrain(&cfg, &["--output-dir", "a"]));
    assert_ok(&ws.pretrain(&cfg, &["--output-dir", "b"]));
    let a = dir_bytes(&ws.path("a/checkpoint"));
    assert!(!a.is_empty());
    assert_eq!(a, dir_bytes(&ws.path("b/checkpoint")));

    let telemetry = fs::read_to_string(ws.path("a/telemetry.csv")).unwrap();
    let lines: Vec<&str> = telemetry.lines().collect();
    assert_eq!(lines[0], "step,l_tc,l_sicc,l_total");
    assert_eq!(lines.len(), 5);

    // Re-running from the echoed config reproduces the checkpoint.
    let echoed = ws.path("a/effective_config.json");
    let copy = ws.path("echo/run.json");
    fs::create_dir_all(copy.parent().unwrap()).unwrap();
    fs::copy(&echoed, &copy).unwrap();
    assert_ok(&ws.pretrain(&copy, &[]));
    assert_eq!(a, dir_bytes(&ws.path("a/checkpoint")));
    let echoed_again = fs::read_to_string(&echoed).unwrap();
    assert_eq!(fs::read_to_string(&copy).unwrap(), echoed_again);
}

#[test]
fn ablation_leaves_inactive_loss_column_empty() {
    let ws = Workspace::new();
    assert_ok(&ws.pretrain(&ws.path("run.json"), &["--ablation", "xd_tc"]));
    let telemetry = fs::read_to_string(ws.path("out/telemetry.csv")).unwrap();
    for line in telemetry.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert!(!cols[1].is_empty() && cols[2].is_empty(), "{line}");
        assert_eq!(cols[1], cols[3]);
    }
}

#[test]
fn resume_continues_to_the_configured_step_count() {
    let ws = Workspace::new();
    assert_ok(&ws.pretrain(&ws.path("run.json"), &["--output-dir", "full"]));
    let short = ws.write_config("short.json", "");
    let text = fs::read_to_string(&short)
        .unwrap()
        .replace("\"steps\": 4", "\"steps\": 2");
    fs::write(&short, text).unwrap();
    assert_ok(&ws.pretrain(&short, &["--output-dir", "split"]));
    assert_ok(&ws.pretrain(&ws.path("run.json"), &["--output-dir", "split", "--resume"]));
    assert_eq!(
        dir_bytes(&ws.path("full/checkpoint")),
        dir_bytes(&ws.path("split/checkpoint"))
    );
    assert_eq!(
        fs::read_to_string(ws.path("full/telemetry.csv")).unwrap(),
        fs::read_to_string(ws.path("split/telemetry.csv")).unwrap()
    );
}

#[test]
fn finetune_reports_exactly_three_metrics_reproducibly() {
    let ws = Workspace::new();
    let cfg = ws.path("run.json");
    assert_ok(&ws.pretrain(&cfg, &[]));
    let ck = ws.path("out/checkpoint");
    let ck = ck.to_str().unwrap();
    let mut reports = Vec::new();
    for out in ["ft1", "ft2"] {
        let dir = ws.path(out);
        assert_ok(&ws.finetune(&cfg, &["--checkpoint", ck, "--out", dir.to_str().unwrap()]));
        reports.push(fs::read_to_string(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let report: Value = serde_json::from_str(&reports[0]).unwrap();
    let mut keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["accuracy", "auroc", "macro_f1"]);
    let classifier: Value =
        serde_json::from_str(&fs::read_to_string(ws.path("ft1/classifier.json")).unwrap()).unwrap();
    assert!(classifier["best_epoch"].as_u64().unwrap() >= 1);
    assert_eq!(classifier["weight"].as_array().unwrap().len(), 2);
}

#[test]
fn random_init_bypasses_the_checkpoint() {
    let ws = Workspace::new();
    let cfg = ws.path("run.json");
    let out = ws.path("rnd");
    assert_ok(&ws.finetune(&cfg, &["--random-init", "--out", out.to_str().unwrap()]));
    assert!(out.join("report.json").exists());
    let o = ws.finetune(&cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn finetune_rejects_series_longer_than_the_encoder_input() {
    let ws = Workspace::new();
    let cfg = ws.path("run.json");
    assert_ok(&ws.pretrain(&cfg, &[]));
    let long = ws.path("data/long.tsv");
    let o = xit(
        &[
            "synth",
            "--family",
            "sine-freq",
            "--samples-per-class",
            "4",
            "--length",
            "48",
            "--out",
            long.to_str().unwrap(),
        ],
        ws.root(),
    );
    assert_ok(&o);
    let ck = ws.path("out/checkpoint");
    let o = xit(
        &[
            "finetune",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "--train",
            long.to_str().unwrap(),
            "--test",
            long.to_str().unwrap(),
        ],
        ws.root(),
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("32") && err.contains("48"), "{err}");
}

#[test]
fn embed_csv_round_trips_its_dbi() {
    let ws = Workspace::new();
    let cfg = ws.path("run.json");
    assert_ok(&ws.pretrain(&cfg, &[]));
    let ck = ws.path("out/checkpoint");
    let mut dbis = Vec::new();
    for (name, extra) in [("pre.csv", &[][..]), ("rnd.csv", &["--random-init"][..])] {
        let csv_path = ws.path(name);
        let mut args: Vec<String> = vec![
            "embed".into(),
            "--config".into(),
            cfg.display().to_string(),
            "--checkpoint".into(),
            ck.display().to_string(),
            "--dataset".into(),
            ws.path("data/saw_TEST.tsv").display().to_string(),
            "--out".into(),
            csv_path.display().to_string(),
        ];
        args.extend(extra.iter().map(|a: &&str| a.to_string()));
        let o = xit(
            &args.iter().map(String::as_str).collect::<Vec<_>>(),
            ws.root(),
        );
        assert_ok(&o);
        let printed: f64 = stdout(&o)
            .split_whitespace()
            .skip_while(|w| *w != "dbi")
            .nth(1)
            .unwrap()
            .parse()
            .unwrap();

        let mut reader = csv::Reader::from_path(&csv_path).unwrap();
        let header = reader.headers().unwrap().clone();
        assert_eq!(
            header.iter().take(6).collect::<Vec<_>>(),
            ["dataset", "index", "label", "group", "pc1", "pc2"]
        );
        let first = header.iter().position(|h| h == "e0").unwrap();
        let mut vectors = Vec::new();
        let mut groups = Vec::new();
        for rec in reader.records() {
            let rec = rec.unwrap();
            groups.push(rec[3].parse::<usize>().unwrap());
            vectors.push(
                rec.iter()
                    .skip(first)
                    .map(|v| v.parse::<f64>().unwrap())
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(vectors.len(), 24);
        let reread = dbi(&EmbeddingSet { vectors, groups }).unwrap();
        assert!(
            (reread - printed).abs() <= 1e-12 * printed.abs().max(1.0),
            "{reread} vs {printed}"
        );
        dbis.push(printed);
    }
    assert_ne!(dbis[0], dbis[1]);
}

fn write_report(dir: &Path, method: &str, dataset: &str, f1: f64) {
    let path = dir.join(method).join(format!("{dataset}.json"));
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(
        path,
        format!(r#"{{"accuracy": 0.5, "macro_f1": {f1}, "auroc": 0.5}}"#),
    )
    .unwrap();
}

#[test]
fn eval_ranks_methods_and_names_missing_cells() {
    let ws = Workspace::new();
    let reports = ws.path("reports");
    for (m, f1) in [("a", 54.4), ("b", 51.1), ("c", 42.9)] {
        write_report(&reports, m, "d1", f1);
    }
    let table = ws.path("ranks.csv");
    let o = xit(
        &[
            "eval",
            "--reports",
            reports.to_str().unwrap(),
            "--out",
            table.to_str().unwrap(),
        ],
        ws.root(),
    );
    assert_ok(&o);
    let text = fs::read_to_string(&table).unwrap();
    let ranks: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(ranks, ["1.00", "2.00", "3.00"]);

    write_report(&reports, "a", "d2", 0.9);
    let o = xit(&["eval", "--reports", reports.to_str().unwrap()], ws.root());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("b/d2") && err.contains("c/d2"), "{err}");

    let single = ws.path("single");
    write_report(&single, "only", "d1", 0.3);
    let o = xit(&["eval", "--reports", single.to_str().unwrap()], ws.root());
    assert_ok(&o);
    assert!(stdout(&o).contains("1.00"));
}
