//! Implementations of the subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use xit_core::config::RunConfig;
use xit_core::data::{
    build_collection, load_dataset, load_manifest, write_dataset_tsv, Dataset, TableFormat,
};
use xit_core::eval::{dbi, pca2, rank_methods, EmbeddingSet};
use xit_core::model::XitModel;
use xit_core::synthbench::{generate, SynthSpec};
use xit_core::train::{
    evaluate, finetune as probe, Checkpoint, MetricsReport, Pretrainer, Telemetry,
};
use xit_core::XitError;

use crate::{GroupBy, Metric, RunArgs};

pub const OUTPUT_ROOT_ENV: &str = "XIT_OUTPUT_ROOT";
const CHECKPOINT_DIR: &str = "checkpoint";
const TELEMETRY_FILE: &str = "telemetry.csv";

/// Loads the config, applies command-line overrides and validates the result.
fn effective_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(a) = &run.ablation {
        cfg.train.ablation = a.clone();
    }
    if let Some(m) = run.max_length {
        cfg.data.max_length = Some(m);
    }
    if let Some(dir) = &run.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    if !cfg.output_dir.is_absolute() {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    cfg.output_dir = std::path::absolute(&cfg.output_dir)
        .with_context(|| format!("resolving {}", cfg.output_dir.display()))?;
    if let Some(m) = &cfg.manifest {
        cfg.manifest =
            Some(std::path::absolute(m).with_context(|| format!("resolving {}", m.display()))?);
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| XitError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| XitError::io(path, e))?;
    Ok(())
}

pub fn pretrain(run: &RunArgs, resume: bool) -> Result<()> {
    let cfg = effective_config(run)?;
    let manifest = cfg.manifest.clone().ok_or_else(|| XitError::Config {
        key: "manifest".into(),
        message: "pretraining needs a collection manifest".into(),
    })?;
    let collection = build_collection(load_manifest(&manifest, cfg.data.max_length)?)?;
    let t = collection.target_length();
    cfg.model.validate(t)?;
    let out = &cfg.output_dir;
    cfg.echo(out)?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    let telemetry_path = out.join(TELEMETRY_FILE);

    let mut trainer = if resume {
        let mut ck = Checkpoint::load(&ck_dir)?;
        if ck.model.config() != &cfg.model || ck.model.in_length() != t {
            return Err(XitError::Checkpoint(format!(
                "{} was trained with a different model config or series length ({} vs {t})",
                ck_dir.display(),
                ck.model.in_length()
            ))
            .into());
        }
        // The run continues under the current settings, e.g. a raised step budget.
        ck.settings = cfg.pretrain_settings();
        Pretrainer::resume(ck)?
    } else {
        if telemetry_path.exists() {
            fs::remove_file(&telemetry_path).map_err(|e| XitError::io(&telemetry_path, e))?;
        }
        Pretrainer::new(
            XitModel::new(&cfg.model, t, cfg.seed)?,
            cfg.pretrain_settings(),
            cfg.seed,
        )?
    };
    let remaining = cfg.train.steps.saturating_sub(trainer.step_count());
    log::info!(
        "pretraining on {} datasets (T = {t}) for {remaining} steps, ablation {}",
        collection.datasets().len(),
        cfg.train.ablation
    );
    let mut telemetry = Telemetry::open(&telemetry_path)?;
    let every = (cfg.train.steps / 20).max(1);
    trainer.run(&collection, remaining, |r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.5}", r.step, r.l_total);
        }
        telemetry.append(r)
    })?;
    telemetry.flush()?;
    trainer.checkpoint().save(&ck_dir)?;
    println!("checkpoint: {}", ck_dir.display());
    println!("telemetry: {}", telemetry_path.display());
    Ok(())
}

/// The encoder to probe or embed with: the checkpoint's, or a fresh one with
/// the checkpoint's (else the config's) architecture.
fn load_model(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    random_init: bool,
    datasets: &[&Dataset],
) -> Result<XitModel> {
    for d in datasets {
        if let Some(m) = cfg.data.max_length.filter(|m| d.max_length() > *m) {
            return Err(XitError::Config {
                key: "data.max_length".into(),
                message: format!("`{}` has series of length {} > {m}", d.name, d.max_length()),
            }
            .into());
        }
    }
    match (checkpoint, random_init) {
        (Some(dir), false) => Ok(Checkpoint::load(dir)?.model),
        (Some(dir), true) => {
            let ck = Checkpoint::load(dir)?;
            Ok(XitModel::new(
                ck.model.config(),
                ck.model.in_length(),
                cfg.seed,
            )?)
        }
        (None, true) => {
            let t = datasets.iter().map(|d| d.max_length()).max().unwrap_or(0);
            cfg.model.validate(t)?;
            Ok(XitModel::new(&cfg.model, t, cfg.seed)?)
        }
        (None, false) => Err(XitError::Config {
            key: "--checkpoint".into(),
            message: "required unless --random-init is given".into(),
        }
        .into()),
    }
}

fn read_table(path: &Path) -> Result<Dataset> {
    Ok(load_dataset(path, TableFormat::Tsv)?)
}

pub fn finetune(
    run: &RunArgs,
    checkpoint: Option<&Path>,
    random_init: bool,
    train_path: &Path,
    test_path: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = effective_config(run)?;
    let train = read_table(train_path)?;
    let test = read_table(test_path)?;
    if train.num_classes != test.num_classes {
        return Err(XitError::Shape {
            op: "finetune",
            expected: format!(
                "{} classes (from {})",
                train.num_classes,
                train_path.display()
            ),
            found: format!("{} classes in {}", test.num_classes, test_path.display()),
        }
        .into());
    }
    let model = load_model(&cfg, checkpoint, random_init, &[&train, &test])?;
    let outcome = probe(&model, &train, &cfg.finetune, cfg.seed)?;
    let report = evaluate(&model, &outcome.classifier, &test)?;

    let out = out.unwrap_or_else(|| cfg.output_dir.join("finetune"));
    cfg.echo(&out)?;
    write_file(
        &out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let params = outcome.classifier.params();
    let classifier = json!({
        "best_epoch": outcome.best_epoch,
        "steps": outcome.steps,
        "num_classes": outcome.classifier.num_classes(),
        "input_dim": outcome.classifier.input_dim(),
        "weight": params.tensor(0).to_rows(),
        "bias": params.tensor(1).data(),
    });
    write_file(
        &out.join("classifier.json"),
        serde_json::to_string_pretty(&classifier)? + "\n",
    )?;
    let mut history = String::from("epoch,steps,train_loss,val_auroc\n");
    for h in &outcome.history {
        history.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.steps, h.train_loss, h.val_auroc
        ));
    }
    write_file(&out.join("history.csv"), history)?;
    println!(
        "accuracy {:.4}  macro_f1 {:.4}  auroc {:.4}  (best epoch {})",
        report.accuracy, report.macro_f1, report.auroc, outcome.best_epoch
    );
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

pub fn embed(
    run: &RunArgs,
    checkpoint: Option<&Path>,
    random_init: bool,
    paths: &[PathBuf],
    group_by: GroupBy,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = effective_config(run)?;
    let datasets = paths
        .iter()
        .map(|p| read_table(p))
        .collect::<Result<Vec<_>>>()?;
    let model = load_model(
        &cfg,
        checkpoint,
        random_init,
        &datasets.iter().collect::<Vec<_>>(),
    )?;

    let mut vectors = Vec::new();
    let mut rows = Vec::new();
    let mut group_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut groups = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        let padded = d.padded(model.in_length())?;
        let series: Vec<Vec<f64>> = padded.series.iter().map(|s| s.values.clone()).collect();
        vectors.extend(model.features(&series)?);
        for (i, s) in d.series.iter().enumerate() {
            let key = match group_by {
                GroupBy::Class => (di, s.label.unwrap_or(0)),
                GroupBy::Dataset => (di, 0),
            };
            let next = group_ids.len();
            groups.push(*group_ids.entry(key).or_insert(next));
            rows.push((d.name.clone(), i, s.label));
        }
    }
    let pca = pca2(&vectors)?;
    let index = dbi(&EmbeddingSet {
        vectors: vectors.clone(),
        groups: groups.clone(),
    })?;

    let path = out.unwrap_or_else(|| cfg.output_dir.join("embeddings.csv"));
    cfg.echo(path.parent().unwrap_or(Path::new(".")))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let dim = vectors.first().map_or(0, Vec::len);
    let mut header: Vec<String> = ["dataset", "index", "label", "group", "pc1", "pc2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (((name, i, label), g), (v, pc)) in rows
        .iter()
        .zip(&groups)
        .zip(vectors.iter().zip(&pca.coords))
    {
        let mut rec = vec![
            name.clone(),
            i.to_string(),
            label.map(|l| l.to_string()).unwrap_or_default(),
            g.to_string(),
            pc[0].to_string(),
            pc[1].to_string(),
        ];
        rec.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    write_file(&path, w.into_inner().context("flushing csv")?)?;
    println!("rows {}  dim {dim}  dbi {index}", rows.len());
    println!("embeddings: {}", path.display());
    Ok(())
}

fn metric_value(r: &MetricsReport, metric: Metric) -> f64 {
    match metric {
        Metric::MacroF1 => r.macro_f1,
        Metric::Accuracy => r.accuracy,
        Metric::Auroc => r.auroc,
    }
}

/// Reports found under `dir`, keyed by method then dataset. A report is
/// either `<method>/<dataset>.json` or `<method>/<dataset>/report.json`.
fn collect_reports(dir: &Path) -> Result<BTreeMap<String, BTreeMap<String, MetricsReport>>> {
    let read_dir = |p: &Path| fs::read_dir(p).map_err(|e| XitError::io(p, e));
    let mut out = BTreeMap::new();
    for method in read_dir(dir)? {
        let method = method.map_err(|e| XitError::io(dir, e))?.path();
        if !method.is_dir() {
            continue;
        }
        let name = method
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mut cells = BTreeMap::new();
        for entry in read_dir(&method)? {
            let p = entry.map_err(|e| XitError::io(&method, e))?.path();
            let (dataset, file) = if p.is_dir() {
                (p.file_name(), p.join("report.json"))
            } else if p.extension().is_some_and(|e| e == "json") {
                (p.file_stem(), p.clone())
            } else {
                continue;
            };
            if !file.exists() {
                continue;
            }
            let text = fs::read_to_string(&file).map_err(|e| XitError::io(&file, e))?;
            let report: MetricsReport = serde_json::from_str(&text)
                .map_err(|e| XitError::Incomplete(format!("{}: {e}", file.display())))?;
            cells.insert(
                dataset.unwrap_or_default().to_string_lossy().into_owned(),
                report,
            );
        }
        out.insert(name, cells);
    }
    Ok(out)
}

pub fn eval(dir: &Path, metric: Metric, out: Option<&Path>) -> Result<()> {
    let reports = collect_reports(dir)?;
    let methods: Vec<&String> = reports.keys().collect();
    let datasets: BTreeSet<&String> = reports.values().flat_map(|m| m.keys()).collect();
    if methods.is_empty() || datasets.is_empty() {
        return Err(XitError::Incomplete(format!("no reports under {}", dir.display())).into());
    }
    let missing: Vec<String> = methods
        .iter()
        .flat_map(|m| {
            datasets
                .iter()
                .filter(|d| !reports[*m].contains_key(**d))
                .map(move |d| format!("{m}/{d}"))
        })
        .collect();
    if !missing.is_empty() {
        return Err(
            XitError::Incomplete(format!("missing reports: {}", missing.join(", "))).into(),
        );
    }
    let scores: Vec<Vec<f64>> = methods
        .iter()
        .map(|m| {
            datasets
                .iter()
                .map(|d| metric_value(&reports[*m][*d], metric))
                .collect()
        })
        .collect();
    let ranks = rank_methods(&scores)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    header.push("mean_rank".into());
    w.write_record(&header)?;
    let mut table = vec![header];
    for ((m, row), r) in methods.iter().zip(&scores).zip(&ranks) {
        let mut rec = vec![m.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.4}")));
        rec.push(format!("{r:.2}"));
        w.write_record(&rec)?;
        table.push(rec);
    }
    let csv_bytes = w.into_inner().context("flushing csv")?;
    if let Some(path) = out {
        write_file(path, csv_bytes)?;
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| {
                if c == 0 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        println!("{}", cells.join("  ").trim_end());
    }
    Ok(())
}

pub fn synth(spec: SynthSpec, out: &Path) -> Result<()> {
    let dataset = generate(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| XitError::io(parent, e))?;
    }
    write_dataset_tsv(&dataset, out)?;
    println!(
        "{} series of length {} written to {}",
        dataset.len(),
        spec.length,
        out.display()
    );
    Ok(())
}
