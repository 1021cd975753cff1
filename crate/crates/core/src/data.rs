//! Dataset ingestion: UCR-style text tables, zero prepadding, first-variate
//! extraction and the domain-balanced pretraining pool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XitError};

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub label: Option<usize>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(XitError::invalid(
                "time series must have at least one sample",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(XitError::invalid("time series contains non-finite values"));
        }
        Ok(TimeSeries { values, label })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub domain: String,
    pub series: Vec<TimeSeries>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    /// Validates the label invariant before wrapping.
    pub fn new(
        name: impl Into<String>,
        domain: impl Into<String>,
        series: Vec<TimeSeries>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let name = name.into();
        if series.is_empty() {
            return Err(XitError::EmptyDataset(name));
        }
        if let Some(bad) = series
            .iter()
            .filter_map(|s| s.label)
            .find(|&l| l >= num_classes)
        {
            return Err(XitError::invalid(format!(
                "{name}: label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            name,
            domain: domain.into(),
            series,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn max_length(&self) -> usize {
        self.series.iter().map(TimeSeries::len).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.series
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.label.ok_or_else(|| {
                    XitError::invalid(format!("{}: series {i} is unlabeled", self.name))
                })
            })
            .collect()
    }

    /// Every series prepadded to `target_len`.
    pub fn padded(&self, target_len: usize) -> Result<Dataset> {
        let series = self
            .series
            .iter()
            .map(|s| prepad(s, target_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            series,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    /// One series per row, label first, separated by tabs, commas or spaces.
    Tsv,
}

/// Reads a labeled table. Labels are remapped to `0..num_classes` in
/// ascending numeric order (lexicographic if any label is non-numeric).
/// Rows may have different lengths.
pub fn load_dataset(path: &Path, format: TableFormat) -> Result<Dataset> {
    let TableFormat::Tsv = format;
    let text = std::fs::read_to_string(path).map_err(|e| XitError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let split = match name.to_ascii_uppercase() {
        n if n.ends_with("_TRAIN") => Split::Train,
        n if n.ends_with("_TEST") => Split::Test,
        _ => Split::Unspecified,
    };
    parse_table(&text, path, name, split)
}

fn parse_table(text: &str, path: &Path, name: String, split: Split) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| XitError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut raw: Vec<(String, Vec<f64>)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line
            .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            .filter(|t| !t.is_empty());
        let label = tokens
            .next()
            .ok_or_else(|| parse_err(ln + 1, "missing label".into()))?
            .to_string();
        let values = tokens
            .map(|t| {
                let v: f64 = t
                    .parse()
                    .map_err(|_| parse_err(ln + 1, format!("cannot parse value `{t}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(ln + 1, format!("non-finite value `{t}`")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(parse_err(ln + 1, "row has a label but no values".into()));
        }
        raw.push((label, values));
    }
    if raw.is_empty() {
        return Err(XitError::EmptyDataset(path.display().to_string()));
    }
    let numeric: Option<Vec<f64>> = raw.iter().map(|(l, _)| l.parse::<f64>().ok()).collect();
    let mut distinct: Vec<&str> = raw.iter().map(|(l, _)| l.as_str()).collect();
    distinct.sort_by(|a, b| match &numeric {
        Some(_) => a
            .parse::<f64>()
            .unwrap()
            .total_cmp(&b.parse::<f64>().unwrap()),
        None => a.cmp(b),
    });
    distinct.dedup_by(|a, b| match &numeric {
        Some(_) => a.parse::<f64>().unwrap() == b.parse::<f64>().unwrap(),
        None => a == b,
    });
    let index_of = |l: &str| -> usize {
        distinct
            .iter()
            .position(|d| match &numeric {
                Some(_) => d.parse::<f64>().unwrap() == l.parse::<f64>().unwrap(),
                None => *d == l,
            })
            .expect("label present")
    };
    let num_classes = distinct.len();
    let series = raw
        .iter()
        .map(|(l, v)| TimeSeries {
            values: v.clone(),
            label: Some(index_of(l)),
        })
        .collect();
    Dataset::new(name, "unknown", series, num_classes, split)
}

/// Writes a dataset in the same table format [`load_dataset`] reads.
pub fn write_dataset_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &dataset.series {
        let label = s.label.map_or_else(|| "0".to_string(), |l| l.to_string());
        out.push_str(&label);
        for v in &s.values {
            write!(out, "\t{v}").expect("write to string");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| XitError::io(path, e))
}

/// Prepends zeros so the series has exactly `target_len` samples.
pub fn prepad(series: &TimeSeries, target_len: usize) -> Result<TimeSeries> {
    let n = series.len();
    if target_len < n {
        return Err(XitError::invalid(format!(
            "cannot pad a series of length {n} to {target_len}"
        )));
    }
    let mut values = vec![0.0; target_len - n];
    values.extend_from_slice(&series.values);
    Ok(TimeSeries {
        values,
        label: series.label,
    })
}

/// Variate 0 of a multivariate series given as one row per variate.
pub fn first_variate(variates: &[Vec<f64>]) -> Result<TimeSeries> {
    let first = variates
        .first()
        .ok_or_else(|| XitError::invalid("series has zero variates"))?;
    TimeSeries::new(first.clone(), None)
}

/// Multi-dataset pretraining pool with domain-balanced sampling weights.
#[derive(Clone, Debug)]
pub struct Collection {
    datasets: Vec<Dataset>,
    target_length: usize,
    weights: Vec<f64>,
}

impl Collection {
    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn target_length(&self) -> usize {
        self.target_length
    }

    pub fn sampling_weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Pads every series to the longest length in the pool and assigns each
/// dataset `(1/#domains) · size / (total size of its domain)`.
pub fn build_collection(datasets: Vec<Dataset>) -> Result<Collection> {
    if datasets.is_empty() {
        return Err(XitError::invalid("a collection needs at least one dataset"));
    }
    if let Some(d) = datasets.iter().find(|d| d.is_empty()) {
        return Err(XitError::EmptyDataset(d.name.clone()));
    }
    let target_length = datasets.iter().map(Dataset::max_length).max().unwrap_or(0);
    let mut domain_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &datasets {
        *domain_sizes.entry(d.domain.as_str()).or_default() += d.len();
    }
    let n_domains = domain_sizes.len() as f64;
    let weights: Vec<f64> = datasets
        .iter()
        .map(|d| d.len() as f64 / domain_sizes[d.domain.as_str()] as f64 / n_domains)
        .collect();
    let datasets = datasets
        .iter()
        .map(|d| d.padded(target_length))
        .collect::<Result<Vec<_>>>()?;
    Ok(Collection {
        datasets,
        target_length,
        weights,
    })
}

/// Draws `b` series i.i.d.: a dataset by weight, then a series uniformly.
pub fn sample_batch<R: Rng + ?Sized>(
    collection: &Collection,
    b: usize,
    rng: &mut R,
) -> Result<Vec<TimeSeries>> {
    if b < 2 {
        return Err(XitError::invalid(format!(
            "batch size must be >= 2, got {b}"
        )));
    }
    let picker = WeightedIndex::new(&collection.weights)
        .map_err(|e| XitError::invalid(format!("sampling weights: {e}")))?;
    Ok((0..b)
        .map(|_| {
            let d = &collection.datasets[picker.sample(rng)];
            d.series[rng.random_range(0..d.len())].clone()
        })
        .collect())
}

/// JSON manifest listing the datasets of a pretraining pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionManifest {
    pub datasets: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub domain: String,
    #[serde(default)]
    pub name: Option<String>,
}

/// Loads every dataset named by a manifest, dropping datasets whose longest
/// series exceeds `max_length`.
pub fn load_manifest(path: &Path, max_length: Option<usize>) -> Result<Vec<Dataset>> {
    let text = std::fs::read_to_string(path).map_err(|e| XitError::io(path, e))?;
    let manifest: CollectionManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in manifest.datasets {
        let p = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        let mut d = load_dataset(&p, TableFormat::Tsv)?;
        d.domain = entry.domain;
        if let Some(n) = entry.name {
            d.name = n;
        }
        if max_length.is_some_and(|m| d.max_length() > m) {
            log::info!("skipping {} (length {} > cap)", d.name, d.max_length());
            continue;
        }
        out.push(d);
    }
    if out.is_empty() {
        return Err(XitError::EmptyDataset(path.display().to_string()));
    }
    Ok(out)
}
