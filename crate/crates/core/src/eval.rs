//! Classification metrics, latent-space diagnostics (Davies-Bouldin index,
//! two-component PCA) and mean-rank aggregation across methods.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Result, XitError};

/// Class scores (rows sum to one) with the true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(scores: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if scores.is_empty() {
            return Err(XitError::invalid("prediction set is empty"));
        }
        if scores.len() != labels.len() {
            return Err(XitError::Shape {
                op: "PredictionSet::new",
                expected: format!("{} labels", scores.len()),
                found: format!("{}", labels.len()),
            });
        }
        let k = scores[0].len();
        if k == 0 || scores.iter().any(|r| r.len() != k) {
            return Err(XitError::invalid("score rows must share a positive width"));
        }
        if let Some(l) = labels.iter().find(|l| **l >= k) {
            return Err(XitError::invalid(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        Ok(PredictionSet { scores, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.scores[0].len()
    }

    /// Argmax decisions; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

pub fn accuracy(preds: &PredictionSet) -> f64 {
    let hits = preds
        .predictions()
        .iter()
        .zip(&preds.labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / preds.labels.len() as f64
}

/// Unweighted mean of per-class F1 over all `num_classes` classes; a class
/// with no true or predicted members scores 0.
pub fn macro_f1(preds: &PredictionSet) -> f64 {
    let k = preds.num_classes();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (p, l) in preds.predictions().into_iter().zip(&preds.labels) {
        if p == *l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[*l] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / k as f64
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUROC via the rank-sum statistic with midranks for ties.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(XitError::invalid(
            "AUROC needs both positive and negative samples",
        ));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, p)| **p)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUROC over the classes present in the labels.
pub fn auroc(preds: &PredictionSet) -> Result<f64> {
    let mut present: Vec<usize> = preds.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(XitError::invalid(
            "AUROC needs at least two classes present in the labels",
        ));
    }
    let mut total = 0.0;
    for &c in &present {
        let scores: Vec<f64> = preds.scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = preds.labels.iter().map(|l| *l == c).collect();
        total += binary_auroc(&scores, &positive)?;
    }
    Ok(total / present.len() as f64)
}

/// Vectors with a group label each.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Davies-Bouldin index with Euclidean distances.
pub fn dbi(embeds: &EmbeddingSet) -> Result<f64> {
    if embeds.vectors.len() != embeds.groups.len() {
        return Err(XitError::invalid("one group label per vector required"));
    }
    let d = embeds.vectors.first().map_or(0, Vec::len);
    if d == 0 || embeds.vectors.iter().any(|v| v.len() != d) {
        return Err(XitError::invalid("vectors must share a positive width"));
    }
    let mut members: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (v, g) in embeds.vectors.iter().zip(&embeds.groups) {
        members.entry(*g).or_default().push(v);
    }
    if members.len() < 2 {
        return Err(XitError::invalid("DBI needs at least two groups"));
    }
    let clusters: Vec<(Vec<f64>, f64)> = members
        .values()
        .map(|vs| {
            let mut c = vec![0.0; d];
            for v in vs {
                for (ci, x) in c.iter_mut().zip(v.iter()) {
                    *ci += x;
                }
            }
            c.iter_mut().for_each(|x| *x /= vs.len() as f64);
            let s = vs.iter().map(|v| dist(v, &c)).sum::<f64>() / vs.len() as f64;
            (c, s)
        })
        .collect();
    let mut total = 0.0;
    for (i, (ci, si)) in clusters.iter().enumerate() {
        let mut worst = f64::NEG_INFINITY;
        for (j, (cj, sj)) in clusters.iter().enumerate() {
            if i == j {
                continue;
            }
            let dij = dist(ci, cj);
            if dij == 0.0 {
                return Err(XitError::invalid(format!(
                    "groups {i} and {j} have coincident centroids"
                )));
            }
            worst = worst.max((si + sj) / dij);
        }
        total += worst;
    }
    Ok(total / clusters.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// `N × 2` projected coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Principal axes, each of length `D`.
    pub components: [Vec<f64>; 2],
    /// Sample variance along each axis.
    pub explained_variance: [f64; 2],
}

/// Projection onto the two leading principal axes. Each axis is signed so
/// that its largest-magnitude loading is positive.
pub fn pca2(vectors: &[Vec<f64>]) -> Result<Pca2> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if n < 2 || d < 2 {
        return Err(XitError::invalid(format!(
            "PCA needs at least 2 points of dimension >= 2 (got {n} x {d})"
        )));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(XitError::invalid("PCA input rows differ in length"));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    if cov.trace() <= 0.0 {
        return Err(XitError::invalid("PCA input has zero variance"));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let pivot = col.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| v * sign).collect()
    };
    let components = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    let var = |k: usize| eig.eigenvalues[order[k]].max(0.0);
    Ok(Pca2 {
        coords,
        components,
        explained_variance: [var(0), var(1)],
    })
}

/// Mean rank per method over datasets. `scores[m][d]` is the score of method
/// `m` on dataset `d`; higher is better and ties share midranks.
pub fn rank_methods(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = scores.len();
    let n = scores.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(XitError::Incomplete("rank table is empty".into()));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != n {
            return Err(XitError::Incomplete(format!(
                "method {i} has {} scores, expected {n}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(XitError::Incomplete(format!(
                "missing score for method {i} on dataset {j}"
            )));
        }
    }
    let mut mean = vec![0.0; m];
    for d in 0..n {
        let negated: Vec<f64> = scores.iter().map(|row| -row[d]).collect();
        for (acc, r) in mean.iter_mut().zip(midranks(&negated)) {
            *acc += r / n as f64;
        }
    }
    Ok(mean)
}
