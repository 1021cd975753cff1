//! Cross-dataset mixup: ring-paired convex combinations of a mini-batch with
//! symmetric Beta coefficients.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XitError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    /// Shape of the symmetric Beta(α, α) the coefficients are drawn from.
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { alpha: 0.2 }
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(XitError::invalid(format!(
            "mixup alpha must be > 0, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| XitError::invalid(format!("beta: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `B` originals and their `B` ring-paired interpolations.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub originals: Vec<Vec<f64>>,
    pub mixed: Vec<Vec<f64>>,
    /// Weight of the right neighbour in each mixed series.
    pub lambdas: Vec<f64>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.mixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixed.is_empty()
    }

    pub fn left_index(&self, i: usize) -> usize {
        i
    }

    pub fn right_index(&self, i: usize) -> usize {
        (i + 1) % self.len()
    }
}

/// `mixed[i] = (1 − λᵢ)·batch[i] + λᵢ·batch[(i+1) mod B]`.
pub fn xd_mixup_batch(batch: &[Vec<f64>], lambdas: &[f64]) -> Result<MixedBatch> {
    let b = batch.len();
    if b < 2 {
        return Err(XitError::invalid(format!("mixup needs B >= 2, got {b}")));
    }
    if lambdas.len() != b {
        return Err(XitError::Shape {
            op: "xd_mixup_batch",
            expected: format!("{b} coefficients"),
            found: format!("{}", lambdas.len()),
        });
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(XitError::invalid(format!(
            "mixup coefficient {l} outside [0, 1]"
        )));
    }
    let t = batch[0].len();
    if let Some(bad) = batch.iter().position(|s| s.len() != t) {
        return Err(XitError::Shape {
            op: "xd_mixup_batch",
            expected: format!("series of length {t}"),
            found: format!("series {bad} of length {}", batch[bad].len()),
        });
    }
    let mixed = (0..b)
        .map(|i| {
            let (left, right, lam) = (&batch[i], &batch[(i + 1) % b], lambdas[i]);
            left.iter()
                .zip(right)
                .map(|(&a, &c)| ((1.0 - lam) * a + lam * c).clamp(a.min(c), a.max(c)))
                .collect()
        })
        .collect();
    Ok(MixedBatch {
        originals: batch.to_vec(),
        mixed,
        lambdas: lambdas.to_vec(),
    })
}
