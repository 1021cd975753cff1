//! Stochastic views of a (mixed) series: magnitude scaling as the weak
//! augmentation, permutation-and-jitter as the strong one.

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XitError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of the per-series scale factor around 1.
    pub weak_scale_sigma: f64,
    pub strong_max_segments: usize,
    pub strong_jitter_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_scale_sigma: 0.1,
            strong_max_segments: 5,
            strong_jitter_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| XitError::Config {
            key: format!("augment.{key}"),
            message: msg.into(),
        };
        if !(self.weak_scale_sigma >= 0.0) {
            return Err(bad("weak_scale_sigma", "must be >= 0"));
        }
        if self.strong_max_segments == 0 {
            return Err(bad("strong_max_segments", "must be >= 1"));
        }
        if !(self.strong_jitter_sigma >= 0.0) {
            return Err(bad("strong_jitter_sigma", "must be >= 0"));
        }
        Ok(())
    }

    pub fn weak(&self) -> MagnitudeScale {
        MagnitudeScale {
            sigma: self.weak_scale_sigma,
        }
    }

    pub fn strong(&self) -> PermuteJitter {
        PermuteJitter {
            max_segments: self.strong_max_segments,
            jitter_sigma: self.strong_jitter_sigma,
        }
    }
}

/// A random, length-preserving transformation of one series.
pub trait Augmentation: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Multiplies the whole series by one factor `s ~ N(1, σ²)`.
#[derive(Clone, Copy, Debug)]
pub struct MagnitudeScale {
    pub sigma: f64,
}

impl Augmentation for MagnitudeScale {
    fn name(&self) -> &'static str {
        "magnitude-scale"
    }

    fn apply(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let s = Normal::new(1.0, self.sigma)
            .expect("sigma validated non-negative")
            .sample(rng);
        x.iter().map(|v| s * v).collect()
    }
}

/// Cuts the series into `m ~ U{1..max_segments}` contiguous pieces, shuffles
/// them, then adds i.i.d. `N(0, σ²)` noise.
#[derive(Clone, Copy, Debug)]
pub struct PermuteJitter {
    pub max_segments: usize,
    pub jitter_sigma: f64,
}

impl Augmentation for PermuteJitter {
    fn name(&self) -> &'static str {
        "permute-jitter"
    }

    fn apply(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut out = permute_segments(x, self.max_segments, rng);
        if self.jitter_sigma > 0.0 {
            let noise = Normal::new(0.0, self.jitter_sigma).expect("sigma validated");
            out.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        out
    }
}

/// The permutation step of [`PermuteJitter`] on its own.
pub fn permute_segments(x: &[f64], max_segments: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let n = x.len();
    let m = rng.random_range(1..=max_segments.max(1)).min(n.max(1));
    if m <= 1 {
        return x.to_vec();
    }
    // m − 1 distinct split points among the interior positions 1..n.
    let mut cuts: Vec<usize> = index::sample(rng, n - 1, m - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = Vec::with_capacity(m + 1);
    bounds.push(0);
    bounds.extend(cuts);
    bounds.push(n);
    let mut segments: Vec<&[f64]> = bounds.windows(2).map(|w| &x[w[0]..w[1]]).collect();
    segments.shuffle(rng);
    segments.concat()
}

pub fn weak_augment(x: &[f64], cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Vec<f64> {
    cfg.weak().apply(x, rng)
}

pub fn strong_augment(x: &[f64], cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Vec<f64> {
    cfg.strong().apply(x, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sorted(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn weak_degenerate_cases() {
        let cfg = AugmentConfig {
            weak_scale_sigma: 0.0,
            ..Default::default()
        };
        let x = [1.5, -2.0, 3.25];
        assert_eq!(weak_augment(&x, &cfg, &mut rng(1)), x.to_vec());
        let zeros = [0.0; 5];
        assert_eq!(
            weak_augment(&zeros, &AugmentConfig::default(), &mut rng(2)),
            zeros.to_vec()
        );
    }

    #[test]
    fn weak_scale_mean() {
        let cfg = AugmentConfig::default();
        let mut r = rng(7);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| weak_augment(&[1.0], &cfg, &mut r)[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn strong_identity_when_single_segment_and_no_jitter() {
        let cfg = AugmentConfig {
            strong_max_segments: 1,
            strong_jitter_sigma: 0.0,
            ..Default::default()
        };
        let x: Vec<f64> = (0..20).map(|v| v as f64).collect();
        assert_eq!(strong_augment(&x, &cfg, &mut rng(3)), x);
    }

    #[test]
    fn strong_jitter_matches_folded_normal_mean() {
        // Jitter is the only difference between a re-seeded permutation and the
        // full augmentation, so replaying the permutation isolates the noise.
        let cfg = AugmentConfig {
            strong_jitter_sigma: 0.05,
            ..Default::default()
        };
        let x: Vec<f64> = (0..100).map(|v| (v as f64 * 0.1).sin()).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..1000u64 {
            let out = strong_augment(&x, &cfg, &mut rng(seed));
            let perm = permute_segments(&x, cfg.strong_max_segments, &mut rng(seed));
            total += out
                .iter()
                .zip(&perm)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            count += x.len();
        }
        let mean = total / count as f64;
        let want = 0.05 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() / want < 0.02, "mean {mean} want {want}");
    }

    proptest! {
        #[test]
        fn strong_without_jitter_preserves_multiset(
            x in prop::collection::vec(-100.0f64..100.0, 1..64),
            seed in any::<u64>(),
            segs in 1usize..8,
        ) {
            let cfg = AugmentConfig { strong_max_segments: segs, strong_jitter_sigma: 0.0, ..Default::default() };
            let out = strong_augment(&x, &cfg, &mut rng(seed));
            prop_assert_eq!(sorted(&out), sorted(&x));
        }

        #[test]
        fn augmentations_preserve_length_and_are_deterministic(
            x in prop::collection::vec(-10.0f64..10.0, 1..64),
            seed in any::<u64>(),
        ) {
            let cfg = AugmentConfig::default();
            let s1 = strong_augment(&x, &cfg, &mut rng(seed));
            let s2 = strong_augment(&x, &cfg, &mut rng(seed));
            prop_assert_eq!(s1.len(), x.len());
            prop_assert_eq!(&s1, &s2);
            let w1 = weak_augment(&x, &cfg, &mut rng(seed));
            prop_assert_eq!(w1.len(), x.len());
            prop_assert_eq!(w1, weak_augment(&x, &cfg, &mut rng(seed)));
        }

        #[test]
        fn weak_commutes_with_scaling(
            x in prop::collection::vec(-10.0f64..10.0, 1..32),
            a in -5.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let cfg = AugmentConfig::default();
            let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
            let lhs = weak_augment(&ax, &cfg, &mut rng(seed));
            let rhs: Vec<f64> = weak_augment(&x, &cfg, &mut rng(seed)).iter().map(|v| a * v).collect();
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }
    }
}
