//! Pretraining objectives selectable by name: the full method and the
//! ablations that drop mixing or one of the two losses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XitError};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the TC loss; SICC gets `1 − beta`.
    pub beta: f64,
    /// Temperature of the scaled cosine similarity.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.25,
            tau: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(XitError::Config {
                key: "loss.beta".into(),
                message: format!("must lie in [0, 1], got {}", self.beta),
            });
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(XitError::Config {
                key: "loss.tau".into(),
                message: format!("must be > 0, got {}", self.tau),
            });
        }
        Ok(())
    }
}

/// Which parts of the pretraining pipeline are active.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    /// Whether views are built from mixed series (otherwise from the raw batch).
    fn uses_mixup(&self) -> bool;

    fn uses_tc(&self) -> bool;

    fn uses_sicc(&self) -> bool;

    /// Weights of `(L_TC, L_SICC)` in the total. A lone active loss gets 1.
    fn weights(&self, beta: f64) -> (f64, f64) {
        match (self.uses_tc(), self.uses_sicc()) {
            (true, true) => (beta, 1.0 - beta),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Ablation {
    name: &'static str,
    mixup: bool,
    tc: bool,
    sicc: bool,
}

impl Objective for Ablation {
    fn name(&self) -> &str {
        self.name
    }

    fn uses_mixup(&self) -> bool {
        self.mixup
    }

    fn uses_tc(&self) -> bool {
        self.tc
    }

    fn uses_sicc(&self) -> bool {
        self.sicc
    }
}

pub const DEFAULT_OBJECTIVE: &str = "full";

/// Registry of the built-in objectives.
pub fn objectives() -> Registry<dyn Objective> {
    let mut reg: Registry<dyn Objective> = Registry::new("ablation");
    let all = [
        Ablation {
            name: "full",
            mixup: true,
            tc: true,
            sicc: true,
        },
        Ablation {
            name: "xd_sicc",
            mixup: true,
            tc: false,
            sicc: true,
        },
        Ablation {
            name: "xd_tc",
            mixup: true,
            tc: true,
            sicc: false,
        },
        Ablation {
            name: "tc_only",
            mixup: false,
            tc: true,
            sicc: false,
        },
    ];
    for a in all {
        let name = a.name;
        reg.register(name, Arc::new(a))
            .expect("built-in objective names are unique");
    }
    reg
}

pub fn objective(name: &str) -> Result<Arc<dyn Objective>> {
    objectives().get(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_and_weights() {
        let full = objective("full").unwrap();
        assert_eq!(full.weights(0.25), (0.25, 0.75));
        let tc = objective("xd_tc").unwrap();
        assert!(tc.uses_mixup() && !tc.uses_sicc());
        assert_eq!(tc.weights(0.25), (1.0, 0.0));
        assert_eq!(objective("xd_sicc").unwrap().weights(0.25), (0.0, 1.0));
        let raw = objective("tc_only").unwrap();
        assert!(!raw.uses_mixup() && raw.uses_tc() && !raw.uses_sicc());
    }

    #[test]
    fn every_ablation_has_a_distinct_mask() {
        let reg = objectives();
        let mut masks: Vec<(bool, bool, bool)> = reg
            .names()
            .iter()
            .map(|n| {
                let o = reg.get(n).unwrap();
                (o.uses_mixup(), o.uses_tc(), o.uses_sicc())
            })
            .collect();
        masks.sort();
        masks.dedup();
        assert_eq!(masks.len(), 4);
        // SICC needs mixing coefficients.
        assert!(masks.iter().all(|(mix, _, sicc)| !sicc || *mix));
    }

    #[test]
    fn unknown_name_lists_choices() {
        let err = objective("nope").err().unwrap().to_string();
        assert!(err.contains("tc_only") && err.contains("full"));
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            beta: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
