//! Synthetic labeled signal families and the transfer-surplus protocol:
//! pretrain on some families, linear-probe a held-out one, and compare with
//! probing a randomly initialized encoder.
//!
//! Every family draws a per-series amplitude `A ~ U[0.8, 1.2)`. Sines get a
//! phase shift of up to a quarter cycle and the square and ramp waves one of
//! up to an eighth. Classes differ only in the family parameter:
//!
//! | family           | class parameter for class `c` of `k`                         |
//! |------------------|--------------------------------------------------------------|
//! | `sine-freq`      | frequency `2 + 3c` cycles per series                          |
//! | `square-duty`    | duty cycle `(c + 1) / (k + 1)` of a 4-cycle square wave       |
//! | `sawtooth-slope` | peak position spaced evenly in `[0.1, 0.9]` of a 4-cycle ramp wave |
//! | `ar-noise`       | AR(1) coefficient spaced evenly in `[-0.8, 0.8]`, unit variance |
//!
//! Gaussian noise of standard deviation `noise_sigma` is added on top.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{build_collection, Dataset, Split, TimeSeries};
use crate::error::{Result, XitError};
use crate::model::{ModelConfig, XitModel};
use crate::registry::Registry;
use crate::train::{
    evaluate, finetune, FinetuneConfig, MetricsReport, PretrainSettings, Pretrainer,
};

/// A class-parameterized generator of clean (noise-free) signals.
pub trait SignalFamily: Send + Sync {
    fn name(&self) -> &str;

    /// Largest supported number of classes.
    fn max_classes(&self) -> usize {
        4
    }

    fn sample(
        &self,
        class: usize,
        classes: usize,
        length: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64>;
}

fn amplitude(rng: &mut dyn RngCore) -> f64 {
    rng.random_range(0.8..1.2)
}

fn quarter_shift(rng: &mut dyn RngCore) -> f64 {
    rng.random_range(0.0..0.25)
}

struct SineFreq;

impl SignalFamily for SineFreq {
    fn name(&self) -> &str {
        "sine-freq"
    }

    fn sample(&self, class: usize, _: usize, length: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let a = amplitude(rng);
        let phase = 2.0 * PI * quarter_shift(rng);
        let f = 2.0 + 3.0 * class as f64;
        (0..length)
            .map(|t| a * (2.0 * PI * f * t as f64 / length as f64 + phase).sin())
            .collect()
    }
}

const WAVE_CYCLES: f64 = 4.0;

fn periodic(length: usize, rng: &mut dyn RngCore, shape: impl Fn(f64) -> f64) -> Vec<f64> {
    let a = amplitude(rng);
    let shift = quarter_shift(rng) / 2.0;
    (0..length)
        .map(|t| {
            let cycle = WAVE_CYCLES * t as f64 / length as f64 + shift;
            a * shape(cycle.fract())
        })
        .collect()
}

struct SquareDuty;

impl SignalFamily for SquareDuty {
    fn name(&self) -> &str {
        "square-duty"
    }

    fn sample(
        &self,
        class: usize,
        classes: usize,
        length: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        let duty = (class + 1) as f64 / (classes + 1) as f64;
        periodic(length, rng, |u| if u < duty { 1.0 } else { -1.0 })
    }
}

struct SawtoothSlope;

impl SignalFamily for SawtoothSlope {
    fn name(&self) -> &str {
        "sawtooth-slope"
    }

    fn sample(
        &self,
        class: usize,
        classes: usize,
        length: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        let peak = 0.1 + 0.8 * class as f64 / (classes - 1).max(1) as f64;
        periodic(length, rng, |u| {
            let y = if u < peak {
                u / peak
            } else {
                (1.0 - u) / (1.0 - peak)
            };
            2.0 * y - 1.0
        })
    }
}

struct ArNoise;

impl SignalFamily for ArNoise {
    fn name(&self) -> &str {
        "ar-noise"
    }

    fn sample(
        &self,
        class: usize,
        classes: usize,
        length: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        let phi = -0.8 + 1.6 * class as f64 / (classes - 1).max(1) as f64;
        let a = amplitude(rng);
        let innovation = (1.0 - phi * phi).sqrt();
        let mut x: f64 = StandardNormal.sample(&mut *rng);
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            out.push(a * x);
            let e: f64 = StandardNormal.sample(&mut *rng);
            x = phi * x + innovation * e;
        }
        out
    }
}

pub fn families() -> Registry<dyn SignalFamily> {
    let mut reg: Registry<dyn SignalFamily> = Registry::new("signal family");
    let all: [Arc<dyn SignalFamily>; 4] = [
        Arc::new(SineFreq),
        Arc::new(SquareDuty),
        Arc::new(SawtoothSlope),
        Arc::new(ArNoise),
    ];
    for f in all {
        let name = f.name().to_string();
        reg.register(&name, f)
            .expect("built-in family names are unique");
    }
    reg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub family: String,
    pub classes: usize,
    pub samples_per_class: usize,
    pub length: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// A balanced labeled dataset, series ordered class by class.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    let family = families().get(&spec.family)?;
    if spec.classes < 2 || spec.classes > family.max_classes() {
        return Err(XitError::invalid(format!(
            "{} supports 2..={} classes, got {}",
            spec.family,
            family.max_classes(),
            spec.classes
        )));
    }
    if spec.samples_per_class == 0 || spec.length < 2 {
        return Err(XitError::invalid(
            "need at least one sample per class and length >= 2",
        ));
    }
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| XitError::invalid(format!("noise_sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut series = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for c in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let mut x = family.sample(c, spec.classes, spec.length, &mut rng);
            if spec.noise_sigma > 0.0 {
                x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            series.push(TimeSeries::new(x, Some(c))?);
        }
    }
    Dataset::new(
        &spec.family,
        &spec.family,
        series,
        spec.classes,
        Split::Unspecified,
    )
}

/// Everything fixed across the two arms of a transfer experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub pretrained: MetricsReport,
    pub random_init: MetricsReport,
    /// Macro F1 of the pretrained arm minus the random-init arm.
    pub surplus: f64,
}

/// Macro F1 difference of two probes on the same data.
pub fn surplus(pretrained: &MetricsReport, random_init: &MetricsReport) -> f64 {
    pretrained.macro_f1 - random_init.macro_f1
}

/// Pretrains on `sources`, then probes `target_train` with the pretrained and
/// with the untouched initial encoder (same seed) and scores both on
/// `target_test`.
pub fn transfer_surplus(
    sources: &[SynthSpec],
    target_train: &SynthSpec,
    target_test: &SynthSpec,
    cfg: &TransferConfig,
) -> Result<TransferResult> {
    let source_names: Vec<&str> = sources.iter().map(|s| s.family.as_str()).collect();
    if source_names.contains(&target_train.family.as_str()) {
        return Err(XitError::invalid(format!(
            "target family `{}` is also a source",
            target_train.family
        )));
    }
    let datasets = sources.iter().map(generate).collect::<Result<Vec<_>>>()?;
    let train = generate(target_train)?;
    let test = generate(target_test)?;
    let t = datasets
        .iter()
        .chain([&train, &test])
        .map(Dataset::max_length)
        .max()
        .unwrap_or(0);
    let collection = build_collection(
        datasets
            .iter()
            .map(|d| d.padded(t))
            .collect::<Result<Vec<_>>>()?,
    )?;

    let initial = XitModel::new(&cfg.model, t, cfg.seed)?;
    let mut trainer = Pretrainer::new(initial.clone(), cfg.pretrain.clone(), cfg.seed)?;
    trainer.run(&collection, cfg.pretrain.train.steps, |_| Ok(()))?;
    let pretrained = trainer.into_model();

    let probe = |model: &XitModel| -> Result<MetricsReport> {
        let out = finetune(model, &train, &cfg.finetune, cfg.seed)?;
        evaluate(model, &out.classifier, &test)
    };
    let pre = probe(&pretrained)?;
    let rnd = probe(&initial)?;
    Ok(TransferResult {
        surplus: surplus(&pre, &rnd),
        pretrained: pre,
        random_init: rnd,
    })
}
