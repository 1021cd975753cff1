//! Linear probing: a softmax classifier trained on frozen encoder features
//! with early stopping on validation AUROC.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_gradients, AdamState};
use super::FinetuneConfig;
use crate::autograd::Graph;
use crate::data::{prepad, Dataset};
use crate::error::{Result, XitError};
use crate::eval::{accuracy, auroc, macro_f1, PredictionSet};
use crate::model::{Classifier, ParamGrads, XitModel};
use crate::tensor::Tensor;

/// Early-stopping rule: stop once the metric has not strictly improved for
/// `patience` epochs and at least `min_steps` steps were taken, or as soon as
/// `max_steps` is reached.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    min_steps: usize,
    max_steps: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
    epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// The metric strictly exceeded every earlier epoch.
    pub improved: bool,
    /// The metric equals the best so far (including strict improvements).
    pub ties_best: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_steps: usize, max_steps: usize) -> Self {
        EarlyStopper {
            patience,
            min_steps,
            max_steps,
            best: None,
            best_epoch: 0,
            stale: 0,
            epochs: 0,
        }
    }

    /// Records the metric of the epoch that ended after `steps` total steps.
    pub fn observe(&mut self, metric: f64, steps: usize) -> StopDecision {
        self.epochs += 1;
        let improved = self.best.is_none_or(|b| metric > b);
        let ties_best = improved || self.best == Some(metric);
        if improved {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if ties_best {
            self.best_epoch = self.epochs;
        }
        let stop =
            steps >= self.max_steps || (self.stale >= self.patience && steps >= self.min_steps);
        StopDecision {
            improved,
            ties_best,
            stop,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best metric; the latest one when several tie.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Classifier of the best validation epoch (the latest of tied epochs).
    pub classifier: Classifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Test-set metrics of a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auroc: f64,
}

/// Splits indices per class, moving `round(fraction · n_c)` of each class
/// (at least one, and never the last member) to the validation side.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_val = if fraction > 0.0 && n >= 2 {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn present_classes(labels: &[usize]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

fn predictions(
    classifier: &Classifier,
    rows: &[Vec<f64>],
    labels: &[usize],
) -> Result<PredictionSet> {
    PredictionSet::new(classifier.predict_proba(rows)?, labels.to_vec())
}

/// Trains a fresh linear classifier on precomputed features.
pub fn finetune_features(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(XitError::invalid(format!(
            "need one label per feature row (got {} rows, {} labels)",
            features.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
        return Err(XitError::invalid(format!(
            "label {l} out of range for {num_classes} classes"
        )));
    }
    let dim = features[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut classifier = Classifier::new(dim, num_classes, seed)?;
    let (mut train_idx, mut val_idx) = stratified_split(labels, cfg.validation_fraction, &mut rng);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    if val_idx.is_empty() || present_classes(&val_labels) < 2 {
        if cfg.validation_fraction > 0.0 {
            log::warn!("validation split lacks two classes; monitoring the training split instead");
        }
        train_idx = (0..labels.len()).collect();
        val_idx = train_idx.clone();
    }
    let val_rows: Vec<Vec<f64>> = val_idx.iter().map(|&i| features[i].clone()).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let hp = cfg.adam();
    let mut adam = AdamState::new(classifier.params());
    let mut stopper = EarlyStopper::new(cfg.patience_epochs, cfg.min_steps, cfg.max_steps);
    let mut best = classifier.clone();
    let mut history = Vec::new();
    let mut steps = 0;
    loop {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| features[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut graph = Graph::new();
            let vars = classifier.params().bind(&mut graph, true);
            let x = graph.constant(Tensor::from_rows(&rows)?);
            let logits = classifier.logits_var(&mut graph, &vars, x)?;
            let loss = graph.cross_entropy(logits, &ys)?;
            loss_sum += graph.value(loss).data()[0];
            batches += 1;
            let raw = graph.backward(loss)?;
            let mut grads = ParamGrads::collect(classifier.params(), &vars, raw);
            clip_gradients(&mut grads, cfg.grad_clip_norm);
            adam.update(classifier.params_mut(), &grads, &hp)?;
            steps += 1;
            if steps >= cfg.max_steps {
                break;
            }
        }
        let metric = auroc(&predictions(&classifier, &val_rows, &val_labels)?)?;
        let decision = stopper.observe(metric, steps);
        history.push(EpochRecord {
            epoch: history.len() + 1,
            steps,
            train_loss: loss_sum / batches.max(1) as f64,
            val_auroc: metric,
        });
        if decision.ties_best {
            best = classifier.clone();
        }
        if decision.stop {
            break;
        }
    }
    Ok(FinetuneOutcome {
        classifier: best,
        history,
        best_epoch: stopper.best_epoch(),
        steps,
    })
}

/// Series of `dataset` prepadded to the encoder input length.
fn model_inputs(model: &XitModel, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let t = model.in_length();
    if dataset.max_length() > t {
        return Err(XitError::Shape {
            op: "finetune",
            expected: format!("series of length <= {t} (encoder input length)"),
            found: format!("{} in `{}`", dataset.max_length(), dataset.name),
        });
    }
    dataset
        .series
        .iter()
        .map(|s| prepad(s, t).map(|p| p.values))
        .collect()
}

/// Linear probe on the frozen encoder of `model`.
pub fn finetune(
    model: &XitModel,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let features = model.features(&model_inputs(model, dataset)?)?;
    finetune_features(
        &features,
        &dataset.labels()?,
        dataset.num_classes,
        cfg,
        seed,
    )
}

/// Accuracy, macro F1 and AUROC of a probe on a labeled dataset.
pub fn evaluate(
    model: &XitModel,
    classifier: &Classifier,
    dataset: &Dataset,
) -> Result<MetricsReport> {
    if dataset.num_classes != classifier.num_classes() {
        return Err(XitError::Shape {
            op: "evaluate",
            expected: format!("{} classes", classifier.num_classes()),
            found: format!("{} classes in `{}`", dataset.num_classes, dataset.name),
        });
    }
    let features = model.features(&model_inputs(model, dataset)?)?;
    let preds = predictions(classifier, &features, &dataset.labels()?)?;
    Ok(MetricsReport {
        accuracy: accuracy(&preds),
        macro_f1: macro_f1(&preds),
        auroc: auroc(&preds)?,
    })
}
