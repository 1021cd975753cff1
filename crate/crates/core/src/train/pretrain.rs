//! The self-supervised pretraining loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_gradients, AdamState};
use super::PretrainConfig;
use crate::augment::{strong_augment, weak_augment, AugmentConfig};
use crate::autograd::{Graph, Var};
use crate::data::{sample_batch, Collection};
use crate::error::{Result, XitError};
use crate::mixup::{sample_lambda, xd_mixup_batch, MixupConfig};
use crate::model::{Forward, Mode, ParamGrads, XitModel};
use crate::objective::{objective, LossConfig, Objective};
use crate::tensor::Tensor;

/// Everything besides the model that determines a pretraining run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub train: PretrainConfig,
    pub augment: AugmentConfig,
    pub mixup: MixupConfig,
    pub loss: LossConfig,
}

impl PretrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        if !(self.mixup.alpha > 0.0) {
            return Err(XitError::Config {
                key: "mixup.alpha".into(),
                message: format!("must be > 0, got {}", self.mixup.alpha),
            });
        }
        self.loss.validate()?;
        objective(&self.train.ablation).map(|_| ())
    }
}

/// Independent random streams of one run, all derived from a single seed.
/// Keeping them apart means that switching off a component (for example
/// mixing) does not shift the randomness of the others.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub seed: u64,
    /// Batch sampling.
    pub data: ChaCha8Rng,
    /// Mixing coefficients.
    pub mixup: ChaCha8Rng,
    /// Weak and strong augmentations.
    pub augment: ChaCha8Rng,
    /// Dropout masks.
    pub dropout: ChaCha8Rng,
}

/// Serializable position of every stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Word positions of the data, mixup, augment and dropout streams, as
    /// decimal strings (they are 128-bit).
    pub word_pos: [String; 4],
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        RngStreams {
            seed,
            data: stream(0),
            mixup: stream(1),
            augment: stream(2),
            dropout: stream(3),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: [&self.data, &self.mixup, &self.augment, &self.dropout]
                .map(|r| r.get_word_pos().to_string()),
        }
    }

    pub fn restore(state: &RngState) -> Result<Self> {
        let mut s = Self::new(state.seed);
        for (r, pos) in [&mut s.data, &mut s.mixup, &mut s.augment, &mut s.dropout]
            .into_iter()
            .zip(&state.word_pos)
        {
            let pos: u128 = pos
                .parse()
                .map_err(|_| XitError::Checkpoint(format!("bad RNG word position `{pos}`")))?;
            r.set_word_pos(pos);
        }
        Ok(s)
    }
}

/// Loss values of one optimizer step; inactive losses are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_tc: Option<f64>,
    pub l_sicc: Option<f64>,
    pub l_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
}

pub const TELEMETRY_HEADER: &str = "step,l_tc,l_sicc,l_total";

/// Append-only loss log `step,l_tc,l_sicc,l_total`.
pub struct Telemetry {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Telemetry {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists()
            || std::fs::metadata(path)
                .map(|m| m.len() == 0)
                .unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| XitError::io(path, e))?;
        let mut t = Telemetry {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if fresh {
            t.write_line(TELEMETRY_HEADER)?;
        }
        Ok(t)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| XitError::io(&self.path, e))
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let line = format!("{},{},{},{}", r.step, opt(r.l_tc), opt(r.l_sicc), r.l_total);
        self.write_line(&line)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| XitError::io(&self.path, e))
    }
}

/// The series of one pretraining step: the sampled originals, the mixing
/// coefficients (absent without mixing) and the two augmented views of the
/// mixed (or raw) series.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub originals: Vec<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
    pub strong: Vec<Vec<f64>>,
    pub weak: Vec<Vec<f64>>,
}

/// Root node and component values of a step's objective.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub l_tc: Option<f64>,
    pub l_sicc: Option<f64>,
    pub l_total: f64,
}

/// Adds the pretraining objective for `batch` to the graph behind `f`.
/// Strong views, weak views and originals are encoded in separate passes so
/// each gets its own batch statistics.
pub fn objective_graph(
    model: &XitModel,
    f: &mut Forward<'_, '_>,
    batch: &StepBatch,
    obj: &dyn Objective,
    loss: &LossConfig,
) -> Result<StepLoss> {
    let view = |f: &mut Forward<'_, '_>, rows: &[Vec<f64>]| -> Result<(Var, Var)> {
        let x = f.graph.constant(Tensor::from_rows(rows)?);
        let z = model.encode(f, x)?;
        let prefix = model.prefix(f, z)?;
        let c = model.summarize(f, prefix)?;
        let last = model.last(f, z)?;
        Ok((c, last))
    };
    let (c_strong, z_strong) = view(f, &batch.strong)?;
    let (c_weak, z_weak) = view(f, &batch.weak)?;
    let (w_tc, w_sicc) = obj.weights(loss.beta);
    let mut terms = Vec::new();
    let mut l_tc = None;
    let mut l_sicc = None;
    if obj.uses_tc() {
        let w = model.bilinear(f);
        let t = f.graph.tc_loss(c_strong, c_weak, z_strong, z_weak, w)?;
        l_tc = Some(f.graph.value(t).data()[0]);
        terms.push((t, w_tc));
    }
    if obj.uses_sicc() {
        let lambdas = batch
            .lambdas
            .as_deref()
            .ok_or_else(|| XitError::invalid("SICC requires mixing coefficients"))?;
        let (c_orig, _) = view(f, &batch.originals)?;
        let k_left = model.project(f, c_orig)?;
        let k_right = f.graph.roll_rows(k_left, 1)?;
        let k_strong = model.project(f, c_strong)?;
        let k_weak = model.project(f, c_weak)?;
        let s = f
            .graph
            .sicc_loss(k_left, k_strong, k_weak, k_right, lambdas, loss.tau)?;
        l_sicc = Some(f.graph.value(s).data()[0]);
        terms.push((s, w_sicc));
    }
    let total = f.graph.weighted_sum(&terms)?;
    let l_total = f.graph.value(total).data()[0];
    Ok(StepLoss {
        total,
        l_tc,
        l_sicc,
        l_total,
    })
}

/// Owns the model and all optimizer/RNG state of a pretraining run.
pub struct Pretrainer {
    pub(super) model: XitModel,
    pub(super) settings: PretrainSettings,
    pub(super) objective: Arc<dyn Objective>,
    pub(super) adam: AdamState,
    pub(super) rngs: RngStreams,
    pub(super) step: usize,
}

impl Pretrainer {
    pub fn new(model: XitModel, settings: PretrainSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Pretrainer {
            objective: objective(&settings.train.ablation)?,
            model,
            settings,
            adam,
            rngs: RngStreams::new(seed),
            step: 0,
        })
    }

    pub(super) fn from_parts(
        model: XitModel,
        settings: PretrainSettings,
        adam: AdamState,
        rngs: RngStreams,
        step: usize,
    ) -> Result<Self> {
        settings.validate()?;
        Ok(Pretrainer {
            objective: objective(&settings.train.ablation)?,
            model,
            settings,
            adam,
            rngs,
            step,
        })
    }

    pub fn model(&self) -> &XitModel {
        &self.model
    }

    pub fn into_model(self) -> XitModel {
        self.model
    }

    pub fn settings(&self) -> &PretrainSettings {
        &self.settings
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn rng_streams(&self) -> &RngStreams {
        &self.rngs
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self, collection: &Collection) -> Result<StepRecord> {
        let step = self.step;
        self.try_step(collection).map_err(|e| match e {
            XitError::NonFinite(reason) => XitError::Diverged { step, reason },
            other => other,
        })
    }

    /// Samples a batch, mixes it when the objective needs mixing and draws
    /// both augmented views.
    fn draw_batch(&mut self, collection: &Collection) -> Result<StepBatch> {
        let cfg = &self.settings;
        let b = cfg.train.batch_size;
        let originals: Vec<Vec<f64>> = sample_batch(collection, b, &mut self.rngs.data)?
            .into_iter()
            .map(|s| s.values)
            .collect();
        let (sources, lambdas) = if self.objective.uses_mixup() {
            let lambdas = (0..b)
                .map(|_| sample_lambda(cfg.mixup.alpha, &mut self.rngs.mixup))
                .collect::<Result<Vec<f64>>>()?;
            (xd_mixup_batch(&originals, &lambdas)?.mixed, Some(lambdas))
        } else {
            (originals.clone(), None)
        };
        let strong = sources
            .iter()
            .map(|x| strong_augment(x, &cfg.augment, &mut self.rngs.augment))
            .collect();
        let weak = sources
            .iter()
            .map(|x| weak_augment(x, &cfg.augment, &mut self.rngs.augment))
            .collect();
        Ok(StepBatch {
            originals,
            lambdas,
            strong,
            weak,
        })
    }

    fn try_step(&mut self, collection: &Collection) -> Result<StepRecord> {
        if collection.target_length() != self.model.in_length() {
            return Err(XitError::Shape {
                op: "pretrain",
                expected: format!("series of length {}", self.model.in_length()),
                found: format!("collection length {}", collection.target_length()),
            });
        }
        let batch = self.draw_batch(collection)?;
        let cfg = &self.settings;
        let mut graph = Graph::new();
        let mut f = Forward::new(
            &mut graph,
            self.model.params(),
            Mode::Train,
            true,
            Some(&mut self.rngs.dropout),
        );
        let loss = objective_graph(
            &self.model,
            &mut f,
            &batch,
            self.objective.as_ref(),
            &cfg.loss,
        )?;
        let vars = std::mem::take(&mut f.vars);
        let bn_updates = std::mem::take(&mut f.bn_updates);
        drop(f);

        let total = loss.total;
        let (l_tc, l_sicc, l_total) = (loss.l_tc, loss.l_sicc, loss.l_total);
        let raw = graph.backward(total)?;
        let mut grads = ParamGrads::collect(self.model.params(), &vars, raw);
        let grad_norm = clip_gradients(&mut grads, cfg.train.grad_clip_norm);
        let clipped_norm = grads.global_norm();
        let hp = cfg.train.adam();
        self.adam.update(self.model.params_mut(), &grads, &hp)?;
        self.model.apply_bn_updates(&bn_updates);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            l_tc,
            l_sicc,
            l_total,
            grad_norm,
            clipped_norm,
        })
    }

    /// Runs `steps` optimizer steps, handing every record to `on_step`.
    pub fn run<F>(&mut self, collection: &Collection, steps: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepRecord) -> Result<()>,
    {
        for _ in 0..steps {
            let record = self.step(collection)?;
            log::debug!(
                "step {} total {:.5} tc {:?} sicc {:?}",
                record.step,
                record.l_total,
                record.l_tc,
                record.l_sicc
            );
            on_step(&record)?;
        }
        Ok(())
    }
}
