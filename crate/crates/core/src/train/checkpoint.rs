//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! file per tensor under `tensors/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::pretrain::{PretrainSettings, Pretrainer, RngState, RngStreams};
use crate::error::{Result, XitError};
use crate::model::{ModelConfig, XitModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";
const DTYPE: &str = "f32-le";

/// Model parameters with the full training state needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: XitModel,
    pub settings: PretrainSettings,
    pub step: usize,
    pub adam: AdamState,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    in_length: usize,
    model: ModelConfig,
    settings: PretrainSettings,
    step: usize,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

impl Pretrainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            settings: self.settings.clone(),
            step: self.step,
            adam: self.adam.clone(),
            rng: self.rngs.state(),
        }
    }

    /// Continues a run exactly where the checkpoint left off.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let rngs = RngStreams::restore(&ck.rng)?;
        Pretrainer::from_parts(ck.model, ck.settings, ck.adam, rngs, ck.step)
    }
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect()
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    if entry.dtype != DTYPE {
        return Err(XitError::Checkpoint(format!(
            "tensor `{}` has unsupported dtype `{}`",
            entry.name, entry.dtype
        )));
    }
    let path = dir.join(TENSOR_DIR).join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| XitError::io(&path, e))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(XitError::Checkpoint(format!(
            "tensor `{}` in {} holds {} bytes, expected {}",
            entry.name,
            path.display(),
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(&entry.shape, data)
}

fn file_name(name: &str) -> String {
    format!("{name}.bin")
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let store = self.model.params();
        let mut out: Vec<(String, &Tensor)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), &e.tensor))
            .collect();
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for (e, m) in store.entries().iter().zip(moments) {
                if let Some(m) = m {
                    out.push((format!("{prefix}.{}", e.name), m));
                }
            }
        }
        out
    }

    /// Writes the checkpoint directory, replacing files of the same name.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join(TENSOR_DIR);
        fs::create_dir_all(&tensor_dir).map_err(|e| XitError::io(&tensor_dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            if !t.all_finite() {
                return Err(XitError::NonFinite(format!("tensor `{name}`")));
            }
            let file = file_name(&name);
            let path = tensor_dir.join(&file);
            fs::write(&path, tensor_bytes(t)).map_err(|e| XitError::io(&path, e))?;
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                file,
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            in_length: self.model.in_length(),
            model: self.model.config().clone(),
            settings: self.settings.clone(),
            step: self.step,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            tensors: entries,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| XitError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| XitError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| XitError::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(XitError::Checkpoint(format!(
                "{} has format version {}, this build reads version {}",
                path.display(),
                manifest.version,
                CHECKPOINT_VERSION
            )));
        }
        let mut model = XitModel::new(&manifest.model, manifest.in_length, 0)?;
        let mut adam = AdamState::new(model.params());
        adam.step = manifest.adam_step;
        let mut seen = vec![false; model.params().len()];
        for entry in &manifest.tensors {
            let t = read_tensor(dir, entry)?;
            let (slot, name) = if let Some(rest) = entry.name.strip_prefix("adam.m.") {
                (Some(&mut adam.m), rest)
            } else if let Some(rest) = entry.name.strip_prefix("adam.v.") {
                (Some(&mut adam.v), rest)
            } else {
                (None, entry.name.as_str())
            };
            let idx = model
                .params()
                .index_of(name)
                .ok_or_else(|| XitError::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
            match slot {
                None => {
                    model.params_mut().set(name, t)?;
                    seen[idx] = true;
                }
                Some(moments) => {
                    let m = moments[idx].as_mut().ok_or_else(|| {
                        XitError::Checkpoint(format!("`{}` has no optimizer state", name))
                    })?;
                    if m.shape() != t.shape() {
                        return Err(XitError::Checkpoint(format!(
                            "tensor `{}` has shape {:?}, expected {:?}",
                            entry.name,
                            t.shape(),
                            m.shape()
                        )));
                    }
                    *m = t;
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(XitError::Checkpoint(format!(
                "missing tensor `{}`",
                model.params().entries()[i].name
            )));
        }
        Ok(Checkpoint {
            model,
            settings: manifest.settings,
            step: manifest.step,
            adam,
            rng: manifest.rng,
        })
    }
}
