//! Adam with L2 weight decay folded into the gradient, and global-norm
//! gradient clipping.

use crate::error::{Result, XitError};
use crate::model::{ParamGrads, ParamStore};
use crate::tensor::{round_f32, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per trainable tensor, aligned with a
/// [`ParamStore`]. Parameters and moments are kept at `f32` precision after
/// every update so that checkpoints reproduce them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| e.trainable.then(|| Tensor::zeros(e.tensor.shape())))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        hp: &AdamHyper,
    ) -> Result<()> {
        if grads.grads.len() != store.len() || self.m.len() != store.len() {
            return Err(XitError::Shape {
                op: "adam_step",
                expected: format!("{} tensors", store.len()),
                found: format!("{} gradients", grads.grads.len()),
            });
        }
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(XitError::NonFinite(format!(
                        "gradient of `{}`",
                        store.entries()[i].name
                    )));
                }
                if g.shape() != store.tensor(i).shape() {
                    return Err(XitError::Shape {
                        op: "adam_step",
                        expected: format!("{:?}", store.tensor(i).shape()),
                        found: format!("{:?}", g.shape()),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (i, g) in grads.grads.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (g, self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let p = store.tensor_mut(i).data_mut();
            for (((p, m), v), g) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g + hp.weight_decay * *p;
                *m = round_f32(hp.beta1 * *m + (1.0 - hp.beta1) * g);
                *v = round_f32(hp.beta2 * *v + (1.0 - hp.beta2) * g * g);
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = round_f32(*p - hp.lr * m_hat / (v_hat.sqrt() + hp.eps));
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}
