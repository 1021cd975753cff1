//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep. Operations are
//! coarse (a whole conv layer, a whole attention block, a whole loss) with
//! hand-written vector-Jacobian products.

use rand::Rng;

use crate::error::{Result, XitError};
use crate::losses;
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
    },
    /// Normalization with per-channel statistics; `x` is `[N, C, L]` or `[N, C]`.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        n: usize,
        t: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ChannelsToTokens(Var),
    SliceTokens {
        x: Var,
        start: usize,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    Reshape(Var),
    /// Row `i` of the output is row `(i + shift) mod N` of `x`.
    RollRows {
        x: Var,
        shift: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar-valued node whose input gradients were computed during the
    /// forward evaluation.
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, expected: impl Into<String>, found: &[usize]) -> XitError {
    XitError::Shape {
        op,
        expected: expected.into(),
        found: format!("{found:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(XitError::NonFinite(op_name(&op).to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x [N, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, din) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[1] != din {
            return Err(shape_err(
                "linear",
                format!("weight [_, {din}]"),
                wv.shape(),
            ));
        }
        let dout = wv.shape()[0];
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(
            Mat::new(xv.data(), n, din),
            Mat::new(wv.data(), dout, din).t(),
            out.data_mut(),
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(shape_err("linear", format!("bias [{dout}]"), bv.shape()));
            }
            for row in out.data_mut().chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?}", av.shape()), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Inverted dropout. `p == 0` is the identity and draws nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(XitError::invalid(format!("dropout probability {p} >= 1")));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Mask { x, mask }, &[x])
    }

    /// Length-preserving 1D convolution without bias. `x [N, Cin, L]`,
    /// `w [Cout, Cin, K]`; zero padding of `(K−1)/2` on the left and the rest
    /// on the right.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 3 || wv.shape().len() != 3 || xv.shape()[1] != wv.shape()[1] {
            return Err(shape_err(
                "conv1d",
                format!(
                    "x [N, Cin, L] and w [Cout, Cin, K] with matching Cin, w {:?}",
                    wv.shape()
                ),
                xv.shape(),
            ));
        }
        let (n, cin, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let pad = (k - 1) / 2;
        let ck = cin * k;
        let mut cols = vec![0.0; n * ck * l];
        for s in 0..n {
            let xs = &xv.data()[s * cin * l..(s + 1) * cin * l];
            let cs = &mut cols[s * ck * l..(s + 1) * ck * l];
            for ci in 0..cin {
                for kk in 0..k {
                    let row = &mut cs[(ci * k + kk) * l..(ci * k + kk + 1) * l];
                    for (t, r) in row.iter_mut().enumerate() {
                        let src = t + kk;
                        if src >= pad && src - pad < l {
                            *r = xs[ci * l + src - pad];
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[n, cout, l]);
        for s in 0..n {
            gemm(
                Mat::new(wv.data(), cout, ck),
                Mat::new(&cols[s * ck * l..(s + 1) * ck * l], ck, l),
                &mut out.data_mut()[s * cout * l..(s + 1) * cout * l],
                0.0,
            );
        }
        self.push(out, Op::Conv1d { x, w, cols }, &[x, w])
    }

    fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
        match shape {
            [n, c] => Some((*n, *c, 1)),
            [n, c, l] => Some((*n, *c, *l)),
            _ => None,
        }
    }

    /// Training-mode batch norm: normalizes each channel with the statistics
    /// of the current batch and returns them for the running-average update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, c, l) = Self::channel_layout(xv.shape())
            .ok_or_else(|| shape_err("batch_norm", "[N, C] or [N, C, L]", xv.shape()))?;
        let count = n * l;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                mean[ch] += xv.data()[base..base + l].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                var[ch] += xv.data()[base..base + l]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let var_for_norm = var.clone();
        let stats = BatchStats { mean, var, count };
        let out = self.normalize(x, gamma, beta, &stats.mean, &var_for_norm, eps, true)?;
        Ok((out, stats))
    }

    /// Eval-mode batch norm with fixed (running) statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c, l) = Self::channel_layout(xv.shape())
            .ok_or_else(|| shape_err("batch_norm", "[N, C] or [N, C, L]", xv.shape()))?;
        if gv.len() != c || bv.len() != c || mean.len() != c || var.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("{c} channel parameters"),
                gv.shape(),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros(xv.shape());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * l;
                for i in base..base + l {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out.data_mut()[i] = gv.data()[ch] * h + bv.data()[ch];
                }
            }
        }
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Non-overlapping max pooling along the last axis of `[N, C, L]`;
    /// output length `floor(L / k)`. Ties resolve to the earliest position.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, l] = *xv.shape() else {
            return Err(shape_err("max_pool", "[N, C, L]", xv.shape()));
        };
        if k == 0 || l / k == 0 {
            return Err(shape_err("max_pool", format!("length >= {k}"), xv.shape()));
        }
        let lo = l / k;
        let mut out = Tensor::zeros(&[n, c, lo]);
        let mut argmax = vec![0; n * c * lo];
        for row in 0..n * c {
            for t in 0..lo {
                let start = row * l + t * k;
                let mut best = start;
                for i in start + 1..start + k {
                    if xv.data()[i] > xv.data()[best] {
                        best = i;
                    }
                }
                out.data_mut()[row * lo + t] = xv.data()[best];
                argmax[row * lo + t] = best;
            }
        }
        self.push(out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Layer norm over the last axis of a tensor viewed as `[rows, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().unwrap_or(&0);
        if gv.len() != d || bv.len() != d || d == 0 {
            return Err(shape_err(
                "layer_norm",
                format!("gamma/beta of {d}"),
                gv.shape(),
            ));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out.data_mut()[r * d + i] = gv.data()[i] * h + bv.data()[i];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product self-attention. `qkv` is `[n·t, 3C]`
    /// (queries, keys, values side by side); output is `[n·t, C]` with heads
    /// concatenated.
    pub fn attention(&mut self, qkv: Var, n: usize, t: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let width = qv.cols();
        if qv.rows() != n * t || !width.is_multiple_of(3) || !(width / 3).is_multiple_of(heads) {
            return Err(shape_err(
                "attention",
                format!("[{}, 3C] with C divisible by {heads}", n * t),
                qv.shape(),
            ));
        }
        let c = width / 3;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = qv.data();
        let mut probs = vec![0.0; n * heads * t * t];
        let mut out = Tensor::zeros(&[n * t, c]);
        for s in 0..n {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &q[(s * t + i) * width + h * dh..][..dh];
                    let row = &mut p[i * t..(i + 1) * t];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &q[(s * t + j) * width + c + h * dh..][..dh];
                        *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                    let o = &mut out.data_mut()[(s * t + i) * c + h * dh..][..dh];
                    for j in 0..t {
                        let vj = &q[(s * t + j) * width + 2 * c + h * dh..][..dh];
                        let pj = row[j];
                        for d in 0..dh {
                            o[d] += pj * vj[d];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                n,
                t,
                heads,
                probs,
            },
            &[qkv],
        )
    }

    /// `[N, C, L] → [N, L, C]`.
    pub fn channels_to_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, l] = *xv.shape() else {
            return Err(shape_err("channels_to_tokens", "[N, C, L]", xv.shape()));
        };
        let mut out = Tensor::zeros(&[n, l, c]);
        for s in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    out.data_mut()[(s * l + t) * c + ch] = xv.data()[(s * c + ch) * l + t];
                }
            }
        }
        self.push(out, Op::ChannelsToTokens(x), &[x])
    }

    /// Tokens `start..end` of `[N, L, C]`.
    pub fn slice_tokens(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, l, c] = *xv.shape() else {
            return Err(shape_err("slice_tokens", "[N, L, C]", xv.shape()));
        };
        if start >= end || end > l {
            return Err(shape_err(
                "slice_tokens",
                format!("0 <= {start} < {end} <= L"),
                xv.shape(),
            ));
        }
        let m = end - start;
        let mut out = Tensor::zeros(&[n, m, c]);
        for s in 0..n {
            out.data_mut()[s * m * c..(s + 1) * m * c]
                .copy_from_slice(&xv.data()[(s * l + start) * c..(s * l + end) * c]);
        }
        self.push(out, Op::SliceTokens { x, start }, &[x])
    }

    /// Prepends the same `[C]` token to every sequence of `[N, L, C]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        let [n, l, c] = *xv.shape() else {
            return Err(shape_err("prepend_token", "[N, L, C]", xv.shape()));
        };
        if tv.len() != c {
            return Err(shape_err(
                "prepend_token",
                format!("token of {c}"),
                tv.shape(),
            ));
        }
        let mut out = Tensor::zeros(&[n, l + 1, c]);
        for s in 0..n {
            let dst = &mut out.data_mut()[s * (l + 1) * c..(s + 1) * (l + 1) * c];
            dst[..c].copy_from_slice(tv.data());
            dst[c..].copy_from_slice(&xv.data()[s * l * c..(s + 1) * l * c]);
        }
        self.push(out, Op::PrependToken { x, token }, &[x, token])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Cyclic row shift: output row `i` is input row `(i + shift) mod N`.
    pub fn roll_rows(&mut self, x: Var, shift: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if n == 0 {
            return Err(shape_err("roll_rows", "at least one row", xv.shape()));
        }
        let w = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..n {
            let src = (i + shift) % n;
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(xv.row(src));
        }
        self.push(out, Op::RollRows { x, shift }, &[x])
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for (v, w) in terms {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(shape_err("weighted_sum", "scalar terms", t.shape()));
            }
            total += w * t.data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        )
    }

    fn fused(&mut self, value: f64, inputs: Vec<Var>, grads: Vec<Tensor>) -> Result<Var> {
        let ins = inputs.clone();
        self.push(Tensor::scalar(value), Op::Fused { inputs, grads }, &ins)
    }

    /// Temporal-contrasting loss node, see [`losses::tc_loss_with_grad`].
    pub fn tc_loss(
        &mut self,
        ctx_strong: Var,
        ctx_weak: Var,
        last_strong: Var,
        last_weak: Var,
        w: Var,
    ) -> Result<Var> {
        let (value, g) = losses::tc_loss_with_grad(
            self.value(ctx_strong),
            self.value(ctx_weak),
            self.value(last_strong),
            self.value(last_weak),
            self.value(w),
        )?;
        self.fused(
            value,
            vec![ctx_strong, ctx_weak, last_strong, last_weak, w],
            vec![g.ctx_strong, g.ctx_weak, g.last_strong, g.last_weak, g.w],
        )
    }

    /// Soft interpolation contextual contrasting loss node, see
    /// [`losses::sicc_loss_with_grad`].
    pub fn sicc_loss(
        &mut self,
        proj_left: Var,
        proj_strong: Var,
        proj_weak: Var,
        proj_right: Var,
        lambdas: &[f64],
        tau: f64,
    ) -> Result<Var> {
        let (value, g) = losses::sicc_loss_with_grad(
            self.value(proj_left),
            self.value(proj_strong),
            self.value(proj_weak),
            self.value(proj_right),
            lambdas,
            tau,
        )?;
        self.fused(
            value,
            vec![proj_left, proj_strong, proj_weak, proj_right],
            vec![g.proj_left, g.proj_strong, g.proj_weak, g.proj_right],
        )
    }

    /// Mean cross-entropy of `logits [N, K]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, g) = losses::cross_entropy_with_grad(self.value(logits), labels)?;
        self.fused(value, vec![logits], vec![g])
    }

    /// Reverse sweep from a scalar `root`. Gradients are kept only for leaves
    /// that require them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                "scalar root",
                self.value(root).shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.all_finite() {
                return Err(XitError::NonFinite(format!(
                    "gradient of {}",
                    op_name(&node.op)
                )));
            }
            self.backprop_node(node, &g, &mut grads);
        }
        // Drop gradients of nodes that are not leaves requiring grad.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.shape()[0];
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, xv.shape());
                    gemm(
                        Mat::new(gd, n, dout),
                        Mat::new(wv.data(), dout, din),
                        dx,
                        1.0,
                    );
                }
                if self.needs(*w) {
                    let dw = grad_slot(grads, *w, wv.shape());
                    gemm(
                        Mat::new(gd, n, dout).t(),
                        Mat::new(xv.data(), n, din),
                        dw,
                        1.0,
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = grad_slot(grads, *b, self.value(*b).shape());
                        for row in gd.chunks(dout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(grad_slot(grads, *v, g.shape()), gd);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let da = grad_slot(grads, *a, g.shape());
                    for (d, v) in da.iter_mut().zip(gd) {
                        *d += s * v;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let da = grad_slot(grads, *a, av.shape());
                    for ((d, v), x) in da.iter_mut().zip(gd).zip(av.data()) {
                        if *x > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Mask { x, mask } => {
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, g.shape());
                    for ((d, v), m) in dx.iter_mut().zip(gd).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::Conv1d { x, w, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let ck = cin * k;
                if self.needs(*w) {
                    let dw = grad_slot(grads, *w, wv.shape());
                    for s in 0..n {
                        gemm(
                            Mat::new(&gd[s * cout * l..(s + 1) * cout * l], cout, l),
                            Mat::new(&cols[s * ck * l..(s + 1) * ck * l], ck, l).t(),
                            dw,
                            1.0,
                        );
                    }
                }
                if self.needs(*x) {
                    let pad = (k - 1) / 2;
                    let mut dcols = vec![0.0; ck * l];
                    let dx = grad_slot(grads, *x, xv.shape());
                    for s in 0..n {
                        gemm(
                            Mat::new(wv.data(), cout, ck).t(),
                            Mat::new(&gd[s * cout * l..(s + 1) * cout * l], cout, l),
                            &mut dcols,
                            0.0,
                        );
                        let dxs = &mut dx[s * cin * l..(s + 1) * cin * l];
                        for ci in 0..cin {
                            for kk in 0..k {
                                let row = &dcols[(ci * k + kk) * l..(ci * k + kk + 1) * l];
                                for (t, r) in row.iter().enumerate() {
                                    let src = t + kk;
                                    if src >= pad && src - pad < l {
                                        dxs[ci * l + src - pad] += r;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (n, c, l) = Self::channel_layout(xv.shape()).expect("checked in forward");
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        for i in base..base + l {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    add_into(grad_slot(grads, *gamma, &[c]), &sum_gx);
                }
                if self.needs(*beta) {
                    add_into(grad_slot(grads, *beta, &[c]), &sum_g);
                }
                if self.needs(*x) {
                    let m = (n * l) as f64;
                    let dx = grad_slot(grads, *x, xv.shape());
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * l;
                            let scale = gv[ch] * inv_std[ch];
                            for i in base..base + l {
                                dx[i] += if *batch_stats {
                                    scale * (gd[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, self.value(*x).shape());
                    for (v, &src) in gd.iter().zip(argmax) {
                        dx[src] += v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data().to_vec();
                let rows = xv.len() / d;
                if self.needs(*gamma) {
                    let dg = grad_slot(grads, *gamma, &[d]);
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += gd[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = grad_slot(grads, *beta, &[d]);
                    for r in 0..rows {
                        add_into(db, &gd[r * d..(r + 1) * d]);
                    }
                }
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, xv.shape());
                    let mut dh = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dh[i] = gd[r * d + i] * gv[i];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhx =
                            dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            dx[r * d + i] += inv_std[r] * (dh[i] - mean_dh - xh[i] * mean_dhx);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                n,
                t,
                heads,
                probs,
            } => {
                if !self.needs(*qkv) {
                    return;
                }
                let qv = self.value(*qkv);
                let width = qv.cols();
                let c = width / 3;
                let (n, t, heads) = (*n, *t, *heads);
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let q = qv.data();
                let dq = grad_slot(grads, *qkv, qv.shape());
                let mut dp = vec![0.0; t];
                for s in 0..n {
                    for h in 0..heads {
                        let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                        for i in 0..t {
                            let go = &gd[(s * t + i) * c + h * dh..][..dh];
                            let prow = &p[i * t..(i + 1) * t];
                            for j in 0..t {
                                let vj = &q[(s * t + j) * width + 2 * c + h * dh..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                // dV_j += P_ij · dO_i
                                let dvj = &mut dq[(s * t + j) * width + 2 * c + h * dh..][..dh];
                                for d in 0..dh {
                                    dvj[d] += prow[j] * go[d];
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let qi_off = (s * t + i) * width + h * dh;
                                let kj_off = (s * t + j) * width + c + h * dh;
                                for d in 0..dh {
                                    dq[qi_off + d] += ds * q[kj_off + d];
                                    dq[kj_off + d] += ds * q[qi_off + d];
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelsToTokens(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (n, c, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let dx = grad_slot(grads, *x, xv.shape());
                    for s in 0..n {
                        for ch in 0..c {
                            for t in 0..l {
                                dx[(s * c + ch) * l + t] += gd[(s * l + t) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::SliceTokens { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (n, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let m = g.shape()[1];
                    let dx = grad_slot(grads, *x, xv.shape());
                    for s in 0..n {
                        add_into(
                            &mut dx[(s * l + start) * c..(s * l + start + m) * c],
                            &gd[s * m * c..(s + 1) * m * c],
                        );
                    }
                }
            }
            Op::PrependToken { x, token } => {
                let xv = self.value(*x);
                let (n, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                if self.needs(*token) {
                    let dt = grad_slot(grads, *token, self.value(*token).shape());
                    for s in 0..n {
                        add_into(dt, &gd[s * (l + 1) * c..s * (l + 1) * c + c]);
                    }
                }
                if self.needs(*x) {
                    let dx = grad_slot(grads, *x, xv.shape());
                    for s in 0..n {
                        add_into(
                            &mut dx[s * l * c..(s + 1) * l * c],
                            &gd[s * (l + 1) * c + c..(s + 1) * (l + 1) * c],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(grad_slot(grads, *x, self.value(*x).shape()), gd);
                }
            }
            Op::RollRows { x, shift } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (n, w) = (xv.rows(), xv.cols());
                    let dx = grad_slot(grads, *x, xv.shape());
                    for i in 0..n {
                        let src = (i + shift) % n;
                        add_into(&mut dx[src * w..(src + 1) * w], &gd[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    if self.needs(*v) {
                        grad_slot(grads, *v, &[1])[0] += w * gd[0];
                    }
                }
            }
            Op::Fused {
                inputs,
                grads: local,
            } => {
                for (v, lg) in inputs.iter().zip(local) {
                    if self.needs(*v) {
                        let dst = grad_slot(grads, *v, lg.shape());
                        for (d, s) in dst.iter_mut().zip(lg.data()) {
                            *d += gd[0] * s;
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Mask { .. } => "dropout",
        Op::Conv1d { .. } => "conv1d",
        Op::Norm { .. } => "batch_norm",
        Op::MaxPool { .. } => "max_pool",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::ChannelsToTokens(_) => "channels_to_tokens",
        Op::SliceTokens { .. } => "slice_tokens",
        Op::PrependToken { .. } => "prepend_token",
        Op::Reshape(_) => "reshape",
        Op::RollRows { .. } => "roll_rows",
        Op::WeightedSum(_) => "weighted_sum",
        Op::Fused { .. } => "loss",
    }
}
