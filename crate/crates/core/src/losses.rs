//! Training objectives: temporal contrasting (TC), soft interpolation
//! contextual contrasting (SICC), their convex combination, and the
//! cross-entropy used for linear probing.
//!
//! Every loss is evaluated in log-space. The `*_with_grad` variants also
//! return exact gradients with respect to each input matrix; the autograd
//! graph uses them as fused nodes.

use crate::error::{Result, XitError};
use crate::tensor::{gemm, log_sum_exp, Mat, Tensor};

/// Per-batch views consumed by the two contrastive losses.
///
/// Rows are batch elements. `proj_left` / `proj_right` are projections of the
/// *original* left and right series of each ring pair.
#[derive(Clone, Debug)]
pub struct ContrastBatchViews {
    /// Contexts of the strongly augmented views, `[B, C]`.
    pub ctx_strong: Tensor,
    /// Contexts of the weakly augmented views, `[B, C]`.
    pub ctx_weak: Tensor,
    /// Last encoder embedding of the strong views, `[B, Z]`.
    pub last_strong: Tensor,
    /// Last encoder embedding of the weak views, `[B, Z]`.
    pub last_weak: Tensor,
    pub proj_left: Tensor,
    pub proj_strong: Tensor,
    pub proj_weak: Tensor,
    pub proj_right: Tensor,
    pub lambdas: Vec<f64>,
}

impl ContrastBatchViews {
    pub fn batch_size(&self) -> usize {
        self.ctx_strong.rows()
    }
}

/// `exp(cᵀ W z)`.
pub fn bilinear_score(w: &Tensor, c: &[f64], z: &[f64]) -> Result<f64> {
    let (cd, zd) = (w.shape()[0], w.cols());
    if c.len() != cd || z.len() != zd {
        return Err(XitError::Shape {
            op: "bilinear_score",
            expected: format!("c of {cd}, z of {zd}"),
            found: format!("c of {}, z of {}", c.len(), z.len()),
        });
    }
    Ok(bilinear_logit(w, c, z).exp())
}

fn bilinear_logit(w: &Tensor, c: &[f64], z: &[f64]) -> f64 {
    c.iter()
        .enumerate()
        .map(|(r, cr)| cr * w.row(r).iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

#[derive(Clone, Debug)]
pub struct TcGrads {
    pub ctx_strong: Tensor,
    pub ctx_weak: Tensor,
    pub last_strong: Tensor,
    pub last_weak: Tensor,
    pub w: Tensor,
}

pub fn tc_loss(views: &ContrastBatchViews, w: &Tensor) -> Result<f64> {
    tc_loss_with_grad(
        &views.ctx_strong,
        &views.ctx_weak,
        &views.last_strong,
        &views.last_weak,
        w,
    )
    .map(|(v, _)| v)
}

/// One direction of the cross-forecasting task: contexts `ctx` predict the
/// last embeddings `last` of the other view. Returns the mean InfoNCE loss and
/// accumulates `scale`-weighted gradients.
fn tc_direction(
    ctx: &Tensor,
    last: &Tensor,
    w: &Tensor,
    scale: f64,
    d_ctx: &mut Tensor,
    d_last: &mut Tensor,
    d_w: &mut Tensor,
) -> Result<f64> {
    let b = ctx.rows();
    let (c, z) = (w.rows(), w.cols());
    // u = ctx · W  [B, Z]; logits = u · lastᵀ  [B, B]
    let mut u = vec![0.0; b * z];
    gemm(
        Mat::new(ctx.data(), b, c),
        Mat::new(w.data(), c, z),
        &mut u,
        0.0,
    );
    let mut logits = vec![0.0; b * b];
    gemm(
        Mat::new(&u, b, z),
        Mat::new(last.data(), b, z).t(),
        &mut logits,
        0.0,
    );
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(XitError::NonFinite("tc_loss logits".into()));
    }
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; b * b];
    for i in 0..b {
        let row = &logits[i * b..(i + 1) * b];
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[i];
        for j in 0..b {
            d_logits[i * b + j] = (row[j] - lse).exp() * scale / b as f64;
        }
        d_logits[i * b + i] -= scale / b as f64;
    }
    // d_u = d_logits · last; d_last += d_logitsᵀ · u
    let mut d_u = vec![0.0; b * z];
    gemm(
        Mat::new(&d_logits, b, b),
        Mat::new(last.data(), b, z),
        &mut d_u,
        0.0,
    );
    gemm(
        Mat::new(&d_logits, b, b).t(),
        Mat::new(&u, b, z),
        d_last.data_mut(),
        1.0,
    );
    // d_ctx += d_u · Wᵀ; d_W += ctxᵀ · d_u
    gemm(
        Mat::new(&d_u, b, z),
        Mat::new(w.data(), c, z).t(),
        d_ctx.data_mut(),
        1.0,
    );
    gemm(
        Mat::new(ctx.data(), b, c).t(),
        Mat::new(&d_u, b, z),
        d_w.data_mut(),
        1.0,
    );
    Ok(loss / b as f64)
}

/// `L_TC = ½(L_TC^s + L_TC^w)` with gradients.
pub fn tc_loss_with_grad(
    ctx_strong: &Tensor,
    ctx_weak: &Tensor,
    last_strong: &Tensor,
    last_weak: &Tensor,
    w: &Tensor,
) -> Result<(f64, TcGrads)> {
    let b = ctx_strong.rows();
    let (c, z) = (w.rows(), w.cols());
    if b == 0 {
        return Err(XitError::invalid("tc_loss needs B >= 1"));
    }
    for (name, t, width) in [
        ("ctx_strong", ctx_strong, c),
        ("ctx_weak", ctx_weak, c),
        ("last_strong", last_strong, z),
        ("last_weak", last_weak, z),
    ] {
        if t.shape() != [b, width] {
            return Err(XitError::Shape {
                op: "tc_loss",
                expected: format!("{name} [{b}, {width}]"),
                found: format!("{:?}", t.shape()),
            });
        }
    }
    let mut g = TcGrads {
        ctx_strong: Tensor::zeros(&[b, c]),
        ctx_weak: Tensor::zeros(&[b, c]),
        last_strong: Tensor::zeros(&[b, z]),
        last_weak: Tensor::zeros(&[b, z]),
        w: Tensor::zeros(&[c, z]),
    };
    let ls = tc_direction(
        ctx_weak,
        last_strong,
        w,
        0.5,
        &mut g.ctx_weak,
        &mut g.last_strong,
        &mut g.w,
    )?;
    let lw = tc_direction(
        ctx_strong,
        last_weak,
        w,
        0.5,
        &mut g.ctx_strong,
        &mut g.last_weak,
        &mut g.w,
    )?;
    Ok((0.5 * (ls + lw), g))
}

/// Scaled cosine similarity `uᵀv / (τ‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(XitError::Shape {
            op: "cosine_sim",
            expected: format!("length {}", u.len()),
            found: format!("length {}", v.len()),
        });
    }
    if tau <= 0.0 {
        return Err(XitError::invalid(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(XitError::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (tau * nu * nv))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Soft contrastive term over a set of vectors:
/// `−log( exp(μ·sim(s_i, s_j)) / Σ_{k≠i} exp(sim(s_i, s_k)) )`.
///
/// μ scales only the numerator similarity.
pub fn ell(set: &[Vec<f64>], i: usize, j: usize, mu: f64, tau: f64) -> Result<f64> {
    if i == j {
        return Err(XitError::invalid("ell requires i != j"));
    }
    if i >= set.len() || j >= set.len() {
        return Err(XitError::invalid(format!(
            "ell index out of range ({i}, {j}) for a set of {}",
            set.len()
        )));
    }
    let sims = set
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, s)| cosine_sim(&set[i], s, tau))
        .collect::<Result<Vec<_>>>()?;
    let pos = cosine_sim(&set[i], &set[j], tau)?;
    Ok(log_sum_exp(sims.iter().copied()) - mu * pos)
}

/// `(anchor, positive, μ)` triples of one SICC set, indices into the 3B set.
pub fn sicc_pairs(lambdas: &[f64]) -> Vec<(usize, usize, f64)> {
    let b = lambdas.len();
    let mut out = Vec::with_capacity(4 * b);
    for (i, &lam) in lambdas.iter().enumerate() {
        out.push((i, b + i, 1.0 - lam));
        out.push((b + i, i, 1.0 - lam));
        out.push((b + i, 2 * b + i, lam));
        out.push((2 * b + i, b + i, lam));
    }
    out
}

/// SICC loss for one arranged set `(left…, augmented…, right…)` of `3B` rows.
/// Returns the loss and its gradient w.r.t. the set rows.
fn sicc_set(set: &Tensor, lambdas: &[f64], tau: f64) -> Result<(f64, Tensor)> {
    let n = set.rows();
    let p = set.cols();
    let b = lambdas.len();
    let mut unit = vec![0.0; n * p];
    let mut norms = vec![0.0; n];
    for a in 0..n {
        let r = set.row(a);
        let nr = norm(r);
        if nr == 0.0 || !nr.is_finite() {
            return Err(XitError::invalid(format!(
                "sicc_loss: projection {a} has zero or non-finite norm"
            )));
        }
        norms[a] = nr;
        for (u, v) in unit[a * p..(a + 1) * p].iter_mut().zip(r) {
            *u = v / nr;
        }
    }
    let mut sim = vec![0.0; n * n];
    gemm(
        Mat::new(&unit, n, p),
        Mat::new(&unit, n, p).t(),
        &mut sim,
        0.0,
    );
    sim.iter_mut().for_each(|s| *s /= tau);

    // Denominators depend only on the anchor row; cache their softmax.
    let mut lse = vec![0.0; n];
    for a in 0..n {
        let row = &sim[a * n..(a + 1) * n];
        lse[a] = log_sum_exp(
            row.iter()
                .enumerate()
                .filter(|(k, _)| *k != a)
                .map(|(_, v)| *v),
        );
    }
    let mut d_sim = vec![0.0; n * n];
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, j, mu) in sicc_pairs(lambdas) {
        loss += lse[i] - mu * sim[i * n + j];
        d_sim[i * n + j] -= mu * inv_b;
        for k in (0..n).filter(|&k| k != i) {
            d_sim[i * n + k] += (sim[i * n + k] - lse[i]).exp() * inv_b;
        }
    }
    // sim = U Uᵀ / τ  ⇒  dU = (dS + dSᵀ) U / τ
    let mut sym = vec![0.0; n * n];
    for a in 0..n {
        for c in 0..n {
            sym[a * n + c] = (d_sim[a * n + c] + d_sim[c * n + a]) / tau;
        }
    }
    let mut d_unit = vec![0.0; n * p];
    gemm(
        Mat::new(&sym, n, n),
        Mat::new(&unit, n, p),
        &mut d_unit,
        0.0,
    );
    // unit = x/‖x‖  ⇒  dx = (dU − u (u·dU)) / ‖x‖
    let mut d_set = Tensor::zeros(&[n, p]);
    for a in 0..n {
        let u = &unit[a * p..(a + 1) * p];
        let du = &d_unit[a * p..(a + 1) * p];
        let proj: f64 = u.iter().zip(du).map(|(x, y)| x * y).sum();
        let out = &mut d_set.data_mut()[a * p..(a + 1) * p];
        for k in 0..p {
            out[k] = (du[k] - u[k] * proj) / norms[a];
        }
    }
    Ok((loss * inv_b, d_set))
}

#[derive(Clone, Debug)]
pub struct SiccGrads {
    pub proj_left: Tensor,
    pub proj_strong: Tensor,
    pub proj_weak: Tensor,
    pub proj_right: Tensor,
}

pub fn sicc_loss(views: &ContrastBatchViews, tau: f64) -> Result<f64> {
    sicc_loss_with_grad(
        &views.proj_left,
        &views.proj_strong,
        &views.proj_weak,
        &views.proj_right,
        &views.lambdas,
        tau,
    )
    .map(|(v, _)| v)
}

/// `L_SICC = ½(L_SICC(𝔅^s) + L_SICC(𝔅^w))` with gradients.
pub fn sicc_loss_with_grad(
    proj_left: &Tensor,
    proj_strong: &Tensor,
    proj_weak: &Tensor,
    proj_right: &Tensor,
    lambdas: &[f64],
    tau: f64,
) -> Result<(f64, SiccGrads)> {
    let b = lambdas.len();
    if b == 0 {
        return Err(XitError::invalid("sicc_loss needs B >= 1"));
    }
    if tau <= 0.0 {
        return Err(XitError::invalid(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let p = proj_left.cols();
    for (name, t) in [
        ("proj_left", proj_left),
        ("proj_strong", proj_strong),
        ("proj_weak", proj_weak),
        ("proj_right", proj_right),
    ] {
        if t.shape() != [b, p] {
            return Err(XitError::Shape {
                op: "sicc_loss",
                expected: format!("{name} [{b}, {p}]"),
                found: format!("{:?}", t.shape()),
            });
        }
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(XitError::invalid(format!("lambda {l} outside [0, 1]")));
    }
    let arrange = |aug: &Tensor| -> Tensor {
        let mut d = Vec::with_capacity(3 * b * p);
        d.extend_from_slice(proj_left.data());
        d.extend_from_slice(aug.data());
        d.extend_from_slice(proj_right.data());
        Tensor::from_vec(&[3 * b, p], d).expect("arranged set shape")
    };
    let (ls, gs) = sicc_set(&arrange(proj_strong), lambdas, tau)?;
    let (lw, gw) = sicc_set(&arrange(proj_weak), lambdas, tau)?;
    let block = |g: &Tensor, k: usize| g.data()[k * b * p..(k + 1) * b * p].to_vec();
    let half = |mut v: Vec<f64>| {
        v.iter_mut().for_each(|x| *x *= 0.5);
        Tensor::from_vec(&[b, p], v).expect("grad shape")
    };
    let sum_blocks = |k: usize| {
        block(&gs, k)
            .into_iter()
            .zip(block(&gw, k))
            .map(|(a, c)| a + c)
            .collect::<Vec<_>>()
    };
    let grads = SiccGrads {
        proj_left: half(sum_blocks(0)),
        proj_strong: half(block(&gs, 1)),
        proj_weak: half(block(&gw, 1)),
        proj_right: half(sum_blocks(2)),
    };
    Ok((0.5 * (ls + lw), grads))
}

/// `β·L_TC + (1−β)·L_SICC`.
pub fn total_loss(l_tc: f64, l_sicc: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(XitError::invalid(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    if !l_tc.is_finite() || !l_sicc.is_finite() {
        return Err(XitError::NonFinite("total_loss inputs".into()));
    }
    Ok(beta * l_tc + (1.0 - beta) * l_sicc)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(XitError::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits.iter().copied()) - logits[label])
}

/// Mean cross-entropy over rows of `logits` `[N, K]` and its gradient.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    if n == 0 || labels.len() != n {
        return Err(XitError::Shape {
            op: "cross_entropy",
            expected: format!("{n} labels"),
            found: format!("{} labels", labels.len()),
        });
    }
    let k = logits.cols();
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        total += cross_entropy(row, y)?;
        let lse = log_sum_exp(row.iter().copied());
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for c in 0..k {
            g[c] = ((row[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    if !total.is_finite() {
        return Err(XitError::NonFinite("cross_entropy".into()));
    }
    Ok((total / n as f64, grad))
}
