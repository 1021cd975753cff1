//! Learnable components: residual 1D-conv encoder, set-transformer
//! summarizer, projector head, bilinear forecasting matrix and the linear
//! probe classifier.
//!
//! Shape arithmetic: every conv block keeps the temporal length (same
//! padding) and ends with a max-pool of kernel = stride = `pool_stride`, so
//! for three blocks `K = ⌊⌊⌊T/s⌋/s⌋/s⌋`. With `T = 600, s = 2` that is
//! `600 → 300 → 150 → 75`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Gradients, Graph, Var};
use crate::error::{Result, XitError};
use crate::tensor::{round_f32, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the three residual blocks; the last one is the
    /// embedding width Z.
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![32, 64, 64],
            kernel_sizes: vec![8, 5, 3],
            pool_stride: 2,
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Number of embedding vectors produced for an input of length `t`.
    pub fn num_positions(&self, t: usize) -> usize {
        let s = self.pool_stride.max(1);
        self.channels.iter().fold(t, |l, _| l / s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerConfig {
    /// Token / context width C.
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        SummarizerConfig {
            token_dim: 64,
            heads: 4,
            layers: 4,
            ffn_hidden: 64,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub summarizer: SummarizerConfig,
}

impl ModelConfig {
    pub fn validate(&self, in_length: usize) -> Result<()> {
        let bad = |key: &str, message: String| XitError::Config {
            key: format!("model.{key}"),
            message,
        };
        let e = &self.encoder;
        if e.channels.len() != 3 || e.channels.contains(&0) {
            return Err(bad(
                "encoder.channels",
                "expected three positive widths".into(),
            ));
        }
        if e.kernel_sizes.len() != 3 || e.kernel_sizes.contains(&0) {
            return Err(bad(
                "encoder.kernel_sizes",
                "expected three positive sizes".into(),
            ));
        }
        if e.pool_stride < 1 {
            return Err(bad("encoder.pool_stride", "must be >= 1".into()));
        }
        let k = e.num_positions(in_length);
        if k < 2 {
            return Err(bad(
                "encoder",
                format!("input length {in_length} yields K = {k} positions; need K >= 2"),
            ));
        }
        let s = &self.summarizer;
        if s.token_dim == 0 || !s.token_dim.is_multiple_of(4) {
            return Err(bad(
                "summarizer.token_dim",
                "must be a positive multiple of 4".into(),
            ));
        }
        if s.heads == 0 || !s.token_dim.is_multiple_of(s.heads) {
            return Err(bad("summarizer.heads", "must divide token_dim".into()));
        }
        if s.ffn_hidden == 0 {
            return Err(bad("summarizer.ffn_hidden", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&s.dropout) {
            return Err(bad("summarizer.dropout", "must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Named tensors; buffers (batch-norm running statistics) are not trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Overwrites tensor `name`, checking its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| XitError::Checkpoint(format!("unknown tensor `{name}`")))?;
        let e = &mut self.entries[i];
        if e.tensor.shape() != tensor.shape() {
            return Err(XitError::Shape {
                op: "ParamStore::set",
                expected: format!("{name} {:?}", e.tensor.shape()),
                found: format!("{:?}", tensor.shape()),
            });
        }
        e.tensor = tensor;
        Ok(())
    }

    /// Puts every tensor on the graph: trainable entries as differentiable
    /// leaves when `trainable` is set, everything else as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| graph.leaf(e.tensor.clone(), trainable && e.trainable))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for buffers.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn collect(store: &ParamStore, vars: &[Var], mut grads: Gradients) -> Self {
        let grads = store
            .entries()
            .iter()
            .zip(vars)
            .map(|(e, v)| {
                e.trainable.then(|| {
                    grads
                        .take(*v)
                        .unwrap_or_else(|| Tensor::zeros(e.tensor.shape()))
                })
            })
            .collect();
        ParamGrads { grads }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }
}

/// Exact reverse-mode gradient of a scalar objective built on the graph from
/// the bound parameters.
pub fn gradients<F>(store: &ParamStore, objective: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = store.bind(&mut graph, true);
    let root = objective(&mut graph, &vars)?;
    let value = graph.value(root).data()[0];
    let grads = graph.backward(root)?;
    Ok((value, ParamGrads::collect(store, &vars, grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean_idx: usize,
    var_idx: usize,
    stats: BatchStats,
}

/// State threaded through one forward evaluation.
pub struct Forward<'g, 'r> {
    pub graph: &'g mut Graph,
    pub vars: Vec<Var>,
    pub mode: Mode,
    dropout_rng: Option<&'r mut dyn RngCore>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'g, 'r> Forward<'g, 'r> {
    /// Binds `store` onto `graph`. Dropout is active only in train mode with
    /// an RNG supplied.
    pub fn new(
        graph: &'g mut Graph,
        store: &ParamStore,
        mode: Mode,
        trainable: bool,
        dropout_rng: Option<&'r mut dyn RngCore>,
    ) -> Self {
        let vars = store.bind(graph, trainable);
        Forward {
            graph,
            vars,
            mode,
            dropout_rng,
            bn_updates: Vec::new(),
        }
    }

    fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match (&mut self.dropout_rng, self.mode) {
            (Some(rng), Mode::Train) if p > 0.0 => self.graph.dropout(x, p, &mut **rng),
            _ => Ok(x),
        }
    }

    fn batch_norm(&mut self, store: &ParamStore, x: Var, bn: &NormIdx) -> Result<Var> {
        let (g, b) = (self.var(bn.gamma), self.var(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, g, b, NORM_EPS)?;
                self.bn_updates.push(BnUpdate {
                    mean_idx: bn.mean,
                    var_idx: bn.var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => self.graph.channel_affine(
                x,
                g,
                b,
                store.tensor(bn.mean).data(),
                store.tensor(bn.var).data(),
                NORM_EPS,
            ),
        }
    }
}

#[derive(Clone, Debug)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: usize,
    bn: NormIdx,
    shortcut: Option<usize>,
}

#[derive(Clone, Debug)]
struct TransformerLayer {
    ln1: (usize, usize),
    qkv: usize,
    out: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<ConvBlock>,
    token: (usize, usize),
    summary_token: usize,
    layers: Vec<TransformerLayer>,
    proj1: (usize, usize),
    proj_bn: NormIdx,
    proj2: (usize, usize),
    bilinear: usize,
}

/// Which parameter group a tensor name belongs to.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| round_f32(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| round_f32(StandardNormal.sample(&mut *self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }
}

/// Encoder F, summarizer S, projector h and bilinear W with their parameters.
#[derive(Clone, Debug)]
pub struct XitModel {
    config: ModelConfig,
    in_length: usize,
    params: ParamStore,
    layout: Layout,
}

impl XitModel {
    /// Fresh model with fan-in-scaled uniform weights, unit/zero norm affine
    /// parameters and identity running statistics.
    pub fn new(config: &ModelConfig, in_length: usize, seed: u64) -> Result<Self> {
        config.validate(in_length)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::default();
        let norm = |p: &mut ParamStore, prefix: &str, c: usize| NormIdx {
            gamma: p.add(format!("{prefix}.weight"), Tensor::filled(&[c], 1.0), true),
            beta: p.add(format!("{prefix}.bias"), Tensor::zeros(&[c]), true),
            mean: p.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false),
            var: p.add(
                format!("{prefix}.running_var"),
                Tensor::filled(&[c], 1.0),
                false,
            ),
        };

        let enc = &config.encoder;
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (b, (&cout, &k)) in enc.channels.iter().zip(&enc.kernel_sizes).enumerate() {
            let conv = p.add(
                format!("encoder.block{b}.conv.weight"),
                init.uniform(&[cout, cin, k], cin * k),
                true,
            );
            let bn = norm(&mut p, &format!("encoder.block{b}.bn"), cout);
            let shortcut = (cin != cout).then(|| {
                p.add(
                    format!("encoder.block{b}.shortcut.weight"),
                    init.uniform(&[cout, cin, 1], cin),
                    true,
                )
            });
            blocks.push(ConvBlock { conv, bn, shortcut });
            cin = cout;
        }

        let z = enc.embed_dim();
        let s = &config.summarizer;
        let c = s.token_dim;
        let linear = |p: &mut ParamStore, init: &mut Init, name: &str, out: usize, inp: usize| {
            (
                p.add(
                    format!("{name}.weight"),
                    init.uniform(&[out, inp], inp),
                    true,
                ),
                p.add(format!("{name}.bias"), init.uniform(&[out], inp), true),
            )
        };
        let token = linear(&mut p, &mut init, "summarizer.token", c, z);
        let summary_token = p.add("summarizer.summary_token".into(), init.normal(&[c]), true);
        let mut layers = Vec::new();
        for l in 0..s.layers {
            let pre = format!("summarizer.layer{l}");
            let ln1 = (
                p.add(format!("{pre}.ln1.weight"), Tensor::filled(&[c], 1.0), true),
                p.add(format!("{pre}.ln1.bias"), Tensor::zeros(&[c]), true),
            );
            let qkv = p.add(
                format!("{pre}.attn.qkv.weight"),
                init.uniform(&[3 * c, c], c),
                true,
            );
            let out = linear(&mut p, &mut init, &format!("{pre}.attn.out"), c, c);
            let ln2 = (
                p.add(format!("{pre}.ln2.weight"), Tensor::filled(&[c], 1.0), true),
                p.add(format!("{pre}.ln2.bias"), Tensor::zeros(&[c]), true),
            );
            let ff1 = linear(&mut p, &mut init, &format!("{pre}.ff1"), s.ffn_hidden, c);
            let ff2 = linear(&mut p, &mut init, &format!("{pre}.ff2"), c, s.ffn_hidden);
            layers.push(TransformerLayer {
                ln1,
                qkv,
                out,
                ln2,
                ff1,
                ff2,
            });
        }
        let proj1 = linear(&mut p, &mut init, "projector.fc1", c / 2, c);
        let proj_bn = norm(&mut p, "projector.bn", c / 2);
        let proj2 = linear(&mut p, &mut init, "projector.fc2", c / 4, c / 2);
        let bilinear = p.add("tc.bilinear".into(), init.uniform(&[c, z], z), true);

        Ok(XitModel {
            config: config.clone(),
            in_length,
            params: p,
            layout: Layout {
                blocks,
                token,
                summary_token,
                layers,
                proj1,
                proj_bn,
                proj2,
                bilinear,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn in_length(&self) -> usize {
        self.in_length
    }

    /// K, the number of embedding vectors per series.
    pub fn num_positions(&self) -> usize {
        self.config.encoder.num_positions(self.in_length)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim()
    }

    pub fn context_dim(&self) -> usize {
        self.config.summarizer.token_dim
    }

    /// Width of the flattened encoder output used by the classifier.
    pub fn feature_dim(&self) -> usize {
        self.num_positions() * self.embed_dim()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bilinear_index(&self) -> usize {
        self.layout.bilinear
    }

    /// Folds recorded batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.count as f64;
            let correction = if u.stats.count > 1 {
                n / (n - 1.0)
            } else {
                1.0
            };
            let mean = self.params.tensor_mut(u.mean_idx).data_mut();
            for (m, b) in mean.iter_mut().zip(&u.stats.mean) {
                *m = round_f32((1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b);
            }
            let var = self.params.tensor_mut(u.var_idx).data_mut();
            for (v, b) in var.iter_mut().zip(&u.stats.var) {
                *v = round_f32((1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * correction);
            }
        }
    }

    fn check_input(&self, f: &Forward<'_, '_>, x: Var) -> Result<usize> {
        let shape = f.graph.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_length {
            return Err(XitError::Shape {
                op: "encode",
                expected: format!("[N, {}]", self.in_length),
                found: format!("{shape:?}"),
            });
        }
        Ok(shape[0])
    }

    /// `x [N, T] → z [N, K, Z]`.
    pub fn encode(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let n = self.check_input(f, x)?;
        let mut h = f.graph.reshape(x, &[n, 1, self.in_length])?;
        for block in &self.layout.blocks {
            let main = f.graph.conv1d(h, f.var(block.conv))?;
            let main = f.batch_norm(&self.params, main, &block.bn)?;
            let main = f.graph.relu(main)?;
            let skip = match block.shortcut {
                Some(w) => f.graph.conv1d(h, f.var(w))?,
                None => h,
            };
            let sum = f.graph.add(main, skip)?;
            h = f.graph.max_pool(sum, self.config.encoder.pool_stride)?;
        }
        f.graph.channels_to_tokens(h)
    }

    /// First `K − 1` embeddings `[N, K−1, Z]`.
    pub fn prefix(&self, f: &mut Forward<'_, '_>, z: Var) -> Result<Var> {
        let k = f.graph.value(z).shape()[1];
        f.graph.slice_tokens(z, 0, k - 1)
    }

    /// Last embedding `[N, Z]`.
    pub fn last(&self, f: &mut Forward<'_, '_>, z: Var) -> Result<Var> {
        let shape = f.graph.value(z).shape().to_vec();
        let s = f.graph.slice_tokens(z, shape[1] - 1, shape[1])?;
        f.graph.reshape(s, &[shape[0], shape[2]])
    }

    /// `z_prefix [N, M, Z] → c [N, C]`, read out at a prepended summary token.
    pub fn summarize(&self, f: &mut Forward<'_, '_>, z_prefix: Var) -> Result<Var> {
        let shape = f.graph.value(z_prefix).shape().to_vec();
        let [n, m, z] = shape[..] else {
            return Err(XitError::Shape {
                op: "summarize",
                expected: "[N, K-1, Z]".into(),
                found: format!("{shape:?}"),
            });
        };
        if m == 0 {
            return Err(XitError::invalid("summarize needs at least one embedding"));
        }
        if z != self.embed_dim() {
            return Err(XitError::Shape {
                op: "summarize",
                expected: format!("Z = {}", self.embed_dim()),
                found: format!("{z}"),
            });
        }
        let cfg = &self.config.summarizer;
        let c = cfg.token_dim;
        let flat = f.graph.reshape(z_prefix, &[n * m, z])?;
        let tok = f.graph.linear(
            flat,
            f.var(self.layout.token.0),
            Some(f.var(self.layout.token.1)),
        )?;
        let tok = f.graph.reshape(tok, &[n, m, c])?;
        let tok = f
            .graph
            .prepend_token(tok, f.var(self.layout.summary_token))?;
        let t = m + 1;
        let mut x = f.graph.reshape(tok, &[n * t, c])?;
        for layer in &self.layout.layers {
            let h = f
                .graph
                .layer_norm(x, f.var(layer.ln1.0), f.var(layer.ln1.1), NORM_EPS)?;
            let qkv = f.graph.linear(h, f.var(layer.qkv), None)?;
            let a = f.graph.attention(qkv, n, t, cfg.heads)?;
            let a = f
                .graph
                .linear(a, f.var(layer.out.0), Some(f.var(layer.out.1)))?;
            let a = f.dropout(a, cfg.dropout)?;
            x = f.graph.add(x, a)?;
            let h = f
                .graph
                .layer_norm(x, f.var(layer.ln2.0), f.var(layer.ln2.1), NORM_EPS)?;
            let h = f
                .graph
                .linear(h, f.var(layer.ff1.0), Some(f.var(layer.ff1.1)))?;
            let h = f.graph.relu(h)?;
            let h = f.dropout(h, cfg.dropout)?;
            let h = f
                .graph
                .linear(h, f.var(layer.ff2.0), Some(f.var(layer.ff2.1)))?;
            let h = f.dropout(h, cfg.dropout)?;
            x = f.graph.add(x, h)?;
        }
        let x = f.graph.reshape(x, &[n, t, c])?;
        let head = f.graph.slice_tokens(x, 0, 1)?;
        f.graph.reshape(head, &[n, c])
    }

    /// `c [N, C] → κ [N, C/4]` via Linear → BatchNorm → ReLU → Linear.
    pub fn project(&self, f: &mut Forward<'_, '_>, c: Var) -> Result<Var> {
        let shape = f.graph.value(c).shape();
        if shape.len() != 2 || shape[1] != self.context_dim() {
            return Err(XitError::Shape {
                op: "project",
                expected: format!("[N, {}]", self.context_dim()),
                found: format!("{shape:?}"),
            });
        }
        let l = &self.layout;
        let h = f
            .graph
            .linear(c, f.var(l.proj1.0), Some(f.var(l.proj1.1)))?;
        let h = f.batch_norm(&self.params, h, &l.proj_bn)?;
        let h = f.graph.relu(h)?;
        f.graph.linear(h, f.var(l.proj2.0), Some(f.var(l.proj2.1)))
    }

    pub fn bilinear(&self, f: &Forward<'_, '_>) -> Var {
        f.var(self.layout.bilinear)
    }

    fn input_var(&self, graph: &mut Graph, series: &[Vec<f64>]) -> Result<Var> {
        let t = Tensor::from_rows(series)?;
        if t.cols() != self.in_length {
            return Err(XitError::Shape {
                op: "encode",
                expected: format!("series of length {}", self.in_length),
                found: format!("length {}", t.cols()),
            });
        }
        Ok(graph.constant(t))
    }

    /// Eval-mode embeddings, one `K × Z` sequence per series.
    pub fn embed(&self, series: &[Vec<f64>]) -> Result<Vec<EmbeddingSequence>> {
        let (k, z) = (self.num_positions(), self.embed_dim());
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(128) {
            let mut graph = Graph::new();
            let x = self.input_var(&mut graph, chunk)?;
            let mut f = Forward::new(&mut graph, &self.params, Mode::Eval, false, None);
            let zv = self.encode(&mut f, x)?;
            let t = f.graph.value(zv);
            for i in 0..chunk.len() {
                let row = t.row(i);
                out.push(EmbeddingSequence {
                    vectors: (0..k).map(|p| row[p * z..(p + 1) * z].to_vec()).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Flattened `K·Z` encoder features (eval mode).
    pub fn features(&self, series: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .embed(series)?
            .into_iter()
            .map(|e| e.flatten())
            .collect())
    }

    /// Eval-mode context of each embedding prefix.
    pub fn contexts(&self, prefixes: &[EmbeddingSequence]) -> Result<Vec<Context>> {
        self.contexts_with(prefixes, Mode::Eval, None)
    }

    /// Contexts with explicit mode; dropout applies in train mode if an RNG
    /// is given.
    pub fn contexts_with(
        &self,
        prefixes: &[EmbeddingSequence],
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<Context>> {
        let m = prefixes.first().map_or(0, |p| p.vectors.len());
        if m == 0 {
            return Err(XitError::invalid("summarize needs at least one embedding"));
        }
        let rows: Vec<Vec<f64>> = prefixes.iter().map(EmbeddingSequence::flatten).collect();
        let t = Tensor::from_rows(&rows)?.reshaped(&[prefixes.len(), m, self.embed_dim()])?;
        let mut graph = Graph::new();
        let zv = graph.constant(t);
        let mut f = Forward::new(&mut graph, &self.params, mode, false, rng);
        let c = self.summarize(&mut f, zv)?;
        Ok(f.graph
            .value(c)
            .to_rows()
            .into_iter()
            .map(Context)
            .collect())
    }

    /// Eval-mode projections.
    pub fn projections(&self, contexts: &[Context]) -> Result<Vec<Projection>> {
        let rows: Vec<Vec<f64>> = contexts.iter().map(|c| c.0.clone()).collect();
        let mut graph = Graph::new();
        let cv = graph.constant(Tensor::from_rows(&rows)?);
        let mut f = Forward::new(&mut graph, &self.params, Mode::Eval, false, None);
        let k = self.project(&mut f, cv)?;
        Ok(f.graph
            .value(k)
            .to_rows()
            .into_iter()
            .map(Projection)
            .collect())
    }

    pub fn bilinear_matrix(&self) -> &Tensor {
        self.params.tensor(self.layout.bilinear)
    }
}

/// `K` embedding vectors of width `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSequence {
    pub fn flatten(&self) -> Vec<f64> {
        self.vectors.concat()
    }

    /// The first `K − 1` vectors.
    pub fn prefix(&self) -> EmbeddingSequence {
        EmbeddingSequence {
            vectors: self.vectors[..self.vectors.len().saturating_sub(1)].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Context(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct Projection(pub Vec<f64>);

/// Single linear layer + softmax on flattened encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    params: ParamStore,
    num_classes: usize,
    input_dim: usize,
}

impl Classifier {
    pub fn new(input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || input_dim == 0 {
            return Err(XitError::invalid(format!(
                "classifier needs >= 2 classes and a positive input width (got {num_classes}, {input_dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::default();
        params.add(
            "classifier.weight".into(),
            init.uniform(&[num_classes, input_dim], input_dim),
            true,
        );
        params.add(
            "classifier.bias".into(),
            init.uniform(&[num_classes], input_dim),
            true,
        );
        Ok(Classifier {
            params,
            num_classes,
            input_dim,
        })
    }

    pub fn zeros(input_dim: usize, num_classes: usize) -> Result<Self> {
        let mut c = Self::new(input_dim, num_classes, 0)?;
        for i in 0..c.params.len() {
            c.params
                .tensor_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        Ok(c)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adds the logits node for `features [N, D]` to a graph.
    pub fn logits_var(&self, graph: &mut Graph, vars: &[Var], features: Var) -> Result<Var> {
        let d = graph.value(features).cols();
        if d != self.input_dim {
            return Err(XitError::Shape {
                op: "classify",
                expected: format!("{} features", self.input_dim),
                found: format!("{d}"),
            });
        }
        graph.linear(features, vars[0], Some(vars[1]))
    }

    pub fn logits(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new();
        let vars = self.params.bind(&mut graph, false);
        let x = graph.constant(Tensor::from_rows(features)?);
        let l = self.logits_var(&mut graph, &vars, x)?;
        Ok(graph.value(l).to_rows())
    }

    /// Class probabilities for flattened features.
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(features)?.iter().map(|l| softmax(l)).collect())
    }

    pub fn classify(&self, z: &EmbeddingSequence) -> Result<Vec<f64>> {
        Ok(self.predict_proba(&[z.flatten()])?.remove(0))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
