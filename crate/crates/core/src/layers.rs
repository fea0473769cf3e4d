//! Parameterized layers. Each layer registers its tensors in a [`ParamStore`]
//! under a dotted name prefix and records its forward pass on a [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Activation, BatchStats, Graph, Var};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::params::{trunc_normal, uniform, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::DuinRng;
use crate::tensor::Tensor;
use crate::Mode;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

struct PendingStats<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// Per-forward context: parameter values, mode, randomness and side outputs.
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: &'a mut DuinRng,
    /// When set, attention probabilities of every block are kept in `attention`.
    pub record_attention: bool,
    pub attention: Vec<Tensor<T>>,
    pending: Vec<PendingStats<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, rng: &'a mut DuinRng) -> Self {
        Self { store, mode, rng, record_attention: false, attention: Vec::new(), pending: Vec::new() }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.store, id)
    }

    pub fn dropout(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        if self.train() {
            g.dropout(x, rate, self.rng)
        } else {
            Ok(x)
        }
    }

    /// Batch statistics gathered by train-mode batch norms, to be folded into
    /// the running buffers with [`apply_batch_stats`] once the step is done.
    pub fn take_batch_stats(&mut self) -> BatchStatUpdates<T> {
        BatchStatUpdates(core::mem::take(&mut self.pending))
    }
}

pub struct BatchStatUpdates<T>(Vec<PendingStats<T>>);

impl<T: Real> BatchStatUpdates<T> {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `running ← (1 − momentum)·running + momentum·batch` for every recorded norm.
pub fn apply_batch_stats<T: Real>(store: &mut ParamStore<T>, updates: BatchStatUpdates<T>, momentum: f64) {
    let (m, keep) = (T::of(momentum), T::of(1.0 - momentum));
    for u in updates.0 {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, &b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

fn add_weight<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize], rng: &mut DuinRng) -> ParamId {
    store.add(name, trunc_normal(shape, INIT_STD, rng), true)
}

/// Conv kernels: `U(±1/√fan_in)` with `fan_in = dim1 · K`, so deep conv stacks keep unit-order gain.
fn add_conv_weight<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize; 3], rng: &mut DuinRng) -> ParamId {
    let fan_in = (shape[1] * shape[2]) as f64;
    store.add(name, uniform(shape, 1.0 / fan_in.sqrt(), rng), true)
}

fn add_const<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize], v: f64, trainable: bool) -> ParamId {
    store.add(name, Tensor::full(shape, T::of(v)), trainable)
}

/// `y = x·W + b` with `W[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut DuinRng) -> Self {
        let weight = add_weight(store, format!("{name}.weight"), &[d_in, d_out], rng);
        let bias = bias.then(|| add_const(store, format!("{name}.bias"), &[d_out], 0.0, true));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(g, self.weight);
        let b = self.bias.map(|b| cx.param(g, b));
        g.linear(x, w, b)
    }
}

/// 1-D convolution over `[B, Cin, L]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut DuinRng,
    ) -> Self {
        let weight = add_conv_weight(store, format!("{name}.weight"), &[c_out, c_in, kernel], rng);
        let bias = add_const(store, format!("{name}.bias"), &[c_out], 0.0, true);
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(g, self.weight), cx.param(g, self.bias));
        g.conv1d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed 1-D convolution over `[B, Cin, L]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut DuinRng,
    ) -> Result<Self> {
        if out_pad >= stride {
            bail!(InvalidArgument, "{}: output padding {} must be smaller than stride {}", name, out_pad, stride);
        }
        let weight = add_conv_weight(store, format!("{name}.weight"), &[c_in, c_out, kernel], rng);
        let bias = add_const(store, format!("{name}.bias"), &[c_out], 0.0, true);
        Ok(Self { weight, bias, stride, pad, out_pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(g, self.weight), cx.param(g, self.bias));
        g.conv_transpose1d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

/// Batch norm over `[B, C, L]` with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gain: add_const(store, format!("{name}.weight"), &[channels], 1.0, true),
            bias: add_const(store, format!("{name}.bias"), &[channels], 0.0, true),
            running_mean: add_const(store, format!("{name}.running_mean"), &[channels], 0.0, false),
            running_var: add_const(store, format!("{name}.running_var"), &[channels], 1.0, false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (cx.param(g, self.gain), cx.param(g, self.bias));
        if cx.train() {
            let (y, stats) = g.batch_norm_train(x, gain, bias, BN_EPS)?;
            cx.pending.push(PendingStats { mean: self.running_mean, var: self.running_var, stats });
            Ok(y)
        } else {
            let rm = cx.store.value(self.running_mean).data();
            let rv = cx.store.value(self.running_var).data();
            g.batch_norm_infer(x, gain, bias, rm, rv, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: add_const(store, format!("{name}.weight"), &[d], 1.0, true),
            bias: add_const(store, format!("{name}.bias"), &[d], 0.0, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (cx.param(g, self.gain), cx.param(g, self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Shape and regularization of a transformer stack.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub attn_dropout: f64,
    /// Dropout after the first and after the second feed-forward layer.
    pub mlp_dropout: [f64; 2],
}

impl TransformerConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            bail!(InvalidArgument, "{}: transformer dimensions must be positive", what);
        }
        for r in [self.attn_dropout, self.mlp_dropout[0], self.mlp_dropout[1]] {
            if !(0.0..1.0).contains(&r) {
                bail!(InvalidArgument, "{}: dropout {} outside [0, 1)", what, r);
            }
        }
        Ok(())
    }
}

/// Pre-norm block: multi-head attention with layer-normed queries and keys,
/// then a GELU feed-forward, each with a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: TransformerConfig,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub q_norm: LayerNorm,
    pub k_norm: LayerNorm,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut DuinRng) -> Self {
        let (d, width) = (cfg.d_model, cfg.n_heads * cfg.head_dim);
        Self {
            cfg: cfg.clone(),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            q: Linear::new(store, &format!("{name}.attn.q"), d, width, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, width, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, width, true, rng),
            q_norm: LayerNorm::new(store, &format!("{name}.attn.q_norm"), cfg.head_dim),
            k_norm: LayerNorm::new(store, &format!("{name}.attn.k_norm"), cfg.head_dim),
            proj: Linear::new(store, &format!("{name}.attn.proj"), width, d, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.ffn_dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.ffn_dim, d, true, rng),
        }
    }

    fn heads<T: Real>(&self, g: &mut Graph<T>, x: Var, b: usize, n: usize) -> Result<Var> {
        let x = g.reshape(x, &[b, n, self.cfg.n_heads, self.cfg.head_dim])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `x[B, N, d] → [B, N, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_model {
            bail!(Shape, "transformer block expects [B, N, {}], got {:?}", self.cfg.d_model, s);
        }
        let (b, n) = (s[0], s[1]);
        let h = self.norm1.forward(g, cx, x)?;
        let q = self.q.forward(g, cx, h)?;
        let q = self.heads(g, q, b, n)?;
        let q = self.q_norm.forward(g, cx, q)?;
        let k = self.k.forward(g, cx, h)?;
        let k = self.heads(g, k, b, n)?;
        let k = self.k_norm.forward(g, cx, k)?;
        let v = self.v.forward(g, cx, h)?;
        let v = self.heads(g, v, b, n)?;

        let logits = g.bmm(q, k, true)?;
        let logits = g.scale(logits, T::of(1.0 / (self.cfg.head_dim as f64).sqrt()));
        let attn = g.softmax(logits);
        if cx.record_attention {
            cx.attention.push(g.value(attn).clone());
        }
        let attn = cx.dropout(g, attn, self.cfg.attn_dropout)?;
        let o = g.bmm(attn, v, false)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, n, self.cfg.n_heads * self.cfg.head_dim])?;
        let o = self.proj.forward(g, cx, o)?;
        let x = g.add(x, o)?;

        let h = self.norm2.forward(g, cx, x)?;
        let f = self.fc1.forward(g, cx, h)?;
        let f = g.activation(f, Activation::Gelu);
        let f = cx.dropout(g, f, self.cfg.mlp_dropout[0])?;
        let f = self.fc2.forward(g, cx, f)?;
        let f = cx.dropout(g, f, self.cfg.mlp_dropout[1])?;
        g.add(x, f)
    }
}

/// A stack of [`TransformerBlock`]s closed by a layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Transformer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut DuinRng) -> Result<Self> {
        cfg.validate(name)?;
        let blocks = (0..cfg.n_layers).map(|i| TransformerBlock::new(store, &format!("{name}.blocks.{i}"), cfg, rng)).collect();
        Ok(Self { blocks, norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model) })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, cx, x)?;
        }
        self.norm.forward(g, cx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::rng;
    use alloc::vec;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig { n_layers: 2, d_model: 8, n_heads: 2, head_dim: 4, ffn_dim: 16, attn_dropout: 0.0, mlp_dropout: [0.0, 0.0] }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        crate::params::normal(shape, 1.0, &mut rng::seeded(seed))
    }

    #[test]
    fn single_position_attention_is_one() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(0);
        let block = TransformerBlock::new(&mut store, "b", &tiny_cfg(), &mut r);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&store, Mode::Infer, &mut r);
        cx.record_attention = true;
        let x = g.constant(random_input(&[3, 1, 8], 1));
        block.forward(&mut g, &mut cx, x).unwrap();
        assert!(cx.attention[0].data().iter().all(|&a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(0);
        let t = Transformer::new(&mut store, "t", &tiny_cfg(), &mut r).unwrap();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&store, Mode::Infer, &mut r);
        cx.record_attention = true;
        let x = g.constant(random_input(&[2, 5, 8], 2));
        let y = t.forward(&mut g, &mut cx, x).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8]);
        assert_eq!(cx.attention.len(), 2);
        for a in &cx.attention {
            for row in a.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(5);
        let block = TransformerBlock::new(&mut store, "b", &tiny_cfg(), &mut r);
        // Non-trivial LN gains so that the Q/K normalization paths are exercised.
        for p in store.iter_mut() {
            if p.name.ends_with("norm.weight") || p.name.ends_with("norm1.weight") || p.name.ends_with("norm2.weight") {
                p.value = crate::params::normal(p.value.shape(), 1.0, &mut rng::seeded(9)).map(|v| 1.0 + 0.3 * v);
            }
            if p.name.ends_with("weight") && p.value.rank() == 2 {
                p.value = p.value.map(|v| v * 15.0);
            }
        }
        let x = random_input(&[2, 3, 8], 3);
        let target = random_input(&[2, 3, 8], 4);
        let report = check_params(
            &mut store,
            |s, g| {
                let mut rr = rng::seeded(0);
                let mut cx = Ctx::new(s, Mode::Train, &mut rr);
                let xv = g.constant(x.clone());
                let y = block.forward(g, &mut cx, xv)?;
                g.mse(y, &target)
            },
            1e-4,
            1e-4,
            512,
            &mut rng::seeded(1),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn batch_norm_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 2);
        let data = Tensor::new(&[2, 2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 6.0, 4.0, 5.0, 6.0, 3.0, 3.0, 0.0]).unwrap();
        let mut r = rng::seeded(0);
        // Zero momentum freezes the buffers.
        for momentum in [0.0, 1.0] {
            let mut s = store.clone();
            let mut g = Graph::new();
            let updates = {
                let mut cx = Ctx::new(&s, Mode::Train, &mut r);
                let x = g.constant(data.clone());
                let y = bn.forward(&mut g, &mut cx, x).unwrap();
                for ch in 0..2 {
                    let vals: Vec<f64> = (0..2).flat_map(|b| g.value(y).data()[(b * 2 + ch) * 3..(b * 2 + ch + 1) * 3].to_vec()).collect();
                    let mean = vals.iter().sum::<f64>() / 6.0;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
                }
                cx.take_batch_stats()
            };
            apply_batch_stats(&mut s, updates, momentum);
            let rm = s.value(bn.running_mean).data().to_vec();
            if momentum == 0.0 {
                assert_eq!(rm, vec![0.0, 0.0]);
            } else {
                assert!((rm[0] - 3.5).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn converged_running_stats_reproduce_train_map() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 3);
        let x = random_input(&[4, 3, 20], 8);
        let mut r = rng::seeded(0);
        let mut train_out = Tensor::zeros(&[1]);
        for _ in 0..300 {
            let mut g = Graph::new();
            let updates = {
                let mut cx = Ctx::new(&store, Mode::Train, &mut r);
                let xv = g.constant(x.clone());
                let y = bn.forward(&mut g, &mut cx, xv).unwrap();
                train_out = g.value(y).clone();
                cx.take_batch_stats()
            };
            apply_batch_stats(&mut store, updates, BN_MOMENTUM);
        }
        let mut g = Graph::new();
        let mut cx = Ctx::new(&store, Mode::Infer, &mut r);
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, &mut cx, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(train_out.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }
}
