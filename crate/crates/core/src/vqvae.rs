//! Tokenizer training: encoder, quantizer and a regressor that reconstructs
//! the raw signal from the quantized patch embeddings.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Activation, Graph, Var};
use crate::config::TrainConfig;
use crate::encoder::{add_temporal, stack, Encoder, EncoderConfig};
use crate::error::{bail, Result};
use crate::kernels::conv_transpose_out_len;
use crate::layers::{apply_batch_stats, ConvTranspose1d, Ctx, Linear, Transformer, TransformerConfig, BN_MOMENTUM};
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::quantizer::{CodexUsage, QuantizedForward, Quantizer, QuantizerConfig};
use crate::real::Real;
use crate::rng::{self, DuinRng};
use crate::signal::PretrainSet;
use crate::tensor::Tensor;
use crate::Mode;

/// Utilization below which codex collapse is flagged.
pub const COLLAPSE_UTILIZATION: f64 = 0.05;

/// One transposed-convolution layer of the time-regression head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RegressorConfig {
    pub transformer: TransformerConfig,
    pub head: Vec<TConvSpec>,
    /// Add the temporal embedding before the decoder transformer.
    pub add_temporal: bool,
}

impl RegressorConfig {
    /// Output length of the head for `n` input patches.
    pub fn head_len(&self, n: usize) -> Result<usize> {
        let mut l = n;
        for (i, h) in self.head.iter().enumerate() {
            match conv_transpose_out_len(l, h.kernel, h.stride, h.pad, h.out_pad) {
                Some(next) if h.out_pad < h.stride => l = next,
                _ => bail!(InvalidArgument, "regressor head layer {}: invalid geometry for length {}", i, l),
            }
        }
        Ok(l)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct VqvaeConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub regressor: RegressorConfig,
}

impl VqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        let d = self.encoder.transformer.d_model;
        if self.regressor.transformer.d_model != d {
            bail!(InvalidArgument, "regressor d_model {} differs from encoder d_model {}", self.regressor.transformer.d_model, d);
        }
        self.regressor.transformer.validate("regressor")?;
        if self.regressor.head.is_empty() {
            bail!(InvalidArgument, "regressor head needs at least one layer");
        }
        // Lengths are affine in N, so two points fix the law.
        let w = self.encoder.patch_len;
        for n in [1, 2] {
            let l = self.regressor.head_len(n)?;
            if l != w * n {
                bail!(InvalidArgument, "regressor head maps {} patches to {} samples, expected {}", n, l, w * n);
            }
        }
        Ok(())
    }
}

pub struct Vqvae {
    pub cfg: VqvaeConfig,
    pub encoder: Encoder,
    pub quantizer: Quantizer,
    pub decoder: Transformer,
    pub head: Vec<ConvTranspose1d>,
    pub out: Linear,
}

/// Forward pass of the tokenizer.
pub struct VqvaeForward<T> {
    pub encoded: Var,
    pub quant: QuantizedForward<T>,
    pub reconstruction: Var,
}

/// Loss nodes and reported values of one batch.
#[derive(Clone, Copy, Debug)]
pub struct VqvaeLoss {
    /// `recon + commit`; the node that is differentiated.
    pub total: Var,
    pub recon: Var,
    pub commit: Var,
    pub codebook: f64,
}

impl Vqvae {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &VqvaeConfig, rng: &mut DuinRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.transformer.d_model;
        let encoder = Encoder::new(store, "encoder", &cfg.encoder, rng)?;
        let quantizer = Quantizer::new(store, "quantizer", d, &cfg.quantizer, rng)?;
        let decoder = Transformer::new(store, "regressor.transformer", &cfg.regressor.transformer, rng)?;
        let mut c_in = d;
        let mut head = Vec::with_capacity(cfg.regressor.head.len());
        for (i, h) in cfg.regressor.head.iter().enumerate() {
            let name = format!("regressor.head.{i}");
            head.push(ConvTranspose1d::new(store, &name, c_in, h.out_channels, h.kernel, h.stride, h.pad, h.out_pad, rng)?);
            c_in = h.out_channels;
        }
        let out = Linear::new(store, "regressor.out", c_in, cfg.encoder.n_channels, true, rng);
        Ok(Self { cfg: cfg.clone(), encoder, quantizer, decoder, head, out })
    }

    /// `emb[B, N, d] → [B, C, W·N]`.
    pub fn regress<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, emb: Var) -> Result<Var> {
        let mut h = emb;
        if self.cfg.regressor.add_temporal {
            h = add_temporal(g, h, self.cfg.encoder.t_max)?;
        }
        h = self.decoder.forward(g, cx, h)?;
        h = g.permute(h, &[0, 2, 1])?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(g, cx, h)?;
            if i < last {
                h = g.activation(h, Activation::Gelu);
            }
        }
        let h = g.permute(h, &[0, 2, 1])?;
        let y = self.out.forward(g, cx, h)?;
        g.permute(y, &[0, 2, 1])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: &Tensor<T>) -> Result<VqvaeForward<T>> {
        let encoded = self.encoder.forward(g, cx, x)?;
        let quant = self.quantizer.forward(g, cx, encoded)?;
        let reconstruction = self.regress(g, cx, quant.embedding)?;
        Ok(VqvaeForward { encoded, quant, reconstruction })
    }

    /// Element-mean reconstruction error plus the commitment term.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, fwd: &VqvaeForward<T>, x: &Tensor<T>) -> Result<VqvaeLoss> {
        let target = truncate_to(x, g.shape(fwd.reconstruction)[2])?;
        let recon = g.mse(fwd.reconstruction, &target)?;
        let total = g.add(recon, fwd.quant.terms.commit)?;
        Ok(VqvaeLoss { total, recon, commit: fwd.quant.terms.commit, codebook: fwd.quant.terms.codebook })
    }

    /// Codex indices of every patch, computed in inference mode.
    pub fn token_indices<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
        let mut r = rng::seeded(0);
        let mut cx = Ctx::new(store, Mode::Infer, &mut r);
        let mut g = Graph::new();
        let e = self.encoder.forward(&mut g, &mut cx, x)?;
        let z = self.quantizer.to_codex_space(&mut g, &cx, e)?;
        Ok(self.quantizer.quantize(store, g.value(z))?.indices)
    }
}

/// Keeps the first `len` steps of `x[B, C, T]`.
pub fn truncate_to<T: Real>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let [b, c, t] = x.shape() else { bail!(Shape, "expected [B, C, T], got {:?}", x.shape()) };
    if len > *t {
        bail!(Shape, "cannot take {} steps from {}", len, t);
    }
    if len == *t {
        return Ok(x.clone());
    }
    let data = x.data().chunks(*t).flat_map(|row| row[..len].iter().copied()).collect();
    Tensor::new(&[*b, *c, len], data)
}

/// Reported values of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqvaeStepStats {
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub reseeded: usize,
}

/// Forward, backward, AdamW step, batch-norm and EMA codex updates on one batch.
#[allow(clippy::too_many_arguments)]
pub fn vqvae_step<T: Real>(
    model: &Vqvae,
    store: &mut ParamStore<T>,
    opt: &mut AdamWState<T>,
    usage: &mut CodexUsage,
    x: &Tensor<T>,
    lr: f64,
    reseed_threshold: u64,
    rng: &mut DuinRng,
) -> Result<VqvaeStepStats> {
    let mut g = Graph::new();
    let (loss, updates, indices, z_c) = {
        let mut cx = Ctx::new(store, Mode::Train, rng);
        let fwd = model.forward(&mut g, &mut cx, x)?;
        let loss = model.loss(&mut g, &fwd, x)?;
        let updates = cx.take_batch_stats();
        (loss, updates, fwd.quant.result.indices, fwd.quant.z_c)
    };
    let stats = VqvaeStepStats {
        loss: g.value(loss.total).item().as_f64() + loss.codebook,
        recon: g.value(loss.recon).item().as_f64(),
        codebook: loss.codebook,
        commit: g.value(loss.commit).item().as_f64(),
        reseeded: 0,
    };
    if !stats.loss.is_finite() {
        bail!(NonFinite, "tokenizer loss (recon {}, commit {}, codebook {})", stats.recon, stats.commit, stats.codebook);
    }
    g.backward(loss.total, store)?;
    opt.step(store, lr);
    apply_batch_stats(store, updates, BN_MOMENTUM);
    let z_c = g.value(z_c).data();
    model.quantizer.ema_update(store, &indices, z_c);
    usage.record(&indices);
    let reseeded = model.quantizer.reseed_dead_codes(store, usage, reseed_threshold, z_c, rng);
    Ok(VqvaeStepStats { reseeded, ..stats })
}

/// Per-epoch means of the step statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VqvaeEpoch {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub utilization: f64,
    pub reseeded: usize,
    /// Utilization fell below [`COLLAPSE_UTILIZATION`].
    pub collapsed: bool,
}

/// Trains the tokenizer on randomly offset windows of the pretraining segments.
///
/// `on_epoch` runs after every epoch with the epoch summary and current parameters.
pub fn train_vqvae<T: Real>(
    model: &Vqvae,
    store: &mut ParamStore<T>,
    data: &PretrainSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&VqvaeEpoch, &ParamStore<T>) -> Result<()>,
) -> Result<Vec<VqvaeEpoch>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut opt = AdamWState::new(store, cfg.adamw());
    let mut usage = CodexUsage::new(model.cfg.quantizer.n_codex);
    let mut rng = rng::stream(cfg.seed, "vqvae/train");
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let reseed_threshold = model.cfg.quantizer.reseed_after_epochs as u64 * steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch)?;
        usage.start_epoch();
        let samples = data.draw_epoch(&mut rng)?;
        let mut sum = VqvaeStepStats::default();
        let mut steps = 0;
        for batch in samples.chunks(cfg.batch_size) {
            let refs: Vec<_> = batch.iter().map(|s| &s.data).collect();
            let x = stack::<T>(&refs)?;
            let s = vqvae_step(model, store, &mut opt, &mut usage, &x, lr, reseed_threshold, &mut rng)?;
            sum.loss += s.loss;
            sum.recon += s.recon;
            sum.codebook += s.codebook;
            sum.commit += s.commit;
            sum.reseeded += s.reseeded;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let utilization = usage.utilization();
        let summary = VqvaeEpoch {
            epoch: epoch + 1,
            lr,
            loss: sum.loss / n,
            recon: sum.recon / n,
            codebook: sum.codebook / n,
            commit: sum.commit / n,
            utilization,
            reseeded: sum.reseeded,
            collapsed: utilization < COLLAPSE_UTILIZATION,
        };
        on_epoch(&summary, store)?;
        history.push(summary);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;

    #[test]
    fn full_head_geometry() {
        let cfg = config::full_vqvae(10);
        cfg.validate().unwrap();
        assert_eq!(cfg.regressor.head_len(40).unwrap(), 4000);
        assert_eq!(cfg.regressor.head_len(1).unwrap(), 100);
        let mut l = 40;
        let mut chain = alloc::vec![l];
        for h in &cfg.regressor.head {
            l = conv_transpose_out_len(l, h.kernel, h.stride, h.pad, h.out_pad).unwrap();
            chain.push(l);
        }
        assert_eq!(chain, alloc::vec![40, 40, 40, 400, 400, 4000]);
    }

    #[test]
    fn reconstruction_matches_input_shape() {
        let cfg = config::tiny_vqvae(3);
        let mut store = ParamStore::<f64>::new();
        let model = Vqvae::new(&mut store, &cfg, &mut rng::seeded(0)).unwrap();
        let x: Tensor<f64> = crate::params::normal(&[2, 3, 45], 1.0, &mut rng::seeded(1));
        let mut r = rng::seeded(2);
        let mut cx = Ctx::new(&store, Mode::Train, &mut r);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &mut cx, &x).unwrap();
        assert_eq!(g.shape(fwd.reconstruction), &[2, 3, 40]);
        let loss = model.loss(&mut g, &fwd, &x).unwrap();
        assert!(g.value(loss.total).item() >= 0.0);
    }

    #[test]
    fn one_step_reduces_loss_on_repeated_batch() {
        let cfg = config::tiny_vqvae(3);
        let mut store = ParamStore::<f32>::new();
        let model = Vqvae::new(&mut store, &cfg, &mut rng::seeded(0)).unwrap();
        let x: Tensor<f32> = crate::params::normal(&[4, 3, 40], 1.0, &mut rng::seeded(1));
        let eval = |store: &ParamStore<f32>| {
            let mut r = rng::seeded(2);
            let mut cx = Ctx::new(store, Mode::Train, &mut r);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &mut cx, &x).unwrap();
            let l = model.loss(&mut g, &fwd, &x).unwrap();
            g.value(l.total).item()
        };
        let before = eval(&store);
        let mut opt = AdamWState::new(&store, crate::optim::AdamWConfig::default());
        let mut usage = CodexUsage::new(cfg.quantizer.n_codex);
        vqvae_step(&model, &mut store, &mut opt, &mut usage, &x, 1e-3, 0, &mut rng::seeded(3)).unwrap();
        assert!(eval(&store) < before);
    }
}
