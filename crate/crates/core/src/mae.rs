//! Symmetric masked token modeling: predict the frozen tokenizer's codex
//! indices at masked patches, once for a mask and once for its complement.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::encoder::{stack, Encoder, EncoderConfig};
use crate::error::{bail, Result};
use crate::layers::{apply_batch_stats, Ctx, Linear, BN_MOMENTUM, INIT_STD};
use crate::optim::AdamWState;
use crate::params::{normal, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::{self, DuinRng};
use crate::signal::{PretrainSet, Sample};
use crate::tensor::Tensor;
use crate::vqvae::Vqvae;
use crate::Mode;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MaeConfig {
    pub encoder: EncoderConfig,
    /// Vocabulary size; equals the tokenizer's codex size.
    pub n_codex: usize,
    pub mask_ratio: f64,
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_codex == 0 {
            bail!(InvalidArgument, "mae.n_codex must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            bail!(InvalidArgument, "mask_ratio must lie in (0, 1), got {}", self.mask_ratio);
        }
        Ok(())
    }
}

/// `|M| = round(ratio·n)`, rejecting empty or full masks.
pub fn mask_count(n: usize, ratio: f64) -> Result<usize> {
    if n < 2 {
        bail!(InvalidArgument, "masking needs at least 2 patches, got {}", n);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(InvalidArgument, "mask_ratio must lie in (0, 1), got {}", ratio);
    }
    let m = (ratio * n as f64).round() as usize;
    if m == 0 || m == n {
        bail!(InvalidArgument, "mask ratio {} over {} patches masks {} positions", ratio, n, m);
    }
    Ok(m)
}

/// Uniformly random mask of `round(ratio·n)` positions, as per-position flags.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    let m = mask_count(n, ratio)?;
    let mut flags = vec![false; n];
    for i in index::sample(rng, n, m) {
        flags[i] = true;
    }
    Ok(flags)
}

pub fn complement(mask: &[bool]) -> Vec<bool> {
    mask.iter().map(|&m| !m).collect()
}

/// Replaces masked rows of `e[B, N, d]` with the shared token; `masks` holds one flag vector per sample.
pub fn apply_mask<T: Real>(g: &mut Graph<T>, e: Var, token: Var, masks: &[Vec<bool>]) -> Result<Var> {
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    g.mask_replace(e, token, &flat)
}

pub struct Mae {
    pub cfg: MaeConfig,
    pub encoder: Encoder,
    pub mask_token: ParamId,
    pub head: Linear,
}

/// The two halves of the symmetric loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct MaeLoss {
    pub total: Var,
    pub masked: Var,
    pub symmetric: Var,
}

impl Mae {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &MaeConfig, rng: &mut DuinRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.transformer.d_model;
        let encoder = Encoder::new(store, "encoder", &cfg.encoder, rng)?;
        let mask_token = store.add("mae.mask_token", normal(&[d], INIT_STD, rng), true);
        let head = Linear::new(store, "mae.head", d, cfg.n_codex, true, rng);
        Ok(Self { cfg: cfg.clone(), encoder, mask_token, head })
    }

    /// Logits `[2·B·N, K]`: rows of the `masks` pass, then rows of the complement pass.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: &Tensor<T>, masks: &[Vec<bool>]) -> Result<Var> {
        let e = self.encoder.embed_patches(g, cx, x)?;
        let s = g.shape(e).to_vec();
        if masks.len() != s[0] || masks.iter().any(|m| m.len() != s[1]) {
            bail!(Shape, "{} masks for a batch of {:?}", masks.len(), s);
        }
        let token = cx.param(g, self.mask_token);
        let first = apply_mask(g, e, token, masks)?;
        let comp: Vec<Vec<bool>> = masks.iter().map(|m| complement(m)).collect();
        let second = apply_mask(g, e, token, &comp)?;
        let both = g.concat(&[first, second])?;
        let h = self.encoder.contextualize(g, cx, both)?;
        let logits = self.head.forward(g, cx, h)?;
        g.reshape(logits, &[2 * s[0] * s[1], self.cfg.n_codex])
    }
}

/// Cross-entropy over masked positions, averaged within each pass, summed over both passes.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize], masks: &[Vec<bool>]) -> Result<MaeLoss> {
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    let rows = flat.len();
    if targets.len() != rows || g.shape(logits)[0] != 2 * rows {
        bail!(Shape, "{} targets and {} mask flags for logits {:?}", targets.len(), rows, g.shape(logits));
    }
    let n_masked = flat.iter().filter(|&&m| m).count();
    let n_visible = rows - n_masked;
    if n_masked == 0 || n_visible == 0 {
        bail!(InvalidArgument, "each pass needs at least one masked position");
    }
    let both: Vec<usize> = targets.iter().chain(targets).copied().collect();
    let (wm, wv) = (T::one() / T::of(n_masked as f64), T::one() / T::of(n_visible as f64));
    let mut w_first = vec![T::zero(); 2 * rows];
    let mut w_second = vec![T::zero(); 2 * rows];
    for (i, &m) in flat.iter().enumerate() {
        if m {
            w_first[i] = wm;
        } else {
            w_second[rows + i] = wv;
        }
    }
    let masked = g.weighted_cross_entropy(logits, &both, &w_first)?;
    let symmetric = g.weighted_cross_entropy(logits, &both, &w_second)?;
    let total = g.add(masked, symmetric)?;
    Ok(MaeLoss { total, masked, symmetric })
}

/// Correct top-1 predictions and the number of scored positions, over the masked
/// positions of both passes.
pub fn masked_accuracy<T: Real>(logits: &Tensor<T>, targets: &[usize], masks: &[Vec<bool>]) -> (usize, usize) {
    let k = logits.last_dim();
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    let rows = flat.len();
    let mut correct = 0;
    for (r, row) in logits.data().chunks(k).enumerate() {
        let (pos, first_pass) = (r % rows, r < rows);
        if flat[pos] != first_pass {
            continue;
        }
        let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
        correct += usize::from(best == targets[pos]);
    }
    (correct, rows)
}

/// Per-epoch summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaeEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Top-1 accuracy of masked-token prediction.
    pub accuracy: f64,
}

/// One optimization step; returns (loss, correct, scored).
#[allow(clippy::too_many_arguments)]
pub fn mae_step<T: Real>(
    model: &Mae,
    store: &mut ParamStore<T>,
    opt: &mut AdamWState<T>,
    x: &Tensor<T>,
    targets: &[usize],
    masks: &[Vec<bool>],
    lr: f64,
    rng: &mut DuinRng,
) -> Result<(f64, usize, usize)> {
    let mut g = Graph::new();
    let (loss, logits, updates) = {
        let mut cx = Ctx::new(store, Mode::Train, rng);
        let logits = model.forward(&mut g, &mut cx, x, masks)?;
        let loss = mae_loss(&mut g, logits, targets, masks)?;
        (loss, logits, cx.take_batch_stats())
    };
    let value = g.value(loss.total).item().as_f64();
    if !value.is_finite() {
        bail!(NonFinite, "masked modeling loss");
    }
    let (correct, scored) = masked_accuracy(g.value(logits), targets, masks);
    g.backward(loss.total, store)?;
    opt.step(store, lr);
    apply_batch_stats(store, updates, BN_MOMENTUM);
    Ok((value, correct, scored))
}

/// Trains the masked model against indices produced by the frozen tokenizer.
#[allow(clippy::too_many_arguments)]
pub fn train_mae<T: Real>(
    model: &Mae,
    store: &mut ParamStore<T>,
    tokenizer: &Vqvae,
    tokenizer_store: &ParamStore<T>,
    data: &PretrainSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MaeEpoch, &ParamStore<T>) -> Result<()>,
) -> Result<Vec<MaeEpoch>> {
    cfg.validate()?;
    if tokenizer.cfg.quantizer.n_codex != model.cfg.n_codex {
        bail!(InvalidArgument, "tokenizer codex has {} entries, model predicts {}", tokenizer.cfg.quantizer.n_codex, model.cfg.n_codex);
    }
    let schedule = cfg.schedule()?;
    let mut opt = AdamWState::new(store, cfg.adamw());
    let mut rng = rng::stream(cfg.seed, "mae/train");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch)?;
        let samples = data.draw_epoch(&mut rng)?;
        let (mut loss_sum, mut correct, mut scored, mut steps) = (0.0, 0, 0, 0);
        for batch in samples.chunks(cfg.batch_size) {
            let refs: Vec<_> = batch.iter().map(|s| &s.data).collect();
            let x = stack::<T>(&refs)?;
            let n = model.cfg.encoder.n_patches(x.shape()[2])?;
            let targets = tokenizer.token_indices(tokenizer_store, &x)?;
            let masks = (0..batch.len()).map(|_| sample_mask(n, model.cfg.mask_ratio, &mut rng)).collect::<Result<Vec<_>>>()?;
            let (l, c, s) = mae_step(model, store, &mut opt, &x, &targets, &masks, lr, &mut rng)?;
            loss_sum += l;
            correct += c;
            scored += s;
            steps += 1;
        }
        let summary = MaeEpoch {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / steps.max(1) as f64,
            accuracy: correct as f64 / scored.max(1) as f64,
        };
        on_epoch(&summary, store)?;
        history.push(summary);
    }
    Ok(history)
}

/// Inference-mode masked-token accuracy over `samples`, one fresh mask per sample.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_mae<T: Real>(
    model: &Mae,
    store: &ParamStore<T>,
    tokenizer: &Vqvae,
    tokenizer_store: &ParamStore<T>,
    samples: &[Sample],
    batch_size: usize,
    rng: &mut DuinRng,
) -> Result<f64> {
    if samples.is_empty() {
        bail!(InvalidArgument, "cannot evaluate an empty set");
    }
    let (mut correct, mut scored) = (0, 0);
    for batch in samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = batch.iter().map(|s| &s.data).collect();
        let x = stack::<T>(&refs)?;
        let n = model.cfg.encoder.n_patches(x.shape()[2])?;
        let targets = tokenizer.token_indices(tokenizer_store, &x)?;
        let masks = (0..batch.len()).map(|_| sample_mask(n, model.cfg.mask_ratio, rng)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let logits = {
            let mut cx = Ctx::new(store, Mode::Infer, rng);
            model.forward(&mut g, &mut cx, &x, &masks)?
        };
        let (c, s) = masked_accuracy(g.value(logits), &targets, &masks);
        correct += c;
        scored += s;
    }
    Ok(correct as f64 / scored as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_sizes() {
        let mut r = rng::seeded(0);
        let m = sample_mask(30, 0.5, &mut r).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 15);
        let c = complement(&m);
        assert!(m.iter().zip(&c).all(|(a, b)| a != b));
        assert!(sample_mask(30, 0.01, &mut r).is_err());
        assert!(sample_mask(30, 0.99, &mut r).is_err());
        assert!(sample_mask(1, 0.5, &mut r).is_err());
    }

    #[test]
    fn mask_frequency_is_uniform() {
        let mut r = rng::seeded(1);
        let mut counts = [0usize; 30];
        for _ in 0..10_000 {
            for (c, m) in counts.iter_mut().zip(sample_mask(30, 0.5, &mut r).unwrap()) {
                *c += usize::from(m);
            }
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn apply_mask_cases() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(crate::params::normal(&[1, 3, 2], 1.0, &mut rng::seeded(2)));
        let tok = g.constant(Tensor::new(&[2], vec![7.0, 8.0]).unwrap());
        let none = apply_mask(&mut g, e, tok, &[vec![false; 3]]).unwrap();
        assert_eq!(g.value(none), g.value(e));
        let all = apply_mask(&mut g, e, tok, &[vec![true; 3]]).unwrap();
        assert!(g.value(all).data().chunks(2).all(|r| r == [7.0, 8.0]));
        let some = apply_mask(&mut g, e, tok, &[vec![true, false, true]]).unwrap();
        assert_eq!(&g.value(some).data()[2..4], &g.value(e).data()[2..4]);
    }

    #[test]
    fn loss_identities() {
        let (b, n, k) = (2, 4, 2048);
        let masks = vec![vec![true, false, true, false], vec![false, false, true, true]];
        let targets: Vec<usize> = (0..b * n).map(|i| (i * 97) % k).collect();
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[2 * b * n, k]));
        let l = mae_loss(&mut g, uniform, &targets, &masks).unwrap();
        assert!((g.value(l.masked).item() - (2048f64).ln()).abs() < 1e-6);

        let logits = g.constant(crate::params::normal(&[2 * b * n, k], 1.0, &mut rng::seeded(3)));
        let base = mae_loss(&mut g, logits, &targets, &masks).unwrap();
        let mut perturbed = targets.clone();
        perturbed[1] = (perturbed[1] + 5) % k;
        let p = mae_loss(&mut g, logits, &perturbed, &masks).unwrap();
        assert_eq!(g.value(p.masked).item(), g.value(base.masked).item());

        // Swapping M and M̂ (with the pass halves swapped accordingly) swaps the two terms.
        let comp: Vec<Vec<bool>> = masks.iter().map(|m| complement(m)).collect();
        let v = g.value(logits).data();
        let half = b * n * k;
        let swapped: Vec<f64> = v[half..].iter().chain(&v[..half]).copied().collect();
        let sw = g.constant(Tensor::new(&[2 * b * n, k], swapped).unwrap());
        let s = mae_loss(&mut g, sw, &targets, &comp).unwrap();
        assert!((g.value(s.masked).item() - g.value(base.symmetric).item()).abs() < 1e-12);
        assert!((g.value(s.total).item() - g.value(base.total).item()).abs() < 1e-12);
    }
}
