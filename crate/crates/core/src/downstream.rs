//! Word classification on top of the patch encoder, evaluation metrics and
//! channel-contribution analysis.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autograd::Graph;
use crate::config::TrainConfig;
use crate::encoder::{stack, Encoder, EncoderConfig};
use crate::error::{bail, Result};
use crate::layers::{apply_batch_stats, Ctx, Linear, BN_MOMENTUM};
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::quantizer::{Quantizer, QuantizerConfig};
use crate::real::Real;
use crate::rng::{self, DuinRng};
use crate::signal::{augment_trial, Sample};
use crate::tensor::Tensor;
use crate::Mode;

/// Where the encoder weights come from before fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InitMode {
    Random,
    Vqvae,
    /// Tokenizer encoder plus its quantizer in the forward path, codex frozen.
    VqvaeVq,
    Mae,
}

impl InitMode {
    pub const ALL: [InitMode; 4] = [InitMode::Random, InitMode::Vqvae, InitMode::VqvaeVq, InitMode::Mae];

    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::Vqvae => "vqvae",
            InitMode::VqvaeVq => "vqvae_vq",
            InitMode::Mae => "mae",
        }
    }

    /// Tensor-name prefixes copied from the source checkpoint.
    pub fn loaded_prefixes(self) -> &'static [&'static str] {
        match self {
            InitMode::Random => &[],
            InitMode::Vqvae | InitMode::Mae => &["encoder."],
            InitMode::VqvaeVq => &["encoder.", "quantizer."],
        }
    }
}

impl core::str::FromStr for InitMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match InitMode::ALL.iter().find(|m| m.as_str() == s) {
            Some(m) => Ok(*m),
            None => bail!(InvalidArgument, "unknown init mode `{}` (random, vqvae, vqvae_vq, mae)", s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub n_classes: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden == 0 || self.n_classes < 2 {
            bail!(InvalidArgument, "classifier needs hidden > 0 and at least 2 classes");
        }
        Ok(())
    }
}

/// Encoder, optional quantizer, then flatten → Linear → ReLU → Linear.
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub mode: InitMode,
    pub n_patches: usize,
    pub encoder: Encoder,
    pub quantizer: Option<Quantizer>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Classifier {
    /// Fresh weights. The head draws from its own stream, so it is identical across
    /// init modes for one seed. `quantizer` is required in `VqvaeVq` mode.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ClassifierConfig,
        mode: InitMode,
        quantizer: Option<&QuantizerConfig>,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_patches = cfg.encoder.n_patches(n_samples)?;
        let d = cfg.encoder.transformer.d_model;
        let encoder = Encoder::new(store, "encoder", &cfg.encoder, &mut rng::stream(seed, "classifier/encoder"))?;
        let quantizer = match (mode, quantizer) {
            (InitMode::VqvaeVq, Some(q)) => {
                let q = Quantizer::new(store, "quantizer", d, q, &mut rng::stream(seed, "classifier/quantizer"))?;
                Some(q)
            }
            (InitMode::VqvaeVq, None) => bail!(InvalidArgument, "vqvae_vq mode needs the tokenizer's quantizer config"),
            _ => None,
        };
        let mut head_rng = rng::stream(seed, "classifier/head");
        let fc1 = Linear::new(store, "head.fc1", n_patches * d, cfg.hidden, true, &mut head_rng);
        let fc2 = Linear::new(store, "head.fc2", cfg.hidden, cfg.n_classes, true, &mut head_rng);
        Ok(Self { cfg: cfg.clone(), mode, n_patches, encoder, quantizer, fc1, fc2 })
    }

    /// Copies the mode's pretrained tensors from `source`.
    ///
    /// Every model tensor under a loaded prefix must be present; returns the
    /// source names that were not used.
    pub fn load_pretrained<'a, T: Real, I>(&self, store: &mut ParamStore<T>, source: I) -> Result<Vec<String>>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    {
        let prefixes = self.mode.loaded_prefixes();
        let wanted = |n: &str| prefixes.iter().any(|p| n.starts_with(p));
        let source: Vec<_> = source.into_iter().collect();
        for p in store.iter() {
            if wanted(&p.name) && !source.iter().any(|(n, _)| *n == p.name) {
                bail!(MissingTensor, "{}", p.name);
            }
        }
        let (used, skipped): (Vec<_>, Vec<_>) = source.into_iter().partition(|(n, _)| wanted(n));
        let unmatched = store.load_matching(used)?;
        Ok(unmatched.into_iter().chain(skipped.into_iter().map(|(n, _)| n.to_string())).collect())
    }

    /// `x[B, C, T] → logits[B, K]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: &Tensor<T>) -> Result<crate::Var> {
        let mut h = self.encoder.forward(g, cx, x)?;
        if let Some(q) = &self.quantizer {
            h = q.forward(g, cx, h)?.embedding;
        }
        let s = g.shape(h).to_vec();
        if s[1] != self.n_patches {
            bail!(Shape, "classifier head expects {} patches, input has {}", self.n_patches, s[1]);
        }
        let flat = g.reshape(h, &[s[0], s[1] * s[2]])?;
        let hidden = self.fc1.forward(g, cx, flat)?;
        let hidden = g.relu(hidden);
        self.fc2.forward(g, cx, hidden)
    }

    /// Inference-mode logits, row-major `[B, K]`.
    pub fn classify<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut r = rng::seeded(0);
        let mut cx = Ctx::new(store, Mode::Infer, &mut r);
        let mut g = Graph::new();
        let logits = self.forward(&mut g, &mut cx, x)?;
        Ok(g.value(logits).clone())
    }

    /// Marks the trainable set for fine-tuning: everything, codex excluded.
    pub fn prepare_finetune<T: Real>(&self, store: &mut ParamStore<T>) {
        store.set_trainable("", true);
    }
}

/// Top-1 accuracy and mean cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub top1: f64,
    pub ce: f64,
    pub n: usize,
}

/// Metrics from row-major logits `[n, k]`, computed in f64.
pub fn metrics_from_logits(logits: &[f64], k: usize, labels: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        bail!(InvalidArgument, "cannot evaluate an empty set");
    }
    if k == 0 || logits.len() != labels.len() * k {
        bail!(Shape, "{} logits for {} labels of {} classes", logits.len(), labels.len(), k);
    }
    let (mut correct, mut ce) = (0usize, 0.0);
    for (row, &y) in logits.chunks(k).zip(labels) {
        if y >= k {
            bail!(OutOfRange, "label {} with {} classes", y, k);
        }
        let best = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
        correct += usize::from(best == y);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    let n = labels.len();
    Ok(Metrics { top1: correct as f64 / n as f64, ce: ce / n as f64, n })
}

fn labels_of(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.label {
            Some(l) => Ok(l),
            None => bail!(InvalidArgument, "classification sample without a label"),
        })
        .collect()
}

pub fn evaluate<T: Real>(model: &Classifier, store: &ParamStore<T>, samples: &[Sample], batch_size: usize) -> Result<Metrics> {
    let labels = labels_of(samples)?;
    let mut logits = Vec::with_capacity(samples.len() * model.cfg.n_classes);
    for batch in samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = batch.iter().map(|s| &s.data).collect();
        let out = model.classify(store, &stack::<T>(&refs)?)?;
        logits.extend(out.data().iter().map(|v| v.as_f64()));
    }
    metrics_from_logits(&logits, model.cfg.n_classes, &labels)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val: Metrics,
}

pub struct FinetuneResult<T> {
    pub history: Vec<FinetuneEpoch>,
    /// 1-based epoch with the highest validation accuracy; earliest on ties.
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub best_store: ParamStore<T>,
}

/// Full fine-tuning with cross-entropy; keeps the weights of the best validation
/// epoch. Accuracy ties go to the lower validation cross-entropy, so a saturated
/// accuracy curve does not freeze the earliest snapshot.
pub fn finetune<T: Real>(
    model: &Classifier,
    store: &mut ParamStore<T>,
    train: &[Sample],
    val: &[Sample],
    sample_rate_hz: f64,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&FinetuneEpoch) -> Result<()>,
) -> Result<FinetuneResult<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        bail!(InvalidArgument, "fine-tuning needs non-empty train and validation sets");
    }
    labels_of(train)?;
    model.prepare_finetune(store);
    let schedule = cfg.schedule()?;
    let mut opt = AdamWState::new(store, cfg.adamw());
    let mut rng = rng::stream(cfg.seed, "classifier/train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, ParamStore<T>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| if cfg.augment { augment_trial(&train[i], sample_rate_hz, &mut rng) } else { train[i].clone() })
                .collect();
            let (l, c) = classifier_step(model, store, &mut opt, &batch, lr, &mut rng)?;
            loss_sum += l;
            correct += c;
            steps += 1;
        }
        let val_metrics = evaluate(model, store, val, cfg.batch_size)?;
        let summary = FinetuneEpoch {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / steps as f64,
            train_top1: correct as f64 / train.len() as f64,
            val: val_metrics,
        };
        on_epoch(&summary)?;
        let improves = |b: &Metrics| val_metrics.top1 > b.top1 || (val_metrics.top1 == b.top1 && val_metrics.ce < b.ce);
        if best.as_ref().is_none_or(|(_, b, _)| improves(b)) {
            best = Some((epoch + 1, val_metrics, store.clone()));
        }
        history.push(summary);
    }
    let (best_epoch, best_val, best_store) = best.expect("at least one epoch");
    Ok(FinetuneResult { history, best_epoch, best_val_top1: best_val.top1, best_store })
}

/// One cross-entropy step; returns (loss, correct predictions).
pub fn classifier_step<T: Real>(
    model: &Classifier,
    store: &mut ParamStore<T>,
    opt: &mut AdamWState<T>,
    batch: &[Sample],
    lr: f64,
    rng: &mut DuinRng,
) -> Result<(f64, usize)> {
    let labels = labels_of(batch)?;
    let refs: Vec<_> = batch.iter().map(|s| &s.data).collect();
    let x = stack::<T>(&refs)?;
    let mut g = Graph::new();
    let (loss, logits, updates) = {
        let mut cx = Ctx::new(store, Mode::Train, rng);
        let logits = model.forward(&mut g, &mut cx, &x)?;
        let loss = g.cross_entropy(logits, &labels)?;
        (loss, logits, cx.take_batch_stats())
    };
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        bail!(NonFinite, "classification loss");
    }
    let k = model.cfg.n_classes;
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, &y)| row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b }) == y)
        .count();
    g.backward(loss, store)?;
    opt.step(store, lr);
    apply_batch_stats(store, updates, BN_MOMENTUM);
    Ok((value, correct))
}

/// `s_i = mean_j |W_ij|` over the channel projection `W[C, D]`, divided by its
/// maximum and scaled by the performance weight `p`.
pub fn channel_contribution<T: Real>(store: &ParamStore<T>, encoder: &Encoder, p: f64) -> Result<Vec<f64>> {
    let w = store.value(encoder.spatial.projection.weight);
    contribution_from_weights(w.data(), w.last_dim(), p)
}

pub fn contribution_from_weights<T: Real>(w: &[T], d: usize, p: f64) -> Result<Vec<f64>> {
    if d == 0 || w.is_empty() || !w.len().is_multiple_of(d) {
        bail!(Shape, "projection of {} values is not a [C, {}] matrix", w.len(), d);
    }
    let raw: Vec<f64> = w.chunks(d).map(|row| row.iter().map(|v| v.as_f64().abs()).sum::<f64>() / d as f64).collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        bail!(InvalidArgument, "channel projection is all zeros");
    }
    Ok(raw.into_iter().map(|s| s / max * p).collect())
}

/// Indices of the `k` largest scores, descending; ties keep the lower index first.
pub fn select_top_channels(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        bail!(InvalidArgument, "cannot select {} of {} channels", k, scores.len());
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;

    #[test]
    fn metric_closed_forms() {
        let k = 61;
        let labels: Vec<usize> = (0..61).collect();
        let uniform = alloc::vec![0.0; 61 * k];
        let m = metrics_from_logits(&uniform, k, &labels).unwrap();
        assert!((m.ce - (61f64).ln()).abs() < 1e-12);
        assert!((4.111 - m.ce).abs() < 1e-3);
        assert_eq!(m.top1, 1.0 / 61.0);
        let mut perfect = alloc::vec![0.0; 61 * k];
        for (i, &y) in labels.iter().enumerate() {
            perfect[i * k + y] = 100.0;
        }
        let m = metrics_from_logits(&perfect, k, &labels).unwrap();
        assert_eq!(m.top1, 1.0);
        assert!(m.ce < 1e-40);
        assert!(metrics_from_logits(&[], k, &[]).is_err());
    }

    #[test]
    fn top_channels() {
        assert_eq!(select_top_channels(&[0.1, 0.9, 0.5], 2).unwrap(), [1, 2]);
        assert_eq!(select_top_channels(&[0.5, 0.5, 0.7], 3).unwrap(), [2, 0, 1]);
        assert!(select_top_channels(&[0.1], 2).is_err());
    }

    #[test]
    fn contribution_cases() {
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(contribution_from_weights(&eye, 3, 1.0).unwrap(), [1.0, 1.0, 1.0]);
        let w = [0.0, 0.0, 1.0, -3.0];
        assert_eq!(contribution_from_weights(&w, 2, 1.0).unwrap(), [0.0, 1.0]);
        assert!(contribution_from_weights(&[0.0f64; 4], 2, 1.0).is_err());
    }

    #[test]
    fn head_is_shared_across_modes() {
        let cfg = ClassifierConfig { encoder: config::tiny_encoder(3), hidden: 5, n_classes: 4 };
        let q = config::tiny_vqvae(3).quantizer;
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let ma = Classifier::new(&mut a, &cfg, InitMode::Random, None, 40, 7).unwrap();
        let mb = Classifier::new(&mut b, &cfg, InitMode::VqvaeVq, Some(&q), 40, 7).unwrap();
        assert_eq!(a.value(ma.fc1.weight), b.value(mb.fc1.weight));
        assert_eq!(a.value(ma.fc2.weight), b.value(mb.fc2.weight));
        let x = crate::params::normal::<f64, _>(&[2, 3, 40], 1.0, &mut rng::seeded(1));
        let la = ma.classify(&a, &x).unwrap();
        assert_eq!(la.shape(), [2, 4]);
        assert_eq!(la, ma.classify(&a, &x).unwrap());
        assert_ne!(la, mb.classify(&b, &x).unwrap());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in InitMode::ALL {
            assert_eq!(m.as_str().parse::<InitMode>().unwrap(), m);
        }
        assert!("bert".parse::<InitMode>().is_err());
    }
}
