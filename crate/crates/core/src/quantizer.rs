//! Cosine-distance vector quantizer with an EMA-maintained codex.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::kernels::for_each_row;
use crate::layers::{Ctx, Linear};
use crate::params::{normal, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::DuinRng;
use crate::tensor::Tensor;

/// Norm floor of the ℓ2 normalization; zero vectors stay zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct QuantizerConfig {
    pub n_codex: usize,
    pub d_codex: usize,
    pub beta: f64,
    pub decay: f64,
    /// Laplace smoothing of EMA cluster sizes.
    pub eps: f64,
    /// Epochs without assignment before a code is reseeded; 0 disables reseeding.
    pub reseed_after_epochs: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { n_codex: 2048, d_codex: 64, beta: 0.25, decay: 0.99, eps: 1e-5, reseed_after_epochs: 2 }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_codex == 0 || self.d_codex == 0 {
            bail!(InvalidArgument, "quantizer: n_codex and d_codex must be positive");
        }
        if !(self.beta >= 0.0) {
            bail!(InvalidArgument, "quantizer.beta must be >= 0, got {}", self.beta);
        }
        if !(0.0..=1.0).contains(&self.decay) {
            bail!(InvalidArgument, "quantizer.decay must lie in [0, 1], got {}", self.decay);
        }
        if !(self.eps > 0.0) {
            bail!(InvalidArgument, "quantizer.eps must be positive, got {}", self.eps);
        }
        Ok(())
    }
}

/// Indices and codex rows selected for a batch of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult<T> {
    pub indices: Vec<usize>,
    /// Raw (unnormalized) codex rows, shaped like the queries.
    pub quantized: Tensor<T>,
}

fn l2_normalized<T: Real>(v: &[T]) -> Vec<f64> {
    let norm = v.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter().map(|&x| x.as_f64() / norm).collect()
}

/// Index of the codex row with the highest cosine similarity to each query;
/// ties go to the lowest index.
pub fn nearest_codes<T: Real>(codex: &[T], d: usize, queries: &[T]) -> Vec<usize> {
    let codes: Vec<f64> = codex.chunks(d).flat_map(l2_normalized).collect();
    let n_codes = codex.len() / d;
    let mut out = vec![0usize; queries.len() / d];
    for_each_row(&mut out, 1, n_codes * d, |i, slot| {
        let q = l2_normalized(&queries[i * d..(i + 1) * d]);
        let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
        for (j, c) in codes.chunks(d).enumerate() {
            let sim = crate::kernels::dot(&q, c);
            if sim > best_sim {
                best = j;
                best_sim = sim;
            }
        }
        slot[0] = best;
    });
    out
}

/// Projections in and out of codex space plus the codex and its EMA accumulators.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub cfg: QuantizerConfig,
    pub proj_in: [Linear; 2],
    pub proj_out: Linear,
    pub codex: ParamId,
    pub ema_cluster_size: ParamId,
    pub ema_embed_sum: ParamId,
}

/// Per-run bookkeeping of code usage.
#[derive(Clone, Debug)]
pub struct CodexUsage {
    /// Assignments per code in the current epoch.
    pub epoch_counts: Vec<u64>,
    /// Steps since each code was last assigned.
    pub idle_steps: Vec<u64>,
}

impl CodexUsage {
    pub fn new(n_codex: usize) -> Self {
        Self { epoch_counts: vec![0; n_codex], idle_steps: vec![0; n_codex] }
    }

    pub fn record(&mut self, indices: &[usize]) {
        self.idle_steps.iter_mut().for_each(|s| *s += 1);
        for &i in indices {
            self.epoch_counts[i] += 1;
            self.idle_steps[i] = 0;
        }
    }

    /// Fraction of codes assigned at least once this epoch.
    pub fn utilization(&self) -> f64 {
        self.epoch_counts.iter().filter(|&&c| c > 0).count() as f64 / self.epoch_counts.len() as f64
    }

    pub fn start_epoch(&mut self) {
        self.epoch_counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Loss terms of one quantized forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VqTerms {
    /// `β·‖z_c − sg(z_q)‖²` (element mean), differentiable.
    pub commit: Var,
    /// `‖sg(z_c) − z_q‖²` (element mean); reported only, the codex follows the EMA.
    pub codebook: f64,
}

/// Output of [`Quantizer::forward`].
pub struct QuantizedForward<T> {
    /// Codex-space projection `z_c`.
    pub z_c: Var,
    /// Straight-through node: forward `z_q`, backward identity into `z_c`.
    pub z_st: Var,
    /// `z_q` mapped back to the model width.
    pub embedding: Var,
    pub result: QuantizeResult<T>,
    pub terms: VqTerms,
}

impl Quantizer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_model: usize, cfg: &QuantizerConfig, rng: &mut DuinRng) -> Result<Self> {
        cfg.validate()?;
        let proj_in = [
            Linear::new(store, &format!("{name}.proj_in.0"), d_model, d_model, true, rng),
            Linear::new(store, &format!("{name}.proj_in.1"), d_model, cfg.d_codex, true, rng),
        ];
        let proj_out = Linear::new(store, &format!("{name}.proj_out"), cfg.d_codex, d_model, true, rng);
        let shape = [cfg.n_codex, cfg.d_codex];
        let codex = store.add(format!("{name}.codex"), normal(&shape, 1.0 / (cfg.d_codex as f64).sqrt(), rng), false);
        let ema_cluster_size = store.add(format!("{name}.ema_cluster_size"), Tensor::zeros(&[cfg.n_codex]), false);
        let ema_embed_sum = store.add(format!("{name}.ema_embed_sum"), Tensor::zeros(&shape), false);
        Ok(Self { cfg: cfg.clone(), proj_in, proj_out, codex, ema_cluster_size, ema_embed_sum })
    }

    /// `z_c(e) = W₂·tanh(W₁·e + b₁) + b₂`.
    pub fn to_codex_space<T: Real>(&self, g: &mut Graph<T>, cx: &Ctx<T>, e: Var) -> Result<Var> {
        let h = self.proj_in[0].forward(g, cx, e)?;
        let h = g.tanh(h);
        self.proj_in[1].forward(g, cx, h)
    }

    pub fn quantize<T: Real>(&self, store: &ParamStore<T>, z_c: &Tensor<T>) -> Result<QuantizeResult<T>> {
        let d = self.cfg.d_codex;
        if z_c.last_dim() != d {
            bail!(Shape, "quantizer expects width {}, got {:?}", d, z_c.shape());
        }
        let codex = store.value(self.codex).data();
        let indices = nearest_codes(codex, d, z_c.data());
        let data = indices.iter().flat_map(|&i| codex[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(QuantizeResult { indices, quantized: Tensor::new(z_c.shape(), data)? })
    }

    /// Projection, lookup, straight-through and mapping back to the model width.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &Ctx<T>, e: Var) -> Result<QuantizedForward<T>> {
        let z_c = self.to_codex_space(g, cx, e)?;
        let result = self.quantize(cx.store, g.value(z_c))?;
        let z_st = g.straight_through(z_c, result.quantized.clone())?;
        let embedding = self.proj_out.forward(g, cx, z_st)?;
        let mse = g.mse(z_c, &result.quantized)?;
        let codebook = g.value(mse).item().as_f64();
        let commit = g.scale(mse, T::of(self.cfg.beta));
        Ok(QuantizedForward { z_c, z_st, embedding, result, terms: VqTerms { commit, codebook } })
    }

    /// Exponential moving average update of the codex from one batch of assignments.
    ///
    /// Codes whose smoothed cluster size is still zero keep their current row.
    pub fn ema_update<T: Real>(&self, store: &mut ParamStore<T>, indices: &[usize], z_c: &[T]) {
        let (k, d) = (self.cfg.n_codex, self.cfg.d_codex);
        let (decay, eps) = (self.cfg.decay, self.cfg.eps);
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (r, &i) in indices.iter().enumerate() {
            counts[i] += 1.0;
            for (s, &v) in sums[i * d..(i + 1) * d].iter_mut().zip(&z_c[r * d..(r + 1) * d]) {
                *s += v.as_f64();
            }
        }
        let cs: Vec<f64> = {
            let p = store.get_mut(self.ema_cluster_size);
            for (c, &n) in p.value.data_mut().iter_mut().zip(&counts) {
                *c = T::of(decay * c.as_f64() + (1.0 - decay) * n);
            }
            p.value.data().iter().map(|c| c.as_f64()).collect()
        };
        let es: Vec<f64> = {
            let p = store.get_mut(self.ema_embed_sum);
            for (e, &s) in p.value.data_mut().iter_mut().zip(&sums) {
                *e = T::of(decay * e.as_f64() + (1.0 - decay) * s);
            }
            p.value.data().iter().map(|e| e.as_f64()).collect()
        };
        let total: f64 = cs.iter().sum();
        let codex = store.get_mut(self.codex).value.data_mut();
        for j in 0..k {
            if cs[j] <= 0.0 {
                continue;
            }
            let smoothed = (cs[j] + eps) / (total + k as f64 * eps) * total;
            for t in 0..d {
                codex[j * d + t] = T::of(es[j * d + t] / smoothed);
            }
        }
    }

    /// Overwrites codes idle for at least `threshold_steps` with random vectors
    /// from `pool` (rows of width `d_codex`). Returns the number reseeded.
    pub fn reseed_dead_codes<T: Real, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        usage: &mut CodexUsage,
        threshold_steps: u64,
        pool: &[T],
        rng: &mut R,
    ) -> usize {
        let d = self.cfg.d_codex;
        let n_pool = pool.len() / d;
        if threshold_steps == 0 || n_pool == 0 {
            return 0;
        }
        let mut reseeded = 0;
        for j in 0..self.cfg.n_codex {
            if usage.idle_steps[j] < threshold_steps {
                continue;
            }
            let v = &pool[rng.random_range(0..n_pool) * d..][..d];
            store.get_mut(self.codex).value.data_mut()[j * d..(j + 1) * d].copy_from_slice(v);
            store.get_mut(self.ema_embed_sum).value.data_mut()[j * d..(j + 1) * d].copy_from_slice(v);
            store.get_mut(self.ema_cluster_size).value.data_mut()[j] = T::one();
            usage.idle_steps[j] = 0;
            reseeded += 1;
        }
        reseeded
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::Mode;

    fn small(n: usize, d: usize, decay: f64) -> (ParamStore<f64>, Quantizer) {
        let mut store = ParamStore::new();
        let cfg = QuantizerConfig { n_codex: n, d_codex: d, decay, ..Default::default() };
        let q = Quantizer::new(&mut store, "quantizer", 4, &cfg, &mut rng::seeded(0)).unwrap();
        (store, q)
    }

    #[test]
    fn exact_and_cosine_matches() {
        let codex = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(nearest_codes(&codex, 2, &[0.9, 0.1]), vec![0]);
        assert_eq!(nearest_codes(&codex, 2, &[0.1, 0.9]), vec![1]);
        // Ties go to the lowest index.
        assert_eq!(nearest_codes(&codex, 2, &[1.0, 1.0]), vec![0]);
        assert_eq!(nearest_codes(&[2.0, 0.0, 1.0, 0.0], 2, &[3.0, 0.0]), vec![0]);
        // Zero query: all similarities zero, lowest index wins.
        assert_eq!(nearest_codes(&codex, 2, &[0.0, 0.0]), vec![0]);

        let (store, q) = small(8, 3, 0.99);
        let codex = store.value(q.codex).data();
        let row5 = Tensor::new(&[1, 3], codex[15..18].to_vec()).unwrap();
        assert_eq!(q.quantize(&store, &row5).unwrap().indices, vec![5]);
    }

    #[test]
    fn decay_limits() {
        let (mut store, q) = small(3, 2, 0.0);
        let z = [1.0, 2.0, -1.0, 0.5, 0.25, -3.0];
        q.ema_update(&mut store, &[0, 1, 2], &z);
        let codex = store.value(q.codex).data();
        for (a, b) in codex.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        let (mut store, q) = small(3, 2, 1.0);
        let before = store.value(q.codex).clone();
        q.ema_update(&mut store, &[0, 1, 2], &z);
        assert_eq!(store.value(q.codex), &before);
    }

    #[test]
    fn repeated_batch_converges_to_centroids() {
        let (mut store, q) = small(2, 2, 0.99);
        let z = [1.0, 0.0, 0.8, 0.2, 0.0, 1.0, 0.1, 0.7];
        for _ in 0..100 {
            let r = q.quantize(&store, &Tensor::new(&[4, 2], z.to_vec()).unwrap()).unwrap();
            q.ema_update(&mut store, &r.indices, &z);
        }
        let r = q.quantize(&store, &Tensor::new(&[4, 2], z.to_vec()).unwrap()).unwrap();
        let codex = store.value(q.codex).data();
        for j in 0..2 {
            let members: Vec<usize> = (0..4).filter(|&i| r.indices[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            for t in 0..2 {
                let c = members.iter().map(|&i| z[i * 2 + t]).sum::<f64>() / members.len() as f64;
                assert!((codex[j * 2 + t] - c).abs() < 1e-3);
            }
        }
        assert!(store.value(q.ema_cluster_size).data().iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn reseed_rules() {
        let (mut store, q) = small(4, 2, 0.99);
        let mut usage = CodexUsage::new(4);
        usage.record(&[0, 1, 2, 3]);
        let pool = [5.0, 5.0];
        assert_eq!(q.reseed_dead_codes(&mut store, &mut usage, 3, &pool, &mut rng::seeded(0)), 0);
        for _ in 0..3 {
            usage.record(&[0, 1, 2]);
        }
        assert_eq!(q.reseed_dead_codes(&mut store, &mut usage, 3, &pool, &mut rng::seeded(0)), 1);
        assert_eq!(&store.value(q.codex).data()[6..8], &[5.0, 5.0]);
        assert_eq!(usage.idle_steps[3], 0);
    }

    #[test]
    fn loss_terms_vanish_at_exact_hit_and_zero_beta() {
        let mut store = ParamStore::<f64>::new();
        let cfg = QuantizerConfig { n_codex: 4, d_codex: 2, beta: 0.0, ..Default::default() };
        let q = Quantizer::new(&mut store, "quantizer", 4, &cfg, &mut rng::seeded(1)).unwrap();
        let mut r = rng::seeded(2);
        let cx = Ctx::new(&store, Mode::Infer, &mut r);
        let mut g = Graph::new();
        let e = g.constant(crate::params::normal(&[2, 3, 4], 1.0, &mut rng::seeded(3)));
        let out = q.forward(&mut g, &cx, e).unwrap();
        assert_eq!(g.value(out.terms.commit).item(), 0.0);
        assert!(out.terms.codebook > 0.0);
        assert_eq!(g.value(out.z_st), &out.result.quantized);
        assert_eq!(g.shape(out.embedding), &[2, 3, 4]);
    }
}
