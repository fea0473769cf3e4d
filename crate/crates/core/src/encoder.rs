//! Patch encoder: non-overlapping patches, a per-sample channel projection
//! followed by a strided conv stack, sinusoidal temporal embeddings and a
//! transformer over the patch sequence.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{bail, Result};
use crate::kernels::conv_out_len;
use crate::layers::{BatchNorm1d, Conv1d, Ctx, Linear, Transformer, TransformerConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::DuinRng;
use crate::tensor::Tensor;

/// One layer of the spatial conv stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EncoderConfig {
    pub n_channels: usize,
    /// Patch length `W` in samples.
    pub patch_len: usize,
    /// Width of the per-sample channel projection.
    pub proj_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub conv_activation: Activation,
    pub transformer: TransformerConfig,
    /// Rows of the temporal embedding table; bounds the patch count.
    pub t_max: usize,
}

impl EncoderConfig {
    /// Sequence lengths through the conv stack, starting at `patch_len`.
    pub fn conv_lengths(&self) -> Result<Vec<usize>> {
        let mut lens = Vec::with_capacity(self.convs.len() + 1);
        lens.push(self.patch_len);
        for (i, c) in self.convs.iter().enumerate() {
            let l = *lens.last().unwrap();
            match conv_out_len(l, c.kernel, c.stride, c.pad) {
                Some(out) => lens.push(out),
                None => bail!(InvalidArgument, "encoder conv {}: kernel {} does not fit length {} (pad {})", i, c.kernel, l, c.pad),
            }
        }
        Ok(lens)
    }

    /// Flattened width of one patch embedding.
    pub fn embed_dim(&self) -> Result<usize> {
        let last_len = *self.conv_lengths()?.last().unwrap();
        let last_ch = self.convs.last().map_or(self.proj_channels, |c| c.out_channels);
        Ok(last_ch * last_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.patch_len == 0 || self.proj_channels == 0 || self.t_max == 0 {
            bail!(InvalidArgument, "encoder: n_channels, patch_len, proj_channels and t_max must be positive");
        }
        let d = self.embed_dim()?;
        if d != self.transformer.d_model {
            bail!(
                InvalidArgument,
                "encoder: conv stack flattens to {} but transformer d_model is {}",
                d,
                self.transformer.d_model
            );
        }
        self.transformer.validate("encoder")
    }

    pub fn n_patches(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.patch_len {
            bail!(InvalidArgument, "sample of {} steps is shorter than one patch ({})", n_samples, self.patch_len);
        }
        Ok(n_samples / self.patch_len)
    }
}

/// Splits a `C×T` sample into `floor(T/W)` non-overlapping `C×W` patches.
pub fn patchify<T: Real>(sample: &Tensor<T>, w: usize) -> Result<Vec<Tensor<T>>> {
    let [c, t] = sample.shape() else { bail!(Shape, "patchify expects [C, T], got {:?}", sample.shape()) };
    let (c, t) = (*c, *t);
    if w == 0 || t < w {
        bail!(InvalidArgument, "sample of {} steps is shorter than one patch ({})", t, w);
    }
    (0..t / w)
        .map(|i| {
            let data = (0..c).flat_map(|ch| sample.data()[ch * t + i * w..ch * t + (i + 1) * w].iter().copied()).collect();
            Tensor::new(&[c, w], data)
        })
        .collect()
}

/// Fixed sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn temporal_table(t_max: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(t_max * d);
    for pos in 0..t_max {
        for j in 0..d {
            let angle = pos as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[t_max, d], data).expect("sized")
}

/// Adds table rows `0..N` to `e[B, N, d]`.
pub fn add_temporal<T: Real>(g: &mut Graph<T>, e: Var, t_max: usize) -> Result<Var> {
    let s = g.shape(e).to_vec();
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    if n > t_max {
        bail!(InvalidArgument, "{} patches exceed the temporal table size {}", n, t_max);
    }
    let table = temporal_table(n, d).cast::<T>();
    let rows = g.constant(table);
    g.add_broadcast(e, rows)
}

/// Channel projection and conv stack applied to every patch.
#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    pub projection: Linear,
    pub convs: Vec<(Conv1d, BatchNorm1d)>,
    pub activation: Activation,
    pub n_channels: usize,
    pub patch_len: usize,
}

impl SpatialEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig, rng: &mut DuinRng) -> Self {
        let projection = Linear::new(store, &format!("{name}.projection"), cfg.n_channels, cfg.proj_channels, true, rng);
        let mut c_in = cfg.proj_channels;
        let convs = cfg
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let conv = Conv1d::new(store, &format!("{name}.convs.{i}"), c_in, c.out_channels, c.kernel, c.stride, c.pad, rng);
                let norm = BatchNorm1d::new(store, &format!("{name}.norms.{i}"), c.out_channels);
                c_in = c.out_channels;
                (conv, norm)
            })
            .collect();
        Self { projection, convs, activation: cfg.conv_activation, n_channels: cfg.n_channels, patch_len: cfg.patch_len }
    }

    /// `x[B, C, T] → [B, N, d]` with `N = floor(T/W)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: &Tensor<T>) -> Result<Var> {
        let [b, c, t] = x.shape() else { bail!(Shape, "encoder expects [B, C, T], got {:?}", x.shape()) };
        let (b, c, t) = (*b, *c, *t);
        if c != self.n_channels {
            bail!(Shape, "encoder built for {} channels, sample has {}", self.n_channels, c);
        }
        let w = self.patch_len;
        if t < w {
            bail!(InvalidArgument, "sample of {} steps is shorter than one patch ({})", t, w);
        }
        let n = t / w;
        // [B, C, N·W] → [B, N, W, C], dropping the trailing remainder.
        let mut data = Vec::with_capacity(b * n * w * c);
        let xd = x.data();
        for bi in 0..b {
            for step in 0..n * w {
                data.extend((0..c).map(|ch| xd[(bi * c + ch) * t + step]));
            }
        }
        let xv = g.constant(Tensor::new(&[b * n, w, c], data)?);
        let h = self.projection.forward(g, cx, xv)?;
        let mut h = g.permute(h, &[0, 2, 1])?;
        for (conv, norm) in &self.convs {
            h = conv.forward(g, cx, h)?;
            h = norm.forward(g, cx, h)?;
            h = g.activation(h, self.activation);
        }
        let s = g.shape(h).to_vec();
        g.reshape(h, &[b, n, s[1] * s[2]])
    }
}

/// Spatial encoder, temporal embedding and transformer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub spatial: SpatialEncoder,
    pub transformer: Transformer,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig, rng: &mut DuinRng) -> Result<Self> {
        cfg.validate()?;
        let spatial = SpatialEncoder::new(store, &format!("{name}.spatial"), cfg, rng);
        let transformer = Transformer::new(store, &format!("{name}.transformer"), &cfg.transformer, rng)?;
        Ok(Self { cfg: cfg.clone(), spatial, transformer })
    }

    pub fn embed_patches<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: &Tensor<T>) -> Result<Var> {
        self.spatial.forward(g, cx, x)
    }

    /// Temporal embedding followed by the transformer.
    pub fn contextualize<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, e: Var) -> Result<Var> {
        let e = add_temporal(g, e, self.cfg.t_max)?;
        self.transformer.forward(g, cx, e)
    }

    /// `x[B, C, T] → [B, N, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, cx: &mut Ctx<T>, x: &Tensor<T>) -> Result<Var> {
        let e = self.embed_patches(g, cx, x)?;
        self.contextualize(g, cx, e)
    }
}

/// Stacks equally shaped `C×T` samples into `[B, C, T]`.
pub fn stack<T: Real>(samples: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let Some(first) = samples.first() else { bail!(InvalidArgument, "empty batch") };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    for s in samples {
        if s.shape() != shape.as_slice() {
            bail!(Shape, "batch mixes shapes {:?} and {:?}", shape, s.shape());
        }
        data.extend(s.data().iter().map(|&v| T::of(v as f64)));
    }
    let mut full = alloc::vec![samples.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}
