//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the tape
//! by value through [`Graph::param`]; [`Graph::backward`] accumulates
//! `dLoss/dParam` into the owning [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl core::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            other => bail!(InvalidArgument, "unknown activation `{}`", other),
        }
    }
}

/// Batch statistics observed by a train-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance, so that converged running statistics reproduce the train-mode map.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Concat(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, col: Vec<T> },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, xt: Vec<T> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T>, dims: [usize; 3], train: bool },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T>, d: usize },
    Act(Var, Activation),
    Softmax(Var),
    Dropout { a: Var, mask: Vec<T> },
    MaskReplace { x: Var, token: Var, mask: Vec<bool>, d: usize },
    StraightThrough(Var),
    Mse { a: Var, target: Vec<T> },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<usize>, weights: Vec<T>, k: usize },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every node after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders `src` (with `shape`) so that output axis `i` is input axis `perm[i]`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    loop {
        let base: usize = (0..last).map(|i| idx[i] * src_stride[i]).sum();
        let st = src_stride[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * st]);
        }
        // Increment the multi-index over all axes but the last.
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (readable through [`Gradients`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Stop-gradient: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{}: {:?} vs {:?}", what, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            bail!(Shape, "cannot broadcast {:?} onto {:?}", sb, sa);
        }
        let bd = self.value(b).data().to_vec();
        let n = bd.len().max(1);
        let mut t = self.value(a).clone();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x = *x + bd[i % n];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    /// `x[..., in] · w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            bail!(Shape, "linear: input {:?} with weight {:?}", xs, ws);
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                bail!(Shape, "linear: bias {:?} for width {}", self.shape(b), dout);
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bd);
            }
        }
        kernels::gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b, rows, din, dout }, rg))
    }

    /// Batched product over all leading axes: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            bail!(Shape, "bmm: {:?} with {:?}", sa, sb);
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (n, kb) = if trans_b { (sb[r - 2], sb[r - 1]) } else { (sb[r - 1], sb[r - 2]) };
        if k != kb {
            bail!(Shape, "bmm inner dims: {:?} with {:?} (trans_b={})", sa, sb, trans_b);
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let (ai, bi) = (&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n]);
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ai, bi, ci, m, k, n);
            } else {
                kernels::gemm_nn(ai, bi, ci, m, k, n);
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Bmm { a, b, batch, m, k, n, trans_b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            bail!(InvalidArgument, "bad permutation {:?} for rank {}", perm, shape.len());
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(InvalidArgument, "concat of nothing") };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != *tail {
                bail!(Shape, "concat: {:?} vs trailing {:?}", self.shape(p), tail);
            }
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `x[B, Cin, L]` with `w[Cout, Cin, K]` and optional `b[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] {
            bail!(Shape, "conv1d: input {:?} with weight {:?}", xs, ws);
        }
        let Some(len_out) = kernels::conv_out_len(xs[2], ws[2], stride, pad) else {
            bail!(Shape, "conv1d: kernel {} exceeds padded length {} (pad {})", ws[2], xs[2] + 2 * pad, pad);
        };
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            len_in: xs[2],
            len_out,
            kernel: ws[2],
            stride,
            pad,
        };
        let ck = geom.c_in * geom.kernel;
        let rows = geom.batch * len_out;
        let mut col = vec![T::zero(); rows * ck];
        kernels::im2col(self.value(x).data(), &geom, &mut col);
        let mut tmp = vec![T::zero(); rows * geom.c_out];
        kernels::gemm_nt(&col, self.value(w).data(), &mut tmp, rows, ck, geom.c_out);
        let mut out = vec![T::zero(); rows * geom.c_out];
        // [B, L', Cout] -> [B, Cout, L']
        kernels::transpose_batched(&tmp, &mut out, geom.batch, len_out, geom.c_out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, row) in out.chunks_mut(len_out).enumerate() {
                let bias = bd[i % geom.c_out];
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        let t = Tensor::new(&[geom.batch, geom.c_out, len_out], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, geom, col }, rg))
    }

    /// `x[B, Cin, L]` with `w[Cin, Cout, K]` and optional `b[Cout]`; the adjoint of [`Graph::conv1d`].
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[1] {
            bail!(Shape, "conv_transpose1d: input {:?} with weight {:?}", xs, ws);
        }
        if out_pad >= stride {
            bail!(InvalidArgument, "output padding {} must be smaller than stride {}", out_pad, stride);
        }
        let Some(len_out) = kernels::conv_transpose_out_len(xs[2], ws[2], stride, pad, out_pad) else {
            bail!(Shape, "conv_transpose1d: empty output for input {:?}", xs);
        };
        // Geometry expressed from the output side: the forward of this op is col2im.
        let geom = ConvGeom {
            batch: xs[0],
            c_in: ws[1],
            c_out: xs[1],
            len_in: len_out,
            len_out: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        let (cin, cout, k, l) = (xs[1], ws[1], ws[2], xs[2]);
        let rows = geom.batch * l;
        let mut xt = vec![T::zero(); rows * cin];
        kernels::transpose_batched(self.value(x).data(), &mut xt, geom.batch, cin, l);
        let mut ycol = vec![T::zero(); rows * cout * k];
        kernels::gemm_nn(&xt, self.value(w).data(), &mut ycol, rows, cin, cout * k);
        let mut out = vec![T::zero(); geom.batch * cout * len_out];
        kernels::col2im(&ycol, &geom, &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, row) in out.chunks_mut(len_out).enumerate() {
                let bias = bd[i % cout];
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        let t = Tensor::new(&[geom.batch, cout, len_out], out)?;
        Ok(self.push(t, Op::ConvTranspose1d { x, w, b, geom, xt }, rg))
    }

    fn check_norm_params(&self, gain: Var, bias: Var, n: usize, what: &str) -> Result<()> {
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            bail!(Shape, "{}: gain {:?} / bias {:?} for {} features", what, self.shape(gain), self.shape(bias), n);
        }
        Ok(())
    }

    /// Train-mode batch norm of `x[B, C, L]` over the (B, L) axes of each channel.
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            bail!(Shape, "batch_norm expects [B, C, L], got {:?}", xs);
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        if b * l < 2 {
            bail!(InvalidArgument, "train-mode batch norm needs at least 2 values per channel, got {}", b * l);
        }
        self.check_norm_params(gain, bias, c, "batch_norm")?;
        let xd = self.value(x).data();
        let m = T::of((b * l) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s = s + xd[(bi * c + ch) * l..(bi * c + ch + 1) * l].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut ss = T::zero();
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * l..(bi * c + ch + 1) * l] {
                    ss = ss + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let (node, _) = self.norm_apply(x, gain, bias, &mean, &inv_std, [b, c, l], true);
        Ok((node, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm using stored running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || running_mean.len() != xs[1] || running_var.len() != xs[1] {
            bail!(Shape, "batch_norm_infer: input {:?} with {} running stats", xs, running_mean.len());
        }
        self.check_norm_params(gain, bias, xs[1], "batch_norm")?;
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        Ok(self.norm_apply(x, gain, bias, running_mean, &inv_std, [xs[0], xs[1], xs[2]], false).0)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_apply(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[T],
        inv_std: &[T],
        dims: [usize; 3],
        train: bool,
    ) -> (Var, ()) {
        let [_, c, l] = dims;
        let xd = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ch = (i / l) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(h * g[ch] + bb[ch]);
        }
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::BatchNorm { x, gain, bias, xhat, inv_std: inv_std.to_vec(), dims, train };
        (self.push(t, op, rg), ())
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        self.check_norm_params(gain, bias, d, "layer_norm")?;
        let xd = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(xd.len() / d);
        for row in xd.chunks(d) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(h * g[j] + bb[j]);
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std, d }, rg))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = match kind {
            Activation::Relu => self.value(a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Activation::Gelu => self.value(a).map(gelu),
            Activation::Tanh => self.value(a).map(|x| x.tanh()),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Act(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Inverted dropout; callers bypass this op entirely in inference mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(InvalidArgument, "dropout rate {} outside [0, 1)", rate);
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// Replaces rows of `x[.., d]` flagged in `mask` (one flag per row) with `token[d]`.
    pub fn mask_replace(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(token) != [d] || mask.len() * d != self.value(x).numel() {
            bail!(Shape, "mask_replace: input {:?}, token {:?}, {} flags", self.shape(x), self.shape(token), mask.len());
        }
        let tok = self.value(token).data().to_vec();
        let mut t = self.value(x).clone();
        for (row, &m) in t.data_mut().chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(&tok);
            }
        }
        let rg = self.rg(&[x, token]);
        Ok(self.push(t, Op::MaskReplace { x, token, mask: mask.to_vec(), d }, rg))
    }

    /// Forward value `value`; backward routes the incoming gradient to `src` unchanged.
    pub fn straight_through(&mut self, src: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(src) {
            bail!(Shape, "straight_through: {:?} vs {:?}", value.shape(), self.shape(src));
        }
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::StraightThrough(src), rg))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if target.shape() != self.shape(a) {
            bail!(Shape, "mse: {:?} vs {:?}", self.shape(a), target.shape());
        }
        let n = T::of(target.numel().max(1) as f64);
        let s = self.value(a).data().iter().zip(target.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, target: target.data().to_vec() }, rg))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` over rows of `logits[R, K]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / k.max(1);
        if targets.len() != rows || weights.len() != rows {
            bail!(Shape, "cross_entropy: {} rows, {} targets, {} weights", rows, targets.len(), weights.len());
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            bail!(OutOfRange, "target {} not in [0, {})", bad, k);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for ((row, &t), &w) in probs.chunks_mut(k).zip(targets).zip(weights) {
            let lse = log_sum_exp(row);
            if w != T::zero() {
                loss = loss + w * (lse - row[t]);
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, probs, targets: targets.to_vec(), weights: weights.to_vec(), k };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Batch-mean cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let w = T::one() / T::of(targets.len().max(1) as f64);
        let weights = vec![w; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).numel().max(1) as f64);
        let s = self.value(a).data().iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Propagates `d loss / d node` for every node and accumulates parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    for (acc, &gi) in p.grad.data_mut().iter_mut().zip(g) {
                        *acc = *acc + gi;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            bail!(Shape, "backward needs a scalar loss, got {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] = s[j] + g[j] * bv[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] = s[j] + g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + *c * y)),
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    let n = s.len().max(1);
                    for (j, &gj) in g.iter().enumerate() {
                        s[j % n] = s[j % n] + gj;
                    }
                });
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| kernels::gemm_nt(g, wv, s, rows, dout, din));
                acc(*w, &mut |s| kernels::gemm_tn(xv, g, s, din, rows, dout));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for r in g.chunks(dout) {
                            add_into(s, r);
                        }
                    });
                }
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for t in 0..batch {
                        let gi = &g[t * m * n..(t + 1) * m * n];
                        let bi = &bv[t * k * n..(t + 1) * k * n];
                        let si = &mut s[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(gi, bi, si, m, n, k);
                        } else {
                            kernels::gemm_nt(gi, bi, si, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for t in 0..batch {
                        let gi = &g[t * m * n..(t + 1) * m * n];
                        let ai = &av[t * m * k..(t + 1) * m * k];
                        let si = &mut s[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn(gi, ai, si, n, m, k);
                        } else {
                            kernels::gemm_tn(ai, gi, si, k, m, n);
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Permute { a, perm } => {
                let back = permute_data(g, node.value.shape(), &inverse_perm(perm));
                acc(*a, &mut |s| add_into(s, &back));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(p, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Conv1d { x, w, b, geom, col } => {
                let rows = geom.batch * geom.len_out;
                let ck = geom.c_in * geom.kernel;
                let mut gt = vec![T::zero(); rows * geom.c_out];
                kernels::transpose_batched(g, &mut gt, geom.batch, geom.c_out, geom.len_out);
                acc(*w, &mut |s| kernels::gemm_tn(&gt, col, s, geom.c_out, rows, ck));
                acc(*x, &mut |s| {
                    let mut dcol = vec![T::zero(); rows * ck];
                    kernels::gemm_nn(&gt, val(*w), &mut dcol, rows, geom.c_out, ck);
                    kernels::col2im(&dcol, geom, s);
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| channel_sums(g, s, geom.c_out, geom.len_out));
                }
            }
            Op::ConvTranspose1d { x, w, b, geom, xt } => {
                // geom.c_in here is the op's output channel count (see conv_transpose1d).
                let (cout, cin, l) = (geom.c_in, geom.c_out, geom.len_out);
                let rows = geom.batch * l;
                let ck = cout * geom.kernel;
                let mut dycol = vec![T::zero(); rows * ck];
                kernels::im2col(g, geom, &mut dycol);
                acc(*w, &mut |s| kernels::gemm_tn(xt, &dycol, s, cin, rows, ck));
                acc(*x, &mut |s| {
                    let mut dxt = vec![T::zero(); rows * cin];
                    kernels::gemm_nt(&dycol, val(*w), &mut dxt, rows, ck, cin);
                    let mut dx = vec![T::zero(); rows * cin];
                    kernels::transpose_batched(&dxt, &mut dx, geom.batch, l, cin);
                    add_into(s, &dx);
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| channel_sums(g, s, cout, geom.len_in));
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, dims, train } => {
                let [bsz, c, l] = *dims;
                let gv = val(*gain);
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for (j, &gj) in g.iter().enumerate() {
                    let ch = (j / l) % c;
                    dgain[ch] = dgain[ch] + gj * xhat[j];
                    dbias[ch] = dbias[ch] + gj;
                    let dh = gj * gv[ch];
                    sum_dxhat[ch] = sum_dxhat[ch] + dh;
                    sum_dxhat_xhat[ch] = sum_dxhat_xhat[ch] + dh * xhat[j];
                }
                acc(*gain, &mut |s| add_into(s, &dgain));
                acc(*bias, &mut |s| add_into(s, &dbias));
                let m = T::of((bsz * l) as f64);
                acc(*x, &mut |s| {
                    for (j, &gj) in g.iter().enumerate() {
                        let ch = (j / l) % c;
                        let dh = gj * gv[ch];
                        let dx = if *train {
                            inv_std[ch] / m * (m * dh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch])
                        } else {
                            dh * inv_std[ch]
                        };
                        s[j] = s[j] + dx;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std, d } => {
                let d = *d;
                let gv = val(*gain);
                acc(*gain, &mut |s| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] = s[j] + gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for gr in g.chunks(d) {
                        add_into(s, gr);
                    }
                });
                let dn = T::of(d as f64);
                acc(*x, &mut |s| {
                    for (r, ((gr, hr), sr)) in g.chunks(d).zip(xhat.chunks(d)).zip(s.chunks_mut(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sr[j] = sr[j] + inv / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Act(a, kind) => {
                let (xv, yv) = (val(*a), node.value.data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Gelu => gelu_grad(xv[j]),
                            Activation::Tanh => T::one() - yv[j] * yv[j],
                        };
                        s[j] = s[j] + g[j] * d;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc(*a, &mut |s| {
                    for ((yr, gr), sr) in y.chunks(d).zip(g.chunks(d)).zip(s.chunks_mut(d)) {
                        let dotp = kernels::dot(yr, gr);
                        for j in 0..d {
                            sr[j] = sr[j] + yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] = s[j] + g[j] * mask[j];
                }
            }),
            Op::MaskReplace { x, token, mask, d } => {
                let d = *d;
                acc(*x, &mut |s| {
                    for ((sr, gr), &m) in s.chunks_mut(d).zip(g.chunks(d)).zip(mask) {
                        if !m {
                            add_into(sr, gr);
                        }
                    }
                });
                acc(*token, &mut |s| {
                    for (gr, &m) in g.chunks(d).zip(mask) {
                        if m {
                            add_into(s, gr);
                        }
                    }
                });
            }
            Op::StraightThrough(src) => acc(*src, &mut |s| add_into(s, g)),
            Op::Mse { a, target } => {
                let av = val(*a);
                let c = g[0] * T::of(2.0) / T::of(target.len().max(1) as f64);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] = s[j] + c * (av[j] - target[j]);
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets, weights, k } => {
                let k = *k;
                acc(*logits, &mut |s| {
                    for (r, (sr, pr)) in s.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        let w = weights[r] * g[0];
                        if w == T::zero() {
                            continue;
                        }
                        for j in 0..k {
                            sr[j] = sr[j] + w * pr[j];
                        }
                        sr[targets[r]] = sr[targets[r]] - w;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::Mean(a) => {
                let c = g[0] / T::of(self.nodes[a.0].value.numel().max(1) as f64);
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x = *x + c));
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Sums `g[B, C, L]` over B and L into `dst[C]`.
fn channel_sums<T: Real>(g: &[T], dst: &mut [T], c: usize, l: usize) {
    for (i, row) in g.chunks(l).enumerate() {
        dst[i % c] = dst[i % c] + row.iter().copied().sum::<T>();
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}
