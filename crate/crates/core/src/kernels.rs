//! Slice-level compute kernels.
//!
//! Every kernel assigns each output element to exactly one worker and reduces
//! in a fixed order, so results are bitwise identical for any thread count.

use crate::real::Real;

/// Work (in multiply-adds) below which parallel dispatch is skipped.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// Runs `f(row_index, row)` over the `row_len`-sized chunks of `out`.
#[inline]
pub fn for_each_row<T: Send>(
    out: &mut [T],
    row_len: usize,
    work_per_row: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if out.len() / row_len * work_per_row >= PAR_THRESHOLD {
            out.par_chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
            return;
        }
    }
    let _ = work_per_row;
    out.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for_each_row(&mut c[..m * n], n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &alpha) in ar.iter().enumerate() {
            if alpha != T::zero() {
                axpy(alpha, &b[p * n..(p + 1) * n], row);
            }
        }
    });
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for_each_row(&mut c[..m * n], n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            *cj = *cj + dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for_each_row(&mut c[..m * n], n, k * n, |i, row| {
        for p in 0..k {
            let alpha = a[p * m + i];
            if alpha != T::zero() {
                axpy(alpha, &b[p * n..(p + 1) * n], row);
            }
        }
    });
}

/// Transposes each `[rows×cols]` matrix in a batch into `[cols×rows]`.
pub fn transpose_batched<T: Real>(src: &[T], dst: &mut [T], batch: usize, rows: usize, cols: usize) {
    let sz = rows * cols;
    for b in 0..batch {
        let s = &src[b * sz..(b + 1) * sz];
        let d = &mut dst[b * sz..(b + 1) * sz];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output length of a padded, strided convolution, `None` if the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution, `None` if negative.
pub fn conv_transpose_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    if len == 0 {
        return None;
    }
    ((len - 1) * stride + kernel + out_pad).checked_sub(2 * pad).filter(|&l| l > 0)
}

/// Gathers `x[B, Cin, L]` into columns `[B·L', Cin·K]`, zero outside the input.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ck = g.c_in * g.kernel;
    for_each_row(col, ck, ck, |r, row| {
        let (b, o) = (r / g.len_out, r % g.len_out);
        let start = (o * g.stride) as isize - g.pad as isize;
        for ci in 0..g.c_in {
            let xs = &x[(b * g.c_in + ci) * g.len_in..(b * g.c_in + ci + 1) * g.len_in];
            for k in 0..g.kernel {
                let t = start + k as isize;
                row[ci * g.kernel + k] =
                    if t >= 0 && (t as usize) < g.len_in { xs[t as usize] } else { T::zero() };
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx[B, Cin, L]`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ck = g.c_in * g.kernel;
    // Each output row of dx is one (b, ci) pair; it gathers from every column touching it.
    for_each_row(dx, g.len_in, g.len_out * g.kernel, |bc, xs| {
        let (b, ci) = (bc / g.c_in, bc % g.c_in);
        for o in 0..g.len_out {
            let start = (o * g.stride) as isize - g.pad as isize;
            let row = &col[(b * g.len_out + o) * ck + ci * g.kernel..];
            for (k, &v) in row[..g.kernel].iter().enumerate() {
                let t = start + k as isize;
                if t >= 0 && (t as usize) < g.len_in {
                    xs[t as usize] = xs[t as usize] + v;
                }
            }
        }
    });
}
