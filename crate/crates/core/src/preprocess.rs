//! Signal conditioning: zero-phase Butterworth band-pass, notch, polyphase
//! resampling, bipolar re-referencing and per-channel z-scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::kernels::for_each_row;
use crate::signal::{ChannelMeta, Recording};

/// Q factors of the two sections of a 4th-order Butterworth prototype.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_3];
/// Kaiser window shape of the resampling kernel.
pub const KAISER_BETA: f64 = 8.0;
/// Input taps contributing to each resampled output.
pub const RESAMPLE_TAPS: usize = 64;
/// Largest numerator or denominator accepted for a resampling ratio.
pub const MAX_RATIO_TERM: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub target_rate_hz: f64,
    /// Apply the band-pass and notch stages.
    pub filter: bool,
    /// Apply bipolar re-referencing.
    pub bipolar: bool,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { low_hz: 0.5, high_hz: 200.0, notch_hz: 50.0, notch_q: 35.0, target_rate_hz: 1000.0, filter: true, bipolar: true }
    }
}

impl FilterSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if self.filter {
            check_band(self.low_hz, self.high_hz, sample_rate_hz)?;
            if !(self.notch_hz > self.low_hz && self.notch_hz < self.high_hz) {
                bail!(InvalidArgument, "notch_hz {} must lie inside ({}, {})", self.notch_hz, self.low_hz, self.high_hz);
            }
            if !(self.notch_q > 0.0) {
                bail!(InvalidArgument, "notch_q must be positive, got {}", self.notch_q);
            }
        }
        if !(self.target_rate_hz > 0.0) {
            bail!(InvalidArgument, "target_rate_hz must be positive, got {}", self.target_rate_hz);
        }
        Ok(())
    }
}

fn check_band(low: f64, high: f64, rate: f64) -> Result<()> {
    if !(low > 0.0 && low < high && high < rate / 2.0) {
        bail!(InvalidArgument, "band ({} Hz, {} Hz) must satisfy 0 < low < high < Nyquist ({} Hz)", low, high, rate / 2.0);
    }
    Ok(())
}

/// A normalized second-order section, `a[0] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        let a0 = a[0];
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [1.0, a[1] / a0, a[2] / a0] }
    }

    /// Response at DC, `H(1)`.
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Magnitude response at `freq` for sample rate `rate`.
    pub fn magnitude(&self, freq: f64, rate: f64) -> f64 {
        let w = core::f64::consts::TAU * freq / rate;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

fn rbj(cutoff: f64, rate: f64, q: f64, high: bool) -> Biquad {
    let w0 = core::f64::consts::TAU * cutoff / rate;
    let (cw, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
    let b = if high { [(1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0] } else { [(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0] };
    Biquad::normalized(b, [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
}

/// 4th-order Butterworth high-pass at `low` followed by a 4th-order low-pass at `high`.
pub fn butter_bandpass(low: f64, high: f64, rate: f64) -> Result<Vec<Biquad>> {
    check_band(low, high, rate)?;
    let mut sos: Vec<Biquad> = BUTTER4_Q.iter().map(|&q| rbj(low, rate, q, true)).collect();
    sos.extend(BUTTER4_Q.iter().map(|&q| rbj(high, rate, q, false)));
    Ok(sos)
}

/// Second-order notch with quality factor `q` (bandwidth `freq / q` at −3 dB).
pub fn notch_biquad(freq: f64, q: f64, rate: f64) -> Result<Biquad> {
    if !(freq > 0.0 && freq < rate / 2.0) || !(q > 0.0) {
        bail!(InvalidArgument, "notch at {} Hz (Q {}) must lie below Nyquist ({} Hz)", freq, q, rate / 2.0);
    }
    let w0 = core::f64::consts::TAU * freq / rate;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Biquad { b: [gain, -2.0 * gain * c, gain], a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0] })
}

/// Runs the cascade over `x` in transposed direct form II from state `zi`.
fn sosfilt(sos: &[Biquad], x: &mut [f64], zi: &[[f64; 2]]) {
    for (s, z0) in sos.iter().zip(zi) {
        let [b0, b1, b2] = s.b;
        let [_, a1, a2] = s.a;
        let (mut z1, mut z2) = (z0[0], z0[1]);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Per-section state of the cascade's step response steady state, for unit input.
fn sos_step_state(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let y = s.dc_gain();
            let z2 = s.b[2] - s.a[2] * y;
            let z1 = y - s.b[0];
            let st = [scale * z1, scale * z2];
            scale *= y;
            st
        })
        .collect()
}

/// Forward-backward filtering with odd-reflection padding and steady-state
/// initial conditions; the combined response has zero phase.
pub fn filtfilt(sos: &[Biquad], x: &[f64]) -> Result<Vec<f64>> {
    check_filter_len(sos.len(), x.len())?;
    let pad = 3 * (2 * sos.len() + 1);
    let n = x.len();
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let unit = sos_step_state(sos);
    let scaled = |v: f64| unit.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
    let zi = scaled(ext[0]);
    sosfilt(sos, &mut ext, &zi);
    ext.reverse();
    let zi = scaled(ext[0]);
    sosfilt(sos, &mut ext, &zi);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Applies `f` to every channel independently, producing `out_len` samples each.
fn map_channels(rec: &Recording, out_len: usize, f: impl Fn(&[f64]) -> Vec<f64> + Sync + Send) -> Vec<f32> {
    let mut out = vec![0f32; rec.n_channels() * out_len];
    for_each_row(&mut out, out_len, rec.n_samples() * 16, |c, row| {
        let x: Vec<f64> = rec.channel(c).iter().map(|&v| v as f64).collect();
        row.iter_mut().zip(f(&x)).for_each(|(o, v)| *o = v as f32);
    });
    out
}

fn check_filter_len(sos_len: usize, n: usize) -> Result<()> {
    let pad = 3 * (2 * sos_len + 1);
    if n <= pad {
        bail!(InvalidArgument, "signal of {} samples is too short for zero-phase filtering (needs > {})", n, pad);
    }
    Ok(())
}

fn with_data(rec: &Recording, rate: f64, channels: Vec<ChannelMeta>, data: Vec<f32>) -> Result<Recording> {
    Recording::new(rec.subject_id.clone(), rate, channels, data)
}

/// Zero-phase 4th-order Butterworth band-pass on every channel.
pub fn bandpass(rec: &Recording, low_hz: f64, high_hz: f64) -> Result<Recording> {
    let sos = butter_bandpass(low_hz, high_hz, rec.sample_rate_hz)?;
    check_filter_len(sos.len(), rec.n_samples())?;
    let data = map_channels(rec, rec.n_samples(), |x| filtfilt(&sos, x).expect("length checked"));
    with_data(rec, rec.sample_rate_hz, rec.channels.clone(), data)
}

/// Zero-phase second-order notch on every channel.
pub fn notch(rec: &Recording, notch_hz: f64, q: f64) -> Result<Recording> {
    let sos = [notch_biquad(notch_hz, q, rec.sample_rate_hz)?];
    check_filter_len(sos.len(), rec.n_samples())?;
    let data = map_channels(rec, rec.n_samples(), |x| filtfilt(&sos, x).expect("length checked"));
    with_data(rec, rec.sample_rate_hz, rec.channels.clone(), data)
}

/// Best rational `p/q` approximation of `x` with `p, q ≤ MAX_RATIO_TERM`, if exact to 1e-9.
pub fn rational_ratio(x: f64) -> Option<(u64, u64)> {
    if !(x > 0.0) || !x.is_finite() {
        return None;
    }
    let (mut h0, mut h1, mut k0, mut k1) = (0u64, 1u64, 1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > MAX_RATIO_TERM as f64 {
            break;
        }
        let a = a as u64;
        let (h2, k2) = (a * h1 + h0, a * k1 + k0);
        if h2 > MAX_RATIO_TERM || k2 > MAX_RATIO_TERM {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64 / k1 as f64) - x).abs() <= 1e-9 * x {
            return Some((h1, k1));
        }
        let frac = r - a as f64;
        if frac < 1e-12 {
            break;
        }
        r = 1.0 / frac;
    }
    None
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, q) = (1.0, 1.0, x * x / 4.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = core::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc taps for each of the `up` output phases.
fn resample_taps(up: u64, down: u64) -> Vec<[f64; RESAMPLE_TAPS]> {
    let cutoff = 0.5 * (up as f64 / down as f64).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as f64;
    let i0b = bessel_i0(KAISER_BETA);
    (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            let mut taps = [0.0; RESAMPLE_TAPS];
            for (j, t) in taps.iter_mut().enumerate() {
                // Tap j sits at input offset j − (half − 1) from floor(position).
                let tau = j as f64 - (half - 1.0) - frac;
                let r = tau / half;
                let w = if r.abs() <= 1.0 { bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0b } else { 0.0 };
                *t = 2.0 * cutoff * sinc(2.0 * cutoff * tau) * w;
            }
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= s);
            taps
        })
        .collect()
}

/// Reads `x` at any index, extending both ends by odd reflection.
fn reflect(x: &[f64], i: isize) -> f64 {
    let n = x.len() as isize;
    if i < 0 {
        let j = (-i).min(n - 1) as usize;
        2.0 * x[0] - x[j]
    } else if i >= n {
        let j = (i - (n - 1)).min(n - 1) as usize;
        2.0 * x[(n - 1) as usize] - x[(n - 1) as usize - j]
    } else {
        x[i as usize]
    }
}

/// Resamples one channel by the rational factor `up/down`.
pub fn resample_signal(x: &[f64], up: u64, down: u64) -> Vec<f64> {
    let taps = resample_taps(up, down);
    let out_len = ((x.len() as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;
    let half = (RESAMPLE_TAPS / 2) as isize;
    (0..out_len)
        .map(|n| {
            let num = n as u64 * down;
            let (base, phase) = ((num / up) as isize, (num % up) as usize);
            let t = &taps[phase];
            let start = base - (half - 1);
            if start >= 0 && start + RESAMPLE_TAPS as isize <= x.len() as isize {
                crate::kernels::dot(t, &x[start as usize..start as usize + RESAMPLE_TAPS])
            } else {
                (0..RESAMPLE_TAPS).map(|j| t[j] * reflect(x, start + j as isize)).sum()
            }
        })
        .collect()
}

/// Windowed-sinc polyphase resampling to `target_rate_hz`.
pub fn resample(rec: &Recording, target_rate_hz: f64) -> Result<Recording> {
    let ratio = target_rate_hz / rec.sample_rate_hz;
    if ratio == 1.0 {
        return Ok(rec.clone());
    }
    let Some((up, down)) = rational_ratio(ratio) else {
        bail!(InvalidArgument, "resampling ratio {} is not a fraction with terms <= {}", ratio, MAX_RATIO_TERM);
    };
    if up > down && down != 1 {
        bail!(InvalidArgument, "upsampling is supported for integer ratios only, got {}/{}", up, down);
    }
    let out_len = ((rec.n_samples() as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;
    if out_len == 0 {
        bail!(InvalidArgument, "resampling {} samples yields an empty recording", rec.n_samples());
    }
    let data = map_channels(rec, out_len, |x| resample_signal(x, up, down));
    with_data(rec, target_rate_hz, rec.channels.clone(), data)
}

/// Differences of neighbouring contacts on each electrode: `contact[i+1] − contact[i]`,
/// named `"E.i+1-E.i"`. Electrodes keep their order of first appearance.
pub fn bipolar_reref(rec: &Recording) -> Result<Recording> {
    let mut order: Vec<&str> = Vec::new();
    for ch in &rec.channels {
        if !order.contains(&ch.electrode_id.as_str()) {
            order.push(&ch.electrode_id);
        }
    }
    let t = rec.n_samples();
    let (mut channels, mut data) = (Vec::new(), Vec::new());
    for e in order {
        let mut contacts: Vec<(usize, usize)> =
            rec.channels.iter().enumerate().filter(|(_, c)| c.electrode_id == e).map(|(i, c)| (c.contact_index, i)).collect();
        if contacts.len() < 2 {
            bail!(InvalidArgument, "electrode `{}` has a single contact; bipolar re-referencing needs two", e);
        }
        contacts.sort_unstable();
        for (i, pair) in contacts.windows(2).enumerate() {
            let (lo, hi) = (rec.channel(pair[0].1), rec.channel(pair[1].1));
            data.extend(hi.iter().zip(lo).map(|(&h, &l)| h - l));
            channels.push(ChannelMeta { name: format!("{e}.{}-{e}.{}", i + 1, i), electrode_id: String::from(e), contact_index: i });
        }
        debug_assert_eq!(data.len(), channels.len() * t);
    }
    with_data(rec, rec.sample_rate_hz, channels, data)
}

/// `(x − mean) / std` per channel with the population standard deviation.
pub fn zscore(rec: &Recording) -> Result<Recording> {
    let t = rec.n_samples() as f64;
    let mut data = Vec::with_capacity(rec.data().len());
    for (c, meta) in rec.channels.iter().enumerate() {
        let x = rec.channel(c);
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / t;
        let var = x.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / t;
        if !(var > 0.0) {
            bail!(ZeroVariance, "channel `{}` has zero variance", meta.name);
        }
        let sd = var.sqrt();
        data.extend(x.iter().map(|&v| ((v as f64 - mean) / sd) as f32));
    }
    with_data(rec, rec.sample_rate_hz, rec.channels.clone(), data)
}

/// Band-pass, notch, resample, bipolar re-reference and z-score, in that order.
/// Disabled stages are skipped.
pub fn run_pipeline(rec: &Recording, spec: &FilterSpec) -> Result<Recording> {
    spec.validate(rec.sample_rate_hz)?;
    let mut out = rec.clone();
    if spec.filter {
        out = bandpass(&out, spec.low_hz, spec.high_hz)?;
        out = notch(&out, spec.notch_hz, spec.notch_q)?;
    }
    out = resample(&out, spec.target_rate_hz)?;
    if spec.bipolar {
        out = bipolar_reref(&out)?;
    }
    zscore(&out)
}
