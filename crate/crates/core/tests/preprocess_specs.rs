//! Amplitude and phase of the filter chain measured on sinusoids.

use std::f64::consts::PI;

use duin_core::preprocess::{bandpass, bipolar_reref, notch, zscore, FilterSpec};
use duin_core::signal::{synthetic_channels, ChannelMeta, Recording};
use proptest::prelude::*;

const RATE: f64 = 1000.0;

fn tone(freq: f64, phase: f64, seconds: f64) -> Vec<f32> {
    (0..(seconds * RATE) as usize).map(|i| (2.0 * PI * freq * i as f64 / RATE + phase).sin() as f32).collect()
}

fn band_and_notch(x: Vec<f32>) -> Vec<f64> {
    let spec = FilterSpec::default();
    let rec = Recording::new("t", RATE, synthetic_channels(1), x).unwrap();
    let y = notch(&bandpass(&rec, spec.low_hz, spec.high_hz).unwrap(), spec.notch_hz, spec.notch_q).unwrap();
    y.data().iter().map(|&v| v as f64).collect()
}

/// Amplitude and phase of the `freq` component over the central whole cycles.
fn fit(y: &[f64], freq: f64) -> (f64, f64) {
    let period = RATE / freq;
    let cycles = ((y.len() as f64 / 2.0) / period).floor().max(1.0);
    let n = (cycles * period).round() as usize;
    let start = (y.len() - n) / 2;
    let (mut s, mut c) = (0.0, 0.0);
    for (i, &v) in y[start..start + n].iter().enumerate() {
        let w = 2.0 * PI * freq * (start + i) as f64 / RATE;
        s += v * w.sin();
        c += v * w.cos();
    }
    let (s, c) = (2.0 * s / n as f64, 2.0 * c / n as f64);
    ((s * s + c * c).sqrt(), c.atan2(s))
}

fn gain_db(freq: f64, seconds: f64) -> f64 {
    20.0 * fit(&band_and_notch(tone(freq, 0.3, seconds)), freq).0.log10()
}

#[test]
fn passband_and_stopband_amplitudes() {
    let pass = gain_db(10.0, 20.0);
    assert!(pass.abs() <= 1.0, "10 Hz: {pass:.3} dB");
    let line = gain_db(50.0, 20.0);
    assert!(line <= -20.0, "50 Hz: {line:.2} dB");
    let slow = gain_db(0.1, 200.0);
    assert!(slow - pass <= -20.0, "0.1 Hz: {slow:.2} dB");
    let fast = gain_db(400.0, 20.0);
    assert!(fast - pass <= -20.0, "400 Hz: {fast:.2} dB");
}

#[test]
fn forward_backward_filtering_has_zero_phase() {
    for freq in [5.0, 10.0, 30.0, 120.0] {
        let (_, phase_in) = fit(&tone(freq, 0.7, 20.0).iter().map(|&v| v as f64).collect::<Vec<_>>(), freq);
        let (_, phase_out) = fit(&band_and_notch(tone(freq, 0.7, 20.0)), freq);
        assert!((phase_out - phase_in).abs() < 1e-2, "{freq} Hz: {phase_in} vs {phase_out}");
    }
}

#[test]
fn zscore_moments() {
    let rows: Vec<f32> = (0..3 * 5000).map(|i| ((i * 7919) % 1013) as f32 * 0.01 + (i / 5000) as f32 * 40.0).collect();
    let z = zscore(&Recording::new("t", RATE, synthetic_channels(3), rows).unwrap()).unwrap();
    for c in 0..3 {
        let x: Vec<f64> = z.channel(c).iter().map(|&v| v as f64).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt();
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((sd - 1.0).abs() < 1e-4, "sd {sd}");
    }
}

fn electrode(contacts: usize) -> Vec<ChannelMeta> {
    (0..contacts).map(|i| ChannelMeta { name: format!("A{i}"), electrode_id: "A".into(), contact_index: i }).collect()
}

proptest! {
    #[test]
    fn bipolar_cancels_common_mode(
        base in prop::collection::vec(-100i32..100, 4 * 16),
        common in prop::collection::vec(-100i32..100, 16),
    ) {
        // Integer-valued samples keep every sum exact in f32.
        let clean: Vec<f32> = base.iter().map(|&v| v as f32).collect();
        let shifted: Vec<f32> = clean.iter().enumerate().map(|(i, &v)| v + common[i % 16] as f32).collect();
        let a = bipolar_reref(&Recording::new("t", RATE, electrode(4), clean).unwrap()).unwrap();
        let b = bipolar_reref(&Recording::new("t", RATE, electrode(4), shifted).unwrap()).unwrap();
        prop_assert_eq!(a.n_channels(), 3);
        prop_assert_eq!(a.data(), b.data());
    }
}
