//! Corpus, segmentation, augmentation and split properties.

use std::f64::consts::PI;

use duin_core::rng;
use duin_core::signal::*;
use proptest::prelude::*;

fn flat(seconds: f64, rate: f64) -> Recording {
    let n = (seconds * rate) as usize;
    Recording::new("t", rate, synthetic_channels(2), (0..2 * n).map(|i| (i % 97) as f32).collect()).unwrap()
}

#[test]
fn segment_count_by_enumeration() {
    for (seconds, rate) in [(60.0, 1000.0), (16.0, 1000.0), (8.0, 250.0), (33.3, 100.0)] {
        let rec = flat(seconds, rate);
        let (len, hop) = ((8.0 * rate) as usize, (4.0 * rate) as usize);
        let brute: Vec<usize> = (0..rec.n_samples()).step_by(hop).filter(|s| s + len <= rec.n_samples()).collect();
        let segs = segment_pretrain(&rec).unwrap();
        assert_eq!(segs.iter().map(|s| s.offset).collect::<Vec<_>>(), brute);
        assert!(segs.iter().all(|s| s.len == len));
    }
    assert_eq!(segment_pretrain(&flat(60.0, 1000.0)).unwrap().len(), 14);
}

#[test]
fn pretrain_offsets_are_uniform() {
    // Kolmogorov-Smirnov against U[0, 4 s]; the 1% critical value is 1.628/sqrt(n).
    let rate = 100.0;
    let rec = flat(8.0, rate);
    let seg = segment_pretrain(&rec).unwrap()[0];
    let max = 4.0 * rate;
    let mut r = rng::seeded(17);
    let n = 10_000;
    let mut u: Vec<f64> = (0..n)
        .map(|_| {
            let s = fetch_pretrain_sample(&rec, seg, &mut r).unwrap();
            assert_eq!(s.len(), 400);
            // Continuity correction for the discrete grid 0..=max.
            (s.source_offset as f64 + 0.5) / (max + 1.0)
        })
        .collect();
    u.sort_by(f64::total_cmp);
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
        .fold(0.0, f64::max);
    assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
}

/// Periodogram power in [lo, hi] Hz by direct DFT.
fn band_power(x: &[f32], rate: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for k in 1..n / 2 {
        let f = k as f64 * rate / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let w = 2.0 * PI * (k * t) as f64 / n as f64;
            re += v as f64 * w.cos();
            im -= v as f64 * w.sin();
        }
        total += (re * re + im * im) / n as f64;
    }
    total
}

#[test]
fn informative_channels_carry_trial_power() {
    let spec = SyntheticSpec { n_classes: 2, n_trials_per_class: 3, sample_rate_hz: 200.0, ..Default::default() };
    let ann = generate_synthetic(&spec).unwrap();
    let samples = extract_trial_samples(&ann.recording, &ann.trials, 3.0).unwrap();
    let t = samples[0].len();
    let mut power = vec![0.0; spec.n_channels];
    for s in &samples {
        for (c, p) in power.iter_mut().enumerate() {
            *p += band_power(&s.data.data()[c * t..(c + 1) * t], spec.sample_rate_hz, 4.0, 40.0);
        }
    }
    let quiet = (0..spec.n_channels).filter(|c| ![2, 5].contains(c)).map(|c| power[c]).fold(0.0, f64::max);
    assert!(power[2] > quiet && power[5] > quiet, "{power:?}");
}

#[test]
fn filler_dominates_the_recording() {
    let ann = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let trial: usize = ann.trials.iter().map(|t| t.n_samples).sum();
    assert!(ann.recording.n_samples() - trial >= 4 * trial);
    let mut ends: Vec<(usize, usize)> = ann.trials.iter().map(|t| (t.onset_sample, t.onset_sample + t.n_samples)).collect();
    ends.sort_unstable();
    assert!(ends.windows(2).all(|w| w[1].0 >= w[0].1 + 500));
}

#[test]
fn stratified_split_of_61_words() {
    let labels: Vec<Option<usize>> = (0..61 * 50).map(|i| Some(i % 61)).collect();
    let split = split_dataset(&labels, &SplitSpec::default()).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (61 * 40, 61 * 5, 61 * 5));
    for c in 0..61 {
        assert_eq!(split.test.iter().filter(|&&i| labels[i] == Some(c)).count(), 5);
    }
}

#[test]
fn trial_count_is_preserved() {
    let ann = generate_synthetic(&SyntheticSpec { n_classes: 61, n_trials_per_class: 2, sample_rate_hz: 100.0, ..Default::default() }).unwrap();
    assert_eq!(extract_trial_samples(&ann.recording, &ann.trials[..122], 3.0).unwrap().len(), 122);
    assert!(extract_trial_samples(&ann.recording, &[], 3.0).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_input(n_classes in 2usize..6, per in 3usize..12, seed in 0u64..1000) {
        let labels: Vec<Option<usize>> = (0..n_classes * per).map(|i| Some(i % n_classes)).collect();
        prop_assume!(labels.len() >= 10);
        let s = split_dataset(&labels, &SplitSpec { fractions: [0.8, 0.1, 0.1], seed }).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..n_classes {
            let count = |ix: &[usize]| ix.iter().filter(|&&i| labels[i] == Some(c)).count() as f64;
            prop_assert!((count(&s.val) - 0.1 * per as f64).abs() <= 1.0);
            prop_assert!((count(&s.test) - 0.1 * per as f64).abs() <= 1.0);
        }
        prop_assert_eq!(split_dataset(&labels, &SplitSpec { fractions: [0.8, 0.1, 0.1], seed }).unwrap(), s);
    }

    #[test]
    fn augmentation_keeps_shape_and_label(seed in 0u64..10_000, label in 0usize..8) {
        let rec = flat(3.0, 100.0);
        let s = rec.window(0, 300, Some(label)).unwrap();
        let a = augment_trial(&s, 100.0, &mut rng::seeded(seed));
        prop_assert_eq!(a.data.shape(), s.data.shape());
        prop_assert_eq!(a.label, Some(label));
        prop_assert!(a.energy() <= s.energy());
    }

    #[test]
    fn shift_zero_fills_exactly(shift in -30isize..=30) {
        let rec = flat(3.0, 100.0);
        let s = rec.window(0, 300, Some(0)).unwrap();
        let a = shift_sample(&s, shift);
        let k = shift.unsigned_abs();
        for row in a.data.data().chunks(300) {
            let pad = if shift >= 0 { &row[..k] } else { &row[300 - k..] };
            prop_assert!(pad.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn synthesis_is_a_function_of_the_spec(seed in 0u64..50) {
        let spec = SyntheticSpec { n_classes: 2, n_trials_per_class: 1, sample_rate_hz: 100.0, seed, ..Default::default() };
        prop_assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }
}
