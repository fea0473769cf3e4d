//! Recordings, trials, samples and the seeded synthetic corpus.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Pretraining segment length in seconds.
pub const SEGMENT_SECONDS: f64 = 8.0;
/// Hop between consecutive pretraining segments in seconds.
pub const SEGMENT_HOP_SECONDS: f64 = 4.0;
/// Window cut from a segment when a pretraining sample is fetched.
pub const PRETRAIN_WINDOW_SECONDS: f64 = 4.0;
/// Labeled trial window.
pub const TRIAL_WINDOW_SECONDS: f64 = 3.0;
/// Largest shift applied by trial augmentation.
pub const MAX_SHIFT_SECONDS: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelMeta {
    pub name: String,
    pub electrode_id: String,
    pub contact_index: usize,
}

/// A multichannel recording stored channel-major (`C×T`).
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channels: Vec<ChannelMeta>,
    data: Vec<f32>,
    n_samples: usize,
}

impl Recording {
    pub fn new(subject_id: impl Into<String>, sample_rate_hz: f64, channels: Vec<ChannelMeta>, data: Vec<f32>) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            bail!(InvalidArgument, "sample rate must be positive, got {}", sample_rate_hz);
        }
        if channels.is_empty() || !data.len().is_multiple_of(channels.len()) {
            bail!(Shape, "{} values do not fill {} channels", data.len(), channels.len());
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "recording data (channel {}, sample {})", i / (data.len() / channels.len()).max(1), i % (data.len() / channels.len()).max(1));
        }
        validate_channels(&channels)?;
        let n_samples = data.len() / channels.len();
        Ok(Self { subject_id: subject_id.into(), sample_rate_hz, channels, data, n_samples })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn into_parts(self) -> (String, f64, Vec<ChannelMeta>, Vec<f32>) {
        (self.subject_id, self.sample_rate_hz, self.channels, self.data)
    }

    /// Number of samples spanning `seconds` at this rate.
    pub fn samples_for(&self, seconds: f64) -> usize {
        samples_for(seconds, self.sample_rate_hz)
    }

    /// Copy of `[start, start+len)` on every channel as a `C×len` sample.
    pub fn window(&self, start: usize, len: usize, label: Option<usize>) -> Result<Sample> {
        if start + len > self.n_samples {
            bail!(OutOfRange, "window [{}, {}) exceeds recording length {}", start, start + len, self.n_samples);
        }
        let mut data = Vec::with_capacity(self.n_channels() * len);
        for c in 0..self.n_channels() {
            data.extend_from_slice(&self.channel(c)[start..start + len]);
        }
        Ok(Sample { data: Tensor::new(&[self.n_channels(), len], data)?, label, source_offset: start })
    }
}

pub fn samples_for(seconds: f64, rate: f64) -> usize {
    (seconds * rate).round() as usize
}

fn validate_channels(channels: &[ChannelMeta]) -> Result<()> {
    let mut per_electrode: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for ch in channels {
        per_electrode.entry(ch.electrode_id.as_str()).or_default().push(ch.contact_index);
    }
    for (e, mut contacts) in per_electrode {
        contacts.sort_unstable();
        if contacts.iter().enumerate().any(|(i, &c)| i != c) {
            bail!(InvalidArgument, "electrode `{}` contacts {:?} are not unique and contiguous from 0", e, contacts);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialAnnotation {
    pub onset_sample: usize,
    pub n_samples: usize,
    pub label: usize,
}

/// A recording with its trial annotations and label vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedRecording {
    pub recording: Recording,
    pub trials: Vec<TrialAnnotation>,
    pub label_names: Vec<String>,
}

impl AnnotatedRecording {
    pub fn new(recording: Recording, trials: Vec<TrialAnnotation>, label_names: Vec<String>) -> Result<Self> {
        for t in &trials {
            if t.n_samples == 0 || t.onset_sample + t.n_samples > recording.n_samples() {
                bail!(OutOfRange, "trial at {} (+{}) exceeds recording length {}", t.onset_sample, t.n_samples, recording.n_samples());
            }
            if t.label >= label_names.len() {
                bail!(OutOfRange, "trial label {} outside {} label names", t.label, label_names.len());
            }
        }
        Ok(Self { recording, trials, label_names })
    }
}

/// A fixed-length `C×T` window, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: Tensor<f32>,
    pub label: Option<usize>,
    pub source_offset: usize,
}

impl Sample {
    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn energy(&self) -> f64 {
        self.data.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Sample> {
        let (c, t) = (self.n_channels(), self.len());
        let mut data = Vec::with_capacity(channels.len() * t);
        for &ch in channels {
            if ch >= c {
                bail!(OutOfRange, "channel {} of {}", ch, c);
            }
            data.extend_from_slice(&self.data.data()[ch * t..(ch + 1) * t]);
        }
        Ok(Sample { data: Tensor::new(&[channels.len(), t], data)?, ..self.clone() })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub n_channels: usize,
    pub sample_rate_hz: f64,
    pub n_classes: usize,
    pub n_trials_per_class: usize,
    pub informative_channels: Vec<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_channels: 10,
            sample_rate_hz: 1000.0,
            n_classes: 8,
            n_trials_per_class: 9,
            informative_channels: vec![2, 5],
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Contacts per synthetic electrode.
const SYNTH_CONTACTS: usize = 5;
/// Background before each synthetic trial: four trial lengths of filler plus the minimum gap.
const SYNTH_LEAD_SECONDS: f64 = 4.0 * TRIAL_WINDOW_SECONDS + 0.5;

/// Frequencies (Hz) and phases (rad) of each class template.
pub fn class_templates(n_classes: usize, seed: u64) -> Vec<[(f64, f64); 2]> {
    let mut rng = rng::stream(seed, "synthetic/templates");
    (0..n_classes)
        .map(|_| {
            let mut tone = || (rng.random_range(4.0..40.0), rng.random_range(0.0..core::f64::consts::TAU));
            [tone(), tone()]
        })
        .collect()
}

/// Channel layout of the synthetic corpus: electrodes `A`, `B`, ... of five contacts,
/// the remainder folded into the last electrode so that each has at least two.
pub fn synthetic_channels(n_channels: usize) -> Vec<ChannelMeta> {
    let mut out = Vec::with_capacity(n_channels);
    let n_electrodes = (n_channels / SYNTH_CONTACTS).max(1);
    for c in 0..n_channels {
        let e = (c / SYNTH_CONTACTS).min(n_electrodes - 1);
        let contact = c - e * SYNTH_CONTACTS;
        let name = char::from(b'A' + (e % 26) as u8);
        let electrode_id = if e < 26 { format!("{name}") } else { format!("{name}{}", e / 26) };
        out.push(ChannelMeta { name: format!("{electrode_id}.{contact}"), electrode_id, contact_index: contact });
    }
    out
}

/// Generates the synthetic corpus described by `spec`.
///
/// Background is white Gaussian noise; each trial adds its class template (two
/// sinusoids) to the informative channels. Every trial is preceded by 12.5 s of
/// background, so non-task material is more than four times the trial time.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<AnnotatedRecording> {
    if spec.n_classes < 2 {
        bail!(InvalidArgument, "n_classes must be at least 2, got {}", spec.n_classes);
    }
    if spec.n_channels == 0 || spec.n_trials_per_class == 0 {
        bail!(InvalidArgument, "n_channels and n_trials_per_class must be positive");
    }
    if let Some(&c) = spec.informative_channels.iter().find(|&&c| c >= spec.n_channels) {
        bail!(OutOfRange, "informative channel {} of {}", c, spec.n_channels);
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.sample_rate_hz > 0.0) {
        bail!(InvalidArgument, "noise_sigma must be >= 0 and sample_rate_hz > 0");
    }
    let rate = spec.sample_rate_hz;
    let trial_len = samples_for(TRIAL_WINDOW_SECONDS, rate);
    let lead = samples_for(SYNTH_LEAD_SECONDS, rate);
    let tail = samples_for(0.5, rate);

    let mut order: Vec<usize> = (0..spec.n_classes).flat_map(|k| core::iter::repeat_n(k, spec.n_trials_per_class)).collect();
    order.shuffle(&mut rng::stream(spec.seed, "synthetic/order"));

    let total = order.len() * (lead + trial_len) + tail;
    let mut data = vec![0f32; spec.n_channels * total];
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        let mut rng = rng::stream(spec.seed, "synthetic/noise");
        for v in data.iter_mut() {
            *v = noise.sample(&mut rng) as f32;
        }
    }

    let templates = class_templates(spec.n_classes, spec.seed);
    let mut trials = Vec::with_capacity(order.len());
    for (i, &label) in order.iter().enumerate() {
        let onset = i * (lead + trial_len) + lead;
        trials.push(TrialAnnotation { onset_sample: onset, n_samples: trial_len, label });
        let tones = &templates[label];
        for t in 0..trial_len {
            let time = t as f64 / rate;
            let v: f64 = tones.iter().map(|&(f, ph)| (core::f64::consts::TAU * f * time + ph).sin()).sum();
            for &c in &spec.informative_channels {
                data[c * total + onset + t] += v as f32;
            }
        }
    }

    let recording = Recording::new("synthetic", rate, synthetic_channels(spec.n_channels), data)?;
    let label_names = (0..spec.n_classes).map(|k| format!("class{k}")).collect();
    AnnotatedRecording::new(recording, trials, label_names)
}

/// Start and length (in samples) of a pretraining segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

/// Cuts the recording into 8 s segments every 4 s.
pub fn segment_pretrain(rec: &Recording) -> Result<Vec<Segment>> {
    let len = rec.samples_for(SEGMENT_SECONDS);
    let hop = rec.samples_for(SEGMENT_HOP_SECONDS);
    if rec.n_samples() < len || hop == 0 {
        bail!(InvalidArgument, "recording of {:.3} s is shorter than one {} s segment", rec.duration_seconds(), SEGMENT_SECONDS);
    }
    let count = (rec.n_samples() - len) / hop + 1;
    Ok((0..count).map(|i| Segment { offset: i * hop, len }).collect())
}

/// The 4 s window starting `start` samples into `segment`.
pub fn pretrain_window(rec: &Recording, segment: Segment, start: usize) -> Result<Sample> {
    let win = rec.samples_for(PRETRAIN_WINDOW_SECONDS);
    if start + win > segment.len {
        bail!(OutOfRange, "window start {} leaves less than {} samples in segment of {}", start, win, segment.len);
    }
    rec.window(segment.offset + start, win, None)
}

/// Draws a 4 s window from `segment` with a start offset uniform in `[0, 4 s]`.
pub fn fetch_pretrain_sample<R: Rng + ?Sized>(rec: &Recording, segment: Segment, rng: &mut R) -> Result<Sample> {
    let win = rec.samples_for(PRETRAIN_WINDOW_SECONDS);
    let max_start = segment.len.saturating_sub(win);
    pretrain_window(rec, segment, rng.random_range(0..=max_start))
}

/// A recording cut into pretraining segments.
#[derive(Clone, Debug)]
pub struct PretrainSet {
    pub recording: Recording,
    pub segments: Vec<Segment>,
}

impl PretrainSet {
    pub fn new(recording: Recording) -> Result<Self> {
        let segments = segment_pretrain(&recording)?;
        Ok(Self { recording, segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// One randomly offset window per segment, in shuffled segment order.
    pub fn draw_epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Sample>> {
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        order.shuffle(rng);
        order.into_iter().map(|i| fetch_pretrain_sample(&self.recording, self.segments[i], rng)).collect()
    }
}

/// One labeled window per trial, starting at the trial onset.
pub fn extract_trial_samples(rec: &Recording, trials: &[TrialAnnotation], window_seconds: f64) -> Result<Vec<Sample>> {
    let win = rec.samples_for(window_seconds);
    trials.iter().map(|t| rec.window(t.onset_sample, win, Some(t.label))).collect()
}

/// Shifts every channel by `shift` samples (positive = right), zero-filling the vacated span.
pub fn shift_sample(sample: &Sample, shift: isize) -> Sample {
    let t = sample.len();
    let s = shift.unsigned_abs().min(t);
    let mut out = sample.clone();
    for (dst, src) in out.data.data_mut().chunks_mut(t).zip(sample.data.data().chunks(t)) {
        if shift >= 0 {
            dst[..s].iter_mut().for_each(|v| *v = 0.0);
            dst[s..].copy_from_slice(&src[..t - s]);
        } else {
            dst[..t - s].copy_from_slice(&src[s..]);
            dst[t - s..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Random shift of up to 0.3 s in a random direction.
pub fn augment_trial<R: Rng + ?Sized>(sample: &Sample, sample_rate_hz: f64, rng: &mut R) -> Sample {
    let max = samples_for(MAX_SHIFT_SECONDS, sample_rate_hz);
    let s = rng.random_range(0..=max) as isize;
    let right: bool = rng.random();
    shift_sample(sample, if right { s } else { -s })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.8, 0.1, 0.1], seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|&f| !(f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            bail!(InvalidArgument, "split fractions {:?} must be positive and sum to 1", self.fractions);
        }
        Ok(())
    }
}

/// Indices of the train, validation and test partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified seeded split: within each class the validation and test counts
/// are the rounded target fractions, the rest goes to training.
pub fn split_dataset(labels: &[Option<usize>], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if labels.len() < 10 {
        bail!(InvalidArgument, "need at least 10 samples to split, got {}", labels.len());
    }
    let mut by_class: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng::stream(spec.seed, "split");
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (class, mut idx) in by_class {
        if idx.len() < 3 {
            bail!(InvalidArgument, "class {:?} has only {} samples (need 3)", class, idx.len());
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (spec.fractions[1] * n).round() as usize;
        let n_test = (spec.fractions[2] * n).round() as usize;
        let n_train = idx.len() - n_val - n_test;
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
