//! Recording files: a fixed 28-byte little-endian header followed by the
//! channel-major `f32` payload, plus a JSON manifest beside it.
//!
//! Header layout: `"DUIN"` | version `u16` | flags `u16` | channels `u32` |
//! sample rate `f64` | samples `u64`.

use std::fs;
use std::path::{Path, PathBuf};

use duin_core::signal::{AnnotatedRecording, ChannelMeta, Recording, TrialAnnotation};
use serde::{Deserialize, Serialize};

use crate::error::{io, json, Error, Result};

pub const MAGIC: [u8; 4] = *b"DUIN";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

/// Sidecar metadata; the binary file carries only numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subject_id: String,
    pub channels: Vec<ChannelMeta>,
    pub trials: Vec<TrialAnnotation>,
    pub label_names: Vec<String>,
}

/// `rec.duin` keeps its manifest in `rec.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_header(n_channels: u32, sample_rate_hz: f64, n_samples: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC);
    h[4..6].copy_from_slice(&VERSION.to_le_bytes());
    h[6..8].copy_from_slice(&0u16.to_le_bytes());
    h[8..12].copy_from_slice(&n_channels.to_le_bytes());
    h[12..20].copy_from_slice(&sample_rate_hz.to_le_bytes());
    h[20..28].copy_from_slice(&n_samples.to_le_bytes());
    h
}

/// Serialized bytes of the binary file.
pub fn encode(rec: &Recording) -> Result<Vec<u8>> {
    if let Some(i) = rec.data().iter().position(|v| !v.is_finite()) {
        return Err(duin_core::Error::NonFinite(format!("recording sample {i}")).into());
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rec.data().len());
    out.extend_from_slice(&encode_header(rec.n_channels() as u32, rec.sample_rate_hz, rec.n_samples() as u64));
    for v in rec.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the binary file; channel names come from `channels`.
pub fn decode(path: &Path, bytes: &[u8], subject_id: String, channels: Vec<ChannelMeta>) -> Result<Recording> {
    if bytes.len() < 4 || bytes[0..4] != MAGIC {
        return Err(Error::BadMagic(path.into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.into(), expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version { path: path.into(), found: version.into(), supported: VERSION.into() });
    }
    let n_channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let rate = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n_samples = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expected = n_channels
        .checked_mul(n_samples)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Format { path: path.into(), msg: "header dimensions overflow".into() })?;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() as u64 });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Format { path: path.into(), msg: format!("{} trailing bytes", bytes.len() as u64 - expected) });
    }
    if channels.len() as u64 != n_channels {
        return Err(Error::Format { path: path.into(), msg: format!("header has {n_channels} channels, manifest lists {}", channels.len()) });
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Recording::new(subject_id, rate, channels, data)?)
}

/// Writes `path` and its manifest.
pub fn save_recording(rec: &AnnotatedRecording, path: &Path) -> Result<()> {
    let bytes = encode(&rec.recording)?;
    let manifest = Manifest {
        subject_id: rec.recording.subject_id.clone(),
        channels: rec.recording.channels.clone(),
        trials: rec.trials.clone(),
        label_names: rec.label_names.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, bytes).map_err(io(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(json(&mpath))?;
    fs::write(&mpath, text).map_err(io(&mpath))
}

pub fn load_recording(path: &Path) -> Result<AnnotatedRecording> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(json(&mpath))?;
    let bytes = fs::read(path).map_err(io(path))?;
    let rec = decode(path, &bytes, manifest.subject_id, manifest.channels)?;
    Ok(AnnotatedRecording::new(rec, manifest.trials, manifest.label_names)?)
}
