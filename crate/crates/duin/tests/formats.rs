use std::fs;

use duin::checkpoint::{self, Checkpoint, Header, FORMAT_VERSION};
use duin::recording::{decode, encode, encode_header, load_recording, manifest_path, save_recording, HEADER_LEN};
use duin::runner::{load_vqvae, restore};
use duin::Error;
use duin_core::config::{tiny_mae, tiny_vqvae};
use duin_core::mae::Mae;
use duin_core::signal::{generate_synthetic, synthetic_channels, AnnotatedRecording, Recording, SyntheticSpec, TrialAnnotation};
use duin_core::vqvae::Vqvae;
use duin_core::{rng, ParamStore, Tensor};
use serde_json::json;

fn small_recording() -> AnnotatedRecording {
    let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
    let rec = Recording::new("s01", 250.0, synthetic_channels(2), data).unwrap();
    let trials = vec![TrialAnnotation { onset_sample: 2, n_samples: 5, label: 1 }];
    AnnotatedRecording::new(rec, trials, vec!["a".into(), "b".into()]).unwrap()
}

#[test]
fn header_arithmetic() {
    let bytes = encode(&small_recording().recording).unwrap();
    assert_eq!(HEADER_LEN, 4 + 2 + 2 + 4 + 8 + 8);
    assert_eq!(bytes.len(), 28 + 80);
    assert_eq!(&bytes[..4], b"DUIN");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 0);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[12..20].try_into().unwrap()), 250.0);
    assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 10);
    // Channel-major: the second channel starts after ten samples of the first.
    assert_eq!(f32::from_le_bytes(bytes[28 + 40..28 + 44].try_into().unwrap()), 2.0);
}

#[test]
fn recording_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.duin");
    let rec = small_recording();
    save_recording(&rec, &path).unwrap();
    assert!(manifest_path(&path).exists());
    assert_eq!(load_recording(&path).unwrap(), rec);

    let synth = generate_synthetic(&SyntheticSpec { n_trials_per_class: 3, ..Default::default() }).unwrap();
    save_recording(&synth, &path).unwrap();
    let back = load_recording(&path).unwrap();
    assert_eq!(back, synth);
    assert!(back.recording.data().iter().zip(synth.recording.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn recording_errors() {
    let rec = small_recording();
    let chans = rec.recording.channels.clone();
    let good = encode(&rec.recording).unwrap();
    let p = std::path::Path::new("x.duin");

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(p, &bad, "s".into(), chans.clone()), Err(Error::BadMagic(_))));
    let err = decode(p, &bad, "s".into(), chans.clone()).unwrap_err().to_string();
    assert!(err.contains("bad magic"), "{err}");

    let short = &good[..good.len() - 4];
    let err = decode(p, short, "s".into(), chans.clone()).unwrap_err();
    assert!(matches!(err, Error::Truncated { expected: 108, found: 104, .. }), "{err}");
    assert!(err.to_string().contains("truncated"));
    assert!(matches!(decode(p, &good[..10], "s".into(), chans.clone()), Err(Error::Truncated { .. })));

    let mut v2 = good.clone();
    v2[4] = 2;
    assert!(matches!(decode(p, &v2, "s".into(), chans.clone()), Err(Error::Version { found: 2, .. })));

    let mut nan = good.clone();
    nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode(p, &nan, "s".into(), chans.clone()), Err(Error::Core(duin_core::Error::NonFinite(_)))));

    let mut three = encode_header(3, 250.0, 10).to_vec();
    three.extend(vec![0u8; 120]);
    assert!(matches!(decode(p, &three, "s".into(), chans), Err(Error::Format { .. })));
}

#[test]
fn load_rejects_bad_manifest_trials() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.duin");
    save_recording(&small_recording(), &path).unwrap();
    let mpath = manifest_path(&path);
    let text = fs::read_to_string(&mpath).unwrap().replace("\"onset_sample\": 2", "\"onset_sample\": 9");
    fs::write(&mpath, text).unwrap();
    assert!(matches!(load_recording(&path), Err(Error::Core(duin_core::Error::OutOfRange(_)))));
}

fn header(stage: &str) -> Header {
    Header::new(stage, 3, json!({"loss": 0.5}), json!({}), json!({"seed": 1}))
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::<f32>::new();
    Vqvae::new(&mut store, &tiny_vqvae(3), &mut rng::seeded(4)).unwrap();
    let ckpt = Checkpoint::from_store(header("vqvae"), &store);
    let a = dir.path().join("a");
    ckpt.save(&a).unwrap();
    let back = Checkpoint::<f32>::load(&a).unwrap();
    assert_eq!(back.header, ckpt.header);
    assert_eq!(back.tensors.len(), store.len());
    for (p, (name, t)) in store.iter().zip(&back.tensors) {
        assert_eq!(&p.name, name);
        assert_eq!(p.value.shape(), t.shape());
        assert!(p.value.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let b = dir.path().join("b");
    back.save(&b).unwrap();
    for f in [checkpoint::PAYLOAD_FILE, checkpoint::INDEX_FILE, checkpoint::HEADER_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpoint_f64_and_index_fields() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f64>::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
    let ckpt = Checkpoint { header: header("mae"), tensors: vec![("w".into(), t.clone()), ("s".into(), Tensor::scalar(2.5))] };
    ckpt.save(dir.path()).unwrap();
    let idx: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(checkpoint::INDEX_FILE)).unwrap()).unwrap();
    assert_eq!(idx[0], json!({"name": "w", "dtype": "f64", "dims": [2, 2], "byte_offset": 0, "byte_len": 32}));
    assert_eq!(idx[1]["byte_offset"], 32);
    let back = Checkpoint::<f64>::load(dir.path()).unwrap();
    assert!(back.tensors[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f32>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let ckpt = Checkpoint { header: header("vqvae"), tensors: vec![("a".into(), t.clone())] };
    ckpt.save(dir.path()).unwrap();
    let payload = dir.path().join(checkpoint::PAYLOAD_FILE);
    fs::write(&payload, [0u8; 8]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Truncated { expected: 12, found: 8, .. })));

    ckpt.save(dir.path()).unwrap();
    let hpath = dir.path().join(checkpoint::HEADER_FILE);
    let text = fs::read_to_string(&hpath).unwrap().replace(&format!("\"format_version\": {FORMAT_VERSION}"), "\"format_version\": 99");
    fs::write(&hpath, text).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Version { found: 99, .. })));

    let dup = Checkpoint { header: header("vqvae"), tensors: vec![("a".into(), t.clone()), ("a".into(), t)] };
    assert!(dup.save(&dir.path().join("dup")).is_err());
    assert!(matches!(Checkpoint::<f32>::load(&dir.path().join("missing")), Err(Error::Prerequisite(_))));
}

#[test]
fn vqvae_checkpoint_into_mae_maps_encoder_subset() {
    let dir = tempfile::tempdir().unwrap();
    let vcfg = tiny_vqvae(3);
    let mut vstore = ParamStore::<f32>::new();
    Vqvae::new(&mut vstore, &vcfg, &mut rng::seeded(1)).unwrap();
    let h = Header::new("vqvae", 1, json!({}), serde_json::to_value(&vcfg).unwrap(), json!({}));
    Checkpoint::from_store(h, &vstore).save(dir.path()).unwrap();

    let ckpt = Checkpoint::<f32>::load(dir.path()).unwrap();
    let mut mstore = ParamStore::<f32>::new();
    Mae::new(&mut mstore, &tiny_mae(3), &mut rng::seeded(2)).unwrap();
    let unmatched = ckpt.load_into(&mut mstore).unwrap();
    assert!(!unmatched.is_empty());
    assert!(unmatched.iter().all(|n| !n.starts_with("encoder.")));
    assert!(unmatched.iter().any(|n| n.starts_with("quantizer.")));
    for p in mstore.iter() {
        match ckpt.get(&p.name) {
            Some(t) => assert!(p.name.starts_with("encoder.") && t.data() == p.value.data()),
            None => assert!(p.name.starts_with("mae.")),
        }
    }

    let (model, store) = load_vqvae(dir.path()).unwrap();
    assert_eq!(model.cfg, vcfg);
    assert!(store.iter().zip(vstore.iter()).all(|(a, b)| a.value.data() == b.value.data()));

    let mut wrong = ParamStore::<f32>::new();
    wrong.add("encoder.extra", Tensor::zeros(&[1]), true);
    assert!(restore(&mut wrong, &ckpt).is_err());
}
