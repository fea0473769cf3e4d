use duin::config::{Preset, RunConfig, Stage};
use duin::Error;
use duin_core::config::{full_encoder, TrainConfig};
use duin_core::downstream::InitMode;
use duin_core::quantizer::QuantizerConfig;
use serde_json::json;

fn key_of<T: std::fmt::Debug>(r: Result<T, Error>) -> String {
    match r {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn stage_only_gives_full_defaults() {
    let cfg = RunConfig::from_str_json(r#"{"stage": "train-vqvae"}"#).unwrap();
    assert_eq!(cfg.stage, Some(Stage::TrainVqvae));
    assert_eq!(cfg.preset, Preset::Full);
    assert_eq!(cfg.encoder, full_encoder(0));
    assert_eq!(cfg.encoder.transformer.d_model, 160);
    assert_eq!(cfg.encoder.transformer.n_layers, 8);
    assert_eq!(cfg.encoder.patch_len, 100);
    assert_eq!(cfg.quantizer, QuantizerConfig::default());
    assert_eq!((cfg.quantizer.n_codex, cfg.quantizer.d_codex), (2048, 64));
    assert_eq!(cfg.regressor.transformer.n_layers, 4);
    assert_eq!(cfg.mae.mask_ratio, 0.5);
    assert_eq!(cfg.classifier.hidden, 128);
    assert_eq!(cfg.classifier.init, InitMode::Random);
    assert_eq!(cfg.train_vqvae, TrainConfig::vqvae());
    assert_eq!(cfg.train_mae, TrainConfig::mae());
    assert_eq!(cfg.finetune, TrainConfig::classifier());
    assert_eq!(cfg.split.fractions, [0.8, 0.1, 0.1]);
    assert_eq!(RunConfig::from_str_json("").unwrap().encoder, cfg.encoder);
    assert_eq!(RunConfig::from_str_json("{}").unwrap().train_vqvae.max_lr, 3e-4);
}

#[test]
fn overrides_merge_deeply() {
    let cfg = RunConfig::from_value(json!({
        "preset": "desk",
        "seed": 7,
        "quantizer": {"beta": 0.5},
        "encoder": {"transformer": {"n_layers": 2}},
        "train_mae": {"epochs": 5},
    }))
    .unwrap();
    assert_eq!(cfg.quantizer.beta, 0.5);
    assert_eq!(cfg.quantizer.n_codex, 256);
    assert_eq!(cfg.encoder.transformer.n_layers, 2);
    assert_eq!(cfg.encoder.transformer.d_model, 64);
    assert_eq!(cfg.train_mae.epochs, 5);
    assert_eq!(cfg.train_mae.weight_decay, 0.05);
    assert!([&cfg.train_vqvae, &cfg.train_mae, &cfg.finetune].iter().all(|t| t.seed == 7));
}

#[test]
fn rejections_name_the_key() {
    assert_eq!(key_of(RunConfig::from_value(json!({"lr_max": 1e-3}))), "lr_max");
    assert_eq!(key_of(RunConfig::from_value(json!({"train_vqvae": {"lr_max": 1e-3}}))), "train_vqvae.lr_max");
    assert_eq!(key_of(RunConfig::from_value(json!({"encoder": {"transformer": {"depth": 3}}}))), "encoder.transformer.depth");
    assert_eq!(key_of(RunConfig::from_value(json!({"train_mae": {"seed": 3}}))), "train_mae.seed");
    assert_eq!(key_of(RunConfig::from_value(json!({"mae": {"mask_ratio": 1.5}}))), "mae.mask_ratio");
    assert_eq!(key_of(RunConfig::from_value(json!({"quantizer": {"n_codex": "big"}}))), "quantizer.n_codex");
    assert_eq!(key_of(RunConfig::from_value(json!({"encoder": {"convs": [{"out_channels": 4}]}}))), "encoder.convs[0]");
    assert_eq!(key_of(RunConfig::from_value(json!({"stage": "train"}))), "stage");
    assert_eq!(key_of(RunConfig::from_value(json!({"preset": "huge"}))), "preset");
    assert_eq!(key_of(RunConfig::from_value(json!({"paths": {"vqvae": "/no/such/dir"}}))), "paths.vqvae");
    assert_eq!(key_of(RunConfig::from_value(json!({"finetune": {"warmup_epochs": 500}}))), "finetune");
    assert_eq!(key_of(RunConfig::from_value(json!([1, 2]))), "<root>");
    let msg = RunConfig::from_value(json!({"lr_max": 1})).unwrap_err().to_string();
    assert!(msg.contains("lr_max") && msg.contains("unknown key"), "{msg}");
}

#[test]
fn resolved_config_round_trips() {
    let cfg = RunConfig::from_value(json!({"preset": "tiny", "seed": 3, "sweep": {"codex_size": [512, 2048]}})).unwrap();
    let mut value = serde_json::to_value(&cfg).unwrap();
    for block in ["train_vqvae", "train_mae", "finetune"] {
        value[block].as_object_mut().unwrap().remove("seed");
    }
    assert_eq!(RunConfig::from_value(value).unwrap(), cfg);
}

#[test]
fn encoder_channels_follow_the_recording() {
    let cfg = RunConfig::from_str_json("{}").unwrap();
    assert_eq!(cfg.encoder_for(12).unwrap().n_channels, 12);
    let fixed = RunConfig::from_value(json!({"encoder": {"n_channels": 10}})).unwrap();
    assert!(fixed.encoder_for(10).is_ok());
    assert_eq!(key_of(fixed.encoder_for(8)), "encoder.n_channels");
}

#[test]
fn stage_names() {
    for s in Stage::ALL {
        assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        assert_eq!(serde_json::to_value(s).unwrap(), json!(s.as_str()));
    }
}
