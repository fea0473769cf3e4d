//! Stage execution. Every run owns its output directory and leaves
//! `resolved-config.json` and `metrics.jsonl` there beside the stage artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use duin_core::downstream::{channel_contribution, evaluate, finetune, select_top_channels, Classifier, ClassifierConfig, InitMode};
use duin_core::gradcheck::op_suite;
use duin_core::mae::{train_mae, Mae, MaeConfig};
use duin_core::quantizer::QuantizerConfig;
use duin_core::signal::{extract_trial_samples, generate_synthetic, split_dataset, AnnotatedRecording, PretrainSet, Sample, SplitSpec, TrialAnnotation};
use duin_core::vqvae::{train_vqvae, Vqvae, VqvaeConfig};
use duin_core::{preprocess, rng, ParamStore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{self, Checkpoint, Header};
use crate::config::{RunConfig, Stage};
use crate::error::{io, Error, Result};
use crate::recording::{load_recording, save_recording};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const SYNTH_FILE: &str = "recording.duin";
pub const PREPROCESSED_FILE: &str = "preprocessed.duin";
pub const CONTRIB_FILE: &str = "contrib.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const EVAL_FILE: &str = "eval.json";

/// Everything a classifier checkpoint needs to be rebuilt and re-evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierModel {
    pub classifier: ClassifierConfig,
    pub mode: InitMode,
    pub quantizer: Option<QuantizerConfig>,
    pub window_samples: usize,
    pub window_seconds: f64,
    pub split: SplitSpec,
    pub channels: Vec<String>,
}

/// Result of one stage run.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
}

/// Appends one JSON object per line.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io(path))?;
        Ok(Self { out: BufWriter::new(file), path: path.into() })
    }

    pub fn write(&mut self, line: &Value) -> Result<()> {
        writeln!(self.out, "{line}").map_err(io(&self.path))?;
        self.out.flush().map_err(io(&self.path))
    }
}

/// Runs `stage`, or one run per sweep value under `out/sweep/<key>-<value>`.
pub fn run_with_sweeps(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<Vec<(String, Outcome)>> {
    if cfg.sweep.is_empty() {
        return Ok(vec![(String::new(), run(cfg, stage, out)?)]);
    }
    let mut runs = Vec::new();
    let mut base = cfg.clone();
    base.sweep = Default::default();
    for &n in &cfg.sweep.codex_size {
        let mut c = base.clone();
        c.quantizer.n_codex = n;
        runs.push((format!("codex_size-{n}"), c));
    }
    for &d in &cfg.sweep.codex_dim {
        let mut c = base.clone();
        c.quantizer.d_codex = d;
        runs.push((format!("codex_dim-{d}"), c));
    }
    for &r in &cfg.sweep.mask_ratio {
        let mut c = base.clone();
        c.mae.mask_ratio = r;
        runs.push((format!("mask_ratio-{r}"), c));
    }
    for &e in &cfg.sweep.pretrain_epochs {
        let mut c = base.clone();
        match stage {
            Stage::TrainVqvae => c.train_vqvae.epochs = e,
            Stage::TrainMae => c.train_mae.epochs = e,
            _ => return Err(Error::Config { key: "sweep.pretrain_epochs".into(), msg: format!("stage {stage} does not pretrain") }),
        }
        runs.push((format!("pretrain_epochs-{e}"), c));
    }
    let mut outcomes = Vec::with_capacity(runs.len());
    for (name, c) in runs {
        c.validate()?;
        log::info!("sweep entry {name}");
        let dir = out.join("sweep").join(&name);
        outcomes.push((name, run(&c, stage, &dir)?));
    }
    Ok(outcomes)
}

/// Runs one stage into `out`.
pub fn run(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<Outcome> {
    if let Some(s) = cfg.stage.filter(|&s| s != stage) {
        return Err(Error::Config { key: "stage".into(), msg: format!("config names `{s}` but `{stage}` was requested") });
    }
    fs::create_dir_all(out).map_err(io(out))?;
    let mut resolved = cfg.clone();
    resolved.stage = Some(stage);
    checkpoint::write_json(&out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let echo = serde_json::to_value(&resolved).expect("config serializes");
    let mut log = MetricsLog::create(&out.join(METRICS_FILE))?;
    let mut runner = Runner { cfg: &resolved, echo, out, log: &mut log };
    let outcome = match stage {
        Stage::Synth => runner.synth(),
        Stage::Preprocess => runner.preprocess(),
        Stage::TrainVqvae => runner.train_vqvae(),
        Stage::TrainMae => runner.train_mae(),
        Stage::Finetune => runner.finetune(),
        Stage::Eval => runner.eval(),
        Stage::Contrib => runner.contrib(),
        Stage::Gradcheck => runner.gradcheck(),
    }?;
    checkpoint::write_json(&out.join("summary.json"), &outcome.summary)?;
    Ok(outcome)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    echo: Value,
    out: &'a Path,
    log: &'a mut MetricsLog,
}

/// Training callbacks return core errors; a failed metrics write aborts the run.
fn log_failure(e: Error) -> duin_core::Error {
    duin_core::Error::InvalidArgument(format!("metrics log: {e}"))
}

fn required<'p>(path: &'p Option<PathBuf>, what: &str, stage: Stage) -> Result<&'p Path> {
    path.as_deref().ok_or_else(|| Error::Prerequisite(format!("stage {stage} needs paths.{what}")))
}

/// Loads a checkpoint and checks that it came from `stage`.
pub fn load_stage_checkpoint(dir: &Path, stage: &str) -> Result<Checkpoint<f32>> {
    let ckpt = Checkpoint::<f32>::load(dir)?;
    if ckpt.header.stage != stage {
        return Err(Error::Prerequisite(format!("{} holds a `{}` checkpoint, expected `{stage}`", dir.display(), ckpt.header.stage)));
    }
    Ok(ckpt)
}

/// Fills every tensor of `store` from `ckpt`; all must be present.
pub fn restore(store: &mut ParamStore<f32>, ckpt: &Checkpoint<f32>) -> Result<()> {
    if let Some(p) = store.iter().find(|p| ckpt.get(&p.name).is_none()) {
        return Err(duin_core::Error::MissingTensor(p.name.clone()).into());
    }
    ckpt.load_into(store)?;
    Ok(())
}

fn model_of<M: serde::de::DeserializeOwned>(ckpt: &Checkpoint<f32>, dir: &Path) -> Result<M> {
    serde_json::from_value(ckpt.header.model.clone())
        .map_err(|e| Error::Format { path: dir.join(checkpoint::HEADER_FILE), msg: format!("model block: {e}") })
}

/// Rebuilds a trained tokenizer.
pub fn load_vqvae(dir: &Path) -> Result<(Vqvae, ParamStore<f32>)> {
    let ckpt = load_stage_checkpoint(dir, "vqvae")?;
    let vcfg: VqvaeConfig = model_of(&ckpt, dir)?;
    let mut store = ParamStore::new();
    let model = Vqvae::new(&mut store, &vcfg, &mut rng::seeded(0))?;
    restore(&mut store, &ckpt)?;
    Ok((model, store))
}

/// Rebuilds a fine-tuned classifier.
pub fn load_classifier(dir: &Path) -> Result<(Classifier, ParamStore<f32>, ClassifierModel, Header)> {
    let ckpt = load_stage_checkpoint(dir, "classifier")?;
    let m: ClassifierModel = model_of(&ckpt, dir)?;
    let mut store = ParamStore::new();
    let model = Classifier::new(&mut store, &m.classifier, m.mode, m.quantizer.as_ref(), m.window_samples, 0)?;
    restore(&mut store, &ckpt)?;
    Ok((model, store, m, ckpt.header))
}

/// Labeled windows split into (train, val, test).
pub fn trial_splits(rec: &AnnotatedRecording, window_seconds: f64, split: &SplitSpec) -> Result<[Vec<Sample>; 3]> {
    let samples = extract_trial_samples(&rec.recording, &rec.trials, window_seconds)?;
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    let sp = split_dataset(&labels, split)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok([pick(&sp.train), pick(&sp.val), pick(&sp.test)])
}

/// Trial annotations carried across a sample-rate change.
fn rescale_trials(trials: &[TrialAnnotation], ratio: f64, n_samples: usize) -> Vec<TrialAnnotation> {
    trials
        .iter()
        .map(|t| {
            let onset = ((t.onset_sample as f64 * ratio).round() as usize).min(n_samples.saturating_sub(1));
            let len = ((t.n_samples as f64 * ratio).round() as usize).clamp(1, n_samples - onset);
            TrialAnnotation { onset_sample: onset, n_samples: len, label: t.label }
        })
        .collect()
}

impl Runner<'_> {
    fn header(&self, stage: &str, epoch: usize, metrics: Value, model: Value) -> Header {
        Header::new(stage, epoch, metrics, model, self.echo.clone())
    }

    fn input(&self, stage: Stage) -> Result<AnnotatedRecording> {
        load_recording(required(&self.cfg.paths.recording, "recording", stage)?)
    }

    fn synth(&mut self) -> Result<Outcome> {
        let rec = generate_synthetic(&self.cfg.synth)?;
        let path = self.out.join(SYNTH_FILE);
        save_recording(&rec, &path)?;
        let summary = json!({
            "channels": rec.recording.n_channels(),
            "samples": rec.recording.n_samples(),
            "trials": rec.trials.len(),
        });
        Ok(Outcome { artifacts: vec![path], summary })
    }

    fn preprocess(&mut self) -> Result<Outcome> {
        let rec = self.input(Stage::Preprocess)?;
        let processed = preprocess::run_pipeline(&rec.recording, &self.cfg.preprocess)?;
        let ratio = processed.sample_rate_hz / rec.recording.sample_rate_hz;
        let trials = rescale_trials(&rec.trials, ratio, processed.n_samples());
        let summary = json!({ "channels": processed.n_channels(), "samples": processed.n_samples(), "sample_rate_hz": processed.sample_rate_hz });
        let out = AnnotatedRecording::new(processed, trials, rec.label_names)?;
        let path = self.out.join(PREPROCESSED_FILE);
        save_recording(&out, &path)?;
        Ok(Outcome { artifacts: vec![path], summary })
    }

    fn train_vqvae(&mut self) -> Result<Outcome> {
        let rec = self.input(Stage::TrainVqvae)?;
        let vcfg = VqvaeConfig {
            encoder: self.cfg.encoder_for(rec.recording.n_channels())?,
            quantizer: self.cfg.quantizer.clone(),
            regressor: self.cfg.regressor.clone(),
        };
        vcfg.validate()?;
        let data = PretrainSet::new(rec.recording)?;
        let mut store = ParamStore::new();
        let model = Vqvae::new(&mut store, &vcfg, &mut rng::stream(self.cfg.seed, "vqvae/init"))?;
        let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
        let log = &mut *self.log;
        let history = train_vqvae(&model, &mut store, &data, &self.cfg.train_vqvae, |e, st| {
            let line = json!({
                "epoch": e.epoch, "split": "train", "lr": e.lr, "loss": e.loss, "recon": e.recon,
                "codebook": e.codebook, "commit": e.commit, "utilization": e.utilization,
                "reseeded": e.reseeded, "collapsed": e.collapsed,
            });
            log.write(&line).map_err(log_failure)?;
            if e.collapsed {
                log::warn!("epoch {}: codex utilization {:.3} signals collapse", e.epoch, e.utilization);
            }
            if best.as_ref().is_none_or(|(_, l, _)| e.loss < *l) {
                best = Some((e.epoch, e.loss, st.clone()));
            }
            Ok(())
        })?;
        let last = history.last().expect("at least one epoch");
        let model_json = serde_json::to_value(&vcfg).expect("config serializes");
        let metrics = json!({ "loss": last.loss, "recon": last.recon, "utilization": last.utilization });
        let final_dir = self.out.join("vqvae");
        Checkpoint::from_store(self.header("vqvae", last.epoch, metrics.clone(), model_json.clone()), &store).save(&final_dir)?;
        let (be, bl, bs) = best.expect("at least one epoch");
        let best_dir = self.out.join("vqvae-best");
        Checkpoint::from_store(self.header("vqvae", be, json!({ "loss": bl }), model_json), &bs).save(&best_dir)?;
        Ok(Outcome { artifacts: vec![final_dir, best_dir], summary: json!({ "final": metrics, "best_epoch": be, "best_loss": bl }) })
    }

    fn train_mae(&mut self) -> Result<Outcome> {
        let vq_dir = required(&self.cfg.paths.vqvae, "vqvae", Stage::TrainMae)?;
        let (tokenizer, tstore) = load_vqvae(vq_dir)?;
        let rec = self.input(Stage::TrainMae)?;
        let mcfg = MaeConfig {
            encoder: self.cfg.encoder_for(rec.recording.n_channels())?,
            n_codex: tokenizer.cfg.quantizer.n_codex,
            mask_ratio: self.cfg.mae.mask_ratio,
        };
        mcfg.validate()?;
        let data = PretrainSet::new(rec.recording)?;
        let mut store = ParamStore::new();
        let model = Mae::new(&mut store, &mcfg, &mut rng::stream(self.cfg.seed, "mae/init"))?;
        let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
        let log = &mut *self.log;
        let history = train_mae(&model, &mut store, &tokenizer, &tstore, &data, &self.cfg.train_mae, |e, st| {
            let line = json!({ "epoch": e.epoch, "split": "train", "lr": e.lr, "loss": e.loss, "top1": e.accuracy });
            log.write(&line).map_err(log_failure)?;
            if best.as_ref().is_none_or(|(_, l, _)| e.loss < *l) {
                best = Some((e.epoch, e.loss, st.clone()));
            }
            Ok(())
        })?;
        let last = history.last().expect("at least one epoch");
        let model_json = serde_json::to_value(&mcfg).expect("config serializes");
        let metrics = json!({ "loss": last.loss, "top1": last.accuracy });
        let final_dir = self.out.join("mae");
        Checkpoint::from_store(self.header("mae", last.epoch, metrics.clone(), model_json.clone()), &store).save(&final_dir)?;
        let (be, bl, bs) = best.expect("at least one epoch");
        let best_dir = self.out.join("mae-best");
        Checkpoint::from_store(self.header("mae", be, json!({ "loss": bl }), model_json), &bs).save(&best_dir)?;
        Ok(Outcome { artifacts: vec![final_dir, best_dir], summary: json!({ "final": metrics, "best_epoch": be, "best_loss": bl }) })
    }

    fn finetune(&mut self) -> Result<Outcome> {
        let cfg = self.cfg;
        let rec = self.input(Stage::Finetune)?;
        let n_classes = if cfg.classifier.n_classes == 0 { rec.label_names.len() } else { cfg.classifier.n_classes };
        let ccfg = ClassifierConfig { encoder: cfg.encoder_for(rec.recording.n_channels())?, hidden: cfg.classifier.hidden, n_classes };
        let mode = cfg.classifier.init;
        let source = match mode {
            InitMode::Random => None,
            InitMode::Vqvae | InitMode::VqvaeVq => {
                let dir = required(&cfg.paths.vqvae, "vqvae", Stage::Finetune)?;
                Some(load_stage_checkpoint(dir, "vqvae")?)
            }
            InitMode::Mae => Some(load_stage_checkpoint(required(&cfg.paths.mae, "mae", Stage::Finetune)?, "mae")?),
        };
        let quantizer = match (&source, mode) {
            (Some(ckpt), InitMode::VqvaeVq) => Some(model_of::<VqvaeConfig>(ckpt, Path::new("vqvae"))?.quantizer),
            _ => None,
        };
        let window_samples = duin_core::signal::samples_for(cfg.classifier.window_seconds, rec.recording.sample_rate_hz);
        let [train, val, test] = trial_splits(&rec, cfg.classifier.window_seconds, &cfg.split)?;
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &ccfg, mode, quantizer.as_ref(), window_samples, cfg.seed)?;
        if let Some(ckpt) = &source {
            let unused = model.load_pretrained(&mut store, ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
            log::info!("{} init: {} checkpoint tensors unused", mode.as_str(), unused.len());
        }
        let log = &mut *self.log;
        let result = finetune(&model, &mut store, &train, &val, rec.recording.sample_rate_hz, &cfg.finetune, |e| {
            let lines = [
                json!({ "epoch": e.epoch, "split": "train", "top1": e.train_top1, "ce": e.train_loss, "lr": e.lr }),
                json!({ "epoch": e.epoch, "split": "val", "top1": e.val.top1, "ce": e.val.ce }),
            ];
            for l in &lines {
                log.write(l).map_err(log_failure)?;
            }
            Ok(())
        })?;
        let test_m = evaluate(&model, &result.best_store, &test, cfg.finetune.batch_size)?;
        self.log.write(&json!({ "epoch": result.best_epoch, "split": "test", "top1": test_m.top1, "ce": test_m.ce }))?;
        let cm = ClassifierModel {
            classifier: ccfg,
            mode,
            quantizer,
            window_samples,
            window_seconds: cfg.classifier.window_seconds,
            split: cfg.split.clone(),
            channels: rec.recording.channels.iter().map(|c| c.name.clone()).collect(),
        };
        let metrics = json!({ "val_top1": result.best_val_top1, "test_top1": test_m.top1, "test_ce": test_m.ce });
        let dir = self.out.join("classifier");
        let model_json = serde_json::to_value(&cm).expect("model serializes");
        Checkpoint::from_store(self.header("classifier", result.best_epoch, metrics.clone(), model_json), &result.best_store).save(&dir)?;
        Ok(Outcome { artifacts: vec![dir], summary: json!({ "best_epoch": result.best_epoch, "metrics": metrics }) })
    }

    fn eval(&mut self) -> Result<Outcome> {
        let dir = required(&self.cfg.paths.classifier, "classifier", Stage::Eval)?;
        let (model, store, m, header) = load_classifier(dir)?;
        let rec = self.input(Stage::Eval)?;
        let [_, _, test] = trial_splits(&rec, m.window_seconds, &m.split)?;
        let metrics = evaluate(&model, &store, &test, self.cfg.finetune.batch_size)?;
        let line = json!({ "epoch": header.epoch, "split": "test", "top1": metrics.top1, "ce": metrics.ce });
        self.log.write(&line)?;
        let path = self.out.join(EVAL_FILE);
        checkpoint::write_json(&path, &line)?;
        Ok(Outcome { artifacts: vec![path], summary: line })
    }

    fn contrib(&mut self) -> Result<Outcome> {
        let dir = required(&self.cfg.paths.classifier, "classifier", Stage::Contrib)?;
        let (model, store, m, header) = load_classifier(dir)?;
        let p = match &self.cfg.paths.recording {
            Some(path) => {
                let rec = load_recording(path)?;
                let [_, _, test] = trial_splits(&rec, m.window_seconds, &m.split)?;
                evaluate(&model, &store, &test, self.cfg.finetune.batch_size)?.top1
            }
            None => header.metrics.get("test_top1").and_then(Value::as_f64).unwrap_or(1.0),
        };
        let scores = channel_contribution(&store, &model.encoder, p)?;
        let order = select_top_channels(&scores, scores.len())?;
        let mut rank = vec![0usize; scores.len()];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r + 1;
        }
        let mut csv = String::from("channel_name,score,rank\n");
        for (c, s) in scores.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", m.channels[c], s, rank[c]));
        }
        let path = self.out.join(CONTRIB_FILE);
        fs::write(&path, csv).map_err(io(&path))?;
        let k = self.cfg.contrib.top_k.min(scores.len());
        let top: Vec<&str> = order[..k].iter().map(|&c| m.channels[c].as_str()).collect();
        Ok(Outcome { artifacts: vec![path], summary: json!({ "performance": p, "top_channels": top, "top_indices": &order[..k] }) })
    }

    fn gradcheck(&mut self) -> Result<Outcome> {
        let g = &self.cfg.gradcheck;
        let checks = op_suite(g.h, g.tolerance, self.cfg.seed)?;
        let rows: Vec<Value> = checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name, "checked": c.report.checked, "max_rel_error": c.report.max_rel_error,
                    "max_abs_error": c.report.max_abs_error, "passed": c.report.passed(),
                })
            })
            .collect();
        let path = self.out.join(GRADCHECK_FILE);
        checkpoint::write_json(&path, &rows)?;
        let failed: Vec<&str> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.name).collect();
        if !failed.is_empty() {
            return Err(Error::Format { path, msg: format!("gradient check failed for {}", failed.join(", ")) });
        }
        let worst = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
        Ok(Outcome { artifacts: vec![path], summary: json!({ "ops": checks.len(), "max_rel_error": worst }) })
    }
}
