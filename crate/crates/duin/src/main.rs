use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use duin::config::{RunConfig, Stage};
use duin::runner;

#[derive(Parser, Debug)]
#[command(name = "duin", version, about = "Pretrain, fine-tune and analyse sEEG word decoders")]
struct Cli {
    /// synth, preprocess, train-vqvae, train-mae, finetune, eval, contrib or gradcheck.
    stage: String,
    /// JSON run configuration; `{}` or an empty file selects the defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides paths.recording.
    #[arg(long)]
    recording: Option<PathBuf>,
    /// Overrides paths.vqvae.
    #[arg(long)]
    vqvae: Option<PathBuf>,
    /// Overrides paths.mae.
    #[arg(long)]
    mae: Option<PathBuf>,
    /// Overrides paths.classifier.
    #[arg(long)]
    classifier: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match try_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    duin::init_threads()?;
    let stage: Stage = cli.stage.parse()?;
    let mut cfg = RunConfig::from_file(&cli.config).with_context(|| format!("reading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.apply_seed();
    }
    for (slot, flag) in [
        (&mut cfg.paths.recording, cli.recording),
        (&mut cfg.paths.vqvae, cli.vqvae),
        (&mut cfg.paths.mae, cli.mae),
        (&mut cfg.paths.classifier, cli.classifier),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    cfg.validate()?;
    for (name, outcome) in runner::run_with_sweeps(&cfg, stage, &cli.out)? {
        let label = if name.is_empty() { stage.to_string() } else { format!("{stage} [{name}]") };
        println!("{label}: {}", outcome.summary);
    }
    Ok(())
}
