//! File formats, run configuration and stage orchestration on top of
//! [`duin_core`].
//!
//! - [`recording`]: the binary recording format and its JSON manifest;
//! - [`checkpoint`]: named-tensor checkpoints with a JSON header;
//! - [`config`]: JSON run configuration merged over presets;
//! - [`runner`]: the CLI stages and ablation sweeps.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod recording;
pub mod runner;

pub use error::{Error, Result};

/// Environment variable capping worker threads; `1` gives bitwise-reproducible runs.
pub const THREADS_ENV: &str = "DUIN_THREADS";

/// Sizes the global worker pool from `DUIN_THREADS`. Only the first call in a
/// process has an effect.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config { key: THREADS_ENV.into(), msg: format!("expected a positive integer, got `{raw}`") })?;
    // Fails only if the pool already exists, which keeps the earlier size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
