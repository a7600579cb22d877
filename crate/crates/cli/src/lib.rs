//! Command-line pipeline: synthesize or index frames, train the VAE,
//! encode, and run the three evaluations, with every artifact tied to the
//! configuration that produced it.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

pub use commands::{Context, Status};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Sizes the global rayon pool from `LATENT_SCOPE_THREADS` (default 1).
pub fn init_threads() -> CliResult<usize> {
    let threads = match std::env::var("LATENT_SCOPE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("LATENT_SCOPE_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(threads)
}
