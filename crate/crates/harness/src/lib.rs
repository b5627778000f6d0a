//! Configuration, synthetic data, training, evaluation and verification for
//! the `mtmamba` command-line tool.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod optim;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "MTMAMBA_THREADS";

/// Sizes the global worker pool from [`THREADS_ENV`] when it is set. Has no
/// effect once the pool exists.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // Fails only if the pool was already built, in which case it stays as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
