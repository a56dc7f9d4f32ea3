//! Files, configuration and the command-line layer around `runmax-core`.
//!
//! Numeric outputs are CSV with 17 significant digits, reports and
//! manifests are JSON, and simulated path batches use a flat binary layout.
//! Every output depends only on the configuration and the seed; the thread
//! count changes wall-clock time and nothing else.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod selftest;

pub use error::{AppError, AppResult};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "RUNMAX_OUT_DIR";

/// Sizes the global worker pool. Later calls are ignored.
pub fn configure_threads(n: Option<usize>) {
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
