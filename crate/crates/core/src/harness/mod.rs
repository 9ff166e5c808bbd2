//! Run orchestration: configs, training, checkpoints, evaluation, sweeps.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex};
pub use config::{DataSource, RunConfig};
pub use experiments::{ablate, eval_checkpoint, gen_data, parse_alphas, parse_variants, sweep_alpha, variant_config, Row, VARIANTS};
pub use train::{evaluate, train, train_with_data, Evaluation, LogRecord, RunData, RunOutcome};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "CRAB_NUM_THREADS";

/// Sizes the global worker pool from `CRAB_NUM_THREADS` when set. Returns
/// the pool size in effect. Results never depend on the pool size.
pub fn configure_threads() -> usize {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0) {
        // Fails only if the pool already exists; keep the existing one then.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}
