//! `crab`: data generation, training, evaluation, α sweeps and ablations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crab_core::data::{Split, SynthSpec};
use crab_core::harness::{self, Row, RunConfig};
use crab_core::Result;

#[derive(Parser)]
#[command(name = "crab", version, about = "Bimodal emotion classifier with multi-layer contrastive supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bimodal corpus (manifest, shards, metadata).
    GenData {
        /// JSON synthetic-data spec.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        /// Built-in spec: meld-like, iemocap-like or balanced.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the spec or preset.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from a run config; writes checkpoints, run log and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        /// Checkpoint directory (holding index.json and params.crft).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory; defaults to `<checkpoint>/eval/<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// One training run per α on shared data, plus summary.csv.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        /// `start:stop:step` or a comma list.
        #[arg(long)]
        alphas: String,
    },
    /// One training run per objective variant, plus ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "CE,CE+MPCL,MLS+CE,MLCS,MLCS_SCL,MLCS_flat_lr")]
        variants: String,
    },
}

fn print_rows(key: &str, rows: &[Row]) {
    println!("{key:>14} {:>8} {:>8} {:>8} {:>6}", "WAR", "UAR", "MacroF1", "best");
    for r in rows {
        let s = r.scores();
        println!("{:>14} {:>8.4} {:>8.4} {:>8.4} {:>6}", r.name, s.war, s.uar, s.macro_f1, r.outcome.best_epoch);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, preset, out, seed } => {
            let mut spec = match (spec, preset) {
                (Some(path), _) => SynthSpec::load(&path)?,
                (None, Some(name)) => SynthSpec::preset(&name, 0)?,
                (None, None) => unreachable!("clap requires one of --spec/--preset"),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let g = harness::gen_data(&spec, &out)?;
            println!("wrote {} utterances over {} classes to {}", g.manifest.records.len(), g.labels.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = harness::train(&cfg)?;
            let fin = outcome.final_record();
            println!("best epoch {} (dev UAR {:.4}); outputs in {}", fin.best_epoch, fin.best_dev_uar, cfg.output_dir.display());
            for (split, r) in &fin.eval {
                println!("{split}: WAR {:.4} UAR {:.4} Macro-F1 {:.4}", r.war, r.uar, r.macro_f1);
            }
        }
        Command::Eval { checkpoint, manifest, split, out, batch_size } => {
            let out = out.unwrap_or_else(|| checkpoint.join("eval").join(split.name()));
            let ev = harness::eval_checkpoint(&checkpoint, &manifest, split, batch_size, &out)?;
            let r = &ev.report;
            println!("{split}: WAR {:.4} UAR {:.4} Macro-F1 {:.4}; metrics in {}", r.war, r.uar, r.macro_f1, out.display());
        }
        Command::SweepAlpha { config, alphas } => {
            let alphas = harness::parse_alphas(&alphas)?;
            let cfg = RunConfig::load(&config)?;
            print_rows("alpha", &harness::sweep_alpha(&cfg, &alphas)?);
        }
        Command::Ablate { config, variants } => {
            let variants = harness::parse_variants(&variants)?;
            let cfg = RunConfig::load(&config)?;
            print_rows("variant", &harness::ablate(&cfg, &variants)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    harness::configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
