//! Experiment driver: configuration, data generation, training, evaluation,
//! ablation grids, feature export and plots.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod provenance;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use sgtc::cotrain::FusionRule;
use sgtc::metrics::FeatureTap;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "sgtc", version, about = "Sparse-annotation co-training experiments on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TapArg {
    FImg,
    ThetaPooled,
}

impl From<TapArg> for FeatureTap {
    fn from(t: TapArg) -> Self {
        match t {
            TapArg::FImg => FeatureTap::FImg,
            TapArg::ThetaPooled => FeatureTap::ThetaPooled,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom dataset described by a config.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the three networks; generates data first if needed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// mean-softmax, majority-vote, single-S, single-C or single-A.
        #[arg(long, default_value = "mean-softmax")]
        fusion: FusionRule,
    },
    /// Run an ablation plan and check its ordinal verdicts.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Render a history or ablation summary CSV to SVG charts.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-volume, per-role features as a tab-separated table.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f-img")]
        tap: TapArg,
    },
}

/// Executes one subcommand. Verdict failures surface as
/// [`CliError::Verdict`] after all outputs are written.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config } => {
            let cfg = config::ExperimentConfig::load(&config)?;
            commands::generate_data(&cfg)?;
            provenance::record(&cfg.data_dir(), "generate", &cfg.to_toml()?, &[("config".into(), config)])?;
        }
        Command::Train { config, resume } => {
            let cfg = config::ExperimentConfig::load(&config)?;
            commands::train(&cfg, resume)?;
            println!("{}", commands::final_checkpoint(&cfg).display());
        }
        Command::Eval {
            ckpt,
            manifest,
            out,
            fusion,
        } => {
            let report = commands::eval(&ckpt, &manifest, &out, fusion)?;
            println!("dice {:.4} ± {:.4} over {} volumes", report.dice.mean, report.dice.std, report.dice.count);
        }
        Command::Ablate { plan } => {
            let plan = ablation::AblationPlan::load(&plan)?;
            let outcome = ablation::run_plan(&plan)?;
            for c in &outcome.cells {
                println!("{:<20} {:.4} ± {:.4} ({} failed)", c.name, c.mean, c.std, c.failed());
            }
            for v in &outcome.verdicts {
                let tag = if v.pass { "PASS" } else { "FAIL" };
                println!("{tag} {} >= {} + {}: diff {:.4}", v.spec.better, v.spec.worse, v.spec.margin, v.diff);
            }
            let failed = outcome.failed_verdicts();
            if failed > 0 {
                return Err(CliError::Verdict {
                    failed,
                    total: outcome.verdicts.len(),
                });
            }
        }
        Command::Plot { input, out } => {
            for p in plot::plot(&input, &out)? {
                println!("{}", p.display());
            }
        }
        Command::ExportFeatures {
            ckpt,
            manifest,
            out,
            tap,
        } => {
            let n = commands::export(&ckpt, &manifest, &out, tap.into())?;
            println!("{n} rows");
        }
    }
    Ok(())
}
