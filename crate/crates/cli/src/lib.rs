//! Pipeline driver for the phantom anomaly-detection experiments: dataset generation, model
//! training, scoring of the test split and evaluation, all tracked in a per-run manifest.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod plot;
pub mod run;
pub mod score;
pub mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::info;

use crate::config::{ExperimentConfig, Profile};
use crate::error::{config as config_err, Result};
use crate::run::{now_unix, Layout, RunLock, RunManifest, StageOutcome, StageStatus};
use crate::score::Variant;
use crate::train::TrainStage;

#[derive(Debug, Parser)]
#[command(name = "anomaly-recon", version, about = "Unsupervised anomaly detection on synthetic brain phantoms")]
pub struct Cli {
    /// Config file (TOML, or JSON by extension) overriding the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Profile whose defaults the config overrides.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,

    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Replace existing artifacts or rebind the output directory to a changed config.
    #[arg(long, global = true)]
    pub force: bool,

    /// Stop training after this many steps, as if interrupted.
    #[arg(long, global = true, hide = true)]
    pub stop_after: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom dataset and intensity template.
    GenPhantom,
    /// Train one model; resumes from its last checkpoint.
    Train { stage: TrainStage },
    /// Reconstruct and score the test split with one reconstruction variant.
    Score { variant: Variant },
    /// Evaluate every scored variant and write the reports.
    Evaluate,
    /// Run the whole desk-scale pipeline.
    ReproduceDesk,
}

impl Cli {
    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, self.profile, self.seed)?,
            None => {
                let mut c = ExperimentConfig::defaults(self.profile.unwrap_or(Profile::Desk));
                if let Some(s) = self.seed {
                    c.seed = s;
                }
                c
            }
        };
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn stage<F>(manifest: &mut RunManifest, name: &str, f: F) -> Result<StageOutcome>
where
    F: FnOnce() -> Result<StageOutcome>,
{
    let started = now_unix();
    info!("stage {name}");
    let outcome = f()?;
    manifest.record(name, &outcome, started)?;
    info!("stage {name}: {:?}", outcome.status);
    Ok(outcome)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.load_config()?;
    if matches!(cli.command, Command::ReproduceDesk) && cfg.profile != Profile::Desk {
        return Err(config_err("reproduce-desk runs the desk profile only; run the paper profile stage by stage"));
    }
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let mut manifest = RunManifest::open(&cfg.output_dir, &cfg, cli.force)?;
    manifest.verify()?;
    let layout = Layout::from_env(&cfg);
    match &cli.command {
        Command::GenPhantom => {
            stage(&mut manifest, dataset::STAGE, || dataset::gen_phantom(&cfg, &layout.dataset, cli.force))?;
        }
        Command::Train { stage: s } => {
            stage(&mut manifest, s.name(), || train::train(&cfg, &layout, *s, cli.stop_after))?;
        }
        Command::Score { variant } => {
            stage(&mut manifest, &variant.stage_name(), || score::score(&cfg, &layout, *variant))?;
        }
        Command::Evaluate => {
            stage(&mut manifest, evaluate::STAGE, || evaluate::evaluate(&cfg, &layout))?;
        }
        Command::ReproduceDesk => {
            // A dataset from an identical config is reused rather than refused.
            stage(&mut manifest, dataset::STAGE, || dataset::gen_phantom(&cfg, &layout.dataset, false))?;
            for s in TrainStage::ALL {
                let out = stage(&mut manifest, s.name(), || train::train(&cfg, &layout, s, cli.stop_after))?;
                if out.status == StageStatus::Partial {
                    info!("stopping after partial {}", s.name());
                    return Ok(());
                }
            }
            for v in Variant::ALL {
                stage(&mut manifest, &v.stage_name(), || score::score(&cfg, &layout, v))?;
            }
            stage(&mut manifest, evaluate::STAGE, || evaluate::evaluate(&cfg, &layout))?;
            println!("{}", layout.reports.join(evaluate::REPORT).display());
        }
    }
    Ok(())
}
