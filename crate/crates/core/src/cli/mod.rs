//! Experiment command line: per-stage commands and the cached full pipeline.

pub mod artifacts;
pub mod manifest;
pub mod pipeline;
pub mod sweep;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use manifest::{config_hash, ExperimentManifest};
pub use pipeline::{general_data, Pipeline, RunSummary, Stage};
pub use sweep::{pearson, SweepResult};

use crate::error::{Error, Result};
use crate::train::ExtensionMode;

#[derive(Debug, Parser)]
#[command(name = "doss", version, about = "Domain-specific sub-network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the manifest's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the manifest's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train λ₀ on the general data.
    Pretrain(Common),
    /// Per-domain and all-domain full fine-tuning baselines.
    Finetune(Common),
    /// Build one mask per domain.
    MakeMasks {
        #[command(flatten)]
        common: Common,
        /// Make every mask disjoint from the ones built before it.
        #[arg(long)]
        disjoint: bool,
    },
    /// Structure-aware joint training under the domain masks.
    TrainDoss(Common),
    /// Add the manifest's extension domain.
    Extend {
        #[command(flatten)]
        common: Common,
        /// Run only this mode instead of the manifest's list.
        #[arg(long)]
        mode: Option<ExtensionMode>,
    },
    /// Write the evaluation tables.
    Eval(Common),
    /// One joint-training run per (α, β) grid point.
    Sweep(Common),
    /// Every stage in order, reusing cached outputs.
    Run(Common),
}

fn pipeline(common: &Common, edit: impl FnOnce(&mut ExperimentManifest)) -> Result<Pipeline> {
    let mut m = ExperimentManifest::load(&common.config)?;
    if let Some(seed) = common.seed {
        m.seed = seed;
    }
    edit(&mut m);
    m.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| m.out_dir.as_ref().map(|d| m.root.join(d)))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    Pipeline::new(m, out, common.threads)
}

/// Makes sure the data stage is current, then runs `stage`.
fn single(p: &Pipeline, stage: Stage) -> Result<()> {
    let h = p.stage_hash(Stage::Data)?;
    if !p.is_cached(Stage::Data, &h) {
        p.run_stage(Stage::Data)?;
    }
    p.run_stage(stage)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => single(&pipeline(&c, |_| {})?, Stage::Pretrain),
        Command::Finetune(c) => single(&pipeline(&c, |_| {})?, Stage::Finetune),
        Command::MakeMasks { common, disjoint } => {
            single(&pipeline(&common, |m| m.disjoint_masks |= disjoint)?, Stage::Masks)
        }
        Command::TrainDoss(c) => single(&pipeline(&c, |_| {})?, Stage::Doss),
        Command::Extend { common, mode } => {
            let p = pipeline(&common, |m| {
                if let (Some(mode), Some(ext)) = (mode, m.extension.as_mut()) {
                    ext.modes = vec![mode];
                }
            })?;
            single(&p, Stage::Extend)
        }
        Command::Eval(c) => single(&pipeline(&c, |_| {})?, Stage::Eval),
        Command::Sweep(c) => single(&pipeline(&c, |_| {})?, Stage::Sweep),
        Command::Run(c) => {
            let s = pipeline(&c, |_| {})?.run()?;
            log::info!("ran {:?}; cached {:?}", s.ran, s.skipped);
            Ok(())
        }
    }
}
