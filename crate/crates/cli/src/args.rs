use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "nextdit", version, about = "Next-DiT flow toolkit: schedules, solvers, RoPE scans, partitioning, probes and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emit a time grid as CSV (i,t).
    Schedule(ScheduleArgs),
    /// Integrate the analytic Gaussian flow or a trained toy checkpoint.
    Sample(SampleArgs),
    /// Local truncation error and curvature along the analytic Gaussian flow.
    Diagnose(DiagnoseArgs),
    /// Per-strategy RoPE frequency and wavelength tables.
    RopeScan(RopeScanArgs),
    /// Choose the patch grid for an input size.
    Partition(PartitionArgs),
    /// Hidden-state RMS per layer for random-weight stacks.
    Probe(ProbeArgs),
    /// Train a toy flow on a 2D dataset.
    Train(TrainArgs),
    /// Generate 2D samples from a trained checkpoint.
    Gen(GenArgs),
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON file with defaults for this subcommand's flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Flags override the JSON config, which overrides the built-in defaults.
pub trait Layered: DeserializeOwned + Sized {
    fn merge(self, lower: Self) -> Self;
}

macro_rules! layered {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl Layered for $name {
            fn merge(self, lower: Self) -> Self {
                Self { $($field: self.$field.or(lower.$field),)* }
            }
        }
    };
}

pub fn load<T: Layered>(flags: T, config: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let file: T = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    Ok(flags.merge(file))
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFlags {
    /// uniform, rational or sigmoid.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// literal or normalized.
    #[arg(long)]
    pub form: Option<String>,
}
layered!(ScheduleFlags { kind, sigma, mu, alpha, beta, steps, form });

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: ScheduleFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFlags {
    /// Schedule kind (uniform, rational, sigmoid).
    #[arg(long = "schedule")]
    #[serde(rename = "schedule")]
    pub kind: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub form: Option<String>,
    /// euler, midpoint or rk4.
    #[arg(long)]
    pub solver: Option<String>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Target mean of the analytic flow, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub mean: Option<Vec<f64>>,
    /// Target std of the analytic flow.
    #[arg(long)]
    pub std: Option<f64>,
    /// Use a trained toy checkpoint instead of the analytic flow.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Maximal context-drop ratio (checkpoints only).
    #[arg(long)]
    pub context_drop: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}
layered!(SampleFlags { kind, sigma, mu, alpha, beta, steps, form, solver, n, mean, std, checkpoint, context_drop, seed });

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: SampleFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseFlags {
    /// Anchor steps (uniform).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Euler sub-steps of the oracle per anchor step.
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub mean: Option<Vec<f64>>,
    #[arg(long)]
    pub std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}
layered!(DiagnoseFlags { steps, substeps, n, mean, std, seed });

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: DiagnoseFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeScanFlags {
    #[arg(long)]
    pub base: Option<f64>,
    #[arg(long)]
    pub dhead: Option<usize>,
    #[arg(long)]
    pub axes: Option<usize>,
    /// Training extent L along each axis.
    #[arg(long)]
    pub extent: Option<f64>,
    /// Extension factor s.
    #[arg(long)]
    pub scale: Option<f64>,
    /// A strategy name or `all`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Time for the time-aware strategy.
    #[arg(long)]
    pub t: Option<f64>,
    /// consistent or paper_literal.
    #[arg(long)]
    pub convention: Option<String>,
}
layered!(RopeScanFlags { base, dhead, axes, extent, scale, strategy, t, convention });

#[derive(Debug, Args)]
pub struct RopeScanArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: RopeScanFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFlags {
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub max_patches: Option<usize>,
    #[arg(long)]
    pub max_aspect: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
}
layered!(PartitionFlags { height, width, max_patches, max_aspect, patch });

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: PartitionFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    /// Random samples per timestep.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated probe times.
    #[arg(long, value_delimiter = ',')]
    pub timesteps: Option<Vec<f64>>,
    /// Image height and width (patch size 1).
    #[arg(long)]
    pub size: Option<usize>,
    /// sandwich, prenorm or both.
    #[arg(long)]
    pub norm: Option<String>,
    /// Std of the random weights.
    #[arg(long)]
    pub weight_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}
layered!(ProbeFlags { layers, dim, heads, kv_heads, samples, timesteps, size, norm, weight_std, seed });

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: ProbeFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFlags {
    /// eight_gaussians, two_moons or checkerboard.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// sandwich or prenorm.
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}
layered!(TrainFlags { dataset, steps, lr, batch, blocks, dim, optimizer, norm, seed });

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFlags {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long = "schedule")]
    #[serde(rename = "schedule")]
    pub kind: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub form: Option<String>,
    #[arg(long)]
    pub context_drop: Option<f64>,
    /// Side length of the density image.
    #[arg(long)]
    pub pixels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}
layered!(GenFlags { checkpoint, n, solver, kind, sigma, mu, alpha, beta, steps, form, context_drop, pixels, seed });

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: GenFlags,
}
