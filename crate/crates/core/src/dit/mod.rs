//! The Next-DiT block and a small full network.
//!
//! Blocks use grouped-query attention with per-head QK-Norm and multi-axis
//! RoPE, RMSNorm before and after each branch (sandwich normalization) and a
//! tanh-bounded AdaLN-Zero gate on the residual contribution. There are no
//! long skip connections: each block only adds to its own input.

mod checkpoint;
mod model;
mod params;
mod probe;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    forward_graph, forward_tokens, forward_velocity, gqa_attention, patchify, patchify_batch,
    recognition_forward, recognition_graph, sandwich_block, time_features, unpatchify,
    unpatchify_batch, BatchLayout, Conditioning, KvPool, VelocityOptions,
};
pub use params::{BlockParams, ModelParams};
pub use probe::{activation_probe, set_unit_gates, write_probe_csv, ProbeRow, ProbeSpec};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// RMSNorm before and after each branch, tanh-gated residual.
    Sandwich,
    /// RMSNorm before each branch only, linear gate (plain AdaLN-Zero).
    PreNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Velocity prediction conditioned on time (and optionally a label).
    Generative,
    /// Classification with scalar attention gates and a pooled MLP head.
    Recognition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub dim: usize,
    pub depth: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub mlp_ratio: usize,
    pub rope_axes: usize,
    pub rope_base: f64,
    /// Width of the sinusoidal time features fed to the time MLP.
    pub time_features: usize,
    /// Label classes for conditioning (generative) or prediction (recognition).
    pub num_classes: usize,
    pub norm: NormStyle,
    pub mode: Mode,
    pub eps: f64,
    pub init_std: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 2,
            q_heads: 4,
            kv_heads: 2,
            patch: 1,
            in_channels: 1,
            mlp_ratio: 4,
            rope_axes: 2,
            rope_base: 10000.0,
            time_features: 32,
            num_classes: 0,
            norm: NormStyle::Sandwich,
            mode: Mode::Generative,
            eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl DitConfig {
    pub fn d_head(&self) -> usize {
        self.dim / self.q_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_heads == 0 || self.dim % self.q_heads != 0 {
            bail!(Config, "dim {} not divisible by {} heads", self.dim, self.q_heads);
        }
        if self.kv_heads == 0 || self.q_heads % self.kv_heads != 0 {
            bail!(
                Config,
                "{} query heads not divisible by {} kv heads",
                self.q_heads,
                self.kv_heads
            );
        }
        if self.d_head() % (2 * self.rope_axes) != 0 {
            bail!(
                Config,
                "d_head {} not divisible by 2*rope_axes",
                self.d_head()
            );
        }
        if self.patch == 0 || self.depth == 0 || self.time_features % 2 != 0 {
            bail!(Config, "patch and depth must be positive, time_features even");
        }
        if self.mode == Mode::Recognition && self.num_classes == 0 {
            bail!(Config, "recognition mode needs num_classes > 0");
        }
        Ok(())
    }

    /// Width of the per-block AdaLN modulation.
    pub fn ada_width(&self) -> usize {
        4 * self.dim + 2
    }

    /// Parameters in the key and value projections of one block.
    pub fn kv_param_count(&self) -> usize {
        2 * self.dim * self.kv_heads * self.d_head()
    }
}
