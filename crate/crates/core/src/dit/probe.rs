use std::io::Write;

use serde::Serialize;

use super::model::{bind, gaussian_images, hidden_trace, patchify_batch, BatchLayout, Conditioning};
use super::{DitConfig, Mode, ModelParams, NormStyle};
use crate::autograd::Graph;
use crate::error::{bail, Result};
use crate::numkernel::Tensor;

/// Random-input activation probe: `n_samples` standard-normal images per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub n_samples: usize,
    pub timesteps: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Samples per forward pass; bounds the tape's memory.
    pub chunk: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            n_samples: 500,
            timesteps: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            height: 4,
            width: 4,
            seed: 0,
            chunk: 25,
        }
    }
}

/// Per-token RMS of one layer's hidden states at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    /// 0 is the patch embedding; `l` is the output of block `l`.
    pub layer: usize,
    pub t: f64,
    pub rms_mean: f64,
    pub rms_max: f64,
}

pub fn activation_probe(
    params: &ModelParams<Tensor>,
    cfg: &DitConfig,
    spec: &ProbeSpec,
) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    if spec.n_samples == 0 || spec.chunk == 0 {
        bail!(Config, "probe needs at least one sample and a positive chunk");
    }
    let depth = params.blocks.len();
    let mut rows = Vec::with_capacity(spec.timesteps.len() * (depth + 1));
    for (ti, &t) in spec.timesteps.iter().enumerate() {
        let mut sum = vec![0.0; depth + 1];
        let mut max = vec![0.0f64; depth + 1];
        let mut count = 0usize;
        let mut done = 0;
        while done < spec.n_samples {
            let b = spec.chunk.min(spec.n_samples - done);
            let seed = spec.seed ^ ((ti as u64) << 32) ^ done as u64;
            let imgs = gaussian_images(&[b, spec.height, spec.width, cfg.in_channels], seed);
            let (tokens, coords) = patchify_batch(&imgs, cfg.patch)?;
            let layout = BatchLayout::shared(b, &coords);
            let times = vec![t; b];
            let mut g = Graph::new();
            let p = bind(&mut g, params);
            let cond = Conditioning {
                t: &times,
                labels: None,
            };
            let hidden = hidden_trace(&mut g, &p, cfg, &tokens, &layout, &cond)?;
            for (l, &h) in hidden.iter().enumerate() {
                let rms = g.value(h).row_rms();
                sum[l] += rms.iter().sum::<f64>();
                max[l] = rms.iter().fold(max[l], |m, &r| m.max(r));
            }
            count += tokens.rows();
            done += b;
        }
        for l in 0..=depth {
            rows.push(ProbeRow {
                layer: l,
                t,
                rms_mean: sum[l] / count as f64,
                rms_max: max[l],
            });
        }
    }
    Ok(rows)
}

/// Sets every residual gate to 1 with no input dependence. Sandwich blocks
/// pass the gate through tanh, so their pre-activation is pushed to where
/// tanh rounds to exactly 1.
pub fn set_unit_gates(params: &mut ModelParams<Tensor>, cfg: &DitConfig) {
    const SATURATED: f64 = 20.0;
    let d = cfg.dim;
    for bp in &mut params.blocks {
        match cfg.mode {
            Mode::Generative => {
                let pre = match cfg.norm {
                    NormStyle::Sandwich => SATURATED,
                    NormStyle::PreNorm => 1.0,
                };
                if let (Some(w), Some(b)) = (bp.ada_w.as_mut(), bp.ada_b.as_mut()) {
                    let width = w.last_dim();
                    for r in 0..w.rows() {
                        w.row_mut(r)[4 * d..width].fill(0.0);
                    }
                    b.data_mut()[4 * d..].fill(pre);
                }
            }
            Mode::Recognition => {
                if let Some(gate) = bp.gate.as_mut() {
                    gate.data_mut().fill(SATURATED);
                }
            }
        }
    }
}

pub fn write_probe_csv<W: Write>(w: W, rows: &[ProbeRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
