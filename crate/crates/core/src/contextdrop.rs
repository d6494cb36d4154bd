//! Time-aware context drop: average-pool keys and values on the token grid,
//! with a pooling ratio that decays from `r_max` at `t = 0` (noise) to no
//! pooling at `t = 1` (data). Queries are never pooled, and there is no
//! unmerge step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numkernel::{avg_pool_tokens, pool_windows, Tensor};
use crate::rope::Coords;

/// Candidate pooling windows, ordered by drop fraction `1 − 1/(wh·ww)`.
pub const WINDOWS: [(usize, usize); 5] = [(1, 1), (2, 1), (2, 2), (4, 2), (4, 4)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropSpec {
    /// Drop fraction at `t = 0`, in `[0, 1)`.
    pub r_max: f64,
}

impl DropSpec {
    pub fn new(r_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&r_max) {
            bail!(Config, "r_max must lie in [0, 1), got {r_max}");
        }
        Ok(Self { r_max })
    }
}

/// Linear ramp `r(t) = r_max·(1 − t)`.
pub fn drop_ratio(t: f64, spec: &DropSpec) -> f64 {
    spec.r_max * (1.0 - t.clamp(0.0, 1.0))
}

pub fn drop_fraction(window: (usize, usize)) -> f64 {
    1.0 - 1.0 / (window.0 * window.1) as f64
}

/// Largest candidate window whose drop fraction does not exceed `ratio`.
pub fn window_for_ratio(ratio: f64) -> (usize, usize) {
    WINDOWS
        .iter()
        .rev()
        .copied()
        .find(|&w| drop_fraction(w) <= ratio)
        .unwrap_or((1, 1))
}

/// Number of pooled tokens for a grid and window.
pub fn pooled_len(grid: (usize, usize), window: (usize, usize)) -> usize {
    grid.0.div_ceil(window.0) * grid.1.div_ceil(window.1)
}

/// Mean coordinate of each window's member tokens.
pub fn pooled_coords(coords: &Coords, grid: (usize, usize), window: (usize, usize)) -> Result<Coords> {
    if coords.len() != grid.0 * grid.1 {
        bail!(Grid, "{} coordinates for a {:?} grid", coords.len(), grid);
    }
    Ok(Coords(
        pool_windows(grid, window)?
            .iter()
            .map(|g| {
                let mut c = [0.0; 3];
                for &i in g {
                    for (a, v) in c.iter_mut().zip(coords.0[i]) {
                        *a += v;
                    }
                }
                c.map(|v| v / g.len() as f64)
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledKv {
    pub k: Tensor,
    pub v: Tensor,
    pub window: (usize, usize),
    /// Window-mean coordinates of the pooled tokens on the `h×w` grid.
    pub coords: Coords,
}

/// Pools keys and values identically on an `h×w` grid.
pub fn pool_kv(k: &Tensor, v: &Tensor, grid: (usize, usize), ratio: f64) -> Result<PooledKv> {
    if k.shape() != v.shape() {
        bail!(Dimension, "keys {:?} and values {:?} differ", k.shape(), v.shape());
    }
    if k.rank() != 2 || k.shape()[0] != grid.0 * grid.1 {
        bail!(Grid, "{:?} tokens do not form a {:?} grid", k.shape(), grid);
    }
    let window = window_for_ratio(ratio);
    let coords = Coords::grid(grid.0, grid.1);
    if window == (1, 1) {
        return Ok(PooledKv {
            k: k.clone(),
            v: v.clone(),
            window,
            coords,
        });
    }
    Ok(PooledKv {
        k: avg_pool_tokens(k, grid, window)?,
        v: avg_pool_tokens(v, grid, window)?,
        window,
        coords: pooled_coords(&coords, grid, window)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropRow {
    pub t: f64,
    pub ratio: f64,
    pub n_kv: usize,
}

/// Ratio and key/value count at each time of a grid.
pub fn drop_schedule(spec: &DropSpec, grid: (usize, usize), times: &[f64]) -> Vec<DropRow> {
    times
        .iter()
        .map(|&t| {
            let ratio = drop_ratio(t, spec);
            DropRow {
                t,
                ratio,
                n_kv: pooled_len(grid, window_for_ratio(ratio)),
            }
        })
        .collect()
}

pub fn write_drop_csv<W: Write>(w: W, rows: &[DropRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
