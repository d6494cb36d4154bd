use std::io::Write;

use crate::error::{bail, Result};
use crate::numkernel::Tensor;

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let p = a.row(i);
        for j in 0..b.rows() {
            let q = b.row(j);
            total += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// `2E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` over all pairs (diagonal included),
/// so the estimate is nonnegative and exactly zero for identical sets.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
        bail!(Dimension, "sample sets {:?} and {:?} are not comparable", a.shape(), b.shape());
    }
    if a.rows() == 0 || b.rows() == 0 {
        bail!(Config, "energy distance needs non-empty sample sets");
    }
    let ab = mean_pair_distance(a, b);
    let aa = mean_pair_distance(a, a);
    let bb = mean_pair_distance(b, b);
    Ok(2.0 * ab - aa - bb)
}

/// Histogram of 2D points on a `size×size` grid over `[−extent, extent]²`,
/// scaled so the densest cell is 255. Row 0 is the top (largest y).
pub fn density_pgm(points: &Tensor, size: usize, extent: f64) -> Result<Vec<u8>> {
    if points.rank() != 2 || points.last_dim() != 2 {
        bail!(Dimension, "density needs [n, 2] points, got {:?}", points.shape());
    }
    if size == 0 || !(extent > 0.0) {
        bail!(Config, "density grid needs a positive size and extent");
    }
    let mut counts = vec![0usize; size * size];
    for r in 0..points.rows() {
        let p = points.row(r);
        let fx = (p[0] + extent) / (2.0 * extent);
        let fy = (extent - p[1]) / (2.0 * extent);
        if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
            continue;
        }
        let (cx, cy) = ((fx * size as f64) as usize, (fy * size as f64) as usize);
        counts[cy * size + cx] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    Ok(counts.iter().map(|&c| ((c * 255 + max / 2) / max) as u8).collect())
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        bail!(Dimension, "{} pixels for a {width}x{height} image", pixels.len());
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}
