//! Any-resolution tokenization: candidate patch grids, best-match grid
//! selection, and padding of variable-length token sequences.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::error::{bail, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PartitionGrid {
    pub h_p: usize,
    pub w_p: usize,
    pub patch: usize,
}

impl PartitionGrid {
    pub fn area(&self) -> usize {
        self.h_p * self.w_p
    }
}

/// All `(H_p, W_p)` with `H_p·W_p ≤ N` and `max/min ≤ R_max`, ordered by `H_p` then `W_p`.
pub fn candidate_set(max_patches: usize, max_aspect: f64, patch: usize) -> Result<Vec<PartitionGrid>> {
    if max_patches == 0 {
        bail!(Config, "max_patches must be at least 1");
    }
    if !(max_aspect >= 1.0) {
        bail!(Config, "max_aspect {max_aspect} must be >= 1");
    }
    if patch == 0 {
        bail!(Config, "patch size must be positive");
    }
    let mut out = Vec::new();
    for h_p in 1..=max_patches {
        for w_p in 1..=max_patches / h_p {
            let (lo, hi) = (h_p.min(w_p), h_p.max(w_p));
            if hi as f64 <= max_aspect * lo as f64 {
                out.push(PartitionGrid { h_p, w_p, patch });
            }
        }
    }
    Ok(out)
}

/// Matching ratio `min(a, b) / max(a, b)` with `a = H_p/H_I`, `b = W_p/W_I`,
/// as an exact fraction `(num, den)`.
fn matching_ratio(grid: &PartitionGrid, height: usize, width: usize) -> (u128, u128) {
    let a = grid.h_p as u128 * width as u128;
    let b = grid.w_p as u128 * height as u128;
    (a.min(b), a.max(b))
}

/// Floating-point matching ratio, for reporting.
pub fn matching_score(grid: &PartitionGrid, height: usize, width: usize) -> f64 {
    let (n, d) = matching_ratio(grid, height, width);
    n as f64 / d as f64
}

/// Candidate with the highest matching ratio; ties go to the larger area, then
/// to the earlier candidate.
pub fn best_partition(height: usize, width: usize, candidates: &[PartitionGrid]) -> Result<PartitionGrid> {
    if height == 0 || width == 0 {
        bail!(Config, "input size must be positive");
    }
    let mut best: Option<&PartitionGrid> = None;
    for c in candidates {
        let better = match best {
            None => true,
            Some(b) => {
                let (cn, cd) = matching_ratio(c, height, width);
                let (bn, bd) = matching_ratio(b, height, width);
                match (cn * bd).cmp(&(bn * cd)) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => c.area() > b.area(),
                }
            }
        };
        if better {
            best = Some(c);
        }
    }
    best.copied()
        .ok_or_else(|| crate::Error::Config("no candidate partitions".into()))
}

/// Pixel size `(H_p·P, W_p·P)` the input is resized to.
pub fn resize_target(grid: &PartitionGrid) -> (usize, usize) {
    (grid.h_p * grid.patch, grid.w_p * grid.patch)
}

/// Validity of each position in a padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    valid: Vec<Vec<bool>>,
}

impl TokenMask {
    /// Prefix masks: sequence `b` has `lengths[b]` valid tokens followed by padding.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            bail!(Config, "empty batch");
        }
        if lengths.contains(&0) {
            bail!(Domain, "every sequence needs at least one valid token");
        }
        let n = *lengths.iter().max().expect("non-empty");
        Ok(Self {
            valid: lengths.iter().map(|&l| (0..n).map(|i| i < l).collect()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.valid.len()
    }

    pub fn padded_len(&self) -> usize {
        self.valid.first().map_or(0, Vec::len)
    }

    pub fn sequence(&self, b: usize) -> &[bool] {
        &self.valid[b]
    }

    pub fn valid_count(&self, b: usize) -> usize {
        self.valid[b].iter().filter(|&&v| v).count()
    }

    /// Row-major `[batch·padded_len]` validity.
    pub fn flat(&self) -> Vec<bool> {
        self.valid.concat()
    }
}

/// Zero-pads `[n_i, d]` sequences to `[B, n_max, d]`.
pub fn pad_batch(seqs: &[Tensor]) -> Result<(Tensor, TokenMask)> {
    if seqs.is_empty() {
        bail!(Config, "empty batch");
    }
    let d = seqs[0].last_dim();
    for (i, s) in seqs.iter().enumerate() {
        if s.rank() != 2 || s.last_dim() != d {
            bail!(Dimension, "sequence {i} has shape {:?}, expected [n, {d}]", s.shape());
        }
    }
    let lengths: Vec<usize> = seqs.iter().map(Tensor::rows).collect();
    let mask = TokenMask::from_lengths(&lengths)?;
    let n = mask.padded_len();
    let mut data = Vec::with_capacity(seqs.len() * n * d);
    for s in seqs {
        data.extend_from_slice(s.data());
        data.extend(std::iter::repeat_n(0.0, (n - s.rows()) * d));
    }
    Ok((Tensor::new(vec![seqs.len(), n, d], data)?, mask))
}

#[derive(Debug, Clone, Serialize)]
struct CandidateRow {
    h_p: usize,
    w_p: usize,
    height: usize,
    width: usize,
    score: f64,
    chosen: bool,
}

/// Writes `h_p,w_p,height,width,score,chosen` for every candidate.
pub fn write_candidates_csv<W: Write>(
    w: W,
    candidates: &[PartitionGrid],
    height: usize,
    width: usize,
    chosen: &PartitionGrid,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for c in candidates {
        let (th, tw) = resize_target(c);
        out.serialize(CandidateRow {
            h_p: c.h_p,
            w_p: c.w_p,
            height: th,
            width: tw,
            score: matching_score(c, height, width),
            chosen: c == chosen,
        })?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(c: &[PartitionGrid]) -> Vec<(usize, usize)> {
        c.iter().map(|g| (g.h_p, g.w_p)).collect()
    }

    #[test]
    fn small_candidate_sets() {
        assert_eq!(pairs(&candidate_set(1, 1.0, 16).unwrap()), vec![(1, 1)]);
        assert_eq!(
            pairs(&candidate_set(4, 2.0, 16).unwrap()),
            vec![(1, 1), (1, 2), (2, 1), (2, 2)]
        );
        assert!(candidate_set(0, 2.0, 16).is_err());
        assert!(candidate_set(4, 0.5, 16).is_err());
    }

    #[test]
    fn tall_input_picks_two_to_one_grid() {
        let c = candidate_set(128, 4.0, 16).unwrap();
        let g = best_partition(448, 224, &c).unwrap();
        assert_eq!((g.h_p, g.w_p), (16, 8));
        assert_eq!(resize_target(&g), (256, 128));
        assert_eq!(best_partition(896, 448, &c).unwrap(), g);
    }

    #[test]
    fn square_input_gets_square_grid() {
        let c = candidate_set(200, 2.0, 16).unwrap();
        let g = best_partition(300, 300, &c).unwrap();
        assert_eq!((g.h_p, g.w_p), (14, 14));
        assert_eq!(resize_target(&g), (224, 224));
    }

    #[test]
    fn padding_and_mask() {
        let a = Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0);
        let b = Tensor::from_fn(&[5, 2], |i| -(i as f64));
        let (t, m) = pad_batch(&[a, b]).unwrap();
        assert_eq!(t.shape(), &[2, 5, 2]);
        assert_eq!(m.sequence(0), &[true, true, true, false, false]);
        assert!(t.data()[6..10].iter().all(|&v| v == 0.0));
        assert_eq!(m.valid_count(1), 5);
        assert!(pad_batch(&[]).is_err());
    }
}
