use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDataset {
    /// Eight isotropic Gaussians (std 0.2) centred on a radius-4 circle. Modes
    /// are drawn in shuffled blocks of eight, so every mode gets `n/8` points
    /// up to rounding.
    EightGaussians,
    /// Two interleaved half circles of radius 1 with N(0, 0.1²) noise, scaled by 2 and centred.
    TwoMoons,
    /// Uniform on the black squares of a 4×4 checkerboard over `[−2, 2]²`.
    Checkerboard,
}

impl fmt::Display for ToyDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EightGaussians => "eight_gaussians",
            Self::TwoMoons => "two_moons",
            Self::Checkerboard => "checkerboard",
        })
    }
}

impl FromStr for ToyDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight_gaussians" | "8gaussians" => Ok(Self::EightGaussians),
            "two_moons" | "moons" => Ok(Self::TwoMoons),
            "checkerboard" => Ok(Self::Checkerboard),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

pub fn eight_gaussians_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [4.0 * a.cos(), 4.0 * a.sin()]
        })
        .collect()
}

/// Index of the closest eight-Gaussians centre.
pub fn nearest_mode(p: &[f64]) -> usize {
    let centers = eight_gaussians_centers();
    (0..8)
        .min_by(|&a, &b| {
            let da = (p[0] - centers[a][0]).powi(2) + (p[1] - centers[a][1]).powi(2);
            let db = (p[0] - centers[b][0]).powi(2) + (p[1] - centers[b][1]).powi(2);
            da.total_cmp(&db)
        })
        .expect("eight centres")
}

/// `n` points `[n, 2]`, deterministic in `seed`.
pub fn toy_dataset(kind: ToyDataset, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    match kind {
        ToyDataset::EightGaussians => {
            let centers = eight_gaussians_centers();
            let noise = Normal::new(0.0, 0.2).expect("valid std");
            let mut order: Vec<usize> = (0..8).collect();
            for i in 0..n {
                if i % 8 == 0 {
                    order.shuffle(&mut rng);
                }
                let c = centers[order[i % 8]];
                data.push(c[0] + noise.sample(&mut rng));
                data.push(c[1] + noise.sample(&mut rng));
            }
        }
        ToyDataset::TwoMoons => {
            let noise = Normal::new(0.0, 0.1).expect("valid std");
            for _ in 0..n {
                let u = rng.random_range(0.0..PI);
                let (x, y) = if rng.random_bool(0.5) {
                    (u.cos(), u.sin())
                } else {
                    (1.0 - u.cos(), 0.5 - u.sin())
                };
                data.push(2.0 * (x - 0.5 + noise.sample(&mut rng)));
                data.push(2.0 * (y - 0.25 + noise.sample(&mut rng)));
            }
        }
        ToyDataset::Checkerboard => {
            for _ in 0..n {
                let x = rng.random_range(-2.0..2.0);
                let row = rng.random_range(0..2) as f64 * 2.0;
                let y = rng.random_range(0.0..1.0) - row + (x as f64).floor().rem_euclid(2.0);
                data.push(x);
                data.push(y);
            }
        }
    }
    Tensor::new(vec![n, 2], data)
}
