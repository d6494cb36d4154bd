use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numkernel::Tensor;

/// Path from `N(0, I)` at `t = 0` to `N(m, s²I)` at `t = 1` along
/// `x_t = (1 − t)·x_0 + t·x_1` with independent endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFlowSpec {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianFlowSpec {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            bail!(Config, "target std must be positive, got {std}");
        }
        Ok(Self { mean, std })
    }

    /// Marginal variance `(1 − t)² + t²s²`.
    pub fn variance(&self, t: f64) -> f64 {
        (1.0 - t).powi(2) + t * t * self.std * self.std
    }

    /// `g(t) = (t·s² − (1 − t)) / V(t)`.
    pub fn gain(&self, t: f64) -> f64 {
        (t * self.std * self.std - (1.0 - t)) / self.variance(t)
    }

    /// Exact flow map from a source point `z` at time 0: `t·m + √V(t)·z`.
    pub fn transport(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.check(z)?;
        let sd = self.variance(t).sqrt();
        let dim = self.mean.len();
        Ok(Tensor::from_fn(z.shape(), |i| t * self.mean[i % dim] + sd * z.data()[i]))
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.last_dim() != self.mean.len() {
            bail!(Dimension, "points {:?} do not have dimension {}", x.shape(), self.mean.len());
        }
        Ok(())
    }
}

/// `u(x, t) = E[x_1 − x_0 | x_t = x] = m + g(t)·(x − t·m)` for rows of `x`.
pub fn gaussian_flow_velocity(spec: &GaussianFlowSpec, x: &Tensor, t: f64) -> Result<Tensor> {
    spec.check(x)?;
    if !(0.0..=1.0).contains(&t) {
        bail!(Domain, "t = {t} outside [0, 1]");
    }
    let g = spec.gain(t);
    let dim = spec.mean.len();
    Ok(Tensor::from_fn(x.shape(), |i| {
        let m = spec.mean[i % dim];
        m + g * (x.data()[i] - t * m)
    }))
}
