use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dit::{
    forward_graph, forward_velocity, BatchLayout, Conditioning, DitConfig, ModelParams,
    VelocityOptions,
};
use crate::error::{bail, Error, Result};
use crate::numkernel::Tensor;
use crate::rope::Coords;
use crate::sampler::{sample, Solver, Timesteps};

/// A Next-DiT velocity model on 2D points.
///
/// A point `(a, b)` is a `1×2` single-channel image with patch size 1: two
/// tokens at grid coordinates `(0, 0)` and `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFlow {
    pub cfg: DitConfig,
    pub params: ModelParams<Tensor>,
}

impl ToyFlow {
    /// Default toy network: 4 query heads, 2 KV heads, 2D RoPE.
    pub fn config(dim: usize, depth: usize) -> DitConfig {
        DitConfig {
            dim,
            depth,
            q_heads: 4,
            kv_heads: 2,
            patch: 1,
            in_channels: 1,
            rope_axes: 2,
            ..DitConfig::default()
        }
    }

    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.patch != 1 || cfg.in_channels != 1 {
            bail!(Config, "toy flows use patch 1 and one channel");
        }
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { cfg, params })
    }

    fn layout(n: usize) -> BatchLayout {
        BatchLayout::shared(n, &Coords::grid(1, 2))
    }

    fn check_points(x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.last_dim() != 2 {
            bail!(Dimension, "expected [n, 2] points, got {:?}", x.shape());
        }
        Ok(())
    }

    /// `v_θ(x, t)` for points `x: [n, 2]`.
    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.velocity_with(x, t, &VelocityOptions::default())
    }

    /// Velocity with inference options such as context drop.
    pub fn velocity_with(&self, x: &Tensor, t: f64, opts: &VelocityOptions) -> Result<Tensor> {
        Self::check_points(x)?;
        let n = x.rows();
        let img = x.clone().reshape(&[n, 1, 2, 1])?;
        forward_velocity(&self.params, &self.cfg, &img, t, None, opts)?.reshape(&[n, 2])
    }

    /// Integrates `n` standard-normal draws from `t = 0` to `t = 1`.
    pub fn sample(&self, n: usize, solver: Solver, ts: &Timesteps, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::from_fn(&[n, 2], |_| StandardNormal.sample(&mut rng));
        sample(solver, |x, t| self.velocity(x, t), &x0, ts)
    }

    /// Loss and, when `with_grad`, its gradient for one batch.
    fn loss_impl(&self, x1: &Tensor, t: &[f64], noise: &Tensor, with_grad: bool) -> Result<(f64, Option<ModelParams<Tensor>>)> {
        Self::check_points(x1)?;
        if noise.shape() != x1.shape() || t.len() != x1.rows() {
            bail!(Dimension, "batch shapes disagree: x1 {:?}, noise {:?}, {} times", x1.shape(), noise.shape(), t.len());
        }
        let n = x1.rows();
        let xt = Tensor::from_fn(x1.shape(), |i| {
            let ti = t[i / 2];
            (1.0 - ti) * noise.data()[i] + ti * x1.data()[i]
        });
        let target = x1.zip_map(noise, |a, b| a - b)?.reshape(&[2 * n, 1])?;
        let mut g = Graph::new();
        let p = self.params.map(|_, t| g.leaf(t.clone()));
        let cond = Conditioning { t, labels: None };
        let tokens = xt.reshape(&[2 * n, 1])?;
        let out = forward_graph(&mut g, &p, &self.cfg, &tokens, &Self::layout(n), &cond)?;
        let u = g.leaf(target);
        let diff = g.sub(out, u)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        let loss = g.scale(total, 1.0 / n as f64);
        let value = g.value(loss).data()[0];
        if !with_grad {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        Ok((value, Some(p.map(|_, v| grads.wrt(&g, *v)))))
    }
}

/// Conditional flow-matching loss `mean_i ‖v_θ(x_t, t_i) − (x1_i − x0_i)‖²`
/// with `x_t = (1 − t)·x0 + t·x1`, `x0 = noise`.
pub fn cfm_loss(flow: &ToyFlow, x1: &Tensor, t: &[f64], noise: &Tensor) -> Result<f64> {
    Ok(flow.loss_impl(x1, t, noise, false)?.0)
}

/// Loss and exact reverse-mode gradient with respect to every parameter.
pub fn grad(flow: &ToyFlow, x1: &Tensor, t: &[f64], noise: &Tensor) -> Result<(f64, ModelParams<Tensor>)> {
    let (loss, g) = flow.loss_impl(x1, t, noise, true)?;
    Ok((loss, g.ok_or_else(|| Error::Internal("gradient missing".into()))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Cosine decay of the learning rate to `lr·final_lr_frac` over the run.
    #[serde(default = "one")]
    pub final_lr_frac: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 256,
            lr: 2e-3,
            optimizer: Optimizer::adam(),
            seed: 0,
            final_lr_frac: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            bail!(Config, "final_lr_frac must lie in [0, 1]");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                bail!(Config, "invalid Adam hyperparameters");
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training loss at each step.
    pub losses: Vec<f64>,
}

/// Minibatch CFM training on `data: [n, 2]`; `t` is drawn uniformly on `(0, 1)`.
pub fn train(flow: &mut ToyFlow, data: &Tensor, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    ToyFlow::check_points(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m: Vec<Tensor> = flow.params.leaves().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut v = m.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x1 = Vec::with_capacity(2 * cfg.batch);
        for _ in 0..cfg.batch {
            x1.extend_from_slice(data.row(rng.random_range(0..data.rows())));
        }
        let x1 = Tensor::new(vec![cfg.batch, 2], x1)?;
        let noise = Tensor::from_fn(&[cfg.batch, 2], |_| StandardNormal.sample(&mut rng));
        let t: Vec<f64> = (0..cfg.batch).map(|_| rng.random_range(0.0..1.0)).collect();
        let (loss, grads) = grad(flow, &x1, &t, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let lr = cfg.lr_at(step);
        let updated: Vec<Tensor> = flow
            .params
            .leaves()
            .into_iter()
            .zip(grads.leaves())
            .enumerate()
            .map(|(i, (p, g))| match cfg.optimizer {
                Optimizer::Sgd => p.zip_map(g, |pv, gv| pv - lr * gv),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let k = (step + 1) as i32;
                    let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                    for ((mv, vv), &gv) in m[i].data_mut().iter_mut().zip(v[i].data_mut()).zip(g.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    }
                    let step_dir = m[i].zip_map(&v[i], |mv, vv| (mv / c1) / ((vv / c2).sqrt() + eps))?;
                    p.zip_map(&step_dir, |pv, d| pv - lr * d)
                }
            })
            .collect::<Result<_>>()?;
        flow.params = flow.params.from_leaves(updated);
    }
    Ok(TrainReport { losses })
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn write_loss_csv<W: Write>(w: W, losses: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (step, &loss) in losses.iter().enumerate() {
        out.serialize(LossRow { step, loss })?;
    }
    out.flush()?;
    Ok(())
}
