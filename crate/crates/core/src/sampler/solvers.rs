use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Timesteps;
use crate::error::{bail, Error, Result};
use crate::numkernel::Tensor;

/// Explicit Runge-Kutta method: stages `A` (strictly lower triangular), weights `b`, nodes `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
    order: usize,
}

impl ButcherTableau {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, c: Vec<f64>, order: usize) -> Result<Self> {
        let s = b.len();
        if s == 0 || a.len() != s || c.len() != s || a.iter().any(|row| row.len() != s) {
            bail!(Config, "tableau dimensions disagree");
        }
        for (i, row) in a.iter().enumerate() {
            if row[i..].iter().any(|&v| v != 0.0) {
                bail!(Config, "tableau is not explicit: A[{i}] has entries on or above the diagonal");
            }
            let sum: f64 = row.iter().sum();
            if (sum - c[i]).abs() > 1e-12 {
                bail!(Config, "node c[{i}] = {} differs from row sum {sum}", c[i]);
            }
        }
        let total: f64 = b.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            bail!(Config, "weights sum to {total}, not 1");
        }
        Ok(Self { a, b, c, order })
    }

    pub fn euler() -> Self {
        Self::new(vec![vec![0.0]], vec![1.0], vec![0.0], 1).expect("valid tableau")
    }

    pub fn midpoint() -> Self {
        Self::new(
            vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            vec![0.0, 1.0],
            vec![0.0, 0.5],
            2,
        )
        .expect("valid tableau")
    }

    pub fn rk4() -> Self {
        Self::new(
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 0.5, 1.0],
            4,
        )
        .expect("valid tableau")
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

/// `x + h·Σ w_j·k_j`, skipping zero weights.
fn step_from(x: &Tensor, h: f64, weights: &[f64], ks: &[Tensor]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (&w, k) in weights.iter().zip(ks) {
        if w == 0.0 {
            continue;
        }
        let term = k.scale(w);
        acc = Some(match acc {
            None => term,
            Some(a) => a.zip_map(&term, |p, q| p + q)?,
        });
    }
    match acc {
        None => Ok(x.clone()),
        Some(a) => x.zip_map(&a, |xv, av| xv + h * av),
    }
}

fn check_shape(x: &Tensor, v: &Tensor) -> Result<()> {
    if x.shape() != v.shape() {
        bail!(Dimension, "velocity shape {:?} differs from state {:?}", v.shape(), x.shape());
    }
    Ok(())
}

pub fn rk_sample<F>(tableau: &ButcherTableau, mut v: F, x0: &Tensor, ts: &Timesteps) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let mut x = x0.clone();
    let mut ks: Vec<Tensor> = Vec::with_capacity(tableau.stages());
    for (t0, t1) in ts.intervals() {
        let h = t1 - t0;
        ks.clear();
        for i in 0..tableau.stages() {
            let xi = step_from(&x, h, &tableau.a[i][..i], &ks)?;
            let k = v(&xi, t0 + tableau.c[i] * h)?;
            check_shape(&x, &k)?;
            ks.push(k);
        }
        x = step_from(&x, h, &tableau.b, &ks)?;
    }
    Ok(x)
}

/// `x_{i+1} = x_i + (t_{i+1} − t_i)·v(x_i, t_i)`.
pub fn euler_sample<F>(mut v: F, x0: &Tensor, ts: &Timesteps) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let mut x = x0.clone();
    for (t0, t1) in ts.intervals() {
        let h = t1 - t0;
        let d = v(&x, t0)?;
        check_shape(&x, &d)?;
        x = x.zip_map(&d, |xv, dv| xv + h * dv)?;
    }
    Ok(x)
}

/// Two evaluations per interval: slope at `t_i`, then at the half-step point.
pub fn midpoint_sample<F>(mut v: F, x0: &Tensor, ts: &Timesteps) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let mut x = x0.clone();
    for (t0, t1) in ts.intervals() {
        let h = t1 - t0;
        let d = v(&x, t0)?;
        check_shape(&x, &d)?;
        let half = x.zip_map(&d, |xv, dv| xv + h * (0.5 * dv))?;
        let d = v(&half, t0 + 0.5 * h)?;
        check_shape(&x, &d)?;
        x = x.zip_map(&d, |xv, dv| xv + h * dv)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Midpoint,
    Rk4,
}

impl Solver {
    pub fn tableau(self) -> ButcherTableau {
        match self {
            Self::Euler => ButcherTableau::euler(),
            Self::Midpoint => ButcherTableau::midpoint(),
            Self::Rk4 => ButcherTableau::rk4(),
        }
    }

    /// Function evaluations for `steps` intervals.
    pub fn nfe(self, steps: usize) -> usize {
        self.tableau().stages() * steps
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Midpoint => "midpoint",
            Self::Rk4 => "rk4",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "midpoint" => Ok(Self::Midpoint),
            "rk4" => Ok(Self::Rk4),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

pub fn sample<F>(solver: Solver, v: F, x0: &Tensor, ts: &Timesteps) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    match solver {
        Solver::Euler => euler_sample(v, x0, ts),
        Solver::Midpoint => midpoint_sample(v, x0, ts),
        Solver::Rk4 => rk_sample(&ButcherTableau::rk4(), v, x0, ts),
    }
}

/// Classifier-free guidance `v_u + w·(v_c − v_u)`.
pub fn cfg_velocity<C, U>(
    mut v_cond: C,
    mut v_uncond: U,
    w: f64,
) -> Result<impl FnMut(&Tensor, f64) -> Result<Tensor>>
where
    C: FnMut(&Tensor, f64) -> Result<Tensor>,
    U: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if !(w >= 0.0) {
        bail!(Config, "guidance weight must be >= 0, got {w}");
    }
    Ok(move |x: &Tensor, t: f64| {
        let c = v_cond(x, t)?;
        let u = v_uncond(x, t)?;
        u.zip_map(&c, |uv, cv| uv + w * (cv - uv))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(x.scale(-1.0))
    }

    #[test]
    fn constant_field_is_exact() {
        let x0 = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let c = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let ts = Timesteps::new(vec![0.0, 0.25, 1.0]).unwrap();
        let x = euler_sample(|_, _| Ok(c.clone()), &x0, &ts).unwrap();
        assert_eq!(x.data(), &[2.5, 2.0]);
    }

    #[test]
    fn euler_decay_recursion() {
        let x0 = Tensor::full(&[1, 1], 1.0);
        let x = euler_sample(decay, &x0, &Timesteps::uniform(10).unwrap()).unwrap();
        assert!((x.data()[0] - 0.9f64.powi(10)).abs() < 1e-12);
        assert!((x.data()[0] - 0.34868).abs() < 1e-5);
        let one = euler_sample(decay, &x0, &Timesteps::uniform(1).unwrap()).unwrap();
        assert_eq!(one.data(), &[0.0]);
    }

    #[test]
    fn midpoint_exact_for_linear_time() {
        let x0 = Tensor::full(&[1, 1], 0.0);
        let x = midpoint_sample(|_, t| Ok(Tensor::full(&[1, 1], 3.0 * t + 1.0)), &x0, &Timesteps::uniform(3).unwrap()).unwrap();
        assert!((x.data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rk4_accuracy() {
        let x0 = Tensor::full(&[1, 1], 1.0);
        let x = rk_sample(&ButcherTableau::rk4(), decay, &x0, &Timesteps::uniform(10).unwrap()).unwrap();
        assert!((x.data()[0] - (-1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn invalid_tableaux() {
        assert!(ButcherTableau::new(vec![vec![0.0]], vec![0.9], vec![0.0], 1).is_err());
        assert!(ButcherTableau::new(
            vec![vec![0.0, 0.5], vec![0.5, 0.0]],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            2
        )
        .is_err());
        assert!(ButcherTableau::new(vec![vec![0.0, 0.0], vec![0.5, 0.0]], vec![0.0, 1.0], vec![0.0, 0.4], 2).is_err());
    }

    #[test]
    fn guidance() {
        let c = Tensor::full(&[1, 2], 3.0);
        let u = Tensor::full(&[1, 2], 1.0);
        let x = Tensor::zeros(&[1, 2]);
        let at = |w: f64| {
            let mut v = cfg_velocity(|_: &Tensor, _| Ok(c.clone()), |_: &Tensor, _| Ok(u.clone()), w).unwrap();
            v(&x, 0.0).unwrap()
        };
        assert_eq!(at(0.0), u);
        assert_eq!(at(1.0), c);
        assert_eq!(at(2.0).data(), &[5.0, 5.0]);
        assert!(cfg_velocity(|_: &Tensor, _| Ok(c.clone()), |_: &Tensor, _| Ok(u.clone()), -1.0).is_err());
    }

    #[test]
    fn solver_names() {
        for s in [Solver::Euler, Solver::Midpoint, Solver::Rk4] {
            assert_eq!(s.to_string().parse::<Solver>().unwrap(), s);
        }
        assert_eq!(Solver::Midpoint.nfe(8), 16);
    }
}
