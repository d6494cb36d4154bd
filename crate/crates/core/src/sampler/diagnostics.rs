use std::io::Write;

use serde::Serialize;

use super::Timesteps;
use crate::error::{bail, Result};
use crate::numkernel::Tensor;

/// Mean over rows of the row-wise L2 norm of `a − b`.
fn batch_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.zip_map(b, |p, q| p - q)?;
    let rows = diff.rows();
    Ok((0..rows)
        .map(|r| diff.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64)
}

fn dense_euler<F>(v: &mut F, x: &Tensor, t0: f64, t1: f64, substeps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let h = (t1 - t0) / substeps as f64;
    let mut x = x.clone();
    for j in 0..substeps {
        let d = v(&x, t0 + j as f64 * h)?;
        x = x.zip_map(&d, |xv, dv| xv + h * dv)?;
    }
    Ok(x)
}

/// Local Euler error per anchor step.
///
/// From each oracle state `x_{t_i}` one Euler step `x̂` is compared against
/// `substeps` Euler sub-steps over the same interval; the oracle state then
/// advances to the sub-stepped value. `x0: [batch, dim]`.
pub fn truncation_error_profile<F>(mut v: F, x0: &Tensor, ts: &Timesteps, substeps: usize) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if substeps == 0 {
        bail!(Config, "oracle needs at least one sub-step");
    }
    let mut x = x0.clone();
    let mut tau = Vec::with_capacity(ts.steps());
    for (t0, t1) in ts.intervals() {
        let d = v(&x, t0)?;
        let h = t1 - t0;
        let x_hat = x.zip_map(&d, |xv, dv| xv + h * dv)?;
        let x_true = dense_euler(&mut v, &x, t0, t1, substeps)?;
        tau.push(batch_l2(&x_true, &x_hat)?);
        x = x_true;
    }
    Ok(tau)
}

/// Second-difference magnitude `‖x_i − (x_{i+1} + x_{i−1})/2‖` at interior
/// anchors `i = 1..N−1`, along the dense oracle trajectory.
pub fn curvature_profile<F>(mut v: F, x0: &Tensor, ts: &Timesteps, substeps: usize) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if ts.steps() < 3 {
        bail!(Config, "curvature needs at least 3 anchor steps, got {}", ts.steps());
    }
    if substeps == 0 {
        bail!(Config, "oracle needs at least one sub-step");
    }
    let mut traj = vec![x0.clone()];
    for (t0, t1) in ts.intervals() {
        let next = dense_euler(&mut v, traj.last().expect("non-empty"), t0, t1, substeps)?;
        traj.push(next);
    }
    let mut kappa = Vec::with_capacity(ts.steps() - 1);
    for i in 1..ts.steps() {
        let mid = traj[i - 1].zip_map(&traj[i + 1], |a, b| 0.5 * (a + b))?;
        kappa.push(batch_l2(&traj[i], &mid)?);
    }
    Ok(kappa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnoseRow {
    pub i: usize,
    pub t: f64,
    pub tau: f64,
    /// Undefined at the first and last anchor.
    pub kappa: Option<f64>,
}

/// τ and κ for every anchor step.
pub fn diagnose<F>(mut v: F, x0: &Tensor, ts: &Timesteps, substeps: usize) -> Result<Vec<DiagnoseRow>>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let tau = truncation_error_profile(&mut v, x0, ts, substeps)?;
    let kappa = curvature_profile(&mut v, x0, ts, substeps)?;
    Ok(tau
        .iter()
        .enumerate()
        .map(|(i, &tau)| DiagnoseRow {
            i,
            t: ts.as_slice()[i],
            tau,
            kappa: (i >= 1 && i <= kappa.len()).then(|| kappa[i - 1]),
        })
        .collect())
}

pub fn write_diagnose_csv<W: Write>(w: W, rows: &[DiagnoseRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot90(x: &Tensor, _t: f64) -> Result<Tensor> {
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            out.row_mut(r).copy_from_slice(&[-row[1], row[0]]);
        }
        Ok(out)
    }

    #[test]
    fn constant_field_has_no_error() {
        let x0 = Tensor::from_fn(&[3, 2], |i| i as f64);
        let c = Tensor::full(&[3, 2], 0.7);
        let ts = Timesteps::uniform(8).unwrap();
        let tau = truncation_error_profile(|_, _| Ok(c.clone()), &x0, &ts, 50).unwrap();
        assert!(tau.iter().all(|&v| v < 1e-12), "{tau:?}");
        let kappa = curvature_profile(|_, _| Ok(c.clone()), &x0, &ts, 50).unwrap();
        assert_eq!(kappa.len(), 7);
        assert!(kappa.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn circle_has_uniform_curvature() {
        let x0 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let kappa = curvature_profile(rot90, &x0, &Timesteps::uniform(10).unwrap(), 2000).unwrap();
        let (lo, hi) = kappa.iter().fold((f64::MAX, 0.0f64), |(l, h), &k| (l.min(k), h.max(k)));
        assert!(lo > 0.0);
        assert!(hi / lo < 1.05, "{kappa:?}");
    }

    #[test]
    fn too_few_anchors() {
        let x0 = Tensor::zeros(&[1, 2]);
        assert!(curvature_profile(rot90, &x0, &Timesteps::uniform(2).unwrap(), 10).is_err());
    }

    #[test]
    fn csv_leaves_endpoint_curvature_empty() {
        let x0 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let rows = diagnose(rot90, &x0, &Timesteps::uniform(3).unwrap(), 10).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].kappa.is_none() && rows[1].kappa.is_some() && rows[2].kappa.is_some());
        let mut buf = Vec::new();
        write_diagnose_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("i,t,tau,kappa\n0,0.0,"));
        assert!(text.lines().nth(1).unwrap().ends_with(','));
    }
}
