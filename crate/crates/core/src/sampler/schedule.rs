use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Uniform,
    Rational { sigma: f64 },
    Sigmoid { mu: f64, alpha: f64, beta: f64 },
}

impl ScheduleKind {
    /// Sigmoid with `μ = 0.6, α = 6, β = 20`.
    pub fn sigmoid_default() -> Self {
        Self::Sigmoid {
            mu: 0.6,
            alpha: 6.0,
            beta: 20.0,
        }
    }
}

/// Whether warps are used verbatim or rescaled to hit both endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    #[serde(alias = "literal")]
    PaperLiteral,
    #[default]
    #[serde(alias = "normalized")]
    EndpointNormalized,
}

impl FromStr for Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" | "paper_literal" | "paper-literal" => Ok(Self::PaperLiteral),
            "normalized" | "endpoint_normalized" | "endpoint-normalized" => {
                Ok(Self::EndpointNormalized)
            }
            other => Err(Error::Config(format!("unknown schedule form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default)]
    pub form: Form,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            form: Form::default(),
        }
    }

    pub fn with_form(mut self, form: Form) -> Self {
        self.form = form;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail!(Config, "a schedule needs at least one step");
        }
        match self.kind {
            ScheduleKind::Uniform => {}
            ScheduleKind::Rational { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    bail!(Config, "sigma must be positive, got {sigma}");
                }
                if self.form == Form::PaperLiteral && sigma < 1.0 {
                    bail!(Config, "literal rational warp leaves [0, 1] for sigma {sigma} < 1");
                }
            }
            ScheduleKind::Sigmoid { mu, alpha, beta } => {
                if !(mu > 0.0 && mu < 1.0) {
                    bail!(Config, "mu must lie in (0, 1), got {mu}");
                }
                if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    bail!(Config, "alpha and beta must be positive");
                }
            }
        }
        Ok(())
    }
}

/// The two-branch sigmoid warp before any rescaling.
pub fn sigmoid_raw(t: f64, mu: f64, alpha: f64, beta: f64) -> f64 {
    if t < mu {
        1.0 / (1.0 + (-alpha * (t - mu)).exp())
    } else {
        1.0 - 1.0 / (1.0 + (beta * (t - mu)).exp())
    }
}

/// Time warp `t ↦ t'` for one grid point.
pub fn warp(kind: ScheduleKind, form: Form, t: f64) -> f64 {
    match (kind, form) {
        (ScheduleKind::Uniform, _) => t,
        (ScheduleKind::Rational { sigma }, Form::PaperLiteral) => t / (sigma + (sigma - 1.0) * t),
        (ScheduleKind::Rational { sigma }, Form::EndpointNormalized) => {
            sigma * t / (1.0 + (sigma - 1.0) * t)
        }
        (ScheduleKind::Sigmoid { mu, alpha, beta }, Form::PaperLiteral) => {
            sigmoid_raw(t, mu, alpha, beta)
        }
        (ScheduleKind::Sigmoid { mu, alpha, beta }, Form::EndpointNormalized) => {
            let lo = sigmoid_raw(0.0, mu, alpha, beta);
            let hi = sigmoid_raw(1.0, mu, alpha, beta);
            (sigmoid_raw(t, mu, alpha, beta) - lo) / (hi - lo)
        }
    }
}

/// Strictly increasing time grid `t_0 < … < t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Timesteps(Vec<f64>);

impl Timesteps {
    pub fn new(ts: Vec<f64>) -> Result<Self> {
        if ts.len() < 2 {
            bail!(Config, "a time grid needs at least two points");
        }
        if ts.iter().any(|t| !t.is_finite() || !(0.0..=1.0).contains(t)) {
            bail!(Domain, "time grid leaves [0, 1]");
        }
        if ts.windows(2).any(|w| w[1] <= w[0]) {
            bail!(Internal, "time grid is not strictly increasing");
        }
        Ok(Self(ts))
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        make_schedule(&ScheduleSpec::new(ScheduleKind::Uniform, steps))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }

    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }
}

impl fmt::Display for Timesteps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Applies the warp to the uniform grid `i/N`.
pub fn make_schedule(spec: &ScheduleSpec) -> Result<Timesteps> {
    spec.validate()?;
    let n = spec.steps;
    let ts = (0..=n)
        .map(|i| {
            let t = warp(spec.kind, spec.form, i as f64 / n as f64);
            match spec.form {
                // clamp the last ulp of rounding at the rescaled endpoints
                Form::EndpointNormalized if i == 0 => 0.0,
                Form::EndpointNormalized if i == n => 1.0,
                _ => t,
            }
        })
        .collect();
    Timesteps::new(ts)
}

#[derive(Serialize)]
struct ScheduleRow {
    i: usize,
    t: f64,
}

pub fn write_schedule_csv<W: Write>(w: W, ts: &Timesteps) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (i, &t) in ts.as_slice().iter().enumerate() {
        out.serialize(ScheduleRow { i, t })?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_sigma_one_is_uniform() {
        for form in [Form::PaperLiteral, Form::EndpointNormalized] {
            let spec = ScheduleSpec::new(ScheduleKind::Rational { sigma: 1.0 }, 7).with_form(form);
            assert_eq!(make_schedule(&spec).unwrap(), Timesteps::uniform(7).unwrap());
        }
    }

    #[test]
    fn rational_examples() {
        let k = ScheduleKind::Rational { sigma: 3.0 };
        assert_eq!(warp(k, Form::EndpointNormalized, 0.5), 0.75);
        assert!((warp(k, Form::PaperLiteral, 1.0) - 1.0 / 5.0).abs() < 1e-15);
        let lit = make_schedule(&ScheduleSpec::new(k, 4).with_form(Form::PaperLiteral)).unwrap();
        assert!(*lit.as_slice().last().unwrap() < 1.0);
        let bad = ScheduleSpec::new(ScheduleKind::Rational { sigma: 0.5 }, 4).with_form(Form::PaperLiteral);
        assert!(make_schedule(&bad).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert!((sigmoid_raw(0.0, 0.6, 6.0, 20.0) - 1.0 / (1.0 + 3.6f64.exp())).abs() < 1e-15);
        assert!((sigmoid_raw(0.0, 0.6, 6.0, 20.0) - 0.0266).abs() < 1e-4);
        assert_eq!(sigmoid_raw(0.6, 0.6, 6.0, 20.0), 0.5);
        let ts = make_schedule(&ScheduleSpec::new(ScheduleKind::sigmoid_default(), 20)).unwrap();
        assert_eq!(ts.as_slice()[0], 0.0);
        assert_eq!(ts.as_slice()[20], 1.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(make_schedule(&ScheduleSpec::new(ScheduleKind::Uniform, 0)).is_err());
        let s = ScheduleKind::Sigmoid {
            mu: 1.0,
            alpha: 1.0,
            beta: 1.0,
        };
        assert!(make_schedule(&ScheduleSpec::new(s, 4)).is_err());
        assert!("bogus".parse::<Form>().is_err());
    }

    #[test]
    fn csv_schema() {
        let mut buf = Vec::new();
        write_schedule_csv(&mut buf, &Timesteps::uniform(2).unwrap()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,t\n0,0.0\n1,0.5\n2,1.0\n");
    }
}
