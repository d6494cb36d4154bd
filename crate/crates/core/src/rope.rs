//! Multi-axis rotary position embeddings and resolution-extrapolation strategies.
//!
//! The head dimension is split into `axes` contiguous chunks; chunk `a` holds
//! `K = d_head / (2·axes)` complex pairs stored as adjacent `(re, im)` lanes,
//! rotated by `coord_a · θ_j`. With `axes = 3` the chunks are `(t, h, w)`.
//!
//! Two conventions are supported for the scaling formulas. [`Convention::Consistent`]
//! measures every exponent against the per-axis table length `K`, which makes
//! frequency-aware scaling hit position interpolation exactly at `d_target` and
//! makes time-aware scaling sweep from interpolation (`t = 0`) to NTK (`t = 1`).
//! [`Convention::PaperLiteral`] keeps the published exponents and `θ·s`
//! interpolation verbatim.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    PaperLiteral,
    #[default]
    Consistent,
}

/// Per-axis rotary frequency tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeFreqs {
    pub axes: usize,
    pub d_head: usize,
    pub base: f64,
    /// `theta[a][j]`: frequency of pair `j` on axis `a`.
    pub theta: Vec<Vec<f64>>,
    pub convention: Convention,
}

impl RopeFreqs {
    /// Pairs per axis.
    pub fn pairs_per_axis(&self) -> usize {
        self.d_head / (2 * self.axes)
    }

    pub fn with_convention(mut self, convention: Convention) -> Self {
        self.convention = convention;
        self
    }
}

/// Token coordinates `(t, h, w)`. A table with `axes` axes reads the last
/// `axes` components, so 1-D sequences keep their position in `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coords(pub Vec<[f64; 3]>);

impl Coords {
    pub fn sequence(n: usize) -> Self {
        Coords((0..n).map(|i| [0.0, 0.0, i as f64]).collect())
    }

    /// Row-major `h×w` grid with `t = 0`.
    pub fn grid(h: usize, w: usize) -> Self {
        Coords(
            (0..h)
                .flat_map(|i| (0..w).map(move |j| [0.0, i as f64, j as f64]))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Coords(
            self.0
                .iter()
                .map(|c| [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]])
                .collect(),
        )
    }

    /// Component read by axis `a` of an `axes`-axis table.
    fn axis(&self, token: usize, axes: usize, a: usize) -> f64 {
        self.0[token][3 - axes + a]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Extrapolate,
    Interpolate,
    Ntk,
    FreqAware,
    TimeAware,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Extrapolate,
        Strategy::Interpolate,
        Strategy::Ntk,
        Strategy::FreqAware,
        Strategy::TimeAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Extrapolate => "extrapolate",
            Strategy::Interpolate => "interpolate",
            Strategy::Ntk => "ntk",
            Strategy::FreqAware => "freq_aware",
            Strategy::TimeAware => "time_aware",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown RoPE strategy '{s}'")))
    }
}

/// How one axis is extended beyond its training extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    pub strategy: Strategy,
    /// Extension factor `test_extent / train_extent`, at least 1.
    pub s: f64,
    /// Maximal training extent in tokens (used by frequency-aware scaling).
    pub train_extent: f64,
    /// Diffusion time in `[0, 1]` (time-aware scaling only).
    pub t: f64,
}

impl ScaleSpec {
    pub fn new(strategy: Strategy, s: f64, train_extent: f64) -> Self {
        Self {
            strategy,
            s,
            train_extent,
            t: 1.0,
        }
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.s >= 1.0) {
            bail!(Config, "scale factor s must be >= 1, got {}", self.s);
        }
        if !(0.0..=1.0).contains(&self.t) {
            bail!(Config, "time t must lie in [0, 1], got {}", self.t);
        }
        Ok(())
    }
}

/// Base frequency tables: `θ_d = base^(−(2·axes)·d / d_head)` on every axis.
pub fn freq_matrix(base: f64, d_head: usize, axes: usize) -> Result<RopeFreqs> {
    if !(1..=3).contains(&axes) {
        bail!(Config, "axes must be 1, 2 or 3, got {axes}");
    }
    if d_head == 0 || d_head % (2 * axes) != 0 {
        bail!(Config, "d_head={d_head} is not divisible by 2*axes={}", 2 * axes);
    }
    if !(base > 1.0) {
        bail!(Config, "rotary base must exceed 1, got {base}");
    }
    let k = d_head / (2 * axes);
    let table: Vec<f64> = (0..k).map(|d| theta_at(base, k, d as f64)).collect();
    Ok(RopeFreqs {
        axes,
        d_head,
        base,
        theta: vec![table; axes],
        convention: Convention::default(),
    })
}

/// `base^(−d/K)`, the frequency of (possibly fractional) pair index `d`.
fn theta_at(base: f64, k: usize, d: f64) -> f64 {
    base.powf(-d / k as f64)
}

/// `λ_d = 2π / θ_d` for every axis.
pub fn wavelength(freqs: &RopeFreqs) -> Vec<Vec<f64>> {
    freqs
        .theta
        .iter()
        .map(|axis| axis.iter().map(|&th| 2.0 * PI / th).collect())
        .collect()
}

/// The real-valued pair index whose wavelength equals the training extent `L`.
pub fn d_target(
    base: f64,
    d_head: usize,
    axes: usize,
    train_extent: f64,
    convention: Convention,
) -> Result<f64> {
    if !(train_extent > 2.0 * PI) {
        bail!(Domain, "training extent {train_extent} must exceed 2*pi");
    }
    let log_b = (train_extent / (2.0 * PI)).ln() / base.ln();
    Ok(match convention {
        Convention::Consistent => (d_head / (2 * axes)) as f64 * log_b,
        Convention::PaperLiteral => d_head as f64 * log_b,
    })
}

/// Scaled frequency at (possibly fractional) pair index `d` of an axis whose
/// unscaled table is `base^(−d/K)`.
pub fn scaled_theta_at(
    base: f64,
    d_head: usize,
    axes: usize,
    convention: Convention,
    spec: &ScaleSpec,
    d: f64,
) -> Result<f64> {
    spec.validate()?;
    let k = d_head / (2 * axes);
    let s = spec.s;
    let theta = theta_at(base, k, d);
    let kf = k as f64;
    let dh = d_head as f64;
    // b' -> b'^(−d/K)
    let rebased = |b_prime: f64| theta_at(b_prime, k, d);
    Ok(match convention {
        Convention::Consistent => match spec.strategy {
            Strategy::Extrapolate => theta,
            Strategy::Interpolate => theta / s,
            Strategy::Ntk => ntk_consistent(base, k, s, d),
            Strategy::FreqAware => {
                let dt = d_target(base, d_head, axes, spec.train_extent, convention)?;
                freq_aware_consistent(base, k, s, dt, d)
            }
            Strategy::TimeAware => {
                // Paper's d_t in [1, d_head] mapped affinely onto pair indices [0, K-1].
                let d_t = (dh - 1.0) * spec.t + 1.0;
                let d_eff = (kf - 1.0) * (d_t - 1.0) / (dh - 1.0);
                freq_aware_consistent(base, k, s, d_eff, d)
            }
        },
        Convention::PaperLiteral => match spec.strategy {
            Strategy::Extrapolate => theta,
            Strategy::Interpolate => theta * s,
            Strategy::Ntk => rebased(base * s),
            Strategy::FreqAware => {
                let dt = d_target(base, d_head, axes, spec.train_extent, convention)?;
                rebased(base * s.powf(dh / dt)).max(theta * s)
            }
            Strategy::TimeAware => {
                let d_t = (dh - 1.0) * spec.t + 1.0;
                rebased(base * s.powf(dh / d_t)).max(theta * s)
            }
        },
    })
}

/// NTK-aware scaling with `b' = b·s^(K/(K−1))`, so the last pair matches interpolation.
fn ntk_consistent(base: f64, k: usize, s: f64, d: f64) -> f64 {
    if k == 1 {
        // A single pair is both the highest and the lowest frequency; it is interpolated.
        return theta_at(base, k, d) / s;
    }
    freq_aware_consistent(base, k, s, (k - 1) as f64, d)
}

/// `max(b'^(−d/K), θ_d / s)` with `b' = b·s^(K/d_target)`.
///
/// `d_target <= 0` leaves no extrapolated pairs: everything is interpolated.
fn freq_aware_consistent(base: f64, k: usize, s: f64, d_target: f64, d: f64) -> f64 {
    let theta = theta_at(base, k, d);
    if d_target <= 0.0 {
        return theta / s;
    }
    let b_prime = base * s.powf(k as f64 / d_target);
    theta_at(b_prime, k, d).max(theta / s)
}

/// Applies the same scaling to every axis.
pub fn scaled_freqs(freqs: &RopeFreqs, spec: &ScaleSpec) -> Result<RopeFreqs> {
    scaled_freqs_per_axis(freqs, &vec![*spec; freqs.axes])
}

/// Scales each axis independently; `specs[a]` applies to axis `a`.
pub fn scaled_freqs_per_axis(freqs: &RopeFreqs, specs: &[ScaleSpec]) -> Result<RopeFreqs> {
    if specs.len() != freqs.axes {
        bail!(
            Config,
            "{} scale specs for {} axes",
            specs.len(),
            freqs.axes
        );
    }
    let k = freqs.pairs_per_axis();
    let mut theta = Vec::with_capacity(freqs.axes);
    for spec in specs {
        let table = (0..k)
            .map(|d| {
                scaled_theta_at(
                    freqs.base,
                    freqs.d_head,
                    freqs.axes,
                    freqs.convention,
                    spec,
                    d as f64,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        theta.push(table);
    }
    Ok(RopeFreqs {
        theta,
        ..freqs.clone()
    })
}

/// Rotation angles `[n, d_head/2]` for each token and pair.
pub fn rope_angles(coords: &Coords, freqs: &RopeFreqs) -> Tensor<f64> {
    let k = freqs.pairs_per_axis();
    let half = freqs.d_head / 2;
    let mut out = Vec::with_capacity(coords.len() * half);
    for tok in 0..coords.len() {
        for (a, axis) in freqs.theta.iter().enumerate() {
            let c = coords.axis(tok, freqs.axes, a);
            out.extend(axis.iter().take(k).map(|&th| c * th));
        }
    }
    Tensor::new(vec![coords.len(), half], out).expect("angle table shape")
}

/// Rotates every `d_head`-wide head of each row by the row's angles.
/// `inverse` rotates by the negated angles.
pub(crate) fn rotate_rows(
    data: &mut [f64],
    width: usize,
    angles: &Tensor<f64>,
    inverse: bool,
) {
    let half = angles.last_dim();
    let d_head = 2 * half;
    for (r, row) in data.chunks_mut(width).enumerate() {
        let ang = angles.row(r);
        for head in row.chunks_mut(d_head) {
            for (j, &phi) in ang.iter().enumerate() {
                let (sin, cos) = phi.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = x0 * cos - x1 * sin;
                head[2 * j + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

/// Rotates each row of `x: [n, d_head]` by its token's coordinates.
pub fn apply_rope(x: &Tensor<f64>, coords: &Coords, freqs: &RopeFreqs) -> Result<Tensor<f64>> {
    if x.rank() != 2 || x.shape()[1] != freqs.d_head {
        bail!(
            Dimension,
            "expected [n, {}], got {:?}",
            freqs.d_head,
            x.shape()
        );
    }
    if x.shape()[0] != coords.len() {
        bail!(
            Dimension,
            "{} tokens but {} coordinates",
            x.shape()[0],
            coords.len()
        );
    }
    let mut out = x.clone();
    let angles = rope_angles(coords, freqs);
    rotate_rows(out.data_mut(), freqs.d_head, &angles, false);
    Ok(out)
}

/// `logits[m, n] = Re Σ_pairs q_m · conj(k_n) · e^{iθ·(coord_m − coord_n)}`.
pub fn rope_attention_logits(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    coords_q: &Coords,
    coords_k: &Coords,
    freqs: &RopeFreqs,
) -> Result<Tensor<f64>> {
    for (x, c, name) in [(q, coords_q, "q"), (k, coords_k, "k")] {
        if x.rank() != 2 || x.shape()[1] != freqs.d_head || x.shape()[0] != c.len() {
            bail!(
                Dimension,
                "{name} has shape {:?} with {} coordinates, d_head {}",
                x.shape(),
                c.len(),
                freqs.d_head
            );
        }
    }
    let (nq, nk) = (q.shape()[0], k.shape()[0]);
    let pairs = freqs.pairs_per_axis();
    let mut out = Vec::with_capacity(nq * nk);
    for m in 0..nq {
        let qm = q.row(m);
        for n in 0..nk {
            let kn = k.row(n);
            let mut acc = 0.0;
            for (a, axis) in freqs.theta.iter().enumerate() {
                let delta = coords_q.axis(m, freqs.axes, a) - coords_k.axis(n, freqs.axes, a);
                for (j, &th) in axis.iter().enumerate() {
                    let p = 2 * (a * pairs + j);
                    // q·conj(k) = (q0 k0 + q1 k1) + i (q1 k0 − q0 k1)
                    let re = qm[p] * kn[p] + qm[p + 1] * kn[p + 1];
                    let im = qm[p + 1] * kn[p] - qm[p] * kn[p + 1];
                    let (sin, cos) = (delta * th).sin_cos();
                    acc += re * cos - im * sin;
                }
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![nq, nk], out)
}

/// Fourier features of 3-D points with time-aware frequency scaling:
/// `θ'_j = θ_j · s^(d_head / d_t)`, `d_t = (d_head − 1)·t + 1`.
///
/// `theta: [m, 3]` holds one frequency vector per row; the output is
/// `[n, 2m]` with `(cos, sin)` interleaved per frequency.
pub fn scaled_fourier_features(
    points: &Tensor<f64>,
    theta: &Tensor<f64>,
    d_head: usize,
    t: f64,
    s: f64,
) -> Result<Tensor<f64>> {
    if points.rank() != 2 || points.shape()[1] != 3 || theta.rank() != 2 || theta.shape()[1] != 3 {
        bail!(
            Dimension,
            "points {:?} and frequencies {:?} must both be [_, 3]",
            points.shape(),
            theta.shape()
        );
    }
    if !(0.0..=1.0).contains(&t) || !(s >= 1.0) || d_head == 0 {
        bail!(Config, "need t in [0,1], s >= 1, d_head > 0");
    }
    let d_t = (d_head as f64 - 1.0) * t + 1.0;
    let factor = s.powf(d_head as f64 / d_t);
    let m = theta.shape()[0];
    let mut out = Vec::with_capacity(points.shape()[0] * 2 * m);
    for i in 0..points.shape()[0] {
        let p = points.row(i);
        for j in 0..m {
            let th = theta.row(j);
            let proj: f64 = th.iter().zip(p).map(|(a, b)| a * factor * b).sum();
            let (sin, cos) = (2.0 * PI * proj).sin_cos();
            out.push(cos);
            out.push(sin);
        }
    }
    Tensor::new(vec![points.shape()[0], 2 * m], out)
}

/// One row of a frequency scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreqRow {
    pub strategy: String,
    pub axis: usize,
    pub d: usize,
    pub theta: f64,
    pub lambda: f64,
}

pub fn freq_rows(strategy: &str, freqs: &RopeFreqs) -> Vec<FreqRow> {
    let lambdas = wavelength(freqs);
    let mut rows = Vec::new();
    for (a, axis) in freqs.theta.iter().enumerate() {
        for (d, &th) in axis.iter().enumerate() {
            rows.push(FreqRow {
                strategy: strategy.to_string(),
                axis: a,
                d,
                theta: th,
                lambda: lambdas[a][d],
            });
        }
    }
    rows
}

/// CSV with header `strategy,axis,d,theta,lambda`.
pub fn write_freq_csv<W: Write>(w: W, rows: &[FreqRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
