use std::path::Path;

use anyhow::Context;
use nextdit::contextdrop::DropSpec;
use nextdit::dit::{
    activation_probe, load_checkpoint, save_checkpoint, set_unit_gates, write_probe_csv,
    DitConfig, ModelParams, NormStyle, ProbeSpec, VelocityOptions,
};
use nextdit::flowlab::{
    density_pgm, energy_distance, gaussian_flow_velocity, toy_dataset, train, write_loss_csv,
    write_pgm, GaussianFlowSpec, Optimizer, ToyDataset, ToyFlow, TrainConfig,
};
use nextdit::partitioner::{best_partition, candidate_set, resize_target, write_candidates_csv};
use nextdit::rope::{
    freq_matrix, freq_rows, scaled_freqs, write_freq_csv, Convention, ScaleSpec, Strategy,
};
use nextdit::sampler::{
    diagnose, make_schedule, sample, write_diagnose_csv, write_schedule_csv, Form, ScheduleKind,
    ScheduleSpec, Solver, Timesteps,
};
use nextdit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::args::*;
use crate::output::{create, prepare, write_points};
use crate::ConfigError;

pub fn run(command: Command) -> anyhow::Result<String> {
    match command {
        Command::Schedule(a) => schedule(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::Sample(a) => sample_cmd(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::Diagnose(a) => diagnose_cmd(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::RopeScan(a) => rope_scan(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::Partition(a) => partition(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::Probe(a) => probe(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::Train(a) => train_cmd(load(a.flags, a.common.config.as_deref())?, &a.common.out),
        Command::Gen(a) => gen(load(a.flags, a.common.config.as_deref())?, &a.common.out),
    }
}

fn parse<T: std::str::FromStr<Err = nextdit::Error>>(value: &str) -> anyhow::Result<T> {
    Ok(value.parse::<T>()?)
}

/// Parses a snake_case enum name through serde.
fn parse_name<T: for<'de> Deserialize<'de>>(what: &str, value: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| ConfigError(format!("unknown {what} `{value}`")).into())
}

struct ScheduleInputs<'a> {
    kind: Option<&'a str>,
    sigma: Option<f64>,
    mu: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    steps: Option<usize>,
    form: Option<&'a str>,
}

fn schedule_spec(s: ScheduleInputs, default_steps: usize) -> anyhow::Result<ScheduleSpec> {
    let kind = match s.kind.unwrap_or("sigmoid") {
        "uniform" => ScheduleKind::Uniform,
        "rational" => ScheduleKind::Rational {
            sigma: s.sigma.unwrap_or(3.0),
        },
        "sigmoid" => ScheduleKind::Sigmoid {
            mu: s.mu.unwrap_or(0.6),
            alpha: s.alpha.unwrap_or(6.0),
            beta: s.beta.unwrap_or(20.0),
        },
        other => return Err(ConfigError(format!("unknown schedule `{other}`")).into()),
    };
    let form: Form = match s.form {
        Some(f) => parse(f)?,
        None => Form::default(),
    };
    Ok(ScheduleSpec::new(kind, s.steps.unwrap_or(default_steps)).with_form(form))
}

fn schedule(f: ScheduleFlags, out: &Path) -> anyhow::Result<String> {
    let spec = schedule_spec(
        ScheduleInputs {
            kind: f.kind.as_deref(),
            sigma: f.sigma,
            mu: f.mu,
            alpha: f.alpha,
            beta: f.beta,
            steps: f.steps,
            form: f.form.as_deref(),
        },
        20,
    )?;
    let ts = make_schedule(&spec)?;
    prepare(out)?;
    let (path, w) = create(out, "schedule.csv")?;
    write_schedule_csv(w, &ts)?;
    let grid = ts.as_slice();
    Ok(format!(
        "schedule: {} points, t_0={}, t_N={} -> {}",
        grid.len(),
        grid[0],
        grid[grid.len() - 1],
        path.display()
    ))
}

fn gaussian_spec(mean: Option<Vec<f64>>, std: Option<f64>, default_std: f64) -> anyhow::Result<GaussianFlowSpec> {
    let mean = mean.unwrap_or_else(|| vec![2.0, 2.0]);
    if mean.is_empty() {
        return Err(ConfigError("--mean needs at least one component".into()).into());
    }
    Ok(GaussianFlowSpec::new(mean, std.unwrap_or(default_std))?)
}

fn normal_points(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, dim], |_| StandardNormal.sample(&mut rng))
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.last_dim());
    let mean: Vec<f64> = (0..d).map(|j| (0..x.rows()).map(|r| x.row(r)[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| ((0..x.rows()).map(|r| (x.row(r)[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("({})", parts.join(", "))
}

fn drop_options(context_drop: Option<f64>) -> anyhow::Result<VelocityOptions> {
    Ok(VelocityOptions {
        context_drop: context_drop.map(DropSpec::new).transpose()?,
        rope_scale: None,
    })
}

fn sample_cmd(f: SampleFlags, out: &Path) -> anyhow::Result<String> {
    let spec = schedule_spec(
        ScheduleInputs {
            kind: f.kind.as_deref(),
            sigma: f.sigma,
            mu: f.mu,
            alpha: f.alpha,
            beta: f.beta,
            steps: f.steps,
            form: f.form.as_deref(),
        },
        8,
    )?;
    let ts = make_schedule(&spec)?;
    let solver: Solver = parse(f.solver.as_deref().unwrap_or("midpoint"))?;
    let n = f.n.unwrap_or(4096);
    let seed = f.seed.unwrap_or(0);
    let (x, source) = match &f.checkpoint {
        Some(dir) => {
            let flow = load_flow(dir)?;
            let opts = drop_options(f.context_drop)?;
            let x0 = normal_points(n, 2, seed);
            (sample(solver, |x, t| flow.velocity_with(x, t, &opts), &x0, &ts)?, "checkpoint")
        }
        None => {
            if f.context_drop.is_some() {
                return Err(ConfigError("--context-drop needs a --checkpoint".into()).into());
            }
            let g = gaussian_spec(f.mean.clone(), f.std, 0.5)?;
            let x0 = normal_points(n, g.mean.len(), seed);
            (sample(solver, |x, t| gaussian_flow_velocity(&g, x, t), &x0, &ts)?, "analytic")
        }
    };
    prepare(out)?;
    let path = write_points(out, "samples.csv", &x)?;
    let (mean, std) = column_stats(&x);
    Ok(format!(
        "sample: {source} flow, {solver} x {} steps (nfe {}), n={n}, mean {}, std {} -> {}",
        ts.steps(),
        solver.nfe(ts.steps()),
        fmt_vec(&mean),
        fmt_vec(&std),
        path.display()
    ))
}

fn diagnose_cmd(f: DiagnoseFlags, out: &Path) -> anyhow::Result<String> {
    let g = gaussian_spec(f.mean, f.std, 0.25)?;
    let ts = Timesteps::uniform(f.steps.unwrap_or(50))?;
    let x0 = normal_points(f.n.unwrap_or(256), g.mean.len(), f.seed.unwrap_or(0));
    let rows = diagnose(|x, t| gaussian_flow_velocity(&g, x, t), &x0, &ts, f.substeps.unwrap_or(100))?;
    prepare(out)?;
    let (path, w) = create(out, "diagnose.csv")?;
    write_diagnose_csv(w, &rows)?;
    let worst = rows
        .iter()
        .max_by(|a, b| a.tau.total_cmp(&b.tau))
        .expect("at least one step");
    Ok(format!(
        "diagnose: {} steps, max tau {:.3e} at t={:.3} -> {}",
        rows.len(),
        worst.tau,
        worst.t,
        path.display()
    ))
}

fn rope_scan(f: RopeScanFlags, out: &Path) -> anyhow::Result<String> {
    let convention: Convention = parse_name("convention", f.convention.as_deref().unwrap_or("consistent"))?;
    let base = freq_matrix(f.base.unwrap_or(5.0), f.dhead.unwrap_or(24), f.axes.unwrap_or(3))?
        .with_convention(convention);
    let strategies: Vec<Strategy> = match f.strategy.as_deref().unwrap_or("all") {
        "all" => Strategy::ALL.to_vec(),
        name => vec![parse(name)?],
    };
    let (s, extent, t) = (f.scale.unwrap_or(2.0), f.extent.unwrap_or(16.0), f.t.unwrap_or(1.0));
    let mut rows = Vec::new();
    for st in &strategies {
        let spec = ScaleSpec::new(*st, s, extent).at_time(t);
        let table = scaled_freqs(&base, &spec)?;
        rows.extend(freq_rows(st.name(), &table));
    }
    prepare(out)?;
    let (path, w) = create(out, "ropescan.csv")?;
    write_freq_csv(w, &rows)?;
    Ok(format!(
        "rope-scan: {} strategies, {} rows (s={s}, L={extent}) -> {}",
        strategies.len(),
        rows.len(),
        path.display()
    ))
}

fn partition(f: PartitionFlags, out: &Path) -> anyhow::Result<String> {
    let need = |name: &str| ConfigError(format!("--{name} is required"));
    let height = f.height.ok_or_else(|| need("height"))?;
    let width = f.width.ok_or_else(|| need("width"))?;
    let max_patches = f.max_patches.ok_or_else(|| need("max-patches"))?;
    let max_aspect = f.max_aspect.ok_or_else(|| need("max-aspect"))?;
    let patch = f.patch.unwrap_or(16);
    let candidates = candidate_set(max_patches, max_aspect, patch)?;
    let best = best_partition(height, width, &candidates)?;
    let (th, tw) = resize_target(&best);
    prepare(out)?;
    let (path, w) = create(out, "candidates.csv")?;
    write_candidates_csv(w, &candidates, height, width, &best)?;
    Ok(format!(
        "partition: grid ({},{}), target {th}x{tw} from {} candidates -> {}",
        best.h_p,
        best.w_p,
        candidates.len(),
        path.display()
    ))
}

fn probe(f: ProbeFlags, out: &Path) -> anyhow::Result<String> {
    let styles = match f.norm.as_deref().unwrap_or("both") {
        "both" => vec![NormStyle::Sandwich, NormStyle::PreNorm],
        "sandwich" => vec![NormStyle::Sandwich],
        "prenorm" | "pre_norm" => vec![NormStyle::PreNorm],
        other => return Err(ConfigError(format!("unknown norm `{other}`")).into()),
    };
    let seed = f.seed.unwrap_or(0);
    let size = f.size.unwrap_or(4);
    let spec = ProbeSpec {
        n_samples: f.samples.unwrap_or(500),
        timesteps: f.timesteps.unwrap_or_else(|| vec![0.0, 0.5, 1.0]),
        height: size,
        width: size,
        seed,
        ..ProbeSpec::default()
    };
    prepare(out)?;
    let mut parts = Vec::new();
    for style in styles {
        let cfg = DitConfig {
            dim: f.dim.unwrap_or(32),
            depth: f.layers.unwrap_or(24),
            q_heads: f.heads.unwrap_or(4),
            kv_heads: f.kv_heads.unwrap_or(2),
            norm: style,
            ..DitConfig::default()
        };
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&cfg, &mut rng);
        params.randomize(&mut rng, f.weight_std.unwrap_or(0.02));
        set_unit_gates(&mut params, &cfg);
        let rows = activation_probe(&params, &cfg, &spec)?;
        let name = match style {
            NormStyle::Sandwich => "sandwich",
            NormStyle::PreNorm => "prenorm",
        };
        let (_, w) = create(out, &format!("probe_{name}.csv"))?;
        write_probe_csv(w, &rows)?;
        let max = rows.iter().map(|r| r.rms_max).fold(0.0, f64::max);
        parts.push(format!("{name} max rms {max:.4}"));
    }
    Ok(format!("probe: {} -> {}", parts.join(", "), out.display()))
}

fn load_flow(dir: &Path) -> anyhow::Result<ToyFlow> {
    let (cfg, params) = load_checkpoint(dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok(ToyFlow { cfg, params })
}

fn sigmoid_grid(steps: usize) -> anyhow::Result<Timesteps> {
    Ok(make_schedule(&ScheduleSpec::new(ScheduleKind::sigmoid_default(), steps))?)
}

fn train_cmd(f: TrainFlags, out: &Path) -> anyhow::Result<String> {
    let dataset: ToyDataset = parse(f.dataset.as_deref().unwrap_or("eight_gaussians"))?;
    let seed = f.seed.unwrap_or(0);
    let mut cfg = ToyFlow::config(f.dim.unwrap_or(32), f.blocks.unwrap_or(2));
    cfg.norm = parse_name("norm", f.norm.as_deref().unwrap_or("sandwich"))?;
    let optimizer = match f.optimizer.as_deref().unwrap_or("adam") {
        "adam" => Optimizer::adam(),
        "sgd" => Optimizer::Sgd,
        other => return Err(ConfigError(format!("unknown optimizer `{other}`")).into()),
    };
    let tc = TrainConfig {
        steps: f.steps.unwrap_or(5000),
        batch: f.batch.unwrap_or(256),
        lr: f.lr.unwrap_or(2e-3),
        optimizer,
        seed,
        ..TrainConfig::default()
    };
    let data = toy_dataset(dataset, 20_000, seed)?;
    let held_out = toy_dataset(dataset, 2000, seed.wrapping_add(1))?;
    let mut flow = ToyFlow::new(cfg, seed)?;
    let report = train(&mut flow, &data, &tc)?;
    prepare(out)?;
    let (_, w) = create(out, "loss.csv")?;
    write_loss_csv(w, &report.losses)?;
    save_checkpoint(&out.join("checkpoint"), &flow.cfg, &flow.params)?;
    let samples = flow.sample(2000, Solver::Midpoint, &sigmoid_grid(8)?, seed.wrapping_add(2))?;
    write_points(out, "samples.csv", &samples)?;
    let (_, w) = create(out, "density.pgm")?;
    write_pgm(w, 128, 128, &density_pgm(&samples, 128, 6.0)?)?;
    let tail = &report.losses[report.losses.len().saturating_sub(50)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    Ok(format!(
        "train: {dataset}, {} steps, final loss {final_loss:.4}, energy distance {:.4} (midpoint+sigmoid, nfe 16) -> {}",
        tc.steps,
        energy_distance(&samples, &held_out)?,
        out.display()
    ))
}

fn gen(f: GenFlags, out: &Path) -> anyhow::Result<String> {
    let dir = f
        .checkpoint
        .as_deref()
        .ok_or_else(|| ConfigError("--checkpoint is required".into()))?;
    let flow = load_flow(dir)?;
    let spec = schedule_spec(
        ScheduleInputs {
            kind: f.kind.as_deref(),
            sigma: f.sigma,
            mu: f.mu,
            alpha: f.alpha,
            beta: f.beta,
            steps: f.steps,
            form: f.form.as_deref(),
        },
        8,
    )?;
    let ts = make_schedule(&spec)?;
    let solver: Solver = parse(f.solver.as_deref().unwrap_or("midpoint"))?;
    let n = f.n.unwrap_or(2000);
    let opts = drop_options(f.context_drop)?;
    let x0 = normal_points(n, 2, f.seed.unwrap_or(0));
    let x = sample(solver, |x, t| flow.velocity_with(x, t, &opts), &x0, &ts)?;
    prepare(out)?;
    let path = write_points(out, "samples.csv", &x)?;
    let px = f.pixels.unwrap_or(128);
    let (_, w) = create(out, "density.pgm")?;
    write_pgm(w, px, px, &density_pgm(&x, px, 6.0)?)?;
    Ok(format!(
        "gen: {n} samples, {solver} x {} steps (nfe {}) -> {}",
        ts.steps(),
        solver.nfe(ts.steps()),
        path.display()
    ))
}
