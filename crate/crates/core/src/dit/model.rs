use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BlockParams, DitConfig, Mode, ModelParams, NormStyle};
use crate::autograd::{AttnShape, Graph, Var};
use crate::contextdrop::{drop_ratio, pooled_coords, window_for_ratio, DropSpec};
use crate::error::{bail, Result};
use crate::numkernel::{pool_windows, Tensor};
use crate::partitioner::TokenMask;
use crate::rope::{freq_matrix, rope_angles, scaled_freqs_per_axis, Coords, RopeFreqs, ScaleSpec};

/// Key/value pooling on a per-sample `h×w` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvPool {
    pub grid: (usize, usize),
    pub window: (usize, usize),
}

/// How the `batch·n` token rows of a forward pass are organised.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    pub batch: usize,
    /// Tokens per sample (including padding).
    pub n: usize,
    /// One coordinate per token row.
    pub coords: Coords,
    /// Per token row validity; invalid tokens are never attended to.
    pub key_mask: Option<Vec<bool>>,
    pub kv_pool: Option<KvPool>,
    /// Frequency tables; the config's unscaled tables when `None`.
    pub freqs: Option<RopeFreqs>,
}

impl BatchLayout {
    /// `batch` samples sharing the same token coordinates.
    pub fn shared(batch: usize, coords: &Coords) -> Self {
        let all = (0..batch).flat_map(|_| coords.0.iter().copied()).collect();
        Self {
            batch,
            n: coords.len(),
            coords: Coords(all),
            key_mask: None,
            kv_pool: None,
            freqs: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.n
    }
}

/// Per-sample time and optional class label.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub t: &'a [f64],
    pub labels: Option<&'a [usize]>,
}

/// Sinusoidal time features `[cos(1000·t·f_i), sin(1000·t·f_i)]`, `f_i = 10000^(−i/half)`.
pub fn time_features(t: &[f64], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(t.len() * width);
    for &tv in t {
        let args: Vec<f64> = (0..half)
            .map(|i| 1000.0 * tv * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::new(vec![t.len(), width], data).expect("time feature shape")
}

struct BlockCtx {
    batch: usize,
    n: usize,
    n_k: usize,
    q_angles: Tensor,
    k_angles: Tensor,
    pool_groups: Option<Vec<Vec<usize>>>,
    key_mask: Option<Vec<bool>>,
    /// Conditioning embedding `[batch, dim]` (generative mode).
    cond: Option<Var>,
}

impl BlockCtx {
    fn new(cfg: &DitConfig, layout: &BatchLayout, cond: Option<Var>) -> Result<Self> {
        if layout.coords.len() != layout.rows() {
            bail!(
                Dimension,
                "{} coordinates for {} token rows",
                layout.coords.len(),
                layout.rows()
            );
        }
        let freqs = match &layout.freqs {
            Some(f) => f.clone(),
            None => freq_matrix(cfg.rope_base, cfg.d_head(), cfg.rope_axes)?,
        };
        if freqs.d_head != cfg.d_head() {
            bail!(Config, "frequency table d_head {} != {}", freqs.d_head, cfg.d_head());
        }
        let q_angles = rope_angles(&layout.coords, &freqs);
        let (n_k, k_angles, pool_groups) = match layout.kv_pool {
            Some(pool) if pool.window != (1, 1) => {
                if layout.key_mask.is_some() {
                    bail!(Config, "key/value pooling cannot be combined with a pad mask");
                }
                if pool.grid.0 * pool.grid.1 != layout.n {
                    bail!(Grid, "{:?} grid for {} tokens", pool.grid, layout.n);
                }
                let base = pool_windows(pool.grid, pool.window)?;
                let mut groups = Vec::with_capacity(base.len() * layout.batch);
                let mut coords = Vec::with_capacity(base.len() * layout.batch);
                for b in 0..layout.batch {
                    let off = b * layout.n;
                    let sample = Coords(layout.coords.0[off..off + layout.n].to_vec());
                    coords.extend(pooled_coords(&sample, pool.grid, pool.window)?.0);
                    groups.extend(base.iter().map(|g| g.iter().map(|&i| i + off).collect()));
                }
                (base.len(), rope_angles(&Coords(coords), &freqs), Some(groups))
            }
            _ => (layout.n, q_angles.clone(), None),
        };
        Ok(Self {
            batch: layout.batch,
            n: layout.n,
            n_k,
            q_angles,
            k_angles,
            pool_groups,
            key_mask: layout.key_mask.clone(),
            cond,
        })
    }
}

fn param(v: &Option<Var>, name: &str) -> Result<Var> {
    v.ok_or_else(|| crate::Error::Config(format!("parameter {name} missing for this mode")))
}

/// RMS-normalizes each `d_head` slice of every row.
fn head_norm(g: &mut Graph, x: Var, gain: Var, d_head: usize, eps: f64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let flat = g.reshape(x, &[n / d_head, d_head])?;
    let normed = g.rms_norm(flat, gain, eps)?;
    g.reshape(normed, &shape)
}

fn attention_branch(
    g: &mut Graph,
    bp: &BlockParams<Var>,
    cfg: &DitConfig,
    h: Var,
    ctx: &BlockCtx,
) -> Result<Var> {
    let dh = cfg.d_head();
    let q = g.matmul(h, bp.wq)?;
    let k = g.matmul(h, bp.wk)?;
    let v = g.matmul(h, bp.wv)?;
    let q = head_norm(g, q, bp.q_norm, dh, cfg.eps)?;
    let k = head_norm(g, k, bp.k_norm, dh, cfg.eps)?;
    let q = g.rope(q, ctx.q_angles.clone())?;
    let (k, v) = match &ctx.pool_groups {
        Some(groups) => (
            g.group_mean(k, groups.clone())?,
            g.group_mean(v, groups.clone())?,
        ),
        None => (k, v),
    };
    let k = g.rope(k, ctx.k_angles.clone())?;
    let o = g.attention(
        q,
        k,
        v,
        AttnShape {
            batch: ctx.batch,
            n_q: ctx.n,
            n_k: ctx.n_k,
            q_heads: cfg.q_heads,
            kv_heads: cfg.kv_heads,
            d_head: dh,
            scale: 1.0 / (dh as f64).sqrt(),
            key_mask: ctx.key_mask.clone(),
        },
    )?;
    g.matmul(o, bp.wo)
}

fn mlp_branch(g: &mut Graph, bp: &BlockParams<Var>, h: Var) -> Result<Var> {
    let z = g.matmul(h, bp.w1)?;
    let z = g.add_row(z, bp.b1)?;
    let z = g.silu(z);
    let z = g.matmul(z, bp.w2)?;
    g.add_row(z, bp.b2)
}

/// `h·(1 + scale) + shift`.
fn modulate(g: &mut Graph, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul(h, s)?;
    g.add(h, shift)
}

enum Gate {
    /// Gate predicted by AdaLN, broadcast to `[rows, dim]`.
    Channels(Var),
    /// Learned scalar (recognition).
    Scalar(Var),
}

fn residual(
    g: &mut Graph,
    cfg: &DitConfig,
    x: Var,
    branch: Var,
    post_norm: Var,
    gate: Gate,
) -> Result<Var> {
    let sandwich = cfg.norm == NormStyle::Sandwich;
    let b = if sandwich {
        g.rms_norm(branch, post_norm, cfg.eps)?
    } else {
        branch
    };
    let gated = match gate {
        Gate::Channels(gv) => {
            let gv = if sandwich { g.tanh(gv) } else { gv };
            g.mul(b, gv)?
        }
        Gate::Scalar(s) => {
            let s = g.tanh(s);
            g.scale_by(b, s)?
        }
    };
    g.add(x, gated)
}

fn block(
    g: &mut Graph,
    bp: &BlockParams<Var>,
    cfg: &DitConfig,
    x: Var,
    ctx: &BlockCtx,
) -> Result<Var> {
    let d = cfg.dim;
    // [shift, scale] for attention and the MLP, then one gate channel per branch
    let mods = match cfg.mode {
        Mode::Generative => {
            let c = ctx
                .cond
                .ok_or_else(|| crate::Error::Config("generative block needs conditioning".into()))?;
            let a = g.silu(c);
            let m = g.matmul(a, param(&bp.ada_w, "ada_w")?)?;
            let m = g.add_row(m, param(&bp.ada_b, "ada_b")?)?;
            let m = g.repeat_rows(m, ctx.n);
            let mut parts = Vec::with_capacity(6);
            for i in 0..4 {
                parts.push(g.slice_cols(m, i * d, d)?);
            }
            let ones = g.leaf(Tensor::full(&[1, d], 1.0));
            for b in 0..2 {
                let col = g.slice_cols(m, 4 * d + b, 1)?;
                parts.push(g.matmul(col, ones)?);
            }
            Some(parts)
        }
        Mode::Recognition => None,
    };
    let gate_for = |g: &mut Graph, branch: usize| -> Result<Gate> {
        Ok(match &mods {
            Some(m) => Gate::Channels(m[4 + branch]),
            None => {
                let s = g.slice_cols(param(&bp.gate, "gate")?, branch, 1)?;
                Gate::Scalar(s)
            }
        })
    };

    let mut h = g.rms_norm(x, bp.attn_pre_norm, cfg.eps)?;
    if let Some(m) = &mods {
        h = modulate(g, h, m[0], m[1])?;
    }
    let a = attention_branch(g, bp, cfg, h, ctx)?;
    let gate = gate_for(g, 0)?;
    let x = residual(g, cfg, x, a, bp.attn_post_norm, gate)?;

    let mut h = g.rms_norm(x, bp.mlp_pre_norm, cfg.eps)?;
    if let Some(m) = &mods {
        h = modulate(g, h, m[2], m[3])?;
    }
    let f = mlp_branch(g, bp, h)?;
    let gate = gate_for(g, 1)?;
    residual(g, cfg, x, f, bp.mlp_post_norm, gate)
}

/// Conditioning embedding `c = MLP(time features) [+ label embedding]`.
fn embed_condition(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &DitConfig,
    batch: usize,
    cond: &Conditioning,
) -> Result<Var> {
    if cond.t.len() != batch {
        bail!(Dimension, "{} times for a batch of {batch}", cond.t.len());
    }
    let feats = g.leaf(time_features(cond.t, cfg.time_features));
    let c = g.matmul(feats, param(&p.time_w1, "time_w1")?)?;
    let c = g.add_row(c, param(&p.time_b1, "time_b1")?)?;
    let c = g.silu(c);
    let c = g.matmul(c, param(&p.time_w2, "time_w2")?)?;
    let mut c = g.add_row(c, param(&p.time_b2, "time_b2")?)?;
    if let Some(table) = p.label_embed {
        let labels: Vec<usize> = match cond.labels {
            Some(l) if l.len() == batch => l.to_vec(),
            Some(l) => bail!(Dimension, "{} labels for a batch of {batch}", l.len()),
            None => vec![cfg.num_classes; batch],
        };
        let e = g.gather_rows(table, &labels)?;
        c = g.add(c, e)?;
    } else if cond.labels.is_some() {
        bail!(Config, "labels given to a model without a label embedding");
    }
    Ok(c)
}

/// Embeds tokens and runs every block; returns the hidden state after the
/// embedding and after each block.
fn trunk(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &DitConfig,
    tokens: &Tensor,
    layout: &BatchLayout,
    cond: Option<Var>,
) -> Result<Vec<Var>> {
    if tokens.rows() != layout.rows() || tokens.last_dim() != cfg.patch_dim() {
        bail!(
            Dimension,
            "tokens {:?} do not match {} rows of width {}",
            tokens.shape(),
            layout.rows(),
            cfg.patch_dim()
        );
    }
    let ctx = BlockCtx::new(cfg, layout, cond)?;
    let flat = tokens.clone().reshape(&[layout.rows(), cfg.patch_dim()])?;
    let t = g.leaf(flat);
    let x = g.matmul(t, p.patch_w)?;
    let mut x = g.add_row(x, p.patch_b)?;
    let mut hidden = vec![x];
    for bp in &p.blocks {
        x = block(g, bp, cfg, x, &ctx)?;
        hidden.push(x);
    }
    Ok(hidden)
}

/// Generative network on the tape: `[batch·n, patch_dim]` tokens to
/// `[batch·n, patch_dim]` velocity tokens. Also returns per-layer hidden states.
pub(crate) fn generative_trace(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &DitConfig,
    tokens: &Tensor,
    layout: &BatchLayout,
    cond: &Conditioning,
) -> Result<(Var, Vec<Var>)> {
    if cfg.mode != Mode::Generative {
        bail!(Config, "model is not in generative mode");
    }
    let c = embed_condition(g, p, cfg, layout.batch, cond)?;
    let hidden = trunk(g, p, cfg, tokens, layout, Some(c))?;
    let x = *hidden.last().expect("at least the embedding");
    let d = cfg.dim;
    let h = g.rms_norm(x, param(&p.final_norm, "final_norm")?, cfg.eps)?;
    let a = g.silu(c);
    let m = g.matmul(a, param(&p.final_ada_w, "final_ada_w")?)?;
    let m = g.add_row(m, param(&p.final_ada_b, "final_ada_b")?)?;
    let m = g.repeat_rows(m, layout.n);
    let shift = g.slice_cols(m, 0, d)?;
    let scale = g.slice_cols(m, d, d)?;
    let h = modulate(g, h, shift, scale)?;
    let out = g.matmul(h, param(&p.final_w, "final_w")?)?;
    let out = g.add_row(out, param(&p.final_b, "final_b")?)?;
    Ok((out, hidden))
}

/// Hidden states after the embedding and after every block, in either mode.
pub(crate) fn hidden_trace(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &DitConfig,
    tokens: &Tensor,
    layout: &BatchLayout,
    cond: &Conditioning,
) -> Result<Vec<Var>> {
    match cfg.mode {
        Mode::Generative => {
            let c = embed_condition(g, p, cfg, layout.batch, cond)?;
            trunk(g, p, cfg, tokens, layout, Some(c))
        }
        Mode::Recognition => trunk(g, p, cfg, tokens, layout, None),
    }
}

pub fn forward_graph(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &DitConfig,
    tokens: &Tensor,
    layout: &BatchLayout,
    cond: &Conditioning,
) -> Result<Var> {
    Ok(generative_trace(g, p, cfg, tokens, layout, cond)?.0)
}

/// Recognition network on the tape: masked mean of the final tokens through
/// the MLP head, `[batch, classes]`.
pub fn recognition_graph(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &DitConfig,
    tokens: &Tensor,
    layout: &BatchLayout,
) -> Result<Var> {
    if cfg.mode != Mode::Recognition {
        bail!(Config, "model is not in recognition mode");
    }
    let hidden = trunk(g, p, cfg, tokens, layout, None)?;
    let x = *hidden.last().expect("at least the embedding");
    let mut groups = Vec::with_capacity(layout.batch);
    for b in 0..layout.batch {
        let rows: Vec<usize> = (b * layout.n..(b + 1) * layout.n)
            .filter(|&r| layout.key_mask.as_ref().is_none_or(|m| m[r]))
            .collect();
        if rows.is_empty() {
            bail!(Domain, "sequence {b} has no valid tokens");
        }
        groups.push(rows);
    }
    let pooled = g.group_mean(x, groups)?;
    let z = g.matmul(pooled, param(&p.head_w1, "head_w1")?)?;
    let z = g.add_row(z, param(&p.head_b1, "head_b1")?)?;
    let z = g.silu(z);
    let z = g.matmul(z, param(&p.head_w2, "head_w2")?)?;
    g.add_row(z, param(&p.head_b2, "head_b2")?)
}

pub(crate) fn bind(g: &mut Graph, params: &ModelParams<Tensor>) -> ModelParams<Var> {
    params.map(|_, t| g.leaf(t.clone()))
}

/// Splits `[H, W, C]` into row-major `P×P` patches, each flattened as `(pi, pj, c)`.
pub fn patchify(img: &Tensor, patch: usize) -> Result<(Tensor, Coords)> {
    if img.rank() != 3 {
        bail!(Dimension, "patchify needs [H, W, C], got {:?}", img.shape());
    }
    let batched = img.clone().reshape(&[1, img.shape()[0], img.shape()[1], img.shape()[2]])?;
    let (tokens, coords) = patchify_batch(&batched, patch)?;
    Ok((tokens, coords))
}

/// `[B, H, W, C]` to `[B·n, P²·C]` tokens plus the per-sample grid coordinates.
pub fn patchify_batch(img: &Tensor, patch: usize) -> Result<(Tensor, Coords)> {
    if img.rank() != 4 {
        bail!(Dimension, "patchify_batch needs [B, H, W, C], got {:?}", img.shape());
    }
    let (b, h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        bail!(Dimension, "patch {patch} does not divide {h}x{w}");
    }
    let (hp, wp) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let d = img.data();
    let mut out = Vec::with_capacity(img.len());
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                for pi in 0..patch {
                    let y = i * patch + pi;
                    let start = ((bi * h + y) * w + j * patch) * c;
                    out.extend_from_slice(&d[start..start + patch * c]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b * hp * wp, pd], out)?, Coords::grid(hp, wp)))
}

pub fn unpatchify(tokens: &Tensor, height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor> {
    let img = unpatchify_batch(tokens, 1, height, width, channels, patch)?;
    img.reshape(&[height, width, channels])
}

pub fn unpatchify_batch(
    tokens: &Tensor,
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        bail!(Dimension, "patch {patch} does not divide {height}x{width}");
    }
    let (hp, wp) = (height / patch, width / patch);
    if tokens.len() != batch * height * width * channels || tokens.last_dim() != patch * patch * channels {
        bail!(Dimension, "tokens {:?} do not tile {batch}x{height}x{width}x{channels}", tokens.shape());
    }
    let mut out = vec![0.0; tokens.len()];
    let row = patch * channels;
    for bi in 0..batch {
        for i in 0..hp {
            for j in 0..wp {
                let tok = tokens.row((bi * hp + i) * wp + j);
                for pi in 0..patch {
                    let y = i * patch + pi;
                    let start = ((bi * height + y) * width + j * patch) * channels;
                    out[start..start + row].copy_from_slice(&tok[pi * row..(pi + 1) * row]);
                }
            }
        }
    }
    Tensor::new(vec![batch, height, width, channels], out)
}

/// Inference-time options for [`forward_velocity`].
#[derive(Debug, Clone, Default)]
pub struct VelocityOptions {
    /// Time-aware key/value pooling.
    pub context_drop: Option<DropSpec>,
    /// Per-axis RoPE scaling; the time of each spec is replaced by the call's `t`.
    pub rope_scale: Option<Vec<ScaleSpec>>,
}

/// Full generative network on plain tensors.
///
/// `tokens: [batch·n, patch_dim]` with shared `coords` for every sample.
pub fn forward_tokens(
    params: &ModelParams<Tensor>,
    cfg: &DitConfig,
    tokens: &Tensor,
    coords: &Coords,
    t: f64,
    label: Option<usize>,
) -> Result<Tensor> {
    let batch = tokens.rows() / coords.len().max(1);
    let layout = BatchLayout::shared(batch, coords);
    let times = vec![t; batch];
    let labels = label.map(|l| vec![l; batch]);
    let mut g = Graph::new();
    let p = bind(&mut g, params);
    let cond = Conditioning {
        t: &times,
        labels: labels.as_deref(),
    };
    let out = forward_graph(&mut g, &p, cfg, tokens, &layout, &cond)?;
    Ok(g.value(out).clone())
}

/// Velocity `v_θ(x_t, t)` for `x_t: [B, H, W, C]` (or a single `[H, W, C]`).
pub fn forward_velocity(
    params: &ModelParams<Tensor>,
    cfg: &DitConfig,
    x_t: &Tensor,
    t: f64,
    label: Option<usize>,
    opts: &VelocityOptions,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        bail!(Domain, "t = {t} outside [0, 1]");
    }
    let single = x_t.rank() == 3;
    let x4 = if single {
        let s = x_t.shape();
        x_t.clone().reshape(&[1, s[0], s[1], s[2]])?
    } else {
        x_t.clone()
    };
    if x4.rank() != 4 || x4.shape()[3] != cfg.in_channels {
        bail!(Dimension, "expected [B, H, W, {}], got {:?}", cfg.in_channels, x_t.shape());
    }
    let (b, h, w, c) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (tokens, coords) = patchify_batch(&x4, cfg.patch)?;
    let grid = (h / cfg.patch, w / cfg.patch);
    let mut layout = BatchLayout::shared(b, &coords);
    if let Some(spec) = &opts.context_drop {
        let window = window_for_ratio(drop_ratio(t, spec));
        layout.kv_pool = Some(KvPool { grid, window });
    }
    if let Some(specs) = &opts.rope_scale {
        let base = freq_matrix(cfg.rope_base, cfg.d_head(), cfg.rope_axes)?;
        let at_t: Vec<ScaleSpec> = specs.iter().map(|s| s.at_time(t)).collect();
        layout.freqs = Some(scaled_freqs_per_axis(&base, &at_t)?);
    }
    let times = vec![t; b];
    let labels = label.map(|l| vec![l; b]);
    let mut g = Graph::new();
    let p = bind(&mut g, params);
    let cond = Conditioning {
        t: &times,
        labels: labels.as_deref(),
    };
    let out = forward_graph(&mut g, &p, cfg, &tokens, &layout, &cond)?;
    let img = unpatchify_batch(g.value(out), b, h, w, c, cfg.patch)?;
    if single {
        img.reshape(&[h, w, c])
    } else {
        Ok(img)
    }
}

/// Class logits for a padded batch `[B, n_max, patch_dim]`.
///
/// `coords[b]` holds the coordinates of sequence `b`'s valid tokens; padded
/// positions get coordinate zero and are excluded by the mask.
pub fn recognition_forward(
    params: &ModelParams<Tensor>,
    cfg: &DitConfig,
    tokens: &Tensor,
    mask: &TokenMask,
    coords: &[Coords],
) -> Result<Tensor> {
    if tokens.rank() != 3 || tokens.shape()[0] != mask.batch() || tokens.shape()[1] != mask.padded_len() {
        bail!(Dimension, "tokens {:?} do not match the mask", tokens.shape());
    }
    if coords.len() != mask.batch() {
        bail!(Dimension, "{} coordinate sets for {} sequences", coords.len(), mask.batch());
    }
    let (b, n) = (mask.batch(), mask.padded_len());
    let mut all = Vec::with_capacity(b * n);
    for (seq, c) in coords.iter().enumerate() {
        if c.len() != mask.valid_count(seq) {
            bail!(Dimension, "sequence {seq}: {} coordinates for {} tokens", c.len(), mask.valid_count(seq));
        }
        all.extend(c.0.iter().copied());
        all.extend(std::iter::repeat_n([0.0; 3], n - c.len()));
    }
    let layout = BatchLayout {
        batch: b,
        n,
        coords: Coords(all),
        key_mask: Some(mask.flat()),
        kv_pool: None,
        freqs: None,
    };
    let flat = tokens.clone().reshape(&[b * n, tokens.shape()[2]])?;
    let mut g = Graph::new();
    let p = bind(&mut g, params);
    let out = recognition_graph(&mut g, &p, cfg, &flat, &layout)?;
    Ok(g.value(out).clone())
}

/// Grouped-query attention branch of one block on `x: [n, dim]`.
pub fn gqa_attention(
    x: &Tensor,
    bp: &BlockParams<Tensor>,
    cfg: &DitConfig,
    freqs: &RopeFreqs,
    coords: &Coords,
    mask: Option<&[bool]>,
    kv_pool: Option<KvPool>,
) -> Result<Tensor> {
    cfg.validate()?;
    let n = x.rows();
    let layout = BatchLayout {
        batch: 1,
        n,
        coords: coords.clone(),
        key_mask: mask.map(<[bool]>::to_vec),
        kv_pool,
        freqs: Some(freqs.clone()),
    };
    let ctx = BlockCtx::new(cfg, &layout, None)?;
    let mut g = Graph::new();
    let bv = bp.map("", &mut |_, t| g.leaf(t.clone()));
    let h = g.leaf(x.clone());
    let out = attention_branch(&mut g, &bv, cfg, h, &ctx)?;
    Ok(g.value(out).clone())
}

/// One Next-DiT block on `x: [n, dim]` with conditioning embedding `cond: [dim]`.
pub fn sandwich_block(
    x: &Tensor,
    cond: Option<&Tensor>,
    bp: &BlockParams<Tensor>,
    cfg: &DitConfig,
    coords: &Coords,
) -> Result<Tensor> {
    let n = x.rows();
    let layout = BatchLayout::shared(1, coords);
    if layout.n != n {
        bail!(Dimension, "{} coordinates for {n} tokens", coords.len());
    }
    let mut g = Graph::new();
    let c = match cond {
        Some(c) => Some(g.leaf(c.clone().reshape(&[1, cfg.dim])?)),
        None => None,
    };
    let ctx = BlockCtx::new(cfg, &layout, c)?;
    let bv = bp.map("", &mut |_, t| g.leaf(t.clone()));
    let h = g.leaf(x.clone());
    let out = block(&mut g, &bv, cfg, h, &ctx)?;
    Ok(g.value(out).clone())
}

/// Random `[batch, H, W, C]` standard-normal tensor, seeded.
pub(crate) fn gaussian_images(shape: &[usize], seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}
