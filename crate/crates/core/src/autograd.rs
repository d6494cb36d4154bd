//! Tape-based reverse-mode differentiation over the small op set the Next-DiT
//! forward pass needs.
//!
//! Every op records its inputs on a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and accumulates adjoints. All values are `f64`. Row-wise ops
//! treat a tensor as `[rows, last_dim]`.

use crate::error::{bail, Result};
use crate::numkernel::{matmul, softmax, transpose, Tensor};
use crate::rope::rotate_rows;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a batched multi-head attention call.
///
/// Queries are `[batch·n_q, q_heads·d_head]`, keys and values are
/// `[batch·n_k, kv_heads·d_head]`. Query head `h` reads key/value head
/// `h / (q_heads / kv_heads)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnShape {
    pub batch: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub d_head: usize,
    pub scale: f64,
    /// Per key validity, `batch·n_k` entries; masked keys get `−∞` logits.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    RepeatRows { x: Var, times: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Rope { x: Var, angles: Tensor },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<Tensor> },
    GroupMean { x: Var, groups: Vec<Vec<usize>> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zeros if no path reached it.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[r, :] + b` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.len() != d {
            bail!(Dimension, "row bias of {} for width {d}", bv.len());
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    /// `x · s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            bail!(Dimension, "scale_by needs a scalar, got {:?}", sv.shape());
        }
        let c = sv.data()[0];
        let out = self.value(x).scale(c);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x))
    }

    /// Row-wise RMS normalization with a learnable gain over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if gv.len() != d {
            bail!(Dimension, "gain of {} for width {d}", gv.len());
        }
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        let inv_d = 1.0 / d as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().fold(0.0, |acc, &v| acc + v * v) * inv_d;
            let iv = 1.0 / (ms + eps).sqrt();
            for (o, &g) in row.iter_mut().zip(gv.data()) {
                *o = *o * iv * g;
            }
            inv.push(iv);
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Columns `start..start+len` of a `[rows, cols]` view.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + len > d {
            bail!(Dimension, "column slice {start}+{len} exceeds width {d}");
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            bail!(Dimension, "concat_cols row counts differ");
        }
        let width: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Repeats each row `times` times consecutively: `[b, d] -> [b·times, d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(xv.len() * times);
        for r in 0..xv.rows() {
            for _ in 0..times {
                data.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::new(vec![xv.rows() * times, d], data).expect("repeat shape");
        self.push(out, Op::RepeatRows { x, times })
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            bail!(Dimension, "row {bad} out of range for {} rows", tv.rows());
        }
        let d = tv.last_dim();
        let data = idx.iter().flat_map(|&i| tv.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Rotary rotation of every `d_head`-wide head; `angles: [rows, d_head/2]`.
    pub fn rope(&mut self, x: Var, angles: Tensor) -> Result<Var> {
        let xv = self.value(x);
        let d_head = 2 * angles.last_dim();
        if angles.rows() != xv.rows() || d_head == 0 || xv.last_dim() % d_head != 0 {
            bail!(
                Dimension,
                "angles {:?} do not fit input {:?}",
                angles.shape(),
                xv.shape()
            );
        }
        let mut out = xv.clone();
        let width = out.last_dim();
        rotate_rows(out.data_mut(), width, &angles, false);
        Ok(self.push(out, Op::Rope { x, angles }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let s = &shape;
        if s.kv_heads == 0 || s.q_heads % s.kv_heads != 0 {
            bail!(
                Config,
                "{} query heads cannot be grouped over {} kv heads",
                s.q_heads,
                s.kv_heads
            );
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.len() != s.batch * s.n_q * s.q_heads * s.d_head
            || kv.len() != s.batch * s.n_k * s.kv_heads * s.d_head
            || vv.len() != kv.len()
        {
            bail!(
                Dimension,
                "attention inputs {:?} {:?} {:?} do not match {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                s
            );
        }
        if let Some(m) = &s.key_mask {
            if m.len() != s.batch * s.n_k {
                bail!(Dimension, "key mask has {} entries", m.len());
            }
        }
        let group = s.q_heads / s.kv_heads;
        let mut out = vec![0.0; s.batch * s.n_q * s.q_heads * s.d_head];
        let mut probs = Vec::with_capacity(s.batch * s.q_heads);
        for b in 0..s.batch {
            for h in 0..s.q_heads {
                let qh = head_block(qv, b, s.n_q, s.q_heads, h, s.d_head);
                let kh = head_block(kv, b, s.n_k, s.kv_heads, h / group, s.d_head);
                let vh = head_block(vv, b, s.n_k, s.kv_heads, h / group, s.d_head);
                let mut logits = matmul(&qh, &transpose(&kh)?)?.scale(s.scale);
                if let Some(m) = &s.key_mask {
                    let valid = &m[b * s.n_k..(b + 1) * s.n_k];
                    for i in 0..s.n_q {
                        for (l, &ok) in logits.row_mut(i).iter_mut().zip(valid) {
                            if !ok {
                                *l = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
                let p = softmax(&logits, 1)?;
                let o = matmul(&p, &vh)?;
                scatter_head(&mut out, &o, b, s.n_q, s.q_heads, h, s.d_head, false);
                probs.push(p);
            }
        }
        let out = Tensor::new(vec![s.batch * s.n_q, s.q_heads * s.d_head], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        ))
    }

    /// Mean of the listed rows for each group: `[rows, d] -> [groups, d]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(groups.len() * d);
        for g in &groups {
            if g.is_empty() {
                bail!(Domain, "empty averaging group");
            }
            let mut acc = vec![0.0; d];
            for &r in g {
                if r >= xv.rows() {
                    bail!(Dimension, "row {r} out of range");
                }
                for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v;
                }
            }
            let inv = 1.0 / g.len() as f64;
            data.extend(acc.into_iter().map(|a| a * inv));
        }
        let out = Tensor::new(vec![groups.len(), d], data)?;
        Ok(self.push(out, Op::GroupMean { x, groups }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::new(vec![], vec![self.value(x).sum()]).expect("scalar");
        self.push(out, Op::Sum(x))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            bail!(
                Dimension,
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&self.nodes[i], &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, matmul(g, &transpose(bv)?)?);
                acc(*b, matmul(&transpose(av)?, g)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y)?);
                acc(*b, g.zip_map(av, |x, y| x * y)?);
            }
            Op::AddRow(x, b) => {
                let d = g.last_dim();
                let mut gb = vec![0.0; d];
                for r in 0..g.rows() {
                    for (s, &v) in gb.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                acc(*x, g.clone());
                let shape = self.value(*b).shape().to_vec();
                acc(*b, Tensor::new(shape, gb)?);
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Scale(x, c) => acc(*x, g.scale(*c)),
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                acc(*x, g.scale(sv.data()[0]));
                acc(*s, Tensor::new(sv.shape().to_vec(), vec![ds])?);
            }
            Op::Tanh(x) => {
                acc(*x, g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y))?);
            }
            Op::Silu(x) => {
                let d = g.zip_map(self.value(*x), |gy, v| {
                    let sig = 1.0 / (1.0 + (-v).exp());
                    gy * sig * (1.0 + v * (1.0 - sig))
                })?;
                acc(*x, d);
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = vec![0.0; d];
                for r in 0..xv.rows() {
                    let (xr, gr, iv) = (xv.row(r), g.row(r), inv[r]);
                    // y = x·iv·gain; dx = iv·(gy·gain) − x·iv³/d·Σ(gy·gain·x)
                    let mut dot = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j] * iv;
                        dot += gr[j] * gv.data()[j] * xr[j];
                    }
                    let c = iv * iv * iv * dot / d as f64;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = iv * gr[j] * gv.data()[j] - xr[j] * c;
                    }
                }
                acc(*x, dx);
                acc(*gain, Tensor::new(gv.shape().to_vec(), dgain)?);
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(self.value(*x).shape())?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let len = g.last_dim();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.last_dim();
                    let mut dp = Vec::with_capacity(pv.len());
                    for r in 0..g.rows() {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(p, Tensor::new(pv.shape().to_vec(), dp)?);
                    offset += w;
                }
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..g.rows() {
                    let dst = dx.row_mut(r / times);
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, idx } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, dt);
            }
            Op::Rope { x, angles } => {
                let mut dx = g.clone();
                let width = dx.last_dim();
                rotate_rows(dx.data_mut(), width, angles, true);
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                shape: s,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let group = s.q_heads / s.kv_heads;
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                for b in 0..s.batch {
                    for h in 0..s.q_heads {
                        let kvh = h / group;
                        let p = &probs[b * s.q_heads + h];
                        let qh = head_block(qv, b, s.n_q, s.q_heads, h, s.d_head);
                        let kh = head_block(kv, b, s.n_k, s.kv_heads, kvh, s.d_head);
                        let vh = head_block(vv, b, s.n_k, s.kv_heads, kvh, s.d_head);
                        let go = head_block(g, b, s.n_q, s.q_heads, h, s.d_head);
                        let dvh = matmul(&transpose(p)?, &go)?;
                        let dp = matmul(&go, &transpose(&vh)?)?;
                        let mut ds = dp.clone();
                        for i in 0..s.n_q {
                            let (pr, dpr) = (p.row(i), dp.row(i));
                            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                                *o = pr[j] * (dpr[j] - dot) * s.scale;
                            }
                        }
                        let dqh = matmul(&ds, &kh)?;
                        let dkh = matmul(&transpose(&ds)?, &qh)?;
                        scatter_head(&mut dq, &dqh, b, s.n_q, s.q_heads, h, s.d_head, true);
                        scatter_head(&mut dk, &dkh, b, s.n_k, s.kv_heads, kvh, s.d_head, true);
                        scatter_head(&mut dv, &dvh, b, s.n_k, s.kv_heads, kvh, s.d_head, true);
                    }
                }
                acc(*q, Tensor::new(qv.shape().to_vec(), dq)?);
                acc(*k, Tensor::new(kv.shape().to_vec(), dk)?);
                acc(*v, Tensor::new(vv.shape().to_vec(), dv)?);
            }
            Op::GroupMean { x, groups } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(gi)) {
                            *o += v * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
        Ok(())
    }
}

/// Extracts head `h` of sample `b` as an `[n, d_head]` matrix.
fn head_block(t: &Tensor, b: usize, n: usize, heads: usize, h: usize, d_head: usize) -> Tensor {
    let width = heads * d_head;
    let mut data = Vec::with_capacity(n * d_head);
    for i in 0..n {
        let row = (b * n + i) * width + h * d_head;
        data.extend_from_slice(&t.data()[row..row + d_head]);
    }
    Tensor::new(vec![n, d_head], data).expect("head block shape")
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(
    dst: &mut [f64],
    src: &Tensor,
    b: usize,
    n: usize,
    heads: usize,
    h: usize,
    d_head: usize,
    accumulate: bool,
) {
    let width = heads * d_head;
    for i in 0..n {
        let row = (b * n + i) * width + h * d_head;
        let out = &mut dst[row..row + d_head];
        if accumulate {
            for (o, &v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        } else {
            out.copy_from_slice(src.row(i));
        }
    }
}
