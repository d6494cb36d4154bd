use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        bail!(
            Dimension,
            "matmul needs [m,k]x[k,n], got {:?}x{:?}",
            a.shape(),
            b.shape()
        );
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    // i-k-j order: the inner loop streams rows of b and c.
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        bail!(Dimension, "transpose needs a matrix, got {:?}", a.shape());
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// Softmax along `axis`, with max subtraction. NaN inputs propagate to NaN outputs.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        bail!(Dimension, "axis {axis} out of range for rank {}", x.rank());
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            let mut saw_nan = false;
            for j in 0..len {
                let v = data[idx(j)];
                saw_nan |= v.is_nan();
                if v > max {
                    max = v;
                }
            }
            if saw_nan {
                for j in 0..len {
                    data[idx(j)] = T::from_f64(f64::NAN);
                }
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[idx(j)] = data[idx(j)] / total;
            }
        }
    }
    Ok(out)
}

/// `y = x / sqrt(mean(x²) + eps) · gain` over the last axis.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.len() != d {
        bail!(
            Dimension,
            "gain has {} entries, last axis is {d}",
            gain.len()
        );
    }
    let mut out = x.clone();
    let g = gain.data();
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) * inv_d;
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &gv) in row.iter_mut().zip(g) {
            *v = *v * inv * gv;
        }
    }
    Ok(out)
}

/// Token indices (row-major within an `h×w` grid) covered by each pooling window.
///
/// Windows at the right and bottom edges are truncated when the window does
/// not divide the grid, so the result has `ceil(h/wh)·ceil(w/ww)` groups.
pub fn pool_windows(grid: (usize, usize), window: (usize, usize)) -> Result<Vec<Vec<usize>>> {
    let ((h, w), (wh, ww)) = (grid, window);
    if wh == 0 || ww == 0 {
        bail!(Grid, "window {:?} must be positive", window);
    }
    let mut groups = Vec::with_capacity(h.div_ceil(wh) * w.div_ceil(ww));
    for bi in (0..h).step_by(wh) {
        for bj in (0..w).step_by(ww) {
            let mut g = Vec::with_capacity(wh * ww);
            for i in bi..(bi + wh).min(h) {
                for j in bj..(bj + ww).min(w) {
                    g.push(i * w + j);
                }
            }
            groups.push(g);
        }
    }
    Ok(groups)
}

/// Average-pools tokens laid out on an `h×w` grid with a `wh×ww` window.
pub fn avg_pool_tokens<T: Scalar>(
    x: &Tensor<T>,
    grid: (usize, usize),
    window: (usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != grid.0 * grid.1 {
        bail!(
            Grid,
            "tensor {:?} does not hold a {}x{} token grid",
            x.shape(),
            grid.0,
            grid.1
        );
    }
    let d = x.shape()[1];
    let groups = pool_windows(grid, window)?;
    let mut out = Vec::with_capacity(groups.len() * d);
    for g in &groups {
        let mut acc = vec![T::zero(); d];
        for &t in g {
            for (a, &v) in acc.iter_mut().zip(x.row(t)) {
                *a += v;
            }
        }
        let inv = T::from_f64(1.0 / g.len() as f64);
        out.extend(acc.into_iter().map(|a| a * inv));
    }
    Tensor::new(vec![groups.len(), d], out)
}
