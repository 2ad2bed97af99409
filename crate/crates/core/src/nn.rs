//! Transformer building blocks with explicit forward caches and hand-written
//! backward passes. All math is `f64` on row-major token matrices (N × D).

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::params::ParamSet;

pub const LN_EPS: f64 = 1e-6;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

/// Row-wise layer normalization. `affine = None` gives the plain
/// zero-mean/unit-variance transform.
pub fn layer_norm(
    x: ArrayView2<f64>,
    affine: Option<(ArrayView1<f64>, ArrayView1<f64>)>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::<f64>::zeros((n, d));
    let mut rstd = Array1::<f64>::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let y = match affine {
        Some((g, b)) => &xhat * &g + &b,
        None => xhat.clone(),
    };
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates affine gradients into `dg`/`db` when given.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    affine: Option<(ArrayView1<f64>, &mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let dxhat = match affine {
        Some((g, dg, db)) => {
            *dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
            *db += &dy.sum_axis(Axis(0));
            &dy * &g
        }
        None => dy.to_owned(),
    };
    let mut dx = Array2::<f64>::zeros((n, d));
    let inv_d = 1.0 / d as f64;
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_dh = dh.sum();
        let sum_dh_xh = dh.dot(&xh);
        let r = cache.rstd[i];
        for j in 0..d {
            dx[[i, j]] = r * (dh[j] - inv_d * sum_dh - xh[j] * inv_d * sum_dh_xh);
        }
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// `x · W + b`
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Parameter names of one pre-norm block under `prefix`.
#[derive(Debug, Clone)]
pub struct BlockNames {
    pub norm1_w: String,
    pub norm1_b: String,
    pub qkv_w: String,
    pub qkv_b: String,
    pub proj_w: String,
    pub proj_b: String,
    pub norm2_w: String,
    pub norm2_b: String,
    pub fc1_w: String,
    pub fc1_b: String,
    pub fc2_w: String,
    pub fc2_b: String,
}

impl BlockNames {
    pub fn new(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        Self {
            norm1_w: n("norm1.weight"),
            norm1_b: n("norm1.bias"),
            qkv_w: n("attn.qkv.weight"),
            qkv_b: n("attn.qkv.bias"),
            proj_w: n("attn.proj.weight"),
            proj_b: n("attn.proj.bias"),
            norm2_w: n("norm2.weight"),
            norm2_b: n("norm2.bias"),
            fc1_w: n("mlp.fc1.weight"),
            fc1_b: n("mlp.fc1.bias"),
            fc2_w: n("mlp.fc2.weight"),
            fc2_b: n("mlp.fc2.bias"),
        }
    }

    /// (name, shape) pairs for a block of width `dim` and MLP width `hidden`.
    pub fn shapes(&self, dim: usize, hidden: usize) -> Vec<(&str, Vec<usize>)> {
        vec![
            (&self.norm1_w, vec![dim]),
            (&self.norm1_b, vec![dim]),
            (&self.qkv_w, vec![dim, 3 * dim]),
            (&self.qkv_b, vec![3 * dim]),
            (&self.proj_w, vec![dim, dim]),
            (&self.proj_b, vec![dim]),
            (&self.norm2_w, vec![dim]),
            (&self.norm2_b, vec![dim]),
            (&self.fc1_w, vec![dim, hidden]),
            (&self.fc1_b, vec![hidden]),
            (&self.fc2_w, vec![hidden, dim]),
            (&self.fc2_b, vec![dim]),
        ]
    }
}

/// Everything the backward pass needs from one block forward.
#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    /// Softmax attention per head, each N × N with rows summing to one.
    pub probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Pre-norm transformer block:
/// `x1 = x + Attn(LN1(x))`, `out = x1 + MLP(LN2(x1))`.
pub fn block_forward(
    p: &ParamSet,
    names: &BlockNames,
    x: ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, BlockCache) {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(
        x,
        Some((p.vec(&names.norm1_w), p.vec(&names.norm1_b))),
        LN_EPS,
    );
    let qkv = linear(a.view(), p.mat(&names.qkv_w), p.vec(&names.qkv_b));

    let mut ctx = Array2::<f64>::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut sc = q.dot(&k.t());
        sc.mapv_inplace(|z| z * scale);
        softmax_rows(&mut sc);
        let o = sc.dot(&v);
        ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&o);
        probs.push(sc);
    }
    let attn_out = linear(ctx.view(), p.mat(&names.proj_w), p.vec(&names.proj_b));
    let x1 = &x + &attn_out;

    let (m, ln2) = layer_norm(
        x1.view(),
        Some((p.vec(&names.norm2_w), p.vec(&names.norm2_b))),
        LN_EPS,
    );
    let pre = linear(m.view(), p.mat(&names.fc1_w), p.vec(&names.fc1_b));
    let act = pre.mapv(gelu);
    let mlp_out = linear(act.view(), p.mat(&names.fc2_w), p.vec(&names.fc2_b));
    let out = &x1 + &mlp_out;

    (
        out,
        BlockCache {
            ln1,
            a,
            qkv,
            probs,
            ctx,
            ln2,
            m,
            pre,
            act,
        },
    )
}

fn acc_matmul_tn(g: &mut ParamSet, name: &str, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    let mut gm = g.mat_mut(name);
    general_mat_mul(1.0, &a.t(), &b, 1.0, &mut gm);
}

fn acc_bias(g: &mut ParamSet, name: &str, dy: ArrayView2<f64>) {
    let mut gv = g.vec_mut(name);
    gv += &dy.sum_axis(Axis(0));
}

fn ln_backward_into(
    p: &ParamSet,
    g: &mut ParamSet,
    w: &str,
    b: &str,
    dy: ArrayView2<f64>,
    cache: &LnCache,
) -> Array2<f64> {
    let d = dy.ncols();
    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    let dx = layer_norm_backward(dy, cache, Some((p.vec(w), &mut dg, &mut db)));
    {
        let mut gw = g.vec_mut(w);
        gw += &dg;
    }
    let mut gb = g.vec_mut(b);
    gb += &db;
    dx
}

/// Backward through one block. Accumulates parameter gradients into `g`
/// and returns the gradient with respect to the block input.
pub fn block_backward(
    p: &ParamSet,
    names: &BlockNames,
    heads: usize,
    cache: &BlockCache,
    dout: ArrayView2<f64>,
    g: &mut ParamSet,
) -> Array2<f64> {
    let (n, d) = dout.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch
    acc_matmul_tn(g, &names.fc2_w, cache.act.view(), dout);
    acc_bias(g, &names.fc2_b, dout);
    let dact = dout.dot(&p.mat(&names.fc2_w).t());
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre)
        .and(&cache.pre)
        .for_each(|dp, &z| *dp *= gelu_grad(z));
    acc_matmul_tn(g, &names.fc1_w, cache.m.view(), dpre.view());
    acc_bias(g, &names.fc1_b, dpre.view());
    let dm = dpre.dot(&p.mat(&names.fc1_w).t());
    let dx1_ln = ln_backward_into(p, g, &names.norm2_w, &names.norm2_b, dm.view(), &cache.ln2);
    let dx1 = &dout + &dx1_ln;

    // attention branch
    acc_matmul_tn(g, &names.proj_w, cache.ctx.view(), dx1.view());
    acc_bias(g, &names.proj_b, dx1.view());
    let dctx = dx1.dot(&p.mat(&names.proj_w).t());
    let mut dqkv = Array2::<f64>::zeros((n, 3 * d));
    for h in 0..heads {
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let pr = &cache.probs[h];
        let dout_h = dctx.slice(s![.., h * dh..(h + 1) * dh]);
        let dp = dout_h.dot(&v.t());
        let dv = pr.t().dot(&dout_h);
        let mut ds = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let row_p = pr.row(i);
            let row_dp = dp.row(i);
            let inner = row_p.dot(&row_dp);
            for j in 0..n {
                ds[[i, j]] = row_p[j] * (row_dp[j] - inner) * scale;
            }
        }
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
            .assign(&dk);
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
            .assign(&dv);
    }
    acc_matmul_tn(g, &names.qkv_w, cache.a.view(), dqkv.view());
    acc_bias(g, &names.qkv_b, dqkv.view());
    let da = dqkv.dot(&p.mat(&names.qkv_w).t());
    let dx_ln = ln_backward_into(p, g, &names.norm1_w, &names.norm1_b, da.view(), &cache.ln1);
    dx1 + dx_ln
}

/// Fixed 2-D sinusoidal position encoding for a `rows × cols` grid.
/// The first half of the channels encodes the row, the second half the
/// column; any leftover channels stay zero.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((rows * cols, dim));
    let half = dim / 2;
    let quarter = half / 2;
    if quarter == 0 {
        return pe;
    }
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                pe[[t, i]] = (r as f64 * omega).sin();
                pe[[t, quarter + i]] = (r as f64 * omega).cos();
                pe[[t, half + i]] = (c as f64 * omega).sin();
                pe[[t, half + quarter + i]] = (c as f64 * omega).cos();
            }
        }
    }
    pe
}

/// Mean attention each key token receives, averaged over heads and queries.
pub fn mean_received(probs: &[Array2<f64>]) -> Array1<f64> {
    let n = probs[0].ncols();
    let mut acc = Array1::<f64>::zeros(n);
    for p in probs {
        acc += &p.mean_axis(Axis(0)).expect("non-empty attention");
    }
    acc / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(fd, gelu_grad(x), epsilon = 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 7 + j * 3) as f64).sin() * 2.0);
        let w = Array2::from_shape_fn((3, 5), |(i, j)| ((i + 2 * j) as f64).cos());
        let loss = |x: &Array2<f64>| {
            let (y, _) = layer_norm(x.view(), None, LN_EPS);
            (&y * &w).sum()
        };
        let (_, cache) = layer_norm(x.view(), None, LN_EPS);
        let dx = layer_norm_backward(w.view(), &cache, None);
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert_abs_diff_eq!(fd, dx[[i, j]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn sincos_rows_are_distinct() {
        let pe = sincos_2d(4, 4, 16);
        for a in 0..16 {
            for b in (a + 1)..16 {
                let diff: f64 = (&pe.row(a) - &pe.row(b)).mapv(f64::abs).sum();
                assert!(diff > 1e-6);
            }
        }
    }
}
