//! Row-major building blocks shared by the training pass, the cached
//! inference path and saliency.

use crate::scalar::{gemm, MatMut, MatRef, Scalar};

/// `y = x · w + b` for `rows` rows; `w` is `[n_in, n_out]`.
pub fn linear<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    rows: usize,
    n_in: usize,
    n_out: usize,
    y: &mut [S],
) {
    gemm(
        S::one(),
        MatRef::new(x, rows, n_in),
        MatRef::new(w, n_in, n_out),
        S::zero(),
        MatMut::new(y, rows, n_out),
    );
    if let Some(b) = b {
        for row in y[..rows * n_out].chunks_exact_mut(n_out) {
            for (v, &bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
    }
}

/// Accumulates `dw += xᵀ·dy` and `db += Σ dy`, and writes `dx = dy · wᵀ` when
/// requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [S],
    db: Option<&mut [S]>,
    dx: Option<&mut [S]>,
) {
    gemm(
        S::one(),
        MatRef::new(x, rows, n_in).t(),
        MatRef::new(dy, rows, n_out),
        S::one(),
        MatMut::new(dw, n_in, n_out),
    );
    if let Some(db) = db {
        for row in dy[..rows * n_out].chunks_exact(n_out) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(
            S::one(),
            MatRef::new(dy, rows, n_out),
            MatRef::new(w, n_in, n_out).t(),
            S::zero(),
            MatMut::new(dx, rows, n_in),
        );
    }
}

/// Normalized rows and reciprocal standard deviations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct NormCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

pub fn layer_norm<S: Scalar>(
    x: &[S],
    g: &[S],
    b: &[S],
    d: usize,
    eps: f64,
    y: &mut [S],
) -> NormCache<S> {
    let rows = x.len() / d;
    let mut cache = NormCache {
        xhat: vec![S::zero(); x.len()],
        rstd: vec![S::zero(); rows],
    };
    let n = S::lit(d as f64);
    let eps = S::lit(eps);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<S>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rstd = S::one() / (var + eps).sqrt();
        cache.rstd[r] = rstd;
        let xhat = &mut cache.xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            yr[i] = xhat[i] * g[i] + b[i];
        }
    }
    cache
}

/// Accumulates parameter gradients and adds the input gradient into `dx`.
pub fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &NormCache<S>,
    g: &[S],
    d: usize,
    dg: &mut [S],
    db: &mut [S],
    dx: &mut [S],
) {
    let n = S::lit(d as f64);
    let mut dxhat = vec![S::zero(); d];
    for (r, &rstd) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhat = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_xhat = S::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// In-place numerically stable softmax over `row`.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
