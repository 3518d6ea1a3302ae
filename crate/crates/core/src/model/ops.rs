//! Dense row-major kernels shared by the full forward pass, the backward
//! pass, and incremental decoding. Row results depend only on that row's
//! inputs and are computed in a fixed operation order, so decoding one row at
//! a time reproduces the full pass bit for bit.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `out[n×m] = bias + a[n×k] · w[k×m]`.
pub(crate) fn linear(
    out: &mut [f64],
    a: &[f64],
    w: &[f64],
    bias: &[f64],
    n: usize,
    k: usize,
    m: usize,
) {
    debug_assert_eq!(out.len(), n * m);
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        row.copy_from_slice(bias);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &x) in a_row.iter().enumerate() {
            let w_row = &w[kk * m..(kk + 1) * m];
            for (o, &wv) in row.iter_mut().zip(w_row) {
                *o += x * wv;
            }
        }
    }
}

/// Backward of `linear`: accumulates `dw += aᵀ·dout`, `db += Σ dout`, and
/// `da += dout · wᵀ`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    dout: &[f64],
    a: &[f64],
    w: &[f64],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
    da: Option<&mut [f64]>,
) {
    for i in 0..n {
        let d_row = &dout[i * m..(i + 1) * m];
        for (b, &d) in db.iter_mut().zip(d_row) {
            *b += d;
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &x) in a_row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let dw_row = &mut dw[kk * m..(kk + 1) * m];
            for (g, &d) in dw_row.iter_mut().zip(d_row) {
                *g += x * d;
            }
        }
    }
    if let Some(da) = da {
        for i in 0..n {
            let d_row = &dout[i * m..(i + 1) * m];
            for kk in 0..k {
                let w_row = &w[kk * m..(kk + 1) * m];
                da[i * k + kk] += dot(d_row, w_row);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise layer norm. Writes the output, the normalized input `xhat`, and
/// the reciprocal standard deviation per row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm(
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    d: usize,
) {
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = gamma[j] * h + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    n: usize,
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dy = &dout[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dgamma[j] += dy[j] * xh[j];
            dbeta[j] += dy[j];
            dxhat[j] = dy[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

/// Causal attention for one query row over keys/values `0..=pos`. `scores`
/// receives the attention weights, `out` the weighted sum of values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    pos: usize,
    stride: usize,
    offset: usize,
    dh: usize,
    scores: &mut [f64],
    out: &mut [f64],
) {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for j in 0..=pos {
        let k = &keys[j * stride + offset..j * stride + offset + dh];
        let s = dot(q, k) * scale;
        scores[j] = s;
        max = max.max(s);
    }
    let mut sum = 0.0;
    for s in scores.iter_mut().take(pos + 1) {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut().take(pos + 1) {
        *s /= sum;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..=pos {
        let a = scores[j];
        let v = &values[j * stride + offset..j * stride + offset + dh];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += a * vv;
        }
    }
}
