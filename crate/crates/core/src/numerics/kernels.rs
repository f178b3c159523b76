use super::tensor::DenseTensor;
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// `a · b` for `a: m×k`, `b: k×n`. Accumulates over `k` in index order.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    DenseTensor::matrix(m, n, out)
}

/// Gradients of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(
    a: &DenseTensor,
    b: &DenseTensor,
    dc: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    let da = matmul(dc, &b.transpose())?;
    let db = matmul(&a.transpose(), dc)?;
    Ok((da, db))
}

/// Sum that does not depend on the order of `values`: the terms are added
/// in ascending order.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Softmax of one row; `-inf` entries map to exactly 0.
pub fn softmax_row(row: &[f64]) -> Result<Vec<f64>> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidDistribution(
            "every entry along the softmax axis is -inf".into(),
        ));
    }
    if !max.is_finite() {
        return Err(Error::numeric(format!("softmax input contains {max}")));
    }
    let exps: Vec<f64> = row
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .collect();
    let total = stable_sum(&exps);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
pub fn softmax(x: &DenseTensor, axis: usize) -> Result<DenseTensor> {
    let rank = x.shape().len().max(1);
    if axis >= rank || rank > 2 {
        return Err(Error::config(format!(
            "softmax axis {axis} invalid for shape {:?}",
            x.shape()
        )));
    }
    let along_rows = rank == 1 || axis == 1;
    let work = if along_rows { x.clone() } else { x.transpose() };
    let (r, c) = work.dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        out.extend(softmax_row(work.row(i))?);
    }
    let out = DenseTensor::matrix(r, c, out)?;
    if along_rows {
        out.reshape(x.shape().to_vec())
    } else {
        Ok(out.transpose())
    }
}

fn check_ln(x: &DenseTensor, gamma: &DenseTensor, beta: &DenseTensor, eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::config(format!("layer_norm eps must be finite and >= 0, got {eps}")));
    }
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    Ok(())
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Per-row normalization to zero mean and unit (biased) variance, then
/// `gamma * x̂ + beta`.
pub fn layer_norm(
    x: &DenseTensor,
    gamma: &DenseTensor,
    beta: &DenseTensor,
    eps: f64,
) -> Result<DenseTensor> {
    check_ln(x, gamma, beta, eps)?;
    let (r, d) = x.dims2();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(r * d);
    for i in 0..r {
        let row = x.row(i);
        let (mean, rstd) = row_stats(row, eps);
        if !rstd.is_finite() {
            return Err(Error::numeric("layer_norm of a constant row with eps = 0"));
        }
        out.extend(row.iter().enumerate().map(|(j, &v)| g[j] * ((v - mean) * rstd) + b[j]));
    }
    DenseTensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &DenseTensor,
    gamma: &DenseTensor,
    eps: f64,
    dy: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let (r, d) = x.dims2();
    if dy.shape() != x.shape() {
        return Err(Error::dim("layer_norm_backward", x.shape(), dy.shape()));
    }
    let g = gamma.data();
    let mut dx = vec![0.0; r * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..r {
        let row = x.row(i);
        let dyr = dy.row(i);
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    Ok((
        DenseTensor::new(x.shape().to_vec(), dx)?,
        DenseTensor::new(gamma.shape().to_vec(), dgamma)?,
        DenseTensor::new(gamma.shape().to_vec(), dbeta)?,
    ))
}

fn check_labels(logits: &DenseTensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = logits.dims2();
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if b == 0 {
        return Err(Error::config("cross_entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index {
            what: "class label",
            index: bad,
            bound: c,
        });
    }
    Ok((b, c))
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy_loss(logits: &DenseTensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = check_labels(logits, labels)?;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let lse = max + stable_sum(&exps).ln();
        total += lse - row[label];
    }
    Ok(total / b as f64)
}

/// `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: &DenseTensor, labels: &[usize]) -> Result<DenseTensor> {
    let (b, c) = check_labels(logits, labels)?;
    let mut out = Vec::with_capacity(b * c);
    for (i, &label) in labels.iter().enumerate() {
        let mut p = softmax_row(logits.row(i))?;
        p[label] -= 1.0;
        out.extend(p.into_iter().map(|v| v / b as f64));
    }
    DenseTensor::new(logits.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
