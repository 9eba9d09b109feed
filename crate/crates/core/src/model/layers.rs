use crate::error::{Error, Result};
use crate::model::ProjectionParams;
use crate::tensor::{gemm, Mat, View, ViewMut};

/// LayerNorm variance guard. Variance uses the population (1/m) convention.
pub const LN_EPS: f64 = 1e-6;

/// Saved forward state of one LayerNorm application.
pub(crate) struct LnCache {
    pub out: Mat,
    pub xhat: Mat,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_fwd(x: &Mat, gain: &[f64], bias: &[f64]) -> LnCache {
    let (n, m) = x.shape();
    let mut out = Mat::zeros(n, m);
    let mut xhat = Mat::zeros(n, m);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let xh = xhat.row(r);
        for ((o, x), (g, b)) in out.row_mut(r).iter_mut().zip(xh).zip(gain.iter().zip(bias)) {
            *o = g * x + b;
        }
    }
    LnCache { out, xhat, rstd }
}

/// Backpropagate through a LayerNorm; accumulates gain/bias gradients and
/// returns the input gradient.
pub(crate) fn layer_norm_bwd(
    dy: &Mat,
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let (n, m) = dy.shape();
    let mut dx = Mat::zeros(n, m);
    let mut dxhat = vec![0.0; m];
    for r in 0..n {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for k in 0..m {
            dgain[k] += g[k] * xh[k];
            dbias[k] += g[k];
            dxhat[k] = g[k] * gain[k];
            mean_d += dxhat[k];
            mean_dx += dxhat[k] * xh[k];
        }
        mean_d /= m as f64;
        mean_dx /= m as f64;
        let rs = cache.rstd[r];
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

/// Row-wise `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    layer_norm_fwd(x, gain, bias).out
}

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub(crate) fn linear_pre_ln(tokens: &Mat, p: &ProjectionParams) -> Mat {
    let mut z = Mat::zeros(tokens.rows(), p.weight.cols());
    gemm(1.0, View::of(tokens), View::of(&p.weight), 0.0, ViewMut::of(&mut z));
    z.add_row_vector(p.bias.as_slice());
    z
}

/// Projection stem: `LN(x W + b)` per token.
pub fn project(tokens: &Mat, p: &ProjectionParams) -> Result<Mat> {
    if tokens.cols() != p.weight.rows() {
        return Err(Error::ShapeMismatch(format!(
            "tokens have width {}, projection expects {}",
            tokens.cols(),
            p.weight.rows()
        )));
    }
    let z = linear_pre_ln(tokens, p);
    Ok(layer_norm(&z, p.ln_gain.as_slice(), p.ln_bias.as_slice()))
}

/// Sum the projected offline CLS with the learned CLS.
pub fn merge_cls(offline_projected: &[f64], learned: &[f64]) -> Result<Vec<f64>> {
    if offline_projected.len() != learned.len() {
        return Err(Error::ShapeMismatch(format!(
            "cls widths differ: {} vs {}",
            offline_projected.len(),
            learned.len()
        )));
    }
    Ok(offline_projected
        .iter()
        .zip(learned)
        .map(|(a, b)| a + b)
        .collect())
}
