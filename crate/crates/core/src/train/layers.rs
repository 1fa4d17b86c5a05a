//! Forward and backward passes of the non-convolutional layers.
//!
//! Convolution outputs are kept in the folded `C x (n P)` layout produced by
//! the GEMM, so batch norm and ReLU work on rows (one row per channel).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, shape_str, DenseMatrix, Tensor4D};

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Saved tensors of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: DenseMatrix,
    pub inv_std: Vec<f64>,
}

fn check_rows(op: &'static str, x: &DenseMatrix, channels: usize) -> Result<()> {
    if x.rows() != channels {
        return Err(shape_err(op, shape_str(x), format!("{channels} channels")));
    }
    Ok(())
}

/// Normalizes each row with batch statistics and updates the running
/// averages (unbiased variance, as usual for running statistics).
pub fn batch_norm_train(x: &DenseMatrix, bn: &mut BatchNorm) -> Result<(DenseMatrix, BnCache)> {
    check_rows("batch_norm_train", x, bn.channels())?;
    let (c, n) = x.shape();
    let mut out = DenseMatrix::zeros(c, n);
    let mut xhat = DenseMatrix::zeros(c, n);
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let row = x.row(ch);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + bn.eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (bn.gamma[ch], bn.beta[ch]);
        for ((h, o), &v) in xhat.row_mut(ch).iter_mut().zip(out.row_mut(ch)).zip(row) {
            *h = (v - mean) * is;
            *o = g * *h + b;
        }
        let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
        bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean;
        bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * unbiased;
    }
    Ok((out, BnCache { xhat, inv_std }))
}

/// Normalizes with the running statistics.
pub fn batch_norm_eval(x: &DenseMatrix, bn: &BatchNorm) -> Result<DenseMatrix> {
    check_rows("batch_norm_eval", x, bn.channels())?;
    let mut out = x.clone();
    for ch in 0..x.rows() {
        let is = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
        let (m, g, b) = (bn.running_mean[ch], bn.gamma[ch], bn.beta[ch]);
        for v in out.row_mut(ch) {
            *v = g * (*v - m) * is + b;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dout: &DenseMatrix,
    cache: &BnCache,
    gamma: &[f64],
) -> Result<(DenseMatrix, Vec<f64>, Vec<f64>)> {
    if dout.shape() != cache.xhat.shape() {
        return Err(shape_err("batch_norm_backward", shape_str(dout), shape_str(&cache.xhat)));
    }
    let (c, n) = dout.shape();
    let nf = n as f64;
    let mut dx = DenseMatrix::zeros(c, n);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (d, h) = (dout.row(ch), cache.xhat.row(ch));
        let sum_d: f64 = d.iter().sum();
        let sum_dh: f64 = d.iter().zip(h).map(|(a, b)| a * b).sum();
        dbeta[ch] = sum_d;
        dgamma[ch] = sum_dh;
        let k = gamma[ch] * cache.inv_std[ch] / nf;
        for ((o, &dv), &hv) in dx.row_mut(ch).iter_mut().zip(d).zip(h) {
            *o = k * (nf * dv - sum_d - hv * sum_dh);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// In place ReLU; returns the pass-through mask.
pub fn relu_forward(x: &mut DenseMatrix) -> Vec<bool> {
    x.data_mut()
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub fn relu_backward(dout: &mut DenseMatrix, mask: &[bool]) {
    for (d, &on) in dout.data_mut().iter_mut().zip(mask) {
        if !on {
            *d = 0.0;
        }
    }
}

/// Window `[start, end)` of output cell `i` when `input` cells are pooled to `output`.
fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling to `out x out` cells, windows as in common
/// deep learning frameworks (`floor(i H / o)` to `ceil((i + 1) H / o)`).
pub fn adaptive_avg_pool(x: &Tensor4D, out: usize) -> Result<Tensor4D> {
    let [n, c, h, w] = x.dims();
    if out == 0 || out > h || out > w {
        return Err(Error::InvalidDims(format!("cannot pool {h}x{w} to {out}x{out}")));
    }
    let mut y = Tensor4D::zeros([n, c, out, out]);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..out {
                let (y0, y1) = adaptive_window(oy, h, out);
                for ox in 0..out {
                    let (x0, x1) = adaptive_window(ox, w, out);
                    let mut acc = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += x.get(s, ch, iy, ix);
                        }
                    }
                    let at = y.index(s, ch, oy, ox);
                    y.data_mut()[at] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    Ok(y)
}

pub fn adaptive_avg_pool_backward(dy: &Tensor4D, in_dims: [usize; 4]) -> Result<Tensor4D> {
    let [n, c, h, w] = in_dims;
    let out = dy.dims()[2];
    if dy.dims() != [n, c, out, out] {
        return Err(shape_err(
            "adaptive_avg_pool_backward",
            format!("{:?}", dy.dims()),
            format!("{in_dims:?}"),
        ));
    }
    let mut dx = Tensor4D::zeros(in_dims);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..out {
                let (y0, y1) = adaptive_window(oy, h, out);
                for ox in 0..out {
                    let (x0, x1) = adaptive_window(ox, w, out);
                    let g = dy.get(s, ch, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let at = dx.index(s, ch, iy, ix);
                            dx.data_mut()[at] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// `x W^T + b` for `x` of shape `n x in` and `W` of shape `out x in`.
pub fn linear_forward(x: &DenseMatrix, w: &DenseMatrix, b: &[f64]) -> Result<DenseMatrix> {
    if x.cols() != w.cols() || b.len() != w.rows() {
        return Err(shape_err("linear_forward", shape_str(x), shape_str(w)));
    }
    let mut y = gemm(x, &w.transpose())?;
    for i in 0..y.rows() {
        for (v, bb) in y.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
    Ok(y)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(
    dy: &DenseMatrix,
    x: &DenseMatrix,
    w: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>)> {
    if dy.rows() != x.rows() || dy.cols() != w.rows() {
        return Err(shape_err("linear_backward", shape_str(dy), shape_str(x)));
    }
    let dx = gemm(dy, w)?;
    let dw = gemm(&dy.transpose(), x)?;
    let db = (0..dy.cols()).map(|j| (0..dy.rows()).map(|i| dy.get(i, j)).sum()).collect();
    Ok((dx, dw, db))
}
