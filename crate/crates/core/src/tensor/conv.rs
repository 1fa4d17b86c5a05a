use super::{gemm_into, DenseMatrix, Tensor4D};
use crate::error::{shape_err, Error, Result};

/// Samples lowered per GEMM call in the folded convolution routines; keeps
/// the scratch matrices near the L2 size for 32-channel 5x5 layers.
const CHUNK_SAMPLES: usize = 8;

/// Spatial bookkeeping for one square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(dims: [usize; 4], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = dims;
        if k == 0 || stride == 0 {
            return Err(Error::InvalidDims(format!(
                "kernel {k} / stride {stride} must be at least 1"
            )));
        }
        let out_h = conv_output_dim(in_h, k, stride, pad).ok_or_else(|| {
            Error::InvalidDims(format!(
                "input height {in_h} with kernel {k}, stride {stride}, pad {pad} gives no output rows"
            ))
        })?;
        let out_w = conv_output_dim(in_w, k, stride, pad).ok_or_else(|| {
            Error::InvalidDims(format!(
                "input width {in_w} with kernel {k}, stride {stride}, pad {pad} gives no output columns"
            ))
        })?;
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the lowered matrix: `in_c * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Output positions per sample.
    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Input index of output row `oy` under kernel row `ky`, if inside the image.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad).filter(|&i| i < self.in_h)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the image, and
    /// the input column of `lo`.
    #[inline]
    fn col_span(&self, kx: usize) -> (usize, usize, usize) {
        let s = self.stride;
        // smallest ox with ox * s + kx >= pad
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        // largest ox with ox * s + kx - pad < in_w, plus one
        let hi = ((self.in_w + self.pad).saturating_sub(kx + 1) / s + 1).min(self.out_w);
        let hi = if self.in_w + self.pad < kx + 1 { 0 } else { hi };
        let hi = hi.max(lo);
        (lo, hi, if hi > lo { lo * s + kx - self.pad } else { 0 })
    }
}

/// Output extent of a convolution along one axis, `None` if not positive.
pub fn conv_output_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Lowers `batch` consecutive samples of `x` into `out`
/// (`patch_len x batch P`, overwritten).
fn lower(x: &[f64], g: &ConvGeometry, batch: usize, out: &mut [f64]) {
    let k = g.k;
    let cols = batch * g.out_positions();
    let plane = g.in_h * g.in_w;
    out.fill(0.0);
    for ch in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let (lo, hi, ix0) = g.col_span(kx);
                if lo == hi {
                    continue;
                }
                let dst = &mut out[row * cols..(row + 1) * cols];
                for s in 0..batch {
                    let src = &x[(s * g.in_c + ch) * plane..(s * g.in_c + ch + 1) * plane];
                    let base = s * g.out_positions();
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let drow = &mut dst[base + oy * g.out_w + lo..base + oy * g.out_w + hi];
                        if g.stride == 1 {
                            drow.copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                        } else {
                            for (d, &v) in drow.iter_mut().zip(srow[ix0..].iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed lowering: one row of `patch_len` values per output position.
fn lower_t(x: &[f64], g: &ConvGeometry, batch: usize, out: &mut [f64]) {
    let k = g.k;
    let patch = g.patch_len();
    let plane = g.in_h * g.in_w;
    out.fill(0.0);
    for s in 0..batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (s * g.out_h + oy) * g.out_w + ox;
                let dst = &mut out[r * patch..(r + 1) * patch];
                // taps kx_lo..kx_hi land inside the image
                let left = ox * g.stride;
                let kx_lo = g.pad.saturating_sub(left).min(k);
                let kx_hi = (g.in_w + g.pad).saturating_sub(left).min(k).max(kx_lo);
                for ch in 0..g.in_c {
                    let src = &x[(s * g.in_c + ch) * plane..(s * g.in_c + ch + 1) * plane];
                    for ky in 0..k {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        if kx_lo == kx_hi {
                            continue;
                        }
                        let d = &mut dst[(ch * k + ky) * k + kx_lo..(ch * k + ky) * k + kx_hi];
                        let start = iy * g.in_w + ox * g.stride + kx_lo - g.pad;
                        d.copy_from_slice(&src[start..start + d.len()]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`lower`]: accumulates `cols` into `batch` samples of `out`.
fn lift(cols: &[f64], g: &ConvGeometry, batch: usize, out: &mut [f64]) {
    let k = g.k;
    let ncols = batch * g.out_positions();
    let plane = g.in_h * g.in_w;
    for ch in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let (lo, hi, ix0) = g.col_span(kx);
                if lo == hi {
                    continue;
                }
                let src = &cols[row * ncols..(row + 1) * ncols];
                for s in 0..batch {
                    let dst = &mut out[(s * g.in_c + ch) * plane..(s * g.in_c + ch + 1) * plane];
                    let base = s * g.out_positions();
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let srow = &src[base + oy * g.out_w + lo..base + oy * g.out_w + hi];
                        let drow = &mut dst[iy * g.in_w + ix0..(iy + 1) * g.in_w];
                        for (d, &v) in drow.iter_mut().step_by(g.stride).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Lowers `x` to a `(C_i k^2) x (n H_out W_out)` matrix.
///
/// Rows are ordered `(channel, kernel row, kernel col)`, columns
/// `(sample, out row, out col)`; padding is zero.
pub fn im2col(x: &Tensor4D, k: usize, stride: usize, pad: usize) -> Result<DenseMatrix> {
    let g = ConvGeometry::new(x.dims(), k, stride, pad)?;
    let cols = g.batch * g.out_positions();
    let mut out = vec![0.0; g.patch_len() * cols];
    lower(x.data(), &g, g.batch, &mut out);
    DenseMatrix::new(g.patch_len(), cols, out)
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
pub fn col2im(
    cols: &DenseMatrix,
    dims: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4D> {
    let g = ConvGeometry::new(dims, k, stride, pad)?;
    let ncols = g.batch * g.out_positions();
    if cols.shape() != (g.patch_len(), ncols) {
        return Err(shape_err(
            "col2im",
            format!("{}x{}", cols.rows(), cols.cols()),
            format!("{}x{} for input {dims:?}", g.patch_len(), ncols),
        ));
    }
    let mut out = Tensor4D::zeros(dims);
    lift(cols.data(), &g, g.batch, out.data_mut());
    Ok(out)
}

fn kernel_size(x_channels: usize, w: &DenseMatrix) -> Result<usize> {
    let err = || {
        shape_err(
            "conv2d",
            format!("input with {x_channels} channels"),
            format!("weight {}x{}", w.rows(), w.cols()),
        )
    };
    if x_channels == 0 || !w.cols().is_multiple_of(x_channels) {
        return Err(err());
    }
    let kk = w.cols() / x_channels;
    let k = (kk as f64).sqrt().round() as usize;
    if k * k != kk {
        return Err(err());
    }
    Ok(k)
}

/// `(C_o x n P)` product matrix to `(n, C_o, H, W)`.
pub(crate) fn unfold_output(y: &[f64], c_out: usize, batch: usize, oh: usize, ow: usize) -> Tensor4D {
    let p = oh * ow;
    let mut out = vec![0.0; y.len()];
    for co in 0..c_out {
        for s in 0..batch {
            out[(s * c_out + co) * p..(s * c_out + co + 1) * p]
                .copy_from_slice(&y[co * batch * p + s * p..co * batch * p + (s + 1) * p]);
        }
    }
    Tensor4D::new([batch, c_out, oh, ow], out).expect("consistent dims")
}

/// `(n, C_o, H, W)` to the `(C_o x n P)` layout of the product matrix.
pub(crate) fn fold_output(dy: &Tensor4D) -> DenseMatrix {
    let [batch, c_out, oh, ow] = dy.dims();
    let p = oh * ow;
    let mut out = vec![0.0; dy.data().len()];
    for co in 0..c_out {
        for s in 0..batch {
            out[co * batch * p + s * p..co * batch * p + (s + 1) * p]
                .copy_from_slice(&dy.data()[(s * c_out + co) * p..(s * c_out + co + 1) * p]);
        }
    }
    DenseMatrix::new(c_out, batch * p, out).expect("consistent dims")
}

/// Sample ranges of at most [`CHUNK_SAMPLES`].
fn chunks(batch: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..batch).step_by(CHUNK_SAMPLES).map(move |s0| (s0, (s0 + CHUNK_SAMPLES).min(batch) - s0))
}

/// `W * im2col(x)` in the folded `C_o x (n P)` layout, a few samples at a time.
pub(crate) fn conv_forward_folded(x: &Tensor4D, w: &DenseMatrix, g: &ConvGeometry) -> DenseMatrix {
    let (c_out, patch, p) = (w.rows(), g.patch_len(), g.out_positions());
    let total = g.batch * p;
    let mut y = vec![0.0; c_out * total];
    let mut cols = vec![0.0; patch * CHUNK_SAMPLES.min(g.batch) * p];
    let mut part = vec![0.0; c_out * CHUNK_SAMPLES.min(g.batch) * p];
    for (s0, len) in chunks(g.batch) {
        let n = len * p;
        let x0 = s0 * g.sample_len();
        lower(&x.data()[x0..x0 + len * g.sample_len()], g, len, &mut cols[..patch * n]);
        gemm_into(c_out, patch, n, w.data(), &cols[..patch * n], &mut part[..c_out * n]);
        for co in 0..c_out {
            y[co * total + s0 * p..co * total + s0 * p + n].copy_from_slice(&part[co * n..(co + 1) * n]);
        }
    }
    DenseMatrix::new(c_out, total, y).expect("consistent dims")
}

/// Gradients of [`conv_forward_folded`] from a folded `dL/dy`: the
/// `C_o x patch` weight gradient and, when asked, the input gradient.
///
/// The weight gradient is accumulated chunk by chunk in a fixed order.
pub(crate) fn conv_backward_folded(
    x: &Tensor4D,
    w: &DenseMatrix,
    dy: &DenseMatrix,
    g: &ConvGeometry,
    need_dx: bool,
) -> (DenseMatrix, Option<Tensor4D>) {
    let (c_out, patch, p) = (w.rows(), g.patch_len(), g.out_positions());
    let total = g.batch * p;
    let cap = CHUNK_SAMPLES.min(g.batch) * p;
    let wt = w.transpose();
    let mut dw = DenseMatrix::zeros(c_out, patch);
    let mut dx = need_dx.then(|| Tensor4D::zeros([g.batch, g.in_c, g.in_h, g.in_w]));
    let mut cols_t = vec![0.0; cap * patch];
    let mut dyc = vec![0.0; c_out * cap];
    let mut part = vec![0.0; c_out * patch];
    let mut dcols = if need_dx { vec![0.0; patch * cap] } else { Vec::new() };
    for (s0, len) in chunks(g.batch) {
        let n = len * p;
        for co in 0..c_out {
            dyc[co * n..(co + 1) * n].copy_from_slice(&dy.data()[co * total + s0 * p..co * total + s0 * p + n]);
        }
        let dyc = &dyc[..c_out * n];
        let x0 = s0 * g.sample_len();
        let xs = &x.data()[x0..x0 + len * g.sample_len()];
        lower_t(xs, g, len, &mut cols_t[..n * patch]);
        gemm_into(c_out, n, patch, dyc, &cols_t[..n * patch], &mut part);
        for (a, b) in dw.data_mut().iter_mut().zip(&part) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            gemm_into(patch, c_out, n, wt.data(), dyc, &mut dcols[..patch * n]);
            lift(&dcols[..patch * n], g, len, &mut dx.data_mut()[x0..x0 + len * g.sample_len()]);
        }
    }
    (dw, dx)
}

/// Convolution as `W_view * im2col(x)` with `W_view` the `C_o x C_i k^2` weight.
pub fn conv2d_forward(x: &Tensor4D, w: &DenseMatrix, stride: usize, pad: usize) -> Result<Tensor4D> {
    let k = kernel_size(x.dims()[1], w)?;
    let g = ConvGeometry::new(x.dims(), k, stride, pad)?;
    let y = conv_forward_folded(x, w, &g);
    Ok(unfold_output(y.data(), w.rows(), g.batch, g.out_h, g.out_w))
}

/// Gradients of a convolution: `(dL/dW, dL/dx)`.
pub fn conv2d_backward(
    x: &Tensor4D,
    w: &DenseMatrix,
    dy: &Tensor4D,
    stride: usize,
    pad: usize,
) -> Result<(DenseMatrix, Tensor4D)> {
    let k = kernel_size(x.dims()[1], w)?;
    let g = ConvGeometry::new(x.dims(), k, stride, pad)?;
    if dy.dims() != [g.batch, w.rows(), g.out_h, g.out_w] {
        return Err(shape_err(
            "conv2d_backward",
            format!("{:?}", dy.dims()),
            format!("{:?}", [g.batch, w.rows(), g.out_h, g.out_w]),
        ));
    }
    let (dw, dx) = conv_backward_folded(x, w, &fold_output(dy), &g, true);
    Ok((dw, dx.expect("input gradient requested")))
}
