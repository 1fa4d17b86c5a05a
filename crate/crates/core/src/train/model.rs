//! Small convolutional classifier whose kernels come from generator factors.
//!
//! conv -> BN -> ReLU for every convolution, adaptive average pooling, then a
//! fully connected classifier. A dense convolution is a generator with both
//! levels skipped, so teacher and student share one code path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::generator::{generate, FactorGrads, Generation, GeneratorParams, KernelDims, QuantConfig};
use crate::quant;
use crate::tensor::{
    conv_backward_folded, conv_forward_folded, fold_output, unfold_output, ConvGeometry, DenseMatrix, Tensor4D,
};

use super::init::{l2_project_init, svd_init, InitResult, L2InitConfig};
use super::layers::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_backward, batch_norm_eval, batch_norm_train,
    linear_backward, linear_forward, relu_backward, relu_forward, BatchNorm, BnCache,
};
use super::ortho::ortho_reg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Layer shapes of a [`ConvNet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub in_size: usize,
    pub convs: Vec<ConvSpec>,
    /// Side of the pooled feature map.
    pub pool: usize,
    pub classes: usize,
}

impl Default for ArchSpec {
    /// Three 5x5 convolutions with 32 channels (strides 2, 1, 1, no padding)
    /// on 28x28 grayscale input, pooled to 3x3, ten classes.
    fn default() -> Self {
        let conv = |stride| ConvSpec {
            c_out: 32,
            k: 5,
            stride,
            pad: 0,
        };
        Self {
            in_channels: 1,
            in_size: 28,
            convs: vec![conv(2), conv(1), conv(1)],
            pool: 3,
            classes: 10,
        }
    }
}

impl ArchSpec {
    pub fn kernel_dims(&self) -> Vec<KernelDims> {
        let mut c_in = self.in_channels;
        self.convs
            .iter()
            .map(|c| {
                let d = KernelDims::new(c.c_out, c_in, c.k);
                c_in = c.c_out;
                d
            })
            .collect()
    }

    /// Spatial side after every convolution.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut size = self.in_size;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            size = crate::tensor::conv_output_dim(size, c.k, c.stride, c.pad).ok_or_else(|| {
                Error::InvalidDims(format!("conv {i}: input {size} with k {} stride {} pad {}", c.k, c.stride, c.pad))
            })?;
            out.push(size);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() || self.in_channels == 0 || self.classes == 0 {
            return Err(Error::InvalidDims("architecture needs channels, convolutions and classes".into()));
        }
        let last = *self.spatial_sizes()?.last().unwrap();
        if self.pool == 0 || self.pool > last {
            return Err(Error::InvalidDims(format!("cannot pool {last}x{last} to {}", self.pool)));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.convs.last().map_or(0, |c| c.c_out) * self.pool * self.pool
    }
}

/// How a student's factors are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// Projection fit to the teacher kernels; BN and classifier copied.
    L2,
    /// Truncated SVD of the teacher kernels; BN and classifier copied.
    Svd,
    /// Fresh random factors, BN and classifier.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub arch: ArchSpec,
    pub convs: Vec<GeneratorParams>,
    pub bns: Vec<BatchNorm>,
    /// `classes x feature_len`.
    pub fc_w: DenseMatrix,
    pub fc_b: Vec<f64>,
    /// Factor bitwidths for fake quantization in the forward pass.
    pub quant: Option<QuantConfig>,
    /// Activation bitwidth (after every ReLU), if quantized.
    pub act_bits: Option<u32>,
}

/// Tensors saved by a training-mode forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    pool_in: [usize; 4],
    features: DenseMatrix,
}

struct LayerCache {
    geom: ConvGeometry,
    input: Tensor4D,
    gen: Generation,
    bn: BnCache,
    mask: Vec<bool>,
}

/// Gradients in the layout of [`ConvNet::param_slices_mut`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub convs: Vec<FactorGrads>,
    pub bn: Vec<(Vec<f64>, Vec<f64>)>,
    pub fc_w: DenseMatrix,
    pub fc_b: Vec<f64>,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (g, (gg, gb)) in self.convs.iter().zip(&self.bn) {
            out.extend(g.factors().map(|m| m.data()));
            out.push(gg.as_slice());
            out.push(gb.as_slice());
        }
        out.push(self.fc_w.data());
        out.push(&self.fc_b);
        out
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

impl ConvNet {
    fn with_convs(arch: ArchSpec, convs: Vec<GeneratorParams>, rng: &mut impl Rng) -> Self {
        let f = arch.feature_len();
        let bound = 1.0 / (f as f64).sqrt();
        let fc_w = uniform(rng, arch.classes, f, bound);
        let fc_b = (0..arch.classes).map(|_| rng.gen_range(-bound..bound)).collect();
        let bns = arch.convs.iter().map(|c| BatchNorm::new(c.c_out)).collect();
        Self {
            arch,
            convs,
            bns,
            fc_w,
            fc_b,
            quant: None,
            act_bits: None,
        }
    }

    /// Dense network with Kaiming-uniform kernels.
    pub fn dense(arch: ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let convs = arch
            .kernel_dims()
            .into_iter()
            .map(|d| {
                let bound = (6.0 / d.row_len() as f64).sqrt();
                GeneratorParams::from_dense(d, &uniform(rng, d.c_out, d.row_len(), bound))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_convs(arch, convs, rng))
    }

    /// Network with random generator factors at requested `(B_i, B_c)`.
    pub fn generated(arch: ArchSpec, bi: usize, bc: usize, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let convs = arch
            .kernel_dims()
            .into_iter()
            .map(|d| {
                let card = crate::generator::validate_cardinality(d, bi, bc)?;
                Ok(GeneratorParams::random(d, card, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_convs(arch, convs, rng))
    }

    /// Student of `teacher` at `(B_i, B_c)`; returns the per-layer fit for
    /// projection and SVD inits.
    pub fn student(
        teacher: &ConvNet,
        bi: usize,
        bc: usize,
        init: StudentInit,
        l2: &L2InitConfig,
        rng: &mut impl Rng,
    ) -> Result<(Self, Vec<InitResult>)> {
        if init == StudentInit::Random {
            return Ok((Self::generated(teacher.arch.clone(), bi, bc, rng)?, Vec::new()));
        }
        let kernels = teacher.kernels()?;
        let mut fits = Vec::with_capacity(kernels.len());
        for (p, g) in teacher.convs.iter().zip(&kernels) {
            let fit = match init {
                StudentInit::L2 => l2_project_init(&g.kernel, p.dims, bi, bc, l2, rng)?,
                _ => svd_init(&g.kernel, p.dims, bi, bc)?,
            };
            fits.push(fit);
        }
        let mut s = teacher.clone();
        s.convs = fits.iter().map(|f| f.params.clone()).collect();
        s.quant = None;
        s.act_bits = None;
        Ok((s, fits))
    }

    /// Generated (and, with `quant` set, fake-quantized) kernels.
    pub fn kernels(&self) -> Result<Vec<Generation>> {
        self.convs.iter().map(|p| generate(p, self.quant.as_ref())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (p, bn) in self.convs.iter().zip(&self.bns) {
            out.extend(p.factors().map(|m| m.data()));
            out.push(bn.gamma.as_slice());
            out.push(bn.beta.as_slice());
        }
        out.push(self.fc_w.data());
        out.push(&self.fc_b);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (p, bn) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.extend(p.factors_mut().map(|m| m.data_mut()));
            out.push(bn.gamma.as_mut_slice());
            out.push(bn.beta.as_mut_slice());
        }
        out.push(self.fc_w.data_mut());
        out.push(&mut self.fc_b);
        out
    }

    fn check_input(&self, x: &Tensor4D) -> Result<()> {
        let [_, c, h, w] = x.dims();
        let a = &self.arch;
        if c != a.in_channels || h != a.in_size || w != a.in_size {
            return Err(shape_err(
                "ConvNet input",
                format!("{:?}", x.dims()),
                format!("[n, {}, {}, {}]", a.in_channels, a.in_size, a.in_size),
            ));
        }
        Ok(())
    }

    fn quantize_activation(&self, a: &mut DenseMatrix) -> Result<()> {
        if let Some(bits) = self.act_bits {
            quant::check_bits(bits)?;
            let scale = quant::tensor_scale(a.data());
            *a = quant::quantize_with_scale(a, bits, scale);
        }
        Ok(())
    }

    fn to_features(&self, pooled: &Tensor4D) -> DenseMatrix {
        let n = pooled.dims()[0];
        DenseMatrix::new(n, self.arch.feature_len(), pooled.data().to_vec()).expect("pooled dims")
    }

    /// Training-mode pass: batch statistics, running averages updated.
    pub fn forward_train(&mut self, x: &Tensor4D) -> Result<(DenseMatrix, ForwardCache)> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut act = x.clone();
        for l in 0..self.convs.len() {
            let spec = self.arch.convs[l];
            let geom = ConvGeometry::new(act.dims(), spec.k, spec.stride, spec.pad)?;
            let gen = generate(&self.convs[l], self.quant.as_ref())?;
            let y = conv_forward_folded(&act, &gen.kernel, &geom);
            let (mut z, bn) = batch_norm_train(&y, &mut self.bns[l])?;
            let mask = relu_forward(&mut z);
            self.quantize_activation(&mut z)?;
            let input = std::mem::replace(
                &mut act,
                unfold_output(z.data(), spec.c_out, geom.batch, geom.out_h, geom.out_w),
            );
            layers.push(LayerCache {
                geom,
                input,
                gen,
                bn,
                mask,
            });
        }
        let pool_in = act.dims();
        let features = self.to_features(&adaptive_avg_pool(&act, self.arch.pool)?);
        let logits = linear_forward(&features, &self.fc_w, &self.fc_b)?;
        Ok((
            logits,
            ForwardCache {
                layers,
                pool_in,
                features,
            },
        ))
    }

    /// Inference pass with running statistics.
    pub fn forward_eval(&self, x: &Tensor4D) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let mut act = x.clone();
        for (l, gen) in self.kernels()?.into_iter().enumerate() {
            let spec = self.arch.convs[l];
            let geom = ConvGeometry::new(act.dims(), spec.k, spec.stride, spec.pad)?;
            let y = conv_forward_folded(&act, &gen.kernel, &geom);
            let mut z = batch_norm_eval(&y, &self.bns[l])?;
            relu_forward(&mut z);
            self.quantize_activation(&mut z)?;
            act = unfold_output(z.data(), spec.c_out, geom.batch, geom.out_h, geom.out_w);
        }
        let features = self.to_features(&adaptive_avg_pool(&act, self.arch.pool)?);
        linear_forward(&features, &self.fc_w, &self.fc_b)
    }

    /// Inference logits for every sample of `images`, `chunk` samples at a time.
    pub fn predict(&self, images: &Tensor4D, chunk: usize) -> Result<DenseMatrix> {
        let n = images.dims()[0];
        let mut out = Vec::with_capacity(n * self.arch.classes);
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            out.extend_from_slice(self.forward_eval(&images.select(&idx))?.data());
        }
        DenseMatrix::new(n, self.arch.classes, out)
    }

    /// Backward pass from `dL/dlogits`. Activation quantization uses a
    /// straight-through gradient (its scale is the tensor maximum, so
    /// nothing is clipped).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &DenseMatrix) -> Result<ModelGrads> {
        let (dfeat, fc_w, fc_b) = linear_backward(dlogits, &cache.features, &self.fc_w)?;
        let [n, c, _, _] = cache.pool_in;
        let pool = self.arch.pool;
        let dpool = Tensor4D::new([n, c, pool, pool], dfeat.into_data())?;
        let mut dact = fold_output(&adaptive_avg_pool_backward(&dpool, cache.pool_in)?);
        let mut convs = vec![None; self.convs.len()];
        let mut bn = vec![(Vec::new(), Vec::new()); self.convs.len()];
        for l in (0..self.convs.len()).rev() {
            let lc = &cache.layers[l];
            relu_backward(&mut dact, &lc.mask);
            let (dy, dgamma, dbeta) = batch_norm_backward(&dact, &lc.bn, &self.bns[l].gamma)?;
            bn[l] = (dgamma, dbeta);
            let (dw, dx) = conv_backward_folded(&lc.input, &lc.gen.kernel, &dy, &lc.geom, l > 0);
            convs[l] = Some(lc.gen.backward(&self.convs[l], &dw)?);
            if let Some(dx) = dx {
                dact = fold_output(&dx);
            }
        }
        Ok(ModelGrads {
            convs: convs.into_iter().map(|g| g.expect("every layer visited")).collect(),
            bn,
            fc_w,
            fc_b,
        })
    }

    /// Summed orthogonality penalty of all generator factors and its gradients.
    pub fn ortho(&self) -> Result<(f64, Vec<FactorGrads>)> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.convs.len());
        for p in &self.convs {
            let o = ortho_reg(p)?;
            total += o.value;
            grads.push(o.grads);
        }
        Ok((total, grads))
    }
}
