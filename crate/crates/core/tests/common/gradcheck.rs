//! Finite-difference checks shared by the gradient tests and the acceptance run.
//! Each check returns the relative error of every compared tensor.

use insitu_core::generator::{generate_kernel, generation_gradients, validate_cardinality, GeneratorParams, KernelDims};
use insitu_core::tensor::{conv2d_backward, conv2d_forward};
use insitu_core::train::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_backward, batch_norm_train, kd_loss, linear_backward,
    linear_forward, ortho_reg, BatchNorm, DistillConfig,
};
use insitu_core::{DenseMatrix, Tensor4D};
use rand::Rng;

use super::{matrix, numeric_grad, rel_err, rng, tensor};

pub const H: f64 = 1e-5;

fn flat(p: &GeneratorParams) -> Vec<f64> {
    p.factors().flat_map(|m| m.data().to_vec()).collect()
}

fn set_flat(p: &mut GeneratorParams, x: &[f64]) {
    let mut at = 0;
    for m in p.factors_mut() {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&x[at..at + n]);
        at += n;
    }
}

fn dot(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Random shape and cardinalities, covering both skip rules.
fn random_params(r: &mut impl Rng) -> GeneratorParams {
    let k = [1, 2, 3][r.gen_range(0..3)];
    let dims = KernelDims::new(r.gen_range(2..7), r.gen_range(1..5), k);
    let bi = r.gen_range(1..=dims.k2().max(2));
    let bc = r.gen_range(1..=dims.c_out + 1);
    let card = validate_cardinality(dims, bi, bc).unwrap();
    GeneratorParams::random(dims, card, r)
}

/// `L = <G, W(p)>` through the full two-level generation.
pub fn generation_chain(instances: usize) -> Vec<f64> {
    let mut r = rng(101);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let p = random_params(&mut r);
        let w = generate_kernel(&p, None).unwrap();
        let g = matrix(w.rows(), w.cols(), &mut r);
        let analytic = generation_gradients(&p, &g).unwrap();
        let a: Vec<f64> = analytic.factors().flat_map(|m| m.data().to_vec()).collect();
        let mut x = flat(&p);
        let mut q = p.clone();
        let n = numeric_grad(&mut x, H, |x| {
            set_flat(&mut q, x);
            dot(&generate_kernel(&q, None).unwrap(), &g)
        });
        errs.push(rel_err(&a, &n));
    }
    errs
}

pub fn kd(instances: usize) -> Vec<f64> {
    let mut r = rng(202);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (n, c) = (r.gen_range(1..6), r.gen_range(2..8));
        let student = matrix(n, c, &mut r).scaled(3.0);
        let teacher = matrix(n, c, &mut r).scaled(3.0);
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..c) as u8).collect();
        let cfg = DistillConfig::new(r.gen_range(0.5..6.0), r.gen_range(0.0..=1.0), 0.0).unwrap();
        let a = kd_loss(&student, &teacher, &labels, &cfg).unwrap().grad;
        let mut x = student.data().to_vec();
        let num = numeric_grad(&mut x, H, |x| {
            let s = DenseMatrix::new(n, c, x.to_vec()).unwrap();
            kd_loss(&s, &teacher, &labels, &cfg).unwrap().value
        });
        errs.push(rel_err(a.data(), &num));
    }
    errs
}

pub fn ortho(instances: usize) -> Vec<f64> {
    let mut r = rng(303);
    let mut errs = Vec::new();
    while errs.len() < instances {
        let p = random_params(&mut r);
        if !p.card.intra && !p.card.cross {
            continue;
        }
        let out = ortho_reg(&p).unwrap();
        let a: Vec<f64> = out.grads.factors().flat_map(|m| m.data().to_vec()).collect();
        let mut x = flat(&p);
        let mut q = p.clone();
        let n = numeric_grad(&mut x, H, |x| {
            set_flat(&mut q, x);
            ortho_reg(&q).unwrap().value
        });
        errs.push(rel_err(&a, &n));
    }
    errs
}

/// Penalty value written out element by element, independent of the library.
pub fn ortho_reference(p: &GeneratorParams) -> f64 {
    fn row_term(a: &DenseMatrix) -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.rows() {
                let g: f64 = (0..a.cols()).map(|t| a.get(i, t) * a.get(j, t)).sum();
                let d = g - if i == j { 1.0 } else { 0.0 };
                s += d * d;
            }
        }
        s
    }
    fn col_term(a: &DenseMatrix) -> f64 {
        let norm: Vec<f64> = (0..a.cols()).map(|j| (0..a.rows()).map(|i| a.get(i, j).powi(2)).sum()).collect();
        let mut s = 0.0;
        for i in 0..a.cols() {
            for j in 0..a.cols() {
                let g: f64 = (0..a.rows()).map(|t| a.get(t, i) / norm[i] * a.get(t, j) / norm[j]).sum();
                let d = g - if i == j { 1.0 } else { 0.0 };
                s += d * d;
            }
        }
        s
    }
    let mut total = 0.0;
    if p.card.intra {
        total += p.basis.iter().map(row_term).sum::<f64>();
        total += p.coeff.iter().map(col_term).sum::<f64>();
    }
    if let Some(v) = &p.cross {
        total += col_term(v);
    }
    total
}

pub fn conv(instances: usize) -> Vec<f64> {
    let mut r = rng(404);
    let mut errs = Vec::new();
    while errs.len() < 2 * instances {
        let (n, c, h) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(3..7));
        let (k, stride, pad) = (r.gen_range(1..4), r.gen_range(1..3), r.gen_range(0..2));
        if h + 2 * pad < k {
            continue;
        }
        let x = tensor([n, c, h, h], &mut r);
        let w = matrix(r.gen_range(1..5), c * k * k, &mut r);
        let y = conv2d_forward(&x, &w, stride, pad).unwrap();
        let g = tensor(y.dims(), &mut r);
        let (dw, dx) = conv2d_backward(&x, &w, &g, stride, pad).unwrap();
        let loss = |x: &Tensor4D, w: &DenseMatrix| -> f64 {
            let y = conv2d_forward(x, w, stride, pad).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let mut wv = w.data().to_vec();
        let nw = numeric_grad(&mut wv, H, |v| loss(&x, &DenseMatrix::new(w.rows(), w.cols(), v.to_vec()).unwrap()));
        let mut xv = x.data().to_vec();
        let nx = numeric_grad(&mut xv, H, |v| loss(&Tensor4D::new(x.dims(), v.to_vec()).unwrap(), &w));
        errs.push(rel_err(dw.data(), &nw));
        errs.push(rel_err(dx.data(), &nx));
    }
    errs
}

pub fn linear(instances: usize) -> Vec<f64> {
    let mut r = rng(505);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..6));
        let x = matrix(n, i, &mut r);
        let w = matrix(o, i, &mut r);
        let b: Vec<f64> = (0..o).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = matrix(n, o, &mut r);
        let (dx, dw, db) = linear_backward(&g, &x, &w).unwrap();
        let loss = |x: &DenseMatrix, w: &DenseMatrix, b: &[f64]| dot(&linear_forward(x, w, b).unwrap(), &g);
        let mut v = x.data().to_vec();
        let nx = numeric_grad(&mut v, H, |v| loss(&DenseMatrix::new(n, i, v.to_vec()).unwrap(), &w, &b));
        let mut v = w.data().to_vec();
        let nw = numeric_grad(&mut v, H, |v| loss(&x, &DenseMatrix::new(o, i, v.to_vec()).unwrap(), &b));
        let mut v = b.clone();
        let nb = numeric_grad(&mut v, H, |v| loss(&x, &w, v));
        errs.push(rel_err(dx.data(), &nx).max(rel_err(dw.data(), &nw)).max(rel_err(&db, &nb)));
    }
    errs
}

pub fn batch_norm(instances: usize) -> Vec<f64> {
    let mut r = rng(606);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (c, n) = (r.gen_range(1..4), r.gen_range(2..9));
        let x = matrix(c, n, &mut r);
        let mut bn = BatchNorm::new(c);
        for ch in 0..c {
            bn.gamma[ch] = r.gen_range(0.5..2.0);
            bn.beta[ch] = r.gen_range(-1.0..1.0);
        }
        let g = matrix(c, n, &mut r);
        let (_, cache) = batch_norm_train(&x, &mut bn.clone()).unwrap();
        let (dx, dgamma, dbeta) = batch_norm_backward(&g, &cache, &bn.gamma).unwrap();
        let loss = |x: &DenseMatrix, bn: &BatchNorm| dot(&batch_norm_train(x, &mut bn.clone()).unwrap().0, &g);
        let mut v = x.data().to_vec();
        let nx = numeric_grad(&mut v, H, |v| loss(&DenseMatrix::new(c, n, v.to_vec()).unwrap(), &bn));
        let mut v = bn.gamma.clone();
        let ng = numeric_grad(&mut v, H, |v| loss(&x, &BatchNorm { gamma: v.to_vec(), ..bn.clone() }));
        let mut v = bn.beta.clone();
        let nb = numeric_grad(&mut v, H, |v| loss(&x, &BatchNorm { beta: v.to_vec(), ..bn.clone() }));
        errs.push(rel_err(dx.data(), &nx).max(rel_err(&dgamma, &ng)).max(rel_err(&dbeta, &nb)));
    }
    errs
}

pub fn pool(instances: usize) -> Vec<f64> {
    let mut r = rng(707);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let h = r.gen_range(1..8);
        let out = r.gen_range(1..=h);
        let x = tensor([r.gen_range(1..3), r.gen_range(1..3), h, h], &mut r);
        let y = adaptive_avg_pool(&x, out).unwrap();
        let g = tensor(y.dims(), &mut r);
        let dx = adaptive_avg_pool_backward(&g, x.dims()).unwrap();
        let mut v = x.data().to_vec();
        let n = numeric_grad(&mut v, H, |v| {
            let y = adaptive_avg_pool(&Tensor4D::new(x.dims(), v.to_vec()).unwrap(), out).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        });
        errs.push(rel_err(dx.data(), &n));
    }
    errs
}

/// Whole network: generated convolutions, batch norm, ReLU, pooling and classifier.
pub fn network(instances: usize) -> Vec<f64> {
    use insitu_core::train::ConvNet;
    let mut r = rng(808);
    let mut errs = Vec::new();
    for i in 0..instances {
        let arch = super::toy_arch(3);
        let mut model = ConvNet::generated(arch, 1 + i % 3, 2 + i % 4, &mut r).unwrap();
        let x = tensor([3, 1, 8, 8], &mut r);
        let labels = [0u8, 2, 1];
        let teacher = matrix(3, 3, &mut r);
        let cfg = DistillConfig::default();
        let loss = |m: &ConvNet| {
            let (logits, _) = m.clone().forward_train(&x).unwrap();
            kd_loss(&logits, &teacher, &labels, &cfg).unwrap().value
        };
        let (logits, cache) = model.clone().forward_train(&x).unwrap();
        let dl = kd_loss(&logits, &teacher, &labels, &cfg).unwrap().grad;
        let grads = model.backward(&cache, &dl).unwrap();
        let a: Vec<f64> = grads.slices().concat();
        let mut num = Vec::with_capacity(a.len());
        let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        for (t, &len) in sizes.iter().enumerate() {
            for j in 0..len {
                let orig = model.param_slices()[t][j];
                model.param_slices_mut()[t][j] = orig + H;
                let up = loss(&model);
                model.param_slices_mut()[t][j] = orig - H;
                let down = loss(&model);
                model.param_slices_mut()[t][j] = orig;
                num.push((up - down) / (2.0 * H));
            }
        }
        errs.push(rel_err(&a, &num));
    }
    errs
}
