#![allow(dead_code)]

pub mod gradcheck;
pub mod props;
pub mod recovery;

use insitu_core::data::{LabeledDataset, Split};
use insitu_core::train::{ArchSpec, ConvSpec};
use insitu_core::{DenseMatrix, Tensor4D};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn tensor(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4D {
    let n = dims.iter().product();
    Tensor4D::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, with a floor so all-zero pairs compare as equal.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Small network used by the training tests.
pub fn toy_arch(classes: usize) -> ArchSpec {
    ArchSpec {
        in_channels: 1,
        in_size: 8,
        convs: vec![
            ConvSpec { c_out: 6, k: 3, stride: 1, pad: 0 },
            ConvSpec { c_out: 8, k: 3, stride: 1, pad: 0 },
        ],
        pool: 2,
        classes,
    }
}

/// 8x8 images whose bright column band encodes the label, plus uniform noise.
pub fn toy_data(per_class: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut r = rng(seed);
    let n = per_class * classes;
    let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    let mut data = Vec::with_capacity(n * 64);
    for &l in &labels {
        for p in 0..64 {
            let bump = if (p % 8) * classes / 8 == l as usize { 0.6 } else { 0.0 };
            data.push(bump + r.gen_range(0.0..0.4));
        }
    }
    LabeledDataset::new(Tensor4D::new([n, 1, 8, 8], data).unwrap(), labels, Split::Custom).unwrap()
}
