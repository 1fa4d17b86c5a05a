//! Symmetric uniform fake quantization and the precision bounds of cascaded
//! low-bit factors.
//!
//! A `q`-bit tensor takes values `scale * j / L` with `L = 2^(q-1) - 1` and
//! integer `j` in `[-L, L]`: `2^q - 1` levels including zero. The scale is
//! per tensor, `max |m|`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{shape_str, DenseMatrix};

pub const MIN_BITS: u32 = 1;
pub const MAX_BITS: u32 = 16;

/// Dequantized values plus the grid they live on.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedView {
    pub values: DenseMatrix,
    pub scale: f64,
    pub bits: u32,
}

impl QuantizedView {
    /// Integer level index `j` of every entry.
    pub fn codes(&self) -> Vec<i32> {
        let l = half_levels(self.bits);
        self.values
            .data()
            .iter()
            .map(|&v| if l == 0 { 0 } else { (v / self.scale * l as f64).round() as i32 })
            .collect()
    }
}

/// `2^(bits-1) - 1`, the largest level index.
pub fn half_levels(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Bitwidth {
            bits,
            min: MIN_BITS,
            max: MAX_BITS,
        });
    }
    Ok(())
}

/// Scale used for `values`: `max |v|`, or 1 for an all-zero tensor.
pub fn tensor_scale<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let m = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[inline]
pub(crate) fn quantize_value(v: f64, scale: f64, l: f64) -> f64 {
    if l == 0.0 {
        return 0.0;
    }
    // f64::round breaks ties away from zero
    let j = (v / scale * l).round().clamp(-l, l);
    // `+ 0.0` folds a negative zero into the zero level
    j / l * scale + 0.0
}

/// Rounds every entry to the nearest of the `2^bits - 1` symmetric levels.
pub fn fake_quantize(m: &DenseMatrix, bits: u32) -> Result<QuantizedView> {
    check_bits(bits)?;
    if !m.is_finite() {
        return Err(Error::NonFinite("fake_quantize input".into()));
    }
    let scale = tensor_scale(m.data());
    Ok(QuantizedView {
        values: quantize_with_scale(m, bits, scale),
        scale,
        bits,
    })
}

pub(crate) fn quantize_with_scale(m: &DenseMatrix, bits: u32, scale: f64) -> DenseMatrix {
    let l = half_levels(bits) as f64;
    m.map(|v| quantize_value(v, scale, l))
}

/// Quantizes several matrices that form one logical tensor with a shared scale.
pub fn fake_quantize_group(parts: &[DenseMatrix], bits: u32) -> Result<(Vec<DenseMatrix>, f64)> {
    check_bits(bits)?;
    if parts.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("fake_quantize_group input".into()));
    }
    let scale = tensor_scale(parts.iter().flat_map(|p| p.data()));
    let out = parts.iter().map(|p| quantize_with_scale(p, bits, scale)).collect();
    Ok((out, scale))
}

/// Clipped straight-through gradient: passes `dl_dq` where `|m| <= scale`.
pub fn ste_backward(dl_dq: &DenseMatrix, m: &DenseMatrix, scale: f64) -> Result<DenseMatrix> {
    if dl_dq.shape() != m.shape() {
        return Err(shape_err("ste_backward", shape_str(dl_dq), shape_str(m)));
    }
    let data = dl_dq
        .data()
        .iter()
        .zip(m.data())
        .map(|(&g, &x)| if x.abs() <= scale { g } else { 0.0 })
        .collect();
    DenseMatrix::new(m.rows(), m.cols(), data)
}

/// Distinct-value count and effective bitwidths of cascaded quantized factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionBound {
    /// Upper bound on distinct values in the generated kernel basis.
    pub count_c: u128,
    /// `q_b + q_u + log2 B_i`.
    pub sup_q_c: f64,
    /// `q_v + sup_q_c + log2 B_c`.
    pub sup_q: f64,
}

pub fn distinct_value_bound(bi: usize, bc: usize, qb: u32, qu: u32, qv: u32) -> PrecisionBound {
    let count_c = ((1u128 << qb) - 1) * ((1u128 << qu) - 1) * bi as u128 + 1;
    let sup_q_c = qb as f64 + qu as f64 + (bi as f64).log2();
    let sup_q = qv as f64 + sup_q_c + (bc as f64).log2();
    PrecisionBound {
        count_c,
        sup_q_c,
        sup_q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use std::collections::BTreeSet;

    #[test]
    fn two_bit_rounding() {
        let s = 2.0;
        let m = DenseMatrix::from_rows(&[&[-0.9 * s, 0.1 * s, 0.6 * s, s]]);
        let q = fake_quantize(&m, 2).unwrap();
        assert_eq!(q.scale, s);
        assert_eq!(q.values.data(), &[-s, 0.0, s, s]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // 3 bits: L = 3, grid step 1/3 of scale 3 => step 1
        let m = DenseMatrix::from_rows(&[&[3.0, 0.5, -0.5, 1.5, -2.5]]);
        let q = fake_quantize(&m, 3).unwrap();
        assert_eq!(q.values.data(), &[3.0, 1.0, -1.0, 2.0, -3.0]);
    }

    #[test]
    fn on_grid_input_unchanged() {
        let m = DenseMatrix::from_rows(&[&[-1.0, -1.0 / 7.0, 0.0, 3.0 / 7.0, 1.0]]);
        let q = fake_quantize(&m, 4).unwrap();
        assert_eq!(q.values, m);
    }

    #[test]
    fn nearest_level_property() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let m = DenseMatrix::from_fn(16, 16, |_, _| rng.gen_range(-3.0..3.0));
        let q = fake_quantize(&m, 4).unwrap();
        let levels: Vec<f64> = (-7..=7).map(|j| j as f64 / 7.0 * q.scale).collect();
        let distinct: BTreeSet<u64> = q.values.data().iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 15);
        for (&x, &y) in m.data().iter().zip(q.values.data()) {
            let best = levels.iter().map(|l| (l - x).abs()).fold(f64::INFINITY, f64::min);
            assert!(((y - x).abs() - best).abs() < 1e-12);
            assert!((y - x).abs() <= q.scale / 14.0 + 1e-15);
        }
    }

    #[test]
    fn one_bit_is_the_zero_level() {
        let m = DenseMatrix::from_rows(&[&[0.3, -2.0]]);
        let q = fake_quantize(&m, 1).unwrap();
        assert!(q.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bits_out_of_range() {
        let m = DenseMatrix::zeros(1, 1);
        assert!(matches!(fake_quantize(&m, 0), Err(Error::Bitwidth { .. })));
        assert!(matches!(fake_quantize(&m, 17), Err(Error::Bitwidth { .. })));
    }

    #[test]
    fn all_zero_scale_is_one() {
        let q = fake_quantize(&DenseMatrix::zeros(2, 2), 8).unwrap();
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn ste_in_range_passes() {
        let g = DenseMatrix::from_rows(&[&[1.0, -2.0, 3.0]]);
        let m = DenseMatrix::from_rows(&[&[0.1, 0.5, -0.5]]);
        assert_eq!(ste_backward(&g, &m, 0.5).unwrap(), g);
    }

    #[test]
    fn ste_clips_outside() {
        let g = DenseMatrix::from_rows(&[&[1.0, -2.0, 3.0, 4.0]]);
        let m = DenseMatrix::from_rows(&[&[0.1, 0.9, -0.7, 0.5]]);
        let out = ste_backward(&g, &m, 0.5).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn ste_matches_mask_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        let g = DenseMatrix::from_fn(6, 7, |_, _| rng.gen_range(-1.0..1.0));
        let m = DenseMatrix::from_fn(6, 7, |_, _| rng.gen_range(-2.0..2.0));
        let out = ste_backward(&g, &m, 1.0).unwrap();
        for i in 0..6 {
            for j in 0..7 {
                let mask = if m.get(i, j).abs() <= 1.0 { 1.0 } else { 0.0 };
                assert_eq!(out.get(i, j), g.get(i, j) * mask);
            }
        }
        assert!(ste_backward(&g, &DenseMatrix::zeros(7, 6), 1.0).is_err());
    }

    #[test]
    fn bound_values() {
        let b = distinct_value_bound(2, 40, 4, 4, 4);
        assert_eq!(b.count_c, 451);
        assert_eq!(b.sup_q_c, 9.0);
        assert!((b.sup_q - (4.0 + 9.0 + 40f64.log2())).abs() < 1e-12);
        assert_eq!(distinct_value_bound(1, 1, 1, 1, 1).count_c, 2);
    }

    #[test]
    fn enumerated_products_within_bound() {
        // (B_i, B_c, q_b, q_u, q_v) = (3, 5, 3, 2, 4): every entry of a basis
        // slice is sum_j u_j * w_j over B_i terms of level indices.
        let (bi, qb, qu) = (3usize, 3u32, 2u32);
        let lb = half_levels(qb);
        let lu = half_levels(qu);
        let mut sums = BTreeSet::from([0i64]);
        for _ in 0..bi {
            let mut next = BTreeSet::new();
            for s in &sums {
                for a in -lu..=lu {
                    for b in -lb..=lb {
                        next.insert(s + a * b);
                    }
                }
            }
            sums = next;
        }
        let bound = distinct_value_bound(bi, 5, qb, qu, 4).count_c;
        assert!((sums.len() as u128) <= bound, "{} > {bound}", sums.len());
    }

    proptest! {
        #[test]
        fn idempotent(data in proptest::collection::vec(-100.0f64..100.0, 12), bits in 1u32..=16) {
            let m = DenseMatrix::new(3, 4, data).unwrap();
            let once = fake_quantize(&m, bits).unwrap();
            let twice = fake_quantize(&once.values, bits).unwrap();
            for (a, b) in once.values.data().iter().zip(twice.values.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn error_bound(data in proptest::collection::vec(-10.0f64..10.0, 12), bits in 2u32..=16) {
            let m = DenseMatrix::new(3, 4, data).unwrap();
            let q = fake_quantize(&m, bits).unwrap();
            let tol = q.scale / ((1u64 << bits) - 2) as f64 * (1.0 + 1e-12);
            for (a, b) in m.data().iter().zip(q.values.data()) {
                prop_assert!((a - b).abs() <= tol);
            }
        }
    }
}
