//! Randomized property checks shared by the property tests and the acceptance run.
//! Each returns `Err` with the first counterexample.

use insitu_core::data::{batches, encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, Split};
use insitu_core::explore::{kernel_correlation, pareto_front, CorrelationMode, ExplorationPoint};
use insitu_core::generator::{validate_cardinality, GeneratorParams, KernelDims};
use insitu_core::quant::fake_quantize;
use insitu_core::train::{train_student, train_teacher, DistillConfig, StudentConfig, StudentInit, TrainConfig};
use insitu_core::Tensor4D;
use rand::Rng;

use super::{matrix, rng, toy_arch, toy_data};

pub type Check = Result<(), String>;

pub fn quantization_idempotent(cases: usize) -> Check {
    let mut r = rng(11);
    for case in 0..cases {
        let bits = r.gen_range(1..=16);
        let m = matrix(r.gen_range(1..9), r.gen_range(1..9), &mut r).scaled(r.gen_range(1e-3..1e3));
        let once = fake_quantize(&m, bits).map_err(|e| e.to_string())?.values;
        let twice = fake_quantize(&once, bits).map_err(|e| e.to_string())?.values;
        let same = once.data().iter().zip(twice.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("case {case}: bits {bits} not idempotent"));
        }
    }
    Ok(())
}

pub fn correlation_scale_invariant(cases: usize) -> Check {
    let mut r = rng(12);
    for case in 0..cases {
        let dims = KernelDims::new(r.gen_range(2..9), r.gen_range(2..6), r.gen_range(2..4));
        let w = matrix(dims.c_out, dims.row_len(), &mut r);
        let c = [1e-3, 0.37, 5.0, -2.5, 1e4][case % 5];
        for mode in [CorrelationMode::Intra, CorrelationMode::Cross] {
            let a = kernel_correlation(&w, dims, mode).map_err(|e| e.to_string())?;
            let b = kernel_correlation(&w.scaled(c), dims, mode).map_err(|e| e.to_string())?;
            if (a.mean - b.mean).abs() > 1e-12 || (a.std - b.std).abs() > 1e-12 {
                return Err(format!("case {case}: {mode:?} metric changed under scale {c}: {a:?} vs {b:?}"));
            }
        }
    }
    Ok(())
}

fn dominates(a: &ExplorationPoint, b: &ExplorationPoint) -> bool {
    a.r_m <= b.r_m && a.accuracy >= b.accuracy && (a.r_m < b.r_m || a.accuracy > b.accuracy)
}

pub fn pareto_oracle(cases: usize) -> Check {
    let mut r = rng(13);
    for case in 0..cases {
        let n = r.gen_range(1..25);
        // coarse values so ties occur
        let points: Vec<ExplorationPoint> = (0..n)
            .map(|i| ExplorationPoint {
                bi: i,
                bc: 1,
                qb: 4,
                qu: 4,
                qv: 4,
                r: 0.0,
                r_m: r.gen_range(0..8) as f64 / 8.0,
                accuracy: r.gen_range(0..8) as f64 / 8.0,
                runtime: 0.0,
                heuristic: false,
            })
            .collect();
        let front = pareto_front(&points);
        let oracle: Vec<&ExplorationPoint> =
            points.iter().filter(|p| !points.iter().any(|q| dominates(q, p))).collect();
        if front.len() != oracle.len() || oracle.iter().any(|p| !front.contains(p)) {
            return Err(format!("case {case}: front differs from the pairwise oracle"));
        }
        for a in &front {
            if front.iter().any(|b| dominates(b, a)) {
                return Err(format!("case {case}: front holds a dominated point"));
            }
        }
        let best_acc = points.iter().map(|p| p.accuracy).fold(f64::MIN, f64::max);
        let min_rm = points.iter().map(|p| p.r_m).fold(f64::MAX, f64::min);
        if !front.iter().any(|p| p.accuracy == best_acc) || !front.iter().any(|p| p.r_m == min_rm) {
            return Err(format!("case {case}: front misses a global extreme"));
        }
        if front.windows(2).any(|w| w[0].r_m > w[1].r_m) {
            return Err(format!("case {case}: front not ordered by r_m"));
        }
    }
    Ok(())
}

pub fn idx_round_trip(cases: usize) -> Check {
    let mut r = rng(14);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for case in 0..cases {
        let (n, h, w) = (r.gen_range(0..6), r.gen_range(1..9), r.gen_range(1..9));
        let px: Vec<f64> = (0..n * h * w).map(|_| r.gen_range(0..=255u8) as f64 / 255.0).collect();
        let images = Tensor4D::new([n, 1, h, w], px).unwrap();
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..10)).collect();
        let ib = encode_idx_images(&images).map_err(|e| e.to_string())?;
        let lb = encode_idx_labels(&labels);
        let back = parse_idx_images(&ib).map_err(|e| e.to_string())?;
        if back.dims() != images.dims() || back.data().iter().zip(images.data()).any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("case {case}: images changed in memory"));
        }
        if parse_idx_labels(&lb).map_err(|e| e.to_string())? != labels {
            return Err(format!("case {case}: labels changed in memory"));
        }
        let (ip, lp) = (dir.path().join(format!("i{case}")), dir.path().join(format!("l{case}")));
        std::fs::write(&ip, &ib).map_err(|e| e.to_string())?;
        std::fs::write(&lp, &lb).map_err(|e| e.to_string())?;
        let ds = load_idx(&ip, &lp, Split::Custom).map_err(|e| e.to_string())?;
        if ds.images != images || ds.labels != labels {
            return Err(format!("case {case}: file round trip changed the data"));
        }
        // loaded data re-encodes to the same bytes
        if encode_idx_images(&ds.images).map_err(|e| e.to_string())? != ib {
            return Err(format!("case {case}: re-encoding differs"));
        }
    }
    Ok(())
}

pub fn epochs_visit_every_sample(cases: usize) -> Check {
    let mut r = rng(15);
    for case in 0..cases {
        let (n, bs, seed, epoch) = (r.gen_range(1..300), r.gen_range(1..70), r.gen::<u64>(), r.gen_range(0..50));
        let b = batches(n, bs, seed, epoch).map_err(|e| e.to_string())?;
        if b != batches(n, bs, seed, epoch).map_err(|e| e.to_string())? {
            return Err(format!("case {case}: batch order not deterministic"));
        }
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(format!("case {case}: epoch does not visit each sample once"));
        }
    }
    Ok(())
}

pub fn generated_rank_bounded(cases: usize) -> Check {
    let mut r = rng(16);
    for case in 0..cases {
        let dims = KernelDims::new(r.gen_range(2..12), r.gen_range(1..6), r.gen_range(1..4));
        let card = validate_cardinality(dims, r.gen_range(1..5), r.gen_range(1..8)).unwrap();
        let p = GeneratorParams::random(dims, card, &mut r);
        let w = insitu_core::generator::generate_kernel(&p, None).unwrap();
        let s = insitu_core::tensor::singular_values(&w).map_err(|e| e.to_string())?;
        let rank = s.iter().filter(|&&v| v > 1e-9 * s[0]).count();
        if rank > card.bc {
            return Err(format!("case {case}: rank {rank} above B_c {}", card.bc));
        }
    }
    Ok(())
}

/// Two identical student runs on the toy task agree bit for bit.
pub fn training_deterministic() -> Check {
    let train = toy_data(12, 3, 1);
    let test = toy_data(4, 3, 2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: 0.01,
        seed: 5,
        ..TrainConfig::default()
    };
    let (teacher, _) = train_teacher(toy_arch(3), &train, &test, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let scfg = StudentConfig::new(2, 3, StudentInit::L2);
    let run = || {
        train_student(&teacher.model, None, &train, &test, &scfg, &DistillConfig::default(), &cfg, |_, _| Ok(()))
            .map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    if a.state != b.state {
        return Err("student states differ".into());
    }
    let bits = |m: &[insitu_core::train::EpochMetrics]| -> Vec<u64> {
        m.iter()
            .flat_map(|e| [e.lr, e.loss_kd, e.loss_ort, e.train_acc, e.test_acc])
            .map(f64::to_bits)
            .collect()
    };
    if bits(&a.metrics) != bits(&b.metrics) {
        return Err("metric logs differ".into());
    }
    Ok(())
}
