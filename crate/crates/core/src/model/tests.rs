use rand::Rng as _;

use super::*;
use crate::featurizer::tests::request;
use crate::featurizer::N_CONTINUOUS;
use crate::rng::seeded;

pub(crate) fn tiny_arch(hidden: usize, nonneg: bool) -> Architecture {
    Architecture {
        vocab_sizes: [3, 2, 2, 4, 2, 2, 3, 2, 2, 2],
        embedding_dims: [2, 1, 1, 2, 1, 1, 2, 1, 1, 1],
        hidden,
        nonneg,
    }
}

pub(crate) fn random_example(arch: &Architecture, rng: &mut crate::rng::Rng) -> EncodedExample {
    let categorical = std::array::from_fn(|s| rng.random_range(0..arch.vocab_sizes[s]) as u32);
    let continuous = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
    let center = GeoPoint {
        lat: rng.random_range(-40.0..40.0),
        lng: rng.random_range(-90.0..90.0),
    };
    let label = GeoPoint {
        lat: center.lat + rng.random_range(-0.5..0.5),
        lng: center.lng + rng.random_range(-0.5..0.5),
    };
    EncodedExample {
        features: FeatureVector { categorical, continuous },
        center,
        label,
    }
}

fn mean_loss(
    params: &ModelParams,
    batch: &[EncodedExample],
    masks: &[Option<DropoutMask>],
    w: &LossWeights,
    mode: BlMode,
) -> f64 {
    batch
        .iter()
        .zip(masks)
        .map(|(ex, m)| {
            let o = forward(params, &ex.features, m.as_ref()).unwrap();
            total_loss(ex.center, ex.label, o, w, mode)
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Result of checking analytic gradients against central differences.
#[derive(Debug, Default)]
pub(crate) struct FdReport {
    /// Worst `|a - f| / max(1e-4 · max(|a|, |f|), 1e-7)`; <= 1 passes.
    pub worst_ratio: f64,
    pub checked: usize,
    /// Parameters whose ±ε step straddles a hinge or ReLU kink, detected by
    /// disagreeing one-sided differences. Central differences are meaningless there.
    pub straddled: usize,
}

/// Which linear piece every kinked function sits on: ReLU signs, the side of
/// each bound the booked point is on, and box inversion per axis.
fn piece_signature(params: &ModelParams, batch: &[EncodedExample], masks: &[Option<DropoutMask>]) -> Vec<bool> {
    let mut sig = Vec::new();
    for (ex, m) in batch.iter().zip(masks) {
        let act = forward_activations(params, &ex.features, m.as_ref()).unwrap();
        sig.extend(act.z1.iter().chain(&act.z2).map(|z| *z > 0.0));
        let o = ExtentOffsets::from_array(act.out);
        let (sw, ne) = crate::geo::raw_corners(ex.center, o);
        sig.extend([sw.lat > ex.label.lat, ne.lat > ex.label.lat, sw.lng > ex.label.lng, ne.lng > ex.label.lng]);
        sig.extend([o.sw_lat + o.ne_lat < 0.0, o.sw_lng + o.ne_lng < 0.0]);
    }
    sig
}

pub(crate) fn finite_difference_check(seed: u64, nonneg: bool, mode: BlMode) -> FdReport {
    let mut rng = seeded(seed, "fd-test");
    let arch = tiny_arch(8, nonneg);
    let params = ModelParams::init(arch.clone(), seed, 0.4);
    let batch: Vec<_> = (0..3).map(|_| random_example(&arch, &mut rng)).collect();
    let masks: Vec<_> = (0..3)
        .map(|i| (i % 2 == 0).then(|| DropoutMask::sample(0.3, 8, &mut rng)))
        .collect();
    let w = LossWeights::default();
    let (_, grad) = backward(&params, &batch, &masks, &w, mode).unwrap();

    let eps = 1e-4;
    let mut report = FdReport::default();
    let mut p = params.clone();
    for i in 0..params.len() {
        let orig = p.values[i];
        p.values[i] = orig + eps;
        let up = mean_loss(&p, &batch, &masks, &w, mode);
        let sig_up = piece_signature(&p, &batch, &masks);
        p.values[i] = orig - eps;
        let dn = mean_loss(&p, &batch, &masks, &w, mode);
        let sig_dn = piece_signature(&p, &batch, &masks);
        p.values[i] = orig;
        if sig_up != sig_dn {
            report.straddled += 1;
            continue;
        }
        let fd = (up - dn) / (2.0 * eps);
        let tol = (1e-4 * grad[i].abs().max(fd.abs())).max(1e-7);
        let r = (grad[i] - fd).abs() / tol;
        report.worst_ratio = report.worst_ratio.max(r);
        report.checked += 1;
    }
    report
}

#[test]
fn zero_weights_give_ln2_extents() {
    let arch = tiny_arch(8, true);
    let p = ModelParams::zeros(arch);
    let fv = FeatureVector {
        categorical: [1; 10],
        continuous: [0.3; N_CONTINUOUS],
    };
    let o = forward(&p, &fv, None).unwrap();
    for v in o.to_array() {
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_and_keep_all_matches_plain() {
    let arch = tiny_arch(8, true);
    let p = ModelParams::init(arch.clone(), 3, 0.5);
    let mut rng = seeded(1, "t");
    let ex = random_example(&arch, &mut rng);
    let m = DropoutMask::sample(0.5, 8, &mut rng);
    assert_eq!(forward(&p, &ex.features, Some(&m)).unwrap(), forward(&p, &ex.features, Some(&m)).unwrap());
    assert_eq!(
        forward(&p, &ex.features, Some(&DropoutMask::keep_all(8))).unwrap(),
        forward(&p, &ex.features, None).unwrap()
    );
}

#[test]
fn forward_rejects_out_of_vocab_indices_and_bad_masks() {
    let arch = tiny_arch(8, true);
    let p = ModelParams::zeros(arch);
    let mut fv = FeatureVector {
        categorical: [0; 10],
        continuous: [0.0; N_CONTINUOUS],
    };
    assert!(forward(&p, &fv, Some(&DropoutMask::keep_all(7))).is_err());
    fv.categorical[0] = 3;
    assert!(matches!(forward(&p, &fv, None), Err(Error::DimensionMismatch(_))));
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        for (nonneg, mode) in [(true, BlMode::Hinge), (false, BlMode::Hinge), (true, BlMode::Absolute)] {
            let r = finite_difference_check(seed, nonneg, mode);
            assert!(r.worst_ratio <= 1.0, "seed {seed} nonneg {nonneg} {mode:?}: {r:?}");
            assert!(r.straddled * 100 <= r.checked, "seed {seed}: too many kinks {r:?}");
        }
    }
}

#[test]
fn zero_loss_weights_give_zero_gradient() {
    let arch = tiny_arch(8, true);
    let p = ModelParams::init(arch.clone(), 5, 0.5);
    let mut rng = seeded(5, "t");
    let batch: Vec<_> = (0..4).map(|_| random_example(&arch, &mut rng)).collect();
    let w = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
    let (loss, g) = backward(&p, &batch, &[None, None, None, None], &w, BlMode::Hinge).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn untouched_embedding_rows_get_zero_gradient() {
    let arch = tiny_arch(8, true);
    let p = ModelParams::init(arch.clone(), 6, 0.5);
    let mut rng = seeded(6, "t");
    let mut ex = random_example(&arch, &mut rng);
    ex.features.categorical = [1; 10];
    let (_, g) = backward(&p, &[ex], &[None], &LossWeights::default(), BlMode::Hinge).unwrap();
    for slot in 0..10 {
        let dim = arch.embedding_dims[slot];
        for row in 0..arch.vocab_sizes[slot] {
            let at = p.layout.embeddings[slot] + row * dim;
            let touched = g[at..at + dim].iter().any(|v| *v != 0.0);
            if row != 1 {
                assert!(!touched, "slot {slot} row {row}");
            }
        }
    }
    let loc_row = p.layout.embeddings[0] + 2;
    assert!(g[loc_row..loc_row + 2].iter().any(|v| *v != 0.0));
}

#[test]
fn empty_batch_is_rejected() {
    let p = ModelParams::zeros(tiny_arch(4, true));
    assert!(backward(&p, &[], &[], &LossWeights::default(), BlMode::Hinge).is_err());
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 16,
        epochs: 5,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let arch = tiny_arch(16, true);
    let mut rng = seeded(9, "t");
    let data: Vec<_> = (0..20).map(|_| random_example(&arch, &mut rng)).collect();
    let cfg = TrainConfig { learning_rate: 0.0, ..small_config(9) };
    let init = ModelParams::init(arch.clone(), cfg.seed, cfg.init_offset_deg);
    let out = train(arch, &cfg, &data).unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn training_is_deterministic_per_seed() {
    let arch = tiny_arch(16, true);
    let mut rng = seeded(10, "t");
    let data: Vec<_> = (0..40).map(|_| random_example(&arch, &mut rng)).collect();
    let a = train(arch.clone(), &small_config(1), &data).unwrap();
    let b = train(arch.clone(), &small_config(1), &data).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.params, b.params);
    let c = train(arch, &small_config(2), &data).unwrap();
    assert_ne!(a.loss_curve, c.loss_curve);
    assert!(a.loss_curve.last().unwrap() <= &a.loss_curve[0]);
}

#[test]
fn single_repeated_example_collapses_to_the_booked_point() {
    let arch = tiny_arch(DEFAULT_HIDDEN, true);
    let mut rng = seeded(11, "t");
    let ex = random_example(&arch, &mut rng);
    let data = vec![ex.clone(); 512];
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(arch, &cfg, &data).unwrap();
    let first = out.loss_curve[0];
    let last = *out.loss_curve.last().unwrap();
    assert!(last < 0.05 * first, "loss {first} -> {last}: {:?}", out.loss_curve.iter().step_by(20).collect::<Vec<_>>());
}

#[test]
fn invalid_train_config_is_rejected() {
    let arch = tiny_arch(4, true);
    let mut rng = seeded(12, "t");
    let data = vec![random_example(&arch, &mut rng)];
    let cfg = TrainConfig { dropout_rate: 1.0, ..TrainConfig::default() };
    assert!(matches!(train(arch.clone(), &cfg, &data), Err(Error::InvalidConfig(_))));
    assert!(matches!(train(arch, &TrainConfig::default(), &[]), Err(Error::Empty(_))));
}

#[test]
fn divergence_is_reported_as_numerical_failure() {
    let arch = tiny_arch(4, false);
    let mut rng = seeded(13, "t");
    let data: Vec<_> = (0..4).map(|_| random_example(&arch, &mut rng)).collect();
    let cfg = TrainConfig {
        learning_rate: f64::MAX,
        hidden: 4,
        nonneg: false,
        train_dropout_rate: Some(0.0),
        ..TrainConfig::default()
    };
    assert!(matches!(train(arch, &cfg, &data), Err(Error::Numerical(_))));
}

fn fitted_estimator() -> (Estimator, Vec<TrainingExample>) {
    let examples: Vec<_> = (0..12)
        .map(|i| {
            let req = request(&format!("loc{}", i % 3), 1 + i % 4);
            let booked = GeoPoint {
                lat: req.center.lat + 0.01 * i as f64,
                lng: req.center.lng - 0.02,
            };
            TrainingExample { request: req, booked }
        })
        .collect();
    let cfg = TrainConfig { hidden: 16, epochs: 2, batch_size: 4, ..TrainConfig::default() };
    (fit_estimator(&examples, &cfg).unwrap().0, examples)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (est, examples) = fitted_estimator();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &est).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, est);
    let fv = est.encode(&examples[0].request);
    let m = DropoutMask::sample(0.95, 16, &mut seeded(0, "m"));
    assert_eq!(
        forward(&back.params, &fv, Some(&m)).unwrap().to_array().map(f64::to_bits),
        forward(&est.params, &fv, Some(&m)).unwrap().to_array().map(f64::to_bits)
    );
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let (est, _) = fitted_estimator();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &est).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
}

#[test]
fn checkpoint_from_other_vocab_is_a_version_error() {
    let (est, _) = fitted_estimator();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &est).unwrap();
    let other = crate::featurizer::build_vocab(&[request("elsewhere", 2)]).unwrap();
    assert!(matches!(load_checkpoint_for_vocab(&path, &other), Err(Error::VersionMismatch(_))));
    assert!(load_checkpoint_for_vocab(&path, &est.featurizer.vocab).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 99;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::VersionMismatch(_))));
}
