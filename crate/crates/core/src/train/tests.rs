use super::checkpoint::decode;
use super::*;
use crate::error::Error;
use crate::net::{NetworkConfig, Parameter};
use crate::tensor::Tensor;
use proptest::prelude::*;

fn tiny() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        crop_size: 32,
        source_size: 64,
        n_sources: 2,
        val_pairs: 2,
        grid_stride: 6,
        network: NetworkConfig {
            widths: [16; 5],
            ..NetworkConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(2048, &cfg), 5e-3);
    let decayed = 0.005 * (100_000.0 * 0.99996f64.ln()).exp();
    assert!((decayed - 9.16e-5).abs() < 1e-7);
    assert_eq!(lr_at(2048 + 100_000, &cfg), 1e-4);
    assert!((lr_at(2047, &cfg) - 5e-3).abs() < 3e-6);
    assert!(lr_at(1024, &cfg) > lr_at(1023, &cfg));
}

proptest! {
    #[test]
    fn lr_never_below_floor(step in 0u64..10_000_000) {
        let cfg = TrainConfig::default();
        let lr = lr_at(step, &cfg);
        prop_assert!(lr >= cfg.eta_min && lr <= cfg.eta_max);
    }
}

fn scalar_param(v: f64) -> Vec<Parameter<f64>> {
    vec![Parameter::new("theta", Tensor::scalar(v))]
}

fn no_decay() -> TrainConfig {
    TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn adamw_first_step_closed_form() {
    let mut p = scalar_param(1.0);
    adamw_step(&mut p, &[vec![1.0]], 1, 0.1, &no_decay()).unwrap();
    // bias-corrected moments are both 1 after one step
    let expected = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((p[0].tensor.data()[0] - expected).abs() < 1e-12);
}

#[test]
fn adamw_pure_decay_and_rest() {
    let mut p = scalar_param(1.0);
    adamw_step(&mut p, &[vec![0.0]], 1, 0.1, &TrainConfig::default()).unwrap();
    assert!((p[0].tensor.data()[0] - 0.999).abs() < 1e-15);
    let mut p = scalar_param(0.25);
    adamw_step(&mut p, &[vec![0.0]], 1, 0.1, &no_decay()).unwrap();
    assert_eq!(p[0].tensor.data()[0], 0.25);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut p = vec![
        Parameter::new("a", Tensor::scalar(1.0)),
        Parameter::new("b.weight", Tensor::scalar(2.0)),
    ];
    let before = p.clone();
    let err = adamw_step(&mut p, &[vec![0.5], vec![f64::NAN]], 1, 0.1, &no_decay()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b.weight"));
    assert_eq!(p, before);
}

#[test]
fn adamw_solves_quadratic() {
    let mut p = scalar_param(0.0);
    let cfg = no_decay();
    for t in 1..=2000u64 {
        let theta = p[0].tensor.data()[0];
        // cosine-free decaying step keeps the final oscillation small
        let lr = 0.05 * (1.0 - t as f64 / 2001.0);
        adamw_step(&mut p, &[vec![2.0 * (theta - 3.0)]], t, lr, &cfg).unwrap();
    }
    assert!((p[0].tensor.data()[0] - 3.0).abs() < 1e-3, "{}", p[0].tensor.data()[0]);
}

#[test]
fn config_round_trip_and_errors() {
    let cfg = TrainConfig::default();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let err = TrainConfig::from_toml("steps = 5\nbatch_sise = 3\n")
        .unwrap_err()
        .to_string();
    assert!(err.contains("batch_sise") && err.contains("line 2"), "{err}");
    let err = TrainConfig::from_toml("crop_size = 40\n").unwrap_err().to_string();
    assert!(err.contains("crop_size"), "{err}");
    assert!(TrainConfig::from_toml("eta_min = 0.01\n").is_err());
    let cfg = TrainConfig::from_toml("detector = \"harris\"\n[network]\nuse_attention = false\n").unwrap();
    assert_eq!(cfg.detector, Detector::Harris);
    assert!(!cfg.network.use_attention);
}

fn trained(cfg: &TrainConfig, steps: u64) -> Checkpoint {
    let sources = procedural_sources(cfg);
    let mut ck = Checkpoint::new(cfg.clone()).unwrap();
    ck.run(steps, &sources, None, &mut |_| Ok(())).unwrap();
    ck
}

fn encoded(ck: &Checkpoint) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sdsc");
    save_checkpoint(ck, &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn zero_steps_leave_initial_state() {
    let cfg = tiny();
    let a = trained(&cfg, 0);
    let b = Checkpoint::new(cfg).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(encoded(&a), encoded(&b));
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let ck = trained(&tiny(), 2);
    let bytes = encoded(&ck);
    let back = decode(&bytes).unwrap();
    assert_eq!(back.model.params, ck.model.params);
    assert_eq!(back.model.stats, ck.model.stats);
    assert_eq!(
        (back.step, back.updates, back.curriculum),
        (ck.step, ck.updates, ck.curriculum)
    );
    assert_eq!(lr_at(back.step, &back.config), lr_at(ck.step, &ck.config));
    assert_eq!(back.rng, ck.rng);
    assert_eq!(encoded(&back), bytes);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = encoded(&Checkpoint::new(tiny()).unwrap());
    let mut flipped = bytes.clone();
    let at = bytes.len() - 100;
    flipped[at] ^= 0x40;
    assert!(matches!(decode(&flipped), Err(Error::Checksum { .. })));
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    assert!(matches!(decode(&bytes[..10]), Err(Error::Truncated(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::BadMagic { .. })));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode(&version), Err(Error::VersionMismatch { found: 9, .. })));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = tiny();
    let sources = procedural_sources(&cfg);
    let mut losses = Vec::new();
    let mut straight = Checkpoint::new(cfg.clone()).unwrap();
    for _ in 0..6 {
        losses.push(straight.train_step(&sources).unwrap().loss);
    }
    assert!(losses.iter().any(|&l| l != 0.0));

    let mut first = Checkpoint::new(cfg).unwrap();
    let mut again = Vec::new();
    for _ in 0..3 {
        again.push(first.train_step(&sources).unwrap().loss);
    }
    let mut resumed = decode(&encoded(&first)).unwrap();
    for _ in 0..3 {
        again.push(resumed.train_step(&sources).unwrap().loss);
    }
    assert_eq!(losses, again);
    assert_eq!(resumed.model.params, straight.model.params);
    assert!(encoded(&resumed) == encoded(&straight));
}

#[test]
fn harris_training_step_forms_triplets() {
    let cfg = TrainConfig {
        detector: Detector::Harris,
        ..tiny()
    };
    let sources = procedural_sources(&cfg);
    let mut ck = Checkpoint::new(cfg).unwrap();
    let s = ck.train_step(&sources).unwrap();
    assert!(s.triplets > 0 && s.applied && s.loss.is_finite());
}

#[test]
fn run_logs_validation() {
    let cfg = TrainConfig {
        val_every: 2,
        log_every: 1,
        ..tiny()
    };
    let sources = procedural_sources(&cfg);
    let val = ValidationSet::new(&cfg).unwrap();
    let mut ck = Checkpoint::new(cfg).unwrap();
    let mut records = Vec::new();
    ck.run(3, &sources, Some(&val), &mut |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 0, 1, 2]);
    let with_val: Vec<bool> = records.iter().map(|r| r.val_accuracy.is_some()).collect();
    assert_eq!(with_val, vec![true, false, true, true]);
    assert!(records
        .iter()
        .filter_map(|r| r.val_accuracy)
        .all(|a| (0.0..=1.0).contains(&a)));
}
