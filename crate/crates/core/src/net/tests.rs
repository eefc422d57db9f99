use super::blocks::{cbam, ruba, Ctx};
use super::config::{count_params, REDUCTION};
use super::*;
use crate::autograd::gradcheck;
use crate::geometry::Keypoint;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn small() -> NetworkConfig {
    NetworkConfig {
        widths: [16; 5],
        ..NetworkConfig::default()
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0f32))
}

fn max_norm_error(v: &DescriptorVolume) -> f32 {
    v.pixel_norms().iter().map(|n| (n - 1.0).abs()).fold(0.0, f32::max)
}

#[test]
fn builds_are_deterministic() {
    let a = build_network::<f32>(&NetworkConfig::default(), 7).unwrap();
    let b = build_network::<f32>(&NetworkConfig::default(), 7).unwrap();
    let c = build_network::<f32>(&NetworkConfig::default(), 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn forward_shape_and_norms() {
    let mut model = build_network::<f32>(&NetworkConfig::default(), 1).unwrap();
    let vol = model.forward(&random_tensor(&[3, 64, 64], 2), Mode::Eval).unwrap();
    assert_eq!((vol.dim(), vol.height(), vol.width()), (128, 64, 64));
    assert!(max_norm_error(&vol) <= 1e-5);
}

#[test]
fn rejects_unpadded_input() {
    let mut model = build_network::<f32>(&small(), 1).unwrap();
    let err = model.forward(&random_tensor(&[3, 40, 32], 0), Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("pad"), "{err}");
    assert!(model.forward(&random_tensor(&[1, 32, 32], 0), Mode::Eval).is_err());
}

#[test]
fn parameter_budget() {
    let cfg = NetworkConfig::default();
    let model = build_network::<f32>(&cfg, 0).unwrap();
    let n = model.param_count();
    assert_eq!(n, count_params(&cfg));
    assert!((n as f64 - 2.4e6).abs() <= 0.1 * 2.4e6, "{n}");
    assert_eq!(n, build_network::<f32>(&cfg, 99).unwrap().param_count());
}

#[test]
fn doubling_widths_more_than_doubles_count() {
    let cfg = small();
    let wide = NetworkConfig {
        widths: cfg.widths.map(|w| 2 * w),
        ..cfg.clone()
    };
    assert!(count_params(&wide) > 2 * count_params(&cfg));
}

#[test]
fn stem_count_by_hand() {
    let cfg = NetworkConfig {
        widths: [32, 32, 32, 32, 32],
        k: 3,
        ..NetworkConfig::default()
    };
    let model = build_network::<f32>(&cfg, 0).unwrap();
    let stem: usize = model
        .params
        .iter()
        .filter(|p| p.name.starts_with("stem."))
        .map(|p| p.tensor.numel())
        .sum();
    assert_eq!(stem, 3 * 32 * 3 * 3 + 32);
}

#[test]
fn invalid_widths_are_rejected() {
    let cfg = NetworkConfig {
        widths: [16, 24, 32, 64, 128],
        ..NetworkConfig::default()
    };
    assert!(matches!(build_network::<f32>(&cfg, 0), Err(Error::Config(_))));
}

/// Registers the attention weights of `model`'s first encoder block.
fn cbam_setup(model: &Model<f64>, tape: &mut Tape<f64>) -> (Vec<Var>, CbamParams) {
    (model.register(tape), model.down_blocks()[0].cbam)
}

fn model64(cfg: &NetworkConfig) -> Model<f64> {
    build_network::<f64>(cfg, 3).unwrap()
}

#[test]
fn cbam_with_zero_weights_quarters_input() {
    let mut model = model64(&small());
    let p = model.down_blocks()[0].cbam;
    for i in [p.mlp1, p.mlp2, p.spatial] {
        model.params[i].tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::inference();
    let (params, p) = cbam_setup(&model, &mut tape);
    let f = random_tensor(&[2, 16, 4, 4], 1).cast::<f64>();
    let x = tape.constant(f.clone());
    let y = cbam(&mut tape, &params, &p, x).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(f.data()) {
        assert!((a - b / 4.0).abs() < 1e-12);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn cbam_matches_straight_line_oracle() {
    let model = model64(&small());
    let mut tape = Tape::inference();
    let (params, p) = cbam_setup(&model, &mut tape);
    let c = 16;
    let levels: Vec<f64> = (0..c).map(|i| (i as f64 * 0.37).sin()).collect();
    let f = Tensor::from_fn([1, c, 2, 2], |i| levels[i / 4]);
    let x = tape.constant(f);
    let y = cbam(&mut tape, &params, &p, x).unwrap();

    let w1 = model.params[p.mlp1].tensor.data();
    let w2 = model.params[p.mlp2].tensor.data();
    let ws = model.params[p.spatial].tensor.data();
    let hidden = c / REDUCTION;
    // Spatially constant input: average and max pooling agree.
    let mlp = |v: &[f64]| -> Vec<f64> {
        let h: Vec<f64> = (0..hidden)
            .map(|j| gelu((0..c).map(|i| w1[j * c + i] * v[i]).sum()))
            .collect();
        (0..c)
            .map(|i| (0..hidden).map(|j| w2[i * hidden + j] * h[j]).sum())
            .collect()
    };
    let m = mlp(&levels);
    let gate: Vec<f64> = m.iter().map(|v| sigmoid(2.0 * v)).collect();
    let f1: Vec<f64> = levels.iter().zip(&gate).map(|(a, g)| a * g).collect();
    let cavg = f1.iter().sum::<f64>() / c as f64;
    let cmax = f1.iter().cloned().fold(f64::MIN, f64::max);
    for py in 0..2usize {
        for px in 0..2usize {
            let mut logit = 0.0;
            for (ch, val) in [(0, cavg), (1, cmax)] {
                for ky in 0..7usize {
                    for kx in 0..7usize {
                        let (sy, sx) = (py as isize + ky as isize - 3, px as isize + kx as isize - 3);
                        if (0..2).contains(&sy) && (0..2).contains(&sx) {
                            logit += ws[(ch * 7 + ky) * 7 + kx] * val;
                        }
                    }
                }
            }
            let s = sigmoid(logit);
            for (ch, &g) in f1.iter().enumerate().take(c) {
                let got = tape.value(y).data()[(ch * 2 + py) * 2 + px];
                assert!((got - g * s).abs() < 1e-12, "{got} vs {}", g * s);
            }
        }
    }
}

#[test]
fn cbam_gates_shrink_magnitudes_and_check_divisibility() {
    let model = model64(&small());
    let mut tape = Tape::inference();
    let (params, p) = cbam_setup(&model, &mut tape);
    let f = random_tensor(&[1, 16, 4, 4], 5).cast::<f64>();
    let x = tape.constant(f.clone());
    let y = cbam(&mut tape, &params, &p, x).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(f.data()) {
        assert!(a.abs() < b.abs() || *b == 0.0);
    }
    let odd = tape.constant(Tensor::zeros([1, 8, 2, 2]));
    assert!(matches!(cbam(&mut tape, &params, &p, odd), Err(Error::Config(_))));
}

fn run_block(
    model: &Model<f64>,
    block: &RubaParams,
    input: Tensor<f64>,
    skip: Option<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::inference();
    let params = model.register(&mut tape);
    let x = tape.constant(input);
    let s = skip.map(|s| tape.constant(s));
    let ctx = Ctx {
        cfg: model.config(),
        params: &params,
    };
    let mut stats = model.stats.clone();
    let y = ruba(&mut tape, &ctx, block, x, s, &mut stats, Mode::Eval)?;
    Ok(tape.take_value(y))
}

fn zero(model: &mut Model<f64>, idx: usize) {
    model.params[idx].tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn ruba_shapes_and_contracts() {
    let cfg = NetworkConfig {
        widths: [16, 32, 32, 32, 32],
        ..NetworkConfig::default()
    };
    let model = model64(&cfg);
    let down = model.down_blocks()[0].clone();
    let out = run_block(&model, &down, random_tensor(&[2, 16, 8, 8], 0).cast(), None).unwrap();
    assert_eq!(out.shape(), &[2, 32, 4, 4]);
    let up = model.up_blocks()[3].clone();
    assert!(matches!(
        run_block(&model, &up, random_tensor(&[1, 32, 4, 4], 0).cast(), None),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        run_block(
            &model,
            &up,
            random_tensor(&[1, 32, 4, 4], 0).cast(),
            Some(Tensor::zeros([1, 16, 6, 6]))
        ),
        Err(Error::Dimension { .. })
    ));
    let out = run_block(
        &model,
        &up,
        random_tensor(&[1, 32, 4, 4], 0).cast(),
        Some(Tensor::zeros([1, 16, 8, 8])),
    );
    assert_eq!(out.unwrap().shape(), &[1, 16, 8, 8]);
}

#[test]
fn ruba_zero_weights_collapse() {
    let mut model = model64(&small());
    let block = model.down_blocks()[1].clone();
    zero(&mut model, block.align);
    for (_, conv) in &block.stages {
        zero(&mut model, conv.weight);
    }
    let out = run_block(&model, &block, random_tensor(&[1, 16, 8, 8], 3).cast(), None).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn ruba_selector_align() {
    let mut model = model64(&small());
    let block = model.up_blocks()[0].clone();
    let (cin, cout) = (block.in_ch, block.out_ch);
    assert_eq!((cin, cout), (32, 16));
    let w = model.params[block.align].tensor.data_mut();
    w.iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = if i / cin == i % cin { 1.0 } else { 0.0 });
    for (_, conv) in &block.stages {
        zero(&mut model, conv.weight);
    }
    let input: Tensor<f64> = random_tensor(&[1, 16, 2, 2], 4).cast();
    let skip: Tensor<f64> = random_tensor(&[1, 16, 4, 4], 5).cast();
    let out = run_block(&model, &block, input.clone(), Some(skip)).unwrap();

    let mut tape = Tape::inference();
    let x = tape.constant(input);
    let up = tape.upsample_bilinear2(x).unwrap();
    assert_eq!(out.data(), tape.value(up).data());
}

#[test]
fn train_and_eval_normalisation_differ() {
    let mut model = build_network::<f32>(&small(), 2).unwrap();
    let img = random_tensor(&[3, 32, 32], 6);
    let eval1 = model.forward(&img, Mode::Eval).unwrap();
    let eval2 = model.forward(&img, Mode::Eval).unwrap();
    assert_eq!(eval1, eval2);
    let before = model.stats.clone();
    let train = model.forward(&img, Mode::Train).unwrap();
    assert_ne!(train, eval1);
    assert_ne!(model.stats, before);
    assert!(max_norm_error(&train) <= 1e-5);
}

fn perturb(model: &mut Model<f32>, idx: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.params[idx]
        .tensor
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-1.0..1.0f32));
}

fn blocks_of(model: &Model<f32>) -> Vec<RubaParams> {
    model.down_blocks().iter().chain(model.up_blocks()).cloned().collect()
}

#[test]
fn ablation_switches_sever_weights() {
    let img = random_tensor(&[3, 32, 32], 9);
    let no_attention = NetworkConfig {
        use_attention: false,
        ..NetworkConfig::default()
    };
    let mut a = build_network::<f32>(&no_attention, 4).unwrap();
    let base = a.forward(&img, Mode::Eval).unwrap();
    for (i, b) in blocks_of(&a).iter().enumerate() {
        for idx in [b.cbam.mlp1, b.cbam.mlp2, b.cbam.spatial] {
            perturb(&mut a, idx, i as u64);
        }
    }
    assert_eq!(a.forward(&img, Mode::Eval).unwrap(), base);

    let no_residual = NetworkConfig {
        use_residual: false,
        ..NetworkConfig::default()
    };
    let mut r = build_network::<f32>(&no_residual, 4).unwrap();
    let base = r.forward(&img, Mode::Eval).unwrap();
    for (i, b) in blocks_of(&r).iter().enumerate() {
        let mut idx = vec![b.cbam.mlp1, b.cbam.mlp2, b.cbam.spatial];
        for (norm, conv) in &b.stages {
            idx.extend([norm.scale, norm.shift, conv.weight]);
            idx.extend(conv.bias);
        }
        for j in idx {
            perturb(&mut r, j, i as u64 * 100 + j as u64);
        }
    }
    assert_eq!(r.forward(&img, Mode::Eval).unwrap(), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn output_matches_input_size(h in 1usize..=8, w in 1usize..=8, seed in any::<u64>()) {
        let (h, w) = (16 * h, 16 * w);
        let model = build_network::<f32>(&small(), seed).unwrap();
        let img = random_tensor(&[1, 3, h, w], seed);
        let vol = model.forward_eval_batch(img).unwrap().remove(0);
        prop_assert_eq!((vol.height(), vol.width()), (h, w));
        prop_assert!(max_norm_error(&vol) <= 1e-5);
    }
}

fn two_pixel_volume() -> DescriptorVolume {
    let d1 = [0.6f32, 0.8, 0.0];
    let d2 = [0.0f32, 0.6, 0.8];
    let data = (0..3).flat_map(|c| [d1[c], d2[c]]).collect();
    DescriptorVolume::new(3, 1, 2, data).unwrap()
}

#[test]
fn sampling_at_integer_and_half_pixels() {
    let v = two_pixel_volume();
    let m = v
        .sample_descriptors(&[Keypoint::new(1.0, 0.0), Keypoint::new(0.5, 0.0)])
        .unwrap();
    assert_eq!(m.row(0), &[0.0, 0.6, 0.8]);
    let mid = [0.3f64, 0.7, 0.4];
    let n = mid.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (got, want) in m.row(1).iter().zip(mid) {
        assert!((*got as f64 - want / n).abs() < 1e-6);
    }
}

#[test]
fn sampling_real_volume() {
    let mut model = build_network::<f32>(&small(), 5).unwrap();
    let vol = model.forward(&random_tensor(&[3, 32, 32], 1), Mode::Eval).unwrap();
    let m = vol
        .sample_descriptors(&[
            Keypoint::new(10.0, 7.0),
            Keypoint::new(3.25, 30.5),
            Keypoint::new(31.0, 31.0),
        ])
        .unwrap();
    assert_eq!(m.row(0), vol.pixel(10, 7).as_slice());
    for i in 0..3 {
        let n: f32 = m.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    let err = vol
        .sample_descriptors(&[Keypoint::new(1.0, 1.0), Keypoint::new(31.5, 2.0)])
        .unwrap_err();
    assert!(matches!(err, Error::OutOfBounds { index: 1, .. }));
}

#[test]
fn crop_keeps_top_left() {
    let v = DescriptorVolume::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(v.crop(1, 2).unwrap().data(), &[1.0, 2.0]);
    assert!(v.crop(3, 1).is_err());
}

/// Scalar loss over sampled descriptors, as a closure of all parameters.
fn end_to_end_loss(model: &Model<f64>, image: Tensor<f64>) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + '_ {
    let points = [(3.5, 4.25), (20.0, 11.0), (27.75, 30.5), (9.0, 16.5)];
    move |tape, vars| {
        let x = tape.constant(image.clone());
        let mut stats = model.stats.clone();
        let vol = model.forward_with(tape, vars, x, &mut stats, Mode::Train)?;
        let d = sample_descriptors_on_tape(tape, vol, 0, &points)?;
        let weights = tape.constant(Tensor::from_fn([points.len(), DESCRIPTOR_DIM], |i| {
            1.0 + 0.01 * (i % 13) as f64
        }));
        let weighted = tape.mul(d, weights)?;
        Ok(tape.sum(weighted))
    }
}

#[test]
fn end_to_end_gradients() {
    let model = model64(&small());
    let image: Tensor<f64> = random_tensor(&[1, 3, 32, 32], 21).cast();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let f = end_to_end_loss(&model, image);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let directions: Vec<Vec<Tensor<f64>>> = (0..6)
        .map(|_| {
            inputs
                .iter()
                .map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    // The directions move every weight at once, so a smaller step keeps the
    // perturbation clear of max-pooling switch points.
    let report = gradcheck::check_directions(&inputs, &f, &directions, 1e-6, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");

    let selection: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            [(i, a), (i, b)]
        })
        .collect();
    let report = gradcheck::check_elements(&inputs, &f, &selection, 1e-5, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
