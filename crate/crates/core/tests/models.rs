use fodfnet_core::dataset::{
    assemble_dataset, assemble_patches, single_shell_sh, VoxelSample, NOISY_FIT_REGULARIZATION,
};
use fodfnet_core::models::{
    composite_loss, predict_volume, rescnn, train, Architecture, BatchObjective, LossWeights, Model, Prediction,
    TrainConfig,
};
use fodfnet_core::nn::{conv3d_raw, gradient_check, Conv3dShape, GradCheckConfig, Padding};
use fodfnet_core::phantom::{default_scheme, generate_volume, PhantomSpec, PhantomVolumes, TissueFractions};
use fodfnet_core::{Mask, ShCoefficients, Volume4D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_target(rng: &mut ChaCha8Rng) -> (Vec<f64>, [f64; 3]) {
    let sh = random_vec(rng, 45, 0.5);
    let a: f64 = rng.random();
    let b: f64 = rng.random::<f64>() * (1.0 - a);
    (sh, [a, b, 1.0 - a - b])
}

fn full_check(arch: Architecture, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(arch, seed);
    let x = random_vec(&mut rng, arch.input_len(), 1.0);
    let obj = BatchObjective::new(&model, vec![x], vec![random_target(&mut rng)], LossWeights::default()).unwrap();
    let cfg = GradCheckConfig {
        max_coordinates: usize::MAX,
        ..Default::default()
    };
    let report = gradient_check(&obj, model.params(), &cfg);
    assert_eq!(report.checked, model.params().n_coordinates());
    assert!(report.passed(), "{report:?}");
}

#[test]
fn resdnn_gradient_check_all_coordinates() {
    full_check(Architecture::ResDnn, 11);
}

#[test]
fn rescnn_gradient_check_all_coordinates() {
    full_check(Architecture::ResCnn, 12);
}

#[test]
fn output_shapes() {
    for arch in [Architecture::ResDnn, Architecture::ResCnn] {
        let model = Model::new(arch, 1);
        let p = model.predict(&vec![0.1; arch.input_len()]).unwrap();
        assert_eq!(p.fodf_sh.len(), 45);
        assert_eq!(p.fractions.len(), 3);
        assert!(model.predict(&[0.0; 44]).is_err());
    }
    assert_eq!(Architecture::ResCnn.input_len(), 3 * 3 * 3 * 45);
}

#[test]
fn zero_input_yields_head_bias() {
    let mut model = Model::new(Architecture::ResDnn, 3);
    let slot = model.params().index_of("sh_head.bias").unwrap();
    let bias: Vec<f64> = (0..45).map(|i| i as f64 * 0.01).collect();
    model.params_mut().value_mut(slot).data_mut().copy_from_slice(&bias);
    let p = model.predict(&[0.0; 45]).unwrap();
    assert_eq!(p.fodf_sh.as_slice(), &bias[..]);
}

#[test]
fn parameter_counts() {
    let dnn = Model::new(Architecture::ResDnn, 0).params().n_coordinates();
    let expected_dnn = (45 * 400 + 400) + (400 * 45 + 45) + (45 * 200 + 200) + (200 * 45 + 45)
        + (45 * 200 + 200) + (200 * 45 + 45) + (200 * 3 + 3);
    assert_eq!(dnn, expected_dnn);
    let cnn = Model::new(Architecture::ResCnn, 0).params().n_coordinates();
    let grouped: usize = rescnn::GROUPS.iter().map(|g| 27 * g * g + g).sum();
    let expected_cnn = 2 * grouped + (27 * 45 * 128 + 128) + (128 * 64 + 64) + (64 * 45 + 45) + (64 * 3 + 3);
    assert_eq!(cnn, expected_cnn);
}

#[test]
fn valid_collapse_equals_flattened_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cin, cout) = (45, 128);
    let x = random_vec(&mut rng, 27 * cin, 1.0);
    let k = random_vec(&mut rng, 27 * cin * cout, 0.1);
    let shape = Conv3dShape {
        input: [3, 3, 3],
        kernel: 3,
        in_channels: cin,
        out_channels: cout,
        padding: Padding::Valid,
    };
    let mut y = vec![0.0; cout];
    conv3d_raw(&shape, &x, &k, None, &mut y);
    for (co, yv) in y.iter().enumerate() {
        let direct: f64 = (0..27 * cin).map(|r| x[r] * k[r * cout + co]).sum();
        assert!((yv - direct).abs() < 1e-12);
    }
}

fn voxel_samples(n: usize, seed: u64) -> Vec<VoxelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (t_sh, fr) = random_target(&mut rng);
            VoxelSample {
                input_sh: ShCoefficients::new(8, random_vec(&mut rng, 45, 1.0)).unwrap(),
                target_sh: ShCoefficients::new(8, t_sh).unwrap(),
                target_fractions: TissueFractions::new(fr[0], fr[1], fr[2]).unwrap(),
                voxel: [i, 0, 0],
            }
        })
        .collect()
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = voxel_samples(10, 1);
    let mut cfg = TrainConfig::new(Architecture::ResDnn, 9);
    cfg.epochs = 0;
    let (model, log) = train(&cfg, &data, &data).unwrap();
    assert_eq!(model, Model::new(Architecture::ResDnn, 9));
    assert!(log.epochs.is_empty());
}

#[test]
fn training_is_deterministic() {
    let data = voxel_samples(40, 2);
    let mut cfg = TrainConfig::new(Architecture::ResDnn, 4);
    cfg.epochs = 3;
    cfg.batch_size = 16;
    let a = train(&cfg, &data[..30], &data[30..]).unwrap();
    let b = train(&cfg, &data[..30], &data[30..]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn architecture_must_match_sample_kind() {
    let data = voxel_samples(5, 3);
    let cfg = TrainConfig::new(Architecture::ResCnn, 0);
    assert!(train(&cfg, &data, &data).is_err());
}

/// Every 40th masked sample of a phantom, up to 100.
fn phantom_subset<T: Clone>(assemble: impl Fn(&Volume4D, &PhantomVolumes, &Mask) -> Vec<T>) -> Vec<T> {
    let spec = PhantomSpec {
        seed: 3,
        ..Default::default()
    };
    let scheme = default_scheme(&[1000.0, 2000.0, 3000.0], 90, 18);
    let ph = generate_volume(&spec, &scheme).unwrap();
    let (sh, mask) = single_shell_sh(&ph.dwi, &scheme, 1000.0, 8, NOISY_FIT_REGULARIZATION).unwrap();
    assemble(&sh, &ph, &mask).into_iter().step_by(40).take(100).collect()
}

fn overfit(arch: Architecture, epochs: usize) -> f64 {
    let mut cfg = TrainConfig::new(arch, 1);
    cfg.epochs = epochs;
    cfg.batch_size = 25;
    cfg.learning_rate = 1e-3;
    cfg.patience = epochs;
    let log = match arch {
        Architecture::ResDnn => {
            let data = phantom_subset(|sh, ph, m| assemble_dataset(sh, &ph.fodf, &ph.fractions, m).unwrap());
            train(&cfg, &data, &data).unwrap().1
        }
        Architecture::ResCnn => {
            let data = phantom_subset(|sh, ph, m| assemble_patches(sh, &ph.fodf, &ph.fractions, m).unwrap());
            train(&cfg, &data, &data).unwrap().1
        }
    };
    log.best().unwrap().validation_loss
}

#[test]
fn resdnn_overfits_small_set() {
    let best = overfit(Architecture::ResDnn, 500);
    assert!(best < 1e-4, "best loss {best}");
}

#[test]
fn rescnn_overfits_small_set() {
    let best = overfit(Architecture::ResCnn, 200);
    assert!(best < 1e-3, "best loss {best}");
}

#[test]
fn loss_is_linear_in_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let preds: Vec<Prediction> = (0..5)
        .map(|_| Prediction {
            fodf_sh: ShCoefficients::new(8, random_vec(&mut rng, 45, 1.0)).unwrap(),
            fractions: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let targets: Vec<_> = (0..5)
        .map(|_| {
            let (sh, fr) = random_target(&mut rng);
            (ShCoefficients::new(8, sh).unwrap(), fr)
        })
        .collect();
    let l = |a: f64, b: f64| composite_loss(&preds, &targets, &LossWeights::new(a, b).unwrap()).unwrap().value;
    let (sh_only, fr_only) = (l(1.0, 0.0), l(0.0, 1.0));
    for (a, b) in [(1.0, 1.0), (0.3, 2.5), (4.0, 0.1)] {
        assert!((l(a, b) - (a * sh_only + b * fr_only)).abs() < 1e-12 * l(a, b).max(1.0));
    }
}

fn constant_volume(dims: [usize; 3], value: &[f64]) -> Volume4D {
    let n = dims.iter().product::<usize>();
    let mut v = Volume4D::zeros([dims[0], dims[1], dims[2], value.len()], [1.0; 3]).unwrap();
    for i in 0..n {
        v.set_series(i, value);
    }
    v
}

#[test]
fn masked_out_voxels_are_zero_and_single_voxel_matches_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::new(Architecture::ResDnn, 2);
    let data = random_vec(&mut rng, 45 * 8, 1.0);
    let vol = Volume4D::new([2, 2, 2, 45], [1.0; 3], data.iter().enumerate().map(|(i, _)| data[(i % 8) * 45 + i / 8]).collect()).unwrap();
    let mut mask = Mask::full([2, 2, 2]);
    mask.set(3, false);
    let out = predict_volume(&model, &vol, &mask).unwrap();
    assert!(out.fodf.series(3).iter().all(|v| *v == 0.0));
    assert!(out.fractions.series(3).iter().all(|v| *v == 0.0));
    let direct = model.predict(&vol.series(5)).unwrap();
    assert_eq!(out.fodf.series(5), direct.fodf_sh.as_slice());
    assert_eq!(out.fractions_raw.series(5), direct.fractions.to_vec());
    assert!(predict_volume(&model, &vol, &Mask::full([2, 2, 3])).is_err());
}

#[test]
fn rescnn_constant_volume_gives_constant_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = Model::new(Architecture::ResCnn, 3);
    let value = random_vec(&mut rng, 45, 1.0);
    let vol = constant_volume([5, 5, 5], &value);
    let out = predict_volume(&model, &vol, &Mask::full([5, 5, 5])).unwrap();
    let reference = out.fodf.series(0);
    // edge replication makes every patch identical, border voxels included
    for v in 0..125 {
        for (a, b) in out.fodf.series(v).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn parameters_round_trip_through_layout_check() {
    let model = Model::new(Architecture::ResCnn, 4);
    let again = Model::from_parameters(Architecture::ResCnn, model.params().clone()).unwrap();
    assert_eq!(again, model);
    assert!(Model::from_parameters(Architecture::ResDnn, model.params().clone()).is_err());
}
