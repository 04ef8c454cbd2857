use fodfnet_core::peaks::PeakFinder;
use fodfnet_core::phantom::{
    add_noise, default_scheme, generate_volume, ground_truth_fodf, simulate_signal, FiberConfig,
    IsotropicDiffusivities, PhantomSpec, TissueFractions, Zone,
};
use fodfnet_core::sh::Direction;
use fodfnet_core::{ShCoefficients, Volume4D};
use proptest::prelude::*;

fn direction() -> impl Strategy<Value = Direction> {
    (0.0..std::f64::consts::PI, 0.0..2.0 * std::f64::consts::PI).prop_map(|(t, p)| Direction::from_spherical(t, p))
}

fn fractions() -> impl Strategy<Value = TissueFractions> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b)| TissueFractions::new(a, (1.0 - a) * b, (1.0 - a) * (1.0 - b)).unwrap())
}

proptest! {
    #[test]
    fn signal_is_bounded(f in fractions(), d in direction(), g in direction(), b in 0.0..5000.0f64) {
        let fib = FiberConfig::single(d, (1.7e-3, 0.2e-3));
        let s = simulate_signal(&f, &fib, &IsotropicDiffusivities::default(), b, &g);
        prop_assert!(s > 0.0 && s <= 1.0 + 1e-15);
    }

    #[test]
    fn isotropic_signal_decreases_with_b(csf in 0.0..1.0f64, b in 0.0..4000.0f64, db in 1.0..1000.0f64, g in direction()) {
        let f = TissueFractions::new(csf, 1.0 - csf, 0.0).unwrap();
        let fib = FiberConfig::single(Direction::PLUS_Z, (1.7e-3, 0.2e-3));
        let iso = IsotropicDiffusivities::default();
        prop_assert!(simulate_signal(&f, &fib, &iso, b + db, &g) < simulate_signal(&f, &fib, &iso, b, &g));
    }

    #[test]
    fn fodf_is_linear_in_fraction_and_weights(d1 in direction(), d2 in direction(), w in 0.0..1.0f64, wm in 0.0..1.0f64) {
        let eig = (1.7e-3, 0.2e-3);
        let mixed = FiberConfig::new(vec![d1, d2], vec![w, 1.0 - w], eig).unwrap();
        let c = ground_truth_fodf(&mixed, wm, 8, 0.02).unwrap();
        let a = ground_truth_fodf(&FiberConfig::single(d1, eig), 1.0, 8, 0.02).unwrap();
        let b = ground_truth_fodf(&FiberConfig::single(d2, eig), 1.0, 8, 0.02).unwrap();
        for j in 0..45 {
            let expected = wm * (w * a.as_slice()[j] + (1.0 - w) * b.as_slice()[j]);
            prop_assert!((c.as_slice()[j] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn rician_mean_of_zero_signal() {
    let snr = 20.0;
    let zeros = Volume4D::zeros([20, 20, 20, 25], [1.0; 3]).unwrap();
    let noisy = add_noise(&zeros, snr, 5);
    let mean = noisy.data().iter().sum::<f64>() / noisy.data().len() as f64;
    let expected = (std::f64::consts::PI / 2.0).sqrt() / snr;
    assert!((mean / expected - 1.0).abs() < 0.02, "mean {mean} vs {expected}");
    assert_eq!(noisy, add_noise(&zeros, snr, 5));
    assert_ne!(noisy, add_noise(&zeros, snr, 6));
}

#[test]
fn default_phantom_zones_and_truth() {
    let spec = PhantomSpec {
        snr: None,
        ..Default::default()
    };
    let scheme = default_scheme(&[1000.0], 90, 6);
    let ph = generate_volume(&spec, &scheme).unwrap();
    let finder = PeakFinder::with_defaults();
    let mut counts = [0usize; 4];
    for v in 0..ph.zones.len() {
        let f = ph.fractions.series(v);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let zone = ph.zones[v];
        counts[zone as usize] += 1;
        if zone == Zone::Crossing {
            let c = ShCoefficients::from_slice(&ph.fodf.series(v)).unwrap();
            let peaks = finder.find(&c).unwrap();
            assert_eq!(peaks.len(), 2, "crossing voxel {v}");
            let fibers = ph.fibers[v].as_ref().unwrap();
            assert!((fibers.directions()[0].axial_angle_deg(&fibers.directions()[1]) - 90.0).abs() < 1e-6);
        }
    }
    assert!(counts.iter().all(|c| *c > 0), "{counts:?}");
    // b0 rows of a noiseless phantom are one
    let n = ph.dwi.n_voxels();
    for m in scheme.b0_indices() {
        assert!(ph.dwi.data()[m * n..(m + 1) * n].iter().all(|x| (x - 1.0).abs() < 1e-12));
    }
}
