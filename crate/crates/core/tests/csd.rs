use std::f64::consts::PI;

use fodfnet_core::csd::{estimate_response, CsdModel, CsdParams, ResponseFunction, ResponseVoxel};
use fodfnet_core::peaks::{Peak, PeakFinder};
use fodfnet_core::phantom::{add_noise, simulate_signal, FiberConfig, IsotropicDiffusivities, TissueFractions};
use fodfnet_core::sh::{rotation_between, Direction};
use fodfnet_core::sphere::SphereGrid;
use fodfnet_core::Volume4D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EIG: (f64, f64) = (1.7e-3, 0.2e-3);
const B: f64 = 1000.0;

fn wm_signal(fibers: &FiberConfig, dirs: &[Direction]) -> Vec<f64> {
    let wm = TissueFractions::new(0.0, 0.0, 1.0).unwrap();
    dirs.iter()
        .map(|g| simulate_signal(&wm, fibers, &IsotropicDiffusivities::default(), B, g))
        .collect()
}

fn legendre(l: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return 1.0;
    }
    for n in 1..l {
        let p2 = ((2 * n + 1) as f64 * x * p1 - n as f64 * p0) / (n + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Zonal projection of the single-fibre signal by composite Simpson in cos(theta).
fn projected_response(l: usize) -> f64 {
    let n = 20_000;
    let h = 2.0 / n as f64;
    let f = |x: f64| (-B * (EIG.1 + (EIG.0 - EIG.1) * x * x)).exp() * legendre(l, x);
    let mut s = f(-1.0) + f(1.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(-1.0 + i as f64 * h);
    }
    2.0 * PI * ((2 * l + 1) as f64 / (4.0 * PI)).sqrt() * s * h / 3.0
}

fn random_direction(rng: &mut ChaCha8Rng) -> Direction {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    Direction::normalized(r * phi.cos(), r * phi.sin(), z).unwrap()
}

fn perpendicular(rng: &mut ChaCha8Rng, a: &Direction) -> Direction {
    loop {
        let p = a.cross(&random_direction(rng));
        if let Some(d) = Direction::normalized(p[0], p[1], p[2]) {
            return d;
        }
    }
}

#[test]
fn response_matches_zonal_projection() {
    let dense = SphereGrid::hemisphere_rings(60, 120).directions().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let axes = [Direction::PLUS_Z, random_direction(&mut rng), random_direction(&mut rng)];
    let signals: Vec<Vec<f64>> = axes.iter().map(|a| wm_signal(&FiberConfig::single(*a, EIG), &dense)).collect();
    let voxels: Vec<ResponseVoxel<'_>> = axes
        .iter()
        .zip(&signals)
        .map(|(a, s)| ResponseVoxel {
            signal: s,
            directions: &dense,
            axis: *a,
        })
        .collect();
    let est = estimate_response(&voxels, 0.0).unwrap();
    for l in (0..=8).step_by(2) {
        let expected = projected_response(l);
        assert!((est.response.zonal(l) - expected).abs() < 1e-6, "l={l}: {} vs {expected}", est.response.zonal(l));
    }
    assert!(est.nonaxial_energy < 1e-6);
}

fn scheme_response(dirs: &[Direction]) -> ResponseFunction {
    let s = wm_signal(&FiberConfig::single(Direction::PLUS_Z, EIG), dirs);
    let vox = ResponseVoxel {
        signal: &s,
        directions: dirs,
        axis: Direction::PLUS_Z,
    };
    estimate_response(&[vox], 0.0).unwrap().response
}

fn nearest(peaks: &[Peak], d: &Direction) -> f64 {
    peaks.iter().map(|p| p.direction.axial_angle_deg(d)).fold(f64::MAX, f64::min)
}

#[test]
fn crossings_at_snr_30() {
    let dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
    let model = CsdModel::new(
        &scheme_response(&dirs),
        &dirs,
        &SphereGrid::default_constraint_grid(),
        CsdParams::default(),
    )
    .unwrap();
    let finder = PeakFinder::with_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth: Vec<(Direction, Direction)> = (0..100)
        .map(|_| {
            let a = random_direction(&mut rng);
            (a, perpendicular(&mut rng, &a))
        })
        .collect();
    let mut clean = Volume4D::zeros([100, 1, 1, 90], [1.0; 3]).unwrap();
    for (v, (a, b)) in truth.iter().enumerate() {
        let fib = FiberConfig::new(vec![*a, *b], vec![0.5, 0.5], EIG).unwrap();
        clean.set_series(v, &wm_signal(&fib, &dirs));
    }
    let noisy = add_noise(&clean, 30.0, 3);
    let mut ok = 0;
    for (v, (a, b)) in truth.iter().enumerate() {
        let fit = model.fit(&noisy.series(v)).unwrap();
        let peaks = finder.find(&fit.coefficients).unwrap();
        if peaks.len() == 2 && nearest(&peaks, a) < 10.0 && nearest(&peaks, b) < 10.0 {
            ok += 1;
        }
    }
    assert!(ok >= 90, "{ok} of 100");
}

#[test]
fn constraint_suppresses_negative_lobes() {
    let dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
    let grid = SphereGrid::default_constraint_grid();
    let response = scheme_response(&dirs);
    let model = CsdModel::new(&response, &dirs, &grid, CsdParams::default()).unwrap();
    let plain = fodfnet_core::linalg::QrFactor::new(model.convolution()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let a = random_direction(&mut rng);
        let b = random_direction(&mut rng);
        let fib = FiberConfig::new(vec![a, b], vec![0.6, 0.4], EIG).unwrap();
        let signal = wm_signal(&fib, &dirs);
        let fit = model.fit(&signal).unwrap();
        assert!(fit.converged);
        let amps = model.constraint_basis().matvec(fit.coefficients.as_slice());
        let free = model.constraint_basis().matvec(&plain.solve(&signal));
        let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
        let max = amps.iter().copied().fold(f64::MIN, f64::max);
        // the penalty pulls constrained rows towards zero without pinning them there
        assert!(min(&amps) >= -0.05 * max, "min {}, max {max}", min(&amps));
        assert!(min(&amps) > min(&free));
    }
}

#[test]
fn rotating_the_acquisition_rotates_the_peaks() {
    let dirs = SphereGrid::fibonacci_hemisphere(90).directions().to_vec();
    let grid = SphereGrid::default_constraint_grid();
    let response = scheme_response(&dirs);
    let finder = PeakFinder::with_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let a = random_direction(&mut rng);
        let b = perpendicular(&mut rng, &a);
        let signal = wm_signal(&FiberConfig::new(vec![a, b], vec![0.5, 0.5], EIG).unwrap(), &dirs);
        let rot = rotation_between(&Direction::PLUS_Z, &random_direction(&mut rng));
        let turned: Vec<Direction> = dirs.iter().map(|d| d.rotated(&rot)).collect();
        let fit = |d: &[Direction]| {
            let model = CsdModel::new(&response, d, &grid, CsdParams::default()).unwrap();
            finder.find(&model.fit(&signal).unwrap().coefficients).unwrap()
        };
        let (before, after) = (fit(&dirs), fit(&turned));
        assert_eq!(before.len(), after.len());
        for p in &before {
            assert!(nearest(&after, &p.direction.rotated(&rot)) < 2.0);
        }
    }
}
