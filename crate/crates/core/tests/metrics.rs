use fodfnet_core::metrics::{
    acc, acc_histogram, acc_values, evaluate, rmse_fractions, rmse_fractions_raw, rmse_sh, signed_rank_test,
    spatial_maps, summarize, MethodInput, RankTestMethod, ACC_SENTINEL,
};
use fodfnet_core::{Error, Mask, ShCoefficients, Volume4D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn coeffs() -> impl Strategy<Value = ShCoefficients> {
    prop::collection::vec(-1.0..1.0f64, 45).prop_map(|v| ShCoefficients::new(8, v).unwrap())
}

fn non_degenerate(u: &ShCoefficients) -> bool {
    u.as_slice()[1..].iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn acc_self_scale_and_symmetry(u in coeffs(), v in coeffs(), c in prop_oneof![0.01..100.0f64, -100.0..-0.01f64]) {
        prop_assume!(non_degenerate(&u) && non_degenerate(&v));
        prop_assert!((acc(&u, &u).unwrap().unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((acc(&u, &u.scaled(c)).unwrap().unwrap() - c.signum()).abs() < 1e-12);
        let uv = acc(&u, &v).unwrap().unwrap();
        prop_assert!((-1.0..=1.0).contains(&uv));
        prop_assert!((uv - acc(&v, &u).unwrap().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn acc_ignores_dc(u in coeffs(), v in coeffs(), shift in -10.0..10.0f64) {
        prop_assume!(non_degenerate(&u) && non_degenerate(&v));
        let mut w = u.clone();
        w.as_mut_slice()[0] += shift;
        prop_assert!((acc(&w, &v).unwrap().unwrap() - acc(&u, &v).unwrap().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_orders_are_uncorrelated(u in coeffs(), v in coeffs()) {
        // l = 2 occupies indices 1..6, l = 4 occupies 6..15
        let mut a = ShCoefficients::zeros(8).unwrap();
        let mut b = ShCoefficients::zeros(8).unwrap();
        a.as_mut_slice()[1..6].copy_from_slice(&u.as_slice()[1..6]);
        b.as_mut_slice()[6..15].copy_from_slice(&v.as_slice()[6..15]);
        prop_assume!(non_degenerate(&a) && non_degenerate(&b));
        prop_assert_eq!(acc(&a, &b).unwrap(), Some(0.0));
    }
}

/// Tail probabilities by listing every sign assignment of the ranks.
fn enumerate_tails(d: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    let mut rank = vec![0.0; n];
    for i in 0..n {
        let less = d.iter().filter(|x| x.abs() < d[i].abs()).count() as f64;
        let equal = d.iter().filter(|x| x.abs() == d[i].abs()).count() as f64;
        rank[i] = less + (equal + 1.0) / 2.0;
    }
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| rank[i]).sum();
        if w >= observed - 1e-9 {
            ge += 1;
        }
        if w <= observed + 1e-9 {
            le += 1;
        }
    }
    let all = (1u64 << n) as f64;
    (observed, ge as f64 / all, le as f64 / all)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn exact_test_matches_enumeration(d in prop::collection::vec(-4i32..=4, 1..=10)) {
        let d: Vec<f64> = d.into_iter().map(|x| x as f64 * 0.5).collect();
        prop_assume!(d.iter().any(|x| *x != 0.0));
        let r = signed_rank_test(&d, &vec![0.0; d.len()]).unwrap();
        let (w, ge, le) = enumerate_tails(&d);
        prop_assert_eq!(r.method, RankTestMethod::Exact);
        prop_assert_eq!(r.w_plus, w);
        prop_assert!((r.p_greater - ge).abs() < 1e-15);
        prop_assert!((r.p_less - le).abs() < 1e-15);
        prop_assert!((r.p_two_sided - (2.0 * ge.min(le)).min(1.0)).abs() < 1e-15);
    }

    #[test]
    fn swapping_pairs_keeps_two_sided_p(a in prop::collection::vec(-3.0..3.0f64, 1..40), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let ab = signed_rank_test(&a, &b).unwrap();
        let ba = signed_rank_test(&b, &a).unwrap();
        prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-12);
        prop_assert_eq!(ab.w_plus, ba.w_minus);
    }
}

#[test]
fn differences_one_two_three() {
    let r = signed_rank_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
    assert_eq!((r.statistic(), r.p_greater), (6.0, 0.125));
}

#[test]
fn all_tied_pairs_fail() {
    assert_eq!(signed_rank_test(&[0.5; 7], &[0.5; 7]), Err(Error::AllTied));
}

#[test]
fn normal_approximation_with_ties_matches_reference() {
    // reference from an independent implementation (continuity and tie corrected)
    let d = [
        -2.25, 1.0, -1.0, 2.75, 0.5, -1.5, 2.25, -2.0, 1.75, -0.5, -2.5, 1.25, -1.0, 2.5, 0.75, -1.5, 2.0, 0.25, -2.0,
        1.5, -0.25, -2.5, 1.0, -0.75, 2.5, 0.5, -1.25, 2.0, -1.75, 1.5, -0.5, -2.25, 1.0, -1.0, 2.75, 0.5, -1.5, 2.25,
    ];
    let r = signed_rank_test(&d, &[0.0; 38]).unwrap();
    assert_eq!(r.method, RankTestMethod::Normal);
    assert_eq!((r.w_plus, r.w_minus), (400.5, 340.5));
    assert!((r.p_two_sided - 0.6683329422784846).abs() < 1e-12);
    assert!((r.p_greater - 0.3341664711392423).abs() < 1e-12);
}

fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Volume4D {
    let n = dims.iter().product();
    Volume4D::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fraction_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume4D {
    let n: usize = dims.iter().product();
    let data = (0..3 * n).map(|_| rng.random::<f64>() / 3.0).collect();
    Volume4D::new([dims[0], dims[1], dims[2], 3], [1.0; 3], data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Mask {
    let mut m = Mask::full(dims);
    for v in 0..dims.iter().product() {
        m.set(v, rng.random_bool(0.7));
    }
    m.set(0, true);
    m
}

#[test]
fn rmse_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [4, 3, 5];
    for _ in 0..20 {
        let (p, t) = (random_volume(&mut rng, [4, 3, 5, 45]), random_volume(&mut rng, [4, 3, 5, 45]));
        let mask = random_mask(&mut rng, dims);
        let mut sum = 0.0;
        let mut count = 0;
        for v in 0..60 {
            if !mask.get(v) {
                continue;
            }
            for (a, b) in p.series(v).iter().zip(t.series(v)) {
                sum += (a - b) * (a - b);
                count += 1;
            }
        }
        assert!((rmse_sh(&p, &t, &mask).unwrap() - (sum / count as f64).sqrt()).abs() < 1e-12);

        let (pf, tf) = (random_volume(&mut rng, [4, 3, 5, 3]), random_volume(&mut rng, [4, 3, 5, 3]));
        let clamped = rmse_fractions(&pf, &tf, &mask).unwrap();
        let raw = rmse_fractions_raw(&pf, &tf, &mask).unwrap();
        for c in 0..3 {
            let (mut sc, mut sr) = (0.0, 0.0);
            for v in 0..60 {
                if mask.get(v) {
                    let (x, y) = (pf.series(v)[c], tf.series(v)[c]);
                    sc += (x.clamp(0.0, 1.0) - y).powi(2);
                    sr += (x - y).powi(2);
                }
            }
            let n = mask.count() as f64;
            assert!((clamped[c] - (sc / n).sqrt()).abs() < 1e-12);
            assert!((raw[c] - (sr / n).sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn rmse_simple_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_volume(&mut rng, [3, 3, 3, 45]);
    let mask = Mask::full([3, 3, 3]);
    assert_eq!(rmse_sh(&t, &t, &mask).unwrap(), 0.0);
    let mut off = t.clone();
    off.data_mut().iter_mut().for_each(|x| *x += 0.1);
    assert!((rmse_sh(&off, &t, &mask).unwrap() - 0.1).abs() < 1e-12);

    let mut f = Volume4D::zeros([3, 3, 3, 3], [1.0; 3]).unwrap();
    for v in 0..27 {
        f.set_series(v, &[0.2, 0.3, 0.5]);
    }
    let mut g = f.clone();
    for v in 0..27 {
        g.set_series(v, &[0.2, 0.4, 0.5]);
    }
    let r = rmse_fractions(&g, &f, &mask).unwrap();
    assert!(r[0] == 0.0 && (r[1] - 0.1).abs() < 1e-12 && r[2] == 0.0);

    let mut empty = Mask::full([3, 3, 3]);
    (0..27).for_each(|v| empty.set(v, false));
    assert_eq!(rmse_sh(&t, &t, &empty), Err(Error::EmptyMask));
    assert_eq!(rmse_fractions(&f, &f, &empty), Err(Error::EmptyMask));
}

#[test]
fn maps_flag_degenerate_voxels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut truth = random_volume(&mut rng, [2, 2, 2, 45]);
    // voxel 1 carries only a DC term, like a CSF voxel
    let mut dc = vec![0.0; 45];
    dc[0] = 0.3;
    truth.set_series(1, &dc);
    let mut mask = Mask::full([2, 2, 2]);
    mask.set(7, false);
    let fr = fraction_volume(&mut rng, [2, 2, 2]);
    let maps = spatial_maps(&truth, &truth, Some((&fr, &fr)), &mask).unwrap();
    assert_eq!(maps.undefined, 1);
    assert_eq!(maps.acc.data()[1], ACC_SENTINEL);
    assert_eq!(maps.acc.data()[7], ACC_SENTINEL);
    for v in [0, 2, 3, 4, 5, 6] {
        assert!((maps.acc.data()[v] - 1.0).abs() < 1e-12);
    }
    assert!(maps.summed_squared_error.unwrap().data().iter().all(|x| *x == 0.0));

    let values = acc_values(&truth, &truth, &mask).unwrap();
    let summary = summarize(&values);
    assert_eq!((summary.n, summary.undefined), (6, 1));
    assert_eq!(acc_histogram(&values).total(), 6);
}

#[test]
fn evaluation_compares_every_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = random_volume(&mut rng, [3, 3, 3, 45]);
    let fr = fraction_volume(&mut rng, [3, 3, 3]);
    let mut near = truth.clone();
    near.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
    let far = random_volume(&mut rng, [3, 3, 3, 45]);
    let mask = Mask::full([3, 3, 3]);
    let methods = [
        MethodInput { name: "near", fodf: &near, fractions: Some(&fr) },
        MethodInput { name: "far", fodf: &far, fractions: None },
        MethodInput { name: "exact", fodf: &truth, fractions: None },
    ];
    let report = evaluate(&methods, &truth, &fr, &mask).unwrap();
    assert_eq!(report.methods.len(), 3);
    assert_eq!(report.comparisons.len(), 3);
    assert_eq!(report.methods[0].rmse_fractions, Some([0.0; 3]));
    assert!(report.methods[1].rmse_fractions.is_none());
    assert!(report.methods[0].acc_summary.median > report.methods[1].acc_summary.median);
    let near_far = report.comparisons[0].test.unwrap();
    assert!(near_far.p_greater < 1e-3, "{near_far:?}");
}
