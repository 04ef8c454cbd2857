//! Evaluation: angular correlation, RMSE, spatial error maps, histograms and
//! the Wilcoxon signed-rank test.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{erfc, fabs, round, sqrt};

use crate::error::{Error, Result};
use crate::sh::ShCoefficients;
use crate::volume::{Mask, Volume4D};

/// Below this non-DC norm the angular correlation is undefined.
pub const ACC_UNDEFINED_NORM: f64 = 1e-12;

/// Value written into ACC maps where the ACC is undefined or the voxel is
/// outside the mask. Lies outside the valid range [-1, 1].
pub const ACC_SENTINEL: f64 = -2.0;

pub const HISTOGRAM_BINS: usize = 64;

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

/// Angular correlation over coefficient slices, skipping the DC term.
pub fn acc_slices(u: &[f64], v: &[f64]) -> Option<f64> {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v).skip(1) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (sqrt(uu), sqrt(vv));
    if !(nu >= ACC_UNDEFINED_NORM && nv >= ACC_UNDEFINED_NORM) {
        return None;
    }
    Some((uv / (nu * nv)).clamp(-1.0, 1.0))
}

/// Angular correlation coefficient excluding the l = 0 term. `None` when
/// either argument has (numerically) no energy above l = 0.
pub fn acc(u: &ShCoefficients, v: &ShCoefficients) -> Result<Option<f64>> {
    if u.order() != v.order() {
        return Err(Error::OrderMismatch {
            expected: u.order(),
            found: v.order(),
        });
    }
    Ok(acc_slices(u.as_slice(), v.as_slice()))
}

fn check_pair(pred: &Volume4D, truth: &Volume4D, mask: &Mask, context: &'static str) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch {
            context,
            left: pred.dims().to_vec(),
            right: truth.dims().to_vec(),
        });
    }
    if pred.spatial_dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            context: "volume vs mask",
            left: pred.spatial_dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Root mean squared difference over every (masked voxel, coefficient) pair.
pub fn rmse_sh(pred: &Volume4D, truth: &Volume4D, mask: &Mask) -> Result<f64> {
    check_pair(pred, truth, mask, "predicted vs true SH")?;
    let (nvox, nc) = (pred.n_voxels(), pred.n_volumes());
    let (p, t) = (pred.data(), truth.data());
    let mut sum = 0.0;
    for v in mask.indices() {
        for c in 0..nc {
            let d = p[v + nvox * c] - t[v + nvox * c];
            sum += d * d;
        }
    }
    Ok(sqrt(sum / (mask.count() * nc) as f64))
}

fn rmse_fractions_impl(pred: &Volume4D, truth: &Volume4D, mask: &Mask, clamp: bool) -> Result<[f64; 3]> {
    check_pair(pred, truth, mask, "predicted vs true fractions")?;
    if pred.n_volumes() != 3 {
        return Err(Error::LengthMismatch {
            context: "fraction volumes",
            expected: 3,
            found: pred.n_volumes(),
        });
    }
    let nvox = pred.n_voxels();
    let (p, t) = (pred.data(), truth.data());
    let mut sums = [0.0; 3];
    for v in mask.indices() {
        for (c, s) in sums.iter_mut().enumerate() {
            let mut x = p[v + nvox * c];
            if clamp {
                x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
            }
            let d = x - t[v + nvox * c];
            *s += d * d;
        }
    }
    let n = mask.count() as f64;
    Ok(sums.map(|s| sqrt(s / n)))
}

/// Per-tissue (CSF, GM, WM) RMSE over masked voxels, predictions clamped to [0, 1].
pub fn rmse_fractions(pred: &Volume4D, truth: &Volume4D, mask: &Mask) -> Result<[f64; 3]> {
    rmse_fractions_impl(pred, truth, mask, true)
}

/// As [`rmse_fractions`] on the unclamped predictions.
pub fn rmse_fractions_raw(pred: &Volume4D, truth: &Volume4D, mask: &Mask) -> Result<[f64; 3]> {
    rmse_fractions_impl(pred, truth, mask, false)
}

/// ACC of every masked voxel, x fastest; `None` where undefined.
pub fn acc_values(pred: &Volume4D, truth: &Volume4D, mask: &Mask) -> Result<Vec<Option<f64>>> {
    check_pair(pred, truth, mask, "predicted vs true SH")?;
    Ok(mask
        .indices()
        .into_iter()
        .map(|v| acc_slices(&pred.series(v), &truth.series(v)))
        .collect())
}

/// Voxelwise error volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMaps {
    /// One volume; [`ACC_SENTINEL`] outside the mask and where undefined.
    pub acc: Volume4D,
    /// Squared fraction errors (CSF, GM, WM), clamped predictions; zero outside the mask.
    pub squared_error: Option<Volume4D>,
    /// Sum of the three squared fraction errors.
    pub summed_squared_error: Option<Volume4D>,
    /// Masked voxels with undefined ACC.
    pub undefined: usize,
}

pub fn spatial_maps(
    pred_sh: &Volume4D,
    truth_sh: &Volume4D,
    fractions: Option<(&Volume4D, &Volume4D)>,
    mask: &Mask,
) -> Result<SpatialMaps> {
    check_pair(pred_sh, truth_sh, mask, "predicted vs true SH")?;
    let [nx, ny, nz] = mask.dims();
    let vs = pred_sh.voxel_size();
    let mut acc_map = Volume4D::new([nx, ny, nz, 1], vs, vec![ACC_SENTINEL; mask.as_slice().len()])?;
    let mut undefined = 0;
    for v in mask.indices() {
        match acc_slices(&pred_sh.series(v), &truth_sh.series(v)) {
            Some(a) => acc_map.data_mut()[v] = a,
            None => undefined += 1,
        }
    }
    let (squared_error, summed_squared_error) = match fractions {
        Some((pred, truth)) => {
            check_pair(pred, truth, mask, "predicted vs true fractions")?;
            let mut sq = Volume4D::zeros([nx, ny, nz, 3], vs)?;
            let mut sum = Volume4D::zeros([nx, ny, nz, 1], vs)?;
            for v in mask.indices() {
                let (p, t) = (pred.series(v), truth.series(v));
                let mut total = 0.0;
                let e: Vec<f64> = (0..3)
                    .map(|c| {
                        let x = if p[c].is_nan() { 0.0 } else { p[c].clamp(0.0, 1.0) };
                        let d = (x - t[c]) * (x - t[c]);
                        total += d;
                        d
                    })
                    .collect();
                sq.set_series(v, &e);
                sum.data_mut()[v] = total;
            }
            (Some(sq), Some(sum))
        }
        None => (None, None),
    };
    Ok(SpatialMaps {
        acc: acc_map,
        squared_error,
        summed_squared_error,
        undefined,
    })
}

/// Equal-width histogram.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bins over `[lo, hi]`; the top edge is inclusive. Values outside the range
/// or non-finite are ignored.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &x in values {
        if !(x >= lo && x <= hi) {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

/// 64 bins over [-1, 1] of the defined ACC values.
pub fn acc_histogram(values: &[Option<f64>]) -> Histogram {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    histogram(&defined, HISTOGRAM_BINS, -1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    /// Defined values.
    pub n: usize,
    /// Values flagged undefined and left out.
    pub undefined: usize,
    pub mean: f64,
    pub median: f64,
}

/// Mean and median of the defined values (NaN when none are defined).
pub fn summarize(values: &[Option<f64>]) -> Summary {
    let mut defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    let mean = if n == 0 { f64::NAN } else { defined.iter().sum::<f64>() / n as f64 };
    Summary {
        n,
        undefined: values.len() - n,
        mean,
        median: median(&mut defined),
    }
}

/// Median, reordering the input; NaN for an empty slice.
pub fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum RankTestMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SignedRankResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// Sum of ranks of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// P(W+ >= observed) under the null.
    pub p_greater: f64,
    /// P(W+ <= observed) under the null.
    pub p_less: f64,
    pub p_two_sided: f64,
    pub method: RankTestMethod,
}

impl SignedRankResult {
    /// The reported statistic, `W = W+`.
    pub fn statistic(&self) -> f64 {
        self.w_plus
    }
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Wilcoxon signed-rank test on the paired differences `a - b`.
///
/// Zero differences are dropped and tied magnitudes receive average ranks.
/// Up to [`EXACT_MAX_N`] non-zero differences the null distribution is
/// enumerated exactly (conditional on the tie pattern); above that a normal
/// approximation with tie and continuity corrections is used.
pub fn signed_rank_test(a: &[f64], b: &[f64]) -> Result<SignedRankResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            context: "signed-rank pairs",
            expected: a.len(),
            found: b.len(),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite paired difference".into()));
    }
    if d.is_empty() {
        return Err(Error::AllTied);
    }
    let n = d.len();
    let ranks = average_ranks(&d.iter().map(|v| fabs(*v)).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let (p_greater, p_less, method) = if n <= EXACT_MAX_N {
        let (g, l) = exact_tails(&ranks, w_plus);
        (g, l, RankTestMethod::Exact)
    } else {
        let (g, l) = normal_tails(&ranks, w_plus);
        (g, l, RankTestMethod::Normal)
    };
    Ok(SignedRankResult {
        n,
        w_plus,
        w_minus,
        p_greater,
        p_less,
        p_two_sided: (2.0 * p_greater.min(p_less)).min(1.0),
        method,
    })
}

/// Exact tails by counting sign assignments per doubled rank sum.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    // average ranks are multiples of 1/2, so doubled ranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| round(2.0 * r) as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = round(2.0 * w_plus) as usize;
    let all = (1u64 << ranks.len()) as f64;
    let greater: u64 = counts[observed..].iter().sum();
    let less: u64 = counts[..=observed].iter().sum();
    (greater as f64 / all, less as f64 / all)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / core::f64::consts::SQRT_2)
}

fn normal_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: sum over tie groups of (t^3 - t) / 48
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    let sd = sqrt(var);
    let greater = 1.0 - normal_cdf((w_plus - 0.5 - mean) / sd);
    let less = normal_cdf((w_plus + 0.5 - mean) / sd);
    (greater.min(1.0), less.min(1.0))
}

/// One method's predictions to evaluate.
#[derive(Debug, Clone, Copy)]
pub struct MethodInput<'a> {
    pub name: &'a str,
    pub fodf: &'a Volume4D,
    /// Tissue fractions, when the method predicts them.
    pub fractions: Option<&'a Volume4D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub name: String,
    pub acc_map: Volume4D,
    pub acc_summary: Summary,
    pub acc_histogram: Histogram,
    pub rmse_sh: f64,
    /// CSF, GM, WM on clamped predictions.
    pub rmse_fractions: Option<[f64; 3]>,
    pub rmse_fractions_raw: Option<[f64; 3]>,
    pub squared_error: Option<Volume4D>,
    pub summed_squared_error: Option<Volume4D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    /// Voxels where both ACCs are defined.
    pub paired_voxels: usize,
    /// `None` when every pair is tied.
    pub test: Option<SignedRankResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub methods: Vec<MethodReport>,
    /// Signed-rank tests on voxelwise ACC for every pair of methods.
    pub comparisons: Vec<Comparison>,
}

/// Evaluates each method against the truth on `mask` and compares every
/// pair of methods by voxelwise ACC.
pub fn evaluate(
    methods: &[MethodInput<'_>],
    truth_fodf: &Volume4D,
    truth_fractions: &Volume4D,
    mask: &Mask,
) -> Result<EvaluationReport> {
    if methods.is_empty() {
        return Err(Error::Empty("methods to evaluate"));
    }
    let mut reports = Vec::with_capacity(methods.len());
    let mut accs = Vec::with_capacity(methods.len());
    for m in methods {
        let values = acc_values(m.fodf, truth_fodf, mask)?;
        let maps = spatial_maps(m.fodf, truth_fodf, m.fractions.map(|f| (f, truth_fractions)), mask)?;
        let (rf, rfr) = match m.fractions {
            Some(f) => (
                Some(rmse_fractions(f, truth_fractions, mask)?),
                Some(rmse_fractions_raw(f, truth_fractions, mask)?),
            ),
            None => (None, None),
        };
        reports.push(MethodReport {
            name: m.name.into(),
            acc_map: maps.acc,
            acc_summary: summarize(&values),
            acc_histogram: acc_histogram(&values),
            rmse_sh: rmse_sh(m.fodf, truth_fodf, mask)?,
            rmse_fractions: rf,
            rmse_fractions_raw: rfr,
            squared_error: maps.squared_error,
            summed_squared_error: maps.summed_squared_error,
        });
        accs.push(values);
    }
    let mut comparisons = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let (a, b): (Vec<f64>, Vec<f64>) = accs[i]
                .iter()
                .zip(&accs[j])
                .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
                .unzip();
            let test = match signed_rank_test(&a, &b) {
                Ok(t) => Some(t),
                Err(Error::AllTied) => None,
                Err(e) => return Err(e),
            };
            comparisons.push(Comparison {
                first: methods[i].name.into(),
                second: methods[j].name.into(),
                paired_voxels: a.len(),
                test,
            });
        }
    }
    Ok(EvaluationReport {
        methods: reports,
        comparisons,
    })
}
