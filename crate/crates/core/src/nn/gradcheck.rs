use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParameterStore};

/// Scalar objective over a parameter store.
pub trait Objective {
    fn loss(&self, params: &ParameterStore) -> f64;
    fn loss_and_gradient(&self, params: &ParameterStore) -> (f64, Gradients);

    /// Loss with coordinate `index` of parameter `slot` set to `value`, plus
    /// a fingerprint of the piecewise-linear region (e.g. ReLU on/off pattern)
    /// the evaluation landed in. Objectives without kinks return 0.
    ///
    /// Implementations may override this to reuse activations that do not
    /// depend on the coordinate; `params` must be restored on return.
    fn probe(&self, params: &mut ParameterStore, slot: usize, index: usize, value: f64) -> Probe {
        let original = params.value(slot).data()[index];
        params.value_mut(slot).data_mut()[index] = value;
        let loss = self.loss(params);
        params.value_mut(slot).data_mut()[index] = original;
        Probe { loss, region: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub region: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Above this many coordinates a stratified random subset is checked.
    pub max_coordinates: usize,
    /// Every tensor contributes at least this many coordinates to a subset.
    pub min_per_tensor: usize,
    pub seed: u64,
    /// Floor of the relative-error denominator; gradients smaller than this
    /// are compared in absolute terms.
    pub denominator_floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            // within one activation region the loss is quadratic in any single
            // coordinate, so a larger step costs no truncation error and
            // reduces cancellation
            step: 1e-4,
            max_coordinates: 10_000,
            min_per_tensor: 8,
            seed: 0,
            denominator_floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub total: usize,
    pub max_relative_error: f64,
    /// Parameter name and flat offset of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
    /// Coordinates evaluated with a one-sided stencil because the central one
    /// straddled a kink.
    pub one_sided: usize,
    /// Coordinates where every stencil straddled a kink; not compared.
    pub unresolved: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance && self.unresolved == 0
    }

    pub fn subsampled(&self) -> bool {
        self.checked < self.total
    }
}

/// Compares analytic gradients with central differences using the relative
/// error `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<O: Objective>(objective: &O, params: &ParameterStore, cfg: &GradCheckConfig) -> GradCheckReport {
    let (_, grads) = objective.loss_and_gradient(params);
    let total = params.n_coordinates();
    let selection = select_coordinates(params, cfg);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        total,
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance: cfg.tolerance,
        one_sided: 0,
        unresolved: 0,
    };
    for (slot, offsets) in selection.into_iter().enumerate() {
        for i in offsets {
            let analytic = grads.slot(slot)[i];
            let Some((numeric, one_sided)) = numeric_derivative(objective, &mut work, slot, i, cfg.step) else {
                report.unresolved += 1;
                continue;
            };
            report.one_sided += usize::from(one_sided);
            let denom = analytic.abs().max(numeric.abs()).max(cfg.denominator_floor);
            let err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() || !err.is_finite() {
                report.max_relative_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = Some((params.name(slot).to_string(), i));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}

/// Central difference when both probes stay in the base region; otherwise a
/// second-order one-sided stencil on a side that does not cross a kink,
/// shrinking the step a few times before giving up.
fn numeric_derivative<O: Objective>(
    objective: &O,
    params: &mut ParameterStore,
    slot: usize,
    index: usize,
    step: f64,
) -> Option<(f64, bool)> {
    let x0 = params.value(slot).data()[index];
    let base = objective.probe(params, slot, index, x0);
    let mut h = step;
    for _ in 0..4 {
        let plus = objective.probe(params, slot, index, x0 + h);
        let minus = objective.probe(params, slot, index, x0 - h);
        if plus.region == base.region && minus.region == base.region {
            return Some(((plus.loss - minus.loss) / (2.0 * h), false));
        }
        for (sign, first) in [(1.0, plus), (-1.0, minus)] {
            if first.region != base.region {
                continue;
            }
            let second = objective.probe(params, slot, index, x0 + 2.0 * sign * h);
            if second.region == base.region {
                let d = (-3.0 * base.loss + 4.0 * first.loss - second.loss) / (2.0 * h);
                return Some((sign * d, true));
            }
        }
        h *= 0.1;
    }
    None
}

fn select_coordinates(params: &ParameterStore, cfg: &GradCheckConfig) -> Vec<Vec<usize>> {
    let total = params.n_coordinates();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..params.len())
        .map(|slot| {
            let n = params.value(slot).len();
            if total <= cfg.max_coordinates {
                return (0..n).collect();
            }
            let share = libm::round(cfg.max_coordinates as f64 * n as f64 / total as f64) as usize;
            let take = share.max(cfg.min_per_tensor).min(n);
            let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect()
}
