use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::phantom::TissueFractions;
use crate::sh::ShCoefficients;

/// Weights of the SH and tissue-fraction terms of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.alpha) && ok(self.beta) && (self.alpha > 0.0 || self.beta > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(alloc::format!(
                "loss weights must be non-negative and not both zero (alpha {}, beta {})",
                self.alpha, self.beta
            )))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// Network output for one voxel. Fractions are the raw head values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fodf_sh: ShCoefficients,
    pub fractions: [f64; 3],
}

impl Prediction {
    pub fn clamped_fractions(&self) -> TissueFractions {
        TissueFractions::clamped(self.fractions)
    }

    pub fn is_finite(&self) -> bool {
        self.fodf_sh.as_slice().iter().chain(&self.fractions).all(|v| v.is_finite())
    }
}

/// Per-sample term `α Σ (sh diff)² + β Σ (fraction diff)²`. Gradients of
/// `scale` times that term are written to `d_sh` and `d_fractions`.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    pred_sh: &[f64],
    pred_fractions: &[f64; 3],
    target_sh: &[f64],
    target_fractions: &[f64; 3],
    weights: &LossWeights,
    scale: f64,
    d_sh: &mut [f64],
    d_fractions: &mut [f64; 3],
) -> f64 {
    let mut sh = 0.0;
    for ((p, t), d) in pred_sh.iter().zip(target_sh).zip(d_sh.iter_mut()) {
        let diff = p - t;
        sh += diff * diff;
        *d = 2.0 * weights.alpha * scale * diff;
    }
    let mut fr = 0.0;
    for i in 0..3 {
        let diff = pred_fractions[i] - target_fractions[i];
        fr += diff * diff;
        d_fractions[i] = 2.0 * weights.beta * scale * diff;
    }
    weights.alpha * sh + weights.beta * fr
}

/// Composite loss over a batch with its gradient for every prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub sh_gradients: Vec<Vec<f64>>,
    pub fraction_gradients: Vec<[f64; 3]>,
}

/// Mean over the batch of `α‖sh_pred − sh_true‖² + β‖P_pred − P_true‖²`.
pub fn composite_loss(
    predictions: &[Prediction],
    targets: &[(ShCoefficients, [f64; 3])],
    weights: &LossWeights,
) -> Result<LossValue> {
    if predictions.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            context: "predictions vs targets",
            expected: predictions.len(),
            found: targets.len(),
        });
    }
    let scale = 1.0 / predictions.len() as f64;
    let mut out = LossValue {
        value: 0.0,
        sh_gradients: Vec::with_capacity(predictions.len()),
        fraction_gradients: Vec::with_capacity(predictions.len()),
    };
    for (p, (t_sh, t_fr)) in predictions.iter().zip(targets) {
        if p.fodf_sh.order() != t_sh.order() {
            return Err(Error::OrderMismatch {
                expected: t_sh.order(),
                found: p.fodf_sh.order(),
            });
        }
        let mut d_sh = vec![0.0; t_sh.len()];
        let mut d_fr = [0.0; 3];
        let v = sample_loss(p.fodf_sh.as_slice(), &p.fractions, t_sh.as_slice(), t_fr, weights, scale, &mut d_sh, &mut d_fr);
        out.value += v * scale;
        out.sh_gradients.push(d_sh);
        out.fraction_gradients.push(d_fr);
    }
    Ok(out)
}
