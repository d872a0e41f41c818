//! Tversky index and loss.
//!
//! With `p` the foreground probability and `r` the binary reference,
//! `S_tp = Σ r·p`, `S_fp = Σ (1−r)·p`, `S_fn = Σ r·(1−p)` and
//! `D = S_tp + α·S_fp + β·S_fn + smooth`. The classic index is `S_tp / D`;
//! the doubled-numerator variant is `2·S_tp / D`. Both are trained through the
//! same minimized quantity `1 − S_tp / D`.

use serde::{Deserialize, Serialize};

use crate::metrics::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TverskyVariant {
    ClassicIndex,
    /// Numerator carries a factor 2; ranges over `[0, 2]`.
    DoubledNumerator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TverskyParams {
    /// Weight of false positives.
    pub alpha: f64,
    /// Weight of false negatives.
    pub beta: f64,
    pub variant: TverskyVariant,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams { alpha: 0.5, beta: 0.5, variant: TverskyVariant::ClassicIndex, smooth: 1e-6 }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        let ok = self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0 && self.smooth > 0.0;
        if !(ok && self.alpha.is_finite() && self.beta.is_finite() && self.smooth.is_finite()) {
            return Err(MetricError::InvalidParams(format!(
                "alpha={} beta={} smooth={}",
                self.alpha, self.beta, self.smooth
            )));
        }
        Ok(())
    }
}

struct Sums {
    tp: f64,
    fp: f64,
    fn_: f64,
}

fn sums(pred: &[f64], reference: &[u8], params: &TverskyParams) -> Result<Sums, MetricError> {
    params.validate()?;
    if pred.len() != reference.len() {
        return Err(MetricError::ShapeMismatch { pred: vec![pred.len()], reference: vec![reference.len()] });
    }
    let mut s = Sums { tp: 0.0, fp: 0.0, fn_: 0.0 };
    for (&p, &r) in pred.iter().zip(reference) {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricError::InvalidProbability(p));
        }
        match r {
            1 => {
                s.tp += p;
                s.fn_ += 1.0 - p;
            }
            0 => s.fp += p,
            _ => return Err(MetricError::NonBinaryReference(r)),
        }
    }
    Ok(s)
}

impl Sums {
    fn denom(&self, p: &TverskyParams) -> f64 {
        self.tp + p.alpha * self.fp + p.beta * self.fn_ + p.smooth
    }
}

/// Tversky index of a probability map against a binary reference.
pub fn tversky(pred: &[f64], reference: &[u8], params: &TverskyParams) -> Result<f64, MetricError> {
    let s = sums(pred, reference, params)?;
    let ti = s.tp / s.denom(params);
    Ok(match params.variant {
        TverskyVariant::ClassicIndex => ti,
        TverskyVariant::DoubledNumerator => 2.0 * ti,
    })
}

/// `1 − S_tp / D`, identical for both variants.
pub fn tversky_loss(pred: &[f64], reference: &[u8], params: &TverskyParams) -> Result<f64, MetricError> {
    let s = sums(pred, reference, params)?;
    Ok(1.0 - s.tp / s.denom(params))
}

/// Loss and its gradient with respect to every prediction.
pub fn tversky_loss_grad(pred: &[f64], reference: &[u8], params: &TverskyParams) -> Result<(f64, Vec<f64>), MetricError> {
    let s = sums(pred, reference, params)?;
    let d = s.denom(params);
    let n = s.tp;
    let (a, b) = (params.alpha, params.beta);
    let grad = reference
        .iter()
        .map(|&r| {
            let (dn, dd) = if r == 1 { (1.0, 1.0 - b) } else { (0.0, a) };
            -(dn * d - n * dd) / (d * d)
        })
        .collect();
    Ok((1.0 - n / d, grad))
}
