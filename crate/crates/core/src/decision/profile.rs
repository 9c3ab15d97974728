//! Risk profiles: the outcome distribution a decision exposes you to.
//!
//! Good decisions are compared not just by expected utility but by the
//! spread of outcomes they can produce — a slightly lower mean may be worth
//! a much smaller chance of disaster. A profile holds raw outcome samples
//! per attribute plus summaries (mean, variance, quantile fan, and the
//! probability of falling below a user-chosen threshold).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::OutcomeModel;

/// Quantile levels reported in every profile, as fractions.
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub name: String,
    pub mean: f64,
    /// Sample variance (n−1 denominator); 0 for a single sample.
    pub variance: f64,
    /// `(level, value)` pairs at [`QUANTILE_LEVELS`], nondecreasing in value.
    pub quantiles: [(f64, f64); 5],
    /// User threshold for "bad outcome", if one was given for this attribute.
    pub threshold: Option<f64>,
    /// P(attribute < threshold), estimated from the samples.
    pub prob_below: Option<f64>,
}

/// Outcome samples and summaries for one decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskProfile {
    pub decision: Vec<f64>,
    /// Row per sample, column per attribute (outcome-name order).
    pub samples: Vec<Vec<f64>>,
    pub summaries: Vec<AttributeSummary>,
}

/// Linear-interpolation quantile of `sorted` (ascending) at level `q`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Sample the outcome distribution of `decision` and summarize it per
/// attribute. `thresholds` maps attribute names to "bad outcome" cutoffs;
/// attributes without an entry get no exceedance probability.
pub fn risk_profile(
    model: &dyn OutcomeModel,
    decision: &[f64],
    n_samples: usize,
    seed: u64,
    thresholds: &BTreeMap<String, f64>,
) -> Result<RiskProfile> {
    if n_samples == 0 {
        return Err(Error::Decision("risk_profile needs n_samples >= 1".into()));
    }
    let names = model.output_names();
    for t in thresholds.keys() {
        if !names.iter().any(|n| n == t) {
            return Err(Error::UnknownOutput {
                name: t.clone(),
                available: names.clone(),
            });
        }
    }
    let samples = model.sample(decision, n_samples, seed)?;

    let mut summaries = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let col: Vec<f64> = samples.iter().map(|row| row[k]).collect();
        let mean = col.iter().sum::<f64>() / n_samples as f64;
        let variance = if n_samples > 1 {
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_samples - 1) as f64
        } else {
            0.0
        };
        let mut sorted = col.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantiles =
            QUANTILE_LEVELS.map(|q| (q, quantile_sorted(&sorted, q)));
        let threshold = thresholds.get(name).copied();
        let prob_below = threshold
            .map(|t| col.iter().filter(|&&v| v < t).count() as f64 / n_samples as f64);
        summaries.push(AttributeSummary {
            name: name.clone(),
            mean,
            variance,
            quantiles,
            threshold,
            prob_below,
        });
    }

    Ok(RiskProfile {
        decision: decision.to_vec(),
        samples,
        summaries,
    })
}
