//! Utility specifications and gambles.
//!
//! A decision is a choice among gambles over rewards; a utility function
//! turns each gamble into a single number, its expected utility, and the
//! best decision is the one whose gamble maximizes it. Multi-attribute
//! rewards combine through nonnegative per-attribute weights; a final
//! affine `scale`/`offset` pair is provided because utilities are only
//! defined up to positive affine transforms and reports sometimes want a
//! conventional anchoring (it never changes any choice).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a single-attribute utility, each strictly increasing in its
/// argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum UtilityForm {
    /// U(x) = x: risk-neutral.
    Linear,
    /// U(x) = ln(x + c): risk-averse, defined for x + c > 0; larger c
    /// flattens the curve.
    LogShifted { c: f64 },
    /// U(x) = 1 - exp(-k x): constant absolute risk aversion k > 0.
    NegativeExponential { risk_coefficient: f64 },
    /// Piecewise-linear through (x, u) knots, strictly increasing in both;
    /// extrapolates with the end-segment slopes.
    Tabulated { points: Vec<(f64, f64)> },
}

impl UtilityForm {
    pub fn validate(&self) -> Result<()> {
        match self {
            UtilityForm::Linear => Ok(()),
            UtilityForm::LogShifted { c } => {
                if c.is_finite() {
                    Ok(())
                } else {
                    Err(Error::UtilityDomain("log shift c must be finite".into()))
                }
            }
            UtilityForm::NegativeExponential { risk_coefficient } => {
                if *risk_coefficient > 0.0 {
                    Ok(())
                } else {
                    Err(Error::UtilityDomain(format!(
                        "risk coefficient must be > 0, got {risk_coefficient}"
                    )))
                }
            }
            UtilityForm::Tabulated { points } => {
                if points.len() < 2 {
                    return Err(Error::UtilityDomain(
                        "tabulated utility needs at least 2 points".into(),
                    ));
                }
                for w in points.windows(2) {
                    if !(w[1].0 > w[0].0) || !(w[1].1 > w[0].1) {
                        return Err(Error::UtilityDomain(
                            "tabulated utility points must be strictly increasing in x and u"
                                .into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        match self {
            UtilityForm::Linear => Ok(x),
            UtilityForm::LogShifted { c } => {
                let arg = x + c;
                if arg > 0.0 {
                    Ok(arg.ln())
                } else {
                    Err(Error::UtilityDomain(format!(
                        "log-shifted utility needs x + c > 0; x = {x}, c = {c}"
                    )))
                }
            }
            UtilityForm::NegativeExponential { risk_coefficient } => {
                Ok(1.0 - (-risk_coefficient * x).exp())
            }
            UtilityForm::Tabulated { points } => {
                // Find the segment (or end segment for extrapolation).
                let seg = match points.iter().position(|(px, _)| x < *px) {
                    Some(0) => &points[0..2],
                    Some(i) => &points[i - 1..i + 1],
                    None => &points[points.len() - 2..],
                };
                let (x0, u0) = seg[0];
                let (x1, u1) = seg[1];
                Ok(u0 + (x - x0) * (u1 - u0) / (x1 - x0))
            }
        }
    }
}

/// One reward attribute's utility and its weight in the additive
/// combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeUtility {
    #[serde(flatten)]
    pub form: UtilityForm,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn zero() -> f64 {
    0.0
}

/// Multi-attribute utility: U(r) = scale * Σ_i weight_i * form_i(r_i) +
/// offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub attributes: Vec<AttributeUtility>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "zero")]
    pub offset: f64,
}

impl UtilitySpec {
    /// Single-attribute utility with weight 1 and identity anchoring.
    pub fn single(form: UtilityForm) -> Self {
        UtilitySpec {
            attributes: vec![AttributeUtility { form, weight: 1.0 }],
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::UtilityDomain("utility has no attributes".into()));
        }
        for a in &self.attributes {
            a.form.validate()?;
            if !(a.weight >= 0.0) {
                return Err(Error::UtilityDomain(format!(
                    "weights must be >= 0, got {}",
                    a.weight
                )));
            }
        }
        if !self.attributes.iter().any(|a| a.weight > 0.0) {
            return Err(Error::UtilityDomain(
                "at least one attribute weight must be > 0".into(),
            ));
        }
        if !(self.scale > 0.0) {
            return Err(Error::UtilityDomain(format!(
                "scale must be > 0 (got {}): a nonpositive scale would reverse preferences",
                self.scale
            )));
        }
        Ok(())
    }

    /// Utility of one reward vector.
    pub fn evaluate(&self, reward: &[f64]) -> Result<f64> {
        if reward.len() != self.attributes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.attributes.len(),
                got: reward.len(),
                context: " (reward attributes)".into(),
            });
        }
        let mut total = 0.0;
        for (a, r) in self.attributes.iter().zip(reward) {
            total += a.weight * a.form.evaluate(*r)?;
        }
        Ok(self.scale * total + self.offset)
    }

    /// Check strict monotonicity in every positively weighted attribute on
    /// a probe grid over the given per-attribute reward ranges (also
    /// catching domain violations such as a log shift too small for the
    /// range).
    pub fn validate_monotone(&self, ranges: &[(f64, f64)]) -> Result<()> {
        self.validate()?;
        if ranges.len() != self.attributes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.attributes.len(),
                got: ranges.len(),
                context: " (probe ranges)".into(),
            });
        }
        const PROBES: usize = 33;
        for (i, ((lo, hi), a)) in ranges.iter().zip(&self.attributes).enumerate() {
            if !(lo < hi) {
                return Err(Error::UtilityDomain(format!(
                    "probe range for attribute {i} must satisfy lo < hi"
                )));
            }
            if a.weight == 0.0 {
                continue;
            }
            let mut last = None;
            for k in 0..PROBES {
                let x = lo + (hi - lo) * k as f64 / (PROBES - 1) as f64;
                let u = a.form.evaluate(x)?;
                if let Some(prev) = last {
                    if u <= prev {
                        return Err(Error::UtilityDomain(format!(
                            "attribute {i} utility is not strictly increasing near x = {x}"
                        )));
                    }
                }
                last = Some(u);
            }
        }
        Ok(())
    }
}

/// A gamble: rewards with probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gamble {
    /// (reward vector, probability) pairs.
    pub outcomes: Vec<(Vec<f64>, f64)>,
}

impl Gamble {
    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::Decision("gamble has no outcomes".into()));
        }
        let dim = self.outcomes[0].0.len();
        let mut total = 0.0;
        for (r, p) in &self.outcomes {
            if r.len() != dim {
                return Err(Error::Decision(
                    "gamble rewards must share one attribute count".into(),
                ));
            }
            if !(*p >= 0.0) {
                return Err(Error::Decision(format!(
                    "probabilities must be >= 0, got {p}"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Decision(format!(
                "probabilities must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Probability-weighted mean reward vector.
    pub fn expected_reward(&self) -> Vec<f64> {
        let dim = self.outcomes.first().map_or(0, |(r, _)| r.len());
        let mut mean = vec![0.0; dim];
        for (r, p) in &self.outcomes {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += p * v;
            }
        }
        mean
    }
}

/// Expected utility of a gamble: Σ p_i U(r_i).
pub fn utility_of_gamble(u: &UtilitySpec, g: &Gamble) -> Result<f64> {
    u.validate()?;
    g.validate()?;
    let mut total = 0.0;
    for (reward, p) in &g.outcomes {
        total += p * u.evaluate(reward)?;
    }
    Ok(total)
}
