//! History matching: screen the input space against observed system data,
//! keeping only inputs whose emulated outputs could plausibly have produced
//! the observations once emulator, discrepancy, and measurement uncertainty
//! are all allowed for. Forecasts then sample over the retained inputs.
//!
//! The screening statistic is the standard max-implausibility
//!
//! ```text
//! I(x) = |z - mean(x)| / sqrt(em_var(x) + disc_var(x) + meas_var)
//! ```
//!
//! and a point survives when its worst implausibility over all observations
//! is at most the cutoff (3 by default, the usual three-sigma rule).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::discrepancy::DiscrepancySpec;
use crate::emulator::Emulator;
use crate::error::{Error, Result};
use crate::seed;
use crate::space::InputSpace;

/// Default implausibility cutoff.
pub const DEFAULT_CUTOFF: f64 = 3.0;

/// One observed system value, measured with error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub output_name: String,
    pub value: f64,
    pub measurement_variance: f64,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if !(self.measurement_variance >= 0.0) {
            return Err(Error::Calibration(format!(
                "measurement variance must be >= 0, got {}",
                self.measurement_variance
            )));
        }
        Ok(())
    }
}

/// Outcome of a history-matching wave over a candidate set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetainedSpace {
    pub space: InputSpace,
    pub candidates: Vec<Vec<f64>>,
    /// Implausibility per candidate per observation.
    pub implausibility: Vec<Vec<f64>>,
    pub cutoff: f64,
    /// retained[i] ⇔ max over observations of implausibility[i] ≤ cutoff.
    pub retained: Vec<bool>,
}

impl RetainedSpace {
    pub fn n_retained(&self) -> usize {
        self.retained.iter().filter(|r| **r).count()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.candidates.is_empty() {
            0.0
        } else {
            self.n_retained() as f64 / self.candidates.len() as f64
        }
    }

    pub fn retained_points(&self) -> Vec<&Vec<f64>> {
        self.candidates
            .iter()
            .zip(&self.retained)
            .filter_map(|(p, r)| r.then_some(p))
            .collect()
    }

    /// True when no candidate survived: the model cannot reproduce the
    /// history at this cutoff.
    pub fn all_rejected(&self) -> bool {
        self.n_retained() == 0
    }
}

/// Numeric core of the statistic, exposed for property checks: the ratio is
/// invariant under a common rescaling of output units.
pub(crate) fn implausibility_value(
    residual: f64,
    em_var: f64,
    disc_var: f64,
    meas_var: f64,
) -> f64 {
    let denom = em_var + disc_var + meas_var;
    if denom == 0.0 {
        // No acknowledged uncertainty: any residual at all is infinitely
        // implausible, a perfect match is perfectly plausible.
        if residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        residual.abs() / denom.sqrt()
    }
}

/// Implausibility of one input against one observation.
///
/// Relative external discrepancy scales with the emulator mean magnitude at
/// the point.
pub fn implausibility(
    em: &Emulator,
    disc: &DiscrepancySpec,
    obs: &Observation,
    point: &[f64],
) -> Result<f64> {
    obs.validate()?;
    if em.output_name() != obs.output_name {
        return Err(Error::Calibration(format!(
            "emulator predicts `{}` but the observation is of `{}`",
            em.output_name(),
            obs.output_name
        )));
    }
    let idx = disc
        .output_names
        .iter()
        .position(|n| n == &obs.output_name)
        .ok_or_else(|| Error::UnknownOutput {
            name: obs.output_name.clone(),
            available: disc.output_names.clone(),
        })?;
    let pred = em.predict(point)?;
    let mut scales = vec![0.0; disc.n_outputs()];
    scales[idx] = pred.mean;
    let disc_var = disc.total_variance_at(point, &scales)?[idx];
    Ok(implausibility_value(
        obs.value - pred.mean,
        pred.variance,
        disc_var,
        obs.measurement_variance,
    ))
}

fn emulator_for<'a>(ems: &'a [Emulator], name: &str) -> Result<&'a Emulator> {
    ems.iter()
        .find(|e| e.output_name() == name)
        .ok_or_else(|| Error::UnknownOutput {
            name: name.to_string(),
            available: ems.iter().map(|e| e.output_name().to_string()).collect(),
        })
}

/// Screen every candidate against every observation.
///
/// An empty retained set is a legal outcome (the model cannot reproduce the
/// history at this cutoff); it is logged here and callers surface it.
pub fn history_match(
    ems: &[Emulator],
    disc: &DiscrepancySpec,
    observations: &[Observation],
    candidates: &DesignSet,
    cutoff: f64,
) -> Result<RetainedSpace> {
    if observations.is_empty() {
        return Err(Error::Calibration("no observations to match against".into()));
    }
    if candidates.n_runs() == 0 {
        return Err(Error::Calibration("no candidate points".into()));
    }
    if !(cutoff >= 0.0) {
        return Err(Error::Calibration(format!(
            "cutoff must be >= 0, got {cutoff}"
        )));
    }
    // Resolve emulators up front so a name mismatch fails fast.
    let matched: Vec<&Emulator> = observations
        .iter()
        .map(|o| emulator_for(ems, &o.output_name))
        .collect::<Result<Vec<_>>>()?;

    let implausibility_rows: Vec<Vec<f64>> = candidates
        .points
        .par_iter()
        .map(|point| {
            observations
                .iter()
                .zip(&matched)
                .map(|(obs, em)| implausibility(em, disc, obs, point))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let retained: Vec<bool> = implausibility_rows
        .iter()
        .map(|row| row.iter().fold(0.0f64, |a, b| a.max(*b)) <= cutoff)
        .collect();

    let result = RetainedSpace {
        space: candidates.space.clone(),
        candidates: candidates.points.clone(),
        implausibility: implausibility_rows,
        cutoff,
        retained,
    };
    if result.all_rejected() {
        log::warn!("history matching retained no candidates at cutoff {cutoff}");
    }
    Ok(result)
}

/// Sample future outcomes over the retained inputs: each sample draws a
/// retained point uniformly, one emulator outcome per output, and one
/// discrepancy vector on top.
///
/// Columns follow the order of `ems`; emulator outputs and discrepancy
/// outputs must name the same set.
pub fn forecast(
    ems: &[Emulator],
    disc: &DiscrepancySpec,
    retained: &RetainedSpace,
    n_samples: usize,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let points = retained.retained_points();
    if points.is_empty() {
        return Err(Error::Calibration(
            "cannot forecast from an empty retained set".into(),
        ));
    }
    // Each emulator output must map onto a discrepancy output.
    let disc_index: Vec<usize> = ems
        .iter()
        .map(|em| {
            disc.output_names
                .iter()
                .position(|n| n == em.output_name())
                .ok_or_else(|| Error::UnknownOutput {
                    name: em.output_name().to_string(),
                    available: disc.output_names.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::substream(master_seed, "calibration.forecast", i as u64);
            let point = points[rng.random_range(0..points.len())];
            let mut outputs = Vec::with_capacity(ems.len());
            let mut scales = vec![0.0; disc.n_outputs()];
            for (em, di) in ems.iter().zip(&disc_index) {
                let p = em.predict(point)?;
                scales[*di] = p.mean;
                let draw = if p.variance > 0.0 {
                    Normal::new(p.mean, p.variance.sqrt())
                        .map_err(|e| Error::Calibration(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    p.mean
                };
                outputs.push(draw);
            }
            let d = crate::discrepancy::sample_discrepancy(disc, point, &scales, &mut rng)?;
            for (out, di) in outputs.iter_mut().zip(&disc_index) {
                *out += d[*di];
            }
            Ok(outputs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignSet;
    use crate::emulator::{fit, HyperMode, ResidualProcessSpec, TrendBasis};
    use crate::space::{Dimension, InputSpace};
    use approx::assert_relative_eq;

    fn space1(lo: f64, hi: f64) -> InputSpace {
        InputSpace::new_parameters(vec![Dimension {
            name: "x".into(),
            lower: lo,
            upper: hi,
        }])
        .unwrap()
    }

    /// Constant-data emulator whose far-field prediction is exactly
    /// (2.0, 1.0): sigma^2 = 0.75 over 3 decorrelated points gives variance
    /// 0.75 + 0.75/3 = 1 in exact dyadic arithmetic.
    fn unit_variance_emulator() -> Emulator {
        let space = space1(0.0, 1000.0);
        let design = DesignSet::with_responses(
            space,
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![vec![2.0], vec![2.0], vec![2.0]],
            &["y"],
        )
        .unwrap();
        fit(
            &design,
            TrendBasis::Constant,
            HyperMode::Fixed(ResidualProcessSpec {
                variance: 0.75,
                correlation_lengths: vec![1e-5],
                nugget: 0.0,
            }),
        )
        .unwrap()
    }

    /// Exact linear emulator (zero residual variance).
    fn exact_linear_emulator() -> Emulator {
        let space = space1(0.0, 1.0);
        let design = DesignSet::with_responses(
            space,
            vec![vec![0.0], vec![0.5], vec![1.0]],
            vec![vec![0.0], vec![0.5], vec![1.0]],
            &["y"],
        )
        .unwrap();
        fit(
            &design,
            TrendBasis::Linear,
            HyperMode::Fixed(ResidualProcessSpec {
                variance: 0.0,
                correlation_lengths: vec![1.0],
                nugget: 0.0,
            }),
        )
        .unwrap()
    }

    #[test]
    fn perfect_match_has_zero_implausibility() {
        // Observation set to the emulator's own prediction: residual is
        // exactly zero no matter how the trend coefficients rounded.
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: em.predict(&[0.3]).unwrap().mean,
            measurement_variance: 1.0,
        };
        let i = implausibility(&em, &disc, &obs, &[0.3]).unwrap();
        assert_eq!(i, 0.0);
    }

    #[test]
    fn residual_three_unit_variances_gives_sqrt_three() {
        let em = unit_variance_emulator();
        let mut disc = DiscrepancySpec::none(&["y".into()]);
        disc.internal.variance = vec![1.0];
        let obs = Observation {
            output_name: "y".into(),
            value: 5.0, // mean far away is exactly 2.0; residual 3
            measurement_variance: 1.0,
        };
        let i = implausibility(&em, &disc, &obs, &[900.0]).unwrap();
        assert_relative_eq!(i, 1.7320508, epsilon = 1e-7);
    }

    #[test]
    fn residual_six_measurement_variance_four_is_boundary_three() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: 0.5 + 6.0,
            measurement_variance: 4.0,
        };
        let i = implausibility(&em, &disc, &obs, &[0.5]).unwrap();
        assert_relative_eq!(i, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_variances_nonzero_residual_is_infinite() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: 0.9,
            measurement_variance: 0.0,
        };
        let i = implausibility(&em, &disc, &obs, &[0.5]).unwrap();
        assert!(i.is_infinite());
    }

    #[test]
    fn output_name_mismatch_is_an_error() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "z".into(),
            value: 0.0,
            measurement_variance: 1.0,
        };
        assert!(implausibility(&em, &disc, &obs, &[0.5]).is_err());
    }

    fn grid_candidates(space: &InputSpace, n: usize) -> DesignSet {
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![i as f64 / (n - 1) as f64])
            .collect();
        DesignSet::new(space.clone(), pts).unwrap()
    }

    #[test]
    fn no_observations_rejected() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let cands = grid_candidates(em.space(), 11);
        assert!(history_match(&[em], &disc, &[], &cands, 3.0).is_err());
    }

    #[test]
    fn linear_model_retains_analytic_interval() {
        // y = x emulated exactly; observation 0.5 +- sd 0.05 at cutoff 3
        // retains exactly |x - 0.5| <= 0.15.
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: 0.5,
            measurement_variance: 0.0025,
        };
        let cands = grid_candidates(em.space(), 101);
        let r = history_match(&[em], &disc, &[obs], &cands, 3.0).unwrap();
        for (p, kept) in r.candidates.iter().zip(&r.retained) {
            let dist = (p[0] - 0.5).abs();
            if (dist - 0.15).abs() < 1e-9 {
                // Exactly on the cutoff: rounding in the fitted trend
                // legitimately decides either way.
                continue;
            }
            assert_eq!(*kept, dist < 0.15, "point {}", p[0]);
        }
        assert!(r.retained_fraction() > 0.0);
    }

    #[test]
    fn cutoff_zero_keeps_only_exact_matches() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            // The prediction at grid point 50, bit for bit: only there can
            // the residual be exactly zero.
            value: em.predict(&[0.5]).unwrap().mean,
            measurement_variance: 1.0,
        };
        let cands = grid_candidates(em.space(), 101);
        let r = history_match(&[em], &disc, &[obs], &cands, 0.0).unwrap();
        assert_eq!(r.n_retained(), 1);
        assert!(r.retained[50]);
    }

    #[test]
    fn raising_cutoff_never_shrinks_retained_set() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: 0.4,
            measurement_variance: 0.01,
        };
        let cands = grid_candidates(em.space(), 51);
        let mut previous: Option<Vec<bool>> = None;
        for cutoff in [0.5, 1.0, 2.0, 3.0, 5.0] {
            let r = history_match(
                &[em.clone()],
                &disc,
                std::slice::from_ref(&obs),
                &cands,
                cutoff,
            )
            .unwrap();
            if let Some(prev) = &previous {
                for (was, now) in prev.iter().zip(&r.retained) {
                    assert!(!was | now, "a retained point was lost at cutoff {cutoff}");
                }
            }
            previous = Some(r.retained);
        }
    }

    #[test]
    fn adding_an_observation_never_grows_retained_set() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs1 = Observation {
            output_name: "y".into(),
            value: 0.4,
            measurement_variance: 0.01,
        };
        let obs2 = Observation {
            output_name: "y".into(),
            value: 0.6,
            measurement_variance: 0.01,
        };
        let cands = grid_candidates(em.space(), 51);
        let one = history_match(&[em.clone()], &disc, &[obs1.clone()], &cands, 3.0).unwrap();
        let two = history_match(&[em], &disc, &[obs1, obs2], &cands, 3.0).unwrap();
        for (was, now) in one.retained.iter().zip(&two.retained) {
            assert!(!now | was, "a point appeared after adding an observation");
        }
        assert!(two.n_retained() <= one.n_retained());
    }

    #[test]
    fn empty_retained_set_is_legal_and_reported() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: 50.0, // far outside anything the model can produce
            measurement_variance: 0.01,
        };
        let cands = grid_candidates(em.space(), 21);
        let r = history_match(&[em], &disc, &[obs], &cands, 3.0).unwrap();
        assert!(r.all_rejected());
        assert_eq!(r.retained_fraction(), 0.0);
    }

    #[test]
    fn forecast_single_point_zero_variance_is_constant() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let retained = RetainedSpace {
            space: em.space().clone(),
            candidates: vec![vec![0.25]],
            implausibility: vec![vec![0.0]],
            cutoff: 3.0,
            retained: vec![true],
        };
        let samples = forecast(&[em], &disc, &retained, 64, 5).unwrap();
        // Zero emulator variance and zero discrepancy: every draw is the
        // same number (the fitted mean at 0.25, equal to 0.25 up to the
        // trend solve's rounding).
        for s in &samples {
            assert_eq!(s, &samples[0]);
            assert_relative_eq!(s[0], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn forecast_mean_matches_retained_average() {
        // Exact linear emulator, no noise: forecast mean over uniform
        // retained points equals the average of y over those points.
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let obs = Observation {
            output_name: "y".into(),
            value: 0.5,
            measurement_variance: 0.0025,
        };
        let cands = grid_candidates(em.space(), 101);
        let r = history_match(&[em.clone()], &disc, &[obs], &cands, 3.0).unwrap();
        let truth: f64 = r
            .retained_points()
            .iter()
            .map(|p| p[0])
            .sum::<f64>()
            / r.n_retained() as f64;
        let n = 40_000;
        let samples = forecast(&[em], &disc, &r, n, 13).unwrap();
        let mean = samples.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        // Uniform over ~31 points spanning 0.3: se ~ 0.087/sqrt(n).
        assert!((mean - truth).abs() < 4.0 * 0.09 / (n as f64).sqrt());
    }

    #[test]
    fn forecast_is_reproducible() {
        let em = exact_linear_emulator();
        let mut disc = DiscrepancySpec::none(&["y".into()]);
        disc.internal.variance = vec![0.01];
        let retained = RetainedSpace {
            space: em.space().clone(),
            candidates: vec![vec![0.2], vec![0.6], vec![0.9]],
            implausibility: vec![vec![0.0], vec![0.0], vec![0.0]],
            cutoff: 3.0,
            retained: vec![true, true, true],
        };
        let a = forecast(&[em.clone()], &disc, &retained, 100, 42).unwrap();
        let b = forecast(&[em], &disc, &retained, 100, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forecast_empty_retained_set_errors() {
        let em = exact_linear_emulator();
        let disc = DiscrepancySpec::none(&["y".into()]);
        let retained = RetainedSpace {
            space: em.space().clone(),
            candidates: vec![vec![0.2]],
            implausibility: vec![vec![9.0]],
            cutoff: 3.0,
            retained: vec![false],
        };
        assert!(forecast(&[em], &disc, &retained, 10, 1).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Rescaling output units by any positive factor leaves the
            /// implausibility unchanged: I(c r, c^2 v) = I(r, v).
            #[test]
            fn implausibility_scale_invariant(
                residual in -1e3f64..1e3,
                em_var in 1e-6f64..1e3,
                disc_var in 0.0f64..1e3,
                meas_var in 0.0f64..1e3,
                c in 1e-3f64..1e3,
            ) {
                let base = implausibility_value(residual, em_var, disc_var, meas_var);
                let scaled = implausibility_value(
                    c * residual,
                    c * c * em_var,
                    c * c * disc_var,
                    c * c * meas_var,
                );
                prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0));
            }
        }
    }
}
