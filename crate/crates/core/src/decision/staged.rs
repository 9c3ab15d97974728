//! Staged rejection of decision candidates.
//!
//! Evaluating U(d) by Monte Carlo for every candidate is wasteful when most
//! candidates are clearly bad. Instead, a cheap utility emulator over the
//! decision space is refreshed in stages from a budgeted number of true
//! evaluations; a candidate is rejected as soon as its utility *upper*
//! bound falls below the best candidate's *lower* bound — a comparison that
//! can only remove certainly-inferior decisions. Rejected candidates are
//! never resurrected, and at least one candidate always survives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::emulator::{self, HyperMode, TrendBasis};
use crate::error::{Error, Result};
use crate::seed;
use crate::space::InputSpace;

use super::{expected_utility, OutcomeModel, UtilitySpec};

/// Default half-width multiplier for utility bounds.
pub const DEFAULT_K_BOUND: f64 = 3.0;

/// Default nearness threshold (fraction of the surviving utility range) for
/// [`near_optimal_set`].
pub const DEFAULT_NEAR_OPTIMAL_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecisionStatus {
    Active,
    /// Rejected at this stage (1-based); never resurrected.
    Rejected { stage: usize },
}

/// Candidate decisions with their rejection status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionSet {
    pub space: InputSpace,
    pub decisions: Vec<Vec<f64>>,
    pub status: Vec<DecisionStatus>,
}

impl DecisionSet {
    pub fn new(space: InputSpace, decisions: Vec<Vec<f64>>) -> Result<Self> {
        let design = DesignSet::new(space, decisions)?; // reuse arity checks
        Ok(DecisionSet {
            status: vec![DecisionStatus::Active; design.points.len()],
            space: design.space,
            decisions: design.points,
        })
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter_map(|(i, s)| matches!(s, DecisionStatus::Active).then_some(i))
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.active_indices().len()
    }
}

/// Staged-rejection tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagedConfig {
    pub stages: usize,
    /// Fresh Monte Carlo evaluations allowed per stage.
    pub budget_per_stage: usize,
    /// Monte Carlo samples per evaluation.
    pub n_samples: usize,
    /// Bound half-width in combined standard deviations.
    pub k_bound: f64,
    pub basis: TrendBasis,
    pub seed: u64,
}

impl Default for StagedConfig {
    fn default() -> Self {
        StagedConfig {
            stages: 4,
            budget_per_stage: 10,
            n_samples: 1000,
            k_bound: DEFAULT_K_BOUND,
            basis: TrendBasis::Quadratic,
            seed: 0,
        }
    }
}

/// Everything a stage run produces: the final statuses, the true
/// evaluations spent, and the last stage's bounds for reporting.
#[derive(Debug, Clone)]
pub struct StagedOutcome {
    pub set: DecisionSet,
    /// Candidate index → (expected utility, Monte Carlo standard error).
    pub evaluations: BTreeMap<usize, (f64, f64)>,
    /// Final-stage (lower, upper) bound per candidate index.
    pub bounds: BTreeMap<usize, (f64, f64)>,
    pub stages_run: usize,
}

/// Pure bound comparison: keep candidate `i` unless some other candidate's
/// lower bound exceeds `i`'s upper bound. Guarantees at least one survivor
/// (the candidate attaining the maximal lower bound keeps itself).
pub(crate) fn survivors_by_bounds(bounds: &[(f64, f64)]) -> Vec<bool> {
    let max_lower = bounds
        .iter()
        .map(|(lo, _)| *lo)
        .fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<bool> = bounds.iter().map(|(_, up)| *up >= max_lower).collect();
    if kept.iter().any(|k| *k) {
        kept
    } else {
        // Numerically impossible in exact arithmetic; keep the best lower
        // bound so the survivor guarantee holds regardless.
        let best = bounds
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        (0..bounds.len()).map(|i| i == best).collect()
    }
}

/// Run staged rejection of `candidates` against an outcome model and
/// utility.
///
/// Per stage: spend the evaluation budget on evenly spaced not-yet-evaluated
/// active candidates, refit the utility emulator to every evaluation so far,
/// bound each active candidate by `mean ± k_bound * sqrt(emulator variance +
/// mean Monte Carlo se²)`, and reject candidates whose upper bound falls
/// below the maximal lower bound.
pub fn staged_rejection(
    candidates: &DecisionSet,
    model: &dyn OutcomeModel,
    utility: &UtilitySpec,
    cfg: &StagedConfig,
) -> Result<StagedOutcome> {
    utility.validate()?;
    if candidates.n_active() < 2 {
        return Err(Error::Decision(
            "staged rejection needs at least 2 active candidates".into(),
        ));
    }
    if !(cfg.k_bound > 0.0) {
        return Err(Error::Decision(format!(
            "k_bound must be > 0, got {}",
            cfg.k_bound
        )));
    }
    let basis_terms = cfg.basis.n_terms(candidates.space.n_dims());
    if cfg.budget_per_stage < basis_terms {
        return Err(Error::Decision(format!(
            "budget_per_stage {} cannot identify {} trend coefficients",
            cfg.budget_per_stage, basis_terms
        )));
    }
    if cfg.stages == 0 {
        return Err(Error::Decision("stages must be >= 1".into()));
    }

    let mut set = candidates.clone();
    let mut evaluations: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut bounds: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut stages_run = 0;

    for stage in 1..=cfg.stages {
        let active = set.active_indices();
        if active.len() < 2 {
            break;
        }
        stages_run = stage;

        // Spend the budget on evenly spaced unevaluated active candidates,
        // endpoints included, so coverage of the active region improves
        // every stage.
        let fresh: Vec<usize> = {
            let unevaluated: Vec<usize> = active
                .iter()
                .copied()
                .filter(|i| !evaluations.contains_key(i))
                .collect();
            let take = cfg.budget_per_stage.min(unevaluated.len());
            if take == 0 {
                Vec::new()
            } else if take >= unevaluated.len() {
                unevaluated
            } else {
                (0..take)
                    .map(|k| unevaluated[k * (unevaluated.len() - 1) / (take - 1).max(1)])
                    .collect()
            }
        };
        for &i in &fresh {
            let eval_seed = seed::derive(cfg.seed, "decision.staged.evaluate", i as u64);
            let (eu, se) =
                expected_utility(model, utility, &set.decisions[i], cfg.n_samples, eval_seed)?;
            evaluations.insert(i, (eu, se));
        }

        // Refit the utility emulator on every evaluation so far (including
        // any rejected points: their information is still valid).
        let eval_points: Vec<Vec<f64>> = evaluations
            .keys()
            .map(|i| set.decisions[*i].clone())
            .collect();
        let eval_values: Vec<Vec<f64>> =
            evaluations.values().map(|(eu, _)| vec![*eu]).collect();
        let mean_se2 = evaluations
            .values()
            .map(|(_, se)| se * se)
            .sum::<f64>()
            / evaluations.len() as f64;
        let design = DesignSet::with_responses(
            set.space.clone(),
            eval_points,
            eval_values,
            &["expected_utility"],
        )?;
        let em = emulator::fit(&design, cfg.basis, HyperMode::MaximizeLikelihood)?;

        bounds.clear();
        let mut active_bounds = Vec::with_capacity(active.len());
        for &i in &active {
            let p = em.predict(&set.decisions[i])?;
            let sd = (p.variance + mean_se2).sqrt();
            let b = (p.mean - cfg.k_bound * sd, p.mean + cfg.k_bound * sd);
            bounds.insert(i, b);
            active_bounds.push(b);
        }
        let kept = survivors_by_bounds(&active_bounds);
        for (pos, &i) in active.iter().enumerate() {
            if !kept[pos] {
                set.status[i] = DecisionStatus::Rejected { stage };
            }
        }
    }

    Ok(StagedOutcome {
        set,
        evaluations,
        bounds,
        stages_run,
    })
}

/// Indices of decisions whose utility estimate is within `epsilon` of the
/// best, measured as a fraction of the utility range over the given
/// estimates — the "inverted" near-optimal decision set.
pub fn near_optimal_set(estimates: &BTreeMap<usize, f64>, epsilon: f64) -> Vec<usize> {
    if estimates.is_empty() {
        return Vec::new();
    }
    let max = estimates.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = estimates.values().cloned().fold(f64::INFINITY, f64::min);
    let cut = max - epsilon * (max - min);
    estimates
        .iter()
        .filter_map(|(i, v)| (*v >= cut).then_some(*i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::UtilityForm;
    use crate::space::Dimension;

    fn decision_space() -> InputSpace {
        InputSpace::new(
            vec![Dimension {
                name: "d".into(),
                lower: 0.0,
                upper: 1.0,
            }],
            &["d"],
        )
        .unwrap()
    }

    fn grid_candidates(n: usize) -> DecisionSet {
        DecisionSet::new(
            decision_space(),
            (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect(),
        )
        .unwrap()
    }

    /// Deterministic outcome model with a known utility surface.
    struct Surface<F: Fn(f64) -> f64 + Sync> {
        f: F,
    }

    impl<F: Fn(f64) -> f64 + Sync> OutcomeModel for Surface<F> {
        fn output_names(&self) -> Vec<String> {
            vec!["y".into()]
        }
        fn sample(&self, d: &[f64], n: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
            Ok((0..n).map(|_| vec![(self.f)(d[0])]).collect())
        }
    }

    /// Same surface plus Gaussian noise.
    struct NoisySurface<F: Fn(f64) -> f64 + Sync> {
        f: F,
        sd: f64,
    }

    impl<F: Fn(f64) -> f64 + Sync> OutcomeModel for NoisySurface<F> {
        fn output_names(&self) -> Vec<String> {
            vec!["y".into()]
        }
        fn sample(&self, d: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, self.sd).unwrap();
            Ok((0..n)
                .map(|i| {
                    let mut rng = crate::seed::substream(seed, "test.noisy", i as u64);
                    vec![(self.f)(d[0]) + normal.sample(&mut rng)]
                })
                .collect())
        }
    }

    #[test]
    fn disjoint_bounds_reject_the_lower() {
        let kept = survivors_by_bounds(&[(0.0, 1.0), (2.0, 3.0)]);
        assert_eq!(kept, vec![false, true]);
    }

    #[test]
    fn overlapping_bounds_keep_both() {
        let kept = survivors_by_bounds(&[(0.0, 2.5), (2.0, 3.0)]);
        assert_eq!(kept, vec![true, true]);
    }

    #[test]
    fn at_least_one_survives_even_when_bounds_tie() {
        let kept = survivors_by_bounds(&[(1.0, 1.0), (1.0, 1.0)]);
        assert!(kept.iter().any(|k| *k));
    }

    #[test]
    fn quadratic_surface_keeps_the_argmax() {
        // U(d) = -(d - 0.63)^2: argmax near candidate 63 of 101.
        let model = Surface {
            f: |d: f64| -(d - 0.63) * (d - 0.63),
        };
        let u = UtilitySpec::single(UtilityForm::Linear);
        let candidates = grid_candidates(101);
        // Brute-force argmax over the grid.
        let brute: usize = (0..101)
            .max_by(|&a, &b| {
                let fa = -(a as f64 / 100.0 - 0.63).powi(2);
                let fb = -(b as f64 / 100.0 - 0.63).powi(2);
                fa.partial_cmp(&fb).unwrap()
            })
            .unwrap();
        let cfg = StagedConfig {
            stages: 4,
            budget_per_stage: 8,
            n_samples: 16,
            k_bound: 3.0,
            basis: TrendBasis::Quadratic,
            seed: 5,
        };
        let out = staged_rejection(&candidates, &model, &u, &cfg).unwrap();
        assert!(
            matches!(out.set.status[brute], DecisionStatus::Active),
            "true argmax (index {brute}) must survive"
        );
        assert!(out.set.n_active() < 101, "some rejection should happen");
    }

    #[test]
    fn argmax_survives_on_100_random_noisy_surfaces() {
        for run in 0..100 {
            use rand::Rng;
            let mut rng = crate::seed::substream(1234, "staged.surfaces", run);
            let peak = rng.random_range(0.1..0.9);
            let curvature = rng.random_range(0.5..4.0);
            let f = move |d: f64| -curvature * (d - peak) * (d - peak);
            let model = NoisySurface { f, sd: 0.02 };
            let u = UtilitySpec::single(UtilityForm::Linear);
            let candidates = grid_candidates(41);
            let brute: usize = (0..41)
                .max_by(|&a, &b| {
                    let fa = f(a as f64 / 40.0);
                    let fb = f(b as f64 / 40.0);
                    fa.partial_cmp(&fb).unwrap()
                })
                .unwrap();
            let cfg = StagedConfig {
                stages: 4,
                budget_per_stage: 8,
                n_samples: 400,
                k_bound: 3.0,
                basis: TrendBasis::Quadratic,
                seed: run,
            };
            let out = staged_rejection(&candidates, &model, &u, &cfg).unwrap();
            assert!(
                matches!(out.set.status[brute], DecisionStatus::Active),
                "run {run}: argmax index {brute} was rejected"
            );
        }
    }

    #[test]
    fn rejected_candidates_stay_rejected() {
        let model = Surface {
            f: |d: f64| -(d - 0.2) * (d - 0.2),
        };
        let u = UtilitySpec::single(UtilityForm::Linear);
        let candidates = grid_candidates(31);
        let cfg = StagedConfig {
            stages: 5,
            budget_per_stage: 6,
            n_samples: 8,
            k_bound: 2.0,
            basis: TrendBasis::Quadratic,
            seed: 2,
        };
        let out = staged_rejection(&candidates, &model, &u, &cfg).unwrap();
        // Statuses carry the stage of rejection; a rejection stage must not
        // exceed the number of stages actually run.
        for s in &out.set.status {
            if let DecisionStatus::Rejected { stage } = s {
                assert!(*stage >= 1 && *stage <= out.stages_run);
            }
        }
        assert!(out.set.n_active() >= 1);
    }

    #[test]
    fn budget_below_basis_terms_rejected() {
        let model = Surface { f: |d: f64| d };
        let u = UtilitySpec::single(UtilityForm::Linear);
        let candidates = grid_candidates(11);
        let cfg = StagedConfig {
            stages: 2,
            budget_per_stage: 2, // quadratic in 1-D needs 3
            n_samples: 8,
            k_bound: 3.0,
            basis: TrendBasis::Quadratic,
            seed: 0,
        };
        assert!(staged_rejection(&candidates, &model, &u, &cfg).is_err());
    }

    #[test]
    fn affine_utility_transform_leaves_survivors_unchanged() {
        let model = Surface {
            f: |d: f64| (3.0 * d).sin(),
        };
        let base = UtilitySpec::single(UtilityForm::Linear);
        let scaled = UtilitySpec {
            scale: 7.0,
            offset: 11.0,
            ..base.clone()
        };
        let candidates = grid_candidates(51);
        let cfg = StagedConfig {
            stages: 3,
            budget_per_stage: 7,
            n_samples: 32,
            k_bound: 3.0,
            basis: TrendBasis::Quadratic,
            seed: 9,
        };
        let a = staged_rejection(&candidates, &model, &base, &cfg).unwrap();
        let b = staged_rejection(&candidates, &model, &scaled, &cfg).unwrap();
        let active_a: Vec<usize> = a.set.active_indices();
        let active_b: Vec<usize> = b.set.active_indices();
        assert_eq!(active_a, active_b);
    }

    #[test]
    fn near_optimal_inversion_returns_the_plateau() {
        let mut est = BTreeMap::new();
        est.insert(0, 10.0);
        est.insert(1, 9.9);
        est.insert(2, 5.0);
        est.insert(3, 0.0);
        // Range 10; epsilon 0.05 → cut at 9.5.
        let set = near_optimal_set(&est, DEFAULT_NEAR_OPTIMAL_EPSILON);
        assert_eq!(set, vec![0, 1]);
    }
}
