//! Pareto-boundary identification over decision candidates.
//!
//! When decisions trade off several attributes (cost against benefit, say)
//! there is no single best choice; the useful object is the set of
//! non-dominated decisions. Evaluations carry Monte Carlo error, so
//! elimination uses *certain* dominance on bounds: a candidate is removed
//! only when some other candidate is at least as good in every attribute
//! and strictly better in one, even after allowing for the uncertainty in
//! both evaluations. With exact evaluations this reduces to the usual
//! point-dominance rule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DecisionSet, DEFAULT_K_BOUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Maximize,
    Minimize,
}

/// One attribute of a decision: a name, a sense, and an evaluator returning
/// `(estimate, standard error)` for a decision vector.
pub struct AttributeEvaluator<'a> {
    pub name: String,
    pub orientation: Orientation,
    pub eval: Box<dyn Fn(&[f64]) -> Result<(f64, f64)> + Sync + 'a>,
}

impl<'a> AttributeEvaluator<'a> {
    pub fn new<F>(name: &str, orientation: Orientation, eval: F) -> Self
    where
        F: Fn(&[f64]) -> Result<(f64, f64)> + Sync + 'a,
    {
        AttributeEvaluator {
            name: name.to_string(),
            orientation,
            eval: Box::new(eval),
        }
    }
}

/// Non-dominated decisions with their attribute coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoResult {
    pub attribute_names: Vec<String>,
    /// Indices into the candidate set, ascending.
    pub boundary_indices: Vec<usize>,
    /// Decision vectors of the boundary members, in index order.
    pub decisions: Vec<Vec<f64>>,
    /// Attribute estimates of the boundary members, in the evaluators'
    /// original (unoriented) units.
    pub coordinates: Vec<Vec<f64>>,
    pub dominated_count: usize,
}

/// `a` certainly dominates `b` when, in the common maximize sense, `a`'s
/// lower bound is at least `b`'s upper bound in every attribute and exceeds
/// it in at least one.
fn certainly_dominates(a: &[(f64, f64)], b: &[(f64, f64)]) -> bool {
    let mut strict = false;
    for (&(lo_a, _), &(_, up_b)) in a.iter().zip(b) {
        if lo_a < up_b {
            return false;
        }
        if lo_a > up_b {
            strict = true;
        }
    }
    strict
}

/// Identify the Pareto boundary of the active candidates under the given
/// attributes, eliminating only certainly-dominated decisions (bounds at
/// `mean ± k_bound · se` with `k_bound = `[`DEFAULT_K_BOUND`]).
pub fn pareto_front(
    candidates: &DecisionSet,
    attributes: &[AttributeEvaluator],
) -> Result<ParetoResult> {
    if attributes.is_empty() {
        return Err(Error::Decision(
            "pareto_front needs at least one attribute".into(),
        ));
    }
    let active = candidates.active_indices();
    if active.is_empty() {
        return Err(Error::Decision("no active candidates".into()));
    }

    // Evaluate every active candidate on every attribute.
    let evals: Vec<Vec<(f64, f64)>> = active
        .par_iter()
        .map(|&i| {
            attributes
                .iter()
                .map(|a| (a.eval)(&candidates.decisions[i]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // Bounds in a common maximize sense: minimized attributes are negated.
    let bounds: Vec<Vec<(f64, f64)>> = evals
        .iter()
        .map(|row| {
            row.iter()
                .zip(attributes)
                .map(|(&(mean, se), a)| {
                    let m = match a.orientation {
                        Orientation::Maximize => mean,
                        Orientation::Minimize => -mean,
                    };
                    (m - DEFAULT_K_BOUND * se, m + DEFAULT_K_BOUND * se)
                })
                .collect()
        })
        .collect();

    let mut boundary_indices = Vec::new();
    let mut decisions = Vec::new();
    let mut coordinates = Vec::new();
    let mut dominated_count = 0;
    for (pos, &i) in active.iter().enumerate() {
        let dominated = bounds
            .iter()
            .enumerate()
            .any(|(other, b)| other != pos && certainly_dominates(b, &bounds[pos]));
        if dominated {
            dominated_count += 1;
        } else {
            boundary_indices.push(i);
            decisions.push(candidates.decisions[i].clone());
            coordinates.push(evals[pos].iter().map(|&(m, _)| m).collect());
        }
    }

    Ok(ParetoResult {
        attribute_names: attributes.iter().map(|a| a.name.clone()).collect(),
        boundary_indices,
        decisions,
        coordinates,
        dominated_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Dimension, InputSpace};

    fn index_space(n: usize) -> InputSpace {
        InputSpace::new(
            vec![Dimension {
                name: "d".into(),
                lower: 0.0,
                upper: n as f64,
            }],
            &["d"],
        )
        .unwrap()
    }

    fn index_candidates(n: usize) -> DecisionSet {
        DecisionSet::new(index_space(n), (0..n).map(|i| vec![i as f64]).collect()).unwrap()
    }

    /// Exact table lookup by decision index: se = 0.
    fn table_eval<'a>(
        name: &str,
        orientation: Orientation,
        values: &'a [f64],
    ) -> AttributeEvaluator<'a> {
        AttributeEvaluator::new(name, orientation, move |d: &[f64]| {
            Ok((values[d[0] as usize], 0.0))
        })
    }

    /// Brute-force non-dominated set in maximize sense (exact values).
    fn oracle_front(points: &[Vec<f64>]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| {
                !(0..points.len()).any(|j| {
                    j != i
                        && points[j].iter().zip(&points[i]).all(|(a, b)| a >= b)
                        && points[j].iter().zip(&points[i]).any(|(a, b)| a > b)
                })
            })
            .collect()
    }

    #[test]
    fn single_candidate_is_the_boundary() {
        let candidates = index_candidates(1);
        let cost = [4.0];
        let attrs = vec![table_eval("cost", Orientation::Minimize, &cost)];
        let front = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(front.boundary_indices, vec![0]);
        assert_eq!(front.dominated_count, 0);
        assert_eq!(front.coordinates, vec![vec![4.0]]);
    }

    #[test]
    fn cost_benefit_hand_example() {
        // (cost, benefit): (1,1), (2,3), (3,3). Minimize cost, maximize
        // benefit: (3,3) is dominated by (2,3); (1,1) and (2,3) trade off.
        let candidates = index_candidates(3);
        let cost = [1.0, 2.0, 3.0];
        let benefit = [1.0, 3.0, 3.0];
        let attrs = vec![
            table_eval("cost", Orientation::Minimize, &cost),
            table_eval("benefit", Orientation::Maximize, &benefit),
        ];
        let front = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(front.boundary_indices, vec![0, 1]);
        assert_eq!(front.dominated_count, 1);
        assert_eq!(front.coordinates, vec![vec![1.0, 1.0], vec![2.0, 3.0]]);
    }

    #[test]
    fn exact_boundary_matches_brute_force_oracle() {
        use rand::Rng;
        for rep in 0..20 {
            let mut rng = crate::seed::substream(77, "pareto.oracle", rep);
            let n = 50;
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let candidates = index_candidates(n);
            let attrs = vec![
                table_eval("a", Orientation::Maximize, &a),
                table_eval("b", Orientation::Maximize, &b),
            ];
            let front = pareto_front(&candidates, &attrs).unwrap();
            let oriented: Vec<Vec<f64>> = (0..n).map(|i| vec![a[i], b[i]]).collect();
            assert_eq!(front.boundary_indices, oracle_front(&oriented), "rep {rep}");
        }
    }

    #[test]
    fn uncertain_evaluations_block_elimination() {
        // Means 0.0 vs 0.5 but standard errors of 1.0: bounds overlap, so
        // neither candidate certainly dominates. Both stay on the boundary.
        let candidates = index_candidates(2);
        let vals = [0.0, 0.5];
        let attrs = vec![AttributeEvaluator::new(
            "u",
            Orientation::Maximize,
            move |d: &[f64]| Ok((vals[d[0] as usize], 1.0)),
        )];
        let front = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(front.boundary_indices, vec![0, 1]);

        // Shrinking the error to 0.01 separates the bounds; only the better
        // candidate remains.
        let attrs = vec![AttributeEvaluator::new(
            "u",
            Orientation::Maximize,
            move |d: &[f64]| Ok((vals[d[0] as usize], 0.01)),
        )];
        let front = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(front.boundary_indices, vec![1]);
        assert_eq!(front.dominated_count, 1);
    }

    #[test]
    fn ties_in_every_attribute_keep_both() {
        let candidates = index_candidates(2);
        let vals = [3.0, 3.0];
        let attrs = vec![table_eval("u", Orientation::Maximize, &vals)];
        let front = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(front.boundary_indices, vec![0, 1]);
    }

    #[test]
    fn affine_rescaling_of_an_attribute_preserves_membership() {
        let candidates = index_candidates(5);
        let a = [1.0, 4.0, 2.0, 4.0, 0.5];
        let b = [5.0, 1.0, 4.0, 2.0, 5.5];
        let attrs = vec![
            table_eval("a", Orientation::Maximize, &a),
            table_eval("b", Orientation::Maximize, &b),
        ];
        let base = pareto_front(&candidates, &attrs).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| 100.0 * v - 7.0).collect();
        let attrs = vec![
            AttributeEvaluator::new("a", Orientation::Maximize, move |d: &[f64]| {
                Ok((scaled[d[0] as usize], 0.0))
            }),
            table_eval("b", Orientation::Maximize, &b),
        ];
        let rescaled = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(base.boundary_indices, rescaled.boundary_indices);
    }

    #[test]
    fn no_attributes_is_an_error() {
        let candidates = index_candidates(2);
        assert!(pareto_front(&candidates, &[]).is_err());
    }

    #[test]
    fn rejected_candidates_are_not_evaluated() {
        let mut candidates = index_candidates(3);
        candidates.status[2] = super::super::DecisionStatus::Rejected { stage: 1 };
        // Index 2 would dominate everything if considered.
        let vals = [1.0, 2.0, 100.0];
        let attrs = vec![table_eval("u", Orientation::Maximize, &vals)];
        let front = pareto_front(&candidates, &attrs).unwrap();
        assert_eq!(front.boundary_indices, vec![1]);
    }
}
