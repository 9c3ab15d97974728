//! Expected-utility decision support over emulated systems: utility
//! specification, Monte Carlo expected utility with standard errors, staged
//! bound-based rejection of decision candidates, Pareto-boundary
//! identification, risk profiles, and backward induction on decision trees.

pub mod pareto;
pub mod profile;
pub mod staged;
pub mod tree;
pub mod utility;

use std::collections::BTreeMap;

use crate::chain::{self, Exogenous, ModelGraph};
use crate::error::{Error, Result};

pub use pareto::{pareto_front, AttributeEvaluator, Orientation, ParetoResult};
pub use profile::{risk_profile, AttributeSummary, RiskProfile};
pub use staged::{
    near_optimal_set, staged_rejection, DecisionSet, DecisionStatus, StagedConfig, StagedOutcome,
    DEFAULT_K_BOUND, DEFAULT_NEAR_OPTIMAL_EPSILON,
};
pub use tree::{
    solve_tree, value_of_information, ChanceOutcome, DecisionTree, PolicyChoice, TreeOption,
    TreeSolution,
};
pub use utility::{utility_of_gamble, AttributeUtility, Gamble, UtilityForm, UtilitySpec};

/// Anything that can produce outcome samples for a decision: typically a
/// propagated model graph, but tests substitute closed-form samplers.
///
/// Implementations must be deterministic in `(decision, seed)`.
pub trait OutcomeModel: Sync {
    /// Attribute names, fixing the outcome vector order.
    fn output_names(&self) -> Vec<String>;

    /// `n` outcome vectors at `decision`.
    fn sample(&self, decision: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

/// The standard outcome model: propagate a model graph with the decision
/// vector bound by name.
pub struct GraphOutcomeModel<'a> {
    pub graph: &'a ModelGraph,
    pub exogenous: &'a BTreeMap<String, Exogenous>,
    /// Decision-vector dimension names, in vector order.
    pub decision_names: Vec<String>,
}

impl<'a> GraphOutcomeModel<'a> {
    pub fn new(graph: &'a ModelGraph, exogenous: &'a BTreeMap<String, Exogenous>) -> Self {
        let decision_names = graph.decision_names();
        GraphOutcomeModel {
            graph,
            exogenous,
            decision_names,
        }
    }
}

impl OutcomeModel for GraphOutcomeModel<'_> {
    fn output_names(&self) -> Vec<String> {
        self.graph
            .terminal_outputs()
            .iter()
            .map(|(n, o)| format!("{n}.{o}"))
            .collect()
    }

    fn sample(&self, decision: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if decision.len() != self.decision_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.decision_names.len(),
                got: decision.len(),
                context: " (decision vector)".into(),
            });
        }
        let decisions: BTreeMap<String, f64> = self
            .decision_names
            .iter()
            .cloned()
            .zip(decision.iter().copied())
            .collect();
        let result = chain::propagate(self.graph, self.exogenous, &decisions, n, seed, false)?;
        Ok(result.samples)
    }
}

/// Monte Carlo estimate of U(d) = E[U(y(x, d))], with its standard error.
pub fn expected_utility(
    model: &dyn OutcomeModel,
    u: &UtilitySpec,
    decision: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::Decision("expected utility needs n_samples >= 1".into()));
    }
    let samples = model.sample(decision, n_samples, seed)?;
    let mut utilities = Vec::with_capacity(samples.len());
    for s in &samples {
        let v = u.evaluate(s).map_err(|e| match e {
            Error::UtilityDomain(msg) => {
                Error::UtilityDomain(format!("{msg} (outcome sample {s:?})"))
            }
            other => other,
        })?;
        utilities.push(v);
    }
    let n = utilities.len() as f64;
    let mean = utilities.iter().sum::<f64>() / n;
    let se = if utilities.len() < 2 {
        0.0
    } else {
        let var = utilities.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok((mean, se))
}
