//! Sequential decisions by backward induction on decision trees.
//!
//! A tree alternates decision nodes (we choose), chance nodes (nature
//! chooses, with probabilities) and leaves (reward vectors). Solving walks
//! the tree from the leaves: a leaf is worth its utility, a chance node the
//! probability-weighted sum of its children, a decision node the maximum
//! over its options — recording the argmax yields a complete policy, one
//! choice per decision node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::UtilitySpec;

const PROBABILITY_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeOption {
    pub label: String,
    pub child: DecisionTree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChanceOutcome {
    pub probability: f64,
    pub child: DecisionTree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DecisionTree {
    Decision {
        name: String,
        options: Vec<TreeOption>,
    },
    Chance {
        name: String,
        outcomes: Vec<ChanceOutcome>,
    },
    Leaf {
        reward: Vec<f64>,
    },
}

impl DecisionTree {
    /// Structural checks: nonempty branching, probabilities forming a
    /// distribution, and a single reward dimension across all leaves.
    pub fn validate(&self) -> Result<()> {
        let mut reward_dim = None;
        self.validate_node(&mut reward_dim)
    }

    fn validate_node(&self, reward_dim: &mut Option<usize>) -> Result<()> {
        match self {
            DecisionTree::Decision { name, options } => {
                if options.is_empty() {
                    return Err(Error::InvalidTree(format!(
                        "decision node '{name}' has no options"
                    )));
                }
                for opt in options {
                    opt.child.validate_node(reward_dim)?;
                }
                Ok(())
            }
            DecisionTree::Chance { name, outcomes } => {
                if outcomes.is_empty() {
                    return Err(Error::InvalidTree(format!(
                        "chance node '{name}' has no outcomes"
                    )));
                }
                let mut total = 0.0;
                for o in outcomes {
                    if o.probability < 0.0 {
                        return Err(Error::InvalidTree(format!(
                            "chance node '{name}' has negative probability {}",
                            o.probability
                        )));
                    }
                    total += o.probability;
                    o.child.validate_node(reward_dim)?;
                }
                if (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                    return Err(Error::InvalidTree(format!(
                        "chance node '{name}' probabilities sum to {total}, not 1"
                    )));
                }
                Ok(())
            }
            DecisionTree::Leaf { reward } => {
                if reward.is_empty() {
                    return Err(Error::InvalidTree("leaf with empty reward".into()));
                }
                match reward_dim {
                    None => *reward_dim = Some(reward.len()),
                    Some(d) if *d != reward.len() => {
                        return Err(Error::InvalidTree(format!(
                            "leaf reward dimension {} differs from {}",
                            reward.len(),
                            d
                        )));
                    }
                    _ => {}
                }
                Ok(())
            }
        }
    }

    /// Number of decision nodes (preorder count).
    pub fn n_decision_nodes(&self) -> usize {
        match self {
            DecisionTree::Decision { options, .. } => {
                1 + options.iter().map(|o| o.child.n_decision_nodes()).sum::<usize>()
            }
            DecisionTree::Chance { outcomes, .. } => {
                outcomes.iter().map(|o| o.child.n_decision_nodes()).sum()
            }
            DecisionTree::Leaf { .. } => 0,
        }
    }
}

/// The choice taken at one decision node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyChoice {
    pub node: String,
    pub option_index: usize,
    pub label: String,
}

/// Root value plus one choice per decision node, in preorder (a node before
/// its children, children left to right) — including nodes on branches the
/// policy never reaches, so the strategy is defined at every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSolution {
    pub value: f64,
    pub policy: Vec<PolicyChoice>,
}

/// Solve `tree` by backward induction under utility `u`. Ties at a decision
/// node break toward the lowest option index, so the policy is
/// deterministic.
pub fn solve_tree(tree: &DecisionTree, u: &UtilitySpec) -> Result<TreeSolution> {
    u.validate()?;
    tree.validate()?;
    let mut policy = Vec::new();
    let value = solve_node(tree, u, &mut policy)?;
    Ok(TreeSolution { value, policy })
}

fn solve_node(tree: &DecisionTree, u: &UtilitySpec, policy: &mut Vec<PolicyChoice>) -> Result<f64> {
    match tree {
        DecisionTree::Leaf { reward } => u.evaluate(reward),
        DecisionTree::Chance { outcomes, .. } => {
            let mut value = 0.0;
            for o in outcomes {
                value += o.probability * solve_node(&o.child, u, policy)?;
            }
            Ok(value)
        }
        DecisionTree::Decision { name, options } => {
            let slot = policy.len();
            policy.push(PolicyChoice {
                node: name.clone(),
                option_index: 0,
                label: options[0].label.clone(),
            });
            let mut best = f64::NEG_INFINITY;
            let mut best_index = 0;
            for (i, opt) in options.iter().enumerate() {
                let v = solve_node(&opt.child, u, policy)?;
                if v > best {
                    best = v;
                    best_index = i;
                }
            }
            policy[slot].option_index = best_index;
            policy[slot].label = options[best_index].label.clone();
            Ok(best)
        }
    }
}

/// Expected value of observing before deciding: the root-value difference
/// between the tree with the observation (`post`) and without (`pre`),
/// under the same utility.
pub fn value_of_information(
    pre: &DecisionTree,
    post: &DecisionTree,
    u: &UtilitySpec,
) -> Result<f64> {
    Ok(solve_tree(post, u)?.value - solve_tree(pre, u)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::UtilityForm;
    use approx::assert_relative_eq;

    fn leaf(r: f64) -> DecisionTree {
        DecisionTree::Leaf { reward: vec![r] }
    }

    fn linear() -> UtilitySpec {
        UtilitySpec::single(UtilityForm::Linear)
    }

    /// Value of the tree under a fixed policy (choices indexed by decision
    /// node in preorder). Walks every branch to keep the cursor aligned.
    fn value_under_policy(
        tree: &DecisionTree,
        u: &UtilitySpec,
        choices: &[usize],
        cursor: &mut usize,
    ) -> f64 {
        match tree {
            DecisionTree::Leaf { reward } => u.evaluate(reward).unwrap(),
            DecisionTree::Chance { outcomes, .. } => outcomes
                .iter()
                .map(|o| o.probability * value_under_policy(&o.child, u, choices, cursor))
                .sum(),
            DecisionTree::Decision { options, .. } => {
                let mine = choices[*cursor];
                *cursor += 1;
                let mut picked = f64::NAN;
                for (i, opt) in options.iter().enumerate() {
                    let v = value_under_policy(&opt.child, u, choices, cursor);
                    if i == mine {
                        picked = v;
                    }
                }
                picked
            }
        }
    }

    fn decision_arities(tree: &DecisionTree, out: &mut Vec<usize>) {
        match tree {
            DecisionTree::Decision { options, .. } => {
                out.push(options.len());
                for o in options {
                    decision_arities(&o.child, out);
                }
            }
            DecisionTree::Chance { outcomes, .. } => {
                for o in outcomes {
                    decision_arities(&o.child, out);
                }
            }
            DecisionTree::Leaf { .. } => {}
        }
    }

    /// Exhaustive policy enumeration: best value over the full cartesian
    /// product of option choices.
    fn enumerate_policies(tree: &DecisionTree, u: &UtilitySpec) -> Vec<f64> {
        let mut arities = Vec::new();
        decision_arities(tree, &mut arities);
        let mut values = Vec::new();
        let total: usize = arities.iter().product::<usize>().max(1);
        for mut code in 0..total {
            let choices: Vec<usize> = arities
                .iter()
                .map(|&a| {
                    let c = code % a;
                    code /= a;
                    c
                })
                .collect();
            let mut cursor = 0;
            values.push(value_under_policy(tree, u, &choices, &mut cursor));
        }
        values
    }

    #[test]
    fn one_stage_argmax() {
        let tree = DecisionTree::Decision {
            name: "pick".into(),
            options: vec![
                TreeOption { label: "a".into(), child: leaf(2.0) },
                TreeOption { label: "b".into(), child: leaf(5.0) },
                TreeOption { label: "c".into(), child: leaf(3.0) },
            ],
        };
        let sol = solve_tree(&tree, &linear()).unwrap();
        assert_eq!(sol.value, 5.0);
        assert_eq!(sol.policy.len(), 1);
        assert_eq!(sol.policy[0].option_index, 1);
        assert_eq!(sol.policy[0].label, "b");
    }

    #[test]
    fn chance_node_takes_the_expectation() {
        let tree = DecisionTree::Chance {
            name: "flip".into(),
            outcomes: vec![
                ChanceOutcome { probability: 0.5, child: leaf(4.0) },
                ChanceOutcome { probability: 0.5, child: leaf(0.0) },
            ],
        };
        let sol = solve_tree(&tree, &linear()).unwrap();
        assert_eq!(sol.value, 2.0);
        assert!(sol.policy.is_empty());
    }

    #[test]
    fn ties_break_to_the_lowest_option_index() {
        let tree = DecisionTree::Decision {
            name: "pick".into(),
            options: vec![
                TreeOption { label: "first".into(), child: leaf(5.0) },
                TreeOption { label: "second".into(), child: leaf(5.0) },
            ],
        };
        let sol = solve_tree(&tree, &linear()).unwrap();
        assert_eq!(sol.policy[0].option_index, 0);
    }

    fn two_stage_tree() -> DecisionTree {
        // Invest safely (certain 1) or riskily: a 0.1 chance of 20,
        // otherwise a mitigation decision between abandoning (−1) and
        // repairing (−0.5).
        DecisionTree::Decision {
            name: "invest".into(),
            options: vec![
                TreeOption { label: "safe".into(), child: leaf(1.0) },
                TreeOption {
                    label: "risky".into(),
                    child: DecisionTree::Chance {
                        name: "venture".into(),
                        outcomes: vec![
                            ChanceOutcome { probability: 0.1, child: leaf(20.0) },
                            ChanceOutcome {
                                probability: 0.9,
                                child: DecisionTree::Decision {
                                    name: "mitigate".into(),
                                    options: vec![
                                        TreeOption { label: "abandon".into(), child: leaf(-1.0) },
                                        TreeOption { label: "repair".into(), child: leaf(-0.5) },
                                    ],
                                },
                            },
                        ],
                    },
                },
            ],
        }
    }

    #[test]
    fn two_stage_tree_matches_policy_enumeration() {
        let tree = two_stage_tree();
        let u = linear();
        let sol = solve_tree(&tree, &u).unwrap();
        // Repair (−0.5) beats abandon; risky = 0.1·20 + 0.9·(−0.5) = 1.55.
        assert_relative_eq!(sol.value, 1.55, epsilon = 1e-12);
        assert_eq!(sol.policy[0].label, "risky");
        assert_eq!(sol.policy[1].label, "repair");

        let enumerated = enumerate_policies(&tree, &u);
        let best = enumerated.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(sol.value, best, epsilon = 1e-12);
        for v in enumerated {
            assert!(sol.value >= v - 1e-12);
        }
    }

    fn random_tree(rng: &mut impl rand::Rng, depth: usize, budget: &mut usize) -> DecisionTree {
        let reward = rng.random_range(-5.0..5.0);
        if depth == 0 {
            return DecisionTree::Leaf { reward: vec![reward] };
        }
        match rng.random_range(0..3) {
            0 if *budget > 0 => {
                *budget -= 1;
                let n = rng.random_range(2..=3);
                DecisionTree::Decision {
                    name: format!("d{budget}"),
                    options: (0..n)
                        .map(|i| TreeOption {
                            label: format!("o{i}"),
                            child: random_tree(rng, depth - 1, budget),
                        })
                        .collect(),
                }
            }
            1 => {
                let p = rng.random_range(0.05..0.95);
                DecisionTree::Chance {
                    name: "c".into(),
                    outcomes: vec![
                        ChanceOutcome {
                            probability: p,
                            child: random_tree(rng, depth - 1, budget),
                        },
                        ChanceOutcome {
                            probability: 1.0 - p,
                            child: random_tree(rng, depth - 1, budget),
                        },
                    ],
                }
            }
            _ => DecisionTree::Leaf { reward: vec![reward] },
        }
    }

    #[test]
    fn backward_induction_beats_every_enumerated_policy() {
        let u = linear();
        for rep in 0..25 {
            let mut rng = crate::seed::substream(99, "tree.random", rep);
            let mut budget = 6;
            let tree = random_tree(&mut rng, 4, &mut budget);
            if tree.validate().is_err() {
                continue;
            }
            let sol = solve_tree(&tree, &u).unwrap();
            let enumerated = enumerate_policies(&tree, &u);
            let best = enumerated.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if enumerated.is_empty() {
                continue;
            }
            assert_relative_eq!(sol.value, best, epsilon = 1e-9);
            for v in &enumerated {
                assert!(sol.value >= v - 1e-9, "rep {rep}");
            }
        }
    }

    #[test]
    fn affine_utility_transform_preserves_the_policy() {
        let tree = two_stage_tree();
        let base = solve_tree(&tree, &linear()).unwrap();
        let scaled_u = UtilitySpec {
            scale: 3.0,
            offset: -2.0,
            ..linear()
        };
        let scaled = solve_tree(&tree, &scaled_u).unwrap();
        assert_eq!(base.policy, scaled.policy);
        assert_relative_eq!(scaled.value, 3.0 * base.value - 2.0, epsilon = 1e-12);
    }

    #[test]
    fn information_is_worth_the_root_value_gap() {
        // Without observation: choose before the coin flip.
        let pre = DecisionTree::Decision {
            name: "act".into(),
            options: vec![
                TreeOption {
                    label: "bet".into(),
                    child: DecisionTree::Chance {
                        name: "coin".into(),
                        outcomes: vec![
                            ChanceOutcome { probability: 0.5, child: leaf(10.0) },
                            ChanceOutcome { probability: 0.5, child: leaf(-10.0) },
                        ],
                    },
                },
                TreeOption { label: "pass".into(), child: leaf(0.0) },
            ],
        };
        // With observation: see the flip, then choose.
        let informed_branch = |win: f64| DecisionTree::Decision {
            name: "act".into(),
            options: vec![
                TreeOption { label: "bet".into(), child: leaf(win) },
                TreeOption { label: "pass".into(), child: leaf(0.0) },
            ],
        };
        let post = DecisionTree::Chance {
            name: "coin".into(),
            outcomes: vec![
                ChanceOutcome { probability: 0.5, child: informed_branch(10.0) },
                ChanceOutcome { probability: 0.5, child: informed_branch(-10.0) },
            ],
        };
        let voi = value_of_information(&pre, &post, &linear()).unwrap();
        // Pre: max(0, 0) = 0. Post: 0.5·10 + 0.5·0 = 5.
        assert_relative_eq!(voi, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn malformed_trees_are_rejected() {
        let bad_probs = DecisionTree::Chance {
            name: "c".into(),
            outcomes: vec![
                ChanceOutcome { probability: 0.5, child: leaf(1.0) },
                ChanceOutcome { probability: 0.4, child: leaf(0.0) },
            ],
        };
        assert!(bad_probs.validate().is_err());

        let empty = DecisionTree::Decision { name: "d".into(), options: vec![] };
        assert!(empty.validate().is_err());

        let inconsistent = DecisionTree::Decision {
            name: "d".into(),
            options: vec![
                TreeOption { label: "a".into(), child: leaf(1.0) },
                TreeOption {
                    label: "b".into(),
                    child: DecisionTree::Leaf { reward: vec![1.0, 2.0] },
                },
            ],
        };
        assert!(inconsistent.validate().is_err());
    }

    #[test]
    fn tree_json_wire_format() {
        let json = r#"{
            "type": "decision",
            "name": "pick",
            "options": [
                {"label": "a", "child": {"type": "leaf", "reward": [2.0]}},
                {"label": "b", "child": {"type": "chance", "name": "c", "outcomes": [
                    {"probability": 0.5, "child": {"type": "leaf", "reward": [4.0]}},
                    {"probability": 0.5, "child": {"type": "leaf", "reward": [0.0]}}
                ]}}
            ]
        }"#;
        let tree: DecisionTree = serde_json::from_str(json).unwrap();
        let sol = solve_tree(&tree, &linear()).unwrap();
        assert_eq!(sol.value, 2.0);
        assert_eq!(sol.policy[0].option_index, 0); // tie 2.0 vs 2.0 → lowest

        let round: DecisionTree =
            serde_json::from_str(&serde_json::to_string(&tree).unwrap()).unwrap();
        assert_eq!(solve_tree(&round, &linear()).unwrap().value, 2.0);
    }
}
