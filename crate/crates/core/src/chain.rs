//! Propagation of uncertainty through a DAG of emulated models.
//!
//! Each node wraps one model: an emulator per output plus a discrepancy
//! specification. Node inputs are bound to upstream outputs, exogenous
//! quantities, decision variables, or constants. One propagation sample
//! walks the graph in topological order — resolve inputs, draw each
//! emulator, draw the node's discrepancy, sum — so an upstream node's
//! *uncertain* output (emulator draw plus discrepancy) is exactly what the
//! downstream node consumes.
//!
//! Discrepancy draws are independent across nodes; that assumption is
//! deliberate, unverifiable from within, and surfaced in every report via
//! [`INDEPENDENCE_CAVEAT`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::discrepancy::{self, DiscrepancySpec};
use crate::emulator::{self, Emulator, HyperMode, TrendBasis};
use crate::error::{Error, Result};
use crate::seed;

/// Printed in every report header: cross-model discrepancy draws are
/// independent by construction, which is an assumption, not a finding.
pub const INDEPENDENCE_CAVEAT: &str = "structural discrepancy is drawn independently across \
models; dependence between model errors is not represented";

/// Floor for per-decision sample variances before log-scale emulation.
pub const COMBINED_VARIANCE_FLOOR: f64 = 1e-12;

/// Where one input dimension of a node gets its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    /// Output of an upstream node (emulator draw + discrepancy).
    Upstream { node: String, output: String },
    /// Exogenous quantity named in the propagation call.
    Exogenous { name: String },
    /// Decision variable fixed per propagation call.
    Decision { name: String },
    Constant { value: f64 },
}

/// Distribution of one exogenous input, drawn fresh per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exogenous {
    Fixed { value: f64 },
    Uniform { lower: f64, upper: f64 },
    Normal { mean: f64, sd: f64 },
    /// Resampled uniformly from a stored sample (e.g. an upstream run).
    Empirical { values: Vec<f64> },
}

impl Exogenous {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Exogenous::Uniform { lower, upper } if !(lower < upper) => Err(Error::InvalidGraph(
                format!("exogenous `{name}`: uniform needs lower < upper"),
            )),
            Exogenous::Normal { sd, .. } if !(*sd >= 0.0) => Err(Error::InvalidGraph(format!(
                "exogenous `{name}`: sd must be >= 0"
            ))),
            Exogenous::Empirical { values } if values.is_empty() => Err(Error::InvalidGraph(
                format!("exogenous `{name}`: empirical sample is empty"),
            )),
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Exogenous::Fixed { value } => *value,
            Exogenous::Uniform { lower, upper } => rng.random_range(*lower..*upper),
            Exogenous::Normal { mean, sd } => {
                if *sd == 0.0 {
                    *mean
                } else {
                    Normal::new(*mean, *sd).expect("validated sd").sample(rng)
                }
            }
            Exogenous::Empirical { values } => values[rng.random_range(0..values.len())],
        }
    }
}

/// One model in the graph.
#[derive(Debug, Clone)]
pub struct ModelNode {
    pub name: String,
    /// One emulator per output, all sharing one input space.
    pub emulators: Vec<Emulator>,
    pub discrepancy: DiscrepancySpec,
    /// One binding per input dimension, in dimension order.
    pub bindings: Vec<Binding>,
}

impl ModelNode {
    pub fn new(
        name: &str,
        emulators: Vec<Emulator>,
        discrepancy: DiscrepancySpec,
        bindings: Vec<Binding>,
    ) -> Result<Self> {
        let node = ModelNode {
            name: name.to_string(),
            emulators,
            discrepancy,
            bindings,
        };
        node.validate()?;
        Ok(node)
    }

    /// Bindings given as a dim-name → binding map; every dimension must be
    /// bound exactly once.
    pub fn from_named_bindings(
        name: &str,
        emulators: Vec<Emulator>,
        discrepancy: DiscrepancySpec,
        named: &BTreeMap<String, Binding>,
    ) -> Result<Self> {
        let space = emulators
            .first()
            .ok_or_else(|| Error::InvalidGraph(format!("node `{name}` has no emulators")))?
            .space()
            .clone();
        let mut bindings = Vec::with_capacity(space.n_dims());
        for dim in space.names() {
            let b = named.get(dim).ok_or_else(|| {
                Error::InvalidGraph(format!("node `{name}`: input `{dim}` is unbound"))
            })?;
            bindings.push(b.clone());
        }
        if named.len() != space.n_dims() {
            let extra: Vec<&String> = named
                .keys()
                .filter(|k| space.index_of(k).is_none())
                .collect();
            return Err(Error::InvalidGraph(format!(
                "node `{name}`: bindings for unknown inputs {extra:?}"
            )));
        }
        ModelNode::new(name, emulators, discrepancy, bindings)
    }

    pub fn output_names(&self) -> Vec<String> {
        self.emulators
            .iter()
            .map(|e| e.output_name().to_string())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidGraph("node name must be nonempty".into()));
        }
        let first = self
            .emulators
            .first()
            .ok_or_else(|| Error::InvalidGraph(format!("node `{}` has no emulators", self.name)))?;
        for em in &self.emulators {
            if em.space() != first.space() {
                return Err(Error::InvalidGraph(format!(
                    "node `{}`: emulators disagree on the input space",
                    self.name
                )));
            }
        }
        if self.bindings.len() != first.space().n_dims() {
            return Err(Error::InvalidGraph(format!(
                "node `{}`: {} bindings for {} input dimensions",
                self.name,
                self.bindings.len(),
                first.space().n_dims()
            )));
        }
        // Discrepancy must describe exactly this node's outputs, in order.
        let outs = self.output_names();
        if self.discrepancy.output_names != outs {
            return Err(Error::InvalidGraph(format!(
                "node `{}`: discrepancy outputs {:?} do not match emulator outputs {outs:?}",
                self.name, self.discrepancy.output_names
            )));
        }
        Ok(())
    }
}

/// A DAG of model nodes; the topological order is computed on construction
/// and after every mutation.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<ModelNode>,
    order: Vec<usize>,
}

impl ModelGraph {
    pub fn new(nodes: Vec<ModelNode>) -> Result<Self> {
        let mut g = ModelGraph {
            nodes,
            order: Vec::new(),
        };
        g.revalidate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[ModelNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&ModelNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn add_node(&mut self, node: ModelNode) -> Result<()> {
        self.nodes.push(node);
        if let Err(e) = self.revalidate() {
            self.nodes.pop();
            // Restore the previous (valid) order.
            self.revalidate().expect("graph was valid before the push");
            return Err(e);
        }
        Ok(())
    }

    /// Node indices in evaluation order.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Outputs not consumed by any downstream binding, as
    /// (node name, output name), in node order.
    pub fn terminal_outputs(&self) -> Vec<(String, String)> {
        let mut consumed: Vec<(&str, &str)> = Vec::new();
        for n in &self.nodes {
            for b in &n.bindings {
                if let Binding::Upstream { node, output } = b {
                    consumed.push((node, output));
                }
            }
        }
        let mut out = Vec::new();
        for n in &self.nodes {
            for o in n.output_names() {
                if !consumed
                    .iter()
                    .any(|(cn, co)| *cn == n.name && *co == o)
                {
                    out.push((n.name.clone(), o));
                }
            }
        }
        out
    }

    /// Exogenous names referenced anywhere in the graph, sorted.
    pub fn exogenous_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .flat_map(|n| n.bindings.iter())
            .filter_map(|b| match b {
                Binding::Exogenous { name } => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Decision names referenced anywhere in the graph, sorted.
    pub fn decision_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .flat_map(|n| n.bindings.iter())
            .filter_map(|b| match b {
                Binding::Decision { name } => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    fn revalidate(&mut self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            n.validate()?;
            if !seen.insert(n.name.clone()) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate node name `{}`",
                    n.name
                )));
            }
        }
        // Check upstream references before ordering.
        for n in &self.nodes {
            for b in &n.bindings {
                if let Binding::Upstream { node, output } = b {
                    let up = self.node(node).ok_or_else(|| {
                        Error::InvalidGraph(format!(
                            "node `{}` consumes unknown node `{node}`",
                            n.name
                        ))
                    })?;
                    if !up.output_names().iter().any(|o| o == output) {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}` consumes `{node}.{output}` but `{node}` only \
                             produces {:?}",
                            n.name,
                            up.output_names()
                        )));
                    }
                }
            }
        }
        self.order = self.kahn_order()?;
        Ok(())
    }

    /// Kahn's algorithm; a leftover node means a cycle.
    fn kahn_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| (node.name.as_str(), i))
            .collect();
        let mut in_degree = vec![0usize; n];
        let mut downstream: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for b in &node.bindings {
                if let Binding::Upstream { node: up, .. } = b {
                    let u = index[up.as_str()];
                    downstream[u].push(i);
                    in_degree[i] += 1;
                }
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|i| in_degree[*i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &d in &downstream[i] {
                in_degree[d] -= 1;
                if in_degree[d] == 0 {
                    ready.push(d);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = (0..n)
                .filter(|i| in_degree[*i] > 0)
                .map(|i| self.nodes[i].name.as_str())
                .collect();
            return Err(Error::InvalidGraph(format!(
                "cycle detected among nodes {stuck:?}"
            )));
        }
        Ok(order)
    }
}

/// Samples of every terminal output, plus optional per-node audit samples.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    /// "node.output" per terminal column.
    pub output_names: Vec<String>,
    /// n_samples × terminal outputs.
    pub samples: Vec<Vec<f64>>,
    /// Per-node sample matrices (node name → n_samples × node outputs),
    /// kept only when requested.
    pub node_samples: Option<BTreeMap<String, Vec<Vec<f64>>>>,
    pub seed: u64,
    /// Emulator predictions that fell outside their design bounds.
    pub extrapolation_count: u64,
}

/// Propagate `n_samples` draws through the graph.
///
/// Samples are independent: sample `i` uses the substream
/// (`master_seed`, "chain.propagate", i), so results are reproducible and
/// order-independent under parallel evaluation.
pub fn propagate(
    graph: &ModelGraph,
    exogenous: &BTreeMap<String, Exogenous>,
    decisions: &BTreeMap<String, f64>,
    n_samples: usize,
    master_seed: u64,
    keep_node_samples: bool,
) -> Result<PropagationResult> {
    for (name, exo) in exogenous {
        exo.validate(name)?;
    }
    for name in graph.exogenous_names() {
        if !exogenous.contains_key(&name) {
            return Err(Error::InvalidGraph(format!(
                "exogenous input `{name}` has no value or distribution"
            )));
        }
    }
    for name in graph.decision_names() {
        if !decisions.contains_key(&name) {
            return Err(Error::InvalidGraph(format!(
                "decision variable `{name}` is not set"
            )));
        }
    }
    let terminals = graph.terminal_outputs();
    let output_names: Vec<String> = terminals
        .iter()
        .map(|(n, o)| format!("{n}.{o}"))
        .collect();

    struct SampleRow {
        terminal: Vec<f64>,
        per_node: Vec<Vec<f64>>, // in node order
        extrapolations: u64,
    }

    let rows: Vec<SampleRow> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::substream(master_seed, "chain.propagate", i as u64);
            // Exogenous draws first, in name order, one per sample.
            let mut exo_values: BTreeMap<&str, f64> = BTreeMap::new();
            for (name, exo) in exogenous {
                exo_values.insert(name.as_str(), exo.draw(&mut rng));
            }
            let mut produced: HashMap<(usize, usize), f64> = HashMap::new();
            let mut per_node: Vec<Vec<f64>> = vec![Vec::new(); graph.nodes.len()];
            let mut extrapolations = 0u64;
            for &ni in &graph.order {
                let node = &graph.nodes[ni];
                let mut input = Vec::with_capacity(node.bindings.len());
                for b in &node.bindings {
                    let v = match b {
                        Binding::Upstream { node: up, output } => {
                            let ui = graph
                                .nodes
                                .iter()
                                .position(|n| &n.name == up)
                                .expect("validated upstream");
                            let oi = graph.nodes[ui]
                                .output_names()
                                .iter()
                                .position(|o| o == output)
                                .expect("validated output");
                            produced[&(ui, oi)]
                        }
                        Binding::Exogenous { name } => exo_values[name.as_str()],
                        Binding::Decision { name } => decisions[name],
                        Binding::Constant { value } => *value,
                    };
                    input.push(v);
                }
                // Emulator draw per output (step ii/v), then one joint
                // discrepancy draw (step iii/vi), then the sum (step iv/vii).
                let mut means = Vec::with_capacity(node.emulators.len());
                let mut draws = Vec::with_capacity(node.emulators.len());
                for em in &node.emulators {
                    let p = em.predict(&input)?;
                    if p.extrapolated {
                        extrapolations += 1;
                    }
                    let y = if p.variance > 0.0 {
                        Normal::new(p.mean, p.variance.sqrt())
                            .map_err(|e| Error::InvalidGraph(e.to_string()))?
                            .sample(&mut rng)
                    } else {
                        p.mean
                    };
                    means.push(p.mean);
                    draws.push(y);
                }
                let disc = discrepancy::sample_discrepancy(
                    &node.discrepancy,
                    &input,
                    &means,
                    &mut rng,
                )?;
                let outputs: Vec<f64> =
                    draws.iter().zip(&disc).map(|(y, d)| y + d).collect();
                for (oi, v) in outputs.iter().enumerate() {
                    produced.insert((ni, oi), *v);
                }
                per_node[ni] = outputs;
            }
            let terminal = terminals
                .iter()
                .map(|(n, o)| {
                    let ui = graph.nodes.iter().position(|x| &x.name == n).unwrap();
                    let oi = graph.nodes[ui]
                        .output_names()
                        .iter()
                        .position(|x| x == o)
                        .unwrap();
                    produced[&(ui, oi)]
                })
                .collect();
            Ok(SampleRow {
                terminal,
                per_node,
                extrapolations,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::with_capacity(n_samples);
    let mut extrapolation_count = 0;
    let mut node_samples = keep_node_samples.then(|| {
        graph
            .nodes
            .iter()
            .map(|n| (n.name.clone(), Vec::with_capacity(n_samples)))
            .collect::<BTreeMap<String, Vec<Vec<f64>>>>()
    });
    for row in rows {
        samples.push(row.terminal);
        extrapolation_count += row.extrapolations;
        if let Some(ns) = &mut node_samples {
            for (node, outputs) in graph.nodes.iter().zip(row.per_node) {
                ns.get_mut(&node.name).unwrap().push(outputs);
            }
        }
    }
    if extrapolation_count > 0 {
        log::warn!(
            "{extrapolation_count} emulator evaluations extrapolated beyond design bounds"
        );
    }
    Ok(PropagationResult {
        output_names,
        samples,
        node_samples,
        seed: master_seed,
        extrapolation_count,
    })
}

/// The combined system emulated as a single stochastic model over the
/// decision space: one emulator for the terminal mean, one for the log of
/// the terminal variance.
#[derive(Debug, Clone)]
pub struct CombinedEmulator {
    pub mean: Emulator,
    pub log_variance: Emulator,
}

impl CombinedEmulator {
    /// Predicted mean and variance of the terminal output at a decision.
    pub fn predict(&self, decision: &[f64]) -> Result<(f64, f64)> {
        let m = self.mean.predict(decision)?.mean;
        let v = self.log_variance.predict(decision)?.mean.exp();
        Ok((m, v))
    }
}

/// Emulate the combined system over a grid of decisions: run `n_inner`
/// propagation samples per grid point and fit emulators to the per-decision
/// sample mean and log sample variance of the single terminal output.
pub fn emulate_combined(
    graph: &ModelGraph,
    exogenous: &BTreeMap<String, Exogenous>,
    decision_grid: &DesignSet,
    n_inner: usize,
    basis: TrendBasis,
    master_seed: u64,
) -> Result<CombinedEmulator> {
    if n_inner < 30 {
        return Err(Error::InvalidGraph(format!(
            "combined emulation needs n_inner >= 30, got {n_inner}"
        )));
    }
    if decision_grid.n_runs() < 2 {
        return Err(Error::InvalidGraph(
            "combined emulation needs at least 2 decision grid points".into(),
        ));
    }
    let terminals = graph.terminal_outputs();
    if terminals.len() != 1 {
        return Err(Error::InvalidGraph(format!(
            "combined emulation needs a single terminal output, found {}",
            terminals.len()
        )));
    }
    let decision_dims: Vec<String> = decision_grid
        .space
        .names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let graph_decisions = graph.decision_names();
    for d in &graph_decisions {
        if !decision_dims.iter().any(|n| n == d) {
            return Err(Error::InvalidGraph(format!(
                "decision grid is missing decision variable `{d}`"
            )));
        }
    }

    let mut means = Vec::with_capacity(decision_grid.n_runs());
    let mut log_vars = Vec::with_capacity(decision_grid.n_runs());
    for (row, point) in decision_grid.points.iter().enumerate() {
        let decisions: BTreeMap<String, f64> = decision_dims
            .iter()
            .cloned()
            .zip(point.iter().copied())
            .collect();
        let inner_seed = seed::derive(master_seed, "chain.emulate_combined", row as u64);
        let result = propagate(graph, exogenous, &decisions, n_inner, inner_seed, false)?;
        let ys: Vec<f64> = result.samples.iter().map(|s| s[0]).collect();
        let mean = ys.iter().sum::<f64>() / n_inner as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>()
            / (n_inner - 1) as f64;
        means.push(vec![mean]);
        log_vars.push(vec![var.max(COMBINED_VARIANCE_FLOOR).ln()]);
    }

    let terminal = format!("{}.{}", terminals[0].0, terminals[0].1);
    let mean_design = DesignSet::with_responses(
        decision_grid.space.clone(),
        decision_grid.points.clone(),
        means,
        &[format!("mean_{terminal}").as_str()],
    )?;
    let var_design = DesignSet::with_responses(
        decision_grid.space.clone(),
        decision_grid.points.clone(),
        log_vars,
        &[format!("log_var_{terminal}").as_str()],
    )?;
    Ok(CombinedEmulator {
        mean: emulator::fit(&mean_design, basis, HyperMode::MaximizeLikelihood)?,
        log_variance: emulator::fit(&var_design, basis, HyperMode::MaximizeLikelihood)?,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Graph document: emulators by file path (relative to the document),
/// discrepancy inline, bindings keyed by input dimension name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDoc {
    pub nodes: Vec<NodeDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub name: String,
    /// Paths to emulator documents, one per output.
    pub emulators: Vec<String>,
    pub discrepancy: DiscrepancySpec,
    pub bindings: BTreeMap<String, Binding>,
}

impl GraphDoc {
    /// Load emulators (paths resolved against `base_dir`) and assemble the
    /// validated graph.
    pub fn resolve(&self, base_dir: &std::path::Path) -> Result<ModelGraph> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for nd in &self.nodes {
            let mut emulators = Vec::with_capacity(nd.emulators.len());
            for rel in &nd.emulators {
                emulators.push(Emulator::load(&base_dir.join(rel))?);
            }
            nodes.push(ModelNode::from_named_bindings(
                &nd.name,
                emulators,
                nd.discrepancy.clone(),
                &nd.bindings,
            )?);
        }
        ModelGraph::new(nodes)
    }
}

/// Read a graph document and resolve emulator paths relative to it.
pub fn load_graph(path: &std::path::Path) -> Result<ModelGraph> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let doc: GraphDoc = serde_json::from_str(&text)
        .map_err(|e| Error::doc(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(std::path::Path::new("."));
    doc.resolve(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::{fit, ResidualProcessSpec};
    use crate::space::{Dimension, InputSpace};
    use approx::assert_relative_eq;

    fn dim(name: &str, lo: f64, hi: f64) -> Dimension {
        Dimension {
            name: name.into(),
            lower: lo,
            upper: hi,
        }
    }

    /// Exact emulator of an affine function over the given dims (zero
    /// residual variance, linear trend).
    fn exact_affine(
        output: &str,
        dims: Vec<Dimension>,
        f: impl Fn(&[f64]) -> f64,
    ) -> Emulator {
        let space = InputSpace::new_parameters(dims).unwrap();
        let d = space.n_dims();
        // Corners plus the center: enough to pin an affine function.
        let mut points = vec![vec![0.0; d]];
        for (j, dm) in space.dims().iter().enumerate() {
            points[0][j] = (dm.lower + dm.upper) / 2.0;
        }
        for mask in 0..(1usize << d) {
            let p: Vec<f64> = space
                .dims()
                .iter()
                .enumerate()
                .map(|(j, dm)| {
                    if mask >> j & 1 == 1 {
                        dm.upper
                    } else {
                        dm.lower
                    }
                })
                .collect();
            points.push(p);
        }
        let responses: Vec<Vec<f64>> = points.iter().map(|p| vec![f(p)]).collect();
        let design =
            DesignSet::with_responses(space, points, responses, &[output]).unwrap();
        fit(
            &design,
            TrendBasis::Linear,
            HyperMode::Fixed(ResidualProcessSpec {
                variance: 0.0,
                correlation_lengths: vec![1.0; d],
                nugget: 0.0,
            }),
        )
        .unwrap()
    }

    fn noisy_node(
        name: &str,
        em: Emulator,
        disc_var: f64,
        bindings: Vec<Binding>,
    ) -> ModelNode {
        let mut disc = DiscrepancySpec::none(&[em.output_name().to_string()]);
        disc.internal.variance = vec![disc_var];
        ModelNode::new(name, vec![em], disc, bindings).unwrap()
    }

    fn exo_fixed(name: &str, v: f64) -> BTreeMap<String, Exogenous> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Exogenous::Fixed { value: v });
        m
    }

    #[test]
    fn identity_chain_passes_value_through() {
        let em1 = exact_affine("y", vec![dim("x", -10.0, 10.0)], |p| p[0]);
        let em2 = exact_affine("z", vec![dim("y", -10.0, 10.0)], |p| p[0]);
        let n1 = noisy_node(
            "first",
            em1,
            0.0,
            vec![Binding::Exogenous { name: "x".into() }],
        );
        let n2 = noisy_node(
            "second",
            em2,
            0.0,
            vec![Binding::Upstream {
                node: "first".into(),
                output: "y".into(),
            }],
        );
        let graph = ModelGraph::new(vec![n1, n2]).unwrap();
        assert_eq!(graph.terminal_outputs(), vec![("second".into(), "z".into())]);
        let r = propagate(&graph, &exo_fixed("x", 4.0), &BTreeMap::new(), 50, 3, false)
            .unwrap();
        // Two exact-trend hops: the value survives up to solver rounding.
        for s in &r.samples {
            assert_eq!(s[0], r.samples[0][0]);
            assert_relative_eq!(s[0], 4.0, epsilon = 1e-12);
        }
    }

    /// y1 = 2x + d1, y2 = y1 + 3 + d2, x ~ N(0,1), d_i ~ N(0,1):
    /// terminal mean 3, variance 2^2*1 + 1 + 1 = 6.
    fn linear_gaussian_graph() -> (ModelGraph, BTreeMap<String, Exogenous>) {
        let em1 = exact_affine("y1", vec![dim("x", -8.0, 8.0)], |p| 2.0 * p[0]);
        let em2 = exact_affine("y2", vec![dim("y1", -20.0, 20.0)], |p| p[0] + 3.0);
        let n1 = noisy_node(
            "stage1",
            em1,
            1.0,
            vec![Binding::Exogenous { name: "x".into() }],
        );
        let n2 = noisy_node(
            "stage2",
            em2,
            1.0,
            vec![Binding::Upstream {
                node: "stage1".into(),
                output: "y1".into(),
            }],
        );
        let graph = ModelGraph::new(vec![n1, n2]).unwrap();
        let mut exo = BTreeMap::new();
        exo.insert(
            "x".to_string(),
            Exogenous::Normal {
                mean: 0.0,
                sd: 1.0,
            },
        );
        (graph, exo)
    }

    #[test]
    fn linear_gaussian_chain_moments() {
        let (graph, exo) = linear_gaussian_graph();
        let n = 100_000;
        let r = propagate(&graph, &exo, &BTreeMap::new(), n, 17, false).unwrap();
        let ys: Vec<f64> = r.samples.iter().map(|s| s[0]).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (6.0f64 / n as f64).sqrt();
        let se_var = 6.0 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - 3.0).abs() <= 4.0 * se_mean, "mean {mean}");
        assert!((var - 6.0).abs() <= 4.0 * se_var, "variance {var}");
    }

    #[test]
    fn same_seed_same_samples() {
        let (graph, exo) = linear_gaussian_graph();
        let a = propagate(&graph, &exo, &BTreeMap::new(), 500, 99, true).unwrap();
        let b = propagate(&graph, &exo, &BTreeMap::new(), 500, 99, true).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.node_samples, b.node_samples);
        let c = propagate(&graph, &exo, &BTreeMap::new(), 500, 100, false).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn composition_soundness_deterministic_graph() {
        // f1 = 2x + 1, f2 = 3 f1 - 2, f3 = f2 / 2 + f1 — all affine, all
        // emulated exactly, no discrepancy: propagate must equal direct
        // composition.
        let em1 = exact_affine("a", vec![dim("x", -5.0, 5.0)], |p| 2.0 * p[0] + 1.0);
        let em2 = exact_affine("b", vec![dim("a", -12.0, 12.0)], |p| 3.0 * p[0] - 2.0);
        let em3 = exact_affine(
            "c",
            vec![dim("a", -12.0, 12.0), dim("b", -40.0, 40.0)],
            |p| p[1] / 2.0 + p[0],
        );
        let n1 = noisy_node("m1", em1, 0.0, vec![Binding::Exogenous { name: "x".into() }]);
        let n2 = noisy_node(
            "m2",
            em2,
            0.0,
            vec![Binding::Upstream {
                node: "m1".into(),
                output: "a".into(),
            }],
        );
        let n3 = noisy_node(
            "m3",
            em3,
            0.0,
            vec![
                Binding::Upstream {
                    node: "m1".into(),
                    output: "a".into(),
                },
                Binding::Upstream {
                    node: "m2".into(),
                    output: "b".into(),
                },
            ],
        );
        let graph = ModelGraph::new(vec![n1, n2, n3]).unwrap();
        let mut exo = BTreeMap::new();
        exo.insert(
            "x".to_string(),
            Exogenous::Uniform {
                lower: -5.0,
                upper: 5.0,
            },
        );
        let n = 1000;
        let r = propagate(&graph, &exo, &BTreeMap::new(), n, 7, true).unwrap();
        let xs = &r.node_samples.as_ref().unwrap()["m1"];
        for (row, sample) in r.samples.iter().enumerate() {
            // Recover x from node m1's output a = 2x+1, then compose.
            let a = xs[row][0];
            let b = 3.0 * a - 2.0;
            let c = b / 2.0 + a;
            assert!(
                (sample[0] - c).abs() <= 1e-8,
                "row {row}: {} vs composed {c}",
                sample[0]
            );
        }
    }

    #[test]
    fn modularity_freezing_subgraph_preserves_distribution() {
        // Full chain vs: run stage1 alone, feed its samples to stage2 as an
        // empirical exogenous input. Kolmogorov-Smirnov on the terminal
        // samples must stay under the two-sample critical value.
        let (graph, exo) = linear_gaussian_graph();
        let n = 100_000;
        let full = propagate(&graph, &exo, &BTreeMap::new(), n, 31, false).unwrap();

        // Subgraph A: stage1 alone.
        let em1 = exact_affine("y1", vec![dim("x", -8.0, 8.0)], |p| 2.0 * p[0]);
        let a = ModelGraph::new(vec![noisy_node(
            "stage1",
            em1,
            1.0,
            vec![Binding::Exogenous { name: "x".into() }],
        )])
        .unwrap();
        let a_run = propagate(&a, &exo, &BTreeMap::new(), n, 32, false).unwrap();
        let frozen: Vec<f64> = a_run.samples.iter().map(|s| s[0]).collect();

        // Subgraph B: stage2 with the frozen samples as empirical input.
        let em2 = exact_affine("y2", vec![dim("y1", -20.0, 20.0)], |p| p[0] + 3.0);
        let b = ModelGraph::new(vec![noisy_node(
            "stage2",
            em2,
            1.0,
            vec![Binding::Exogenous { name: "y1".into() }],
        )])
        .unwrap();
        let mut exo_b = BTreeMap::new();
        exo_b.insert("y1".to_string(), Exogenous::Empirical { values: frozen });
        let b_run = propagate(&b, &exo_b, &BTreeMap::new(), n, 33, false).unwrap();

        let mut xs: Vec<f64> = full.samples.iter().map(|s| s[0]).collect();
        let mut ys: Vec<f64> = b_run.samples.iter().map(|s| s[0]).collect();
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let ks = ks_statistic(&xs, &ys);
        // Two-sample critical value at alpha = 0.01, n = m = 1e5.
        let critical = 1.628 * (2.0 / n as f64).sqrt();
        assert!(ks < critical, "KS {ks} vs critical {critical}");
    }

    fn ks_statistic(xs: &[f64], ys: &[f64]) -> f64 {
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < xs.len() && j < ys.len() {
            if xs[i] <= ys[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fx = i as f64 / xs.len() as f64;
            let fy = j as f64 / ys.len() as f64;
            d = d.max((fx - fy).abs());
        }
        d
    }

    #[test]
    fn cross_node_discrepancy_draws_are_uncorrelated() {
        // Two parallel nodes reading the same fixed input; all variation
        // comes from their discrepancy draws.
        let em_a = exact_affine("ya", vec![dim("x", -5.0, 5.0)], |p| p[0]);
        let em_b = exact_affine("yb", vec![dim("x", -5.0, 5.0)], |p| p[0]);
        let na = noisy_node("a", em_a, 1.0, vec![Binding::Exogenous { name: "x".into() }]);
        let nb = noisy_node("b", em_b, 1.0, vec![Binding::Exogenous { name: "x".into() }]);
        let graph = ModelGraph::new(vec![na, nb]).unwrap();
        let n = 100_000;
        let r = propagate(&graph, &exo_fixed("x", 1.0), &BTreeMap::new(), n, 8, false)
            .unwrap();
        let mean_a: f64 = r.samples.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        let mean_b: f64 = r.samples.iter().map(|s| s[1]).sum::<f64>() / n as f64;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for s in &r.samples {
            cov += (s[0] - mean_a) * (s[1] - mean_b);
            va += (s[0] - mean_a) * (s[0] - mean_a);
            vb += (s[1] - mean_b) * (s[1] - mean_b);
        }
        let corr = cov / (va * vb).sqrt();
        // se of a correlation near 0 is ~ 1/sqrt(n).
        assert!(
            corr.abs() <= 4.0 / (n as f64).sqrt(),
            "cross-node correlation {corr}"
        );
    }

    #[test]
    fn zeroing_a_discrepancy_never_increases_terminal_variance() {
        let sample_var = |disc2: f64, seed: u64| {
            let em1 = exact_affine("y1", vec![dim("x", -8.0, 8.0)], |p| 2.0 * p[0]);
            let em2 = exact_affine("y2", vec![dim("y1", -20.0, 20.0)], |p| p[0] + 3.0);
            let n1 = noisy_node(
                "stage1",
                em1,
                1.0,
                vec![Binding::Exogenous { name: "x".into() }],
            );
            let n2 = noisy_node(
                "stage2",
                em2,
                disc2,
                vec![Binding::Upstream {
                    node: "stage1".into(),
                    output: "y1".into(),
                }],
            );
            let graph = ModelGraph::new(vec![n1, n2]).unwrap();
            let mut exo = BTreeMap::new();
            exo.insert(
                "x".to_string(),
                Exogenous::Normal {
                    mean: 0.0,
                    sd: 1.0,
                },
            );
            let n = 4000;
            let r = propagate(&graph, &exo, &BTreeMap::new(), n, seed, false).unwrap();
            let ys: Vec<f64> = r.samples.iter().map(|s| s[0]).collect();
            let mean = ys.iter().sum::<f64>() / n as f64;
            ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1) as f64
        };
        let mut with_sum = 0.0;
        let mut without_sum = 0.0;
        for seed in 0..20 {
            with_sum += sample_var(1.0, seed);
            without_sum += sample_var(0.0, seed);
        }
        assert!(
            without_sum / 20.0 <= with_sum / 20.0,
            "zeroing stage2 discrepancy increased average variance: {} vs {}",
            without_sum / 20.0,
            with_sum / 20.0
        );
    }

    #[test]
    fn cycle_detected() {
        let em_a = exact_affine("ya", vec![dim("yb", -5.0, 5.0)], |p| p[0]);
        let em_b = exact_affine("yb", vec![dim("ya", -5.0, 5.0)], |p| p[0]);
        let na = noisy_node(
            "a",
            em_a,
            0.0,
            vec![Binding::Upstream {
                node: "b".into(),
                output: "yb".into(),
            }],
        );
        let nb = noisy_node(
            "b",
            em_b,
            0.0,
            vec![Binding::Upstream {
                node: "a".into(),
                output: "ya".into(),
            }],
        );
        let err = ModelGraph::new(vec![na, nb]).unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)), "{err}");
    }

    #[test]
    fn unknown_upstream_output_rejected() {
        let em1 = exact_affine("y", vec![dim("x", -5.0, 5.0)], |p| p[0]);
        let em2 = exact_affine("z", vec![dim("y", -5.0, 5.0)], |p| p[0]);
        let n1 = noisy_node("m1", em1, 0.0, vec![Binding::Exogenous { name: "x".into() }]);
        let n2 = noisy_node(
            "m2",
            em2,
            0.0,
            vec![Binding::Upstream {
                node: "m1".into(),
                output: "nope".into(),
            }],
        );
        assert!(ModelGraph::new(vec![n1, n2]).is_err());
    }

    #[test]
    fn missing_exogenous_value_rejected() {
        let em1 = exact_affine("y", vec![dim("x", -5.0, 5.0)], |p| p[0]);
        let n1 = noisy_node("m1", em1, 0.0, vec![Binding::Exogenous { name: "x".into() }]);
        let graph = ModelGraph::new(vec![n1]).unwrap();
        let err =
            propagate(&graph, &BTreeMap::new(), &BTreeMap::new(), 5, 1, false).unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)));
    }

    fn decision_space(name: &str, lo: f64, hi: f64) -> InputSpace {
        InputSpace::new(vec![dim(name, lo, hi)], &[name]).unwrap()
    }

    #[test]
    fn combined_emulation_of_deterministic_graph_reproduces_composition() {
        // y = 2(x + d) + 1 with x fixed at 0.5: terminal mean over d is
        // 2d + 2, variance 0 (floored).
        let em = exact_affine(
            "y",
            vec![dim("x", -2.0, 2.0), dim("d", -1.0, 1.0)],
            |p| 2.0 * (p[0] + p[1]) + 1.0,
        );
        let node = noisy_node(
            "sys",
            em,
            0.0,
            vec![
                Binding::Exogenous { name: "x".into() },
                Binding::Decision { name: "d".into() },
            ],
        );
        let graph = ModelGraph::new(vec![node]).unwrap();
        let dspace = decision_space("d", -1.0, 1.0);
        let grid = DesignSet::new(
            dspace,
            (0..5).map(|i| vec![-1.0 + 0.5 * i as f64]).collect(),
        )
        .unwrap();
        let combined = emulate_combined(
            &graph,
            &exo_fixed("x", 0.5),
            &grid,
            100,
            TrendBasis::Linear,
            5,
        )
        .unwrap();
        for d in [-1.0, -0.25, 0.6, 1.0] {
            let (m, v) = combined.predict(&[d]).unwrap();
            let truth = 2.0 * (0.5 + d) + 1.0;
            assert!((m - truth).abs() <= 1e-8, "mean {m} vs {truth} at d={d}");
            assert!(v <= 1e-10, "variance {v} should be at the floor");
        }
    }

    #[test]
    fn combined_emulation_held_out_decision_matches_analytic_mean() {
        // Linear-Gaussian chain with the decision shifting x's mean:
        // terminal mean(d) = 2d + 3.
        let em1 = exact_affine(
            "y1",
            vec![dim("x", -8.0, 8.0), dim("d", -1.0, 1.0)],
            |p| 2.0 * (p[0] + p[1]),
        );
        let em2 = exact_affine("y2", vec![dim("y1", -25.0, 25.0)], |p| p[0] + 3.0);
        let n1 = noisy_node(
            "stage1",
            em1,
            1.0,
            vec![
                Binding::Exogenous { name: "x".into() },
                Binding::Decision { name: "d".into() },
            ],
        );
        let n2 = noisy_node(
            "stage2",
            em2,
            1.0,
            vec![Binding::Upstream {
                node: "stage1".into(),
                output: "y1".into(),
            }],
        );
        let graph = ModelGraph::new(vec![n1, n2]).unwrap();
        let mut exo = BTreeMap::new();
        exo.insert(
            "x".to_string(),
            Exogenous::Normal {
                mean: 0.0,
                sd: 1.0,
            },
        );
        let grid = DesignSet::new(
            decision_space("d", -1.0, 1.0),
            (0..9).map(|i| vec![-1.0 + 0.25 * i as f64]).collect(),
        )
        .unwrap();
        let n_inner = 4000;
        let combined =
            emulate_combined(&graph, &exo, &grid, n_inner, TrendBasis::Linear, 11).unwrap();
        let d = 0.3; // held out: between grid points
        let (m, _) = combined.predict(&[d]).unwrap();
        let truth = 2.0 * d + 3.0;
        // Monte Carlo error of each grid mean ~ sqrt(6/4000) ≈ 0.039.
        let tolerance = 4.0 * (6.0f64 / n_inner as f64).sqrt();
        assert!((m - truth).abs() <= tolerance, "mean {m} vs {truth}");
    }

    #[test]
    fn single_point_decision_grid_rejected() {
        let em = exact_affine(
            "y",
            vec![dim("x", -2.0, 2.0), dim("d", -1.0, 1.0)],
            |p| p[0] + p[1],
        );
        let node = noisy_node(
            "sys",
            em,
            0.0,
            vec![
                Binding::Exogenous { name: "x".into() },
                Binding::Decision { name: "d".into() },
            ],
        );
        let graph = ModelGraph::new(vec![node]).unwrap();
        let grid = DesignSet::new(decision_space("d", -1.0, 1.0), vec![vec![0.0]]).unwrap();
        assert!(emulate_combined(
            &graph,
            &exo_fixed("x", 0.0),
            &grid,
            100,
            TrendBasis::Linear,
            1
        )
        .is_err());
    }
}
