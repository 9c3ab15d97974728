//! One function per subcommand. Each returns a [`RunLog`] describing what it
//! read and wrote so the caller can append the step to the audit chain.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;

use emuchain_core::calibration::{self, Observation, DEFAULT_CUTOFF};
use emuchain_core::chain::{self, Exogenous};
use emuchain_core::decision::{
    near_optimal_set, pareto_front, risk_profile, solve_tree, staged_rejection,
    value_of_information, AttributeEvaluator, DecisionSet, DecisionTree, GraphOutcomeModel,
    Orientation, OutcomeModel, RiskProfile, StagedConfig, UtilitySpec, DEFAULT_K_BOUND,
    DEFAULT_NEAR_OPTIMAL_EPSILON,
};
use emuchain_core::design::{self, DesignSet};
use emuchain_core::discrepancy::{
    assess_internal, emulate_internal, DiscrepancySpec, ExternalDiscrepancy, ExternalMode,
    PerturbationPlan, DEFAULT_EXTERNAL_FRACTION,
};
use emuchain_core::emulator::{fit, validate_loo, Emulator, HyperMode, ResidualProcessSpec, TrendBasis, ValidationReport};
use emuchain_core::ledger::{build_manifest, AnalysisConfig};
use emuchain_core::report::{
    pareto_scatter_csv, quantile_fan_csv, write_atomic, Report, SurvivorSection,
};
use emuchain_core::seed;
use emuchain_core::simulator::SimulatorHandle;
use emuchain_core::space::{Dimension, InputSpace};
use emuchain_core::Error as CoreError;

use crate::artifacts::{
    load_json, load_numeric_csv, render_numeric_csv, save_json, split_command, CliError,
    CliResult, LockFile, RetainedDoc, RunLog, RETAINED_FORMAT_VERSION,
};

/// Config/input files must exist before we hand them to core loaders, so a
/// typo'd path is a usage error (exit 2) rather than a domain failure.
fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "missing config file: {}",
            path.display()
        )))
    }
}

fn parse_trend(name: &str) -> CliResult<TrendBasis> {
    name.parse::<TrendBasis>().map_err(|_| {
        CliError::Usage(format!(
            "unknown trend `{name}` (expected constant, linear or quadratic)"
        ))
    })
}

/// Print a machine-readable one-object summary on stdout.
fn emit(summary: &serde_json::Value) {
    println!("{summary:#}");
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

/// Generate a space-filling design over an input space.
#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Input-space document (dimension bounds, decision flags)
    #[arg(long)]
    pub space: PathBuf,
    /// Number of design points
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Design CSV to write
    #[arg(long)]
    pub out: PathBuf,
}

pub fn design(a: &DesignArgs) -> CliResult<RunLog> {
    require_exists(&a.space)?;
    let space: InputSpace = load_json(&a.space)?;
    let set = design::latin_hypercube(&space, a.n, a.seed)?;
    design::save_csv(&set, &a.out)?;
    emit(&serde_json::json!({
        "operation": "design",
        "points": set.points.len(),
        "dimensions": space.n_dims(),
        "written": a.out.display().to_string(),
    }));
    let mut log = RunLog::new("design");
    log.input(&a.space).output(&a.out);
    log.seed = Some(a.seed);
    Ok(log)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Evaluate an external simulator over a design.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Simulator command line; arguments split on whitespace
    #[arg(long)]
    pub sim: String,
    #[arg(long)]
    pub space: PathBuf,
    /// Design CSV of input points (no responses yet)
    #[arg(long)]
    pub design: PathBuf,
    /// Output names the simulator reports, in line order
    #[arg(long, value_delimiter = ',', required = true)]
    pub outputs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-point wall-clock limit
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Mark the simulator as stochastic (disables identical-rerun checks)
    #[arg(long)]
    pub nondeterministic: bool,
}

pub fn run(a: &RunArgs) -> CliResult<RunLog> {
    require_exists(&a.space)?;
    require_exists(&a.design)?;
    let space: InputSpace = load_json(&a.space)?;
    let set = design::load_csv(&space, &a.design)?;
    let (command, args) = split_command(&a.sim)?;
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out_refs: Vec<&str> = a.outputs.iter().map(|s| s.as_str()).collect();
    let mut handle = SimulatorHandle::external(&command, &arg_refs, &out_refs)
        .with_deterministic(!a.nondeterministic);
    if let Some(secs) = a.timeout_secs {
        handle = handle.with_timeout(Duration::from_secs_f64(secs));
    }
    let run = design::run_design(&handle, &set)?;
    design::save_csv(&run, &a.out)?;
    emit(&serde_json::json!({
        "operation": "run",
        "points": run.points.len(),
        "outputs": a.outputs,
        "written": a.out.display().to_string(),
    }));
    let mut log = RunLog::new("run");
    log.input(&a.space).input(&a.design).output(&a.out);
    Ok(log)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

/// Fit an emulator to completed simulator runs.
#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub space: PathBuf,
    /// Design CSV including response columns
    #[arg(long)]
    pub design: PathBuf,
    /// Which response column to emulate
    #[arg(long)]
    pub output: String,
    /// Trend basis: constant, linear or quadratic
    #[arg(long, default_value = "linear")]
    pub trend: String,
    /// Hyperparameter mode: ml or fixed
    #[arg(long, default_value = "ml")]
    pub mode: String,
    /// Correlation lengths (fixed mode), comma separated
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<f64>>,
    /// Residual variance (fixed mode)
    #[arg(long)]
    pub variance: Option<f64>,
    /// Nugget variance (fixed mode)
    #[arg(long)]
    pub nugget: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fit_cmd(a: &FitArgs) -> CliResult<RunLog> {
    require_exists(&a.space)?;
    require_exists(&a.design)?;
    let space: InputSpace = load_json(&a.space)?;
    let set = design::load_csv(&space, &a.design)?.select_output(&a.output)?;
    let basis = parse_trend(&a.trend)?;
    let mode = match a.mode.as_str() {
        "ml" => HyperMode::MaximizeLikelihood,
        "fixed" => {
            let lengths = a.lengths.clone().ok_or_else(|| {
                CliError::Usage("--mode fixed requires --lengths".into())
            })?;
            let variance = a
                .variance
                .ok_or_else(|| CliError::Usage("--mode fixed requires --variance".into()))?;
            HyperMode::Fixed(ResidualProcessSpec {
                variance,
                correlation_lengths: lengths,
                nugget: a.nugget.unwrap_or(0.0),
            })
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown mode `{other}` (expected ml or fixed)"
            )))
        }
    };
    let em = fit(&set, basis, mode)?;
    em.save(&a.out)?;
    emit(&serde_json::json!({
        "operation": "fit",
        "output": em.output_name(),
        "runs": em.n_runs(),
        "trend": a.trend,
        "residual": em.residual(),
        "written": a.out.display().to_string(),
    }));
    let mut log = RunLog::new("fit");
    log.input(&a.space).input(&a.design).output(&a.out);
    Ok(log)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

/// Validate an emulator by leave-one-out or against held-out runs.
#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Emulator document
    #[arg(long)]
    pub em: PathBuf,
    /// Held-out design CSV; defaults to leave-one-out on the training runs
    #[arg(long)]
    pub against: Option<PathBuf>,
    /// Write the validation report here as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn holdout_report(em: &Emulator, holdout: &DesignSet) -> CliResult<ValidationReport> {
    let ys = holdout.single_responses()?;
    let mut errors = Vec::with_capacity(ys.len());
    let mut degenerate = Vec::new();
    for (i, (p, y)) in holdout.points.iter().zip(&ys).enumerate() {
        let pred = em.predict(p)?;
        if pred.variance <= 0.0 {
            degenerate.push(i);
            errors.push(f64::NAN);
        } else {
            errors.push((y - pred.mean) / pred.variance.sqrt());
        }
    }
    let valid: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    let frac = |bound: f64| {
        if valid.is_empty() {
            0.0
        } else {
            valid.iter().filter(|e| e.abs() <= bound).count() as f64 / valid.len() as f64
        }
    };
    Ok(ValidationReport {
        standardized_errors: errors,
        degenerate_points: degenerate,
        within_two: frac(2.0),
        within_three: frac(3.0),
    })
}

pub fn validate(a: &ValidateArgs) -> CliResult<RunLog> {
    require_exists(&a.em)?;
    let em = Emulator::load(&a.em)?;
    let report = match &a.against {
        None => validate_loo(&em)?,
        Some(path) => {
            require_exists(path)?;
            let holdout = design::load_csv(em.space(), path)?.select_output(em.output_name())?;
            holdout_report(&em, &holdout)?
        }
    };
    if let Some(out) = &a.out {
        save_json(&report, out)?;
    }
    emit(&serde_json::json!({
        "operation": "validate",
        "output": em.output_name(),
        "points": report.standardized_errors.len(),
        "within_two": report.within_two,
        "within_three": report.within_three,
        "degenerate_points": report.degenerate_points,
    }));
    let mut log = RunLog::new("validate");
    log.input(&a.em);
    if let Some(p) = &a.against {
        log.input(p);
    }
    if let Some(p) = &a.out {
        log.output(p);
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// discrepancy
// ---------------------------------------------------------------------------

/// Assess structural discrepancy by perturbation experiments, or declare a
/// purely external error budget.
#[derive(Debug, Args)]
pub struct DiscrepancyArgs {
    /// Simulator command line (omit for an external-only declaration)
    #[arg(long)]
    pub sim: Option<String>,
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Base points CSV for the perturbation experiment
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Perturbation plan JSON
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output names, in simulator line order
    #[arg(long, value_delimiter = ',', required = true)]
    pub outputs: Vec<String>,
    /// Extend assessed variances over the space by emulating their log
    #[arg(long)]
    pub emulate_variance: bool,
    /// Trend for the variance emulators
    #[arg(long, default_value = "linear")]
    pub trend: String,
    /// External (unresolvable) error as a fraction of output magnitude
    #[arg(long)]
    pub external_fraction: Option<f64>,
    /// External error as absolute standard deviations, comma separated
    #[arg(long, value_delimiter = ',')]
    pub external_sd: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn discrepancy(a: &DiscrepancyArgs) -> CliResult<RunLog> {
    let mut log = RunLog::new("discrepancy");
    let mut spec = match &a.sim {
        Some(sim) => {
            let space_path = a.space.as_ref().ok_or_else(|| {
                CliError::Usage("--sim requires --space".into())
            })?;
            let design_path = a.design.as_ref().ok_or_else(|| {
                CliError::Usage("--sim requires --design (base points)".into())
            })?;
            let plan_path = a
                .plan
                .as_ref()
                .ok_or_else(|| CliError::Usage("--sim requires --plan".into()))?;
            require_exists(space_path)?;
            require_exists(design_path)?;
            require_exists(plan_path)?;
            log.input(space_path).input(design_path).input(plan_path);
            let space: InputSpace = load_json(space_path)?;
            let base = design::load_csv(&space, design_path)?;
            let plan: PerturbationPlan = load_json(plan_path)?;
            let (command, args) = split_command(sim)?;
            let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
            let out_refs: Vec<&str> = a.outputs.iter().map(|s| s.as_str()).collect();
            let handle = SimulatorHandle::external(&command, &arg_refs, &out_refs)
                .with_deterministic(false);
            let mut spec = assess_internal(&handle, &base, &plan)?;
            if a.emulate_variance {
                spec = emulate_internal(&spec, &space, parse_trend(&a.trend)?)?;
            }
            spec
        }
        None => DiscrepancySpec::none(&a.outputs),
    };
    // External error on top (or alone), one scale per output.
    if let Some(sds) = &a.external_sd {
        if sds.len() != spec.n_outputs() {
            return Err(CliError::Usage(format!(
                "--external-sd needs {} values, got {}",
                spec.n_outputs(),
                sds.len()
            )));
        }
        spec.external = ExternalDiscrepancy {
            mode: ExternalMode::Absolute,
            scale: sds.clone(),
        };
    } else if let Some(fraction) = a.external_fraction {
        spec.external = ExternalDiscrepancy {
            mode: ExternalMode::Relative,
            scale: vec![fraction; spec.n_outputs()],
        };
    } else if a.sim.is_none() {
        // A declaration with no experiment and no explicit scale falls back
        // to the conventional 10% budget rather than claiming zero error.
        spec.external = ExternalDiscrepancy {
            mode: ExternalMode::Relative,
            scale: vec![DEFAULT_EXTERNAL_FRACTION; spec.n_outputs()],
        };
    }
    spec.validate()?;
    spec.save(&a.out)?;
    emit(&serde_json::json!({
        "operation": "discrepancy",
        "outputs": spec.output_names,
        "internal_variance": spec.internal.variance,
        "external_mode": spec.external.mode,
        "external_scale": spec.external.scale,
        "written": a.out.display().to_string(),
    }));
    log.output(&a.out);
    Ok(log)
}

// ---------------------------------------------------------------------------
// match
// ---------------------------------------------------------------------------

/// History-match candidate inputs against observations.
#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub space: PathBuf,
    /// Emulator documents, one per observed output (repeatable)
    #[arg(long = "em", required = true)]
    pub em: Vec<PathBuf>,
    /// Discrepancy document; omitting it asserts a perfect model
    #[arg(long)]
    pub disc: Option<PathBuf>,
    /// Observations JSON: [{output_name, value, measurement_variance}, ...]
    #[arg(long)]
    pub obs: PathBuf,
    /// Candidate points CSV
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn match_cmd(a: &MatchArgs) -> CliResult<RunLog> {
    require_exists(&a.space)?;
    require_exists(&a.obs)?;
    require_exists(&a.candidates)?;
    for p in &a.em {
        require_exists(p)?;
    }
    let space: InputSpace = load_json(&a.space)?;
    let ems: Vec<Emulator> = a
        .em
        .iter()
        .map(|p| Emulator::load(p).map_err(CliError::Domain))
        .collect::<CliResult<_>>()?;
    let output_names: Vec<String> = ems.iter().map(|e| e.output_name().to_string()).collect();
    let disc = match &a.disc {
        Some(p) => {
            require_exists(p)?;
            DiscrepancySpec::load(p)?
        }
        None => {
            log::warn!("no discrepancy document given; matching as if the model were perfect");
            DiscrepancySpec::none(&output_names)
        }
    };
    let observations: Vec<Observation> = load_json(&a.obs)?;
    let candidates = design::load_csv(&space, &a.candidates)?;
    let n_candidates = candidates.points.len();
    let retained = calibration::history_match(&ems, &disc, &observations, &candidates, a.cutoff)?;
    if retained.all_rejected() {
        log::warn!(
            "no candidate survives at cutoff {}: the model cannot reproduce the observations",
            a.cutoff
        );
    }
    let doc = RetainedDoc {
        format_version: RETAINED_FORMAT_VERSION,
        emulators: ems.iter().map(|e| e.to_doc()).collect(),
        discrepancy: disc,
        observations,
        retained,
    };
    save_json(&doc, &a.out)?;
    emit(&serde_json::json!({
        "operation": "match",
        "candidates": n_candidates,
        "retained": doc.retained.n_retained(),
        "retained_fraction": doc.retained.retained_fraction(),
        "cutoff": a.cutoff,
        "written": a.out.display().to_string(),
    }));
    let mut log = RunLog::new("match");
    log.input(&a.space).input(&a.obs).input(&a.candidates);
    for p in &a.em {
        log.input(p);
    }
    if let Some(p) = &a.disc {
        log.input(p);
    }
    log.output(&a.out);
    Ok(log)
}

// ---------------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------------

/// Sample system forecasts over a retained input region.
#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Retained-space document written by `match`
    #[arg(long)]
    pub retained: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Forecast samples CSV
    #[arg(long)]
    pub out: PathBuf,
}

pub fn forecast(a: &ForecastArgs) -> CliResult<RunLog> {
    require_exists(&a.retained)?;
    let doc: RetainedDoc = load_json(&a.retained)?;
    let ems = doc.emulators()?;
    let samples = calibration::forecast(&ems, &doc.discrepancy, &doc.retained, a.n, a.seed)?;
    let header: Vec<String> = ems.iter().map(|e| e.output_name().to_string()).collect();
    write_atomic(&a.out, &render_numeric_csv(&header, &samples))?;
    let mut summary = serde_json::Map::new();
    for (j, name) in header.iter().enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let (mean, var) = mean_and_variance(&col);
        summary.insert(
            name.clone(),
            serde_json::json!({"mean": mean, "sd": var.sqrt()}),
        );
    }
    emit(&serde_json::json!({
        "operation": "forecast",
        "samples": a.n,
        "outputs": summary,
        "written": a.out.display().to_string(),
    }));
    let mut log = RunLog::new("forecast");
    log.input(&a.retained).output(&a.out);
    log.seed = Some(a.seed);
    Ok(log)
}

// ---------------------------------------------------------------------------
// propagate
// ---------------------------------------------------------------------------

/// Push samples through a graph of emulated models.
#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Graph document; emulator paths resolve relative to it
    #[arg(long)]
    pub graph: PathBuf,
    /// Exogenous inputs JSON: name -> distribution
    #[arg(long)]
    pub exo: PathBuf,
    /// Decision values JSON: name -> value (required when the graph has any)
    #[arg(long)]
    pub decide: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Terminal-output samples CSV
    #[arg(long)]
    pub out: PathBuf,
}

pub fn propagate(a: &PropagateArgs) -> CliResult<RunLog> {
    require_exists(&a.graph)?;
    require_exists(&a.exo)?;
    let graph = chain::load_graph(&a.graph)?;
    let exo: BTreeMap<String, Exogenous> = load_json(&a.exo)?;
    let decisions: BTreeMap<String, f64> = match &a.decide {
        Some(p) => {
            require_exists(p)?;
            load_json(p)?
        }
        None => BTreeMap::new(),
    };
    let result = chain::propagate(&graph, &exo, &decisions, a.n, a.seed, false)?;
    write_atomic(
        &a.out,
        &render_numeric_csv(&result.output_names, &result.samples),
    )?;
    let mut summary = serde_json::Map::new();
    for (j, name) in result.output_names.iter().enumerate() {
        let col: Vec<f64> = result.samples.iter().map(|s| s[j]).collect();
        let (mean, var) = mean_and_variance(&col);
        summary.insert(
            name.clone(),
            serde_json::json!({"mean": mean, "variance": var}),
        );
    }
    emit(&serde_json::json!({
        "operation": "propagate",
        "samples": a.n,
        "outputs": summary,
        "extrapolation_count": result.extrapolation_count,
        "written": a.out.display().to_string(),
    }));
    let mut log = RunLog::new("propagate");
    log.input(&a.graph).input(&a.exo).output(&a.out);
    if let Some(p) = &a.decide {
        log.input(p);
    }
    log.seed = Some(a.seed);
    Ok(log)
}

// ---------------------------------------------------------------------------
// decide
// ---------------------------------------------------------------------------

/// Staged rejection of decision candidates by expected-utility bounds,
/// with optional risk profiles and a full report.
#[derive(Debug, Args)]
pub struct DecideArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub exo: PathBuf,
    /// Utility specification JSON (one attribute per terminal output)
    #[arg(long)]
    pub utility: PathBuf,
    /// Candidate decisions CSV, one column per graph decision name
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    /// Fresh Monte Carlo evaluations per stage
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    /// Monte Carlo samples per evaluation
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Bound half-width in combined standard deviations
    #[arg(long, default_value_t = DEFAULT_K_BOUND)]
    pub k_bound: f64,
    /// Trend basis for the utility-surface emulator
    #[arg(long, default_value = "quadratic")]
    pub trend: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Near-optimality threshold (fraction of the surviving utility range)
    #[arg(long, default_value_t = DEFAULT_NEAR_OPTIMAL_EPSILON)]
    pub epsilon: f64,
    /// Survivor section JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Samples per surviving decision for risk profiles
    #[arg(long, default_value_t = 2000)]
    pub profile_samples: usize,
    /// Bad-outcome threshold per attribute, e.g. --threshold net.profit=0
    #[arg(long)]
    pub threshold: Vec<String>,
    /// Risk profiles JSON for the survivors
    #[arg(long)]
    pub profiles_out: Option<PathBuf>,
    /// Write a full report here (requires --analysis)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Uncertainty-assessment config JSON, required with --report
    #[arg(long)]
    pub analysis: Option<PathBuf>,
    #[arg(long, default_value = "decision analysis")]
    pub title: String,
    /// Also write plot-ready CSV data next to the report
    #[arg(long)]
    pub plot_data: bool,
}

/// Decision candidates live in a box spanned by the grid itself: each graph
/// decision name must be a grid column, bounds come from the column range.
fn decision_set_from_grid(
    names: &[String],
    header: &[String],
    rows: &[Vec<f64>],
) -> CliResult<DecisionSet> {
    if names.is_empty() {
        return Err(CliError::Usage(
            "the graph binds no decision variables; nothing to decide".into(),
        ));
    }
    if rows.is_empty() {
        return Err(CliError::Usage("decision grid has no rows".into()));
    }
    for h in header {
        if !names.contains(h) {
            return Err(CliError::Usage(format!(
                "grid column `{h}` is not a decision in the graph (expected {names:?})"
            )));
        }
    }
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        let c = header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Usage(format!("decision grid is missing column `{name}`"))
        })?;
        cols.push(c);
    }
    let points: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| cols.iter().map(|&c| r[c]).collect())
        .collect();
    let mut dims = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let mut lower = f64::INFINITY;
        let mut upper = f64::NEG_INFINITY;
        for p in &points {
            lower = lower.min(p[j]);
            upper = upper.max(p[j]);
        }
        if lower == upper {
            // A constant column still needs a nonempty box to standardize in.
            let pad = 0.5 * lower.abs().max(1.0);
            lower -= pad;
            upper += pad;
        }
        dims.push(Dimension {
            name: name.clone(),
            lower,
            upper,
        });
    }
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let space = InputSpace::new(dims, &name_refs)?;
    DecisionSet::new(space, points).map_err(CliError::Domain)
}

fn parse_thresholds(pairs: &[String]) -> CliResult<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for pair in pairs {
        let (name, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--threshold wants name=value, got `{pair}`"))
        })?;
        let v: f64 = value.trim().parse().map_err(|_| {
            CliError::Usage(format!("--threshold `{pair}`: `{value}` is not a number"))
        })?;
        out.insert(name.trim().to_string(), v);
    }
    Ok(out)
}

pub fn decide(a: &DecideArgs, lock_path: &Path) -> CliResult<RunLog> {
    require_exists(&a.graph)?;
    require_exists(&a.exo)?;
    require_exists(&a.utility)?;
    require_exists(&a.grid)?;
    if a.report.is_some() && a.analysis.is_none() {
        return Err(CliError::Usage(
            "--report requires --analysis (the uncertainty-assessment config)".into(),
        ));
    }
    let graph = chain::load_graph(&a.graph)?;
    let exo: BTreeMap<String, Exogenous> = load_json(&a.exo)?;
    let utility: UtilitySpec = load_json(&a.utility)?;
    let (header, rows) = load_numeric_csv(&a.grid)?;
    let candidates = decision_set_from_grid(&graph.decision_names(), &header, &rows)?;
    let model = GraphOutcomeModel::new(&graph, &exo);
    let cfg = StagedConfig {
        stages: a.stages,
        budget_per_stage: a.budget,
        n_samples: a.n,
        k_bound: a.k_bound,
        basis: parse_trend(&a.trend)?,
        seed: a.seed,
    };
    let outcome = staged_rejection(&candidates, &model, &utility, &cfg)?;
    let section = SurvivorSection::from_outcome(&outcome, a.k_bound, Some(a.epsilon));
    let survivors = section.survivor_indices();
    if let Some(out) = &a.out {
        save_json(&section, out)?;
    }

    // Risk profiles for every survivor, on their own substreams.
    let thresholds = parse_thresholds(&a.threshold)?;
    let want_profiles = a.profiles_out.is_some() || a.report.is_some();
    let mut profiles: Vec<RiskProfile> = Vec::new();
    if want_profiles {
        for &i in &survivors {
            profiles.push(risk_profile(
                &model,
                &outcome.set.decisions[i],
                a.profile_samples,
                seed::derive(a.seed, "cli.decide.profile", i as u64),
                &thresholds,
            )?);
        }
        if let Some(out) = &a.profiles_out {
            save_json(&profiles, out)?;
        }
    }

    let near_optimal = {
        let surviving_evals: BTreeMap<usize, f64> = outcome
            .evaluations
            .iter()
            .filter(|(i, _)| survivors.contains(i))
            .map(|(i, (eu, _))| (*i, *eu))
            .collect();
        near_optimal_set(&surviving_evals, a.epsilon)
    };
    emit(&serde_json::json!({
        "operation": "decide",
        "candidates": outcome.set.decisions.len(),
        "survivors": survivors,
        "near_optimal": near_optimal,
        "stages_run": outcome.stages_run,
        "evaluations_spent": outcome.evaluations.len(),
    }));

    let mut log = RunLog::new("decide");
    log.input(&a.graph)
        .input(&a.exo)
        .input(&a.utility)
        .input(&a.grid);
    log.seed = Some(a.seed);
    if let Some(p) = &a.out {
        log.output(p);
    }
    if let Some(p) = &a.profiles_out {
        log.output(p);
    }

    if let Some(report_path) = &a.report {
        let analysis_path = a.analysis.as_ref().expect("checked above");
        require_exists(analysis_path)?;
        let config: AnalysisConfig = load_json(analysis_path)?;
        let manifest = build_manifest(&config)?;
        // The manifest is the project's standing declaration; keep it in the
        // lock file so later steps and audits can see it.
        let mut lock = LockFile::load_or_default(lock_path)?;
        lock.manifest = Some(manifest.clone());
        lock.save(lock_path)?;

        let mut report = Report::new(&a.title, a.seed, manifest);
        report.survivors = Some(section);
        report.risk_profiles = profiles;
        report.save(report_path)?;
        if a.plot_data {
            let fan = plot_path(report_path, "quantiles");
            write_atomic(&fan, &quantile_fan_csv(&report.risk_profiles))?;
            log.output(&fan);
        }
        log.input(analysis_path).output(report_path);
    }
    Ok(log)
}

/// `report.json` -> `report_quantiles.csv` and friends.
fn plot_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

// ---------------------------------------------------------------------------
// pareto
// ---------------------------------------------------------------------------

/// Identify the certainly-not-dominated decisions across attributes.
#[derive(Debug, Args)]
pub struct ParetoArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub exo: PathBuf,
    /// Candidate decisions CSV, one column per graph decision name
    #[arg(long)]
    pub grid: PathBuf,
    /// Attributes and senses, e.g. --attrs cost:min,benefit:max
    #[arg(long, value_delimiter = ',', required = true)]
    pub attrs: Vec<String>,
    /// Monte Carlo samples per candidate
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pareto result JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a scatter CSV next to --out
    #[arg(long)]
    pub plot_data: bool,
}

fn parse_attrs(specs: &[String], available: &[String]) -> CliResult<Vec<(String, usize, Orientation)>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let (name, sense) = spec.split_once(':').ok_or_else(|| {
            CliError::Usage(format!("--attrs wants name:min or name:max, got `{spec}`"))
        })?;
        let orientation = match sense.trim() {
            "min" => Orientation::Minimize,
            "max" => Orientation::Maximize,
            other => {
                return Err(CliError::Usage(format!(
                    "attribute `{name}`: sense must be min or max, got `{other}`"
                )))
            }
        };
        let name = name.trim();
        // Accept either the full `node.output` name or a unique suffix.
        let matches: Vec<usize> = available
            .iter()
            .enumerate()
            .filter(|(_, on)| on.as_str() == name || on.ends_with(&format!(".{name}")))
            .map(|(j, _)| j)
            .collect();
        match matches.as_slice() {
            [j] => out.push((available[*j].clone(), *j, orientation)),
            [] => {
                return Err(CliError::Usage(format!(
                    "attribute `{name}` matches no terminal output (available: {available:?})"
                )))
            }
            _ => {
                return Err(CliError::Usage(format!(
                    "attribute `{name}` is ambiguous among {available:?}; use the full name"
                )))
            }
        }
    }
    Ok(out)
}

pub fn pareto(a: &ParetoArgs) -> CliResult<RunLog> {
    require_exists(&a.graph)?;
    require_exists(&a.exo)?;
    require_exists(&a.grid)?;
    let graph = chain::load_graph(&a.graph)?;
    let exo: BTreeMap<String, Exogenous> = load_json(&a.exo)?;
    let (header, rows) = load_numeric_csv(&a.grid)?;
    let candidates = decision_set_from_grid(&graph.decision_names(), &header, &rows)?;
    let model = GraphOutcomeModel::new(&graph, &exo);
    let outputs = model.output_names();
    let attrs = parse_attrs(&a.attrs, &outputs)?;

    // One propagation per candidate, done up front on its own substream;
    // the per-attribute evaluators then just look the moments up.
    let mut table: BTreeMap<Vec<u64>, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, d) in candidates.decisions.iter().enumerate() {
        let samples = model
            .sample(d, a.n, seed::derive(a.seed, "cli.pareto", i as u64))
            .map_err(CliError::Domain)?;
        let moments: Vec<(f64, f64)> = (0..outputs.len())
            .map(|j| {
                let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                let (mean, var) = mean_and_variance(&col);
                (mean, (var / col.len() as f64).sqrt())
            })
            .collect();
        table.insert(d.iter().map(|v| v.to_bits()).collect(), moments);
    }

    let evaluators: Vec<AttributeEvaluator> = attrs
        .iter()
        .map(|(name, j, orientation)| {
            let col = *j;
            let table = &table;
            AttributeEvaluator::new(name, *orientation, move |d: &[f64]| {
                let key: Vec<u64> = d.iter().map(|v| v.to_bits()).collect();
                table
                    .get(&key)
                    .map(|m| m[col])
                    .ok_or_else(|| CoreError::Decision("decision was not precomputed".into()))
            })
        })
        .collect();
    let result = pareto_front(&candidates, &evaluators)?;
    if let Some(out) = &a.out {
        save_json(&result, out)?;
    }
    emit(&serde_json::json!({
        "operation": "pareto",
        "candidates": candidates.decisions.len(),
        "boundary": result.boundary_indices,
        "dominated": result.dominated_count,
        "attributes": result.attribute_names,
    }));
    let mut log = RunLog::new("pareto");
    log.input(&a.graph).input(&a.exo).input(&a.grid);
    log.seed = Some(a.seed);
    if let Some(out) = &a.out {
        log.output(out);
        if a.plot_data {
            let scatter = plot_path(out, "scatter");
            write_atomic(&scatter, &pareto_scatter_csv(&result))?;
            log.output(&scatter);
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// tree
// ---------------------------------------------------------------------------

/// Solve a sequential decision tree by backward induction.
#[derive(Debug, Args)]
pub struct TreeArgs {
    /// Decision tree JSON
    #[arg(long)]
    pub tree: PathBuf,
    /// Utility specification JSON
    #[arg(long)]
    pub utility: PathBuf,
    /// A tree without some option; prints the value of the difference
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Solution JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn tree(a: &TreeArgs) -> CliResult<RunLog> {
    require_exists(&a.tree)?;
    require_exists(&a.utility)?;
    let tree: DecisionTree = load_json(&a.tree)?;
    let utility: UtilitySpec = load_json(&a.utility)?;
    let solution = solve_tree(&tree, &utility)?;
    let mut summary = serde_json::json!({
        "operation": "tree",
        "value": solution.value,
        "policy": solution.policy,
    });
    if let Some(baseline_path) = &a.baseline {
        require_exists(baseline_path)?;
        let baseline: DecisionTree = load_json(baseline_path)?;
        let voi = value_of_information(&baseline, &tree, &utility)?;
        summary["value_of_information"] = serde_json::json!(voi);
    }
    if let Some(out) = &a.out {
        save_json(&solution, out)?;
    }
    emit(&summary);
    let mut log = RunLog::new("tree");
    log.input(&a.tree).input(&a.utility);
    if let Some(p) = &a.baseline {
        log.input(p);
    }
    if let Some(p) = &a.out {
        log.output(p);
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

/// Inspect the tamper-evident audit chain.
#[derive(Debug, clap::Subcommand)]
pub enum AuditCmd {
    /// Re-verify every hash link in the chain
    Verify,
    /// Print the chain as JSON
    Show,
}

pub fn audit(cmd: &AuditCmd, lock_path: &Path) -> CliResult<()> {
    // Deserializing the lock file already verifies the chain; a tampered
    // file surfaces as a domain error here.
    let lock = LockFile::load_or_default(lock_path)?;
    match cmd {
        AuditCmd::Verify => {
            lock.chain.verify()?;
            emit(&serde_json::json!({
                "operation": "audit verify",
                "ok": true,
                "records": lock.chain.len(),
                "lock": lock_path.display().to_string(),
            }));
        }
        AuditCmd::Show => {
            emit(&serde_json::json!({
                "operation": "audit show",
                "records": lock.chain.entries(),
            }));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Assemble the final report from previously computed sections.
#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Uncertainty-assessment config JSON; the report cannot be emitted
    /// until every recognised source has a treatment
    #[arg(long)]
    pub analysis: PathBuf,
    #[arg(long, default_value = "analysis")]
    pub title: String,
    /// Master seed the analysis ran under, echoed for reproducibility
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Survivor section JSON from `decide`
    #[arg(long)]
    pub survivors: Option<PathBuf>,
    /// Risk profiles JSON from `decide`
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Pareto result JSON from `pareto`
    #[arg(long)]
    pub pareto: Option<PathBuf>,
    /// Tree solution JSON from `tree`
    #[arg(long)]
    pub tree_solution: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write plot-ready CSVs next to the report
    #[arg(long)]
    pub plot_data: bool,
}

pub fn report(a: &ReportArgs, lock_path: &Path) -> CliResult<RunLog> {
    require_exists(&a.analysis)?;
    let config: AnalysisConfig = load_json(&a.analysis)?;
    let manifest = build_manifest(&config)?;
    let mut lock = LockFile::load_or_default(lock_path)?;
    lock.manifest = Some(manifest.clone());
    lock.save(lock_path)?;

    let mut report = Report::new(&a.title, a.seed, manifest);
    let mut log = RunLog::new("report");
    log.input(&a.analysis);
    if let Some(p) = &a.survivors {
        require_exists(p)?;
        report.survivors = Some(load_json(p)?);
        log.input(p);
    }
    if let Some(p) = &a.profiles {
        require_exists(p)?;
        report.risk_profiles = load_json(p)?;
        log.input(p);
    }
    if let Some(p) = &a.pareto {
        require_exists(p)?;
        report.pareto = Some(load_json(p)?);
        log.input(p);
    }
    if let Some(p) = &a.tree_solution {
        require_exists(p)?;
        report.tree = Some(load_json(p)?);
        log.input(p);
    }
    report.save(&a.out)?;
    log.output(&a.out);
    if a.plot_data {
        if !report.risk_profiles.is_empty() {
            let fan = plot_path(&a.out, "quantiles");
            write_atomic(&fan, &quantile_fan_csv(&report.risk_profiles))?;
            log.output(&fan);
        }
        if let Some(p) = &report.pareto {
            let scatter = plot_path(&a.out, "pareto");
            write_atomic(&scatter, &pareto_scatter_csv(p))?;
            log.output(&scatter);
        }
    }
    emit(&serde_json::json!({
        "operation": "report",
        "title": a.title,
        "sections": {
            "survivors": report.survivors.is_some(),
            "risk_profiles": report.risk_profiles.len(),
            "pareto": report.pareto.is_some(),
            "tree": report.tree.is_some(),
        },
        "written": a.out.display().to_string(),
    }));
    Ok(log)
}
