//! Structural discrepancy: how far the model is from reality even at its
//! best input choice.
//!
//! Two routes are combined additively in variance:
//!
//! * **internal** — rerun the simulator at fixed base inputs while jittering
//!   model features usually held fixed (parameters, forcing series, injected
//!   state noise) and measure how much the outputs move; the per-point
//!   variances can then be extended over the whole input space by emulating
//!   their logarithm;
//! * **external** — an expert-specified additive error on top of everything
//!   the model represents, by default 10% of the output scale.
//!
//! Draws are zero-mean Gaussian: the assessment produces only variances and
//! cross-output correlations, and the Gaussian is the maximum-entropy
//! distribution with those moments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist, Uniform};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::emulator::{self, Emulator, EmulatorDoc, HyperMode, TrendBasis};
use crate::error::{Error, Result};
use crate::seed;
use crate::simulator::{self, SimulatorHandle};
use crate::space::InputSpace;

/// Default external discrepancy: 10% of the output scale.
pub const DEFAULT_EXTERNAL_FRACTION: f64 = 0.1;

/// Floor applied to assessed variances before taking logs for emulation.
const LOG_VARIANCE_FLOOR: f64 = 1e-30;

/// Zero-mean distribution of one perturbation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationDist {
    /// Uniform on [-half_width, half_width].
    Uniform { half_width: f64 },
    Normal { sd: f64 },
}

impl PerturbationDist {
    fn scale(&self) -> f64 {
        match self {
            PerturbationDist::Uniform { half_width } => *half_width,
            PerturbationDist::Normal { sd } => *sd,
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            PerturbationDist::Uniform { half_width } => {
                if *half_width == 0.0 {
                    0.0
                } else {
                    Uniform::new_inclusive(-half_width, *half_width)
                        .expect("validated half_width")
                        .sample(rng)
                }
            }
            PerturbationDist::Normal { sd } => {
                if *sd == 0.0 {
                    0.0
                } else {
                    NormalDist::new(0.0, *sd).expect("validated sd").sample(rng)
                }
            }
        }
    }
}

/// One perturbed feature of the simulator.
///
/// A `Parameter` whose name matches an input-space dimension is jittered
/// around its base value in place; any other target appends its draws after
/// the base inputs, in declaration order, and the simulator must accept the
/// widened input vector (base dimensions first, perturbations after).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum PerturbationTarget {
    /// A scalar parameter normally held fixed.
    Parameter { name: String, dist: PerturbationDist },
    /// A forcing series perturbed independently at each step.
    Forcing {
        name: String,
        steps: usize,
        dist: PerturbationDist,
    },
    /// Noise injected into the state vector.
    StateNoise {
        name: String,
        dims: usize,
        dist: PerturbationDist,
    },
}

impl PerturbationTarget {
    fn dist(&self) -> &PerturbationDist {
        match self {
            PerturbationTarget::Parameter { dist, .. }
            | PerturbationTarget::Forcing { dist, .. }
            | PerturbationTarget::StateNoise { dist, .. } => dist,
        }
    }

    /// Number of appended inputs when the target is not an in-place jitter.
    fn width(&self) -> usize {
        match self {
            PerturbationTarget::Parameter { .. } => 1,
            PerturbationTarget::Forcing { steps, .. } => *steps,
            PerturbationTarget::StateNoise { dims, .. } => *dims,
        }
    }
}

/// A perturbation experiment: which features move, by how much, how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub targets: Vec<PerturbationTarget>,
    /// Simulator reruns per base point; at least 2 (a variance needs two).
    pub replicates: usize,
    /// Master seed for the replicate draws.
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Discrepancy(format!(
                "replicates must be >= 2, got {}",
                self.replicates
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Discrepancy("plan has no perturbation targets".into()));
        }
        for t in &self.targets {
            let s = t.dist().scale();
            // A zero scale is legal (it degenerates to a null experiment,
            // useful for checking a deterministic model) but never negative.
            if !(s >= 0.0) {
                return Err(Error::Discrepancy(format!(
                    "perturbation scale must be >= 0, got {s}"
                )));
            }
            if matches!(t, PerturbationTarget::Forcing { steps: 0, .. })
                || matches!(t, PerturbationTarget::StateNoise { dims: 0, .. })
            {
                return Err(Error::Discrepancy(
                    "forcing/state-noise targets need at least one component".into(),
                ));
            }
        }
        Ok(())
    }

    /// Inputs appended after the base dimensions (in-place jitters excluded).
    pub fn appended_width(&self, space: &InputSpace) -> usize {
        self.targets
            .iter()
            .map(|t| match t {
                PerturbationTarget::Parameter { name, .. } if space.index_of(name).is_some() => 0,
                other => other.width(),
            })
            .sum()
    }
}

/// Internal discrepancy assessment: per-output variances, their locations,
/// the pooled cross-output correlation, and (optionally) emulators extending
/// the variances over the input space.
#[derive(Debug, Clone)]
pub struct InternalDiscrepancy {
    /// Pooled variance per output (mean over base points).
    pub variance: Vec<f64>,
    /// Cross-output correlation, pooled over base points; unit diagonal.
    pub correlation: Vec<Vec<f64>>,
    /// Where the assessment ran.
    pub base_points: Vec<Vec<f64>>,
    /// Sample variance per base point per output.
    pub point_variances: Vec<Vec<f64>>,
    /// Log-variance emulators, one per output, filled by
    /// [`emulate_internal`].
    pub variance_emulators: Option<Vec<Emulator>>,
}

impl InternalDiscrepancy {
    pub fn zero(n_outputs: usize) -> Self {
        InternalDiscrepancy {
            variance: vec![0.0; n_outputs],
            correlation: identity_correlation(n_outputs),
            base_points: Vec::new(),
            point_variances: Vec::new(),
            variance_emulators: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalMode {
    /// Scale multiplies the output magnitude (0.1 = 10% additional error).
    Relative,
    /// Scale is a standard deviation in output units.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalDiscrepancy {
    pub mode: ExternalMode,
    /// Per-output scale, >= 0.
    pub scale: Vec<f64>,
}

impl ExternalDiscrepancy {
    pub fn zero(n_outputs: usize) -> Self {
        ExternalDiscrepancy {
            mode: ExternalMode::Absolute,
            scale: vec![0.0; n_outputs],
        }
    }

    /// Standard deviation per output given the local output magnitudes.
    pub fn sd(&self, output_scale: &[f64]) -> Vec<f64> {
        match self.mode {
            ExternalMode::Relative => self
                .scale
                .iter()
                .zip(output_scale)
                .map(|(s, o)| s * o.abs())
                .collect(),
            ExternalMode::Absolute => self.scale.clone(),
        }
    }
}

/// Full discrepancy specification for one model's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DiscrepancyDoc", into = "DiscrepancyDoc")]
pub struct DiscrepancySpec {
    pub output_names: Vec<String>,
    pub internal: InternalDiscrepancy,
    pub external: ExternalDiscrepancy,
}

impl DiscrepancySpec {
    /// No discrepancy at all: zero internal, zero external.
    pub fn none(output_names: &[String]) -> Self {
        let n = output_names.len();
        DiscrepancySpec {
            output_names: output_names.to_vec(),
            internal: InternalDiscrepancy::zero(n),
            external: ExternalDiscrepancy::zero(n),
        }
    }

    /// Pure external discrepancy in relative mode (`fraction` = 0.1 is the
    /// default 10% additional error).
    pub fn relative_external(output_names: &[String], fraction: f64) -> Self {
        let n = output_names.len();
        DiscrepancySpec {
            output_names: output_names.to_vec(),
            internal: InternalDiscrepancy::zero(n),
            external: ExternalDiscrepancy {
                mode: ExternalMode::Relative,
                scale: vec![fraction; n],
            },
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.output_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_outputs();
        if self.internal.variance.len() != n || self.external.scale.len() != n {
            return Err(Error::Discrepancy(format!(
                "variance/scale vectors must have one entry per output ({n})"
            )));
        }
        if self.internal.variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Discrepancy("internal variances must be >= 0".into()));
        }
        if self.external.scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Discrepancy("external scales must be >= 0".into()));
        }
        check_correlation(&self.internal.correlation, n)?;
        if let Some(ems) = &self.internal.variance_emulators {
            if ems.len() != n {
                return Err(Error::Discrepancy(
                    "need one variance emulator per output".into(),
                ));
            }
        }
        Ok(())
    }

    /// Internal variance per output at a point: the emulated extension when
    /// available, the pooled assessment otherwise.
    pub fn internal_variance_at(&self, point: &[f64]) -> Result<Vec<f64>> {
        match &self.internal.variance_emulators {
            Some(ems) => ems
                .iter()
                .map(|em| Ok(em.predict(point)?.mean.exp()))
                .collect(),
            None => Ok(self.internal.variance.clone()),
        }
    }

    /// Total discrepancy variance per output: internal + external².
    pub fn total_variance_at(&self, point: &[f64], output_scale: &[f64]) -> Result<Vec<f64>> {
        let internal = self.internal_variance_at(point)?;
        let ext = self.external.sd(output_scale);
        Ok(internal
            .iter()
            .zip(&ext)
            .map(|(v, s)| v + s * s)
            .collect())
    }

    /// Assembled covariance at a point: internal correlation scaled by the
    /// local internal standard deviations, plus independent external terms
    /// on the diagonal.
    pub fn covariance_at(&self, point: &[f64], output_scale: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.n_outputs();
        if output_scale.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: output_scale.len(),
                context: " (output scale)".into(),
            });
        }
        let internal = self.internal_variance_at(point)?;
        let sd: Vec<f64> = internal.iter().map(|v| v.sqrt()).collect();
        let ext = self.external.sd(output_scale);
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] = self.internal.correlation[i][j] * sd[i] * sd[j];
            }
            cov[(i, i)] += ext[i] * ext[i];
        }
        Ok(cov)
    }
}

fn identity_correlation(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn check_correlation(c: &[Vec<f64>], n: usize) -> Result<()> {
    if c.len() != n || c.iter().any(|row| row.len() != n) {
        return Err(Error::Discrepancy(format!("correlation must be {n}x{n}")));
    }
    for i in 0..n {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::Discrepancy("correlation diagonal must be 1".into()));
        }
        for j in 0..n {
            if (c[i][j] - c[j][i]).abs() > 1e-12 {
                return Err(Error::Discrepancy("correlation must be symmetric".into()));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| c[i][j]);
    let eig = m.symmetric_eigenvalues();
    if let Some(min) = eig.iter().cloned().reduce(f64::min) {
        if min < -1e-10 {
            return Err(Error::CovarianceNotPsd { min_eig: min });
        }
    }
    Ok(())
}

/// Run the perturbation experiment: at every base point, rerun the simulator
/// `plan.replicates` times with fresh perturbation draws and record how much
/// each output moves. Returns a spec with the internal part filled and a
/// zero external part.
pub fn assess_internal(
    handle: &SimulatorHandle,
    base_points: &DesignSet,
    plan: &PerturbationPlan,
) -> Result<DiscrepancySpec> {
    plan.validate()?;
    if base_points.n_runs() == 0 {
        return Err(Error::Discrepancy("no base points".into()));
    }
    let space = &base_points.space;
    let n_out = handle.n_outputs();
    let reps = plan.replicates;

    // Build every perturbed input row up front so external simulators can
    // stream them through one child process.
    let mut rows = Vec::with_capacity(base_points.n_runs() * reps);
    for (i, base) in base_points.points.iter().enumerate() {
        for j in 0..reps {
            let mut rng = seed::substream(
                plan.seed,
                "discrepancy.assess",
                (i * reps + j) as u64,
            );
            let mut row = base.clone();
            for target in &plan.targets {
                match target {
                    PerturbationTarget::Parameter { name, dist } => {
                        match space.index_of(name) {
                            Some(k) => row[k] += dist.draw(&mut rng),
                            None => row.push(dist.draw(&mut rng)),
                        }
                    }
                    PerturbationTarget::Forcing { steps, dist, .. } => {
                        for _ in 0..*steps {
                            row.push(dist.draw(&mut rng));
                        }
                    }
                    PerturbationTarget::StateNoise { dims, dist, .. } => {
                        for _ in 0..*dims {
                            row.push(dist.draw(&mut rng));
                        }
                    }
                }
            }
            rows.push(row);
        }
    }

    let outputs = simulator::evaluate_many(handle, &rows)?;

    // Per-base-point sample variances and pooled cross-products.
    let n_base = base_points.n_runs();
    let mut point_variances = Vec::with_capacity(n_base);
    let mut pooled: DMatrix<f64> = DMatrix::zeros(n_out, n_out);
    for i in 0..n_base {
        let block = &outputs[i * reps..(i + 1) * reps];
        let mean: Vec<f64> = (0..n_out)
            .map(|k| block.iter().map(|r| r[k]).sum::<f64>() / reps as f64)
            .collect();
        let mut var = vec![0.0; n_out];
        for r in block {
            for k in 0..n_out {
                let d = r[k] - mean[k];
                var[k] += d * d;
                for l in 0..n_out {
                    pooled[(k, l)] += d * (r[l] - mean[l]);
                }
            }
        }
        for v in &mut var {
            *v /= (reps - 1) as f64;
        }
        point_variances.push(var);
    }

    let variance: Vec<f64> = (0..n_out)
        .map(|k| point_variances.iter().map(|v| v[k]).sum::<f64>() / n_base as f64)
        .collect();
    let correlation: Vec<Vec<f64>> = (0..n_out)
        .map(|k| {
            (0..n_out)
                .map(|l| {
                    if k == l {
                        1.0
                    } else {
                        let denom = (pooled[(k, k)] * pooled[(l, l)]).sqrt();
                        if denom == 0.0 {
                            0.0
                        } else {
                            pooled[(k, l)] / denom
                        }
                    }
                })
                .collect()
        })
        .collect();

    let spec = DiscrepancySpec {
        output_names: handle.output_names().to_vec(),
        internal: InternalDiscrepancy {
            variance,
            correlation,
            base_points: base_points.points.clone(),
            point_variances,
            variance_emulators: None,
        },
        external: ExternalDiscrepancy::zero(n_out),
    };
    spec.validate()?;
    Ok(spec)
}

/// Extend the assessed variances over the input space by emulating their
/// logarithm; thereafter [`DiscrepancySpec::internal_variance_at`] varies
/// with the input.
pub fn emulate_internal(
    spec: &DiscrepancySpec,
    space: &InputSpace,
    basis: TrendBasis,
) -> Result<DiscrepancySpec> {
    let n_base = spec.internal.base_points.len();
    if n_base < basis.n_terms(space.n_dims()) {
        return Err(Error::Discrepancy(format!(
            "{n_base} assessed base points cannot support a {:?} trend",
            basis
        )));
    }
    let mut emulators = Vec::with_capacity(spec.n_outputs());
    for k in 0..spec.n_outputs() {
        let responses: Vec<Vec<f64>> = spec
            .internal
            .point_variances
            .iter()
            .map(|v| vec![v[k].max(LOG_VARIANCE_FLOOR).ln()])
            .collect();
        let name = format!("log_var_{}", spec.output_names[k]);
        let design = DesignSet::with_responses(
            space.clone(),
            spec.internal.base_points.clone(),
            responses,
            &[name.as_str()],
        )?;
        emulators.push(emulator::fit(&design, basis, HyperMode::MaximizeLikelihood)?);
    }
    let mut out = spec.clone();
    out.internal.variance_emulators = Some(emulators);
    Ok(out)
}

/// One zero-mean draw from the assembled discrepancy covariance at a point.
///
/// `model_output_scale` sets the magnitude that relative external error
/// multiplies (typically the emulator mean at the same point). When every
/// covariance entry is zero the draw is exact zero and the RNG is untouched,
/// so a zero-scale spec is bitwise identical to no discrepancy at all.
pub fn sample_discrepancy(
    spec: &DiscrepancySpec,
    point: &[f64],
    model_output_scale: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = spec.n_outputs();
    let cov = spec.covariance_at(point, model_output_scale)?;
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let eig = cov.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = -1e-10 * max_eig.max(1.0);
    let mut scaled = DMatrix::zeros(n, n);
    for j in 0..n {
        let lambda = eig.eigenvalues[j];
        if lambda < floor {
            return Err(Error::CovarianceNotPsd { min_eig: lambda });
        }
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] = eig.eigenvectors[(i, j)] * s;
        }
    }
    let std_normal = NormalDist::new(0.0, 1.0).expect("unit normal");
    let z = DVector::from_fn(n, |_, _| std_normal.sample(rng));
    Ok((scaled * z).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Serializable form; variance emulators embed as emulator documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscrepancyDoc {
    pub output_names: Vec<String>,
    pub internal_variance: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub base_points: Vec<Vec<f64>>,
    pub point_variances: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_emulators: Option<Vec<EmulatorDoc>>,
    pub external_mode: ExternalMode,
    pub external_scale: Vec<f64>,
}

impl From<DiscrepancySpec> for DiscrepancyDoc {
    fn from(spec: DiscrepancySpec) -> Self {
        DiscrepancyDoc {
            output_names: spec.output_names,
            internal_variance: spec.internal.variance,
            correlation: spec.internal.correlation,
            base_points: spec.internal.base_points,
            point_variances: spec.internal.point_variances,
            variance_emulators: spec
                .internal
                .variance_emulators
                .map(|ems| ems.iter().map(Emulator::to_doc).collect()),
            external_mode: spec.external.mode,
            external_scale: spec.external.scale,
        }
    }
}

impl TryFrom<DiscrepancyDoc> for DiscrepancySpec {
    type Error = Error;
    fn try_from(doc: DiscrepancyDoc) -> Result<Self> {
        let emulators = match doc.variance_emulators {
            Some(docs) => Some(
                docs.iter()
                    .map(Emulator::from_doc)
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let spec = DiscrepancySpec {
            output_names: doc.output_names,
            internal: InternalDiscrepancy {
                variance: doc.internal_variance,
                correlation: doc.correlation,
                base_points: doc.base_points,
                point_variances: doc.point_variances,
                variance_emulators: emulators,
            },
            external: ExternalDiscrepancy {
                mode: doc.external_mode,
                scale: doc.external_scale,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl DiscrepancySpec {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::doc(path.display().to_string(), e.to_string()))?;
        crate::report::write_atomic(path, &(text + "\n"))
    }

    pub fn load(path: &std::path::Path) -> Result<DiscrepancySpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::doc(path.display().to_string(), e.to_string()))
    }
}
