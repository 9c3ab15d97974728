//! Emulators: a global polynomial trend plus a local squared-exponential
//! residual process, fitted to simulator runs by generalized least squares.
//!
//! An emulator answers `predict(x) -> (mean, variance)` cheaply anywhere in
//! the input space. At design points a nugget-free emulator interpolates the
//! stored responses exactly; far from all design points the prediction
//! relaxes to the fitted trend with the full prior residual variance plus
//! trend-estimation inflation.
//!
//! Inputs are standardized to [-1, 1] per dimension before any kernel or
//! basis evaluation; correlation lengths are expressed in those units.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{Error, Result};
use crate::space::InputSpace;

/// Polynomial family for the global trend, over standardized inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendBasis {
    Constant,
    Linear,
    Quadratic,
}

impl TrendBasis {
    pub fn n_terms(&self, n_dims: usize) -> usize {
        match self {
            TrendBasis::Constant => 1,
            TrendBasis::Linear => 1 + n_dims,
            TrendBasis::Quadratic => 1 + 2 * n_dims + n_dims * (n_dims - 1) / 2,
        }
    }

    /// Basis row at a standardized point: 1, x_i, x_i^2, x_i*x_j (i<j).
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut row = vec![1.0];
        if matches!(self, TrendBasis::Linear | TrendBasis::Quadratic) {
            row.extend_from_slice(x);
        }
        if matches!(self, TrendBasis::Quadratic) {
            row.extend(x.iter().map(|v| v * v));
            for i in 0..x.len() {
                for j in i + 1..x.len() {
                    row.push(x[i] * x[j]);
                }
            }
        }
        row
    }
}

impl std::str::FromStr for TrendBasis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(TrendBasis::Constant),
            "linear" => Ok(TrendBasis::Linear),
            "quadratic" => Ok(TrendBasis::Quadratic),
            other => Err(Error::FitFailed(format!("unknown trend basis `{other}`"))),
        }
    }
}

/// Fitted global trend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendSpec {
    pub basis: TrendBasis,
    pub coefficients: Vec<f64>,
}

/// Hyperparameters of the squared-exponential residual process:
/// cov(x, x') = variance * exp(-sum_k ((x_k - x'_k) / length_k)^2), plus
/// `nugget` (absolute variance units) on the design diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualProcessSpec {
    pub variance: f64,
    pub correlation_lengths: Vec<f64>,
    pub nugget: f64,
}

impl ResidualProcessSpec {
    pub fn validate(&self, n_dims: usize) -> Result<()> {
        if !(self.variance >= 0.0) {
            return Err(Error::FitFailed(format!(
                "residual variance must be >= 0, got {}",
                self.variance
            )));
        }
        if self.correlation_lengths.len() != n_dims {
            return Err(Error::DimensionMismatch {
                expected: n_dims,
                got: self.correlation_lengths.len(),
                context: " (correlation lengths)".into(),
            });
        }
        if self.correlation_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::FitFailed("correlation lengths must be > 0".into()));
        }
        if !(self.nugget >= 0.0) {
            return Err(Error::FitFailed("nugget must be >= 0".into()));
        }
        Ok(())
    }

    /// Fixed-mode defaults that also seed the likelihood search: unit
    /// correlation lengths, residual variance from the ordinary
    /// least-squares trend residuals, relative nugget 1e-8.
    pub fn default_for(design: &DesignSet, basis: TrendBasis) -> Result<Self> {
        let (points_std, y) = standardized_design(design)?;
        let n = y.len();
        let d = design.space.n_dims();
        let f = basis_matrix(&points_std, basis);
        let variance = ols_residual_variance(&f, &y).unwrap_or_else(|| {
            let mean = y.iter().sum::<f64>() / n as f64;
            y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        });
        Ok(ResidualProcessSpec {
            variance,
            correlation_lengths: vec![1.0; d],
            nugget: RELATIVE_NUGGET * variance,
        })
    }
}

/// How residual hyperparameters are chosen during [`fit`].
#[derive(Debug, Clone)]
pub enum HyperMode {
    Fixed(ResidualProcessSpec),
    MaximizeLikelihood,
}

/// Default relative nugget applied in likelihood mode.
pub const RELATIVE_NUGGET: f64 = 1e-8;

/// Linear-autoregressive link to a coarser emulator: the fine trend is
/// rho * coarse_mean(x) + polynomial correction.
#[derive(Debug, Clone)]
pub struct MultilevelLink {
    pub coarse: Box<Emulator>,
    pub rho: f64,
    /// When true, rho was estimated jointly with the correction and its
    /// estimation uncertainty enters the predictive variance.
    pub rho_estimated: bool,
}

/// Prediction at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// Point lies outside the design's input-space bounds.
    pub extrapolated: bool,
}

/// A fitted emulator. Immutable after construction; safe to share across
/// threads for concurrent prediction provided each caller owns its RNG.
#[derive(Debug, Clone)]
pub struct Emulator {
    space: InputSpace,
    output_name: String,
    trend: TrendSpec,
    residual: ResidualProcessSpec,
    link: Option<MultilevelLink>,
    points: Vec<Vec<f64>>,
    responses: Vec<f64>,
    state: SolveState,
}

/// Cached factorization products, recomputed on load.
#[derive(Debug, Clone)]
enum SolveState {
    /// variance == 0: pure regression, zero predictive variance.
    Degenerate,
    Kriging {
        points_std: DMatrix<f64>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        /// K^-1 (y - F c), F including every estimated basis column.
        weights: DVector<f64>,
        /// (F^T K^-1 F)^-1.
        beta_cov: DMatrix<f64>,
        /// K^-1 F.
        kinv_f: DMatrix<f64>,
    },
}

impl Emulator {
    pub fn space(&self) -> &InputSpace {
        &self.space
    }

    pub fn output_name(&self) -> &str {
        &self.output_name
    }

    pub fn trend(&self) -> &TrendSpec {
        &self.trend
    }

    pub fn residual(&self) -> &ResidualProcessSpec {
        &self.residual
    }

    pub fn link(&self) -> Option<&MultilevelLink> {
        self.link.as_ref()
    }

    pub fn design_points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn design_responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn n_runs(&self) -> usize {
        self.points.len()
    }

    /// Trend value alone (global part, including any multilevel link).
    pub fn trend_mean(&self, point: &[f64]) -> Result<f64> {
        let x = self.space.standardize(point)?;
        let f = self.estimated_basis_row(point, &x)?;
        let c = DVector::from_column_slice(&self.trend_coefficient_vector());
        Ok(self.fixed_offset(point)? + DVector::from_vec(f).dot(&c))
    }

    /// Predictive mean and variance at a point. Extrapolation beyond the
    /// design bounds is permitted and flagged.
    pub fn predict(&self, point: &[f64]) -> Result<Prediction> {
        let x = self.space.standardize(point)?;
        let extrapolated = !self.space.contains(point)?;
        let f = self.estimated_basis_row(point, &x)?;
        let coeffs = DVector::from_vec(self.trend_coefficient_vector());
        let offset = self.fixed_offset(point)?;
        match &self.state {
            SolveState::Degenerate => Ok(Prediction {
                mean: offset + DVector::from_vec(f).dot(&coeffs),
                variance: 0.0,
                extrapolated,
            }),
            SolveState::Kriging {
                points_std,
                chol,
                weights,
                beta_cov,
                kinv_f,
            } => {
                let sigma2 = self.residual.variance;
                let n = points_std.nrows();
                let kx = DVector::from_fn(n, |i, _| {
                    sigma2
                        * sq_exp_correlation_iter(
                            &x,
                            points_std.row(i).iter().copied(),
                            &self.residual.correlation_lengths,
                        )
                });
                let fvec = DVector::from_vec(f);
                let mean = offset + fvec.dot(&coeffs) + kx.dot(weights);
                let explained = kx.dot(&chol.solve(&kx));
                let u = &fvec - kinv_f.transpose() * &kx;
                let inflation = u.dot(&(beta_cov * &u));
                let raw = sigma2 - explained + inflation;
                let tolerance = 1e-10 * sigma2.max(1.0);
                if raw < -tolerance {
                    return Err(Error::NegativeVariance { value: raw });
                }
                Ok(Prediction {
                    mean,
                    variance: raw.max(0.0),
                    extrapolated,
                })
            }
        }
    }

    /// One draw from Normal(mean, variance) of [`predict`](Self::predict).
    pub fn sample(&self, point: &[f64], rng: &mut impl Rng) -> Result<f64> {
        let p = self.predict(point)?;
        if p.variance > 0.0 {
            let normal = Normal::new(p.mean, p.variance.sqrt())
                .map_err(|e| Error::FitFailed(format!("sampling distribution: {e}")))?;
            Ok(normal.sample(rng))
        } else {
            Ok(p.mean)
        }
    }

    fn trend_coefficient_vector(&self) -> Vec<f64> {
        match &self.link {
            Some(link) if link.rho_estimated => {
                let mut c = vec![link.rho];
                c.extend_from_slice(&self.trend.coefficients);
                c
            }
            _ => self.trend.coefficients.clone(),
        }
    }

    /// Basis row of the columns whose coefficients were estimated.
    fn estimated_basis_row(&self, native: &[f64], x_std: &[f64]) -> Result<Vec<f64>> {
        let mut row = Vec::new();
        if let Some(link) = &self.link {
            if link.rho_estimated {
                row.push(link.coarse.predict(native)?.mean);
            }
        }
        row.extend(self.trend.basis.eval(x_std));
        Ok(row)
    }

    /// Contribution of a forced (not estimated) multilevel coefficient.
    fn fixed_offset(&self, native: &[f64]) -> Result<f64> {
        match &self.link {
            Some(link) if !link.rho_estimated => {
                Ok(link.rho * link.coarse.predict(native)?.mean)
            }
            _ => Ok(0.0),
        }
    }
}

/// Fit an emulator to a single-output design.
pub fn fit(design: &DesignSet, basis: TrendBasis, mode: HyperMode) -> Result<Emulator> {
    fit_linked(design, basis, mode, None)
}

/// Fit a fine-model emulator whose trend borrows a coarse-model emulator
/// through a linear-autoregressive link. With `force_rho = Some(0.0)` this
/// reduces to a plain fit on the fine design.
pub fn fit_multilevel(
    coarse_design: &DesignSet,
    fine_design: &DesignSet,
    basis: TrendBasis,
    mode: HyperMode,
    force_rho: Option<f64>,
) -> Result<Emulator> {
    if coarse_design.space != fine_design.space {
        return Err(Error::FitFailed(
            "coarse and fine designs must share an input space".into(),
        ));
    }
    let coarse = fit(coarse_design, basis, mode.clone())?;
    match force_rho {
        Some(rho) if rho == 0.0 => fit_linked(fine_design, basis, mode, None),
        Some(rho) => fit_linked(
            fine_design,
            basis,
            mode,
            Some(MultilevelLink {
                coarse: Box::new(coarse),
                rho,
                rho_estimated: false,
            }),
        ),
        None => fit_linked(
            fine_design,
            basis,
            mode,
            Some(MultilevelLink {
                coarse: Box::new(coarse),
                rho: f64::NAN, // estimated below
                rho_estimated: true,
            }),
        ),
    }
}

fn fit_linked(
    design: &DesignSet,
    basis: TrendBasis,
    mode: HyperMode,
    link: Option<MultilevelLink>,
) -> Result<Emulator> {
    if !design.has_responses() {
        return Err(Error::FitFailed("design has no responses".into()));
    }
    let y_native = design.single_responses()?;
    let d = design.space.n_dims();
    let (points_std, _) = standardized_design(design)?;
    let n = design.n_runs();

    // Forced-rho links move the coarse contribution into a fixed offset on
    // the responses; estimated links add a basis column.
    let (offsets, extra_col) = match &link {
        Some(l) if !l.rho_estimated => {
            let mut off = Vec::with_capacity(n);
            for p in &design.points {
                off.push(l.rho * l.coarse.predict(p)?.mean);
            }
            (off, None)
        }
        Some(l) => {
            let mut col = Vec::with_capacity(n);
            for p in &design.points {
                col.push(l.coarse.predict(p)?.mean);
            }
            (vec![0.0; n], Some(col))
        }
        None => (vec![0.0; n], None),
    };
    let y = DVector::from_iterator(n, y_native.iter().zip(&offsets).map(|(v, o)| v - o));

    let p_terms = basis.n_terms(d) + usize::from(extra_col.is_some());
    if n < p_terms {
        return Err(Error::FitFailed(format!(
            "{n} runs cannot identify {p_terms} trend coefficients"
        )));
    }
    let f = full_basis_matrix(&points_std, basis, extra_col.as_deref());

    let residual = match mode {
        HyperMode::Fixed(spec) => {
            spec.validate(d)?;
            spec
        }
        HyperMode::MaximizeLikelihood => maximize_likelihood(&points_std, &y, &f)?,
    };

    let (state, coeffs) = solve(&points_std, &y, &f, &residual)?;
    let (rho_hat, trend_coeffs) = match (&link, extra_col.is_some()) {
        (Some(_), true) => (Some(coeffs[0]), coeffs[1..].to_vec()),
        _ => (None, coeffs.clone()),
    };
    let link = link.map(|mut l| {
        if let Some(r) = rho_hat {
            l.rho = r;
        }
        l
    });

    let em = Emulator {
        space: design.space.clone(),
        output_name: design
            .output_names
            .first()
            .cloned()
            .unwrap_or_else(|| "y".to_string()),
        trend: TrendSpec {
            basis,
            coefficients: trend_coeffs,
        },
        residual,
        link,
        points: design.points.clone(),
        responses: y_native,
        state,
    };
    check_interpolation(&em)?;
    Ok(em)
}

/// With a zero nugget the fitted emulator must reproduce its own training
/// responses; failure indicates a conditioning problem.
fn check_interpolation(em: &Emulator) -> Result<()> {
    if em.residual.nugget != 0.0 {
        return Ok(());
    }
    let scale = em
        .responses
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1.0);
    for (p, y) in em.points.iter().zip(&em.responses) {
        let m = em.predict(p)?.mean;
        if (m - y).abs() > 1e-8 * scale {
            return Err(Error::FitFailed(format!(
                "nugget-free fit fails to interpolate (|{m} - {y}| > 1e-8 relative); \
                 the kernel matrix is too ill-conditioned, consider a nugget"
            )));
        }
    }
    Ok(())
}

fn standardized_design(design: &DesignSet) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = design.n_runs();
    let d = design.space.n_dims();
    let mut m = DMatrix::zeros(n, d);
    for (i, p) in design.points.iter().enumerate() {
        let s = design.space.standardize(p)?;
        for (j, v) in s.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    let y = if design.has_responses() {
        design.single_responses()?
    } else {
        Vec::new()
    };
    Ok((m, y))
}

fn basis_matrix(points_std: &DMatrix<f64>, basis: TrendBasis) -> DMatrix<f64> {
    full_basis_matrix(points_std, basis, None)
}

fn full_basis_matrix(
    points_std: &DMatrix<f64>,
    basis: TrendBasis,
    extra_col: Option<&[f64]>,
) -> DMatrix<f64> {
    let n = points_std.nrows();
    let p = basis.n_terms(points_std.ncols()) + usize::from(extra_col.is_some());
    let mut f = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut j = 0;
        if let Some(col) = extra_col {
            f[(i, 0)] = col[i];
            j = 1;
        }
        let x: Vec<f64> = points_std.row(i).iter().copied().collect();
        for v in basis.eval(&x) {
            f[(i, j)] = v;
            j += 1;
        }
    }
    f
}

fn ols_residual_variance(f: &DMatrix<f64>, y: &[f64]) -> Option<f64> {
    let yv = DVector::from_column_slice(y);
    let ftf = f.transpose() * f;
    let chol = nalgebra::Cholesky::new(ftf)?;
    let beta = chol.solve(&(f.transpose() * &yv));
    let r = &yv - f * beta;
    let n = y.len();
    Some(r.dot(&r) / n as f64)
}

pub fn sq_exp_correlation(a: &[f64], b: &[f64], lengths: &[f64]) -> f64 {
    sq_exp_correlation_iter(a, b.iter().copied(), lengths)
}

/// Same kernel against a non-contiguous row view (matrix rows are strided,
/// so they can't be borrowed as slices).
fn sq_exp_correlation_iter(
    a: &[f64],
    b: impl Iterator<Item = f64>,
    lengths: &[f64],
) -> f64 {
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(lengths) {
        let t = (x - y) / l;
        s += t * t;
    }
    (-s).exp()
}

fn correlation_matrix(points_std: &DMatrix<f64>, lengths: &[f64]) -> DMatrix<f64> {
    let n = points_std.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            let xi: Vec<f64> = points_std.row(i).iter().copied().collect();
            sq_exp_correlation_iter(&xi, points_std.row(j).iter().copied(), lengths)
        }
    })
}

/// Nugget escalation ladder applied when the kernel factorization fails.
const NUGGET_LADDER: [f64; 4] = [1e-8, 1e-6, 1e-4, 1e-2];

/// Solve the generalized-least-squares system for fixed hyperparameters,
/// returning the cached state and the estimated coefficients.
fn solve(
    points_std: &DMatrix<f64>,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    residual: &ResidualProcessSpec,
) -> Result<(SolveState, Vec<f64>)> {
    if residual.variance == 0.0 {
        // Pure regression: ordinary least squares, zero predictive variance.
        let ftf = f.transpose() * f;
        let chol = nalgebra::Cholesky::new(ftf).ok_or_else(|| {
            Error::RankDeficientBasis("F^T F is singular in the zero-variance fit".into())
        })?;
        let coeffs = chol.solve(&(f.transpose() * y));
        return Ok((SolveState::Degenerate, coeffs.iter().copied().collect()));
    }

    let sigma2 = residual.variance;
    let r = correlation_matrix(points_std, &residual.correlation_lengths);
    let n = points_std.nrows();
    let mut nugget = residual.nugget;
    let mut attempt = 0usize;
    let chol = loop {
        let mut k = &r * sigma2;
        for i in 0..n {
            k[(i, i)] += nugget;
        }
        match nalgebra::Cholesky::new(k) {
            Some(c) => break c,
            None => {
                // Raise the nugget along the ladder before giving up.
                let next = NUGGET_LADDER
                    .iter()
                    .map(|rel| rel * sigma2)
                    .find(|cand| *cand > nugget);
                match next {
                    Some(cand) if attempt < NUGGET_LADDER.len() => {
                        log::warn!(
                            "kernel factorization failed at nugget {nugget}; retrying with {cand}"
                        );
                        nugget = cand;
                        attempt += 1;
                    }
                    _ => {
                        return Err(Error::KernelNotPositiveDefinite(format!(
                            "after raising nugget to {nugget} (variance {sigma2}, n {n})"
                        )))
                    }
                }
            }
        }
    };

    let kinv_f = chol.solve(f);
    let a = f.transpose() * &kinv_f;
    let a_chol = nalgebra::Cholesky::new(a).ok_or_else(|| {
        Error::RankDeficientBasis(format!(
            "F^T K^-1 F is singular ({} basis columns, {} runs)",
            f.ncols(),
            n
        ))
    })?;
    let coeffs = a_chol.solve(&(kinv_f.transpose() * y));
    let resid = y - f * &coeffs;
    let weights = chol.solve(&resid);
    let beta_cov = a_chol.inverse();
    Ok((
        SolveState::Kriging {
            points_std: points_std.clone(),
            chol,
            weights,
            beta_cov,
            kinv_f,
        },
        coeffs.iter().copied().collect(),
    ))
}

/// Profile log-likelihood objective used by the hyperparameter search:
/// -(n ln sigma_hat^2 + ln det(R + eps I)) / 2, with sigma^2 and the trend
/// coefficients profiled out analytically.
fn profile_objective(
    points_std: &DMatrix<f64>,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    lengths: &[f64],
) -> Option<(f64, f64)> {
    let n = points_std.nrows();
    let mut r = correlation_matrix(points_std, lengths);
    for i in 0..n {
        r[(i, i)] += RELATIVE_NUGGET;
    }
    let chol = nalgebra::Cholesky::new(r)?;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let rinv_f = chol.solve(f);
    let a = f.transpose() * &rinv_f;
    let a_chol = nalgebra::Cholesky::new(a)?;
    let beta = a_chol.solve(&(rinv_f.transpose() * y));
    let resid = y - f * beta;
    let q = resid.dot(&chol.solve(&resid));
    let sigma2 = (q / n as f64).max(0.0);
    if sigma2 == 0.0 {
        return Some((f64::INFINITY, 0.0));
    }
    Some((-0.5 * (n as f64 * sigma2.ln() + log_det), sigma2))
}

const LENGTH_GRID_MIN: f64 = 0.05;
const LENGTH_GRID_MAX: f64 = 20.0;
const LENGTH_GRID_POINTS: usize = 17;
const SEARCH_SWEEPS: usize = 3;

fn length_grid() -> Vec<f64> {
    let lo = LENGTH_GRID_MIN.ln();
    let hi = LENGTH_GRID_MAX.ln();
    (0..LENGTH_GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / (LENGTH_GRID_POINTS - 1) as f64).exp())
        .collect()
}

/// Coordinate descent over a log-spaced grid of correlation lengths,
/// seeded at the fixed-mode defaults, with sigma^2 profiled analytically.
/// The returned hyperparameters never score below the seed.
fn maximize_likelihood(
    points_std: &DMatrix<f64>,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
) -> Result<ResidualProcessSpec> {
    let d = points_std.ncols();
    let mut lengths = vec![1.0; d];
    let (mut best_obj, mut best_sigma2) = profile_objective(points_std, y, f, &lengths)
        .ok_or_else(|| {
            Error::KernelNotPositiveDefinite("at the default correlation lengths".into())
        })?;
    let grid = length_grid();
    if best_obj.is_finite() {
        'sweeps: for _ in 0..SEARCH_SWEEPS {
            let mut improved = false;
            for axis in 0..d {
                let mut best_here = lengths[axis];
                for cand in &grid {
                    if *cand == best_here {
                        continue;
                    }
                    lengths[axis] = *cand;
                    if let Some((obj, sigma2)) = profile_objective(points_std, y, f, &lengths) {
                        if obj > best_obj {
                            best_obj = obj;
                            best_sigma2 = sigma2;
                            best_here = *cand;
                            improved = true;
                            if !obj.is_finite() {
                                break 'sweeps;
                            }
                        }
                    }
                    lengths[axis] = best_here;
                }
            }
            if !improved {
                break;
            }
        }
    }
    Ok(ResidualProcessSpec {
        variance: best_sigma2,
        correlation_lengths: lengths,
        nugget: RELATIVE_NUGGET * best_sigma2,
    })
}

/// Gaussian log marginal likelihood of the design responses under fixed
/// hyperparameters, with the trend coefficients at their generalized
/// least-squares values.
pub fn log_marginal_likelihood(
    design: &DesignSet,
    basis: TrendBasis,
    residual: &ResidualProcessSpec,
) -> Result<f64> {
    let (points_std, y_native) = standardized_design(design)?;
    let y = DVector::from_column_slice(&y_native);
    let f = basis_matrix(&points_std, basis);
    let n = y.len();
    residual.validate(points_std.ncols())?;
    if residual.variance == 0.0 {
        let ftf = f.transpose() * &f;
        let chol = nalgebra::Cholesky::new(ftf)
            .ok_or_else(|| Error::RankDeficientBasis("F^T F singular".into()))?;
        let beta = chol.solve(&(f.transpose() * &y));
        let r = &y - &f * beta;
        return Ok(if r.norm() == 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        });
    }
    let mut k = correlation_matrix(&points_std, &residual.correlation_lengths) * residual.variance;
    for i in 0..n {
        k[(i, i)] += residual.nugget;
    }
    let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
        Error::KernelNotPositiveDefinite("in log_marginal_likelihood".into())
    })?;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kinv_f = chol.solve(&f);
    let a = f.transpose() * &kinv_f;
    let a_chol = nalgebra::Cholesky::new(a)
        .ok_or_else(|| Error::RankDeficientBasis("F^T K^-1 F singular".into()))?;
    let beta = a_chol.solve(&(kinv_f.transpose() * &y));
    let resid = &y - &f * beta;
    let q = resid.dot(&chol.solve(&resid));
    Ok(-0.5 * (q + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Per-point leave-one-out diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Standardized error (held-out y - mean) / sqrt(variance) per design
    /// point; NaN where the leave-one-out variance degenerated.
    pub standardized_errors: Vec<f64>,
    /// Indices whose leave-one-out variance was <= 0.
    pub degenerate_points: Vec<usize>,
    pub within_two: f64,
    pub within_three: f64,
}

/// Leave-one-out validation: refit without each design point (holding the
/// residual hyperparameters fixed) and standardize the held-out error.
pub fn validate_loo(em: &Emulator) -> Result<ValidationReport> {
    let n = em.points.len();
    let p = em.trend.basis.n_terms(em.space.n_dims())
        + em.link.as_ref().map_or(0, |l| usize::from(l.rho_estimated));
    if n < p + 2 {
        return Err(Error::FitFailed(format!(
            "leave-one-out needs at least {} runs, have {n}",
            p + 2
        )));
    }
    let mut errors = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let mut points = em.points.clone();
        let mut responses = em.responses.clone();
        let held_point = points.remove(i);
        let held_y = responses.remove(i);
        let sub = DesignSet::with_responses(
            em.space.clone(),
            points,
            responses.iter().map(|v| vec![*v]).collect(),
            &[em.output_name.as_str()],
        )?;
        let refit = fit_linked(
            &sub,
            em.trend.basis,
            HyperMode::Fixed(em.residual.clone()),
            em.link.clone(),
        )?;
        let pred = refit.predict(&held_point)?;
        if pred.variance <= 0.0 {
            degenerate.push(i);
            errors.push(f64::NAN);
        } else {
            errors.push((held_y - pred.mean) / pred.variance.sqrt());
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

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub const EMULATOR_FORMAT_VERSION: u32 = 1;

/// Serializable emulator document. Factorizations are recomputed on load
/// from the embedded design and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmulatorDoc {
    pub format_version: u32,
    pub output_name: String,
    pub space: InputSpace,
    pub trend: TrendSpec,
    pub residual: ResidualProcessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multilevel: Option<MultilevelDoc>,
    pub design_points: Vec<Vec<f64>>,
    pub design_responses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultilevelDoc {
    pub rho: f64,
    pub rho_estimated: bool,
    pub coarse: Box<EmulatorDoc>,
}

impl Emulator {
    pub fn to_doc(&self) -> EmulatorDoc {
        EmulatorDoc {
            format_version: EMULATOR_FORMAT_VERSION,
            output_name: self.output_name.clone(),
            space: self.space.clone(),
            trend: self.trend.clone(),
            residual: self.residual.clone(),
            multilevel: self.link.as_ref().map(|l| MultilevelDoc {
                rho: l.rho,
                rho_estimated: l.rho_estimated,
                coarse: Box::new(l.coarse.to_doc()),
            }),
            design_points: self.points.clone(),
            design_responses: self.responses.clone(),
        }
    }

    pub fn from_doc(doc: &EmulatorDoc) -> Result<Emulator> {
        if doc.format_version != EMULATOR_FORMAT_VERSION {
            return Err(Error::doc(
                "emulator document",
                format!("unsupported format_version {}", doc.format_version),
            ));
        }
        doc.space.validate()?;
        let link = match &doc.multilevel {
            Some(m) => Some(MultilevelLink {
                coarse: Box::new(Emulator::from_doc(&m.coarse)?),
                rho: m.rho,
                rho_estimated: m.rho_estimated,
            }),
            None => None,
        };
        let n = doc.design_points.len();
        if doc.design_responses.len() != n {
            return Err(Error::doc(
                "emulator document",
                format!("{n} points but {} responses", doc.design_responses.len()),
            ));
        }
        // Rebuild the factorization around the stored coefficients.
        let mut points_std = DMatrix::zeros(n, doc.space.n_dims());
        for (i, p) in doc.design_points.iter().enumerate() {
            for (j, v) in doc.space.standardize(p)?.iter().enumerate() {
                points_std[(i, j)] = *v;
            }
        }
        let (offsets, extra_col) = match &link {
            Some(l) if !l.rho_estimated => {
                let mut off = Vec::with_capacity(n);
                for p in &doc.design_points {
                    off.push(l.rho * l.coarse.predict(p)?.mean);
                }
                (off, None)
            }
            Some(l) => {
                let mut col = Vec::with_capacity(n);
                for p in &doc.design_points {
                    col.push(l.coarse.predict(p)?.mean);
                }
                (vec![0.0; n], Some(col))
            }
            None => (vec![0.0; n], None),
        };
        let y = DVector::from_iterator(
            n,
            doc.design_responses.iter().zip(&offsets).map(|(v, o)| v - o),
        );
        let f = full_basis_matrix(&points_std, doc.trend.basis, extra_col.as_deref());
        doc.residual.validate(doc.space.n_dims())?;

        let state = if doc.residual.variance == 0.0 {
            SolveState::Degenerate
        } else {
            let mut coeffs = Vec::new();
            if let Some(l) = &link {
                if l.rho_estimated {
                    coeffs.push(l.rho);
                }
            }
            coeffs.extend_from_slice(&doc.trend.coefficients);
            if coeffs.len() != f.ncols() {
                return Err(Error::doc(
                    "emulator document",
                    format!(
                        "{} trend coefficients for {} basis columns",
                        coeffs.len(),
                        f.ncols()
                    ),
                ));
            }
            let sigma2 = doc.residual.variance;
            let mut k =
                correlation_matrix(&points_std, &doc.residual.correlation_lengths) * sigma2;
            for i in 0..n {
                k[(i, i)] += doc.residual.nugget;
            }
            let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
                Error::KernelNotPositiveDefinite("while reloading emulator document".into())
            })?;
            let kinv_f = chol.solve(&f);
            let a = f.transpose() * &kinv_f;
            let a_chol = nalgebra::Cholesky::new(a).ok_or_else(|| {
                Error::RankDeficientBasis("while reloading emulator document".into())
            })?;
            let cvec = DVector::from_column_slice(&coeffs);
            let resid = &y - &f * &cvec;
            SolveState::Kriging {
                weights: chol.solve(&resid),
                beta_cov: a_chol.inverse(),
                kinv_f,
                chol,
                points_std,
            }
        };

        Ok(Emulator {
            space: doc.space.clone(),
            output_name: doc.output_name.clone(),
            trend: doc.trend.clone(),
            residual: doc.residual.clone(),
            link,
            points: doc.design_points.clone(),
            responses: doc.design_responses.clone(),
            state,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_doc())
            .map_err(|e| Error::doc(path.display().to_string(), e.to_string()))?;
        crate::report::write_atomic(path, &(text + "\n"))
    }

    pub fn load(path: &std::path::Path) -> Result<Emulator> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let doc: EmulatorDoc = serde_json::from_str(&text)
            .map_err(|e| Error::doc(path.display().to_string(), e.to_string()))?;
        Emulator::from_doc(&doc)
    }
}
