//! A single `(r, F, Z)` GLM for a categorical response: prediction,
//! log-likelihood, score, expected information and Fisher scoring.
//!
//! The score of one observation is assembled as
//!
//! ```text
//! ∂l/∂β = Zᵗ · diag(f(η)) · (∂π/∂r)ᵗ · Cov(Y|x)⁻¹ · (y − π)
//! ```
//!
//! where only the first three factors depend on the triplet. The expected
//! information replaces `(y−π)(y−π)ᵗ` by `Cov(Y|x)` in the same sandwich.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::design::{build_design, CovariateRow, DesignSpec, ParameterVector};
use crate::error::{Error, Result};
use crate::link::{
    inverse_from_pairs, jacobian_from_probs, ratio_forward, CdfKind, ProbabilityVector, RatioKind,
};

/// Probabilities are floored at this value inside log-likelihoods only.
pub const LOG_FLOOR: f64 = 1e-12;

/// One `(r, F, Z)` triplet for a response with `n_categories` categories.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlmSpec {
    pub ratio: RatioKind,
    pub cdf: CdfKind,
    pub design: DesignSpec,
    pub n_categories: usize,
}

impl GlmSpec {
    pub fn new(
        ratio: RatioKind,
        cdf: CdfKind,
        design: DesignSpec,
        n_categories: usize,
    ) -> Result<Self> {
        let spec = Self {
            ratio,
            cdf,
            design,
            n_categories,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The canonical (reference, logistic, complete) model.
    pub fn canonical(variables: Vec<usize>, n_categories: usize) -> Result<Self> {
        Self::new(
            RatioKind::Reference,
            CdfKind::Logistic,
            DesignSpec::complete(variables),
            n_categories,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.cdf.validate()?;
        self.design.validate(self.n_categories, None)
    }

    pub fn n_params(&self) -> usize {
        self.design.column_count(self.n_categories)
    }

    pub fn is_canonical(&self) -> bool {
        self.ratio == RatioKind::Reference && self.cdf == CdfKind::Logistic
    }

    pub fn with_cdf(&self, cdf: CdfKind) -> Self {
        Self {
            cdf,
            ..self.clone()
        }
    }

    /// `π = r⁻¹(F(η))`, all `J` probabilities, without validation.
    pub(crate) fn probs_from_eta(&self, eta: &[f64]) -> Result<Vec<f64>> {
        let f: Vec<f64> = eta.iter().map(|&e| self.cdf.cdf(e)).collect();
        let s: Vec<f64> = eta.iter().map(|&e| self.cdf.sf(e)).collect();
        if self.ratio == RatioKind::Cumulative {
            if let Some(j) = eta.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::prediction(format!(
                    "cumulative predictors not increasing: eta_{} = {} >= eta_{} = {}",
                    j + 1,
                    eta[j],
                    j + 2,
                    eta[j + 1]
                )));
            }
        }
        if eta.iter().any(|e| e.is_nan()) {
            return Err(Error::numerical("NaN linear predictor"));
        }
        inverse_from_pairs(&f, &s, self.ratio)
    }
}

/// Name and design columns of one explanatory variable. A categorical
/// variable spans several dummy columns but is selected as a unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableGroup {
    pub name: String,
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: CovariateRow,
    /// Category index in `1..=J`.
    pub response: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDataset {
    pub n_categories: usize,
    pub rows: Vec<Observation>,
    /// One name per covariate column.
    pub column_names: Vec<String>,
    pub variables: Vec<VariableGroup>,
}

impl CategoricalDataset {
    /// Dataset where every covariate column is its own variable, named
    /// `x1, x2, …`.
    pub fn new(n_categories: usize, rows: Vec<Observation>) -> Result<Self> {
        let p = rows.first().map(|r| r.x.dim()).unwrap_or(0);
        let column_names: Vec<String> = (1..=p).map(|k| format!("x{k}")).collect();
        let variables = column_names
            .iter()
            .enumerate()
            .map(|(k, n)| VariableGroup {
                name: n.clone(),
                columns: vec![k],
            })
            .collect();
        let ds = Self {
            n_categories,
            rows,
            column_names,
            variables,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_triples(n_categories: usize, rows: Vec<(Vec<f64>, usize, f64)>) -> Result<Self> {
        Self::new(
            n_categories,
            rows.into_iter()
                .map(|(x, response, weight)| Observation {
                    x: CovariateRow::new(x),
                    response,
                    weight,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::Spec("dataset needs at least 2 categories".into()));
        }
        let p = self.column_names.len();
        for (i, r) in self.rows.iter().enumerate() {
            if r.response == 0 || r.response > self.n_categories {
                return Err(Error::Spec(format!(
                    "row {i}: response {} outside 1..={}",
                    r.response, self.n_categories
                )));
            }
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::Spec(format!(
                    "row {i}: weight {} is not positive",
                    r.weight
                )));
            }
            if r.x.dim() != p {
                return Err(Error::Spec(format!(
                    "row {i}: {} covariates, expected {p}",
                    r.x.dim()
                )));
            }
            if r.x.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!("row {i}: non-finite covariate")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.rows.iter().map(|r| r.weight).sum()
    }

    /// Weighted response counts per category.
    pub fn category_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_categories];
        for r in &self.rows {
            counts[r.response - 1] += r.weight;
        }
        counts
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Design columns for a list of variable names.
    pub fn columns_for(&self, names: &[String]) -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        for n in names {
            let idx = self
                .variable_index(n)
                .ok_or_else(|| Error::Spec(format!("unknown variable '{n}'")))?;
            cols.extend(self.variables[idx].columns.iter().copied());
        }
        Ok(cols)
    }

    /// Same rows with the response relabelled through `map` (entries are
    /// 1-based new labels, or 0 to drop the row).
    pub fn relabel(&self, map: &[usize], n_categories: usize) -> CategoricalDataset {
        CategoricalDataset {
            n_categories,
            rows: self
                .rows
                .iter()
                .filter(|r| map[r.response - 1] != 0)
                .map(|r| Observation {
                    x: r.x.clone(),
                    response: map[r.response - 1],
                    weight: r.weight,
                })
                .collect(),
            column_names: self.column_names.clone(),
            variables: self.variables.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub ll_tol: f64,
    pub start: Option<ParameterVector>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-6,
            ll_tol: 1e-10,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: ParameterVector,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// True iff the max-norm of the score is below the gradient tolerance.
    pub converged: bool,
    pub score_norm: f64,
    pub fisher_information: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
    pub diagnostics: Vec<String>,
}

impl FitResult {
    pub fn n_params(&self) -> usize {
        self.beta.len()
    }
}

/// `π(x) = r⁻¹(F(Z(x)β))`.
pub fn predict_probs(
    spec: &GlmSpec,
    beta: &ParameterVector,
    x: &CovariateRow,
) -> Result<ProbabilityVector> {
    let z = build_design(x, &spec.design, spec.n_categories)?;
    let eta = crate::design::linear_predictor(&z, beta)?;
    spec.probs_from_eta(eta.as_slice())
        .map(ProbabilityVector::from_raw)
        .map_err(|e| match e {
            Error::PredictionDomain { message, .. } => {
                Error::prediction(format!("{message} at x = {:?}", x.values))
            }
            other => other,
        })
}

/// Pre-built design matrices for every row of a dataset.
pub(crate) struct Designs(Vec<DMatrix<f64>>);

impl Designs {
    pub(crate) fn build(spec: &GlmSpec, data: &CategoricalDataset) -> Result<Self> {
        let n_params = spec.n_params();
        data.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let z = build_design(&r.x, &spec.design, spec.n_categories)
                    .map_err(|e| Error::Spec(format!("row {i}: {e}")))?;
                debug_assert_eq!(z.ncols(), n_params);
                Ok(z)
            })
            .collect::<Result<Vec<_>>>()
            .map(Designs)
    }
}

/// Per-iteration quantities of the likelihood.
struct Evaluation {
    log_likelihood: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

fn check_dataset(spec: &GlmSpec, data: &CategoricalDataset) -> Result<()> {
    if spec.n_categories != data.n_categories {
        return Err(Error::Spec(format!(
            "model has {} categories but data has {}",
            spec.n_categories, data.n_categories
        )));
    }
    Ok(())
}

fn check_beta(spec: &GlmSpec, beta: &ParameterVector) -> Result<()> {
    if beta.len() != spec.n_params() {
        return Err(Error::Spec(format!(
            "model has {} parameters but beta has {}",
            spec.n_params(),
            beta.len()
        )));
    }
    Ok(())
}

fn ll_only(
    spec: &GlmSpec,
    beta: &ParameterVector,
    designs: &Designs,
    data: &CategoricalDataset,
) -> Result<f64> {
    let mut ll = 0.0;
    for (i, (z, obs)) in designs.0.iter().zip(&data.rows).enumerate() {
        let eta = z * &beta.0;
        let probs = spec
            .probs_from_eta(eta.as_slice())
            .map_err(|e| e.at_row(i))?;
        ll += obs.weight * probs[obs.response - 1].max(LOG_FLOOR).ln();
    }
    Ok(ll)
}

fn evaluate(
    spec: &GlmSpec,
    beta: &ParameterVector,
    designs: &Designs,
    data: &CategoricalDataset,
) -> Result<Evaluation> {
    let n_params = beta.len();
    let jm1 = spec.n_categories - 1;
    let mut ll = 0.0;
    let mut score = DVector::zeros(n_params);
    let mut information = DMatrix::zeros(n_params, n_params);
    let mut resid = vec![0.0; jm1];
    for (i, (z, obs)) in designs.0.iter().zip(&data.rows).enumerate() {
        let eta = z * &beta.0;
        let probs = spec
            .probs_from_eta(eta.as_slice())
            .map_err(|e| e.at_row(i))?;
        ll += obs.weight * probs[obs.response - 1].max(LOG_FLOOR).ln();

        if let Some(j) = probs.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Numerical {
                row: Some(i),
                message: format!(
                    "singular Cov(Y|x): probability of category {} is {}",
                    j + 1,
                    probs[j]
                ),
            });
        }
        let last = probs[jm1];
        let jac = jacobian_from_probs(&probs, spec.ratio);
        let dens: Vec<f64> = eta.iter().map(|&e| spec.cdf.pdf(e)).collect();

        // Cov⁻¹(y − π) has entries y_i/π_i − y_J/π_J.
        for (k, r) in resid.iter_mut().enumerate() {
            let yi = if obs.response == k + 1 {
                1.0 / probs[k]
            } else {
                0.0
            };
            let yj = if obs.response == jm1 + 1 {
                1.0 / last
            } else {
                0.0
            };
            *r = yi - yj;
        }
        // Cov⁻¹ = diag(1/π) + 11ᵗ/π_J
        let mut cov_inv_jac = DMatrix::zeros(jm1, jm1);
        for k in 0..jm1 {
            let col_sum: f64 = (0..jm1).map(|m| jac[(m, k)]).sum();
            for m in 0..jm1 {
                cov_inv_jac[(m, k)] = jac[(m, k)] / probs[m] + col_sum / last;
            }
        }
        let mut dl_deta = DVector::zeros(jm1);
        for k in 0..jm1 {
            let u: f64 = (0..jm1).map(|m| jac[(m, k)] * resid[m]).sum();
            dl_deta[k] = dens[k] * u;
        }
        let g = jac.transpose() * cov_inv_jac;
        let mut info_eta = g;
        for a in 0..jm1 {
            for b in 0..jm1 {
                info_eta[(a, b)] *= dens[a] * dens[b];
            }
        }
        score.gemv_tr(obs.weight, z, &dl_deta, 1.0);
        let zt_h = z.transpose() * info_eta;
        information.gemm(obs.weight, &zt_h, z, 1.0);
    }
    // exact symmetry
    let information = (&information + information.transpose()) * 0.5;
    Ok(Evaluation {
        log_likelihood: ll,
        score,
        information,
    })
}

/// `Σ w · ln π_y(x)` with probabilities floored at [`LOG_FLOOR`].
pub fn log_likelihood(
    spec: &GlmSpec,
    beta: &ParameterVector,
    data: &CategoricalDataset,
) -> Result<f64> {
    check_dataset(spec, data)?;
    check_beta(spec, beta)?;
    let designs = Designs::build(spec, data)?;
    ll_only(spec, beta, &designs, data)
}

pub fn score(
    spec: &GlmSpec,
    beta: &ParameterVector,
    data: &CategoricalDataset,
) -> Result<DVector<f64>> {
    check_dataset(spec, data)?;
    check_beta(spec, beta)?;
    let designs = Designs::build(spec, data)?;
    Ok(evaluate(spec, beta, &designs, data)?.score)
}

/// Expected (Fisher) information.
pub fn fisher_info(
    spec: &GlmSpec,
    beta: &ParameterVector,
    data: &CategoricalDataset,
) -> Result<DMatrix<f64>> {
    check_dataset(spec, data)?;
    check_beta(spec, beta)?;
    let designs = Designs::build(spec, data)?;
    Ok(evaluate(spec, beta, &designs, data)?.information)
}

/// Intercepts reproducing the (lightly smoothed) marginal response
/// frequencies at zero slopes.
pub fn initial_beta(spec: &GlmSpec, data: &CategoricalDataset) -> Result<ParameterVector> {
    initial_intercepts(spec, data, spec.n_params())
}

fn initial_intercepts(
    spec: &GlmSpec,
    data: &CategoricalDataset,
    n_params: usize,
) -> Result<ParameterVector> {
    let j = spec.n_categories;
    let counts = data.category_counts();
    let total: f64 = counts.iter().sum::<f64>() + 0.5 * j as f64;
    let marginal: Vec<f64> = counts.iter().map(|c| (c + 0.5) / total).collect();
    let r = ratio_forward(&ProbabilityVector::from_raw(marginal), spec.ratio)?;
    let mut beta = ParameterVector::zeros(n_params);
    for (k, &rk) in r.as_slice().iter().enumerate() {
        beta.0[k] = spec.cdf.quantile(rk)?;
    }
    Ok(beta)
}

enum Solve {
    Plain(DVector<f64>),
    Ridge(DVector<f64>, f64),
}

fn solve_spd(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<Solve> {
    if let Some(ch) = info.clone().cholesky() {
        return Some(Solve::Plain(ch.solve(rhs)));
    }
    let dim = info.nrows().max(1) as f64;
    let ridge = 1e-10 * info.trace().abs() / dim;
    let mut shifted = info.clone();
    for k in 0..info.nrows() {
        shifted[(k, k)] += ridge;
    }
    shifted
        .cholesky()
        .map(|ch| Solve::Ridge(ch.solve(rhs), ridge))
}

fn inverse_spd(info: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = info.nrows();
    match solve_spd(info, &DVector::zeros(n))? {
        Solve::Plain(_) => info.clone().cholesky().map(|c| c.inverse()),
        Solve::Ridge(_, ridge) => {
            let mut shifted = info.clone();
            for k in 0..n {
                shifted[(k, k)] += ridge;
            }
            shifted.cholesky().map(|c| c.inverse())
        }
    }
}

/// Relative eigenvalue threshold below which the information is rank deficient.
const RANK_TOL: f64 = 1e-10;

fn check_rank(info: &DMatrix<f64>, spec: &GlmSpec) -> Result<()> {
    if info.nrows() == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= RANK_TOL * max {
        return Err(Error::Identifiability(format!(
            "information matrix of the ({}, {}, {:?}) model is rank deficient \
             (eigenvalues in [{min:.3e}, {max:.3e}]); a design column carries no information",
            spec.ratio.name(),
            spec.cdf.name(),
            spec.design.kind
        )));
    }
    Ok(())
}

/// Information per unit weight below which the fitted probabilities are all
/// within about 1e-5 of 0 or 1.
const DEGENERATE_INFO: f64 = 1e-5;

/// A vanishing score can also mean the estimates are running off to
/// infinity: under (quasi-)complete separation the information collapses,
/// in every direction or in some of them.
fn separation(info: &DMatrix<f64>, data: &CategoricalDataset) -> Option<String> {
    if info.nrows() == 0 {
        return None;
    }
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    let weight = data.total_weight().max(f64::MIN_POSITIVE);
    if max / weight < DEGENERATE_INFO || min <= RANK_TOL * max {
        Some(format!(
            "estimates diverge: information collapsed at the optimum \
             (eigenvalues in [{min:.3e}, {max:.3e}]), the data look separated"
        ))
    } else {
        None
    }
}

const MAX_HALVINGS: usize = 20;
const STALL_ITERATIONS: usize = 10;

/// Fisher scoring `β ← β + I(β)⁻¹ s(β)` with step halving.
pub fn fit(spec: &GlmSpec, data: &CategoricalDataset, options: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    check_dataset(spec, data)?;
    if data.is_empty() {
        return Err(Error::Spec("cannot fit a GLM on an empty dataset".into()));
    }
    let designs = Designs::build(spec, data)?;
    fit_designs(spec, &designs, spec.n_params(), data, options)
}

/// Fits with caller-supplied design matrices (one `(J-1) × q` matrix per
/// row). Only the ratio and CDF of `spec` are used; the first `J-1` columns
/// must be the intercepts.
pub fn fit_precomputed(
    spec: &GlmSpec,
    designs: Vec<DMatrix<f64>>,
    data: &CategoricalDataset,
    options: &FitOptions,
) -> Result<FitResult> {
    check_dataset(spec, data)?;
    if data.is_empty() {
        return Err(Error::Spec("cannot fit a GLM on an empty dataset".into()));
    }
    if designs.len() != data.len() {
        return Err(Error::Spec(format!(
            "{} design matrices for {} rows",
            designs.len(),
            data.len()
        )));
    }
    let n_params = designs[0].ncols();
    if designs
        .iter()
        .any(|z| z.nrows() != spec.n_categories - 1 || z.ncols() != n_params)
    {
        return Err(Error::Spec(
            "design matrices have inconsistent shapes".into(),
        ));
    }
    fit_designs(spec, &Designs(designs), n_params, data, options)
}

fn fit_designs(
    spec: &GlmSpec,
    designs: &Designs,
    n_params: usize,
    data: &CategoricalDataset,
    options: &FitOptions,
) -> Result<FitResult> {
    let mut beta = match &options.start {
        Some(b) if b.len() == n_params => b.clone(),
        Some(b) => {
            return Err(Error::Spec(format!(
                "start vector has {} entries, model has {n_params}",
                b.len()
            )))
        }
        None => initial_intercepts(spec, data, n_params)?,
    };
    let mut diagnostics = Vec::new();
    let mut current = evaluate(spec, &beta, designs, data)?;
    check_rank(&current.information, spec)?;

    let mut iterations = 0;
    let mut stalled = 0;
    let mut converged = current.score.amax() < options.grad_tol;
    while !converged && iterations < options.max_iter {
        iterations += 1;
        let direction = match solve_spd(&current.information, &current.score) {
            Some(Solve::Plain(d)) => d,
            Some(Solve::Ridge(d, ridge)) => {
                diagnostics.push(format!(
                    "iteration {iterations}: ridge {ridge:.3e} added to information"
                ));
                d
            }
            None => {
                diagnostics.push(format!(
                    "iteration {iterations}: information not positive definite"
                ));
                break;
            }
        };
        let tol = 1e-12 * (1.0 + current.log_likelihood.abs());
        let mut step = 1.0;
        let mut accepted = None;
        let mut constraint_hit = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = ParameterVector(&beta.0 + &direction * step);
            match ll_only(spec, &candidate, designs, data) {
                Ok(ll) if ll.is_finite() && ll >= current.log_likelihood - tol => {
                    match evaluate(spec, &candidate, designs, data) {
                        Ok(ev) => {
                            accepted = Some((candidate, ev));
                            break;
                        }
                        Err(_) => constraint_hit = true,
                    }
                }
                Ok(_) => {}
                Err(Error::PredictionDomain { .. }) => constraint_hit = true,
                Err(Error::Numerical { .. }) => constraint_hit = true,
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((next_beta, next)) = accepted else {
            diagnostics.push(if constraint_hit {
                format!("iteration {iterations}: constraint violation persisted after {MAX_HALVINGS} halvings")
            } else {
                format!("iteration {iterations}: no log-likelihood increase after {MAX_HALVINGS} halvings")
            });
            break;
        };
        let rel_change = (next.log_likelihood - current.log_likelihood).abs()
            / current.log_likelihood.abs().max(1.0);
        beta = next_beta;
        current = next;
        converged = current.score.amax() < options.grad_tol;
        if rel_change < options.ll_tol {
            stalled += 1;
            if !converged && stalled >= STALL_ITERATIONS {
                diagnostics.push(format!(
                    "stalled: log-likelihood change below {:e} for {STALL_ITERATIONS} iterations",
                    options.ll_tol
                ));
                break;
            }
        } else {
            stalled = 0;
        }
    }
    if !converged && iterations >= options.max_iter {
        diagnostics.push(format!("reached max_iter = {}", options.max_iter));
    }
    if converged {
        if let Some(reason) = separation(&current.information, data) {
            diagnostics.push(reason);
            converged = false;
        }
    }
    let standard_errors = match inverse_spd(&current.information) {
        Some(inv) => (0..inv.nrows())
            .map(|k| inv[(k, k)].max(0.0).sqrt())
            .collect(),
        None => vec![f64::NAN; beta.len()],
    };
    Ok(FitResult {
        beta,
        log_likelihood: current.log_likelihood,
        iterations,
        converged,
        score_norm: current.score.amax(),
        fisher_information: current.information,
        standard_errors,
        diagnostics,
    })
}
