//! Design matrices `Z(x)` and linear predictors `η = Zβ`.
//!
//! Column layout is always intercepts first (`α_1 … α_{J-1}`), then slope
//! blocks in equation order, then (for nested-logit roots) the `λ` columns
//! multiplying the inclusive values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Explanatory variables of one statistical unit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateRow {
    pub values: Vec<f64>,
    /// Per-alternative attributes, one row per alternative (used by
    /// conditional-logit style designs).
    pub alternatives: Option<DMatrix<f64>>,
    /// Inclusive values of the lower-level nests, attached when the row
    /// feeds the root of a nested logit.
    pub inclusive_values: Option<Vec<f64>>,
}

impl CovariateRow {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            alternatives: None,
            inclusive_values: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Keeps only the listed columns, in the listed order.
    pub fn restrict(&self, columns: &[usize]) -> CovariateRow {
        CovariateRow {
            values: columns.iter().map(|&c| self.values[c]).collect(),
            alternatives: self.alternatives.clone(),
            inclusive_values: self.inclusive_values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    /// One slope vector per equation.
    Complete,
    /// A single slope vector shared by all equations.
    Proportional,
    /// Equations `1..=s_1` share one slope block, `s_1+1..=s_2` the next,
    /// and so on; equations after the last split carry no slope.
    BlockSplit(Vec<usize>),
    /// Multinomial-logit root of a nested logit: complete `x^0` block plus
    /// one `λ` column per non-reference nest.
    NestedRoot,
    /// Conditional-logit root: differenced nest attributes with a shared
    /// slope plus `λ` columns.
    ConditionalNestedRoot,
}

/// A design kind together with the covariate columns it uses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DesignSpec {
    pub kind: DesignKind,
    /// Column indices into [`CovariateRow::values`], or into the columns of
    /// [`CovariateRow::alternatives`] for conditional designs.
    pub variables: Vec<usize>,
}

impl DesignSpec {
    pub fn new(kind: DesignKind, variables: Vec<usize>) -> Self {
        Self { kind, variables }
    }

    pub fn complete(variables: Vec<usize>) -> Self {
        Self::new(DesignKind::Complete, variables)
    }

    pub fn proportional(variables: Vec<usize>) -> Self {
        Self::new(DesignKind::Proportional, variables)
    }

    pub fn block_split(splits: Vec<usize>, variables: Vec<usize>) -> Self {
        Self::new(DesignKind::BlockSplit(splits), variables)
    }

    /// Checks split points and variable indices against `J` categories and
    /// a covariate dimension of `p` (`None` skips the range check).
    pub fn validate(&self, n_categories: usize, p: Option<usize>) -> Result<()> {
        if n_categories < 2 {
            return Err(Error::Spec(format!(
                "a GLM needs at least 2 categories, got {n_categories}"
            )));
        }
        if let DesignKind::BlockSplit(splits) = &self.kind {
            for w in splits.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Spec(format!(
                        "block split points must be strictly increasing, got {splits:?}"
                    )));
                }
            }
            if let Some(&bad) = splits.iter().find(|&&s| s == 0 || s >= n_categories) {
                return Err(Error::Spec(format!(
                    "split point {bad} outside 1..={}",
                    n_categories - 1
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &v in &self.variables {
            if !seen.insert(v) {
                return Err(Error::Spec(format!("variable column {v} listed twice")));
            }
            if let Some(p) = p {
                if v >= p {
                    return Err(Error::Spec(format!(
                        "variable column {v} out of range for {p} covariates"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of slope blocks that carry covariates.
    pub fn slope_blocks(&self, n_categories: usize) -> usize {
        match &self.kind {
            DesignKind::Complete | DesignKind::NestedRoot => n_categories - 1,
            DesignKind::Proportional | DesignKind::ConditionalNestedRoot => 1,
            DesignKind::BlockSplit(splits) => splits.len(),
        }
    }

    /// Width of `Z` for a response with `n_categories` categories.
    pub fn column_count(&self, n_categories: usize) -> usize {
        let jm1 = n_categories - 1;
        let p = self.variables.len();
        let lambdas = match self.kind {
            DesignKind::NestedRoot | DesignKind::ConditionalNestedRoot => jm1,
            _ => 0,
        };
        jm1 + self.slope_blocks(n_categories) * p + lambdas
    }

    /// Slope block governing equation `eq` (0-based), if any.
    fn block_of_equation(&self, eq: usize) -> Option<usize> {
        match &self.kind {
            DesignKind::Complete | DesignKind::NestedRoot => Some(eq),
            DesignKind::Proportional | DesignKind::ConditionalNestedRoot => Some(0),
            DesignKind::BlockSplit(splits) => splits.iter().position(|&s| eq < s),
        }
    }

    /// Human-readable column names, for reports.
    pub fn column_labels(&self, n_categories: usize, names: &[String]) -> Vec<String> {
        let jm1 = n_categories - 1;
        let var_name = |v: usize| {
            names
                .get(v)
                .cloned()
                .unwrap_or_else(|| format!("x{}", v + 1))
        };
        let mut labels: Vec<String> = (1..=jm1).map(|j| format!("alpha_{j}")).collect();
        let blocks = self.slope_blocks(n_categories);
        for b in 0..blocks {
            for &v in &self.variables {
                let tag = match self.kind {
                    DesignKind::Proportional | DesignKind::ConditionalNestedRoot => {
                        "delta".to_string()
                    }
                    DesignKind::BlockSplit(_) => format!("delta_block{}", b + 1),
                    _ => format!("delta_{}", b + 1),
                };
                labels.push(format!("{tag}[{}]", var_name(v)));
            }
        }
        if matches!(
            self.kind,
            DesignKind::NestedRoot | DesignKind::ConditionalNestedRoot
        ) {
            labels.extend((1..=jm1).map(|l| format!("lambda_{l}")));
        }
        labels
    }
}

/// Regression coefficients `β`, laid out as described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub DVector<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(DVector::zeros(len))
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(DVector::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// `α_1 … α_{J-1}`.
    pub fn intercepts(&self, n_categories: usize) -> &[f64] {
        &self.0.as_slice()[..n_categories - 1]
    }

    /// Everything after the intercepts.
    pub fn slopes(&self, n_categories: usize) -> &[f64] {
        &self.0.as_slice()[n_categories - 1..]
    }
}

/// Builds `Z(x)` with `J-1` rows.
pub fn build_design(
    x: &CovariateRow,
    spec: &DesignSpec,
    n_categories: usize,
) -> Result<DMatrix<f64>> {
    spec.validate(n_categories, None)?;
    match spec.kind {
        DesignKind::NestedRoot | DesignKind::ConditionalNestedRoot => {
            let iv = x.inclusive_values.as_ref().ok_or_else(|| {
                Error::Spec("nested root design needs inclusive values on the row".into())
            })?;
            if iv.len() != n_categories {
                return Err(Error::Spec(format!(
                    "expected {n_categories} inclusive values, got {}",
                    iv.len()
                )));
            }
            return build_nested_root_design(
                x,
                iv,
                spec.kind == DesignKind::ConditionalNestedRoot,
                &spec.variables,
            );
        }
        _ => {}
    }
    if let Some(&bad) = spec.variables.iter().find(|&&v| v >= x.dim()) {
        return Err(Error::Spec(format!(
            "variable column {bad} out of range for a row of dimension {}",
            x.dim()
        )));
    }
    let jm1 = n_categories - 1;
    let p = spec.variables.len();
    let mut z = DMatrix::zeros(jm1, spec.column_count(n_categories));
    for eq in 0..jm1 {
        z[(eq, eq)] = 1.0;
        if let Some(block) = spec.block_of_equation(eq) {
            let offset = jm1 + block * p;
            for (k, &v) in spec.variables.iter().enumerate() {
                z[(eq, offset + k)] = x.values[v];
            }
        }
    }
    Ok(z)
}

/// Root design of a nested logit with `L = iv.len()` nests.
///
/// Non-conditional: `[I_{L-1} | diag-blocks of x^{0t} | diag(IV_1..IV_{L-1})]`.
/// Conditional: `[I_{L-1} | x̃_l^{0t} | diag(IV_1..IV_{L-1})]` where
/// `x̃_l^0 = x_l^0 − x_L^0` is read from the per-nest attribute rows.
pub fn build_nested_root_design(
    x0: &CovariateRow,
    iv: &[f64],
    conditional: bool,
    variables: &[usize],
) -> Result<DMatrix<f64>> {
    let nests = iv.len();
    if nests < 2 {
        return Err(Error::Spec(format!(
            "nested root needs at least 2 nests, got {nests}"
        )));
    }
    let lm1 = nests - 1;
    let p = variables.len();
    if conditional {
        let attrs = x0.alternatives.as_ref().ok_or_else(|| {
            Error::Spec("conditional nested root needs per-nest attributes".into())
        })?;
        if attrs.nrows() != nests {
            return Err(Error::Spec(format!(
                "per-nest attributes have {} rows for {nests} nests",
                attrs.nrows()
            )));
        }
        if let Some(&bad) = variables.iter().find(|&&v| v >= attrs.ncols()) {
            return Err(Error::Spec(format!("attribute column {bad} out of range")));
        }
        let mut z = DMatrix::zeros(lm1, lm1 + p + lm1);
        for l in 0..lm1 {
            z[(l, l)] = 1.0;
            for (k, &v) in variables.iter().enumerate() {
                z[(l, lm1 + k)] = attrs[(l, v)] - attrs[(lm1, v)];
            }
            z[(l, lm1 + p + l)] = iv[l];
        }
        Ok(z)
    } else {
        if let Some(&bad) = variables.iter().find(|&&v| v >= x0.dim()) {
            return Err(Error::Spec(format!("variable column {bad} out of range")));
        }
        let mut z = DMatrix::zeros(lm1, lm1 * (1 + p) + lm1);
        for l in 0..lm1 {
            z[(l, l)] = 1.0;
            for (k, &v) in variables.iter().enumerate() {
                z[(l, lm1 + l * p + k)] = x0.values[v];
            }
            z[(l, lm1 * (1 + p) + l)] = iv[l];
        }
        Ok(z)
    }
}

/// `η = Zβ`.
pub fn linear_predictor(z: &DMatrix<f64>, beta: &ParameterVector) -> Result<DVector<f64>> {
    if z.ncols() != beta.len() {
        return Err(Error::Spec(format!(
            "design has {} columns but beta has {} entries",
            z.ncols(),
            beta.len()
        )));
    }
    Ok(z * &beta.0)
}

/// `IV_l = ln Σ_{k ∈ N_l} exp(η_k^l)` per nest, via log-sum-exp.
pub fn inclusive_values(nest_predictors: &[Vec<f64>]) -> Result<Vec<f64>> {
    nest_predictors
        .iter()
        .enumerate()
        .map(|(l, eta)| {
            if eta.is_empty() {
                return Err(Error::Spec(format!("nest {} has no alternatives", l + 1)));
            }
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = eta.iter().map(|e| (e - max).exp()).sum();
            Ok(max + sum.ln())
        })
        .collect()
}

/// Dummy coding with the first level as baseline: `levels.len() - 1`
/// indicator columns.
pub fn dummy_encode(levels: &[String], value: &str) -> Option<Vec<f64>> {
    let idx = levels.iter().position(|l| l == value)?;
    Some(
        (1..levels.len())
            .map(|k| if k == idx { 1.0 } else { 0.0 })
            .collect(),
    )
}
