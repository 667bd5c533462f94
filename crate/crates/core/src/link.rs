//! Ratio transforms of category probabilities and the CDF families used as
//! inverse-link cores.
//!
//! A categorical GLM is summarised by `r(π) = F(Zβ)`: `r` maps the open
//! simplex onto an open subset of `(0,1)^{J-1}` and `F` is applied
//! componentwise to the linear predictor. Everything here is a pure function.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, erf, gamma::ln_gamma};

use crate::error::{Error, Result};

/// Category probabilities `π = (π_1, …, π_J)` for one covariate value.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
}

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    /// Validating constructor: `J ≥ 2`, entries in `(0,1)`, unit sum.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Domain(format!(
                "probability vector needs at least 2 categories, got {}",
                probs.len()
            )));
        }
        for (j, &p) in probs.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!(
                    "probability at category {} is {p}, outside (0,1)",
                    j + 1
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Wraps model output without validation. Predictions may contain
    /// underflowed zeros in extreme tails; they are reported as computed.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(j: usize) -> Self {
        Self {
            probs: vec![1.0 / j as f64; j],
        }
    }

    pub fn n_categories(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Probability of category `j` (1-based).
    pub fn prob(&self, j: usize) -> f64 {
        self.probs[j - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioKind {
    Reference,
    Adjacent,
    Sequential,
    Cumulative,
}

impl RatioKind {
    pub const ALL: [RatioKind; 4] = [
        RatioKind::Reference,
        RatioKind::Adjacent,
        RatioKind::Sequential,
        RatioKind::Cumulative,
    ];

    /// Adjacent, sequential and cumulative ratios encode an order among
    /// categories; the reference ratio is meant for nominal responses.
    pub fn respects_order(self) -> bool {
        !matches!(self, RatioKind::Reference)
    }

    pub fn name(self) -> &'static str {
        match self {
            RatioKind::Reference => "reference",
            RatioKind::Adjacent => "adjacent",
            RatioKind::Sequential => "sequential",
            RatioKind::Cumulative => "cumulative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reference" => Ok(RatioKind::Reference),
            "adjacent" => Ok(RatioKind::Adjacent),
            "sequential" => Ok(RatioKind::Sequential),
            "cumulative" => Ok(RatioKind::Cumulative),
            other => Err(Error::Spec(format!("unknown ratio '{other}'"))),
        }
    }
}

/// Continuous, strictly increasing CDFs. Student carries its degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CdfKind {
    Logistic,
    Normal,
    Laplace,
    Student(u32),
    GumbelMin,
    GumbelMax,
}

impl Default for CdfKind {
    fn default() -> Self {
        CdfKind::Logistic
    }
}

impl CdfKind {
    pub const DEFAULT_STUDENT_DF: u32 = 1;

    pub fn validate(self) -> Result<Self> {
        match self {
            CdfKind::Student(0) => Err(Error::Spec(
                "student cdf needs at least 1 degree of freedom".into(),
            )),
            other => Ok(other),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CdfKind::Logistic => "logistic",
            CdfKind::Normal => "normal",
            CdfKind::Laplace => "laplace",
            CdfKind::Student(_) => "student",
            CdfKind::GumbelMin => "gumbel_min",
            CdfKind::GumbelMax => "gumbel_max",
        }
    }

    pub fn shape(self) -> Option<u32> {
        match self {
            CdfKind::Student(df) => Some(df),
            _ => None,
        }
    }

    /// Builds a family from its name and optional shape parameter.
    pub fn parse(name: &str, df: Option<u32>) -> Result<Self> {
        let kind = match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "logistic" => CdfKind::Logistic,
            "normal" => CdfKind::Normal,
            "laplace" => CdfKind::Laplace,
            "student" => CdfKind::Student(df.unwrap_or(Self::DEFAULT_STUDENT_DF)),
            "gumbel_min" | "gumbelmin" => CdfKind::GumbelMin,
            "gumbel_max" | "gumbelmax" => CdfKind::GumbelMax,
            other => return Err(Error::Spec(format!("unknown cdf '{other}'"))),
        };
        if df.is_some() && !matches!(kind, CdfKind::Student(_)) {
            return Err(Error::Spec(format!(
                "degrees of freedom only apply to the student cdf, not {name}"
            )));
        }
        kind.validate()
    }

    /// `F(x)`.
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            CdfKind::Logistic => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            CdfKind::Normal => 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2),
            CdfKind::Laplace => {
                if x < 0.0 {
                    0.5 * x.exp()
                } else {
                    1.0 - 0.5 * (-x).exp()
                }
            }
            CdfKind::Student(df) => student_cdf(x, df as f64),
            CdfKind::GumbelMin => -(-x.exp()).exp_m1(),
            CdfKind::GumbelMax => (-(-x).exp()).exp(),
        }
    }

    /// `1 - F(x)`, computed without cancellation.
    pub fn sf(self, x: f64) -> f64 {
        match self {
            CdfKind::Logistic | CdfKind::Normal | CdfKind::Laplace | CdfKind::Student(_) => {
                self.cdf(-x)
            }
            CdfKind::GumbelMin => (-x.exp()).exp(),
            CdfKind::GumbelMax => -(-(-x).exp()).exp_m1(),
        }
    }

    /// Density `f(x) = F'(x)`.
    pub fn pdf(self, x: f64) -> f64 {
        match self {
            CdfKind::Logistic => self.cdf(x) * self.sf(x),
            CdfKind::Normal => (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            CdfKind::Laplace => 0.5 * (-x.abs()).exp(),
            CdfKind::Student(df) => {
                let nu = df as f64;
                let log_norm = ln_gamma((nu + 1.0) / 2.0)
                    - ln_gamma(nu / 2.0)
                    - 0.5 * (nu * std::f64::consts::PI).ln();
                (log_norm - (nu + 1.0) / 2.0 * (x * x / nu).ln_1p()).exp()
            }
            CdfKind::GumbelMin => {
                if x > 709.0 {
                    0.0
                } else {
                    (x - x.exp()).exp()
                }
            }
            CdfKind::GumbelMax => {
                if x < -709.0 {
                    0.0
                } else {
                    (-x - (-x).exp()).exp()
                }
            }
        }
    }

    /// `F^{-1}(p)` for `p ∈ (0,1)`.
    pub fn quantile(self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} outside (0,1)")));
        }
        let q = match self {
            CdfKind::Logistic => (p / (1.0 - p)).ln(),
            CdfKind::Laplace => {
                if p < 0.5 {
                    (2.0 * p).ln()
                } else {
                    -(2.0 * (1.0 - p)).ln()
                }
            }
            CdfKind::GumbelMin => (-(-p).ln_1p()).ln(),
            CdfKind::GumbelMax => -(-p.ln()).ln(),
            CdfKind::Normal => {
                let start = -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p);
                self.polish_quantile(p, start)
            }
            CdfKind::Student(1) => (std::f64::consts::PI * (p - 0.5)).tan(),
            CdfKind::Student(2) => {
                let a = 4.0 * p * (1.0 - p);
                2.0 * (p - 0.5) * (2.0 / a).sqrt()
            }
            CdfKind::Student(_) => self.bracketed_quantile(p),
        };
        Ok(q)
    }

    /// Newton steps on whichever of `F` or `1-F` is smaller at `p`.
    fn polish_quantile(self, p: f64, mut x: f64) -> f64 {
        for _ in 0..3 {
            let d = self.pdf(x);
            if !(d > 0.0) || !x.is_finite() {
                break;
            }
            let step = if p < 0.5 {
                (self.cdf(x) - p) / d
            } else {
                ((1.0 - p) - self.sf(x)) / d
            };
            x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        x
    }

    fn bracketed_quantile(self, p: f64) -> f64 {
        // Monotone residual in x, evaluated on the accurate tail.
        let resid = |x: f64| {
            if p < 0.5 {
                self.cdf(x) - p
            } else {
                (1.0 - p) - self.sf(x)
            }
        };
        let (mut lo, mut hi) = (-1.0, 1.0);
        while resid(lo) > 0.0 {
            lo *= 2.0;
        }
        while resid(hi) < 0.0 {
            hi *= 2.0;
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let r = resid(x);
            if r == 0.0 {
                return x;
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = self.pdf(x);
            let newton = x - r / d;
            x = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (hi - lo) <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        x
    }
}

fn student_cdf(x: f64, nu: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let x2 = x * x;
    if x2 < nu {
        // Central region: I_{x²/(ν+x²)}(1/2, ν/2) stays away from 1.
        let half = 0.5 * beta_reg(0.5, nu / 2.0, x2 / (nu + x2));
        if x > 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    } else {
        let tail = 0.5 * beta_reg(nu / 2.0, 0.5, nu / (nu + x2));
        if x > 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }
}

/// Image of a probability vector under a ratio: `J-1` values in `(0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioValue {
    values: Vec<f64>,
}

impl RatioValue {
    pub fn new(values: Vec<f64>, kind: RatioKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("ratio value needs at least one entry".into()));
        }
        for (j, &v) in values.iter().enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!(
                    "ratio entry {} is {v}, outside (0,1)",
                    j + 1
                )));
            }
        }
        if kind == RatioKind::Cumulative {
            if let Some(j) = values.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::Domain(format!(
                    "cumulative ratio not strictly increasing at entries {} and {}",
                    j + 1,
                    j + 2
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// `r(π)` for the four ratio kinds.
pub fn ratio_forward(pi: &ProbabilityVector, kind: RatioKind) -> Result<RatioValue> {
    let p = pi.as_slice();
    if let Some(j) = p.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!(
            "degenerate probability {} at category {}",
            p[j],
            j + 1
        )));
    }
    let jm1 = p.len() - 1;
    let last = p[jm1];
    let values: Vec<f64> = match kind {
        RatioKind::Reference => (0..jm1).map(|j| p[j] / (p[j] + last)).collect(),
        RatioKind::Adjacent => (0..jm1).map(|j| p[j] / (p[j] + p[j + 1])).collect(),
        RatioKind::Sequential => {
            let tails = tail_sums(p);
            (0..jm1).map(|j| p[j] / tails[j]).collect()
        }
        RatioKind::Cumulative => {
            let mut acc = 0.0;
            (0..jm1)
                .map(|j| {
                    acc += p[j];
                    acc
                })
                .collect()
        }
    };
    RatioValue::new(values, kind)
}

/// `r^{-1}(v)`.
pub fn ratio_inverse(v: &RatioValue, kind: RatioKind) -> Result<ProbabilityVector> {
    let f = v.as_slice();
    let s: Vec<f64> = f.iter().map(|x| 1.0 - x).collect();
    inverse_from_pairs(f, &s, kind).map(ProbabilityVector::from_raw)
}

/// Inverse ratio evaluated from `(r_j, 1 - r_j)` pairs, where both members
/// are supplied so that tails computed as survival functions keep their
/// relative precision. Returns all `J` probabilities.
pub(crate) fn inverse_from_pairs(f: &[f64], s: &[f64], kind: RatioKind) -> Result<Vec<f64>> {
    let jm1 = f.len();
    match kind {
        RatioKind::Reference => {
            let logits: Vec<f64> = (0..jm1).map(|j| f[j].ln() - s[j].ln()).collect();
            softmax_with_zero(&logits)
        }
        RatioKind::Adjacent => {
            // log(π_j / π_J) = Σ_{k ≥ j} log(r_k / (1 - r_k))
            let mut logits = vec![0.0; jm1];
            let mut acc = 0.0;
            for j in (0..jm1).rev() {
                acc += f[j].ln() - s[j].ln();
                logits[j] = acc;
            }
            softmax_with_zero(&logits)
        }
        RatioKind::Sequential => {
            let mut out = Vec::with_capacity(jm1 + 1);
            let mut survive = 1.0;
            for j in 0..jm1 {
                out.push(f[j] * survive);
                survive *= s[j];
            }
            out.push(survive);
            Ok(out)
        }
        RatioKind::Cumulative => {
            let mut out = Vec::with_capacity(jm1 + 1);
            for j in 0..jm1 {
                let p = if j == 0 {
                    f[0]
                } else if f[j] > 0.5 {
                    s[j - 1] - s[j]
                } else {
                    f[j] - f[j - 1]
                };
                if !(p > 0.0) {
                    return Err(Error::prediction(format!(
                        "cumulative ratio not strictly increasing between equations {} and {}",
                        j,
                        j + 1
                    )));
                }
                out.push(p);
            }
            out.push(s[jm1 - 1]);
            Ok(out)
        }
    }
}

fn softmax_with_zero(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::numerical("NaN in ratio logits"));
    }
    let max = logits.iter().cloned().fold(0.0_f64, f64::max);
    if !max.is_finite() {
        return Err(Error::numerical("infinite ratio logit"));
    }
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    out.push((-max).exp());
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Suffix sums `T_j = π_j + … + π_J`.
fn tail_sums(p: &[f64]) -> Vec<f64> {
    let mut tails = vec![0.0; p.len()];
    let mut acc = 0.0;
    for j in (0..p.len()).rev() {
        acc += p[j];
        tails[j] = acc;
    }
    tails
}

/// Jacobian `∂π/∂r` of the inverse ratio, evaluated at `r(π)`. Entry
/// `(i, k)` is `∂π_i / ∂r_k` over the first `J-1` categories.
pub fn ratio_jacobian(pi: &ProbabilityVector, kind: RatioKind) -> Result<DMatrix<f64>> {
    ratio_forward(pi, kind)?;
    Ok(jacobian_from_probs(pi.as_slice(), kind))
}

/// Closed-form Jacobians written in terms of the probabilities alone.
pub(crate) fn jacobian_from_probs(p: &[f64], kind: RatioKind) -> DMatrix<f64> {
    let jm1 = p.len() - 1;
    let last = p[jm1];
    let mut jac = DMatrix::zeros(jm1, jm1);
    match kind {
        RatioKind::Reference => {
            // ∂π_i/∂r_k = (δ_ik − π_i)(π_k + π_J)² / π_J
            for k in 0..jm1 {
                let scale = (p[k] + last).powi(2) / last;
                for i in 0..jm1 {
                    let delta = if i == k { 1.0 } else { 0.0 };
                    jac[(i, k)] = (delta - p[i]) * scale;
                }
            }
        }
        RatioKind::Adjacent => {
            // ∂π_i/∂r_k = π_i (1{i ≤ k} − C_k) / (r_k (1 − r_k)),  C_k = π_1 + … + π_k
            let mut cum = 0.0;
            for k in 0..jm1 {
                cum += p[k];
                let next = p[k + 1];
                let r_var = p[k] * next / (p[k] + next).powi(2);
                for i in 0..jm1 {
                    let ind = if i <= k { 1.0 } else { 0.0 };
                    jac[(i, k)] = p[i] * (ind - cum) / r_var;
                }
            }
        }
        RatioKind::Sequential => {
            // ∂π_i/∂r_i = T_i,  ∂π_i/∂r_k = −π_i T_k / T_{k+1} for k < i
            let tails = tail_sums(p);
            for i in 0..jm1 {
                jac[(i, i)] = tails[i];
                for k in 0..i {
                    jac[(i, k)] = -p[i] * tails[k] / tails[k + 1];
                }
            }
        }
        RatioKind::Cumulative => {
            for i in 0..jm1 {
                jac[(i, i)] = 1.0;
                if i > 0 {
                    jac[(i, i - 1)] = -1.0;
                }
            }
        }
    }
    jac
}
