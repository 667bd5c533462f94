//! Model selection: chi-square deviance tests, BIC, covariate subset
//! selection, Anderson-style split searches over ordered categories, the
//! equivalence between block-split canonical models and depth-2 trees, and
//! the extended procedure that grows a partition tree and selects
//! covariates node by node.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::design::{DesignKind, DesignSpec, ParameterVector};
use crate::error::{Error, Result};
use crate::glm::{fit, CategoricalDataset, FitOptions, FitResult, GlmSpec};
use crate::link::{CdfKind, RatioKind};
use crate::tree::{
    fmt_set, pcglm_fit, NodeModel, NodeSpec, PartitionTree, PcglmFit, PcglmSpec, TreeShape,
};

/// Default significance level of deviance tests.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Upper tail `P(χ²_df > x)`.
pub fn chi2_sf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Domain(
            "chi-square degrees of freedom must be positive".into(),
        ));
    }
    if !(x >= 0.0) || x.is_infinite() {
        if x == f64::INFINITY {
            return Ok(0.0);
        }
        return Err(Error::Domain(format!(
            "chi-square statistic {x} must be >= 0"
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(df as f64 / 2.0, x / 2.0))
}

fn chi2_pdf(x: f64, df: usize) -> f64 {
    let k = df as f64 / 2.0;
    if x <= 0.0 {
        return if df == 2 { 0.5 } else { 0.0 };
    }
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// `x` with `P(χ²_df ≤ x) = q`.
pub fn chi2_quantile(q: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Domain(
            "chi-square degrees of freedom must be positive".into(),
        ));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level {q} outside (0,1)")));
    }
    let target = 1.0 - q;
    // Bracket: sf is decreasing in x.
    let mut lo = 0.0;
    let mut hi = (df as f64).max(1.0);
    while chi2_sf(hi, df)? > target {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let g = chi2_sf(x, df)? - target;
        if g > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = chi2_pdf(x, df);
        let newton = x + g / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * x.max(1.0) || hi - lo <= 1e-15 * hi.max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DevianceTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// True when the bigger model is significantly better.
    pub accept: bool,
}

/// Likelihood-ratio test of a bigger model against a nested smaller one.
pub fn deviance_test(l_big: f64, l_small: f64, df: usize, alpha: f64) -> Result<DevianceTest> {
    if l_big < l_small - 1e-8 {
        return Err(Error::Domain(format!(
            "models are not nested: bigger model log-likelihood {l_big} < smaller {l_small}"
        )));
    }
    let statistic = (2.0 * (l_big - l_small)).max(0.0);
    let p_value = chi2_sf(statistic, df)?;
    Ok(DevianceTest {
        statistic,
        df,
        p_value,
        accept: p_value < alpha,
    })
}

/// `l − ½ k ln n` (larger is better).
pub fn bic(log_likelihood: f64, n_params: usize, n_obs: f64) -> f64 {
    log_likelihood - 0.5 * n_params as f64 * n_obs.ln()
}

/// One logged candidate of a selection run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    /// Stage and vertex, e.g. `"variables {2,3,4}"`.
    pub context: String,
    pub candidate: String,
    pub spec_hash: String,
    pub log_likelihood: f64,
    pub n_params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub decision: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub steps: Vec<TraceStep>,
}

impl SelectionTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("trace steps serialize"));
            out.push('\n');
        }
        out
    }

    fn push(&mut self, step: TraceStep) {
        self.steps.push(step);
    }
}

/// Short SHA-256 of a model description.
pub fn spec_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn glm_hash(spec: &GlmSpec, names: &[String]) -> String {
    spec_hash(&format!(
        "{}|{}|{:?}|{:?}|J={}",
        spec.ratio.name(),
        spec.cdf.name(),
        spec.cdf.shape(),
        (&spec.design.kind, names),
        spec.n_categories
    ))
}

fn pcglm_hash(spec: &PcglmSpec) -> String {
    spec_hash(&spec.to_json().unwrap_or_default())
}

/// Ratio, CDF and design used for every GLM node during selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFamily {
    pub ratio: RatioKind,
    pub cdf: CdfKind,
    pub design: DesignKind,
}

impl Default for ModelFamily {
    /// `(cumulative, logistic, proportional)`.
    fn default() -> Self {
        Self {
            ratio: RatioKind::Cumulative,
            cdf: CdfKind::Logistic,
            design: DesignKind::Proportional,
        }
    }
}

impl ModelFamily {
    pub fn canonical_complete() -> Self {
        Self {
            ratio: RatioKind::Reference,
            cdf: CdfKind::Logistic,
            design: DesignKind::Complete,
        }
    }

    /// Node model with these variables; no variables gives the minimal model.
    pub fn node_model(&self, variables: &[String]) -> NodeModel {
        if variables.is_empty() {
            NodeModel::Minimal
        } else {
            NodeModel::glm(
                self.ratio,
                self.cdf,
                self.design.clone(),
                variables.to_vec(),
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Subsets compared by BIC.
    Bic,
    /// Forward selection by deviance tests.
    LogLik,
}

/// Sample size used in BIC penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BicSample {
    /// Total weight of the node's sub-dataset.
    Node,
    /// Total weight of the whole dataset.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub alpha: f64,
    pub criterion: Criterion,
    pub bic_sample: BicSample,
    pub fit: FitOptions,
    /// Re-fit every GLM node under each CDF and keep the best.
    pub refine: bool,
    /// Student degrees of freedom tried during refinement.
    pub student_dfs: Vec<u32>,
    /// Above this many candidate variables, subsets are searched forward
    /// stepwise instead of exhaustively.
    pub max_exhaustive: usize,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            criterion: Criterion::Bic,
            bic_sample: BicSample::Node,
            fit: FitOptions::default(),
            refine: true,
            student_dfs: (1..=8).collect(),
            max_exhaustive: 15,
        }
    }
}

/// Fit of a single-node model on `data` (categories `1..J`).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFit {
    pub log_likelihood: f64,
    pub n_params: usize,
    pub hash: String,
}

fn fit_flat(
    family: &ModelFamily,
    variables: &[String],
    data: &CategoricalDataset,
    options: &FitOptions,
) -> Result<CandidateFit> {
    let spec = PcglmSpec::single(family.node_model(variables), data.n_categories)?;
    let f = pcglm_fit(&spec, data, options)?;
    if !f.log_likelihood.is_finite() {
        return Err(f
            .nodes
            .iter()
            .find_map(|n| match &n.status {
                crate::tree::NodeStatus::Failed(e) => Some(e.clone()),
                _ => None,
            })
            .unwrap_or_else(|| Error::numerical("non-finite log-likelihood")));
    }
    let cols = data.columns_for(variables)?.len();
    Ok(CandidateFit {
        log_likelihood: f.log_likelihood,
        n_params: spec.n_params_with(|_| cols),
        hash: pcglm_hash(&spec),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableSelection {
    pub variables: Vec<String>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub bic: f64,
}

fn subsets_by_size(candidates: &[String]) -> Vec<Vec<String>> {
    let k = candidates.len();
    let mut masks: Vec<u32> = (0..(1u32 << k)).collect();
    masks.sort_by_key(|m| {
        (
            m.count_ones(),
            (0..k).filter(|i| m & (1 << i) != 0).collect::<Vec<_>>(),
        )
    });
    masks
        .iter()
        .map(|m| {
            (0..k)
                .filter(|i| m & (1 << i) != 0)
                .map(|i| candidates[i].clone())
                .collect()
        })
        .collect()
}

/// Chooses the covariate subset of a node. Under [`Criterion::Bic`] all
/// subsets are compared (forward stepwise beyond `max_exhaustive`
/// candidates); ties go to fewer variables. Under [`Criterion::LogLik`]
/// variables are added while a deviance test accepts the addition.
pub fn select_variables(
    data: &CategoricalDataset,
    family: &ModelFamily,
    candidates: &[String],
    n_bic: f64,
    options: &SelectionOptions,
    context: &str,
    trace: &mut SelectionTrace,
) -> Result<VariableSelection> {
    let mut log = |vars: &[String],
                   res: &Result<CandidateFit>,
                   stat: Option<DevianceTest>,
                   decision: &str| {
        let (ll, k, hash) = match res {
            Ok(c) => (c.log_likelihood, c.n_params, c.hash.clone()),
            Err(_) => (f64::NAN, 0, String::new()),
        };
        trace.push(TraceStep {
            context: context.to_string(),
            candidate: format!("variables [{}]", vars.join(",")),
            spec_hash: hash,
            log_likelihood: ll,
            n_params: k,
            bic: res
                .as_ref()
                .ok()
                .map(|c| bic(c.log_likelihood, c.n_params, n_bic)),
            statistic: stat.map(|s| s.statistic),
            p_value: stat.map(|s| s.p_value),
            decision: if res.is_err() {
                "failed".into()
            } else {
                decision.into()
            },
        });
    };
    let evaluate = |subsets: &[Vec<String>]| -> Vec<Result<CandidateFit>> {
        subsets
            .par_iter()
            .map(|vars| fit_flat(family, vars, data, &options.fit))
            .collect()
    };

    let exhaustive =
        options.criterion == Criterion::Bic && candidates.len() <= options.max_exhaustive;
    if exhaustive {
        let subsets = subsets_by_size(candidates);
        let results = evaluate(&subsets);
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in results.iter().enumerate() {
            if let Ok(c) = r {
                let b = bic(c.log_likelihood, c.n_params, n_bic);
                if best.is_none_or(|(_, bb)| b > bb) {
                    best = Some((i, b));
                }
            }
        }
        let (bi, bb) =
            best.ok_or_else(|| Error::numerical(format!("{context}: every subset failed to fit")))?;
        for (i, (vars, r)) in subsets.iter().zip(&results).enumerate() {
            log(vars, r, None, if i == bi { "selected" } else { "rejected" });
        }
        let c = results[bi].as_ref().expect("best is ok");
        return Ok(VariableSelection {
            variables: subsets[bi].clone(),
            log_likelihood: c.log_likelihood,
            n_params: c.n_params,
            bic: bb,
        });
    }

    // Forward stepwise.
    let mut current: Vec<String> = Vec::new();
    let base = fit_flat(family, &current, data, &options.fit);
    log(&current, &base, None, "baseline");
    let mut cur = base?;
    loop {
        let remaining: Vec<&String> = candidates.iter().filter(|c| !current.contains(c)).collect();
        if remaining.is_empty() {
            break;
        }
        let subsets: Vec<Vec<String>> = remaining
            .iter()
            .map(|v| {
                let mut s = current.clone();
                s.push((*v).clone());
                s
            })
            .collect();
        let results = evaluate(&subsets);
        let score = |c: &CandidateFit| match options.criterion {
            Criterion::Bic => bic(c.log_likelihood, c.n_params, n_bic),
            Criterion::LogLik => c.log_likelihood,
        };
        let mut best: Option<usize> = None;
        for (i, r) in results.iter().enumerate() {
            if let Ok(c) = r {
                if best.is_none_or(|b| score(c) > score(results[b].as_ref().expect("ok"))) {
                    best = Some(i);
                }
            }
        }
        let Some(bi) = best else {
            for (vars, r) in subsets.iter().zip(&results) {
                log(vars, r, None, "rejected");
            }
            break;
        };
        let cand = results[bi].as_ref().expect("ok").clone();
        let (accept, test) = match options.criterion {
            Criterion::Bic => (score(&cand) > score(&cur), None),
            Criterion::LogLik => {
                let df = cand.n_params.saturating_sub(cur.n_params).max(1);
                let t = deviance_test(
                    cand.log_likelihood.max(cur.log_likelihood),
                    cur.log_likelihood,
                    df,
                    options.alpha,
                )?;
                (t.accept, Some(t))
            }
        };
        for (i, (vars, r)) in subsets.iter().zip(&results).enumerate() {
            let decision = if i == bi && accept {
                "accepted"
            } else {
                "rejected"
            };
            log(vars, r, if i == bi { test } else { None }, decision);
        }
        if !accept {
            break;
        }
        current = subsets[bi].clone();
        cur = cand;
    }
    Ok(VariableSelection {
        bic: bic(cur.log_likelihood, cur.n_params, n_bic),
        variables: current,
        log_likelihood: cur.log_likelihood,
        n_params: cur.n_params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSearch {
    /// Best split point (argmax log-likelihood, smallest on ties).
    pub split: usize,
    /// All splits of the best model, ascending.
    pub splits: Vec<usize>,
    pub fit: FitResult,
    pub spec: GlmSpec,
}

/// Fits `base` with design `BlockSplit(sorted(fixed ∪ {r}))` for every
/// candidate `r` and returns the best. Candidates default to `1..J-1`
/// without the fixed splits. Failed fits are logged and skipped.
pub fn split_search(
    data: &CategoricalDataset,
    base: &GlmSpec,
    fixed_splits: &[usize],
    candidates: Option<&[usize]>,
    options: &FitOptions,
    trace: &mut SelectionTrace,
) -> Result<SplitSearch> {
    let j = base.n_categories;
    let cands: Vec<usize> = match candidates {
        Some(c) => c.to_vec(),
        None => (1..j).filter(|r| !fixed_splits.contains(r)).collect(),
    };
    let names: Vec<String> = base
        .design
        .variables
        .iter()
        .map(|v| data.column_names[*v].clone())
        .collect();
    let specs: Vec<(Vec<usize>, GlmSpec)> = cands
        .iter()
        .map(|&r| {
            let mut splits: Vec<usize> = fixed_splits.iter().copied().chain([r]).collect();
            splits.sort_unstable();
            splits.dedup();
            let spec = GlmSpec {
                design: DesignSpec::new(
                    DesignKind::BlockSplit(splits.clone()),
                    base.design.variables.clone(),
                ),
                ..base.clone()
            };
            (splits, spec)
        })
        .collect();
    let fits: Vec<Result<FitResult>> = specs
        .par_iter()
        .map(|(_, spec)| spec.validate().and_then(|_| fit(spec, data, options)))
        .collect();
    let mut best: Option<usize> = None;
    for (i, f) in fits.iter().enumerate() {
        if let Ok(f) = f {
            if best.is_none_or(|b| f.log_likelihood > fits[b].as_ref().expect("ok").log_likelihood)
            {
                best = Some(i);
            }
        }
    }
    for (i, ((splits, spec), f)) in specs.iter().zip(&fits).enumerate() {
        trace.push(TraceStep {
            context: format!("split search fixed {:?}", fixed_splits),
            candidate: format!("splits {splits:?}"),
            spec_hash: glm_hash(spec, &names),
            log_likelihood: f.as_ref().map(|f| f.log_likelihood).unwrap_or(f64::NAN),
            n_params: spec.n_params(),
            bic: None,
            statistic: None,
            p_value: None,
            decision: match (f, Some(i) == best) {
                (Err(_), _) => "failed".into(),
                (Ok(_), true) => "best".into(),
                (Ok(_), false) => "rejected".into(),
            },
        });
    }
    let b = best.ok_or_else(|| Error::numerical("every split candidate failed to fit"))?;
    Ok(SplitSearch {
        split: cands[b],
        splits: specs[b].0.clone(),
        fit: fits[b].clone().expect("ok"),
        spec: specs[b].1.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndistinguishabilityResult {
    /// Accepted split points, ascending (empty: no covariate effect).
    pub splits: Vec<usize>,
    /// Log-likelihoods of the accepted sequence `l_0, l_2, l_3, …`.
    pub log_likelihoods: Vec<f64>,
    pub trace: SelectionTrace,
}

/// Anderson's procedure on block-split designs: starting from the
/// intercept-only model, repeatedly add the best split point and keep it
/// while the deviance test against the previous model accepts.
pub fn indistinguishability(
    data: &CategoricalDataset,
    ratio: RatioKind,
    cdf: CdfKind,
    variables: &[usize],
    alpha: f64,
    options: &FitOptions,
) -> Result<IndistinguishabilityResult> {
    let j = data.n_categories;
    let mut trace = SelectionTrace::default();
    let null = GlmSpec::new(ratio, cdf, DesignSpec::complete(vec![]), j)?;
    let l0 = fit(&null, data, options)?.log_likelihood;
    let mut splits: Vec<usize> = Vec::new();
    let mut lls = vec![l0];
    let mut k_cur = j - 1;
    let base = GlmSpec {
        ratio,
        cdf,
        design: DesignSpec::new(DesignKind::Complete, variables.to_vec()),
        n_categories: j,
    };
    while splits.len() < j - 1 {
        let found = split_search(data, &base, &splits, None, options, &mut trace)?;
        let k_new = found.spec.n_params();
        let test = deviance_test(
            found.fit.log_likelihood.max(*lls.last().expect("nonempty")),
            *lls.last().expect("nonempty"),
            k_new - k_cur,
            alpha,
        )?;
        if let Some(step) = trace.steps.iter_mut().rev().find(|s| s.decision == "best") {
            step.statistic = Some(test.statistic);
            step.p_value = Some(test.p_value);
            step.decision = if test.accept {
                "accepted".into()
            } else {
                "rejected".into()
            };
        }
        if !test.accept {
            break;
        }
        splits = found.splits;
        lls.push(found.fit.log_likelihood);
        k_cur = k_new;
    }
    Ok(IndistinguishabilityResult {
        splits,
        log_likelihoods: lls,
        trace,
    })
}

/// Consecutive category groups `{1..s_1}, {s_1+1..s_2}, …, {s_last+1..J}`.
pub fn groups_from_splits(splits: &[usize], n_categories: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut start = 1;
    for &s in splits {
        groups.push((start..=s).collect());
        start = s + 1;
    }
    groups.push((start..=n_categories).collect());
    groups
}

/// Depth-2 tree equivalent to a canonical block-split model: root children
/// are the split groups, the root carries a `(reference, logistic,
/// complete)` model over the groups and every non-singleton group a minimal
/// model. Parameters are mapped so that both give identical probabilities.
pub fn block_split_to_tree(
    spec: &GlmSpec,
    beta: &ParameterVector,
    variable_names: &[String],
) -> Result<PcglmSpec> {
    let DesignKind::BlockSplit(splits) = &spec.design.kind else {
        return Err(Error::Spec("expected a block-split design".into()));
    };
    if !spec.is_canonical() {
        return Err(Error::Spec(
            "the tree equivalence needs the (reference, logistic) model".into(),
        ));
    }
    if variable_names.len() != spec.design.variables.len() {
        return Err(Error::Spec("one name per design variable required".into()));
    }
    let j = spec.n_categories;
    let p = spec.design.variables.len();
    if beta.len() != spec.n_params() {
        return Err(Error::Spec(
            "parameter vector does not match the design".into(),
        ));
    }
    let groups = groups_from_splits(splits, j);
    let g = groups.len();
    let alpha = |k: usize| if k == j { 0.0 } else { beta.0[k - 1] };
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let last_lse = lse(&mut groups[g - 1].iter().map(|&k| alpha(k)));
    let mut root_beta: Vec<f64> = (0..g - 1)
        .map(|gi| lse(&mut groups[gi].iter().map(|&k| alpha(k))) - last_lse)
        .collect();
    root_beta.extend_from_slice(&beta.0.as_slice()[j - 1..j - 1 + (g - 1) * p]);
    let mut nodes = vec![NodeSpec {
        model: NodeModel::glm(
            RatioKind::Reference,
            CdfKind::Logistic,
            DesignKind::Complete,
            variable_names.to_vec(),
        ),
        share_group: None,
        beta: Some(root_beta),
    }];
    for grp in &groups {
        if grp.len() > 1 {
            let last = alpha(*grp.last().expect("nonempty"));
            nodes.push(NodeSpec {
                beta: Some(
                    grp[..grp.len() - 1]
                        .iter()
                        .map(|&k| alpha(k) - last)
                        .collect(),
                ),
                ..NodeSpec::minimal()
            });
        }
    }
    let tree = PartitionTree::new(TreeShape::from_groups(&groups), j)?;
    PcglmSpec::new(PcglmSpec::default_categories(j), tree, nodes)
}

/// Inverse of [`block_split_to_tree`]: recovers the block-split model and
/// its parameters from a parameterised depth-2 tree of consecutive groups.
pub fn tree_to_block_split(
    spec: &PcglmSpec,
    variable_columns: &[usize],
) -> Result<(GlmSpec, ParameterVector)> {
    let tree = &spec.tree;
    let j = tree.n_categories();
    let groups = tree.child_sets(0);
    let mut splits = Vec::new();
    let mut next = 1;
    for grp in &groups {
        if grp != &(next..next + grp.len()).collect::<Vec<_>>() {
            return Err(Error::Spec(
                "root children must be consecutive category groups".into(),
            ));
        }
        next += grp.len();
        splits.push(next - 1);
    }
    splits.pop();
    let NodeModel::Glm {
        ratio: RatioKind::Reference,
        cdf: CdfKind::Logistic,
        design: DesignKind::Complete,
        variables,
    } = &spec.nodes[0].model
    else {
        return Err(Error::Spec(
            "root must carry the (reference, logistic, complete) model".into(),
        ));
    };
    if variables.len() != variable_columns.len() {
        return Err(Error::Spec("one column per root variable required".into()));
    }
    let g = groups.len();
    let p = variables.len();
    let root_beta = spec.nodes[0]
        .beta
        .as_ref()
        .ok_or_else(|| Error::Spec("root has no parameters".into()))?;
    // Within-group log-probabilities from the minimal children.
    let mut log_within: BTreeMap<usize, f64> = BTreeMap::new();
    let mut node_iter = spec.nodes[1..].iter();
    for grp in &groups {
        if grp.len() == 1 {
            log_within.insert(grp[0], 0.0);
            continue;
        }
        let node = node_iter
            .next()
            .ok_or_else(|| Error::Spec("missing group node".into()))?;
        if !node.model.is_minimal() {
            return Err(Error::Spec(
                "group vertices must carry minimal models".into(),
            ));
        }
        let b = node
            .beta
            .as_ref()
            .ok_or_else(|| Error::Spec("group node has no parameters".into()))?;
        let mut logits = b.clone();
        logits.push(0.0);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (&k, l) in grp.iter().zip(&logits) {
            log_within.insert(k, l - lse);
        }
    }
    if tree.depth() > 2 || node_iter.next().is_some() {
        return Err(Error::Spec(
            "tree must have depth 2 with one vertex per group".into(),
        ));
    }
    let ln_pj = log_within[&j];
    let mut beta = Vec::with_capacity(j - 1 + (g - 1) * p);
    for (gi, grp) in groups.iter().enumerate() {
        for &k in grp.iter().filter(|&&k| k < j) {
            let offset = if gi + 1 < g { root_beta[gi] } else { 0.0 };
            beta.push(log_within[&k] - ln_pj + offset);
        }
    }
    beta.extend_from_slice(&root_beta[g - 1..]);
    let glm = GlmSpec::new(
        RatioKind::Reference,
        CdfKind::Logistic,
        DesignSpec::new(DesignKind::BlockSplit(splits), variable_columns.to_vec()),
        j,
    )?;
    Ok((glm, ParameterVector::from_vec(beta)))
}

/// Result of the extended procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedResult {
    pub spec: PcglmSpec,
    pub fit: PcglmFit,
    /// Log-likelihood before the CDF refinement pass.
    pub pre_refinement_log_likelihood: f64,
    pub trace: SelectionTrace,
}

/// Selected structure below one vertex, in original category labels.
struct Built {
    shape: TreeShape,
    models: Vec<(Vec<usize>, NodeModel)>,
}

/// Sub-dataset of the categories in `set` relabelled `1..|set|` in order.
fn restrict_to(data: &CategoricalDataset, set: &[usize]) -> CategoricalDataset {
    let map: Vec<usize> = (1..=data.n_categories)
        .map(|j| set.iter().position(|&k| k == j).map(|p| p + 1).unwrap_or(0))
        .collect();
    data.relabel(&map, set.len())
}

struct Procedure<'a> {
    data: &'a CategoricalDataset,
    family: &'a ModelFamily,
    options: &'a SelectionOptions,
    trace: SelectionTrace,
}

struct GroupCandidate {
    groups: Vec<Vec<usize>>,
    spec: PcglmSpec,
    result: Result<PcglmFit>,
}

impl Procedure<'_> {
    fn n_bic(&self, node_data: &CategoricalDataset) -> f64 {
        match self.options.bic_sample {
            BicSample::Node => node_data.total_weight(),
            BicSample::Global => self.data.total_weight(),
        }
    }

    /// Grouped model on local labels `1..J_v`: family over the groups,
    /// minimal models inside groups.
    fn grouped_spec(
        &self,
        groups: &[Vec<usize>],
        variables: &[String],
        n: usize,
    ) -> Result<PcglmSpec> {
        let tree = PartitionTree::new(TreeShape::from_groups(groups), n)?;
        let mut nodes = vec![NodeSpec::new(self.family.node_model(variables))];
        nodes.extend(
            groups
                .iter()
                .filter(|g| g.len() > 1)
                .map(|_| NodeSpec::minimal()),
        );
        PcglmSpec::new(PcglmSpec::default_categories(n), tree, nodes)
    }

    fn evaluate(
        &self,
        local: &CategoricalDataset,
        variables: &[String],
        partitions: Vec<Vec<Vec<usize>>>,
    ) -> Vec<GroupCandidate> {
        partitions
            .into_par_iter()
            .map(|groups| {
                let spec = self
                    .grouped_spec(&groups, variables, local.n_categories)
                    .expect("consecutive groups form a valid tree");
                let result = pcglm_fit(&spec, local, &self.options.fit).and_then(|f| {
                    if f.log_likelihood.is_finite() {
                        Ok(f)
                    } else {
                        Err(Error::numerical("candidate fit failed"))
                    }
                });
                GroupCandidate {
                    groups,
                    spec,
                    result,
                }
            })
            .collect()
    }

    fn log_candidate(
        &mut self,
        context: &str,
        c: &GroupCandidate,
        test: Option<DevianceTest>,
        decision: &str,
        original: &[usize],
    ) {
        let desc = c
            .groups
            .iter()
            .map(|g| fmt_set(&g.iter().map(|&k| original[k - 1]).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
            .join("|");
        let (ll, k) = match &c.result {
            Ok(f) => (f.log_likelihood, f.n_params),
            Err(_) => (f64::NAN, 0),
        };
        self.trace.push(TraceStep {
            context: context.to_string(),
            candidate: format!("groups {desc}"),
            spec_hash: pcglm_hash(&c.spec),
            log_likelihood: ll,
            n_params: k,
            bic: None,
            statistic: test.map(|t| t.statistic),
            p_value: test.map(|t| t.p_value),
            decision: if c.result.is_err() {
                "failed".into()
            } else {
                decision.into()
            },
        });
    }

    /// Decides whether a candidate replaces the current model.
    fn accept(
        &self,
        l_cand: f64,
        k_cand: usize,
        l_cur: f64,
        k_cur: usize,
    ) -> Result<(bool, Option<DevianceTest>)> {
        use std::cmp::Ordering::*;
        Ok(match k_cand.cmp(&k_cur) {
            Equal => (l_cand > l_cur, None),
            Greater => {
                let t =
                    deviance_test(l_cand.max(l_cur), l_cur, k_cand - k_cur, self.options.alpha)?;
                (t.accept, Some(t))
            }
            Less => {
                if l_cand >= l_cur {
                    (true, None)
                } else {
                    let t = deviance_test(l_cur, l_cand, k_cur - k_cand, self.options.alpha)?;
                    (!t.accept, Some(t))
                }
            }
        })
    }

    fn process(&mut self, set: &[usize], candidates: &[String]) -> Result<Built> {
        if set.len() == 1 {
            return Ok(Built {
                shape: TreeShape::Leaf(set[0]),
                models: Vec::new(),
            });
        }
        let label = fmt_set(set);
        let local = restrict_to(self.data, set);
        let leaves = TreeShape::Node(set.iter().map(|&k| TreeShape::Leaf(k)).collect());
        if local.is_empty() {
            return Ok(Built {
                shape: leaves,
                models: vec![(set.to_vec(), NodeModel::Minimal)],
            });
        }

        // (a) covariates of this vertex
        let n_bic = self.n_bic(&local);
        let chosen = select_variables(
            &local,
            self.family,
            candidates,
            n_bic,
            self.options,
            &format!("variables {label}"),
            &mut self.trace,
        )?;
        let vars = chosen.variables;
        if vars.is_empty() || set.len() == 2 {
            return Ok(Built {
                shape: leaves,
                models: vec![(set.to_vec(), self.family.node_model(&vars))],
            });
        }

        // (b) grouping of the children
        let n = set.len();
        let singletons: Vec<Vec<usize>> = (1..=n).map(|k| vec![k]).collect();
        let base = self
            .evaluate(&local, &vars, vec![singletons.clone()])
            .remove(0);
        let context = format!("groups {label}");
        self.log_candidate(&context, &base, None, "baseline", set);
        let base_fit = base
            .result
            .map_err(|e| Error::numerical(format!("vertex {label}: {e}")))?;
        let (mut l_cur, mut k_cur) = (base_fit.log_likelihood, base_fit.n_params);
        let mut groups: Vec<Vec<usize>> = vec![(1..=n).collect()];
        loop {
            let mut partitions = Vec::new();
            for (gi, g) in groups.iter().enumerate() {
                for cut in 1..g.len() {
                    let mut p = groups[..gi].to_vec();
                    p.push(g[..cut].to_vec());
                    p.push(g[cut..].to_vec());
                    p.extend_from_slice(&groups[gi + 1..]);
                    partitions.push(p);
                }
            }
            if partitions.is_empty() {
                break;
            }
            let cands = self.evaluate(&local, &vars, partitions);
            let mut best: Option<usize> = None;
            for (i, c) in cands.iter().enumerate() {
                if let Ok(f) = &c.result {
                    let better = best.is_none_or(|b| {
                        f.log_likelihood > cands[b].result.as_ref().expect("ok").log_likelihood
                    });
                    if better {
                        best = Some(i);
                    }
                }
            }
            let Some(bi) = best else {
                for c in &cands {
                    self.log_candidate(&context, c, None, "rejected", set);
                }
                break;
            };
            let bf = cands[bi].result.as_ref().expect("ok");
            let (accepted, test) = self.accept(bf.log_likelihood, bf.n_params, l_cur, k_cur)?;
            for (i, c) in cands.iter().enumerate() {
                let decision = if i == bi && accepted {
                    "accepted"
                } else {
                    "rejected"
                };
                self.log_candidate(
                    &context,
                    c,
                    if i == bi { test } else { None },
                    decision,
                    set,
                );
            }
            if !accepted {
                break;
            }
            l_cur = bf.log_likelihood;
            k_cur = bf.n_params;
            groups = cands[bi].groups.clone();
            if groups.len() == n {
                break;
            }
        }

        // (c) recurse into the groups
        let as_original = |g: &Vec<usize>| g.iter().map(|&k| set[k - 1]).collect::<Vec<usize>>();
        if groups.len() == 1 || groups.len() == n {
            return Ok(Built {
                shape: leaves,
                models: vec![(set.to_vec(), self.family.node_model(&vars))],
            });
        }
        let mut models = vec![(set.to_vec(), self.family.node_model(&vars))];
        let mut children = Vec::new();
        for g in &groups {
            let sub = self.process(&as_original(g), &vars)?;
            children.push(sub.shape);
            models.extend(sub.models);
        }
        Ok(Built {
            shape: TreeShape::Node(children),
            models,
        })
    }

    fn assemble(&self, built: Built) -> Result<PcglmSpec> {
        let j = self.data.n_categories;
        let tree = PartitionTree::new(built.shape, j)?;
        let mut by_set: BTreeMap<Vec<usize>, NodeModel> = built.models.into_iter().collect();
        let nodes = tree
            .internal_vertices()
            .iter()
            .map(|&v| {
                by_set
                    .remove(&tree.vertex(v).set)
                    .map(NodeSpec::new)
                    .ok_or_else(|| {
                        Error::Spec(format!(
                            "no model for vertex {}",
                            fmt_set(&tree.vertex(v).set)
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        PcglmSpec::new(PcglmSpec::default_categories(j), tree, nodes)
    }

    fn cdf_grid(&self) -> Vec<CdfKind> {
        let mut grid = vec![
            CdfKind::Logistic,
            CdfKind::Normal,
            CdfKind::Laplace,
            CdfKind::GumbelMin,
            CdfKind::GumbelMax,
        ];
        grid.extend(
            self.options
                .student_dfs
                .iter()
                .map(|&d| CdfKind::Student(d)),
        );
        grid
    }

    /// Per GLM node, keeps the CDF with the highest node log-likelihood.
    fn refine(&mut self, spec: &PcglmSpec, fit: &PcglmFit) -> Result<PcglmSpec> {
        let mut out = spec.clone();
        let internal = spec.tree.internal_vertices();
        for (pos, &v) in internal.iter().enumerate() {
            let NodeModel::Glm {
                ratio,
                cdf: current,
                design,
                variables,
            } = &spec.nodes[pos].model
            else {
                continue;
            };
            let set = spec.tree.vertex(v).set.clone();
            let label = fmt_set(&set);
            // Node-only model on the vertex's own categories.
            let local = restrict_to(self.data, &set);
            let local_groups: Vec<Vec<usize>> = spec
                .tree
                .child_sets(v)
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|k| set.iter().position(|s| s == k).expect("member") + 1)
                        .collect()
                })
                .collect();
            let grid = self.cdf_grid();
            let results: Vec<(CdfKind, Result<f64>)> = grid
                .par_iter()
                .map(|&cdf| -> (CdfKind, Result<f64>) {
                    let run = || -> Result<f64> {
                        let node_model =
                            NodeModel::glm(*ratio, cdf, design.clone(), variables.clone());
                        let tree =
                            PartitionTree::new(TreeShape::from_groups(&local_groups), set.len())?;
                        let mut nodes = vec![NodeSpec::new(node_model)];
                        nodes.extend(
                            local_groups
                                .iter()
                                .filter(|g| g.len() > 1)
                                .map(|_| NodeSpec::minimal()),
                        );
                        let s =
                            PcglmSpec::new(PcglmSpec::default_categories(set.len()), tree, nodes)?;
                        let f = pcglm_fit(&s, &local, &self.options.fit)?;
                        // only the node's own term matters
                        let ll = f.nodes[0].log_likelihood;
                        if ll.is_finite() && f.nodes[0].converged() {
                            Ok(ll)
                        } else {
                            Err(Error::numerical("refinement fit failed"))
                        }
                    };
                    (cdf, run())
                })
                .collect();
            let current_ll = fit.nodes[pos].log_likelihood;
            let mut best = (*current, current_ll);
            for (cdf, r) in &results {
                if let Ok(ll) = r {
                    if *ll > best.1 + 1e-12 {
                        best = (*cdf, *ll);
                    }
                }
            }
            for (cdf, r) in &results {
                self.trace.push(TraceStep {
                    context: format!("refine {label}"),
                    candidate: format!(
                        "cdf {}{}",
                        cdf.name(),
                        cdf.shape().map(|d| format!("({d})")).unwrap_or_default()
                    ),
                    spec_hash: spec_hash(&format!("{label}|{}|{:?}", cdf.name(), cdf.shape())),
                    log_likelihood: *r.as_ref().unwrap_or(&f64::NAN),
                    n_params: fit.nodes[pos].n_params,
                    bic: None,
                    statistic: None,
                    p_value: None,
                    decision: match r {
                        Err(_) => "failed".into(),
                        Ok(_) if *cdf == best.0 => "selected".into(),
                        Ok(_) => "rejected".into(),
                    },
                });
            }
            out.nodes[pos].model =
                NodeModel::glm(*ratio, best.0, design.clone(), variables.clone());
        }
        Ok(out)
    }
}

/// Grows a partition tree over ordered categories while selecting the
/// covariates of every vertex.
///
/// At each vertex: (a) choose covariates among those of the parent (all
/// covariates at the root) under `family` with the children as singletons —
/// an empty choice makes the vertex minimal and ends the branch; (b) group
/// the children into consecutive blocks, refining one block at a time and
/// keeping a refinement when it raises the log-likelihood at equal
/// parameter count (deviance tests otherwise); (c) recurse into every
/// block of two or more categories. Finally every GLM vertex is re-fitted
/// under each CDF and the best is kept.
pub fn extended_procedure(
    data: &CategoricalDataset,
    family: &ModelFamily,
    options: &SelectionOptions,
) -> Result<ExtendedResult> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Spec(
            "cannot select a model on an empty dataset".into(),
        ));
    }
    let mut proc = Procedure {
        data,
        family,
        options,
        trace: SelectionTrace::default(),
    };
    let all: Vec<String> = data.variables.iter().map(|v| v.name.clone()).collect();
    let root: Vec<usize> = (1..=data.n_categories).collect();
    let built = proc.process(&root, &all)?;
    let spec = proc.assemble(built)?;
    let fit0 = pcglm_fit(&spec, data, &options.fit)?;
    let pre = fit0.log_likelihood;
    let (spec, fit) = if options.refine {
        let refined = proc.refine(&spec, &fit0)?;
        let fit = pcglm_fit(&refined, data, &options.fit)?;
        (refined, fit)
    } else {
        (spec, fit0)
    };
    Ok(ExtendedResult {
        spec,
        fit,
        pre_refinement_log_likelihood: pre,
        trace: proc.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Regularized upper incomplete gamma by series / continued fraction.
    fn q_gamma(a: f64, x: f64) -> f64 {
        fn ln_g(z: f64) -> f64 {
            // Lanczos, g = 7
            const C: [f64; 9] = [
                0.999_999_999_999_809_9,
                676.520_368_121_885_1,
                -1_259.139_216_722_402_8,
                771.323_428_777_653_1,
                -176.615_029_162_140_6,
                12.507_343_278_686_905,
                -0.138_571_095_265_720_12,
                9.984_369_578_019_572e-6,
                1.505_632_735_149_311_6e-7,
            ];
            let z = z - 1.0;
            let mut s = C[0];
            for (i, c) in C.iter().enumerate().skip(1) {
                s += c / (z + i as f64);
            }
            let t = z + 7.5;
            0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + s.ln()
        }
        if x < a + 1.0 {
            let mut sum = 1.0 / a;
            let mut term = sum;
            for n in 1..500 {
                term *= x / (a + n as f64);
                sum += term;
            }
            1.0 - sum * (-x + a * x.ln() - ln_g(a)).exp()
        } else {
            let mut b = x + 1.0 - a;
            let mut c = 1e300;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..500 {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                d = 1.0 / d;
                c = b + an / c;
                h *= d * c;
            }
            (-x + a * x.ln() - ln_g(a)).exp() * h
        }
    }

    #[test]
    fn chi2_examples() {
        assert_eq!(chi2_sf(0.0, 3).unwrap(), 1.0);
        assert!((chi2_sf(2.0, 2).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let q = chi2_quantile(0.95, 3).unwrap();
        assert!((q - 7.814_727_903_251_178).abs() < 1e-9, "{q}");
        assert!((chi2_sf(3.0, 1).unwrap() - 0.083_264_516_663_550_3).abs() < 1e-9);
        assert!(chi2_sf(-1.0, 1).is_err());
        assert!(chi2_quantile(1.0, 1).is_err());
    }

    #[test]
    fn chi2_matches_independent_incomplete_gamma() {
        for df in 1..=12 {
            for &x in &[0.01, 0.5, 1.0, 2.5, 7.0, 15.0, 40.0] {
                let a = chi2_sf(x, df).unwrap();
                let b = q_gamma(df as f64 / 2.0, x / 2.0);
                assert!((a - b).abs() < 1e-10, "df {df} x {x}: {a} vs {b}");
            }
            for &q in &[0.01, 0.5, 0.95, 0.999] {
                let x = chi2_quantile(q, df).unwrap();
                assert!((1.0 - q_gamma(df as f64 / 2.0, x / 2.0) - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deviance_examples() {
        let t = deviance_test(-10.0, -10.0, 2, 0.05).unwrap();
        assert_eq!((t.statistic, t.p_value, t.accept), (0.0, 1.0, false));
        let crit = chi2_quantile(0.95, 2).unwrap();
        assert!(
            deviance_test(-10.0 + crit / 2.0 + 1e-6, -10.0, 2, 0.05)
                .unwrap()
                .accept
        );
        let t = deviance_test(-8.5, -10.0, 1, 0.05).unwrap();
        assert!((t.p_value - 0.0833).abs() < 1e-4 && !t.accept);
        assert!(deviance_test(-11.0, -10.0, 1, 0.05).is_err());
    }

    #[test]
    fn bic_examples() {
        assert_eq!(bic(-5.0, 0, 100.0), -5.0);
        let e2 = bic(-5.0, 3, std::f64::consts::E.powi(2));
        let e4 = bic(-5.0, 3, std::f64::consts::E.powi(4));
        assert!(((e2 - e4) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn subsets_are_ordered_by_size() {
        let c: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = subsets_by_size(&c);
        assert_eq!(s.len(), 8);
        assert!(s[0].is_empty());
        assert_eq!(s[1], vec!["a".to_string()]);
        assert_eq!(s[7].len(), 3);
    }

    #[test]
    fn groups_from_split_points() {
        assert_eq!(
            groups_from_splits(&[2, 4], 6),
            vec![vec![1, 2], vec![3, 4], vec![5, 6]]
        );
        assert_eq!(groups_from_splits(&[], 3), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn trace_jsonl_is_one_record_per_line() {
        let mut t = SelectionTrace::default();
        t.push(TraceStep {
            context: "c".into(),
            candidate: "x".into(),
            spec_hash: spec_hash("m"),
            log_likelihood: -1.5,
            n_params: 2,
            bic: Some(-3.0),
            statistic: None,
            p_value: None,
            decision: "selected".into(),
        });
        let s = t.to_jsonl();
        assert_eq!(s.lines().count(), 1);
        assert!(s.contains("\"bic\":-3.0") && !s.contains("p_value"));
        assert_eq!(spec_hash("m").len(), 16);
    }
}
