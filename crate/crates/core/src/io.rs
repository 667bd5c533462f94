//! Delimited-table ingestion, simulation, and the command workflows behind
//! the `pcglm` binary (fit, select, simulate, poset2tree, report).
//!
//! Commands return their outputs as values so they can be driven
//! in-process; the binary only parses arguments and writes files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::Serialize;

use crate::design::{dummy_encode, CovariateRow};
use crate::error::{Error, Result};
use crate::glm::{CategoricalDataset, FitOptions, Observation, VariableGroup};
use crate::link::RatioKind;
use crate::poset::{lexicographic_tree, poset_to_tree, product_order, Composition, HasseDiagram, OrderedFactorSpec};
use crate::selection::{bic, extended_procedure, ModelFamily, SelectionOptions};
use crate::tree::{
    fit_from_parameters, fmt_set, pcglm_fit, pcglm_predict, spec_with_parameters, CovariateDecl, CovariateGenerator,
    NodeModel, NodeStatus, PcglmFit, PcglmSpec,
};

/// Identifier of the generator used by `simulate`, recorded in file headers.
pub const RNG_NAME: &str = "ChaCha8Rng";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    /// Dummy coded, first level as baseline.
    Categorical(Vec<String>),
    /// Coded `1, 2, …` in the declared level order.
    Ordinal(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: ColumnKind,
}

impl CovariateColumn {
    /// Parses `name`, `name:numeric`, `name:categorical:a,b,c` or
    /// `name:ordinal:low,mid,high`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.splitn(3, ':');
        let name = parts.next().unwrap_or_default().trim().to_string();
        if name.is_empty() {
            return Err(Error::Parse(format!("covariate '{text}' has no name")));
        }
        let kind = match (parts.next(), parts.next()) {
            (None, _) | (Some("numeric"), None) => ColumnKind::Numeric,
            (Some("categorical"), Some(levels)) => ColumnKind::Categorical(split_levels(levels)?),
            (Some("ordinal"), Some(levels)) => ColumnKind::Ordinal(split_levels(levels)?),
            _ => {
                return Err(Error::Parse(format!(
                    "covariate '{text}': expected name:numeric, name:categorical:l1,l2,… or name:ordinal:l1,l2,…"
                )))
            }
        };
        Ok(Self { name, kind })
    }
}

fn split_levels(text: &str) -> Result<Vec<String>> {
    let levels: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
    if levels.len() < 2 || levels.iter().any(String::is_empty) {
        return Err(Error::Parse(format!("level list '{text}' needs at least two non-empty levels")));
    }
    Ok(levels)
}

/// Where and how to read a data table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub path: PathBuf,
    pub delimiter: u8,
    pub response: String,
    /// Response levels in category order `1…J`.
    pub response_levels: Vec<String>,
    pub covariates: Vec<CovariateColumn>,
    pub weight: Option<String>,
    /// Merge rows with identical covariates and response into one weighted row.
    pub aggregate_duplicates: bool,
    /// Centre and scale numeric and ordinal columns to weighted mean 0, sd 1.
    pub standardize: bool,
}

impl TableSpec {
    pub fn new(path: impl Into<PathBuf>, response: &str, response_levels: Vec<String>) -> Self {
        Self {
            path: path.into(),
            delimiter: b',',
            response: response.to_string(),
            response_levels,
            covariates: Vec::new(),
            weight: None,
            aggregate_duplicates: false,
            standardize: false,
        }
    }
}

/// Covariate columns implied by simulation generators.
pub fn columns_from_decls(decls: &[CovariateDecl]) -> Vec<CovariateColumn> {
    decls
        .iter()
        .map(|d| CovariateColumn {
            name: d.name.clone(),
            kind: match &d.generator {
                CovariateGenerator::Categorical { levels, .. } => ColumnKind::Categorical(levels.clone()),
                _ => ColumnKind::Numeric,
            },
        })
        .collect()
}

/// Reads a delimited table with a header row. Lines starting with `#` are
/// comments. Errors name the data row (1-based, header excluded) and column.
pub fn load_table(table: &TableSpec) -> Result<CategoricalDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(table.delimiter)
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(&table.path)
        .map_err(|e| Error::Io(format!("{}: {e}", table.path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", table.path.display())))?
        .clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Parse(format!(
                "column '{name}' not found in header [{}] (wrong delimiter?)",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    if table.response_levels.len() < 2 {
        return Err(Error::Parse("at least two response levels must be declared".into()));
    }
    let response_col = find(&table.response)?;
    let weight_col = table.weight.as_deref().map(find).transpose()?;
    let cov_cols = table
        .covariates
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut column_names = Vec::new();
    let mut variables = Vec::new();
    for c in &table.covariates {
        let start = column_names.len();
        match &c.kind {
            ColumnKind::Categorical(levels) => {
                column_names.extend(levels[1..].iter().map(|l| format!("{}={l}", c.name)));
            }
            _ => column_names.push(c.name.clone()),
        }
        variables.push(VariableGroup {
            name: c.name.clone(),
            columns: (start..column_names.len()).collect(),
        });
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        let field = |col: usize, name: &str| -> Result<String> {
            let v = record.get(col).map(str::trim).unwrap_or("");
            if v.is_empty() || v.eq_ignore_ascii_case("na") {
                return Err(Error::Parse(format!("row {row}, column '{name}': missing value")));
            }
            Ok(v.to_string())
        };
        let y = field(response_col, &table.response)?;
        let response = table
            .response_levels
            .iter()
            .position(|l| *l == y)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "row {row}, column '{}': undeclared response level '{y}'",
                    table.response
                ))
            })?
            + 1;
        let weight = match weight_col {
            Some(c) => {
                let name = table.weight.as_deref().unwrap_or_default();
                let w: f64 = field(c, name)?
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {row}, column '{name}': weight is not a number")))?;
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::Parse(format!("row {row}, column '{name}': weight must be positive")));
                }
                w
            }
            None => 1.0,
        };
        let mut values = Vec::with_capacity(column_names.len());
        for (c, &col) in table.covariates.iter().zip(&cov_cols) {
            let v = field(col, &c.name)?;
            match &c.kind {
                ColumnKind::Numeric => values.push(v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(
                    || Error::Parse(format!("row {row}, column '{}': '{v}' is not a number", c.name)),
                )?),
                ColumnKind::Categorical(levels) => values.extend(dummy_encode(levels, &v).ok_or_else(|| {
                    Error::Parse(format!("row {row}, column '{}': unknown level '{v}'", c.name))
                })?),
                ColumnKind::Ordinal(levels) => values.push(
                    levels
                        .iter()
                        .position(|l| *l == v)
                        .ok_or_else(|| Error::Parse(format!("row {row}, column '{}': unknown level '{v}'", c.name)))?
                        as f64
                        + 1.0,
                ),
            }
        }
        rows.push(Observation {
            x: CovariateRow::new(values),
            response,
            weight,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", table.path.display())));
    }
    if table.aggregate_duplicates {
        rows = aggregate(rows);
    }
    if table.standardize {
        standardize(&mut rows, table);
    }
    let ds = CategoricalDataset {
        n_categories: table.response_levels.len(),
        rows,
        column_names,
        variables,
    };
    ds.validate()?;
    Ok(ds)
}

/// Merges identical (covariates, response) rows, keeping first-occurrence order.
pub fn aggregate(rows: Vec<Observation>) -> Vec<Observation> {
    let mut index: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
    let mut out: Vec<Observation> = Vec::new();
    for r in rows {
        let key = (r.x.values.iter().map(|v| v.to_bits()).collect(), r.response);
        match index.get(&key) {
            Some(&i) => out[i].weight += r.weight,
            None => {
                index.insert(key, out.len());
                out.push(r);
            }
        }
    }
    out
}

fn standardize(rows: &mut [Observation], table: &TableSpec) {
    let mut col = 0;
    for c in &table.covariates {
        match &c.kind {
            ColumnKind::Categorical(levels) => col += levels.len() - 1,
            _ => {
                let total: f64 = rows.iter().map(|r| r.weight).sum();
                let mean = rows.iter().map(|r| r.weight * r.x.values[col]).sum::<f64>() / total;
                let var = rows.iter().map(|r| r.weight * (r.x.values[col] - mean).powi(2)).sum::<f64>() / total;
                let sd = var.sqrt();
                for r in rows.iter_mut() {
                    r.x.values[col] -= mean;
                    if sd > 0.0 {
                        r.x.values[col] /= sd;
                    }
                }
                col += 1;
            }
        }
    }
}

/// Estimates at 6 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Log-likelihoods at 6 decimals.
pub fn fmt_ll(x: f64) -> String {
    format!("{x:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterReport {
    pub label: String,
    pub estimate: String,
    pub standard_error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub vertex: String,
    pub children: String,
    pub model: String,
    pub log_likelihood: String,
    pub n_params: usize,
    pub n_obs: String,
    pub status: String,
    pub parameters: Vec<ParameterReport>,
}

/// Summary of a fitted model, deterministic for identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub categories: Vec<String>,
    pub tree: String,
    pub log_likelihood: String,
    pub n_params: usize,
    pub n_obs: String,
    pub bic: String,
    pub converged: bool,
    pub nodes: Vec<NodeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_refinement_log_likelihood: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_records: Option<usize>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

fn describe_model(model: &NodeModel) -> String {
    match model {
        NodeModel::Minimal => "minimal".into(),
        NodeModel::Glm {
            ratio,
            cdf,
            design,
            variables,
        } => {
            let cdf = match cdf.shape() {
                Some(df) => format!("{}({df})", cdf.name()),
                None => cdf.name().to_string(),
            };
            format!("({}, {cdf}, {design:?}) on [{}]", ratio.name(), variables.join(", ")).to_lowercase()
        }
    }
}

fn names_of(set: &[usize], categories: &[String]) -> String {
    let names: Vec<&str> = set.iter().map(|&j| categories[j - 1].as_str()).collect();
    format!("{{{}}}", names.join(","))
}

impl RunReport {
    pub fn build(command: &str, spec: &PcglmSpec, fit: &PcglmFit, data: &CategoricalDataset) -> Self {
        let cats = &spec.categories;
        let nodes = spec
            .nodes
            .iter()
            .zip(&fit.nodes)
            .map(|(ns, nf)| {
                let parameters = match (&nf.glm, &nf.beta) {
                    (Some(g), Some(b)) => {
                        let names: Vec<String> = nf.columns.iter().map(|&c| data.column_names[c].clone()).collect();
                        let labels = g.design.column_labels(g.n_categories, &names);
                        let ses = nf.result.as_ref().map(|r| r.standard_errors.clone()).unwrap_or_default();
                        labels
                            .into_iter()
                            .zip(b.as_slice())
                            .enumerate()
                            .map(|(k, (label, &est))| ParameterReport {
                                label,
                                estimate: fmt_sig(est),
                                standard_error: ses.get(k).map(|&s| fmt_sig(s)).unwrap_or_else(|| "NA".into()),
                            })
                            .collect()
                    }
                    (_, _) => nf
                        .probabilities
                        .iter()
                        .flatten()
                        .enumerate()
                        .map(|(k, &p)| ParameterReport {
                            label: format!("p_{}", k + 1),
                            estimate: fmt_sig(p),
                            standard_error: "NA".into(),
                        })
                        .collect(),
                };
                let children: Vec<String> = fit
                    .tree
                    .child_sets(fit.tree.find(&nf.vertex).expect("vertex"))
                    .iter()
                    .map(|c| names_of(c, cats))
                    .collect();
                NodeReport {
                    vertex: names_of(&nf.vertex, cats),
                    children: children.join(" | "),
                    model: describe_model(&ns.model),
                    log_likelihood: fmt_ll(nf.log_likelihood),
                    n_params: nf.n_params,
                    n_obs: fmt_sig(nf.n_obs),
                    status: match &nf.status {
                        NodeStatus::Fitted => {
                            if nf.converged() {
                                "fitted".into()
                            } else {
                                "not converged".into()
                            }
                        }
                        NodeStatus::Minimal => "closed form".into(),
                        NodeStatus::Degenerate(m) => format!("degenerate: {m}"),
                        NodeStatus::Failed(e) => format!("failed: {e}"),
                    },
                    parameters,
                }
            })
            .collect();
        RunReport {
            command: command.into(),
            categories: cats.clone(),
            tree: serde_json::to_string(spec.tree.shape()).expect("shape serializes"),
            log_likelihood: fmt_ll(fit.log_likelihood),
            n_params: fit.n_params,
            n_obs: fmt_sig(fit.n_obs),
            bic: fmt_ll(bic(fit.log_likelihood, fit.n_params, fit.n_obs)),
            converged: fit.converged,
            nodes,
            pre_refinement_log_likelihood: None,
            trace_records: None,
            warnings: fit.warnings.clone(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pcglm {}", self.command);
        let _ = writeln!(s, "categories: {}", self.categories.join(", "));
        let _ = writeln!(s, "tree: {}", self.tree);
        let _ = writeln!(s, "log-likelihood: {}", self.log_likelihood);
        if let Some(pre) = &self.pre_refinement_log_likelihood {
            let _ = writeln!(s, "log-likelihood before refinement: {pre}");
        }
        let _ = writeln!(s, "parameters: {}", self.n_params);
        let _ = writeln!(s, "observations: {}", self.n_obs);
        let _ = writeln!(s, "BIC (l - k ln(n)/2): {}", self.bic);
        let _ = writeln!(s, "converged: {}", self.converged);
        for n in &self.nodes {
            let _ = writeln!(s, "\nvertex {} -> {}", n.vertex, n.children);
            let _ = writeln!(s, "  model: {}", n.model);
            let _ = writeln!(
                s,
                "  log-likelihood: {}  parameters: {}  weight: {}  status: {}",
                n.log_likelihood, n.n_params, n.n_obs, n.status
            );
            for p in &n.parameters {
                let _ = writeln!(s, "  {:<28} {:>14} {:>14}", p.label, p.estimate, p.standard_error);
            }
        }
        if let Some(t) = self.trace_records {
            let _ = writeln!(s, "\nselection trace records: {t}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Output of `fit`: the report and the spec with fitted parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub report: RunReport,
    pub fitted_spec: PcglmSpec,
    pub fit: PcglmFit,
}

/// Fits the model in `spec_path` to the table. Without declared covariate
/// columns, the spec's simulation covariates (if any) describe the table.
pub fn cmd_fit(spec_path: &Path, table: &TableSpec, options: &FitOptions) -> Result<FitOutput> {
    let spec = PcglmSpec::from_json(&read_file(spec_path)?)?;
    let mut table = table.clone();
    if table.covariates.is_empty() {
        table.covariates = columns_from_decls(&spec.covariates);
    }
    if table.response_levels.is_empty() {
        table.response_levels = spec.categories.clone();
    }
    let data = load_table(&table)?;
    let fit = pcglm_fit(&spec, &data, options)?;
    let mut report = RunReport::build("fit", &spec, &fit, &data);
    if fit.nodes.iter().any(|n| matches!(n.status, NodeStatus::Failed(_))) {
        report.notes.push("some vertices failed to fit; see warnings".into());
    }
    Ok(FitOutput {
        report,
        fitted_spec: spec_with_parameters(&spec, &fit),
        fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectOutput {
    pub report: RunReport,
    pub spec: PcglmSpec,
    pub trace_jsonl: String,
}

/// Runs the extended selection procedure on the table.
pub fn cmd_select(table: &TableSpec, family: &ModelFamily, options: &SelectionOptions) -> Result<SelectOutput> {
    let data = load_table(table)?;
    let result = extended_procedure(&data, family, options)?;
    let mut spec = spec_with_parameters(&result.spec, &result.fit);
    spec.categories = table.response_levels.clone();
    let mut report = RunReport::build("select", &spec, &result.fit, &data);
    report.pre_refinement_log_likelihood = Some(fmt_ll(result.pre_refinement_log_likelihood));
    report.trace_records = Some(result.trace.steps.len());
    Ok(SelectOutput {
        report,
        spec,
        trace_jsonl: result.trace.to_jsonl(),
    })
}

fn draw_covariates(decls: &[CovariateDecl], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<String>)> {
    let mut values = Vec::new();
    let mut cells = Vec::new();
    for d in decls {
        match &d.generator {
            CovariateGenerator::Normal { mean, sd } => {
                let dist = Normal::new(*mean, *sd)
                    .map_err(|e| Error::Spec(format!("covariate '{}': {e}", d.name)))?;
                let v = dist.sample(rng);
                values.push(v);
                cells.push(format!("{v}"));
            }
            CovariateGenerator::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::Spec(format!("covariate '{}': empty uniform range", d.name)));
                }
                let v = rng.random_range(*low..*high);
                values.push(v);
                cells.push(format!("{v}"));
            }
            CovariateGenerator::Bernoulli { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Spec(format!("covariate '{}': p outside [0,1]", d.name)));
                }
                let v = if rng.random_bool(*p) { 1.0 } else { 0.0 };
                values.push(v);
                cells.push(format!("{v}"));
            }
            CovariateGenerator::Categorical { levels, probs } => {
                if levels.len() < 2 || levels.len() != probs.len() {
                    return Err(Error::Spec(format!(
                        "covariate '{}': need >= 2 levels and one probability per level",
                        d.name
                    )));
                }
                let dist = WeightedIndex::new(probs).map_err(|e| Error::Spec(format!("covariate '{}': {e}", d.name)))?;
                let k = dist.sample(rng);
                values.extend((1..levels.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
                cells.push(levels[k].clone());
            }
            CovariateGenerator::Fixed { value } => {
                values.push(*value);
                cells.push(format!("{value}"));
            }
        }
    }
    Ok((values, cells))
}

/// Variable groups of the simulation covariates.
pub fn decl_variables(decls: &[CovariateDecl]) -> Vec<VariableGroup> {
    let mut start = 0;
    decls
        .iter()
        .map(|d| {
            let g = VariableGroup {
                name: d.name.clone(),
                columns: (start..start + d.n_columns()).collect(),
            };
            start += d.n_columns();
            g
        })
        .collect()
}

/// Draws `n` rows from a fully parameterised spec. Returns CSV text whose
/// first line records the generator and seed.
pub fn cmd_simulate(spec: &PcglmSpec, n: usize, seed: u64, response: &str) -> Result<String> {
    let fit = fit_from_parameters(spec, &decl_variables(&spec.covariates))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = format!("# pcglm-simulate rng={RNG_NAME} seed={seed} n={n}\n");
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut header: Vec<String> = spec.covariates.iter().map(|d| d.name.clone()).collect();
    header.push(response.to_string());
    writer.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for i in 0..n {
        let (values, mut cells) = draw_covariates(&spec.covariates, &mut rng)?;
        let probs = pcglm_predict(&fit, &CovariateRow::new(values)).map_err(|e| match e {
            Error::PredictionDomain { message, .. } => Error::PredictionDomain { row: Some(i + 1), message },
            other => other,
        })?;
        let dist = WeightedIndex::new(probs.as_slice())
            .map_err(|e| Error::numerical(format!("simulated row {}: {e}", i + 1)))?;
        cells.push(spec.categories[dist.sample(&mut rng)].clone());
        writer.write_record(&cells).map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(out)
}

/// Builds a model skeleton from a Hasse diagram (`{elements, covers}`) or
/// from a factor description (`{factors, composition}`).
pub fn cmd_poset2tree(text: &str, ordered_ratio: RatioKind, variables: &[String]) -> Result<PcglmSpec> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let tree = if value.get("factors").is_some() {
        let factors: OrderedFactorSpec = serde_json::from_value(value)?;
        match factors.composition {
            Composition::Product => poset_to_tree(&product_order(&factors)?)?,
            Composition::Lexicographic(_) => lexicographic_tree(&factors)?,
        }
    } else {
        let h: HasseDiagram = serde_json::from_value(value)?;
        h.validate()?;
        poset_to_tree(&h)?
    };
    tree.skeleton(ordered_ratio, variables)
}

/// Readable rendering of a spec file (tree and node models, with
/// parameters when present).
pub fn cmd_report(spec: &PcglmSpec) -> String {
    let mut s = String::new();
    let cats = &spec.categories;
    let _ = writeln!(s, "categories: {}", cats.join(", "));
    let _ = writeln!(s, "tree: {}", serde_json::to_string(spec.tree.shape()).expect("shape serializes"));
    let _ = writeln!(s, "depth: {}  equations: {}", spec.tree.depth(), spec.tree.count_equations());
    for (&v, node) in spec.tree.internal_vertices().iter().zip(&spec.nodes) {
        let vx = spec.tree.vertex(v);
        let indent = "  ".repeat(vx.depth);
        let children: Vec<String> = spec.tree.child_sets(v).iter().map(|c| names_of(c, cats)).collect();
        let _ = writeln!(s, "{indent}{} -> {}", names_of(&vx.set, cats), children.join(" | "));
        let _ = writeln!(s, "{indent}  model: {}", describe_model(&node.model));
        if let Some(g) = &node.share_group {
            let _ = writeln!(s, "{indent}  shares parameters with group '{g}'");
        }
        if let Some(b) = &node.beta {
            let vals: Vec<String> = b.iter().map(|&x| fmt_sig(x)).collect();
            let _ = writeln!(s, "{indent}  parameters: [{}]", vals.join(", "));
        }
    }
    if !spec.covariates.is_empty() {
        let names: Vec<String> = spec.covariates.iter().map(|c| c.name.clone()).collect();
        let _ = writeln!(s, "simulation covariates: {}", names.join(", "));
    }
    s
}

/// Exit status for an error: 2 for unreadable or invalid input, 3 for
/// numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse(_) | Error::Spec(_) | Error::Io(_) | Error::Domain(_) => 2,
        Error::Numerical { .. } | Error::PredictionDomain { .. } | Error::Identifiability(_) => 3,
    }
}

/// Vertex label helper for messages.
pub fn vertex_label(set: &[usize], categories: &[String]) -> String {
    if categories.is_empty() {
        fmt_set(set)
    } else {
        names_of(set, categories)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_covariate_declarations() {
        assert_eq!(CovariateColumn::parse("age").unwrap().kind, ColumnKind::Numeric);
        assert_eq!(
            CovariateColumn::parse("sex:categorical:m,f").unwrap().kind,
            ColumnKind::Categorical(vec!["m".into(), "f".into()])
        );
        assert!(CovariateColumn::parse("x:ordinal:a").is_err());
        assert!(CovariateColumn::parse("x:weird").is_err());
    }

    #[test]
    fn loads_a_small_table() {
        let f = write_tmp("x,y\n0.5,a\n1.5,b\n-2,a\n");
        let mut t = TableSpec::new(f.path(), "y", vec!["a".into(), "b".into()]);
        t.covariates = vec![CovariateColumn::parse("x").unwrap()];
        let d = load_table(&t).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.rows[1].response, 2);
        assert_eq!(d.rows[2].x.values, vec![-2.0]);
        assert_eq!(d.total_weight(), 3.0);
    }

    #[test]
    fn undeclared_level_is_named() {
        let f = write_tmp("x,y\n0.5,a\n1.5,c\n");
        let mut t = TableSpec::new(f.path(), "y", vec!["a".into(), "b".into()]);
        t.covariates = vec![CovariateColumn::parse("x").unwrap()];
        let e = load_table(&t).unwrap_err();
        assert!(e.to_string().contains("'c'") && e.to_string().contains("row 2"), "{e}");
    }

    #[test]
    fn missing_value_and_bad_delimiter() {
        let f = write_tmp("x,y\n,a\n");
        let mut t = TableSpec::new(f.path(), "y", vec!["a".into(), "b".into()]);
        t.covariates = vec![CovariateColumn::parse("x").unwrap()];
        assert!(load_table(&t).unwrap_err().to_string().contains("missing"));
        let f = write_tmp("x;y\n1;a\n");
        let mut t = TableSpec::new(f.path(), "y", vec!["a".into(), "b".into()]);
        t.covariates = vec![CovariateColumn::parse("x").unwrap()];
        assert!(load_table(&t).unwrap_err().to_string().contains("delimiter"));
    }

    #[test]
    fn categorical_and_ordinal_coding() {
        let f = write_tmp("# comment line\ng,o,y\nu,lo,a\nv,hi,b\nw,mid,a\n");
        let mut t = TableSpec::new(f.path(), "y", vec!["a".into(), "b".into()]);
        t.covariates = vec![
            CovariateColumn::parse("g:categorical:u,v,w").unwrap(),
            CovariateColumn::parse("o:ordinal:lo,mid,hi").unwrap(),
        ];
        let d = load_table(&t).unwrap();
        assert_eq!(d.column_names, vec!["g=v", "g=w", "o"]);
        assert_eq!(d.rows[0].x.values, vec![0.0, 0.0, 1.0]);
        assert_eq!(d.rows[1].x.values, vec![1.0, 0.0, 3.0]);
        assert_eq!(d.variables[0].columns, vec![0, 1]);
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(1.234_567_89), "1.23457");
        assert_eq!(fmt_sig(-1234.5678), "-1234.57");
        assert_eq!(fmt_sig(0.000_123_456_7), "0.000123457");
        assert_eq!(fmt_sig(1.5e-9), "1.50000e-9");
        assert_eq!(fmt_ll(-159.0456), "-159.045600");
    }
}
