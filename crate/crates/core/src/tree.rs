//! Partition trees over response categories and partitioned conditional
//! GLMs built on them.
//!
//! A partition tree has the full category set `{1,…,J}` at its root; the
//! children of every non-terminal vertex partition it into at least two
//! parts, and every category ends in a singleton leaf. Each non-terminal
//! vertex carries its own GLM for the conditional probabilities of its
//! children, so `P(Y = j | x)` is the product of conditional probabilities
//! along the root-to-`{j}` path and the log-likelihood splits into one term
//! per non-terminal vertex.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{inclusive_values, CovariateRow, DesignKind, DesignSpec, ParameterVector};
use crate::error::{Error, Result};
use crate::glm::{
    fit, fit_precomputed, log_likelihood, predict_probs, CategoricalDataset, FitOptions, FitResult,
    GlmSpec, Observation, VariableGroup,
};
use crate::link::{CdfKind, ProbabilityVector, RatioKind};

/// Nested-list form of a tree: an integer is a leaf category (1-based),
/// an array is a non-terminal vertex listing its children in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeShape {
    Leaf(usize),
    Node(Vec<TreeShape>),
}

impl TreeShape {
    /// Root with `J` singleton children.
    pub fn flat(n_categories: usize) -> Self {
        TreeShape::Node((1..=n_categories).map(TreeShape::Leaf).collect())
    }

    /// Categories below this vertex in left-to-right order (with repeats
    /// if the shape is invalid).
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            TreeShape::Leaf(j) => out.push(*j),
            TreeShape::Node(ch) => ch.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Groups of consecutive categories as children of the root, each
    /// group of size ≥ 2 expanded into singleton leaves.
    pub fn from_groups(groups: &[Vec<usize>]) -> Self {
        TreeShape::Node(
            groups
                .iter()
                .map(|g| {
                    if g.len() == 1 {
                        TreeShape::Leaf(g[0])
                    } else {
                        TreeShape::Node(g.iter().map(|&j| TreeShape::Leaf(j)).collect())
                    }
                })
                .collect(),
        )
    }
}

/// First violated condition of the tree definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    /// The root does not cover exactly `{1,…,J}`.
    RootNotFull {
        n_categories: usize,
        found: Vec<usize>,
    },
    /// A vertex has fewer than two children (its partition is the
    /// identical one).
    NonIdenticalPartition { vertex: Vec<usize> },
    /// Two children of a vertex share a category.
    Overlap { vertex: Vec<usize>, category: usize },
    /// The root is itself a leaf.
    RootIsLeaf,
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::RootNotFull {
                n_categories,
                found,
            } => write!(
                f,
                "root must be {{1,…,{n_categories}}} but covers {}",
                fmt_set(found)
            ),
            TreeViolation::NonIdenticalPartition { vertex } => write!(
                f,
                "vertex {} must have at least two children (non identical partition)",
                fmt_set(vertex)
            ),
            TreeViolation::Overlap { vertex, category } => write!(
                f,
                "children of vertex {} overlap on category {category}",
                fmt_set(vertex)
            ),
            TreeViolation::RootIsLeaf => write!(f, "root must be a non-terminal vertex"),
        }
    }
}

pub fn fmt_set(set: &[usize]) -> String {
    let inner: Vec<String> = set.iter().map(|j| j.to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

/// Checks that `shape` is a partition tree over `{1,…,J}`.
pub fn validate_tree(
    shape: &TreeShape,
    n_categories: usize,
) -> std::result::Result<(), TreeViolation> {
    let children = match shape {
        TreeShape::Leaf(_) => return Err(TreeViolation::RootIsLeaf),
        TreeShape::Node(ch) => ch,
    };
    let mut found = shape.leaves();
    found.sort_unstable();
    found.dedup();
    if found != (1..=n_categories).collect::<Vec<_>>() {
        return Err(TreeViolation::RootNotFull {
            n_categories,
            found,
        });
    }
    check_vertex(children)
}

fn check_vertex(children: &[TreeShape]) -> std::result::Result<(), TreeViolation> {
    let mut vertex: Vec<usize> = children.iter().flat_map(|c| c.leaves()).collect();
    vertex.sort_unstable();
    if children.len() < 2 {
        vertex.dedup();
        return Err(TreeViolation::NonIdenticalPartition { vertex });
    }
    if let Some(w) = vertex.windows(2).find(|w| w[0] == w[1]) {
        let category = w[0];
        vertex.dedup();
        return Err(TreeViolation::Overlap { vertex, category });
    }
    for c in children {
        if let TreeShape::Node(ch) = c {
            check_vertex(ch)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vertex {
    /// Sorted category subset identifying the vertex.
    pub set: Vec<usize>,
    /// Child vertex ids in the declared order; the last is the reference.
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub depth: usize,
}

impl Vertex {
    pub fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }
}

/// Validated partition tree stored as an arena in preorder (root = 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTree {
    n_categories: usize,
    vertices: Vec<Vertex>,
    shape: TreeShape,
}

impl PartitionTree {
    pub fn new(shape: TreeShape, n_categories: usize) -> Result<Self> {
        validate_tree(&shape, n_categories)
            .map_err(|v| Error::Spec(format!("invalid partition tree: {v}")))?;
        let mut vertices = Vec::new();
        push_vertex(&shape, None, 0, &mut vertices);
        Ok(Self {
            n_categories,
            vertices,
            shape,
        })
    }

    /// The 1-partition tree: a root with `J` singleton children.
    pub fn flat(n_categories: usize) -> Self {
        Self::new(TreeShape::flat(n_categories), n_categories)
            .expect("flat tree is valid for J >= 2")
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn vertex(&self, id: usize) -> &Vertex {
        &self.vertices[id]
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    /// Non-terminal vertex ids in preorder.
    pub fn internal_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&v| !self.vertices[v].is_terminal())
            .collect()
    }

    pub fn find(&self, set: &[usize]) -> Option<usize> {
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        self.vertices.iter().position(|v| v.set == sorted)
    }

    /// Number of children `J_v`.
    pub fn n_children(&self, v: usize) -> usize {
        self.vertices[v].children.len()
    }

    /// Child position (0-based) of `v` containing `category`.
    pub fn child_index_of(&self, v: usize, category: usize) -> Option<usize> {
        self.vertices[v]
            .children
            .iter()
            .position(|&c| self.vertices[c].set.binary_search(&category).is_ok())
    }

    /// Depth in edges (the 1-partition tree has depth 1).
    pub fn depth(&self) -> usize {
        self.vertices.iter().map(|v| v.depth).max().unwrap_or(0)
    }

    /// `Σ_v (J_v − 1)` over non-terminal vertices; always `J − 1`.
    pub fn count_equations(&self) -> usize {
        self.internal_vertices()
            .iter()
            .map(|&v| self.n_children(v) - 1)
            .sum()
    }

    /// Child sets of a vertex, in order.
    pub fn child_sets(&self, v: usize) -> Vec<Vec<usize>> {
        self.vertices[v]
            .children
            .iter()
            .map(|&c| self.vertices[c].set.clone())
            .collect()
    }

    /// Shape of the subtree rooted at `v`.
    pub fn subtree_shape(&self, v: usize) -> TreeShape {
        let vx = &self.vertices[v];
        if vx.is_terminal() {
            TreeShape::Leaf(vx.set[0])
        } else {
            TreeShape::Node(vx.children.iter().map(|&c| self.subtree_shape(c)).collect())
        }
    }
}

fn push_vertex(
    shape: &TreeShape,
    parent: Option<usize>,
    depth: usize,
    out: &mut Vec<Vertex>,
) -> usize {
    let id = out.len();
    let mut set = shape.leaves();
    set.sort_unstable();
    out.push(Vertex {
        set,
        children: Vec::new(),
        parent,
        depth,
    });
    if let TreeShape::Node(children) = shape {
        let ids: Vec<usize> = children
            .iter()
            .map(|c| push_vertex(c, Some(id), depth + 1, out))
            .collect();
        out[id].children = ids;
    }
    id
}

/// Model attached to a non-terminal vertex.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeModel {
    /// Intercept-only model: the child frequencies.
    Minimal,
    Glm {
        ratio: RatioKind,
        cdf: CdfKind,
        design: DesignKind,
        /// Variable names, resolved against the dataset.
        variables: Vec<String>,
    },
}

impl NodeModel {
    pub fn glm(ratio: RatioKind, cdf: CdfKind, design: DesignKind, variables: Vec<String>) -> Self {
        NodeModel::Glm {
            ratio,
            cdf,
            design,
            variables,
        }
    }

    pub fn variables(&self) -> &[String] {
        match self {
            NodeModel::Minimal => &[],
            NodeModel::Glm { variables, .. } => variables,
        }
    }

    pub fn is_minimal(&self) -> bool {
        matches!(self, NodeModel::Minimal)
    }

    /// GLM over `n_children` categories using restricted columns `0..q`.
    fn glm_spec(&self, n_children: usize, n_columns: usize) -> Result<Option<GlmSpec>> {
        match self {
            NodeModel::Minimal => Ok(None),
            NodeModel::Glm {
                ratio, cdf, design, ..
            } => GlmSpec::new(
                *ratio,
                *cdf,
                DesignSpec::new(design.clone(), (0..n_columns).collect()),
                n_children,
            )
            .map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub model: NodeModel,
    pub share_group: Option<String>,
    /// Known parameters (used for simulation, or carried after a fit). For
    /// minimal nodes these are the reference log-odds `ln(π_j/π_{J_v})`.
    pub beta: Option<Vec<f64>>,
}

impl NodeSpec {
    pub fn new(model: NodeModel) -> Self {
        Self {
            model,
            share_group: None,
            beta: None,
        }
    }

    pub fn minimal() -> Self {
        Self::new(NodeModel::Minimal)
    }
}

/// Distribution of a simulated covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum CovariateGenerator {
    Normal {
        mean: f64,
        sd: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    Bernoulli {
        p: f64,
    },
    /// Dummy-coded with the first level as baseline.
    Categorical {
        levels: Vec<String>,
        probs: Vec<f64>,
    },
    Fixed {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDecl {
    pub name: String,
    #[serde(flatten)]
    pub generator: CovariateGenerator,
}

impl CovariateDecl {
    /// Design columns contributed by this covariate.
    pub fn n_columns(&self) -> usize {
        match &self.generator {
            CovariateGenerator::Categorical { levels, .. } => levels.len().saturating_sub(1),
            _ => 1,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        match &self.generator {
            CovariateGenerator::Categorical { levels, .. } => levels[1..]
                .iter()
                .map(|l| format!("{}={l}", self.name))
                .collect(),
            _ => vec![self.name.clone()],
        }
    }
}

/// A partition tree together with one model per non-terminal vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct PcglmSpec {
    pub categories: Vec<String>,
    pub tree: PartitionTree,
    /// Aligned with `tree.internal_vertices()`.
    pub nodes: Vec<NodeSpec>,
    /// Covariate generators for simulation (optional).
    pub covariates: Vec<CovariateDecl>,
}

impl PcglmSpec {
    /// Builds a spec, checking that every non-terminal vertex has a model.
    pub fn new(categories: Vec<String>, tree: PartitionTree, nodes: Vec<NodeSpec>) -> Result<Self> {
        let spec = Self {
            categories,
            tree,
            nodes,
            covariates: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Categories named `1, 2, …, J`.
    pub fn default_categories(n_categories: usize) -> Vec<String> {
        (1..=n_categories).map(|j| j.to_string()).collect()
    }

    /// Single GLM on the 1-partition tree.
    pub fn single(model: NodeModel, n_categories: usize) -> Result<Self> {
        Self::new(
            Self::default_categories(n_categories),
            PartitionTree::flat(n_categories),
            vec![NodeSpec::new(model)],
        )
    }

    pub fn n_categories(&self) -> usize {
        self.tree.n_categories()
    }

    pub fn validate(&self) -> Result<()> {
        let internal = self.tree.internal_vertices();
        if self.categories.len() != self.tree.n_categories() {
            return Err(Error::Spec(format!(
                "{} category names for a tree over {} categories",
                self.categories.len(),
                self.tree.n_categories()
            )));
        }
        if internal.len() != self.nodes.len() {
            return Err(Error::Spec(format!(
                "{} node models for {} non-terminal vertices",
                self.nodes.len(),
                internal.len()
            )));
        }
        for (&v, node) in internal.iter().zip(&self.nodes) {
            let jv = self.tree.n_children(v);
            let label = fmt_set(&self.tree.vertex(v).set);
            if let NodeModel::Glm {
                cdf,
                design,
                variables,
                ..
            } = &node.model
            {
                cdf.validate()?;
                if matches!(
                    design,
                    DesignKind::NestedRoot | DesignKind::ConditionalNestedRoot
                ) {
                    return Err(Error::Spec(format!(
                        "vertex {label}: nested-logit root designs are only built by the nested logit fit"
                    )));
                }
                DesignSpec::new(design.clone(), (0..variables.len()).collect())
                    .validate(jv, None)
                    .map_err(|e| Error::Spec(format!("vertex {label}: {e}")))?;
                let mut seen = variables.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != variables.len() {
                    return Err(Error::Spec(format!("vertex {label}: repeated variable")));
                }
            }
            if let Some(beta) = &node.beta {
                let expected = match &node.model {
                    NodeModel::Minimal => Some(jv - 1),
                    NodeModel::Glm { .. } => None,
                };
                if let Some(k) = expected {
                    if beta.len() != k {
                        return Err(Error::Spec(format!(
                            "vertex {label}: minimal model takes {k} parameters, got {}",
                            beta.len()
                        )));
                    }
                }
            }
        }
        for (name, members) in self.sharing_groups() {
            let first = members[0];
            for &m in &members[1..] {
                if self.tree.n_children(internal[m]) != self.tree.n_children(internal[first]) {
                    return Err(Error::Spec(format!(
                        "sharing group '{name}': vertices have different child counts"
                    )));
                }
                if self.nodes[m].model != self.nodes[first].model {
                    return Err(Error::Spec(format!(
                        "sharing group '{name}': vertices have different models"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sharing groups as (name, node positions), in order of first member.
    pub fn sharing_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.share_group {
                match groups.iter_mut().find(|(n, _)| n == g) {
                    Some((_, members)) => members.push(i),
                    None => groups.push((g.clone(), vec![i])),
                }
            }
        }
        groups
    }

    /// Total number of free parameters, counting each sharing group once,
    /// given the number of design columns behind each node's variables.
    pub fn n_params_with(&self, columns_of: impl Fn(&[String]) -> usize) -> usize {
        let internal = self.tree.internal_vertices();
        let mut seen_groups = Vec::new();
        let mut total = 0;
        for (&v, node) in internal.iter().zip(&self.nodes) {
            if let Some(g) = &node.share_group {
                if seen_groups.contains(g) {
                    continue;
                }
                seen_groups.push(g.clone());
            }
            let jv = self.tree.n_children(v);
            total += match &node.model {
                NodeModel::Minimal => jv - 1,
                NodeModel::Glm {
                    design, variables, ..
                } => DesignSpec::new(design.clone(), (0..columns_of(variables)).collect())
                    .column_count(jv),
            };
        }
        total
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SpecDocument::from_spec(
            self,
        ))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpecDocument = serde_json::from_str(text)?;
        doc.into_spec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    categories: Vec<String>,
    tree: TreeShape,
    nodes: Vec<NodeDocument>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    covariates: Vec<CovariateDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDocument {
    vertex: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratio: Option<RatioKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cdf: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    df: Option<u32>,
    design: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<Vec<usize>>,
    #[serde(default)]
    variables: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    share_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
}

impl SpecDocument {
    fn from_spec(spec: &PcglmSpec) -> Self {
        let nodes = spec
            .tree
            .internal_vertices()
            .iter()
            .zip(&spec.nodes)
            .map(|(&v, node)| {
                let vertex = spec.tree.vertex(v).set.clone();
                match &node.model {
                    NodeModel::Minimal => NodeDocument {
                        vertex,
                        ratio: None,
                        cdf: None,
                        df: None,
                        design: "minimal".into(),
                        splits: None,
                        variables: Vec::new(),
                        share_group: node.share_group.clone(),
                        beta: node.beta.clone(),
                    },
                    NodeModel::Glm {
                        ratio,
                        cdf,
                        design,
                        variables,
                    } => {
                        let (design, splits) = match design {
                            DesignKind::Complete => ("complete", None),
                            DesignKind::Proportional => ("proportional", None),
                            DesignKind::BlockSplit(s) => ("blocksplit", Some(s.clone())),
                            DesignKind::NestedRoot => ("nestedroot", None),
                            DesignKind::ConditionalNestedRoot => ("conditionalnestedroot", None),
                        };
                        NodeDocument {
                            vertex,
                            ratio: Some(*ratio),
                            cdf: Some(cdf.name().to_string()),
                            df: cdf.shape(),
                            design: design.into(),
                            splits,
                            variables: variables.clone(),
                            share_group: node.share_group.clone(),
                            beta: node.beta.clone(),
                        }
                    }
                }
            })
            .collect();
        SpecDocument {
            categories: spec.categories.clone(),
            tree: spec.tree.shape().clone(),
            nodes,
            covariates: spec.covariates.clone(),
        }
    }

    fn into_spec(self) -> Result<PcglmSpec> {
        let n_categories = self.categories.len();
        let tree = PartitionTree::new(self.tree, n_categories)?;
        let mut by_vertex: BTreeMap<Vec<usize>, NodeDocument> = BTreeMap::new();
        for node in self.nodes {
            let mut key = node.vertex.clone();
            key.sort_unstable();
            if by_vertex.insert(key.clone(), node).is_some() {
                return Err(Error::Parse(format!(
                    "vertex {} has two node models",
                    fmt_set(&key)
                )));
            }
        }
        let mut nodes = Vec::new();
        for v in tree.internal_vertices() {
            let set = &tree.vertex(v).set;
            let doc = by_vertex.remove(set).ok_or_else(|| {
                Error::Parse(format!("no node model for vertex {}", fmt_set(set)))
            })?;
            let model = match doc.design.as_str() {
                "minimal" => NodeModel::Minimal,
                name => {
                    let design = match name {
                        "complete" => DesignKind::Complete,
                        "proportional" => DesignKind::Proportional,
                        "blocksplit" => {
                            DesignKind::BlockSplit(doc.splits.clone().ok_or_else(|| {
                                Error::Parse("blocksplit design needs 'splits'".into())
                            })?)
                        }
                        other => return Err(Error::Parse(format!("unknown design '{other}'"))),
                    };
                    let ratio = doc.ratio.ok_or_else(|| {
                        Error::Parse(format!("vertex {}: missing ratio", fmt_set(set)))
                    })?;
                    let cdf = CdfKind::parse(doc.cdf.as_deref().unwrap_or("logistic"), doc.df)?;
                    NodeModel::Glm {
                        ratio,
                        cdf,
                        design,
                        variables: doc.variables.clone(),
                    }
                }
            };
            nodes.push(NodeSpec {
                model,
                share_group: doc.share_group,
                beta: doc.beta,
            });
        }
        if let Some(extra) = by_vertex.keys().next() {
            return Err(Error::Parse(format!(
                "node model given for {} which is not a non-terminal vertex",
                fmt_set(extra)
            )));
        }
        let mut spec = PcglmSpec::new(self.categories, tree, nodes)?;
        spec.covariates = self.covariates;
        Ok(spec)
    }
}

/// Restricts a dataset to its columns `columns` (in that order), keeping
/// variable groups that lie entirely inside.
pub fn restrict_columns(data: &CategoricalDataset, columns: &[usize]) -> CategoricalDataset {
    let position = |c: usize| columns.iter().position(|&k| k == c);
    let variables = data
        .variables
        .iter()
        .filter_map(|g| {
            let cols: Option<Vec<usize>> = g.columns.iter().map(|&c| position(c)).collect();
            cols.map(|columns| VariableGroup {
                name: g.name.clone(),
                columns,
            })
        })
        .collect();
    CategoricalDataset {
        n_categories: data.n_categories,
        rows: data
            .rows
            .iter()
            .map(|r| Observation {
                x: r.x.restrict(columns),
                response: r.response,
                weight: r.weight,
            })
            .collect(),
        column_names: columns
            .iter()
            .map(|&c| data.column_names[c].clone())
            .collect(),
        variables,
    }
}

/// Sub-dataset of vertex `v`: rows whose response lies in `v`, responses
/// relabelled to the (1-based) child of `v` containing them, covariates
/// restricted to `columns`.
pub fn partition_data(
    tree: &PartitionTree,
    data: &CategoricalDataset,
    v: usize,
    columns: &[usize],
) -> Result<CategoricalDataset> {
    if tree.vertex(v).is_terminal() {
        return Err(Error::Spec(format!(
            "vertex {} is terminal",
            fmt_set(&tree.vertex(v).set)
        )));
    }
    let map: Vec<usize> = (1..=tree.n_categories())
        .map(|j| tree.child_index_of(v, j).map(|c| c + 1).unwrap_or(0))
        .collect();
    let relabelled = data.relabel(&map, tree.n_children(v));
    Ok(restrict_columns(&relabelled, columns))
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeStatus {
    /// Estimated by Fisher scoring.
    Fitted,
    /// Closed-form child frequencies.
    Minimal,
    /// Empty sub-dataset or a single observed child.
    Degenerate(String),
    /// The node's fit raised an error.
    Failed(Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    pub vertex: Vec<usize>,
    pub n_children: usize,
    /// Dataset columns feeding this node, in design order.
    pub columns: Vec<usize>,
    /// Node GLM over the restricted columns (`None` for closed-form nodes).
    pub glm: Option<GlmSpec>,
    pub beta: Option<ParameterVector>,
    /// Child probabilities of closed-form nodes.
    pub probabilities: Option<Vec<f64>>,
    pub result: Option<FitResult>,
    pub log_likelihood: f64,
    /// Free parameters attributed to this node (zero for non-first members
    /// of a sharing group).
    pub n_params: usize,
    /// Total weight of the node's sub-dataset.
    pub n_obs: f64,
    pub share_group: Option<String>,
    pub status: NodeStatus,
}

impl NodeFit {
    /// Conditional child probabilities at `x` (a full covariate row).
    pub fn child_probs(&self, x: &CovariateRow) -> Result<Vec<f64>> {
        if let Some(p) = &self.probabilities {
            return Ok(p.clone());
        }
        match (&self.glm, &self.beta) {
            (Some(glm), Some(beta)) => predict_probs(glm, beta, &x.restrict(&self.columns))
                .map(ProbabilityVector::into_vec)
                .map_err(|e| match e {
                    Error::PredictionDomain { row, message } => Error::PredictionDomain {
                        row,
                        message: format!("vertex {}: {message}", fmt_set(&self.vertex)),
                    },
                    other => other,
                }),
            _ => Err(Error::Spec(format!(
                "vertex {} has no fitted model",
                fmt_set(&self.vertex)
            ))),
        }
    }

    pub fn converged(&self) -> bool {
        match &self.status {
            NodeStatus::Fitted => self.result.as_ref().is_some_and(|r| r.converged),
            NodeStatus::Minimal | NodeStatus::Degenerate(_) => true,
            NodeStatus::Failed(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcglmFit {
    pub tree: PartitionTree,
    /// Aligned with `tree.internal_vertices()`.
    pub nodes: Vec<NodeFit>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub n_equations: usize,
    pub n_obs: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl PcglmFit {
    fn assemble(tree: PartitionTree, nodes: Vec<NodeFit>, n_obs: f64) -> Self {
        let log_likelihood = nodes.iter().map(|n| n.log_likelihood).sum();
        let n_params = nodes.iter().map(|n| n.n_params).sum();
        let converged = nodes.iter().all(NodeFit::converged);
        let mut warnings = Vec::new();
        for n in &nodes {
            match &n.status {
                NodeStatus::Degenerate(msg) => {
                    warnings.push(format!("vertex {}: {msg}", fmt_set(&n.vertex)))
                }
                NodeStatus::Failed(e) => {
                    warnings.push(format!("vertex {}: fit failed: {e}", fmt_set(&n.vertex)))
                }
                _ => {}
            }
            if let Some(r) = &n.result {
                warnings.extend(
                    r.diagnostics
                        .iter()
                        .map(|d| format!("vertex {}: {d}", fmt_set(&n.vertex))),
                );
            }
        }
        let n_equations = tree.count_equations();
        Self {
            tree,
            nodes,
            log_likelihood,
            n_params,
            n_equations,
            n_obs,
            converged,
            warnings,
        }
    }

    pub fn node(&self, set: &[usize]) -> Option<&NodeFit> {
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        self.nodes.iter().find(|n| n.vertex == sorted)
    }
}

fn child_frequencies(data: &CategoricalDataset) -> Vec<f64> {
    let counts = data.category_counts();
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

fn frequency_log_likelihood(data: &CategoricalDataset, probs: &[f64]) -> f64 {
    data.category_counts()
        .iter()
        .zip(probs)
        .filter(|(&c, _)| c > 0.0)
        .map(|(c, p)| c * p.ln())
        .sum()
}

/// Degenerate outcome when fewer than two children are observed.
fn degenerate(data: &CategoricalDataset) -> Option<(Vec<f64>, String)> {
    let counts = data.category_counts();
    let observed: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0.0).collect();
    match observed.len() {
        0 => Some((
            vec![1.0 / counts.len() as f64; counts.len()],
            "empty sub-dataset; uniform child probabilities used".into(),
        )),
        1 => {
            let mut p = vec![0.0; counts.len()];
            p[observed[0]] = 1.0;
            Some((
                p,
                format!(
                    "only child {} observed; probability 1 assigned",
                    observed[0] + 1
                ),
            ))
        }
        _ => None,
    }
}

struct Unit {
    /// Positions into the node list.
    members: Vec<usize>,
}

struct Prepared<'a> {
    spec: &'a PcglmSpec,
    internal: Vec<usize>,
    columns: Vec<Vec<usize>>,
}

fn prepare<'a>(spec: &'a PcglmSpec, data: &CategoricalDataset) -> Result<Prepared<'a>> {
    spec.validate()?;
    if data.n_categories != spec.n_categories() {
        return Err(Error::Spec(format!(
            "spec has {} categories but data has {}",
            spec.n_categories(),
            data.n_categories
        )));
    }
    let columns = spec
        .nodes
        .iter()
        .map(|n| data.columns_for(n.model.variables()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        spec,
        internal: spec.tree.internal_vertices(),
        columns,
    })
}

fn fit_unit(
    p: &Prepared,
    data: &CategoricalDataset,
    unit: &Unit,
    options: &FitOptions,
) -> Vec<NodeFit> {
    let tree = &p.spec.tree;
    let first = unit.members[0];
    let node = &p.spec.nodes[first];
    let n_children = tree.n_children(p.internal[first]);
    let subs: Vec<CategoricalDataset> = unit
        .members
        .iter()
        .map(|&m| {
            partition_data(tree, data, p.internal[m], &p.columns[m]).expect("internal vertex")
        })
        .collect();
    let blank = |m: usize, sub: &CategoricalDataset| NodeFit {
        vertex: tree.vertex(p.internal[m]).set.clone(),
        n_children,
        columns: p.columns[m].clone(),
        glm: None,
        beta: None,
        probabilities: None,
        result: None,
        log_likelihood: 0.0,
        n_params: 0,
        n_obs: sub.total_weight(),
        share_group: p.spec.nodes[m].share_group.clone(),
        status: NodeStatus::Minimal,
    };
    let stacked = if subs.len() == 1 {
        subs[0].clone()
    } else {
        let mut s = subs[0].clone();
        for other in &subs[1..] {
            s.rows.extend(other.rows.iter().cloned());
        }
        s
    };
    let glm = match node.model.glm_spec(n_children, p.columns[first].len()) {
        Ok(g) => g,
        Err(e) => {
            return unit
                .members
                .iter()
                .zip(&subs)
                .map(|(&m, sub)| NodeFit {
                    status: NodeStatus::Failed(e.clone()),
                    log_likelihood: f64::NAN,
                    ..blank(m, sub)
                })
                .collect()
        }
    };
    let k_model = match &glm {
        Some(g) => g.n_params(),
        None => n_children - 1,
    };
    let with_params = |i: usize, mut nf: NodeFit| {
        nf.n_params = if i == 0 { k_model } else { 0 };
        nf
    };

    if let Some((probs, msg)) = degenerate(&stacked) {
        return unit
            .members
            .iter()
            .zip(&subs)
            .enumerate()
            .map(|(i, (&m, sub))| {
                with_params(
                    i,
                    NodeFit {
                        log_likelihood: frequency_log_likelihood(sub, &probs),
                        probabilities: Some(probs.clone()),
                        status: NodeStatus::Degenerate(msg.clone()),
                        ..blank(m, sub)
                    },
                )
            })
            .collect();
    }

    let Some(glm) = glm else {
        let probs = child_frequencies(&stacked);
        return unit
            .members
            .iter()
            .zip(&subs)
            .enumerate()
            .map(|(i, (&m, sub))| {
                with_params(
                    i,
                    NodeFit {
                        log_likelihood: frequency_log_likelihood(sub, &probs),
                        probabilities: Some(probs.clone()),
                        ..blank(m, sub)
                    },
                )
            })
            .collect();
    };

    match fit(&glm, &stacked, options) {
        Ok(result) => unit
            .members
            .iter()
            .zip(&subs)
            .enumerate()
            .map(|(i, (&m, sub))| {
                let ll = if unit.members.len() == 1 {
                    result.log_likelihood
                } else if sub.is_empty() {
                    0.0
                } else {
                    log_likelihood(&glm, &result.beta, sub).unwrap_or(f64::NAN)
                };
                with_params(
                    i,
                    NodeFit {
                        glm: Some(glm.clone()),
                        beta: Some(result.beta.clone()),
                        result: Some(result.clone()),
                        log_likelihood: ll,
                        status: NodeStatus::Fitted,
                        ..blank(m, sub)
                    },
                )
            })
            .collect(),
        Err(e) => unit
            .members
            .iter()
            .zip(&subs)
            .enumerate()
            .map(|(i, (&m, sub))| {
                with_params(
                    i,
                    NodeFit {
                        glm: Some(glm.clone()),
                        log_likelihood: f64::NAN,
                        status: NodeStatus::Failed(e.clone()),
                        ..blank(m, sub)
                    },
                )
            })
            .collect(),
    }
}

/// Fits every non-terminal vertex on its sub-dataset; sharing groups are
/// fitted as one GLM on their stacked sub-datasets. A node's failure is
/// recorded in its status and does not stop the other nodes.
pub fn pcglm_fit(
    spec: &PcglmSpec,
    data: &CategoricalDataset,
    options: &FitOptions,
) -> Result<PcglmFit> {
    let prepared = prepare(spec, data)?;
    let mut units: Vec<Unit> = Vec::new();
    let groups = spec.sharing_groups();
    for i in 0..spec.nodes.len() {
        match &spec.nodes[i].share_group {
            None => units.push(Unit { members: vec![i] }),
            Some(g) => {
                let (_, members) = groups.iter().find(|(n, _)| n == g).expect("group exists");
                if members[0] == i {
                    units.push(Unit {
                        members: members.clone(),
                    });
                }
            }
        }
    }
    let results: Vec<Vec<NodeFit>> = units
        .par_iter()
        .map(|u| fit_unit(&prepared, data, u, options))
        .collect();
    let mut slots: Vec<Option<NodeFit>> = vec![None; spec.nodes.len()];
    for (unit, fits) in units.iter().zip(results) {
        for (&m, nf) in unit.members.iter().zip(fits) {
            slots[m] = Some(nf);
        }
    }
    let nodes = slots
        .into_iter()
        .map(|s| s.expect("every node fitted"))
        .collect();
    Ok(PcglmFit::assemble(
        spec.tree.clone(),
        nodes,
        data.total_weight(),
    ))
}

/// `P(Y = j | x)` as the product of conditional child probabilities along
/// the root-to-`{j}` path.
pub fn pcglm_predict(fit: &PcglmFit, x: &CovariateRow) -> Result<ProbabilityVector> {
    let tree = &fit.tree;
    let mut mass = vec![0.0; tree.vertices().len()];
    mass[0] = 1.0;
    for (&v, node) in tree.internal_vertices().iter().zip(&fit.nodes) {
        let probs = node.child_probs(x)?;
        for (&c, p) in tree.vertex(v).children.iter().zip(probs) {
            mass[c] = mass[v] * p;
        }
    }
    let mut out = vec![0.0; tree.n_categories()];
    for vx in tree.vertices().iter().filter(|v| v.is_terminal()) {
        out[vx.set[0] - 1] = mass[tree.find(&vx.set).expect("leaf")];
    }
    Ok(ProbabilityVector::from_raw(out))
}

/// A fit-shaped object carrying the parameters stored in the spec, so a
/// fully parameterised spec can be used for prediction and simulation.
pub fn fit_from_parameters(spec: &PcglmSpec, variables: &[VariableGroup]) -> Result<PcglmFit> {
    spec.validate()?;
    let lookup = CategoricalDataset {
        n_categories: spec.n_categories(),
        rows: Vec::new(),
        column_names: Vec::new(),
        variables: variables.to_vec(),
    };
    let internal = spec.tree.internal_vertices();
    let mut nodes = Vec::new();
    for (&v, node) in internal.iter().zip(&spec.nodes) {
        let set = spec.tree.vertex(v).set.clone();
        let beta = node
            .beta
            .clone()
            .ok_or_else(|| Error::Spec(format!("vertex {} has no parameters", fmt_set(&set))))?;
        let columns = lookup.columns_for(node.model.variables())?;
        let n_children = spec.tree.n_children(v);
        let glm = node.model.glm_spec(n_children, columns.len())?;
        let (probabilities, beta_vec, n_params) = match &glm {
            None => {
                let mut p: Vec<f64> = beta.iter().map(|a| a.exp()).collect();
                p.push(1.0);
                let s: f64 = p.iter().sum();
                (
                    Some(p.into_iter().map(|e| e / s).collect()),
                    None,
                    n_children - 1,
                )
            }
            Some(g) => {
                if beta.len() != g.n_params() {
                    return Err(Error::Spec(format!(
                        "vertex {}: model has {} parameters, got {}",
                        fmt_set(&set),
                        g.n_params(),
                        beta.len()
                    )));
                }
                (None, Some(ParameterVector::from_vec(beta)), g.n_params())
            }
        };
        nodes.push(NodeFit {
            vertex: set,
            n_children,
            columns,
            status: if glm.is_some() {
                NodeStatus::Fitted
            } else {
                NodeStatus::Minimal
            },
            glm,
            beta: beta_vec,
            probabilities,
            result: None,
            log_likelihood: 0.0,
            n_params,
            n_obs: 0.0,
            share_group: node.share_group.clone(),
        });
    }
    let mut fit = PcglmFit::assemble(spec.tree.clone(), nodes, 0.0);
    fit.log_likelihood = f64::NAN;
    Ok(fit)
}

/// Copies fitted parameters back into the spec (minimal nodes get their
/// reference log-odds).
pub fn spec_with_parameters(spec: &PcglmSpec, fit: &PcglmFit) -> PcglmSpec {
    let mut out = spec.clone();
    for (node, nf) in out.nodes.iter_mut().zip(&fit.nodes) {
        node.beta = match (&nf.beta, &nf.probabilities) {
            (Some(b), _) => Some(b.as_slice().to_vec()),
            (None, Some(p)) => {
                let last = p[p.len() - 1];
                Some(p[..p.len() - 1].iter().map(|q| (q / last).ln()).collect())
            }
            _ => None,
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedLogitOptions {
    /// Root-level covariates `x^0`.
    pub root_variables: Vec<String>,
    /// Use differenced per-nest attributes with a shared slope (rows must
    /// carry per-alternative attributes).
    pub conditional: bool,
    /// When false the `λ` columns are dropped, which reduces the model to
    /// an ordinary two-level partitioned model.
    pub estimate_lambda: bool,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedLogitFit {
    /// Nest fits plus the root fit (root listed first, as vertex order).
    pub fit: PcglmFit,
    /// `λ̂_l` for nests `1..L-1`; `None` when the inclusive value of that
    /// nest is constant over the data and its column was dropped.
    pub lambda: Vec<Option<f64>>,
    /// Inclusive values per row and nest.
    pub inclusive_values: Vec<Vec<f64>>,
    pub note: String,
}

/// Two-step nested-logit estimation on a depth-2 tree whose root children
/// are the nests: nests first, then the root multinomial logit with the
/// nests' inclusive values as extra covariates.
pub fn nested_logit_fit(
    spec: &PcglmSpec,
    data: &CategoricalDataset,
    options: &NestedLogitOptions,
) -> Result<NestedLogitFit> {
    let tree = &spec.tree;
    if tree.depth() > 2 {
        return Err(Error::Spec(
            "nested logit needs a tree of depth at most 2".into(),
        ));
    }
    let internal = tree.internal_vertices();
    for (&v, node) in internal.iter().zip(&spec.nodes).skip(1) {
        match &node.model {
            NodeModel::Minimal => {}
            NodeModel::Glm { ratio, cdf, .. }
                if *ratio == RatioKind::Reference && *cdf == CdfKind::Logistic => {}
            _ => {
                return Err(Error::Spec(format!(
                    "nest {} must use a multinomial logit or minimal model",
                    fmt_set(&tree.vertex(v).set)
                )))
            }
        }
    }
    // Step 1: every nest on its own sub-dataset (root model is replaced below).
    let mut nests_only = spec.clone();
    nests_only.nodes[0] = NodeSpec::minimal();
    let step1 = pcglm_fit(&nests_only, data, &options.fit)?;

    let root = tree.vertex(0);
    let n_nests = root.children.len();
    let mut iv_rows = Vec::with_capacity(data.len());
    for r in &data.rows {
        let mut ivs = Vec::with_capacity(n_nests);
        for &c in &root.children {
            if tree.vertex(c).is_terminal() {
                ivs.push(0.0);
                continue;
            }
            let pos = internal
                .iter()
                .position(|&u| u == c)
                .expect("nest is internal");
            let nf = &step1.nodes[pos];
            // Reference-logit predictors relative to the last alternative.
            let eta: Vec<f64> = match (&nf.glm, &nf.beta, &nf.probabilities) {
                (Some(g), Some(b), _) => {
                    let z = crate::design::build_design(
                        &r.x.restrict(&nf.columns),
                        &g.design,
                        g.n_categories,
                    )?;
                    let mut e: Vec<f64> = (z * &b.0).iter().copied().collect();
                    e.push(0.0);
                    e
                }
                (_, _, Some(p)) => {
                    let last = p[p.len() - 1];
                    p.iter().map(|q| (q / last).ln()).collect()
                }
                _ => {
                    return Err(Error::Numerical {
                        row: None,
                        message: format!("nest {} failed in step 1", fmt_set(&nf.vertex)),
                    })
                }
            };
            ivs.push(inclusive_values(&[eta])?[0]);
        }
        iv_rows.push(ivs);
    }

    // Step 2: root model over nests.
    let root_cols = data.columns_for(&options.root_variables)?;
    let root_data = partition_data(tree, data, 0, &root_cols)?;
    let lm1 = n_nests - 1;
    let keep: Vec<bool> = (0..lm1)
        .map(|l| {
            options.estimate_lambda && {
                let first = iv_rows.first().map(|r| r[l]).unwrap_or(0.0);
                iv_rows.iter().any(|r| (r[l] - first).abs() > 1e-12)
            }
        })
        .collect();
    let kind = if options.conditional {
        DesignKind::ConditionalNestedRoot
    } else {
        DesignKind::NestedRoot
    };
    let root_glm = GlmSpec {
        ratio: RatioKind::Reference,
        cdf: CdfKind::Logistic,
        design: DesignSpec::new(kind, (0..root_cols.len()).collect()),
        n_categories: n_nests,
    };
    let designs = root_data
        .rows
        .iter()
        .zip(&iv_rows)
        .map(|(r, iv)| {
            let full = crate::design::build_nested_root_design(
                &r.x,
                iv,
                options.conditional,
                &root_glm.design.variables,
            )?;
            Ok(drop_lambda_columns(&full, lm1, &keep))
        })
        .collect::<Result<Vec<DMatrix<f64>>>>()?;
    let root_result = fit_precomputed(&root_glm, designs, &root_data, &options.fit);

    let mut nodes = step1.nodes.clone();
    let root_node = &mut nodes[0];
    root_node.columns = root_cols;
    root_node.probabilities = None;
    let mut lambda = vec![None; lm1];
    match root_result {
        Ok(res) => {
            let n = res.beta.len();
            let kept = keep.iter().filter(|&&k| k).count();
            let mut idx = n - kept;
            for (l, &k) in keep.iter().enumerate() {
                if k {
                    lambda[l] = Some(res.beta.0[idx]);
                    idx += 1;
                }
            }
            root_node.log_likelihood = res.log_likelihood;
            root_node.n_params = n;
            root_node.beta = Some(res.beta.clone());
            root_node.status = NodeStatus::Fitted;
            root_node.result = Some(res);
        }
        Err(e) => {
            root_node.log_likelihood = f64::NAN;
            root_node.status = NodeStatus::Failed(e);
        }
    }
    root_node.glm = Some(root_glm);
    let fit = PcglmFit::assemble(tree.clone(), nodes, data.total_weight());
    Ok(NestedLogitFit {
        fit,
        lambda,
        inclusive_values: iv_rows,
        note: "two-step estimate: root standard errors ignore step-1 estimation uncertainty".into(),
    })
}

fn drop_lambda_columns(z: &DMatrix<f64>, lm1: usize, keep: &[bool]) -> DMatrix<f64> {
    let base = z.ncols() - lm1;
    let cols: Vec<usize> = (0..base)
        .chain((0..lm1).filter(|&l| keep[l]).map(|l| base + l))
        .collect();
    DMatrix::from_fn(z.nrows(), cols.len(), |i, j| z[(i, cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(j: usize) -> TreeShape {
        TreeShape::Leaf(j)
    }

    fn node(ch: Vec<TreeShape>) -> TreeShape {
        TreeShape::Node(ch)
    }

    fn back_pain_shape() -> TreeShape {
        node(vec![
            leaf(1),
            leaf(2),
            node(vec![leaf(3), leaf(4), leaf(5)]),
            leaf(6),
        ])
    }

    #[test]
    fn flat_tree_is_valid() {
        assert_eq!(validate_tree(&TreeShape::flat(5), 5), Ok(()));
        assert_eq!(PartitionTree::flat(6).count_equations(), 5);
        assert_eq!(PartitionTree::flat(6).depth(), 1);
    }

    #[test]
    fn self_child_is_rejected() {
        let shape = node(vec![node(vec![leaf(1), leaf(2), leaf(3)])]);
        assert_eq!(
            validate_tree(&shape, 3),
            Err(TreeViolation::NonIdenticalPartition {
                vertex: vec![1, 2, 3]
            })
        );
    }

    #[test]
    fn overlapping_children_are_rejected() {
        let shape = node(vec![
            node(vec![leaf(1), leaf(2)]),
            node(vec![leaf(2), leaf(3)]),
        ]);
        assert_eq!(
            validate_tree(&shape, 3),
            Err(TreeViolation::Overlap {
                vertex: vec![1, 2, 3],
                category: 2
            })
        );
    }

    #[test]
    fn missing_category_is_rejected() {
        let shape = node(vec![leaf(1), leaf(3)]);
        assert!(matches!(
            validate_tree(&shape, 3),
            Err(TreeViolation::RootNotFull { .. })
        ));
        assert_eq!(validate_tree(&leaf(1), 1), Err(TreeViolation::RootIsLeaf));
    }

    #[test]
    fn equation_counts() {
        let t = PartitionTree::new(back_pain_shape(), 6).unwrap();
        assert_eq!(t.count_equations(), 5);
        assert_eq!(t.internal_vertices().len(), 2);
        let chain = node(vec![
            leaf(1),
            node(vec![leaf(2), node(vec![leaf(3), leaf(4)])]),
        ]);
        assert_eq!(PartitionTree::new(chain, 4).unwrap().count_equations(), 3);
    }

    #[test]
    fn partition_data_relabels_and_filters() {
        let tree = PartitionTree::new(back_pain_shape(), 6).unwrap();
        let data = CategoricalDataset::from_triples(
            6,
            vec![
                (vec![1.0, 2.0], 4, 1.0),
                (vec![3.0, 4.0], 6, 1.0),
                (vec![5.0, 6.0], 3, 2.0),
            ],
        )
        .unwrap();
        let v = tree.find(&[3, 4, 5]).unwrap();
        let sub = partition_data(&tree, &data, v, &[1]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.rows[0].response, 2);
        assert_eq!(sub.rows[0].x.values, vec![2.0]);
        assert_eq!(sub.rows[1].response, 1);
        let root = partition_data(&tree, &data, 0, &[0, 1]).unwrap();
        assert_eq!(root.len(), 3);
        assert_eq!(
            root.rows.iter().map(|r| r.response).collect::<Vec<_>>(),
            vec![3, 4, 3]
        );
    }

    #[test]
    fn product_prediction() {
        // root {1}|{2,3}: P({2,3}) = 0.4; node {2,3}: P(2|{2,3}) = 0.25
        let tree =
            PartitionTree::new(node(vec![leaf(1), node(vec![leaf(2), leaf(3)])]), 3).unwrap();
        let spec = PcglmSpec::new(
            PcglmSpec::default_categories(3),
            tree,
            vec![
                NodeSpec {
                    beta: Some(vec![(0.6f64 / 0.4).ln()]),
                    ..NodeSpec::minimal()
                },
                NodeSpec {
                    beta: Some(vec![(0.25f64 / 0.75).ln()]),
                    ..NodeSpec::minimal()
                },
            ],
        )
        .unwrap();
        let fit = fit_from_parameters(&spec, &[]).unwrap();
        let p = pcglm_predict(&fit, &CovariateRow::new(vec![])).unwrap();
        assert!((p.prob(2) - 0.1).abs() < 1e-15);
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let tree = PartitionTree::new(back_pain_shape(), 6).unwrap();
        let spec = PcglmSpec::new(
            ["worse", "same", "slight", "moderate", "marked", "relief"]
                .map(String::from)
                .to_vec(),
            tree,
            vec![
                NodeSpec {
                    model: NodeModel::glm(
                        RatioKind::Cumulative,
                        CdfKind::Student(3),
                        DesignKind::BlockSplit(vec![1, 2]),
                        vec!["x1".into(), "x2".into()],
                    ),
                    share_group: None,
                    beta: Some(vec![
                        0.1,
                        -1.0 / 3.0,
                        2.5e-17,
                        1e300,
                        -0.0,
                        7.0,
                        8.0,
                        9.0,
                        10.0,
                    ]),
                },
                NodeSpec {
                    share_group: Some("g".into()),
                    ..NodeSpec::minimal()
                },
            ],
        )
        .unwrap();
        let text = spec.to_json().unwrap();
        let back = PcglmSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn json_rejects_bad_tree_and_missing_nodes() {
        let bad = r#"{"categories":["a","b","c"],"tree":[[1,2],[2,3]],"nodes":[]}"#;
        let err = PcglmSpec::from_json(bad).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        let missing = r#"{"categories":["a","b","c"],"tree":[1,[2,3]],"nodes":[{"vertex":[1,2,3],"design":"minimal"}]}"#;
        assert!(PcglmSpec::from_json(missing).is_err());
    }

    #[test]
    fn minimal_nodes_use_frequencies() {
        let data = CategoricalDataset::from_triples(
            3,
            vec![(vec![], 1, 2.0), (vec![], 2, 3.0), (vec![], 3, 5.0)],
        )
        .unwrap();
        let tree =
            PartitionTree::new(node(vec![leaf(1), node(vec![leaf(2), leaf(3)])]), 3).unwrap();
        let spec = PcglmSpec::new(
            PcglmSpec::default_categories(3),
            tree,
            vec![NodeSpec::minimal(), NodeSpec::minimal()],
        )
        .unwrap();
        let fit = pcglm_fit(&spec, &data, &FitOptions::default()).unwrap();
        let expected = 2.0 * 0.2f64.ln() + 3.0 * 0.3f64.ln() + 5.0 * 0.5f64.ln();
        assert!((fit.log_likelihood - expected).abs() < 1e-12);
        assert_eq!(fit.n_params, 2);
        assert_eq!(fit.n_equations, 2);
    }

    #[test]
    fn single_observed_child_is_degenerate() {
        let data =
            CategoricalDataset::from_triples(3, vec![(vec![0.5], 1, 1.0), (vec![1.5], 2, 1.0)])
                .unwrap();
        let tree =
            PartitionTree::new(node(vec![leaf(1), node(vec![leaf(2), leaf(3)])]), 3).unwrap();
        let glm = NodeModel::glm(
            RatioKind::Reference,
            CdfKind::Logistic,
            DesignKind::Complete,
            vec!["x1".into()],
        );
        let spec = PcglmSpec::new(
            PcglmSpec::default_categories(3),
            tree,
            vec![NodeSpec::minimal(), NodeSpec::new(glm)],
        )
        .unwrap();
        let fit = pcglm_fit(&spec, &data, &FitOptions::default()).unwrap();
        assert!(matches!(fit.nodes[1].status, NodeStatus::Degenerate(_)));
        assert_eq!(fit.nodes[1].log_likelihood, 0.0);
        assert_eq!(fit.warnings.len(), 1);
    }
}
