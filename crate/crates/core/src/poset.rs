//! Partially ordered response categories: Hasse diagrams, their
//! conversion into partition trees via antichain levels, and order
//! constructors for responses made of several elementary factors.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::DesignKind;
use crate::error::{Error, Result};
use crate::link::{CdfKind, RatioKind};
use crate::tree::{NodeModel, NodeSpec, PartitionTree, PcglmSpec, TreeShape};

/// Cover graph of a finite poset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HasseDiagram {
    pub elements: Vec<String>,
    /// `(lower, upper)` cover pairs.
    pub covers: Vec<(String, String)>,
}

impl HasseDiagram {
    /// Validates names, acyclicity and that every edge is a cover.
    pub fn new(elements: Vec<String>, covers: Vec<(String, String)>) -> Result<Self> {
        let h = Self { elements, covers };
        h.validate()?;
        Ok(h)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let h: HasseDiagram = serde_json::from_str(text)?;
        h.validate()?;
        Ok(h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e == name)
    }

    /// Edges as index pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.covers
            .iter()
            .map(|(a, b)| {
                (
                    self.index_of(a).expect("validated"),
                    self.index_of(b).expect("validated"),
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<&String> = self.elements.iter().collect();
        if unique.len() != self.elements.len() {
            return Err(Error::Spec("Hasse diagram has repeated elements".into()));
        }
        for (a, b) in &self.covers {
            for e in [a, b] {
                if self.index_of(e).is_none() {
                    return Err(Error::Spec(format!(
                        "cover edge uses unknown element '{e}'"
                    )));
                }
            }
            if a == b {
                return Err(Error::Spec(format!("self-loop on '{a}'")));
            }
        }
        let n = self.len();
        let edges = self.edges();
        let mut dedup = edges.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != edges.len() {
            return Err(Error::Spec("repeated cover edge".into()));
        }
        if topological_order(n, &edges).is_none() {
            return Err(Error::Spec("cover relation has a cycle".into()));
        }
        let reach = reachability(n, &edges);
        for &(a, b) in &edges {
            // a ⋖ b is a cover iff no other upper neighbour of a reaches b.
            let implied = edges.iter().any(|&(x, c)| x == a && c != b && reach[c][b]);
            if implied {
                return Err(Error::Spec(format!(
                    "edge ({}, {}) is implied by transitivity",
                    self.elements[a], self.elements[b]
                )));
            }
        }
        Ok(())
    }

    /// `leq[a][b]` iff `a ⪯ b`.
    pub fn order_matrix(&self) -> Vec<Vec<bool>> {
        let mut r = reachability(self.len(), &self.edges());
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = true;
        }
        r
    }

    /// Graphviz rendering, lower elements at the bottom.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph hasse {\n  rankdir=BT;\n");
        for e in &self.elements {
            let _ = writeln!(s, "  \"{}\";", e.replace('"', "\\\""));
        }
        for (a, b) in &self.covers {
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\";",
                a.replace('"', "\\\""),
                b.replace('"', "\\\"")
            );
        }
        s.push_str("}\n");
        s
    }

    fn sub_diagram(&self, members: &[usize]) -> HasseDiagram {
        let keep: BTreeSet<&String> = members.iter().map(|&i| &self.elements[i]).collect();
        HasseDiagram {
            elements: members.iter().map(|&i| self.elements[i].clone()).collect(),
            covers: self
                .covers
                .iter()
                .filter(|(a, b)| keep.contains(a) && keep.contains(b))
                .cloned()
                .collect(),
        }
    }
}

fn topological_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0; n];
    for &(_, b) in edges {
        indeg[b] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for &(a, b) in edges {
            if a == i {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    ready.push(b);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Strict reachability `reach[a][b]` (a path of length ≥ 1 from a to b).
fn reachability(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; n]; n];
    for &(a, b) in edges {
        reach[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Connected components of the undirected cover graph, each listed in
/// element order, components ordered by their first element.
pub fn components(h: &HasseDiagram) -> Vec<HasseDiagram> {
    let n = h.len();
    let mut label = vec![usize::MAX; n];
    let edges = h.edges();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            for &(a, b) in &edges {
                let other = if a == i {
                    b
                } else if b == i {
                    a
                } else {
                    continue;
                };
                if label[other] == usize::MAX {
                    label[other] = id;
                    stack.push(other);
                }
            }
        }
        groups.push((0..n).filter(|&i| label[i] == id).collect());
    }
    groups.iter().map(|g| h.sub_diagram(g)).collect()
}

/// Antichains by longest-path rank from the minimal elements, lowest level
/// first; names sorted within a level.
pub fn antichain_levels(h: &HasseDiagram) -> Result<Vec<Vec<String>>> {
    if components(h).len() != 1 {
        return Err(Error::Spec(
            "antichain levels need a connected diagram; split it into components first".into(),
        ));
    }
    let n = h.len();
    let edges = h.edges();
    let order = topological_order(n, &edges).expect("validated acyclic");
    let mut rank = vec![0usize; n];
    for &i in &order {
        for &(a, b) in &edges {
            if a == i {
                rank[b] = rank[b].max(rank[i] + 1);
            }
        }
    }
    let top = rank.iter().copied().max().unwrap_or(0);
    Ok((0..=top)
        .map(|r| {
            let mut level: Vec<String> = (0..n)
                .filter(|&i| rank[i] == r)
                .map(|i| h.elements[i].clone())
                .collect();
            level.sort();
            level
        })
        .collect())
}

/// A partition tree over named categories, with which non-terminal
/// vertices have ordered children.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTree {
    /// Category names; category `j` of the tree is `categories[j-1]`.
    pub categories: Vec<String>,
    pub tree: PartitionTree,
    /// Per non-terminal vertex (preorder): are the children ordered?
    pub ordered: Vec<bool>,
    /// Per non-terminal vertex: optional sharing-group name.
    pub share_groups: Vec<Option<String>>,
}

impl CategoryTree {
    /// Model skeleton: ordered vertices get `(ordered_ratio, logistic,
    /// proportional)`, unordered ones `(reference, logistic, complete)`,
    /// all using `variables`.
    pub fn skeleton(&self, ordered_ratio: RatioKind, variables: &[String]) -> Result<PcglmSpec> {
        let nodes = self
            .ordered
            .iter()
            .zip(&self.share_groups)
            .map(|(&ordered, group)| {
                let model = if ordered {
                    NodeModel::glm(
                        ordered_ratio,
                        CdfKind::Logistic,
                        DesignKind::Proportional,
                        variables.to_vec(),
                    )
                } else {
                    NodeModel::glm(
                        RatioKind::Reference,
                        CdfKind::Logistic,
                        DesignKind::Complete,
                        variables.to_vec(),
                    )
                };
                NodeSpec {
                    model,
                    share_group: group.clone(),
                    beta: None,
                }
            })
            .collect();
        PcglmSpec::new(self.categories.clone(), self.tree.clone(), nodes)
    }
}

/// Builder that numbers categories in leaf order as it goes.
struct ShapeBuilder {
    categories: Vec<String>,
    ordered: Vec<(Vec<String>, bool)>,
}

impl ShapeBuilder {
    fn leaf(&mut self, name: &str) -> TreeShape {
        self.categories.push(name.to_string());
        TreeShape::Leaf(self.categories.len())
    }

    /// Level of incomparable elements: a leaf, or an unordered vertex of leaves.
    fn antichain(&mut self, names: &[String]) -> TreeShape {
        if names.len() == 1 {
            self.leaf(&names[0])
        } else {
            self.ordered.push((names.to_vec(), false));
            TreeShape::Node(names.iter().map(|n| self.leaf(n)).collect())
        }
    }

    fn levels(&mut self, levels: &[Vec<String>]) -> TreeShape {
        let all: Vec<String> = levels.iter().flatten().cloned().collect();
        self.ordered.push((all, true));
        TreeShape::Node(levels.iter().map(|l| self.antichain(l)).collect())
    }

    fn finish(self, shape: TreeShape) -> Result<CategoryTree> {
        let tree = PartitionTree::new(shape, self.categories.len())?;
        let internal = tree.internal_vertices();
        let ordered = internal
            .iter()
            .map(|&v| {
                let mut names: Vec<String> = tree
                    .vertex(v)
                    .set
                    .iter()
                    .map(|&j| self.categories[j - 1].clone())
                    .collect();
                names.sort();
                self.ordered
                    .iter()
                    .find(|(set, _)| {
                        let mut s = set.clone();
                        s.sort();
                        s == names
                    })
                    .map(|(_, o)| *o)
                    .unwrap_or(false)
            })
            .collect();
        Ok(CategoryTree {
            categories: self.categories,
            share_groups: vec![None; internal.len()],
            tree,
            ordered,
        })
    }
}

/// Partition tree of a poset: for a connected diagram the root's children
/// are its antichain levels; otherwise the root's children are the
/// components, each then split into its levels. Non-singleton levels are
/// split into singletons below.
pub fn poset_to_tree(h: &HasseDiagram) -> Result<CategoryTree> {
    if h.len() < 2 {
        return Err(Error::Spec("a poset needs at least 2 elements".into()));
    }
    let comps = components(h);
    let mut b = ShapeBuilder {
        categories: Vec::new(),
        ordered: Vec::new(),
    };
    let shape = if comps.len() == 1 {
        b.levels(&antichain_levels(h)?)
    } else {
        let all = h.elements.clone();
        b.ordered.push((all, false));
        let children = comps
            .iter()
            .map(|c| {
                if c.len() == 1 {
                    Ok(b.leaf(&c.elements[0]))
                } else {
                    Ok(b.levels(&antichain_levels(c)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        TreeShape::Node(children)
    };
    b.finish(shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Ordinal,
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub kind: FactorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Product,
    /// Factor names from highest to lowest priority.
    Lexicographic(Vec<String>),
}

/// A response composed of several elementary factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedFactorSpec {
    pub factors: Vec<Factor>,
    pub composition: Composition,
}

impl OrderedFactorSpec {
    /// Combined category names (concatenated level names), first factor
    /// varying slowest.
    pub fn category_names(&self) -> Vec<String> {
        let mut names = vec![String::new()];
        for f in &self.factors {
            names = names
                .iter()
                .flat_map(|prefix| f.levels.iter().map(move |l| format!("{prefix}{l}")))
                .collect();
        }
        names
    }

    fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Spec("no factors given".into()));
        }
        for f in &self.factors {
            if f.levels.is_empty() {
                return Err(Error::Spec(format!("factor '{}' has no levels", f.name)));
            }
        }
        let names = self.category_names();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Spec("concatenated level names are ambiguous".into()));
        }
        Ok(())
    }
}

/// Cover edges of the componentwise order: one ordinal factor moves up by
/// one level while every other factor stays equal. Nominal factors only
/// compare equal values.
pub fn product_order(f: &OrderedFactorSpec) -> Result<HasseDiagram> {
    f.validate()?;
    if !f.factors.iter().any(|x| x.kind == FactorKind::Ordinal) {
        return Err(Error::Spec(
            "product order needs at least one ordinal factor".into(),
        ));
    }
    let names = f.category_names();
    let sizes: Vec<usize> = f.factors.iter().map(|x| x.levels.len()).collect();
    let mut covers = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        let digits = decode(idx, &sizes);
        for (k, factor) in f.factors.iter().enumerate() {
            if factor.kind == FactorKind::Ordinal && digits[k] + 1 < sizes[k] {
                let mut up = digits.clone();
                up[k] += 1;
                covers.push((name.clone(), names[encode(&up, &sizes)].clone()));
            }
        }
    }
    HasseDiagram::new(names, covers)
}

fn decode(mut idx: usize, sizes: &[usize]) -> Vec<usize> {
    let mut digits = vec![0; sizes.len()];
    for k in (0..sizes.len()).rev() {
        digits[k] = idx % sizes[k];
        idx /= sizes[k];
    }
    digits
}

fn encode(digits: &[usize], sizes: &[usize]) -> usize {
    digits.iter().zip(sizes).fold(0, |acc, (d, s)| acc * s + d)
}

/// Nested tree of the lexicographic order: the first priority factor
/// partitions the categories by its levels, the next orders categories
/// within each of those groups, and so on. All vertices at one depth
/// below the root share their parameters.
pub fn lexicographic_tree(f: &OrderedFactorSpec) -> Result<CategoryTree> {
    f.validate()?;
    let Composition::Lexicographic(priority) = &f.composition else {
        return Err(Error::Spec(
            "lexicographic tree needs a lexicographic composition".into(),
        ));
    };
    let mut order = Vec::new();
    for name in priority {
        let k = f
            .factors
            .iter()
            .position(|x| &x.name == name)
            .ok_or_else(|| Error::Spec(format!("unknown factor '{name}' in priority list")))?;
        if f.factors[k].kind != FactorKind::Ordinal {
            return Err(Error::Spec(format!(
                "factor '{name}' is nominal; lexicographic order needs ordinal factors"
            )));
        }
        if order.contains(&k) {
            return Err(Error::Spec(format!(
                "factor '{name}' repeated in priority list"
            )));
        }
        order.push(k);
    }
    if order.len() != f.factors.len() {
        return Err(Error::Spec("priority list must name every factor".into()));
    }
    let factors: Vec<&Factor> = order.iter().map(|&k| &f.factors[k]).collect();
    let mut categories = Vec::new();
    let mut depth_of_vertex = Vec::new();
    let shape = lex_shape(
        &factors,
        String::new(),
        0,
        &mut categories,
        &mut depth_of_vertex,
    );
    let shape = match shape {
        TreeShape::Leaf(_) => {
            return Err(Error::Spec(
                "a lexicographic order needs at least 2 categories".into(),
            ))
        }
        s => s,
    };
    let tree = PartitionTree::new(shape, categories.len())?;
    let internal = tree.internal_vertices();
    let depths: Vec<usize> = internal.iter().map(|&v| tree.vertex(v).depth).collect();
    let share_groups = depths
        .iter()
        .map(|&d| {
            let count = depths.iter().filter(|&&e| e == d).count();
            (d > 0 && count > 1).then(|| format!("depth{d}"))
        })
        .collect();
    Ok(CategoryTree {
        categories,
        ordered: vec![true; internal.len()],
        share_groups,
        tree,
    })
}

fn lex_shape(
    factors: &[&Factor],
    prefix: String,
    depth: usize,
    categories: &mut Vec<String>,
    depths: &mut Vec<usize>,
) -> TreeShape {
    if factors.is_empty() {
        categories.push(prefix);
        return TreeShape::Leaf(categories.len());
    }
    let factor = factors[0];
    if factor.levels.len() == 1 {
        return lex_shape(
            &factors[1..],
            format!("{prefix}{}", factor.levels[0]),
            depth,
            categories,
            depths,
        );
    }
    depths.push(depth);
    TreeShape::Node(
        factor
            .levels
            .iter()
            .map(|l| {
                lex_shape(
                    &factors[1..],
                    format!("{prefix}{l}"),
                    depth + 1,
                    categories,
                    depths,
                )
            })
            .collect(),
    )
}
