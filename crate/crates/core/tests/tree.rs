mod common;

use common::*;
use pcglm::design::{CovariateRow, DesignKind, DesignSpec};
use pcglm::glm::{fit, CategoricalDataset, FitOptions, GlmSpec};
use pcglm::link::{CdfKind, RatioKind};
use pcglm::tree::{
    nested_logit_fit, partition_data, pcglm_fit, pcglm_predict, NestedLogitOptions, NodeModel, NodeSpec,
    PartitionTree, PcglmSpec, TreeShape,
};
use rand::Rng;

fn leaf(j: usize) -> TreeShape {
    TreeShape::Leaf(j)
}

fn node(ch: Vec<TreeShape>) -> TreeShape {
    TreeShape::Node(ch)
}

fn glm(ratio: RatioKind, cdf: CdfKind, design: DesignKind, vars: &[&str]) -> NodeSpec {
    NodeSpec::new(NodeModel::glm(ratio, cdf, design, vars.iter().map(|s| s.to_string()).collect()))
}

fn tight() -> FitOptions {
    FitOptions {
        grad_tol: 1e-9,
        ..FitOptions::default()
    }
}

/// Root `{1,2} | {3,4}` on x1; both children binary on x2.
fn two_pairs(share: bool) -> PcglmSpec {
    let mut a = glm(RatioKind::Reference, CdfKind::Logistic, DesignKind::Complete, &["x2"]);
    let mut b = a.clone();
    if share {
        a.share_group = Some("pairs".into());
        b.share_group = Some("pairs".into());
    }
    PcglmSpec::new(
        PcglmSpec::default_categories(4),
        PartitionTree::new(node(vec![node(vec![leaf(1), leaf(2)]), node(vec![leaf(3), leaf(4)])]), 4).unwrap(),
        vec![glm(RatioKind::Reference, CdfKind::Logistic, DesignKind::Complete, &["x1"]), a, b],
    )
    .unwrap()
}

fn pair_data(seed: u64) -> CategoricalDataset {
    let mut rng = rng(seed);
    simulate(&mut rng, 1500, 2, 4, |x| {
        let root = oracle_probs(RatioKind::Reference, CdfKind::Logistic, &[0.2 + 0.9 * x[0]]);
        let inner = oracle_probs(RatioKind::Reference, CdfKind::Logistic, &[-0.3 + 1.1 * x[1]]);
        vec![root[0] * inner[0], root[0] * inner[1], root[1] * inner[0], root[1] * inner[1]]
    })
}

#[test]
fn shared_vertices_match_a_stacked_binary_fit() {
    let data = pair_data(1);
    let shared = pcglm_fit(&two_pairs(true), &data, &tight()).unwrap();
    // Oracle: the two conditional binary problems pooled into one dataset.
    let stacked = CategoricalDataset::from_triples(
        2,
        data.rows
            .iter()
            .map(|r| (vec![r.x.values[1]], if r.response % 2 == 1 { 1 } else { 2 }, r.weight))
            .collect(),
    )
    .unwrap();
    let pooled = fit(&GlmSpec::canonical(vec![0], 2).unwrap(), &stacked, &tight()).unwrap();
    let root = fit(
        &GlmSpec::canonical(vec![0], 2).unwrap(),
        &CategoricalDataset::from_triples(
            2,
            data.rows.iter().map(|r| (vec![r.x.values[0]], if r.response <= 2 { 1 } else { 2 }, 1.0)).collect(),
        )
        .unwrap(),
        &tight(),
    )
    .unwrap();
    assert!((shared.log_likelihood - (pooled.log_likelihood + root.log_likelihood)).abs() < 1e-8);
    assert_eq!(shared.n_params, 4);
    let b1 = shared.nodes[1].beta.as_ref().unwrap();
    let b2 = shared.nodes[2].beta.as_ref().unwrap();
    assert_eq!(b1, b2);
    for (a, b) in b1.as_slice().iter().zip(pooled.beta.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }
    // Without sharing the fit can only improve and has two more parameters.
    let free = pcglm_fit(&two_pairs(false), &data, &tight()).unwrap();
    assert_eq!(free.n_params, 6);
    assert!(free.log_likelihood >= shared.log_likelihood - 1e-9);
}

#[test]
fn shared_slope_agrees_with_a_grid_search() {
    // The shared binary model has two parameters; the best point of a fine
    // grid around the fit, scored by a direct likelihood, must be the fit.
    let data = pair_data(2);
    let shared = pcglm_fit(&two_pairs(true), &data, &tight()).unwrap();
    let beta = shared.nodes[1].beta.as_ref().unwrap().as_slice().to_vec();
    let ll = |a: f64, b: f64| -> f64 {
        data.rows
            .iter()
            .map(|r| {
                let p = oracle_probs(RatioKind::Reference, CdfKind::Logistic, &[a + b * r.x.values[1]]);
                p[if r.response % 2 == 1 { 0 } else { 1 }].ln()
            })
            .sum()
    };
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in -40..=40 {
        for k in -40..=40 {
            let (a, b) = (beta[0] + i as f64 * 0.005, beta[1] + k as f64 * 0.005);
            let v = ll(a, b);
            if v > best.0 {
                best = (v, a, b);
            }
        }
    }
    assert!((best.1 - beta[0]).abs() <= 0.005 && (best.2 - beta[1]).abs() <= 0.005, "{best:?} vs {beta:?}");
}

#[test]
fn node_fits_do_not_depend_on_other_vertices() {
    let data = pair_data(3);
    let spec = two_pairs(false);
    let whole = pcglm_fit(&spec, &data, &FitOptions::default()).unwrap();
    let tree = &spec.tree;
    for (k, &v) in tree.internal_vertices().iter().enumerate() {
        let col = if k == 0 { 0 } else { 1 };
        let sub = partition_data(tree, &data, v, &[col]).unwrap();
        let alone = fit(&GlmSpec::canonical(vec![0], 2).unwrap(), &sub, &FitOptions::default()).unwrap();
        let nf = &whole.nodes[k];
        assert_eq!(nf.beta.as_ref().unwrap(), &alone.beta, "vertex {k}");
        assert_eq!(nf.log_likelihood.to_bits(), alone.log_likelihood.to_bits());
    }
}

#[test]
fn predictions_sum_to_one() {
    let mut rng = rng(4);
    let cdfs = [CdfKind::Logistic, CdfKind::Normal, CdfKind::GumbelMax, CdfKind::Student(2)];
    for rep in 0..20 {
        let data = pair_data(100 + rep);
        let cdf = cdfs[rep as usize % 4];
        let spec = PcglmSpec::new(
            PcglmSpec::default_categories(4),
            PartitionTree::new(node(vec![leaf(1), node(vec![leaf(2), leaf(3), leaf(4)])]), 4).unwrap(),
            vec![
                glm(RatioKind::Reference, cdf, DesignKind::Complete, &["x1", "x2"]),
                glm(RatioKind::Adjacent, cdf, DesignKind::Proportional, &["x2"]),
            ],
        )
        .unwrap();
        let f = pcglm_fit(&spec, &data, &FitOptions::default()).unwrap();
        for _ in 0..50 {
            let x = CovariateRow::new(vec![3.0 * normal(&mut rng), 3.0 * normal(&mut rng)]);
            let p = pcglm_predict(&f, &x).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn nested_logit_without_lambda_is_the_partitioned_model() {
    let data = pair_data(5);
    let spec = two_pairs(false);
    let opts = NestedLogitOptions {
        root_variables: vec!["x1".into()],
        conditional: false,
        estimate_lambda: false,
        fit: tight(),
    };
    let nl = nested_logit_fit(&spec, &data, &opts).unwrap();
    let plain = pcglm_fit(&spec, &data, &tight()).unwrap();
    assert!((nl.fit.log_likelihood - plain.log_likelihood).abs() < 1e-8);
    assert!(nl.lambda.iter().all(Option::is_none));

    // With λ estimated the root gains one column and cannot fit worse.
    let with = nested_logit_fit(&spec, &data, &NestedLogitOptions { estimate_lambda: true, ..opts }).unwrap();
    assert_eq!(with.lambda.len(), 1);
    assert!(with.lambda[0].is_some());
    assert!(with.fit.nodes[0].log_likelihood >= plain.nodes[0].log_likelihood - 1e-9);
    assert!(!with.note.is_empty());
}

#[test]
fn sequential_chain_matches_sequential_glm() {
    let mut rng = rng(6);
    for cdf in [CdfKind::Logistic, CdfKind::GumbelMin, CdfKind::Normal] {
        let beta = [-0.2, 0.1, 0.4, 0.7, -0.5, -0.6, 0.3, 0.3, 0.8];
        let data = simulate(&mut rng, 1200, 2, 4, |x| {
            oracle_probs(RatioKind::Sequential, cdf, &complete_eta(&beta, x, 4))
        });
        let direct = fit(
            &GlmSpec::new(RatioKind::Sequential, cdf, DesignSpec::complete(vec![0, 1]), 4).unwrap(),
            &data,
            &tight(),
        )
        .unwrap();
        let n = || glm(RatioKind::Sequential, cdf, DesignKind::Complete, &["x1", "x2"]);
        let spec = PcglmSpec::new(
            PcglmSpec::default_categories(4),
            PartitionTree::new(node(vec![leaf(1), node(vec![leaf(2), node(vec![leaf(3), leaf(4)])])]), 4).unwrap(),
            vec![n(), n(), n()],
        )
        .unwrap();
        let chain = pcglm_fit(&spec, &data, &tight()).unwrap();
        assert!((direct.log_likelihood - chain.log_likelihood).abs() < 1e-6, "{}", cdf.name());
        assert_eq!(chain.n_params, direct.beta.len());
    }
}

#[test]
fn canonical_fit_is_invariant_under_relabelling() {
    let mut rng = rng(7);
    let beta = [0.3, -0.2, 0.5, 0.7, -0.4, -0.5, 0.2, 0.1, 0.6];
    let data = simulate(&mut rng, 800, 2, 4, |x| {
        oracle_probs(RatioKind::Reference, CdfKind::Logistic, &complete_eta(&beta, x, 4))
    });
    let spec = GlmSpec::canonical(vec![0, 1], 4).unwrap();
    let base = fit(&spec, &data, &tight()).unwrap().log_likelihood;
    for _ in 0..5 {
        let mut perm: Vec<usize> = (1..=4).collect();
        for i in (1..4).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabelled = data.relabel(&perm, 4);
        let l = fit(&spec, &relabelled, &tight()).unwrap().log_likelihood;
        assert!((l - base).abs() < 1e-8);
    }
}
