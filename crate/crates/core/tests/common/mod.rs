//! Test-side reference implementations: CDFs, inverse ratios and samplers
//! written from the model definitions, independently of the library code.
#![allow(dead_code)]

use pcglm::glm::CategoricalDataset;
use pcglm::link::{CdfKind, RatioKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// CDF values from textbook closed forms (statrs for Normal and Student).
pub fn oracle_cdf(cdf: CdfKind, x: f64) -> f64 {
    match cdf {
        CdfKind::Logistic => 1.0 / (1.0 + (-x).exp()),
        CdfKind::Normal => Normal::new(0.0, 1.0).unwrap().cdf(x),
        CdfKind::Laplace => {
            if x < 0.0 {
                0.5 * x.exp()
            } else {
                1.0 - 0.5 * (-x).exp()
            }
        }
        CdfKind::Student(df) => StudentsT::new(0.0, 1.0, df as f64).unwrap().cdf(x),
        CdfKind::GumbelMin => 1.0 - (-x.exp()).exp(),
        CdfKind::GumbelMax => (-(-x).exp()).exp(),
    }
}

/// Category probabilities from `F(η)` under each ratio's definition.
pub fn oracle_probs(ratio: RatioKind, cdf: CdfKind, eta: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = eta.iter().map(|&e| oracle_cdf(cdf, e)).collect();
    let jm1 = f.len();
    let mut p = vec![0.0; jm1 + 1];
    match ratio {
        RatioKind::Reference => {
            // π_j / π_J = F / (1 − F)
            p[jm1] = 1.0;
            for j in 0..jm1 {
                p[j] = f[j] / (1.0 - f[j]);
            }
        }
        RatioKind::Adjacent => {
            // π_j / π_{j+1} = F / (1 − F)
            p[jm1] = 1.0;
            for j in (0..jm1).rev() {
                p[j] = p[j + 1] * f[j] / (1.0 - f[j]);
            }
        }
        RatioKind::Sequential => {
            let mut rest = 1.0;
            for j in 0..jm1 {
                p[j] = f[j] * rest;
                rest *= 1.0 - f[j];
            }
            p[jm1] = rest;
        }
        RatioKind::Cumulative => {
            let mut prev = 0.0;
            for j in 0..jm1 {
                p[j] = f[j] - prev;
                prev = f[j];
            }
            p[jm1] = 1.0 - prev;
        }
    }
    let total: f64 = p.iter().sum();
    p.iter().map(|v| v / total).collect()
}

/// Draws a category `1..=J` from `probs`.
pub fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j + 1;
        }
    }
    probs.len()
}

pub fn covariates(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| normal(rng)).collect()
}

/// Simulates `n` rows with `p` standard-normal covariates from a
/// probability function of `x`.
pub fn simulate(
    rng: &mut ChaCha8Rng,
    n: usize,
    p: usize,
    j: usize,
    probs: impl Fn(&[f64]) -> Vec<f64>,
) -> CategoricalDataset {
    let rows = (0..n)
        .map(|_| {
            let x = covariates(rng, p);
            let y = draw(rng, &probs(&x));
            (x, y, 1.0)
        })
        .collect();
    CategoricalDataset::from_triples(j, rows).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear predictors of a complete design: `η_j = α_j + x·δ_j` with
/// `β = (α_1..α_{J-1}, δ_1, …, δ_{J-1})`.
pub fn complete_eta(beta: &[f64], x: &[f64], j: usize) -> Vec<f64> {
    let p = x.len();
    (0..j - 1)
        .map(|k| beta[k] + dot(&beta[j - 1 + k * p..j - 1 + (k + 1) * p], x))
        .collect()
}

/// Linear predictors of a proportional design: `η_j = α_j + x·δ`.
pub fn proportional_eta(beta: &[f64], x: &[f64], j: usize) -> Vec<f64> {
    let s = dot(&beta[j - 1..], x);
    (0..j - 1).map(|k| beta[k] + s).collect()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
