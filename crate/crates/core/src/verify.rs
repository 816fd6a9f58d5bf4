//! Self-verification suites run by `coopnet verify`.
//!
//! Each suite draws seeded random instances, measures one number per
//! property and compares it with a fixed bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::diff::{grad_check, GradCheckOptions, LossConfig};
use crate::error::Result;
use crate::metrics::{auc, auc_brute_force};
use crate::model::{DropoutMasks, HyperParams, ModelParams};
use crate::oracle::{brute_force_posterior, direct_kl, free_energy, run_meanfield, update_q_theta, update_q_z};
use crate::synth::sample_dirichlet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradcheck,
    Oracle,
    Auc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Below,
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub measured: f64,
    pub comparison: Comparison,
    pub bound: f64,
    pub passed: bool,
}

impl PropertyResult {
    pub fn new(name: &str, measured: f64, comparison: Comparison, bound: f64) -> Self {
        let passed = match comparison {
            Comparison::Below => measured < bound,
            Comparison::AtMost => measured <= bound,
            Comparison::AtLeast => measured >= bound,
        };
        PropertyResult {
            name: name.to_string(),
            measured,
            comparison,
            bound,
            passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub instances: usize,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl SuiteReport {
    fn new(suite: Suite, seed: u64, instances: usize, properties: Vec<PropertyResult>) -> Self {
        SuiteReport {
            suite,
            seed,
            instances,
            passed: properties.iter().all(|p| p.passed),
            properties,
        }
    }

    pub fn to_json(&self) -> String {
        crate::fmt::to_json_string(self)
    }
}

/// Bound on the total variation between the mean-field and exact posterior
/// means of θ. Measured worst case over 2000 two-topic instances: 0.0448.
pub const MEAN_TV_ENVELOPE: f64 = 0.05;

fn instance_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Runs `suite` with its standard instance counts.
pub fn run(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(100, seed),
        Suite::Oracle => oracle_suite(100, 20, seed),
        Suite::Auc => auc_suite(1000, seed),
    }
}

/// One random gradient-check instance: D ∈ {2, 4, 8}, T ∈ 1..=3, depth_z ∈
/// 1..=2, depth_theta ∈ 1..=2, V ≤ 30, N ≤ 10, train-mode dropout masks.
pub fn gradcheck_instance(
    seed: u64,
    i: usize,
) -> (HyperParams, ModelParams, Document, DropoutMasks) {
    let mut rng = instance_rng(seed, i);
    let hp = HyperParams {
        dim: [2, 4, 8][rng.random_range(0..3)],
        unroll: rng.random_range(1..=3),
        depth_z: rng.random_range(1..=2),
        depth_theta: rng.random_range(1..=2),
        ..HyperParams::default()
    };
    let vocab = rng.random_range(1..=30);
    let words = rng.random_range(1..=10);
    let params = ModelParams::init(&hp, vocab, rng.random()).expect("valid hyper-parameters");
    let doc = Document {
        word_ids: (0..words).map(|_| rng.random_range(0..vocab)).collect(),
        label: rng.random_range(0..2),
    };
    let masks = DropoutMasks::sample(&hp, words, &mut rng);
    (hp, params, doc, masks)
}

/// Analytic gradients against double-double central differences.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let errors = (0..instances)
        .into_par_iter()
        .map(|i| {
            let (hp, params, doc, masks) = gradcheck_instance(seed, i);
            let opts = GradCheckOptions {
                seed: i as u64,
                ..GradCheckOptions::extended()
            };
            let cfg = LossConfig::for_classes(hp.classes);
            grad_check(&params, &hp, &doc, &cfg, Some(masks), &opts).map(|r| (r.max_rel_error, r.coordinates))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let coords: usize = errors.iter().map(|e| e.1).sum();
    Ok(SuiteReport::new(
        Suite::Gradcheck,
        seed,
        instances,
        vec![
            PropertyResult::new("max_relative_error", worst, Comparison::Below, 1e-5),
            PropertyResult::new("coordinates_checked", coords as f64, Comparison::AtLeast, instances as f64),
        ],
    ))
}

/// A random LDA instance: α, β and a document.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaInstance {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub words: Vec<usize>,
}

/// K ∈ 1..=5, V ∈ 1..=10, N ∈ 1..=8, α_k ∈ [0.1, 3), β rows ~ Dirichlet(1).
pub fn meanfield_instance(seed: u64, i: usize) -> LdaInstance {
    let mut rng = instance_rng(seed, i);
    let k = rng.random_range(1..=5);
    let v = rng.random_range(1..=10);
    let n = rng.random_range(1..=8);
    lda_instance(&mut rng, k, v, n, 0.1..3.0)
}

/// K = 2, V ∈ 2..=10, N ∈ 1..=8, α_k ∈ [1.5, 3).
pub fn two_topic_instance(seed: u64, i: usize) -> LdaInstance {
    let mut rng = instance_rng(seed ^ 0x5eed, i);
    let v = rng.random_range(2..=10);
    let n = rng.random_range(1..=8);
    lda_instance(&mut rng, 2, v, n, 1.5..3.0)
}

fn lda_instance(rng: &mut ChaCha8Rng, k: usize, v: usize, n: usize, alpha: std::ops::Range<f64>) -> LdaInstance {
    let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(alpha.clone())).collect();
    let beta = (0..k)
        .map(|_| {
            let row = sample_dirichlet(&vec![1.0; v], rng);
            // Keep every word possible under every topic.
            let floored: Vec<f64> = row.iter().map(|p| p.max(1e-6)).collect();
            let total: f64 = floored.iter().sum();
            floored.iter().map(|p| p / total).collect()
        })
        .collect();
    let words = (0..n).map(|_| rng.random_range(0..v)).collect();
    LdaInstance { alpha, beta, words }
}

struct MeanFieldMeasure {
    increase: f64,
    converged: bool,
    q_z_residual: f64,
    gamma_residual: f64,
}

fn measure_meanfield(inst: &LdaInstance) -> Result<MeanFieldMeasure> {
    let run = run_meanfield(&inst.alpha, &inst.beta, &inst.words, 10_000, 1e-12)?;
    let mut prev = run.initial_free_energy;
    let mut increase = f64::NEG_INFINITY;
    for &f in &run.trace {
        increase = increase.max(f - prev);
        prev = f;
    }
    let mut q_z_residual: f64 = 0.0;
    for (row, &w) in run.state.q_z.iter().zip(&inst.words) {
        let fresh = update_q_z(&inst.beta, w, &run.state.gamma)?;
        for (a, b) in fresh.iter().zip(row) {
            q_z_residual = q_z_residual.max((a - b).abs());
        }
    }
    let gamma_residual = update_q_theta(&inst.alpha, &run.state.q_z)
        .iter()
        .zip(&run.state.gamma)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(MeanFieldMeasure {
        increase,
        converged: run.converged,
        q_z_residual,
        gamma_residual,
    })
}

/// Free-energy gap, directly integrated KL and posterior-mean total
/// variation for one two-topic instance.
pub fn brute_force_comparison(inst: &LdaInstance, resolution: usize) -> Result<(f64, f64, f64)> {
    let run = run_meanfield(&inst.alpha, &inst.beta, &inst.words, 10_000, 1e-12)?;
    let bf = brute_force_posterior(&inst.alpha, &inst.beta, &inst.words, resolution)?;
    let gap = free_energy(&run.state, &inst.alpha, &inst.beta, &inst.words) + bf.log_evidence;
    let kl = direct_kl(&run.state, &inst.alpha, &inst.beta, &inst.words, bf.log_evidence, resolution)?;
    let total: f64 = run.state.gamma.iter().sum();
    let tv = 0.5
        * run
            .state
            .gamma
            .iter()
            .zip(&bf.theta_mean)
            .map(|(g, m)| (g / total - m).abs())
            .sum::<f64>();
    Ok((gap, kl, tv))
}

/// Mean-field monotonicity and stationarity on `meanfield` random
/// instances, then the variational bound against brute force on
/// `two_topic` K = 2 instances at grid resolution 5000.
pub fn oracle_suite(meanfield: usize, two_topic: usize, seed: u64) -> Result<SuiteReport> {
    let measures = (0..meanfield)
        .into_par_iter()
        .map(|i| measure_meanfield(&meanfield_instance(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let bounds = (0..two_topic)
        .into_par_iter()
        .map(|i| brute_force_comparison(&two_topic_instance(seed, i), 5000))
        .collect::<Result<Vec<_>>>()?;

    let fold_max = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let mut properties = vec![
        PropertyResult::new(
            "max_free_energy_increase",
            fold_max(&mut measures.iter().map(|m| m.increase)),
            Comparison::AtMost,
            1e-10,
        ),
        PropertyResult::new(
            "unconverged_runs",
            measures.iter().filter(|m| !m.converged).count() as f64,
            Comparison::AtMost,
            0.0,
        ),
        PropertyResult::new(
            "fixed_point_residual_q_z",
            fold_max(&mut measures.iter().map(|m| m.q_z_residual)),
            Comparison::AtMost,
            1e-8,
        ),
        PropertyResult::new(
            "fixed_point_residual_gamma",
            fold_max(&mut measures.iter().map(|m| m.gamma_residual)),
            Comparison::AtMost,
            1e-8,
        ),
    ];
    if two_topic > 0 {
        properties.extend([
            PropertyResult::new(
                "min_bound_gap",
                bounds.iter().map(|b| b.0).fold(f64::INFINITY, f64::min),
                Comparison::AtLeast,
                -1e-4,
            ),
            PropertyResult::new(
                "max_gap_minus_direct_kl",
                fold_max(&mut bounds.iter().map(|b| (b.0 - b.1).abs())),
                Comparison::AtMost,
                1e-3,
            ),
            PropertyResult::new(
                "max_posterior_mean_tv",
                fold_max(&mut bounds.iter().map(|b| b.2)),
                Comparison::AtMost,
                MEAN_TV_ENVELOPE,
            ),
        ]);
    }
    Ok(SuiteReport::new(Suite::Oracle, seed, meanfield + two_topic, properties))
}

/// Scores and labels with both classes present; about half the instances
/// draw scores from a handful of levels so ties are common.
pub fn auc_instance(seed: u64, i: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = instance_rng(seed, i);
    let n = rng.random_range(2..=60);
    let levels = if rng.random() { Some(rng.random_range(1..=6)) } else { None };
    let scores = (0..n)
        .map(|_| match levels {
            Some(l) => rng.random_range(0..l) as f64 / l as f64,
            None => rng.random::<f64>(),
        })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let j = rng.random_range(0..n);
    let k = (j + 1 + rng.random_range(0..n - 1)) % n;
    labels[j] = true;
    labels[k] = false;
    (scores, labels)
}

/// Sorted-rank AUC against the all-pairs count, compared for exact equality.
pub fn auc_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut mismatches = 0usize;
    let mut max_diff: f64 = 0.0;
    for i in 0..instances {
        let (scores, labels) = auc_instance(seed, i);
        let fast = auc(&scores, &labels)?;
        let slow = auc_brute_force(&scores, &labels)?;
        if fast != slow {
            mismatches += 1;
            max_diff = max_diff.max((fast - slow).abs());
        }
    }
    Ok(SuiteReport::new(
        Suite::Auc,
        seed,
        instances,
        vec![
            PropertyResult::new("mismatched_instances", mismatches as f64, Comparison::AtMost, 0.0),
            PropertyResult::new("max_abs_difference", max_diff, Comparison::AtMost, 0.0),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible_and_in_range() {
        for i in 0..50 {
            let (hp, p, doc, _) = gradcheck_instance(3, i);
            assert_eq!(gradcheck_instance(3, i).2, doc);
            assert!([2, 4, 8].contains(&hp.dim));
            assert!((1..=3).contains(&hp.unroll));
            assert!(p.vocab_size() <= 30 && doc.len() <= 10);
            let m = meanfield_instance(3, i);
            assert!(m.alpha.len() <= 5 && m.beta[0].len() <= 10 && m.words.len() <= 8);
            for row in &m.beta {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let (_, labels) = auc_instance(3, i);
            assert!(labels.contains(&true) && labels.contains(&false));
        }
    }

    #[test]
    fn property_comparisons() {
        assert!(PropertyResult::new("a", 0.0, Comparison::AtMost, 0.0).passed);
        assert!(!PropertyResult::new("a", 0.0, Comparison::Below, 0.0).passed);
        assert!(PropertyResult::new("a", -1e-5, Comparison::AtLeast, -1e-4).passed);
        assert!(!PropertyResult::new("a", f64::NAN, Comparison::AtMost, 1.0).passed);
    }

    #[test]
    fn small_suites_pass() {
        assert!(gradcheck_suite(4, 1).unwrap().passed);
        assert!(oracle_suite(10, 2, 1).unwrap().passed);
        let r = auc_suite(50, 1).unwrap();
        assert!(r.passed);
        assert!(r.to_json().contains("\"mismatched_instances\""));
    }
}
