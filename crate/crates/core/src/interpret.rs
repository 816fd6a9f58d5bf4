//! Word relevance for a document embedding.
//!
//! Given a target μ_θ, find weights f over a candidate word set S such that
//! feeding Σ_c f_c · μ_z(c) through the document network reproduces μ_θ:
//!
//! ```text
//! r(f) = normalize(θ-stack(Σ_c f_c · normalize(z-stack(E[c], μ_θ)))) − μ_θ
//! ```
//!
//! and minimize ‖r(f)‖². Heavily weighted words are the ones the embedding
//! is built from.

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{normalize_backward, normalize_with_norm, HyperParams, ModelParams};

fn tanh_stack(layers: &[Matrix], first: Vec<f64>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut pre = first;
    for (l, w) in layers.iter().enumerate() {
        if l > 0 {
            pre = w.mul_vec(out.last().expect("previous layer"));
        }
        pre.iter_mut().for_each(|v| *v = v.tanh());
        out.push(pre.clone());
    }
    out
}

/// The relevance objective for one target embedding; per-word vectors are
/// computed once.
#[derive(Clone, Debug)]
pub struct Relevance<'a> {
    params: &'a ModelParams,
    target: Vec<f64>,
    candidates: Vec<usize>,
    /// Normalized word-topic output of each candidate given the target.
    word_vectors: Vec<Vec<f64>>,
}

struct Pass {
    hidden: Vec<Vec<f64>>,
    unit: Vec<f64>,
    norm: f64,
    sum: Vec<f64>,
}

impl<'a> Relevance<'a> {
    pub fn new(target: &[f64], params: &'a ModelParams, hp: &HyperParams, candidates: &[usize]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        params.check_shapes(hp, params.vocab_size())?;
        if target.len() != hp.dim {
            return Err(Error::ShapeMismatch(format!("target has {} entries, dim is {}", target.len(), hp.dim)));
        }
        if let Some(&c) = candidates.iter().find(|&&c| c >= params.vocab_size()) {
            return Err(Error::ShapeMismatch(format!("candidate {c} outside vocabulary")));
        }
        let word_vectors = candidates
            .iter()
            .map(|&c| {
                let mut first = params.z_layers[0].mul_vec(params.embedding.row(c));
                params.feedback.mul_vec_acc(target, &mut first);
                let hidden = tanh_stack(&params.z_layers, first);
                normalize_with_norm(hidden.last().expect("at least one layer")).0
            })
            .collect();
        Ok(Relevance {
            params,
            target: target.to_vec(),
            candidates: candidates.to_vec(),
            word_vectors,
        })
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    fn pass(&self, f: &[f64]) -> Pass {
        let d = self.target.len();
        let mut sum = vec![0.0; d];
        for (fc, u) in f.iter().zip(&self.word_vectors) {
            sum.iter_mut().zip(u).for_each(|(s, x)| *s += fc * x);
        }
        let first = self.params.theta_layers[0].mul_vec(&sum);
        let hidden = tanh_stack(&self.params.theta_layers, first);
        let (unit, norm) = normalize_with_norm(hidden.last().expect("at least one layer"));
        Pass {
            hidden,
            unit,
            norm,
            sum,
        }
    }

    pub fn residual(&self, f: &[f64]) -> Vec<f64> {
        let p = self.pass(f);
        p.unit.iter().zip(&self.target).map(|(a, b)| a - b).collect()
    }

    /// ‖r(f)‖².
    pub fn objective(&self, f: &[f64]) -> f64 {
        let r = self.residual(f);
        dot(&r, &r)
    }

    /// Objective and its gradient with respect to `f`.
    pub fn objective_and_grad(&self, f: &[f64]) -> (f64, Vec<f64>) {
        let p = self.pass(f);
        let r: Vec<f64> = p.unit.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let value = dot(&r, &r);
        let d_unit: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let mut grad = normalize_backward(&p.unit, p.norm, &d_unit);
        let layers = &self.params.theta_layers;
        for l in (0..layers.len()).rev() {
            let dpre: Vec<f64> = p.hidden[l].iter().zip(&grad).map(|(h, g)| g * (1.0 - h * h)).collect();
            grad = vec![0.0; dpre.len()];
            layers[l].tmul_vec_acc(&dpre, &mut grad);
        }
        debug_assert_eq!(grad.len(), p.sum.len());
        let df = self.word_vectors.iter().map(|u| dot(u, &grad)).collect();
        (value, df)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Starting weights; uniform 1/|S| when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for RelevanceOptions {
    fn default() -> Self {
        RelevanceOptions {
            steps: 500,
            learning_rate: 1e-2,
            init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub candidates: Vec<usize>,
    /// Best weights found, aligned with `candidates`.
    pub weights: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    /// Optimizer step after which `weights` was reached.
    pub best_step: usize,
    /// Objective at every iterate, starting with the initial one.
    pub trace: Vec<f64>,
}

/// Minimizes ‖r(f)‖² with Adam and returns the best iterate.
pub fn solve_relevance(
    target: &[f64],
    params: &ModelParams,
    hp: &HyperParams,
    candidates: &[usize],
    opts: &RelevanceOptions,
) -> Result<RelevanceResult> {
    if opts.steps == 0 || opts.learning_rate.is_nan() || opts.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig("relevance needs steps ≥ 1 and a positive learning rate".into()));
    }
    let rel = Relevance::new(target, params, hp, candidates)?;
    let n = candidates.len();
    let mut f = match &opts.init {
        Some(init) if init.len() == n => init.clone(),
        Some(init) => {
            return Err(Error::ShapeMismatch(format!("{} initial weights for {n} candidates", init.len())))
        }
        None => vec![1.0 / n as f64; n],
    };
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(opts.steps + 1);
    let mut best = (f64::INFINITY, 0usize, f.clone());
    for step in 0..=opts.steps {
        let (value, grad) = rel.objective_and_grad(&f);
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective { step });
        }
        trace.push(value);
        if value < best.0 {
            best = (value, step, f.clone());
        }
        if step == opts.steps {
            break;
        }
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for j in 0..n {
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
            f[j] -= opts.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(RelevanceResult {
        candidates: candidates.to_vec(),
        weights: best.2,
        objective: best.0,
        initial_objective: trace[0],
        best_step: best.1,
        trace,
    })
}

/// Word counts of `doc` over `candidates`, for use as a starting point.
pub fn count_init(doc: &Document, candidates: &[usize]) -> Vec<f64> {
    candidates
        .iter()
        .map(|c| doc.word_ids.iter().filter(|&&w| w == *c).count() as f64)
        .collect()
}

/// Positions of the `n` largest weights, descending; equal weights keep the
/// lower candidate id first.
pub fn rank(weights: &[f64], ids: &[usize], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(n);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedWord {
    pub id: usize,
    pub token: String,
    pub weight: f64,
}

pub fn top_words(result: &RelevanceResult, vocab: &Vocabulary, n: usize) -> Vec<RankedWord> {
    rank(&result.weights, &result.candidates, n)
        .into_iter()
        .map(|i| {
            let id = result.candidates[i];
            RankedWord {
                id,
                token: vocab.token_of(id).unwrap_or_default().to_string(),
                weight: result.weights[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::relative_error;
    use crate::model::embed;
    use proptest::prelude::*;

    fn hp(depth_theta: usize) -> HyperParams {
        HyperParams {
            dim: 5,
            depth_z: 2,
            depth_theta,
            ..HyperParams::default()
        }
    }

    #[test]
    fn zero_weights_give_minus_target() {
        let h = hp(1);
        let p = ModelParams::init(&h, 8, 1).unwrap();
        let target = embed(&Document { word_ids: vec![1, 2], label: 0 }, &p, &h).unwrap();
        let rel = Relevance::new(&target, &p, &h, &[0, 1, 2]).unwrap();
        let r = rel.residual(&[0.0; 3]);
        assert_eq!(r, target.iter().map(|x| -x).collect::<Vec<_>>());
    }

    #[test]
    fn counts_reproduce_embedding_without_feedback() {
        // With W₃ = 0 the word vectors do not depend on μ_θ, so the counts of
        // a one-step document reproduce its embedding up to rounding.
        let h = HyperParams { unroll: 1, ..hp(2) };
        let mut p = ModelParams::init(&h, 8, 2).unwrap();
        p.feedback.data.iter_mut().for_each(|x| *x = 0.0);
        let doc = Document { word_ids: vec![3, 5, 3, 7], label: 0 };
        let target = embed(&doc, &p, &h).unwrap();
        let s: Vec<usize> = (0..8).collect();
        let rel = Relevance::new(&target, &p, &h, &s).unwrap();
        assert!(rel.objective(&count_init(&doc, &s)) < 1e-28);
    }

    #[test]
    fn zero_target_and_zero_model_is_solved_by_zero() {
        let h = hp(1);
        let p = ModelParams::zeros(&h, 4);
        let rel = Relevance::new(&[0.0; 5], &p, &h, &[0, 1]).unwrap();
        assert_eq!(rel.objective(&[0.0, 0.0]), 0.0);
        let r = solve_relevance(&[0.0; 5], &p, &h, &[0, 1], &RelevanceOptions::default()).unwrap();
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn solver_never_worsens_and_is_deterministic() {
        let h = hp(2);
        let p = ModelParams::init(&h, 12, 3).unwrap();
        let target = embed(&Document { word_ids: vec![0, 4, 4, 9], label: 0 }, &p, &h).unwrap();
        let s: Vec<usize> = (0..12).collect();
        let a = solve_relevance(&target, &p, &h, &s, &RelevanceOptions::default()).unwrap();
        let b = solve_relevance(&target, &p, &h, &s, &RelevanceOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.objective <= a.initial_objective);
        assert_eq!(a.trace.len(), 501);
        assert_eq!(a.objective, a.trace.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn errors() {
        let h = hp(1);
        let p = ModelParams::zeros(&h, 4);
        assert!(matches!(Relevance::new(&[0.0; 5], &p, &h, &[]), Err(Error::EmptyCandidates)));
        assert!(Relevance::new(&[0.0; 5], &p, &h, &[4]).is_err());
        let opts = RelevanceOptions { steps: 0, ..RelevanceOptions::default() };
        assert!(solve_relevance(&[0.0; 5], &p, &h, &[0], &opts).is_err());
    }

    #[test]
    fn ranking() {
        assert_eq!(rank(&[0.1, 0.9, 0.5], &[0, 1, 2], 2), vec![1, 2]);
        assert_eq!(rank(&[0.3, 0.3, 0.3], &[7, 2, 5], 3), vec![1, 2, 0]);
        let mut all = rank(&[0.2, -1.0, 4.0, 0.0], &[0, 1, 2, 3], 4);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gradient_matches_finite_differences(
            seed in any::<u64>(),
            depth in 1usize..=3,
            f in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let h = hp(depth);
            let p = ModelParams::init(&h, 10, seed).unwrap();
            let target = embed(&Document { word_ids: vec![1, 2, 8], label: 0 }, &p, &h).unwrap();
            let s = [0, 1, 2, 5, 8, 9];
            let rel = Relevance::new(&target, &p, &h, &s).unwrap();
            let (_, grad) = rel.objective_and_grad(&f);
            let eps = 1e-5;
            for j in 0..f.len() {
                let mut up = f.clone();
                up[j] += eps;
                let mut down = f.clone();
                down[j] -= eps;
                let fd = (rel.objective(&up) - rel.objective(&down)) / (2.0 * eps);
                prop_assert!(relative_error(grad[j], fd) < 1e-6,
                    "{}: {} vs {}", j, grad[j], fd);
            }
        }
    }
}
