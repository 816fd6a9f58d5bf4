//! The cooperative embedding network.
//!
//! Two small tanh networks are iterated against each other for `unroll`
//! steps. The word-topic network maps a word embedding plus the current
//! document embedding to a per-word embedding μ_z; the document network maps
//! the sum of the per-word embeddings to the document embedding μ_θ. Both
//! outputs are L2-normalized after every step. A dense head turns the final
//! μ_θ into class logits.
//!
//! Iteration order within step t: every μ_z^(t) is computed from
//! μ_θ^(t−1) (zero at t = 1), then μ_θ^(t) from the new μ_z^(t).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};

/// Vectors with norm at or below this normalize to zero.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Embedding dimension D, shared by word vectors, μ_z and μ_θ.
    pub dim: usize,
    /// Number of cooperative iterations T.
    pub unroll: usize,
    /// Dense layers in the word-topic network (1 or 2).
    pub depth_z: usize,
    /// Dense layers in the document network (1, 2 or 3).
    pub depth_theta: usize,
    pub dropout_word: f64,
    pub dropout_z: f64,
    pub dropout_theta: f64,
    pub classes: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 10,
            unroll: 1,
            depth_z: 1,
            depth_theta: 1,
            dropout_word: 0.1,
            dropout_z: 0.1,
            dropout_theta: 0.1,
            classes: 2,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.unroll == 0 {
            return bad("unroll must be at least 1".into());
        }
        if !(1..=2).contains(&self.depth_z) {
            return bad(format!("depth_z must be 1 or 2, got {}", self.depth_z));
        }
        if !(1..=3).contains(&self.depth_theta) {
            return bad(format!("depth_theta must be 1, 2 or 3, got {}", self.depth_theta));
        }
        for (name, p) in [
            ("dropout_word", self.dropout_word),
            ("dropout_z", self.dropout_z),
            ("dropout_theta", self.dropout_theta),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }

    /// One logit for binary problems, one per class otherwise.
    pub fn head_outputs(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    pub fn without_dropout(&self) -> Self {
        HyperParams {
            dropout_word: 0.0,
            dropout_z: 0.0,
            dropout_theta: 0.0,
            ..self.clone()
        }
    }
}

/// All trainable arrays. Also used, with identical shapes, for gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// V × D word-embedding table.
    pub embedding: Matrix,
    /// Word-topic network; layer 0 reads the word embedding.
    pub z_layers: Vec<Matrix>,
    /// D × D map from μ_θ into the first word-topic pre-activation.
    pub feedback: Matrix,
    /// Document network; layer 0 reads Σ μ_z.
    pub theta_layers: Vec<Matrix>,
    /// outputs × D classifier weights.
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

/// Gradient with respect to every entry of [`ModelParams`].
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(hp: &HyperParams, vocab_size: usize) -> Self {
        let d = hp.dim;
        ModelParams {
            embedding: Matrix::zeros(vocab_size, d),
            z_layers: (0..hp.depth_z).map(|_| Matrix::zeros(d, d)).collect(),
            feedback: Matrix::zeros(d, d),
            theta_layers: (0..hp.depth_theta).map(|_| Matrix::zeros(d, d)).collect(),
            head: Matrix::zeros(hp.head_outputs(), d),
            head_bias: vec![0.0; hp.head_outputs()],
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero. Embedding rows are lookups
    /// of a one-hot input, so their fan-in is 1.
    pub fn init(hp: &HyperParams, vocab_size: usize, seed: u64) -> Result<Self> {
        hp.validate()?;
        let mut p = Self::zeros(hp, vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut Matrix, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            m.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
        };
        fill(&mut p.embedding, 1);
        for m in &mut p.z_layers {
            fill(m, hp.dim);
        }
        fill(&mut p.feedback, hp.dim);
        for m in &mut p.theta_layers {
            fill(m, hp.dim);
        }
        fill(&mut p.head, hp.dim);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        ModelParams {
            embedding: z(&self.embedding),
            z_layers: self.z_layers.iter().map(z).collect(),
            feedback: z(&self.feedback),
            theta_layers: self.theta_layers.iter().map(z).collect(),
            head: z(&self.head),
            head_bias: vec![0.0; self.head_bias.len()],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols
    }

    /// Named flat views, in a fixed order shared by checkpoints, optimizers
    /// and gradient checks.
    pub fn arrays(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("embedding".to_string(), self.embedding.data.as_slice())];
        for (i, m) in self.z_layers.iter().enumerate() {
            out.push((format!("z_layer{i}"), &m.data));
        }
        out.push(("feedback".to_string(), &self.feedback.data));
        for (i, m) in self.theta_layers.iter().enumerate() {
            out.push((format!("theta_layer{i}"), &m.data));
        }
        out.push(("head".to_string(), &self.head.data));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.data.as_mut_slice()];
        out.extend(self.z_layers.iter_mut().map(|m| m.data.as_mut_slice()));
        out.push(&mut self.feedback.data);
        out.extend(self.theta_layers.iter_mut().map(|m| m.data.as_mut_slice()));
        out.push(&mut self.head.data);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }

    /// Shapes agree with `hp` and a vocabulary of `vocab_size`.
    pub fn check_shapes(&self, hp: &HyperParams, vocab_size: usize) -> Result<()> {
        let expected = Self::zeros(hp, vocab_size);
        let shapes = |p: &ModelParams| -> Vec<(usize, usize)> {
            let mut s = vec![(p.embedding.rows, p.embedding.cols)];
            s.extend(p.z_layers.iter().map(|m| (m.rows, m.cols)));
            s.push((p.feedback.rows, p.feedback.cols));
            s.extend(p.theta_layers.iter().map(|m| (m.rows, m.cols)));
            s.push((p.head.rows, p.head.cols));
            s.push((p.head_bias.len(), 1));
            s
        };
        if shapes(self) != shapes(&expected) {
            return Err(Error::ShapeMismatch(format!(
                "parameters do not match hyper-parameters (dim {}, vocab {vocab_size})",
                hp.dim
            )));
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, (_, src)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// v/‖v‖₂, or the zero vector when ‖v‖₂ ≤ [`EPS_NORM`].
pub fn normalize(v: &[f64]) -> Vec<f64> {
    normalize_with_norm(v).0
}

pub(crate) fn normalize_with_norm(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm2(v);
    if n > EPS_NORM {
        (v.iter().map(|x| x / n).collect(), n)
    } else {
        (vec![0.0; v.len()], n)
    }
}

/// Vector-Jacobian product of [`normalize`]: given ∂L/∂v̂, returns ∂L/∂v =
/// (I − v̂v̂ᵀ)·g / ‖v‖, and zero on the zero branch.
pub fn normalize_backward(unit: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    if norm <= EPS_NORM {
        return vec![0.0; grad.len()];
    }
    let proj = dot(unit, grad);
    unit.iter().zip(grad).map(|(u, g)| (g - u * proj) / norm).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout multipliers (0 or 1/(1−p)), fixed for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    /// Per word occurrence, applied to the looked-up embedding row.
    pub word: Vec<Vec<f64>>,
    /// `[t][i]`, applied to normalized μ_z before summation.
    pub z: Vec<Vec<Vec<f64>>>,
    /// `[t]`, applied to normalized μ_θ before feedback and before the head.
    pub theta: Vec<Vec<f64>>,
}

fn mask<R: Rng + ?Sized>(p: f64, d: usize, rng: &mut R) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; d];
    }
    let keep = 1.0 / (1.0 - p);
    (0..d)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(hp: &HyperParams, words: usize, rng: &mut R) -> Self {
        let d = hp.dim;
        let word = (0..words).map(|_| mask(hp.dropout_word, d, rng)).collect();
        let mut z = Vec::with_capacity(hp.unroll);
        let mut theta = Vec::with_capacity(hp.unroll);
        for _ in 0..hp.unroll {
            z.push((0..words).map(|_| mask(hp.dropout_z, d, rng)).collect());
            theta.push(mask(hp.dropout_theta, d, rng));
        }
        DropoutMasks { word, z, theta }
    }

    fn matches(&self, hp: &HyperParams, words: usize) -> bool {
        let d = hp.dim;
        self.word.len() == words
            && self.word.iter().all(|m| m.len() == d)
            && self.z.len() == hp.unroll
            && self.z.iter().all(|t| t.len() == words && t.iter().all(|m| m.len() == d))
            && self.theta.len() == hp.unroll
            && self.theta.iter().all(|m| m.len() == d)
    }
}

/// Activations of one cooperative step.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationState {
    /// `[i][l]`: tanh output of word-topic layer l for word i. The last layer
    /// is μ_z before normalization.
    pub z_hidden: Vec<Vec<Vec<f64>>>,
    pub z_norm: Vec<f64>,
    /// Normalized μ_z per word.
    pub mu_z: Vec<Vec<f64>>,
    /// Σ_i dropout(μ_z,i), the document network's input.
    pub z_sum: Vec<f64>,
    /// `[l]`: tanh output of document layer l; the last is μ_θ before
    /// normalization.
    pub theta_hidden: Vec<Vec<f64>>,
    pub theta_norm: f64,
    /// Normalized μ_θ.
    pub mu_theta: Vec<f64>,
}

/// Everything the reverse sweep needs: per-step activations plus the
/// dropout masks that were used.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingState {
    pub word_ids: Vec<usize>,
    pub iterations: Vec<IterationState>,
    /// `None` in eval mode.
    pub masks: Option<DropoutMasks>,
}

impl EmbeddingState {
    pub fn mode(&self) -> Mode {
        if self.masks.is_some() {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    /// The document embedding μ_θ^(T).
    pub fn mu_theta(&self) -> &[f64] {
        &self.iterations.last().expect("at least one iteration").mu_theta
    }

    /// μ_θ fed back into step `t + 1` (0-based `t`), dropout applied.
    pub fn theta_feedback(&self, t: usize) -> Vec<f64> {
        let mu = &self.iterations[t].mu_theta;
        match &self.masks {
            Some(m) => mu.iter().zip(&m.theta[t]).map(|(a, b)| a * b).collect(),
            None => mu.clone(),
        }
    }

    /// What the classifier head reads: μ_θ^(T) with its dropout mask.
    pub fn head_input(&self) -> Vec<f64> {
        self.theta_feedback(self.iterations.len() - 1)
    }
}

fn tanh_layer(w: &Matrix, x: &[f64], extra: Option<(&Matrix, &[f64])>) -> Vec<f64> {
    let mut a = w.mul_vec(x);
    if let Some((m, y)) = extra {
        m.mul_vec_acc(y, &mut a);
    }
    a.iter_mut().for_each(|v| *v = v.tanh());
    a
}

/// Runs the cooperative iteration on one document.
///
/// In [`Mode::Train`] fresh dropout masks are drawn from `rng`; in
/// [`Mode::Eval`] no dropout is applied and `rng` is not touched.
pub fn forward<R: Rng + ?Sized>(
    doc: &Document,
    params: &ModelParams,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut R,
) -> Result<EmbeddingState> {
    let masks = match mode {
        Mode::Train => Some(DropoutMasks::sample(hp, doc.len(), rng)),
        Mode::Eval => None,
    };
    forward_with_masks(doc, params, hp, masks)
}

/// [`forward`] with caller-supplied masks (`None` = eval mode).
pub fn forward_with_masks(
    doc: &Document,
    params: &ModelParams,
    hp: &HyperParams,
    masks: Option<DropoutMasks>,
) -> Result<EmbeddingState> {
    if doc.is_empty() {
        return Err(Error::EmptyAfterEncoding);
    }
    if params.dim() != hp.dim
        || params.z_layers.len() != hp.depth_z
        || params.theta_layers.len() != hp.depth_theta
        || params.head.rows != hp.head_outputs()
    {
        return Err(Error::ShapeMismatch("parameters do not match hyper-parameters".into()));
    }
    if let Some(&w) = doc.word_ids.iter().find(|&&w| w >= params.vocab_size()) {
        return Err(Error::ShapeMismatch(format!(
            "word id {w} outside vocabulary of {}",
            params.vocab_size()
        )));
    }
    if let Some(m) = &masks {
        if !m.matches(hp, doc.len()) {
            return Err(Error::ShapeMismatch("dropout masks do not match document".into()));
        }
    }

    let d = hp.dim;
    let inputs: Vec<Vec<f64>> = doc
        .word_ids
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let row = params.embedding.row(w);
            match &masks {
                Some(m) => row.iter().zip(&m.word[i]).map(|(a, b)| a * b).collect(),
                None => row.to_vec(),
            }
        })
        .collect();

    let mut iterations: Vec<IterationState> = Vec::with_capacity(hp.unroll);
    let mut feedback = vec![0.0; d];
    for t in 0..hp.unroll {
        let mut z_hidden = Vec::with_capacity(doc.len());
        let mut z_norm = Vec::with_capacity(doc.len());
        let mut mu_z = Vec::with_capacity(doc.len());
        let mut z_sum = vec![0.0; d];
        for (i, x) in inputs.iter().enumerate() {
            let mut layers = Vec::with_capacity(hp.depth_z);
            layers.push(tanh_layer(&params.z_layers[0], x, Some((&params.feedback, &feedback))));
            for w in &params.z_layers[1..] {
                let next = tanh_layer(w, layers.last().expect("non-empty"), None);
                layers.push(next);
            }
            let out = layers.last().expect("non-empty");
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { iteration: t + 1, word: i });
            }
            let (unit, n) = normalize_with_norm(out);
            match &masks {
                Some(m) => z_sum.iter_mut().zip(unit.iter().zip(&m.z[t][i])).for_each(|(s, (u, k))| *s += u * k),
                None => z_sum.iter_mut().zip(&unit).for_each(|(s, u)| *s += u),
            }
            z_hidden.push(layers);
            z_norm.push(n);
            mu_z.push(unit);
        }

        let mut theta_hidden = Vec::with_capacity(hp.depth_theta);
        theta_hidden.push(tanh_layer(&params.theta_layers[0], &z_sum, None));
        for w in &params.theta_layers[1..] {
            let next = tanh_layer(w, theta_hidden.last().expect("non-empty"), None);
            theta_hidden.push(next);
        }
        let out = theta_hidden.last().expect("non-empty");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                iteration: t + 1,
                word: doc.len(),
            });
        }
        let (mu_theta, theta_norm) = normalize_with_norm(out);
        feedback = match &masks {
            Some(m) => mu_theta.iter().zip(&m.theta[t]).map(|(a, b)| a * b).collect(),
            None => mu_theta.clone(),
        };
        iterations.push(IterationState {
            z_hidden,
            z_norm,
            mu_z,
            z_sum,
            theta_hidden,
            theta_norm,
            mu_theta,
        });
    }

    Ok(EmbeddingState {
        word_ids: doc.word_ids.clone(),
        iterations,
        masks,
    })
}

/// Eval-mode document embedding μ_θ^(T).
pub fn embed(doc: &Document, params: &ModelParams, hp: &HyperParams) -> Result<Vec<f64>> {
    let state = forward_with_masks(doc, params, hp, None)?;
    Ok(state.mu_theta().to_vec())
}

/// logits = head·μ_θ + bias.
pub fn classify(mu_theta: &[f64], params: &ModelParams) -> Vec<f64> {
    let mut logits = params.head_bias.clone();
    params.head.mul_vec_acc(mu_theta, &mut logits);
    logits
}

/// Class probabilities: sigmoid of a single binary logit (returned as
/// `[1 − p, p]`), softmax otherwise.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        let p = sigmoid(logits[0]);
        return vec![1.0 - p, p];
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hp(dim: usize, unroll: usize) -> HyperParams {
        HyperParams {
            dim,
            unroll,
            ..HyperParams::default()
        }
    }

    fn doc(ids: &[usize]) -> Document {
        Document { word_ids: ids.to_vec(), label: 0 }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(normalize(&[0.0, 1.0]), vec![0.0, 1.0]);
        assert_eq!(normalize(&[1e-13, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let h = hp(8, 2);
        let a = ModelParams::init(&h, 50, 3).unwrap();
        assert_eq!(a, ModelParams::init(&h, 50, 3).unwrap());
        assert_ne!(a, ModelParams::init(&h, 50, 4).unwrap());
        let b = 1.0 / 8f64.sqrt();
        assert!(a.embedding.data.iter().all(|x| x.abs() <= 1.0));
        for m in a.z_layers.iter().chain(&a.theta_layers).chain([&a.feedback, &a.head]) {
            assert!(m.data.iter().all(|x| x.abs() <= b));
        }
        assert!(a.head_bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_mean_within_three_sigma() {
        // Uniform(-1, 1) has σ² = 1/3; the mean of n draws has σ = √(1/(3n)).
        let h = hp(10, 1);
        let p = ModelParams::init(&h, 2000, 17).unwrap();
        let n = p.embedding.data.len() as f64;
        let mean = p.embedding.data.iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * (1.0 / (3.0 * n)).sqrt(), "{mean}");
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let h = hp(4, 3);
        let p = ModelParams::zeros(&h, 5);
        let s = forward_with_masks(&doc(&[0, 1, 4]), &p, &h, None).unwrap();
        assert!(s.mu_theta().iter().all(|&x| x == 0.0));
        for it in &s.iterations {
            assert!(it.mu_z.iter().flatten().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_word_hand_computation() {
        // D = 1, T = 1: μ_z = tanh(1·1 + 0.5·0) = tanh 1 → normalized 1;
        // μ_θ = tanh(2·1) → normalized 1.
        let h = hp(1, 1);
        let mut p = ModelParams::zeros(&h, 1);
        p.embedding.data = vec![1.0];
        p.z_layers[0].data = vec![1.0];
        p.feedback.data = vec![0.5];
        p.theta_layers[0].data = vec![2.0];
        let s = forward_with_masks(&doc(&[0]), &p, &h, None).unwrap();
        let it = &s.iterations[0];
        assert!((it.z_hidden[0][0][0] - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert_eq!(it.mu_z[0], vec![1.0]);
        assert!((it.theta_hidden[0][0] - 0.964_027_580_075_817).abs() < 1e-15);
        assert_eq!(s.mu_theta(), &[1.0]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let h = hp(5, 3);
        let p = ModelParams::init(&h, 20, 1).unwrap();
        let d = doc(&[3, 1, 4, 1, 5, 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = forward(&d, &p, &h, Mode::Eval, &mut rng).unwrap();
        let b = forward(&d, &p, &h, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mode(), Mode::Eval);
    }

    #[test]
    fn train_mode_records_masks() {
        let h = HyperParams {
            dropout_word: 0.5,
            ..hp(6, 2)
        };
        let p = ModelParams::init(&h, 10, 1).unwrap();
        let d = doc(&[1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = forward(&d, &p, &h, Mode::Train, &mut rng).unwrap();
        let masks = s.masks.clone().unwrap();
        assert!(masks.word.iter().flatten().all(|&m| m == 0.0 || m == 2.0));
        // Replaying with the recorded masks reproduces the pass bit-exactly.
        assert_eq!(forward_with_masks(&d, &p, &h, Some(masks)).unwrap(), s);
    }

    #[test]
    fn shorter_unroll_is_a_prefix() {
        let h3 = HyperParams {
            dropout_z: 0.3,
            dropout_theta: 0.3,
            ..hp(4, 3)
        };
        let h2 = HyperParams { unroll: 2, ..h3.clone() };
        let p = ModelParams::init(&h3, 12, 2).unwrap();
        let d = doc(&[0, 5, 7, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full = forward(&d, &p, &h3, Mode::Train, &mut rng).unwrap();
        let mut m = full.masks.clone().unwrap();
        m.z.truncate(2);
        m.theta.truncate(2);
        let short = forward_with_masks(&d, &p, &h2, Some(m)).unwrap();
        assert_eq!(&full.iterations[..2], &short.iterations[..]);
    }

    #[test]
    fn duplicate_words_add_linearly() {
        let h = hp(5, 1);
        let p = ModelParams::init(&h, 8, 6).unwrap();
        let once = forward_with_masks(&doc(&[2]), &p, &h, None).unwrap();
        let thrice = forward_with_masks(&doc(&[2, 2, 2]), &p, &h, None).unwrap();
        for (a, b) in once.iterations[0].z_sum.iter().zip(&thrice.iterations[0].z_sum) {
            assert!((3.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_and_probabilities() {
        let h = HyperParams { classes: 3, ..hp(2, 1) };
        let p = ModelParams::zeros(&h, 1);
        let logits = classify(&[0.3, -0.2], &p);
        assert_eq!(logits, vec![0.0; 3]);
        let probs = probabilities(&logits);
        assert!(probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(probabilities(&[0.0]), vec![0.5, 0.5]);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn hyper_param_validation() {
        assert!(HyperParams::default().validate().is_ok());
        assert!(HyperParams { dim: 0, ..HyperParams::default() }.validate().is_err());
        assert!(HyperParams { depth_theta: 4, ..HyperParams::default() }.validate().is_err());
        assert!(HyperParams { dropout_z: 1.0, ..HyperParams::default() }.validate().is_err());
        assert!(HyperParams { classes: 1, ..HyperParams::default() }.validate().is_err());
    }

    #[test]
    fn out_of_vocabulary_id_is_rejected() {
        let h = hp(2, 1);
        let p = ModelParams::zeros(&h, 3);
        assert!(matches!(
            forward_with_masks(&doc(&[3]), &p, &h, None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 3..8),
            c in -50.0f64..50.0,
        ) {
            let p = probabilities(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            for (a, b) in p.iter().zip(probabilities(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn embeddings_have_unit_or_zero_norm(seed in any::<u64>(), ids in prop::collection::vec(0usize..15, 1..12)) {
            let h = HyperParams { depth_z: 2, depth_theta: 2, ..hp(6, 3) };
            let p = ModelParams::init(&h, 15, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = forward(&doc(&ids), &p, &h, Mode::Train, &mut rng).unwrap();
            for it in &s.iterations {
                for v in it.mu_z.iter().chain(std::iter::once(&it.mu_theta)) {
                    let n = norm2(v);
                    prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn word_order_does_not_matter(seed in any::<u64>(), ids in prop::collection::vec(0usize..10, 1..15), rot in 0usize..15) {
            let h = HyperParams { depth_z: 2, ..hp(5, 3) };
            let p = ModelParams::init(&h, 10, seed).unwrap();
            let mut permuted = ids.clone();
            let r = rot % permuted.len();
            permuted.rotate_left(r);
            let last = permuted.len() - 1;
            permuted.swap(0, last);
            let a = embed(&doc(&ids), &p, &h).unwrap();
            let b = embed(&doc(&permuted), &p, &h).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_jacobian_matches_finite_differences(
            v in prop::collection::vec(-3.0f64..3.0, 2..7),
            dir in prop::collection::vec(-1.0f64..1.0, 7),
            g in prop::collection::vec(-1.0f64..1.0, 7),
        ) {
            prop_assume!(norm2(&v) > 0.1);
            let n = v.len();
            let dir = &dir[..n];
            let g = &g[..n];
            // d/dε ⟨g, normalize(v + ε·dir)⟩ at ε = 0 equals ⟨J g, dir⟩ (J symmetric).
            let eps = 1e-6;
            let f = |s: f64| {
                let p: Vec<f64> = v.iter().zip(dir).map(|(a, b)| a + s * b).collect();
                dot(g, &normalize(&p))
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            let (unit, norm) = normalize_with_norm(&v);
            let analytic = dot(&normalize_backward(&unit, norm, g), dir);
            prop_assert!((fd - analytic).abs() <= 1e-7 * (1.0 + analytic.abs()), "{} vs {}", fd, analytic);
        }
    }
}
