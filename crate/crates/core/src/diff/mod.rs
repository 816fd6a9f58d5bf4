//! Losses and the reverse sweep through the unrolled iteration.

pub mod dd;
mod reference;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    classify, forward_with_masks, normalize_backward, sigmoid, DropoutMasks, EmbeddingState, Gradients,
    HyperParams, ModelParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// One logit, sigmoid likelihood.
    BinaryCrossEntropy,
    /// One logit per class, softmax likelihood.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Per-class multiplier on the negative log-likelihood.
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    /// Binary cross-entropy for two classes, cross-entropy otherwise, all
    /// weights 1.
    pub fn for_classes(classes: usize) -> Self {
        LossConfig {
            kind: if classes == 2 {
                LossKind::BinaryCrossEntropy
            } else {
                LossKind::CrossEntropy
            },
            class_weights: vec![1.0; classes],
        }
    }

    pub fn validate(&self, hp: &HyperParams) -> Result<()> {
        if self.class_weights.len() != hp.classes {
            return Err(Error::InvalidConfig(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                hp.classes
            )));
        }
        if let Some(w) = self.class_weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidConfig(format!("class weight {w} is not positive")));
        }
        let expected = if hp.classes == 2 {
            LossKind::BinaryCrossEntropy
        } else {
            LossKind::CrossEntropy
        };
        if self.kind != expected {
            return Err(Error::InvalidConfig(format!(
                "{:?} loss does not fit a {}-class head",
                self.kind, hp.classes
            )));
        }
        Ok(())
    }
}

fn check_logits(logits: &[f64], label: usize, cfg: &LossConfig) -> Result<()> {
    let ok = match cfg.kind {
        LossKind::BinaryCrossEntropy => logits.len() == 1 && label < 2,
        LossKind::CrossEntropy => logits.len() >= 2 && label < logits.len(),
    };
    if !ok || label >= cfg.class_weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits with label {label} for {:?}",
            logits.len(),
            cfg.kind
        )));
    }
    Ok(())
}

/// Weighted negative log-likelihood of `label`.
pub fn loss(logits: &[f64], label: usize, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_and_grad(logits, label, cfg)?.0)
}

/// Loss and its gradient with respect to the logits.
pub fn loss_and_grad(logits: &[f64], label: usize, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_logits(logits, label, cfg)?;
    let w = cfg.class_weights[label];
    match cfg.kind {
        LossKind::BinaryCrossEntropy => {
            let x = logits[0];
            let y = label as f64;
            let l = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            Ok((w * l, vec![w * (sigmoid(x) - y)]))
        }
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            let grad = logits
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    let p = (l - lse).exp();
                    w * (p - if k == label { 1.0 } else { 0.0 })
                })
                .collect();
            Ok((w * (lse - logits[label]), grad))
        }
    }
}

/// Gradient of one document's loss. Only embedding rows of words in the
/// document can be non-zero, so they are kept apart from the dense arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGradients {
    /// Word id → gradient of its embedding row.
    pub embedding_rows: BTreeMap<usize, Vec<f64>>,
    /// Every other array; `embedding` here has zero rows.
    pub dense: ModelParams,
}

impl SparseGradients {
    /// `target += scale * self`.
    pub fn add_to(&self, target: &mut Gradients, scale: f64) {
        for (&w, row) in &self.embedding_rows {
            for (t, g) in target.embedding.row_mut(w).iter_mut().zip(row) {
                *t += scale * g;
            }
        }
        let mut dense = self.dense.arrays().into_iter().skip(1);
        for dst in target.arrays_mut().into_iter().skip(1) {
            let (_, src) = dense.next().expect("same layout");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn to_dense(&self, vocab_size: usize) -> Gradients {
        let mut out = self.dense.zeros_like();
        out.embedding = Matrix::zeros(vocab_size, self.dense.embedding.cols);
        self.add_to(&mut out, 1.0);
        out
    }
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Back through `h = tanh(pre)`: returns ∂L/∂pre.
fn tanh_backward(h: &[f64], grad: &[f64]) -> Vec<f64> {
    h.iter().zip(grad).map(|(h, g)| g * (1.0 - h * h)).collect()
}

/// Loss and exact gradient for the pass recorded in `state`.
///
/// Dropout masks in `state` are treated as constants. `params` is not
/// modified.
pub fn backward_sparse(
    state: &EmbeddingState,
    params: &ModelParams,
    hp: &HyperParams,
    label: usize,
    cfg: &LossConfig,
) -> Result<(f64, SparseGradients)> {
    let steps = state.iterations.len();
    if steps != hp.unroll
        || params.dim() != hp.dim
        || params.z_layers.len() != hp.depth_z
        || params.theta_layers.len() != hp.depth_theta
        || state.iterations.iter().any(|it| it.mu_z.len() != state.word_ids.len())
    {
        return Err(Error::ShapeMismatch("state does not match parameters".into()));
    }
    let d = hp.dim;
    let masks: Option<&DropoutMasks> = state.masks.as_ref();

    let mut dense = ModelParams::zeros(hp, 0);
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    let head_in = state.head_input();
    let logits = classify(&head_in, params);
    let (value, dlogits) = loss_and_grad(&logits, label, cfg)?;
    dense.head.add_outer(&dlogits, &head_in);
    dense.head_bias.iter_mut().zip(&dlogits).for_each(|(b, g)| *b += g);
    let mut d_head_in = vec![0.0; d];
    params.head.tmul_vec_acc(&dlogits, &mut d_head_in);

    // ∂L/∂(normalized μ_θ) at the current step.
    let mut d_mu_theta = match masks {
        Some(m) => mul(&d_head_in, &m.theta[steps - 1]),
        None => d_head_in,
    };

    let inputs: Vec<Vec<f64>> = state
        .word_ids
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let row = params.embedding.row(w);
            match masks {
                Some(m) => mul(row, &m.word[i]),
                None => row.to_vec(),
            }
        })
        .collect();

    for t in (0..steps).rev() {
        let it = &state.iterations[t];
        let mut grad = normalize_backward(&it.mu_theta, it.theta_norm, &d_mu_theta);
        for l in (0..hp.depth_theta).rev() {
            let dpre = tanh_backward(&it.theta_hidden[l], &grad);
            let input = if l == 0 { &it.z_sum } else { &it.theta_hidden[l - 1] };
            dense.theta_layers[l].add_outer(&dpre, input);
            grad = vec![0.0; d];
            params.theta_layers[l].tmul_vec_acc(&dpre, &mut grad);
        }
        let d_z_sum = grad;

        let feedback = if t > 0 { state.theta_feedback(t - 1) } else { vec![0.0; d] };
        let mut d_feedback = vec![0.0; d];
        for (i, &w) in state.word_ids.iter().enumerate() {
            let d_mu_z = match masks {
                Some(m) => mul(&d_z_sum, &m.z[t][i]),
                None => d_z_sum.clone(),
            };
            let mut grad = normalize_backward(&it.mu_z[i], it.z_norm[i], &d_mu_z);
            for l in (1..hp.depth_z).rev() {
                let dpre = tanh_backward(&it.z_hidden[i][l], &grad);
                dense.z_layers[l].add_outer(&dpre, &it.z_hidden[i][l - 1]);
                grad = vec![0.0; d];
                params.z_layers[l].tmul_vec_acc(&dpre, &mut grad);
            }
            let dpre = tanh_backward(&it.z_hidden[i][0], &grad);
            dense.z_layers[0].add_outer(&dpre, &inputs[i]);
            dense.feedback.add_outer(&dpre, &feedback);
            params.feedback.tmul_vec_acc(&dpre, &mut d_feedback);
            let mut d_input = vec![0.0; d];
            params.z_layers[0].tmul_vec_acc(&dpre, &mut d_input);
            if let Some(m) = masks {
                d_input = mul(&d_input, &m.word[i]);
            }
            let row = rows.entry(w).or_insert_with(|| vec![0.0; d]);
            row.iter_mut().zip(&d_input).for_each(|(r, g)| *r += g);
        }

        if t > 0 {
            d_mu_theta = match masks {
                Some(m) => mul(&d_feedback, &m.theta[t - 1]),
                None => d_feedback,
            };
        }
    }

    Ok((
        value,
        SparseGradients {
            embedding_rows: rows,
            dense,
        },
    ))
}

/// [`backward_sparse`] with the embedding gradient expanded to a full table.
pub fn backward(
    state: &EmbeddingState,
    params: &ModelParams,
    hp: &HyperParams,
    label: usize,
    cfg: &LossConfig,
) -> Result<(f64, Gradients)> {
    let (value, sparse) = backward_sparse(state, params, hp, label, cfg)?;
    Ok((value, sparse.to_dense(params.vocab_size())))
}

/// Loss of one document for fixed masks (`None` = eval mode).
pub fn document_loss(
    doc: &Document,
    params: &ModelParams,
    hp: &HyperParams,
    masks: Option<DropoutMasks>,
    cfg: &LossConfig,
) -> Result<f64> {
    let state = forward_with_masks(doc, params, hp, masks)?;
    loss(&classify(&state.head_input(), params), doc.label, cfg)
}

/// Arithmetic used for the finite-difference side of [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdPrecision {
    /// The model's own `f64` forward pass.
    F64,
    /// An independent double-double re-evaluation of the loss.
    DoubleDouble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter array; arrays this small or smaller
    /// are checked exhaustively.
    pub coords_per_array: usize,
    pub seed: u64,
    pub precision: FdPrecision,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_array: 200,
            seed: 0,
            precision: FdPrecision::F64,
        }
    }
}

impl GradCheckOptions {
    /// Double-double differences with ε = 1e-7. The `f64` differences at
    /// ε = 1e-5 carry errors near 1e-5 relative on some instances (round-off
    /// on small gradients, truncation near small-norm normalizations).
    pub fn extended() -> Self {
        GradCheckOptions {
            eps: 1e-7,
            precision: FdPrecision::DoubleDouble,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Array name and flat index of the worst coordinate.
    pub worst_array: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Central difference of the loss in coordinate `index` of array `array`
/// (numbered as in [`ModelParams::arrays`]), evaluated in double-double
/// arithmetic. With `extrapolate`, steps ε and ε/2 are combined by
/// Richardson extrapolation.
#[allow(clippy::too_many_arguments)]
pub fn reference_difference(
    doc: &Document,
    params: &ModelParams,
    hp: &HyperParams,
    masks: Option<&DropoutMasks>,
    cfg: &LossConfig,
    array: usize,
    index: usize,
    eps: f64,
    extrapolate: bool,
) -> f64 {
    let central = |h: f64| {
        let at = |s: f64| {
            let p = reference::DdParams::new(params, Some((array, index, dd::Dd::from(s))));
            reference::loss(doc, &p, hp, masks, cfg)
        };
        (at(h) - at(-h)) / dd::Dd::from(2.0 * h)
    };
    if extrapolate {
        let a = central(eps);
        let b = central(eps / 2.0);
        ((b.scale(4.0) - a) / dd::Dd::from(3.0)).to_f64()
    } else {
        central(eps).to_f64()
    }
}

/// |a − b| / max(1e-8, |a| + |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares [`backward`] with central differences on sampled coordinates.
/// The same masks are reused for every perturbed evaluation.
pub fn grad_check(
    params: &ModelParams,
    hp: &HyperParams,
    doc: &Document,
    cfg: &LossConfig,
    masks: Option<DropoutMasks>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let state = forward_with_masks(doc, params, hp, masks.clone())?;
    let (_, grads) = backward(&state, params, hp, doc.label, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_array: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let analytic: Vec<(String, Vec<f64>)> =
        grads.arrays().into_iter().map(|(n, a)| (n, a.to_vec())).collect();
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let len = grad.len();
        let coords: Vec<usize> = if len <= opts.coords_per_array {
            (0..len).collect()
        } else {
            let mut c = index::sample(&mut rng, len, opts.coords_per_array).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let numeric = match opts.precision {
                FdPrecision::F64 => {
                    let original = params.arrays()[k].1[j];
                    probe.arrays_mut()[k][j] = original + opts.eps;
                    let up = document_loss(doc, &probe, hp, masks.clone(), cfg)?;
                    probe.arrays_mut()[k][j] = original - opts.eps;
                    let down = document_loss(doc, &probe, hp, masks.clone(), cfg)?;
                    probe.arrays_mut()[k][j] = original;
                    (up - down) / (2.0 * opts.eps)
                }
                FdPrecision::DoubleDouble => {
                    reference_difference(doc, params, hp, masks.as_ref(), cfg, k, j, opts.eps, false)
                }
            };
            let err = relative_error(grad[j], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_array.is_empty() {
                report.max_rel_error = err;
                report.worst_array = name.clone();
                report.worst_index = j;
                report.analytic = grad[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
