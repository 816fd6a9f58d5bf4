//! The document loss re-evaluated in double-double arithmetic, written
//! independently of the `f64` forward pass. Finite differences of this
//! function serve as the gradient oracle.

use super::dd::Dd;
use super::{LossConfig, LossKind};
use crate::corpus::Document;
use crate::model::{DropoutMasks, HyperParams, ModelParams, EPS_NORM};

struct DdMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl DdMatrix {
    fn apply(&self, x: &[Dd]) -> Vec<Dd> {
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).fold(Dd::ZERO, |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }
}

/// Parameters lifted to double-double, one coordinate optionally shifted
/// by an exact double-double offset. Array order follows
/// [`ModelParams::arrays`].
pub(crate) struct DdParams {
    embedding: DdMatrix,
    z_layers: Vec<DdMatrix>,
    feedback: DdMatrix,
    theta_layers: Vec<DdMatrix>,
    head: DdMatrix,
    head_bias: Vec<Dd>,
}

impl DdParams {
    pub(crate) fn new(params: &ModelParams, shift: Option<(usize, usize, Dd)>) -> Self {
        let mut k = 0;
        let mut lift = |m: &crate::linalg::Matrix| {
            let mut data: Vec<Dd> = m.data.iter().map(|&x| Dd::from(x)).collect();
            if let Some((a, j, delta)) = shift {
                if a == k {
                    data[j] = data[j] + delta;
                }
            }
            k += 1;
            DdMatrix {
                rows: m.rows,
                cols: m.cols,
                data,
            }
        };
        let embedding = lift(&params.embedding);
        let z_layers = params.z_layers.iter().map(&mut lift).collect();
        let feedback = lift(&params.feedback);
        let theta_layers = params.theta_layers.iter().map(&mut lift).collect();
        let head = lift(&params.head);
        let mut head_bias: Vec<Dd> = params.head_bias.iter().map(|&x| Dd::from(x)).collect();
        if let Some((a, j, delta)) = shift {
            if a == k {
                head_bias[j] = head_bias[j] + delta;
            }
        }
        DdParams {
            embedding,
            z_layers,
            feedback,
            theta_layers,
            head,
            head_bias,
        }
    }
}

fn tanh_all(v: Vec<Dd>) -> Vec<Dd> {
    v.into_iter().map(Dd::tanh).collect()
}

fn unit(v: &[Dd]) -> Vec<Dd> {
    let n = v.iter().fold(Dd::ZERO, |acc, &x| acc + x * x).sqrt();
    if n.hi > EPS_NORM {
        v.iter().map(|&x| x / n).collect()
    } else {
        vec![Dd::ZERO; v.len()]
    }
}

fn times(v: &[Dd], m: &[f64]) -> Vec<Dd> {
    v.iter().zip(m).map(|(&a, &b)| a * Dd::from(b)).collect()
}

/// Loss of `doc` under `p`, with the given masks (`None` = eval mode).
/// Shapes are assumed valid.
pub(crate) fn loss(
    doc: &Document,
    p: &DdParams,
    hp: &HyperParams,
    masks: Option<&DropoutMasks>,
    cfg: &LossConfig,
) -> Dd {
    let d = hp.dim;
    let inputs: Vec<Vec<Dd>> = doc
        .word_ids
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let row = p.embedding.data[w * d..(w + 1) * d].to_vec();
            match masks {
                Some(m) => times(&row, &m.word[i]),
                None => row,
            }
        })
        .collect();

    let mut fb = vec![Dd::ZERO; d];
    for t in 0..hp.unroll {
        let mut s = vec![Dd::ZERO; d];
        for (i, x) in inputs.iter().enumerate() {
            let pre: Vec<Dd> = p.z_layers[0]
                .apply(x)
                .into_iter()
                .zip(p.feedback.apply(&fb))
                .map(|(a, b)| a + b)
                .collect();
            let mut h = tanh_all(pre);
            for w in &p.z_layers[1..] {
                h = tanh_all(w.apply(&h));
            }
            let mut mu = unit(&h);
            if let Some(m) = masks {
                mu = times(&mu, &m.z[t][i]);
            }
            for (a, b) in s.iter_mut().zip(mu) {
                *a = *a + b;
            }
        }
        let mut h = s;
        for w in &p.theta_layers {
            h = tanh_all(w.apply(&h));
        }
        let mu = unit(&h);
        fb = match masks {
            Some(m) => times(&mu, &m.theta[t]),
            None => mu,
        };
    }

    let logits: Vec<Dd> = p
        .head
        .apply(&fb)
        .into_iter()
        .zip(&p.head_bias)
        .map(|(a, &b)| a + b)
        .collect();
    let w = Dd::from(cfg.class_weights[doc.label]);
    match cfg.kind {
        LossKind::BinaryCrossEntropy => {
            let x = logits[0];
            let pos = if x.hi > 0.0 { x } else { Dd::ZERO };
            let y = Dd::from(doc.label as f64);
            w * (pos - x * y + (Dd::ONE + (-x.abs()).exp()).ln())
        }
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(logits[0], |a, b| if b.hi > a.hi { b } else { a });
            let sum = logits.iter().fold(Dd::ZERO, |acc, &l| acc + (l - max).exp());
            w * (max + sum.ln() - logits[doc.label])
        }
    }
}
