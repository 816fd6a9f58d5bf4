//! Classification metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::diff::{loss, LossConfig};
use crate::error::{Error, Result};
use crate::model::{argmax, classify, embed, probabilities, HyperParams, ModelParams};

fn counts(labels: &[bool]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    Ok((pos as u64, neg as u64))
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve: the fraction of (positive, negative) pairs in
/// which the positive scores higher, ties counting one half. O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (pos, neg) = counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut concordant = 0u64;
    let mut tied = 0u64;
    let mut neg_below = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group_pos = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        let group_neg = (end - start) as u64 - group_pos;
        concordant += group_pos * neg_below;
        tied += group_pos * group_neg;
        neg_below += group_neg;
        start = end;
    }
    Ok(ratio(concordant, tied, pos, neg))
}

/// All-pairs reference for [`auc`]. O(n²).
pub fn auc_brute_force(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (pos, neg) = counts(labels)?;
    let mut concordant = 0u64;
    let mut tied = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            if si > sj {
                concordant += 1;
            } else if si == sj {
                tied += 1;
            }
        }
    }
    Ok(ratio(concordant, tied, pos, neg))
}

fn ratio(concordant: u64, tied: u64, pos: u64, neg: u64) -> f64 {
    (2 * concordant + tied) as f64 / (2 * pos * neg) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub documents: usize,
    pub accuracy: f64,
    /// Binary problems with both classes present only.
    pub auc: Option<f64>,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode prediction for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub embedding: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub loss: f64,
}

pub fn predict(doc: &Document, params: &ModelParams, hp: &HyperParams, cfg: &LossConfig) -> Result<Prediction> {
    let embedding = embed(doc, params, hp)?;
    let logits = classify(&embedding, params);
    let probabilities = probabilities(&logits);
    Ok(Prediction {
        predicted: argmax(&probabilities),
        loss: loss(&logits, doc.label, cfg)?,
        probabilities,
        embedding,
    })
}

pub fn predict_all(
    docs: &[Document],
    params: &ModelParams,
    hp: &HyperParams,
    cfg: &LossConfig,
) -> Result<Vec<Prediction>> {
    docs.par_iter().map(|d| predict(d, params, hp, cfg)).collect()
}

/// Accuracy (argmax, lowest class on ties), AUC of the positive-class
/// probability, confusion matrix and mean loss, all with dropout off.
pub fn evaluate(docs: &[Document], params: &ModelParams, hp: &HyperParams, cfg: &LossConfig) -> Result<Metrics> {
    let preds = predict_all(docs, params, hp, cfg)?;
    metrics_from(docs, &preds, hp.classes)
}

pub fn metrics_from(docs: &[Document], preds: &[Prediction], classes: usize) -> Result<Metrics> {
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for (d, p) in docs.iter().zip(preds) {
        confusion[d.label][p.predicted] += 1;
        correct += usize::from(d.label == p.predicted);
        total_loss += p.loss;
    }
    let n = docs.len().max(1) as f64;
    let auc = if classes == 2 {
        let scores: Vec<f64> = preds.iter().map(|p| p.probabilities[1]).collect();
        let labels: Vec<bool> = docs.iter().map(|d| d.label == 1).collect();
        match auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::SingleClass { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(Metrics {
        documents: docs.len(),
        accuracy: correct as f64 / n,
        auc,
        mean_loss: total_loss / n,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.2, 0.8, 0.3], &[true, false, false, true]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass { .. })));
        assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn evaluate_zero_model() {
        let hp = HyperParams::default();
        let p = ModelParams::zeros(&hp, 3);
        let docs: Vec<Document> = (0..6)
            .map(|i| Document {
                word_ids: vec![i % 3],
                label: i % 2,
            })
            .collect();
        let m = evaluate(&docs, &p, &hp, &LossConfig::for_classes(2)).unwrap();
        assert_eq!(m.auc, Some(0.5));
        // Uniform probabilities tie; the lowest class wins.
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.confusion, vec![vec![3, 0], vec![3, 0]]);
        assert_eq!(m, evaluate(&docs, &p, &hp, &LossConfig::for_classes(2)).unwrap());
    }

    proptest! {
        #[test]
        fn sorted_auc_equals_brute_force(
            pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 4.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
            match (auc(&scores, &labels), auc_brute_force(&scores, &labels)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }
    }
}
