//! Generative LDA sampler for labeled synthetic corpora with known latent
//! structure.
//!
//! Per document: θ ~ Dirichlet(α); per word: z ~ Categorical(θ),
//! w ~ Categorical(β_z). The label is a fixed function of θ.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, LabelTable, Vocabulary};
use crate::error::{Error, Result};
use crate::fmt::f64_17;

/// Dirichlet prior and topic-word distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdaTrueModel {
    pub alpha: Vec<f64>,
    /// K rows of length V, each summing to one.
    pub beta: Vec<Vec<f64>>,
}

impl LdaTrueModel {
    /// Normalizes each β row to sum to one and validates the result.
    pub fn new(alpha: Vec<f64>, mut beta: Vec<Vec<f64>>) -> Result<Self> {
        for (k, row) in beta.iter_mut().enumerate() {
            if row.iter().any(|&b| !b.is_finite() || b < 0.0) {
                return Err(Error::InvalidModel(format!("beta row {k} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(Error::InvalidModel(format!("beta row {k} is all zero")));
            }
            row.iter_mut().for_each(|b| *b /= s);
        }
        let model = LdaTrueModel { alpha, beta };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.alpha.len();
        if k == 0 {
            return Err(Error::InvalidModel("alpha is empty".into()));
        }
        if self.alpha.iter().any(|&a| !a.is_finite() || a <= 0.0) {
            return Err(Error::InvalidModel("alpha entries must be positive and finite".into()));
        }
        if self.beta.len() != k {
            return Err(Error::InvalidModel(format!("beta has {} rows, alpha has {k}", self.beta.len())));
        }
        let v = self.beta[0].len();
        if v == 0 {
            return Err(Error::InvalidModel("vocabulary is empty".into()));
        }
        for (t, row) in self.beta.iter().enumerate() {
            if row.len() != v {
                return Err(Error::InvalidModel(format!("beta row {t} has length {}, expected {v}", row.len())));
            }
            if row.iter().any(|&b| !b.is_finite() || b < 0.0) {
                return Err(Error::InvalidModel(format!("beta row {t} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::InvalidModel(format!("beta row {t} is all zero")));
            }
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidModel(format!("beta row {t} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn topics(&self) -> usize {
        self.alpha.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.beta[0].len()
    }

    /// E[θ]ᵀβ, the expected unigram distribution.
    pub fn expected_unigram(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        let mut p = vec![0.0; self.vocab_size()];
        for (a, row) in self.alpha.iter().zip(&self.beta) {
            for (pv, b) in p.iter_mut().zip(row) {
                *pv += a / total * b;
            }
        }
        p
    }
}

/// Maps a topic mixture θ to a class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    /// Label = index of the prototype with the largest inner product with θ
    /// (lowest index on ties).
    Prototypes(Vec<Vec<f64>>),
    /// Binary: label 1 iff θ·v > 0.
    Direction(Vec<f64>),
}

impl Labeler {
    pub fn classes(&self) -> usize {
        match self {
            Labeler::Prototypes(p) => p.len(),
            Labeler::Direction(_) => 2,
        }
    }

    pub fn label(&self, theta: &[f64]) -> usize {
        let dot = |v: &[f64]| theta.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        match self {
            Labeler::Prototypes(protos) => {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (i, p) in protos.iter().enumerate() {
                    let s = dot(p);
                    if s > best_score {
                        best = i;
                        best_score = s;
                    }
                }
                best
            }
            Labeler::Direction(v) => usize::from(dot(v) > 0.0),
        }
    }

    fn validate(&self, topics: usize) -> Result<()> {
        let ok = match self {
            Labeler::Prototypes(p) => !p.is_empty() && p.iter().all(|v| v.len() == topics),
            Labeler::Direction(v) => v.len() == topics,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!("labeler does not match {topics} topics")))
        }
    }
}

/// Model plus labeling rule: the JSON document `coopnet synth` reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub model: LdaTrueModel,
    pub labeler: Labeler,
}

impl SynthSpec {
    /// The default two-class benchmark.
    ///
    /// K = 4 topics over V = 100 words. Topic k puts 80% of its mass uniformly
    /// on its own block of 25 words and spreads the rest over the whole
    /// vocabulary. α = 0.5 everywhere. Class 0 is dominated by topics {0, 1},
    /// class 1 by topics {2, 3}.
    pub fn default_binary() -> Self {
        const K: usize = 4;
        const V: usize = 100;
        const FOCUS: f64 = 0.8;
        let block = V / K;
        let beta = (0..K)
            .map(|k| {
                (0..V)
                    .map(|v| {
                        let own = if v / block == k { FOCUS / block as f64 } else { 0.0 };
                        own + (1.0 - FOCUS) / V as f64
                    })
                    .collect()
            })
            .collect();
        SynthSpec {
            model: LdaTrueModel::new(vec![0.5; K], beta).expect("default model is valid"),
            labeler: Labeler::Prototypes(vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.labeler.validate(self.model.topics())
    }
}

/// Latent draws for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub theta: Vec<f64>,
    pub z: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub latent: Vec<LatentRecord>,
}

/// Per-document RNG stream: documents can be sampled in any order or in
/// parallel and still produce the same corpus.
fn doc_rng(seed: u64, doc: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(doc as u64);
    rng
}

/// θ ~ Dirichlet(α) via normalized Gamma draws.
pub fn sample_dirichlet<R: rand::Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("alpha validated positive").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        // All-zero happens only through underflow with tiny α.
        if total > 0.0 {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Samples `docs` documents of `words` words each.
pub fn sample_corpus(spec: &SynthSpec, docs: usize, words: usize, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    if words == 0 {
        return Err(Error::InvalidModel("documents need at least one word".into()));
    }
    let model = &spec.model;
    let word_dists: Vec<WeightedIndex<f64>> = model
        .beta
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::InvalidModel(e.to_string())))
        .collect::<Result<_>>()?;

    let sampled: Vec<(Document, LatentRecord)> = (0..docs)
        .into_par_iter()
        .map(|m| {
            let mut rng = doc_rng(seed, m);
            let theta = sample_dirichlet(&model.alpha, &mut rng);
            // θ entries can underflow to exactly zero for small α; WeightedIndex
            // only needs one positive weight.
            let topic_dist = WeightedIndex::new(&theta).expect("theta has positive mass");
            let mut z = Vec::with_capacity(words);
            let mut word_ids = Vec::with_capacity(words);
            for _ in 0..words {
                let k = topic_dist.sample(&mut rng);
                z.push(k);
                word_ids.push(word_dists[k].sample(&mut rng));
            }
            let label = spec.labeler.label(&theta);
            (Document { word_ids, label }, LatentRecord { theta, z })
        })
        .collect();

    let (documents, latent): (Vec<_>, Vec<_>) = sampled.into_iter().unzip();
    let vocab = Vocabulary::from_tokens((0..model.vocab_size()).map(|v| format!("w{v}")).collect())?;
    Ok(SynthOutput {
        corpus: Corpus {
            vocab,
            labels: LabelTable::numbered(spec.labeler.classes()),
            docs: documents,
        },
        latent,
    })
}

/// Writes the latent sidecar: a `coopnet-latent 1 <K> <M>` header, then one
/// line per document, `θ_0 … θ_{K-1}<TAB>z_0 … z_{N-1}`.
pub fn write_latent(latent: &[LatentRecord], topics: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("coopnet-latent 1 {topics} {}\n", latent.len());
    for rec in latent {
        let theta: Vec<String> = rec.theta.iter().map(|&t| f64_17(t)).collect();
        let z: Vec<String> = rec.z.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}\t{}", theta.join(" "), z.join(" "));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<Vec<LatentRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(' ').collect();
    if header.len() != 4 || header[0] != "coopnet-latent" || header[1] != "1" {
        return Err(err(1, "expected `coopnet-latent 1 <K> <M>`"));
    }
    let k: usize = header[2].parse().map_err(|_| err(1, "bad topic count"))?;
    let m: usize = header[3].parse().map_err(|_| err(1, "bad document count"))?;
    let mut out = Vec::with_capacity(m);
    for (i, line) in lines.enumerate().take(m) {
        let (theta, z) = line.split_once('\t').ok_or_else(|| err(i + 2, "missing tab"))?;
        let theta: Vec<f64> = theta
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(i + 2, "bad theta"))?;
        let z: Vec<usize> = z
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(i + 2, "bad topic index"))?;
        if theta.len() != k || z.iter().any(|&t| t >= k) {
            return Err(err(i + 2, "record does not match topic count"));
        }
        out.push(LatentRecord { theta, z });
    }
    if out.len() != m {
        return Err(err(out.len() + 2, "missing records"));
    }
    Ok(out)
}
