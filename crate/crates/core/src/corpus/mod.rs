//! Text ingestion: tokenization, vocabulary construction, encoding and
//! cross-validation splits.

pub(crate) mod format;
mod load;
pub mod porter;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_corpus, write_corpus};
pub use load::{load_csv, load_newsgroups, RawCorpus, RawDocument, SkippedRow};

/// Frozen copy of the NLTK English stopword list (179 entries).
pub const ENGLISH_STOPWORDS: &str = include_str!("stopwords_en.txt");

/// ASCII punctuation, the same set as Python's `string.punctuation`.
pub const DEFAULT_PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stopwords {
    English,
    None,
    Custom(Vec<String>),
}

/// Tokenizer and vocabulary options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lowercase: bool,
    /// Characters deleted before splitting on whitespace.
    pub punctuation: String,
    pub stopwords: Stopwords,
    pub stem: bool,
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_count: usize,
    /// Encoded documents are truncated to this many tokens.
    pub max_doc_len: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lowercase: true,
            punctuation: DEFAULT_PUNCTUATION.to_string(),
            stopwords: Stopwords::English,
            stem: true,
            min_count: 1,
            max_doc_len: None,
        }
    }
}

/// A [`PipelineConfig`] with its lookup sets built.
#[derive(Clone, Debug)]
pub struct Pipeline {
    lowercase: bool,
    stem: bool,
    punctuation: HashSet<char>,
    stopwords: HashSet<String>,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let mut pipeline = Pipeline {
            lowercase: cfg.lowercase,
            stem: cfg.stem,
            punctuation: cfg.punctuation.chars().collect(),
            stopwords: HashSet::new(),
        };
        let words: Vec<&str> = match &cfg.stopwords {
            Stopwords::English => ENGLISH_STOPWORDS.lines().collect(),
            Stopwords::None => Vec::new(),
            Stopwords::Custom(list) => list.iter().map(String::as_str).collect(),
        };
        // Stopwords pass through the same normalization as text, so "don't"
        // also removes "dont".
        let normalized: HashSet<String> = words
            .iter()
            .map(|w| pipeline.normalize(w))
            .filter(|w| !w.is_empty())
            .collect();
        pipeline.stopwords = normalized;
        pipeline
    }

    fn normalize(&self, text: &str) -> String {
        let cased = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        cased
            .chars()
            .filter(|c| !self.punctuation.contains(c))
            .collect()
    }

    /// lowercase → strip punctuation → split on whitespace → drop stopwords → stem.
    pub fn tokenize(&self, raw: &str) -> Vec<String> {
        self.normalize(raw)
            .split_whitespace()
            .filter(|t| !self.stopwords.contains(*t))
            .map(|t| if self.stem { porter::stem(t) } else { t.to_string() })
            .filter(|t| !t.is_empty())
            .collect()
    }
}

/// Convenience wrapper building a [`Pipeline`] for one call.
pub fn tokenize(raw: &str, cfg: &PipelineConfig) -> Vec<String> {
    Pipeline::new(cfg).tokenize(raw)
}

/// Bijection between tokens and ids `0..V`.
///
/// Ids are assigned by descending corpus count, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an already ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidModel(format!("invalid vocabulary token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn build_vocabulary(docs: &[Vec<String>], min_count: usize) -> Result<Vocabulary> {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in docs.iter().flatten() {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary { min_count });
    }
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// An encoded document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub word_ids: Vec<usize>,
    pub label: usize,
}

impl Document {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

/// Maps tokens to ids, dropping out-of-vocabulary tokens.
pub fn encode(tokens: &[String], label: usize, vocab: &Vocabulary) -> Result<Document> {
    let word_ids: Vec<usize> = tokens.iter().filter_map(|t| vocab.id_of(t)).collect();
    if word_ids.is_empty() {
        return Err(Error::EmptyAfterEncoding);
    }
    Ok(Document { word_ids, label })
}

/// Class names indexed by integer label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    names: Vec<String>,
}

impl LabelTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains(['\t', '\n', '\r']) {
                return Err(Error::InvalidModel(format!("invalid label name {n:?}")));
            }
            if !seen.insert(n) {
                return Err(Error::InvalidModel(format!("duplicate label name {n:?}")));
            }
        }
        Ok(LabelTable { names })
    }

    /// `class0`, `class1`, ...
    pub fn numbered(classes: usize) -> Self {
        LabelTable {
            names: (0..classes).map(|c| format!("class{c}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    pub fn label_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Hex SHA-256 of the newline-joined names; stored in checkpoints.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An encoded, labeled corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub labels: LabelTable,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn mean_doc_len(&self) -> f64 {
        if self.docs.is_empty() {
            return 0.0;
        }
        self.docs.iter().map(Document::len).sum::<usize>() as f64 / self.docs.len() as f64
    }

    /// Documents at `indices`, in that order, sharing vocabulary and labels.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
            docs: indices.iter().map(|&i| self.docs[i].clone()).collect(),
        }
    }

    /// Re-encodes against a different vocabulary, e.g. a test split against
    /// the training vocabulary. Returns the corpus and how many documents
    /// became empty and were dropped.
    pub fn reencode(&self, vocab: &Vocabulary) -> (Corpus, usize) {
        let mut dropped = 0;
        let docs = self
            .docs
            .iter()
            .filter_map(|d| {
                let tokens: Vec<String> = d
                    .word_ids
                    .iter()
                    .map(|&id| self.vocab.tokens[id].clone())
                    .collect();
                match encode(&tokens, d.label, vocab) {
                    Ok(doc) => Some(doc),
                    Err(_) => {
                        dropped += 1;
                        None
                    }
                }
            })
            .collect();
        (
            Corpus {
                vocab: vocab.clone(),
                labels: self.labels.clone(),
                docs,
            },
            dropped,
        )
    }
}

/// Result of running the text pipeline over a raw corpus.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub corpus: Corpus,
    /// Documents with no in-vocabulary tokens after encoding.
    pub dropped_empty: usize,
}

/// Tokenizes (in parallel), builds the vocabulary and encodes every document.
pub fn preprocess(raw: &RawCorpus, cfg: &PipelineConfig) -> Result<Preprocessed> {
    let pipeline = Pipeline::new(cfg);
    let tokenized: Vec<Vec<String>> = raw.docs.par_iter().map(|d| pipeline.tokenize(&d.text)).collect();
    let vocab = build_vocabulary(&tokenized, cfg.min_count)?;
    let mut docs = Vec::with_capacity(tokenized.len());
    let mut dropped_empty = 0;
    for (tokens, rd) in tokenized.iter().zip(&raw.docs) {
        match encode(tokens, rd.label, &vocab) {
            Ok(mut doc) => {
                if let Some(cap) = cfg.max_doc_len {
                    doc.word_ids.truncate(cap.max(1));
                }
                docs.push(doc);
            }
            Err(Error::EmptyAfterEncoding) => dropped_empty += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(Preprocessed {
        corpus: Corpus {
            vocab,
            labels: raw.labels.clone(),
            docs,
        },
        dropped_empty,
    })
}

/// Fold id per document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// (train indices, held-out indices) for `fold`.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold_of.len()).partition(|&i| self.fold_of[i] != fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment.
///
/// Each class's documents are shuffled and dealt round-robin, with the
/// dealing position carried across classes. Fold sizes therefore differ by at
/// most one, and so do each class's per-fold counts.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    let m = labels.len();
    if k < 2 || k > m {
        return Err(Error::InvalidFoldCount { k, docs: m });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; m];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn tokenize_empty_and_stopwords() {
        let cfg = PipelineConfig::default();
        assert!(tokenize("", &cfg).is_empty());
        assert!(tokenize("The the THE", &cfg).is_empty());
    }

    #[test]
    fn tokenize_golden() {
        let cfg = PipelineConfig::default();
        assert_eq!(tokenize("Dogs running, dogs ran!", &cfg), toks(&["dog", "run", "dog", "ran"]));
        assert_eq!(
            tokenize("Generalizations about oscillators don't hold.", &cfg),
            toks(&["gener", "oscil", "hold"])
        );
        let no_stem = PipelineConfig {
            stem: false,
            ..PipelineConfig::default()
        };
        assert_eq!(
            tokenize("E-mail: Hello, World!", &no_stem),
            toks(&["email", "hello", "world"])
        );
    }

    #[test]
    fn stopword_list_is_frozen() {
        assert_eq!(ENGLISH_STOPWORDS.lines().count(), 179);
    }

    #[test]
    fn vocabulary_min_count_and_ties() {
        let v = build_vocabulary(&[toks(&["a", "a", "b"])], 2).unwrap();
        assert_eq!(v.tokens(), &["a".to_string()]);

        let v = build_vocabulary(&[toks(&["b", "a", "b", "a", "c", "a", "b"])], 1).unwrap();
        assert_eq!(v.id_of("a"), Some(0));
        assert_eq!(v.id_of("b"), Some(1));
        assert_eq!(v.id_of("c"), Some(2));
        assert_eq!(v.token_of(1), Some("b"));

        assert!(matches!(
            build_vocabulary(&[toks(&["a"])], 2),
            Err(Error::EmptyVocabulary { .. })
        ));
    }

    #[test]
    fn encode_drops_oov() {
        let v = Vocabulary::from_tokens(toks(&["a"])).unwrap();
        let d = encode(&toks(&["a", "zz", "a"]), 1, &v).unwrap();
        assert_eq!(d.word_ids, vec![0, 0]);
        assert_eq!(d.label, 1);
        assert!(matches!(encode(&toks(&["zz"]), 0, &v), Err(Error::EmptyAfterEncoding)));
    }

    #[test]
    fn kfold_sizes_and_determinism() {
        let labels = vec![0; 10];
        let f = kfold(&labels, 5, 7).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        assert_eq!(f, kfold(&labels, 5, 7).unwrap());
        assert!(matches!(kfold(&labels, 11, 0), Err(Error::InvalidFoldCount { .. })));
        assert!(matches!(kfold(&labels, 1, 0), Err(Error::InvalidFoldCount { .. })));
    }

    #[test]
    fn kfold_spreads_minority_class() {
        // 8:2 over 10 docs and k = 5: two majority docs per fold except where
        // a minority doc takes the slot, minority docs in distinct folds.
        let labels = [0, 0, 0, 1, 0, 0, 0, 0, 1, 0];
        for seed in 0..20 {
            let f = kfold(&labels, 5, seed).unwrap();
            assert_eq!(f.fold_sizes(), vec![2; 5]);
            let minority_folds: HashSet<usize> =
                [3, 8].iter().map(|&i| f.fold_of[i]).collect();
            assert_eq!(minority_folds.len(), 2);
        }
    }

    proptest! {
        #[test]
        fn tokenize_idempotent_without_stemming(text in "[ -~]{0,80}") {
            let cfg = PipelineConfig { stem: false, ..PipelineConfig::default() };
            let once = tokenize(&text, &cfg);
            let twice = tokenize(&once.join(" "), &cfg);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn encode_with_full_vocabulary_is_lossless(
            docs in prop::collection::vec(prop::collection::vec("[a-e]{1,3}", 1..8), 1..6)
        ) {
            let vocab = build_vocabulary(&docs, 1).unwrap();
            for d in &docs {
                let enc = encode(d, 0, &vocab).unwrap();
                prop_assert_eq!(enc.len(), d.len());
                let back: Vec<&str> = enc.word_ids.iter().map(|&i| vocab.token_of(i).unwrap()).collect();
                prop_assert_eq!(back, d.iter().map(String::as_str).collect::<Vec<_>>());
            }
        }

        #[test]
        fn kfold_is_a_partition(labels in prop::collection::vec(0usize..4, 2..60), k in 2usize..6, seed in any::<u64>()) {
            prop_assume!(k <= labels.len());
            let f = kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(f.fold_of.len(), labels.len());
            let sizes = f.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut seen = vec![0; labels.len()];
            for fold in 0..k {
                for i in f.split(fold).1 {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            for class in 0..4 {
                let mut per = vec![0i64; k];
                for (i, &y) in labels.iter().enumerate() {
                    if y == class { per[f.fold_of[i]] += 1; }
                }
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }
}
