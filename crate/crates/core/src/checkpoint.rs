//! Binary model checkpoints.
//!
//! Layout: the 8 bytes `COOPNET\0`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a UTF-8 JSON header of that length, and
//! then every parameter array as little-endian `f64` in the order listed in
//! the header. Loading restores every value bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelTable, PipelineConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{HyperParams, ModelParams};

const MAGIC: &[u8; 8] = b"COOPNET\0";
const VERSION: u32 = 1;

/// A trained model with everything needed to apply it to new text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyper: HyperParams,
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub labels: LabelTable,
    /// Tokenizer settings the vocabulary was built with, if known.
    pub pipeline: Option<PipelineConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocab_size: usize,
    hyper: HyperParams,
    label_table_hash: String,
    labels: Vec<String>,
    vocab: Vec<String>,
    pipeline: Option<PipelineConfig>,
    arrays: Vec<ArrayShape>,
}

fn shapes(p: &ModelParams) -> Vec<ArrayShape> {
    let mut mats: Vec<&Matrix> = vec![&p.embedding];
    mats.extend(&p.z_layers);
    mats.push(&p.feedback);
    mats.extend(&p.theta_layers);
    mats.push(&p.head);
    let mut out: Vec<ArrayShape> = p
        .arrays()
        .into_iter()
        .zip(mats)
        .map(|((name, _), m)| ArrayShape {
            name,
            rows: m.rows,
            cols: m.cols,
        })
        .collect();
    out.push(ArrayShape {
        name: "head_bias".into(),
        rows: p.head_bias.len(),
        cols: 1,
    });
    out
}

impl Checkpoint {
    pub fn new(
        hyper: HyperParams,
        params: ModelParams,
        vocab: Vocabulary,
        labels: LabelTable,
        pipeline: Option<PipelineConfig>,
    ) -> Result<Self> {
        let ck = Checkpoint {
            hyper,
            params,
            vocab,
            labels,
            pipeline,
        };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.params.check_shapes(&self.hyper, self.vocab.len())?;
        if self.labels.len() != self.hyper.classes {
            return Err(Error::InvalidModel(format!(
                "{} label names for {} classes",
                self.labels.len(),
                self.hyper.classes
            )));
        }
        if !self.params.is_finite() {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            vocab_size: self.vocab.len(),
            hyper: self.hyper.clone(),
            label_table_hash: self.labels.digest(),
            labels: self.labels.names().to_vec(),
            vocab: self.vocab.tokens().to_vec(),
            pipeline: self.pipeline.clone(),
            arrays: shapes(&self.params),
        };
        let json = serde_json::to_vec(&header).expect("header is serializable");
        let values = self.params.num_parameters();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in self.params.arrays() {
            for x in a {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing COOPNET magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.vocab.len() != header.vocab_size {
            return Err(bad("vocabulary length disagrees with vocab_size"));
        }
        let labels = LabelTable::new(header.labels)?;
        if labels.digest() != header.label_table_hash {
            return Err(bad("label table hash mismatch"));
        }
        let vocab = Vocabulary::from_tokens(header.vocab)?;

        let mut params = ModelParams::zeros(&header.hyper, header.vocab_size);
        let expected = shapes(&params);
        if expected.len() != header.arrays.len()
            || expected
                .iter()
                .zip(&header.arrays)
                .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
        {
            return Err(bad("array shapes do not match hyper-parameters"));
        }
        let payload = &bytes[16 + len..];
        if payload.len() != 8 * params.num_parameters() {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                8 * params.num_parameters()
            )));
        }
        let mut chunks = payload.chunks_exact(8);
        for a in params.arrays_mut() {
            for x in a.iter_mut() {
                *x = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
            }
        }
        Checkpoint::new(header.hyper, params, vocab, labels, header.pipeline)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
