//! One training run from a [`RunConfig`]: train, pick the checkpoint,
//! evaluate, and write the artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::train::{history_csv, train, HistoryRow};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

/// The metrics JSON written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub batches: usize,
    /// Batch whose parameters were kept.
    pub best_batch: usize,
    pub parameters: usize,
    pub train: Metrics,
    pub validation: Option<Metrics>,
    /// Validation documents dropped because no token survived re-encoding.
    pub validation_dropped: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub report: RunReport,
}

impl RunOutput {
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }

    pub fn metrics_json(&self) -> String {
        crate::fmt::to_json_string(&self.report)
    }

    /// Writes checkpoint, history, metrics and the full configuration into
    /// `dir`, creating it if needed.
    pub fn write(&self, cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write(HISTORY_FILE, self.history_csv())?;
        write(METRICS_FILE, self.metrics_json())?;
        write(CONFIG_FILE, cfg.to_json())
    }
}

/// Trains on `train_corpus`, selecting on `validation` when given (re-encoded
/// against the training vocabulary if needed). The kept parameters are the
/// best validation iterate, or the final ones without validation.
pub fn train_run(train_corpus: &Corpus, validation: Option<&Corpus>, cfg: &RunConfig) -> Result<RunOutput> {
    let tc = cfg.train_config()?;
    if train_corpus.num_classes() != tc.hyper.classes {
        return Err(Error::InvalidConfig(format!(
            "model.classes = {} but the corpus has {} classes",
            tc.hyper.classes,
            train_corpus.num_classes()
        )));
    }
    if train_corpus.docs.is_empty() {
        return Err(Error::InvalidConfig("training corpus has no documents".into()));
    }
    let (validation, validation_dropped) = match validation {
        Some(v) if v.labels != train_corpus.labels => {
            return Err(Error::InvalidConfig("validation and training label tables differ".into()))
        }
        Some(v) if v.vocab == train_corpus.vocab => (Some(v.clone()), 0),
        Some(v) => {
            let (re, dropped) = v.reencode(&train_corpus.vocab);
            (Some(re), dropped)
        }
        None => (None, 0),
    };
    let val_docs = validation.as_ref().map(|v| v.docs.as_slice());

    let outcome = train(&train_corpus.docs, val_docs, train_corpus.vocab.len(), &tc)?;
    let params = outcome.best_params;
    let train_metrics = evaluate(&train_corpus.docs, &params, &tc.hyper, &tc.loss)?;
    let val_metrics = match val_docs {
        Some(d) => Some(evaluate(d, &params, &tc.hyper, &tc.loss)?),
        None => None,
    };
    let report = RunReport {
        seed: tc.seed,
        batches: tc.num_batches,
        best_batch: outcome.best_batch,
        parameters: params.num_parameters(),
        train: train_metrics,
        validation: val_metrics,
        validation_dropped,
    };
    let checkpoint = Checkpoint::new(
        tc.hyper,
        params,
        train_corpus.vocab.clone(),
        train_corpus.labels.clone(),
        Some(cfg.pipeline.clone()),
    )?;
    Ok(RunOutput {
        checkpoint,
        history: outcome.history,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_corpus, SynthSpec};

    fn small_cfg() -> RunConfig {
        RunConfig::from_json(r#"{"seed": 3, "model": {"dim": 4}, "train": {"batch_size": 10, "num_batches": 12, "eval_every": 4}}"#)
            .unwrap()
    }

    #[test]
    fn run_writes_all_artifacts() {
        let spec = SynthSpec::default_binary();
        let tr = sample_corpus(&spec, 60, 12, 1).unwrap().corpus;
        let va = sample_corpus(&spec, 30, 12, 2).unwrap().corpus;
        let cfg = small_cfg();
        let out = train_run(&tr, Some(&va), &cfg).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.report.validation.is_some());
        let dir = tempfile::tempdir().unwrap();
        out.write(&cfg, dir.path()).unwrap();
        for f in [CHECKPOINT_FILE, HISTORY_FILE, METRICS_FILE, CONFIG_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(back, out.checkpoint);
        let echoed = RunConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn class_count_must_match_corpus() {
        let tr = sample_corpus(&SynthSpec::default_binary(), 20, 5, 1).unwrap().corpus;
        let cfg = RunConfig::from_json(r#"{"model": {"classes": 3}}"#).unwrap();
        assert!(matches!(train_run(&tr, None, &cfg), Err(Error::InvalidConfig(_))));
    }
}
