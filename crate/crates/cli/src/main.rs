use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use coopnet::checkpoint::Checkpoint;
use coopnet::config::RunConfig;
use coopnet::corpus::{load_csv, load_newsgroups, preprocess, read_corpus, write_corpus, Corpus, PipelineConfig};
use coopnet::diff::LossConfig;
use coopnet::fmt::{f64_17, to_json_string};
use coopnet::interpret::{count_init, solve_relevance, top_words, RelevanceOptions};
use coopnet::metrics::{evaluate, predict_all};
use coopnet::model::embed;
use coopnet::oracle::{brute_force_posterior, free_energy, run_meanfield};
use coopnet::run::train_run;
use coopnet::synth::{sample_corpus, write_latent, LdaTrueModel, SynthSpec};
use coopnet::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "coopnet", version, about = "Cooperative networks for supervised topic models")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Newsgroups,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Uniform,
    Counts,
}

#[derive(Clone, Copy, ValueEnum)]
enum CandidateSet {
    Vocab,
    Doc,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    Oracle,
    Auc,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize raw text into an encoded corpus.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: InputFormat,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; only its `pipeline` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A second raw split encoded with the vocabulary built from `input`.
        #[arg(long, requires = "test_out")]
        test_input: Option<PathBuf>,
        #[arg(long, requires = "test_input")]
        test_out: Option<PathBuf>,
    },
    /// Sample a labeled corpus from an LDA model.
    Synth {
        /// Model and labeler JSON; the built-in two-class model when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        docs: usize,
        #[arg(long, default_value_t = 50)]
        words: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the sampled θ and z.
        #[arg(long)]
        latent: Option<PathBuf>,
        /// Where to write the spec that was used.
        #[arg(long)]
        dump_spec: Option<PathBuf>,
    },
    /// Train a model and write checkpoint, history and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training corpus (overrides `data.train`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Validation corpus (overrides `data.validation`).
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Metrics JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one row per document: id, label, then the D embedding values.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the words most relevant to a document embedding.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus holding the source document.
        #[arg(long, required_unless_present = "embedding")]
        corpus: Option<PathBuf>,
        /// Index of the source document in `corpus`.
        #[arg(long, requires = "corpus")]
        doc: Option<usize>,
        /// Target embedding as comma-separated values.
        #[arg(long, conflicts_with_all = ["corpus", "doc"])]
        embedding: Option<String>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, value_enum, default_value_t = InitKind::Uniform)]
        init: InitKind,
        #[arg(long, value_enum, default_value_t = CandidateSet::Vocab)]
        candidates: CandidateSet,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        /// Top-word JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Objective per step, as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a self-verification suite; exits 1 if any property fails.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean-field inference for one document under a known LDA model.
    Meanfield {
        /// `{"alpha": …, "beta": …}` or a synth spec.
        #[arg(long)]
        model: PathBuf,
        /// Word ids, separated by spaces or commas.
        #[arg(long)]
        words: String,
        #[arg(long, default_value_t = 10_000)]
        max_sweeps: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Also compute the exact posterior (two topics, α ≥ 1, ≤ 16 words)
        /// and report the bound gap.
        #[arg(long)]
        brute_force: bool,
        #[arg(long, default_value_t = 5000)]
        resolution: usize,
        /// Report JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Outcome {
    Success,
    VerificationFailed,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// A corpus encoded against the checkpoint's vocabulary.
fn load_for(checkpoint: &Checkpoint, path: &Path) -> Result<Corpus> {
    let corpus = read_corpus(path)?;
    if corpus.labels != checkpoint.labels {
        bail!("{}: label table differs from the checkpoint's", path.display());
    }
    if corpus.vocab == checkpoint.vocab {
        return Ok(corpus);
    }
    let (re, dropped) = corpus.reencode(&checkpoint.vocab);
    if dropped > 0 {
        eprintln!("{dropped} documents have no in-vocabulary token and were skipped");
    }
    Ok(re)
}

fn parse_floats(text: &str) -> Result<Vec<f64>> {
    text.split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number `{s}`")))
        .collect()
}

fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad word id `{s}`")))
        .collect()
}

fn cmd_preprocess(
    input: &Path,
    format: InputFormat,
    out: &Path,
    config: Option<&Path>,
    test: Option<(&Path, &Path)>,
) -> Result<()> {
    let pipeline = match config {
        Some(p) => RunConfig::load(p)?.pipeline,
        None => PipelineConfig::default(),
    };
    let load = |p: &Path| match format {
        InputFormat::Newsgroups => load_newsgroups(p),
        InputFormat::Csv => load_csv(p),
    };
    let raw = load(input)?;
    for s in &raw.skipped {
        eprintln!("skipped line {}: {}", s.line, s.reason);
    }
    let pre = preprocess(&raw, &pipeline)?;
    let c = &pre.corpus;
    write_corpus(c, out)?;
    println!(
        "V = {}  M = {}  C = {}  mean length = {:.2}  dropped empty = {}",
        c.vocab.len(),
        c.docs.len(),
        c.num_classes(),
        c.mean_doc_len(),
        pre.dropped_empty
    );
    if let Some((tin, tout)) = test {
        let raw = load(tin)?;
        if raw.labels != c.labels {
            bail!("{}: label set differs from {}", tin.display(), input.display());
        }
        let own = preprocess(&raw, &PipelineConfig { min_count: 1, ..pipeline })?;
        let (test, dropped) = own.corpus.reencode(&c.vocab);
        write_corpus(&test, tout)?;
        println!(
            "test: M = {}  mean length = {:.2}  dropped empty = {}",
            test.docs.len(),
            test.mean_doc_len(),
            dropped + own.dropped_empty
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    spec: Option<&Path>,
    docs: usize,
    words: usize,
    seed: u64,
    out: &Path,
    latent: Option<&Path>,
    dump_spec: Option<&Path>,
) -> Result<()> {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let s: SynthSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            s.validate()?;
            s
        }
        None => SynthSpec::default_binary(),
    };
    let sample = sample_corpus(&spec, docs, words, seed)?;
    write_corpus(&sample.corpus, out)?;
    if let Some(p) = latent {
        write_latent(&sample.latent, spec.model.topics(), p)?;
    }
    if let Some(p) = dump_spec {
        write_text(p, &to_json_string(&spec))?;
    }
    let counts: Vec<usize> = (0..sample.corpus.num_classes())
        .map(|c| sample.corpus.docs.iter().filter(|d| d.label == c).count())
        .collect();
    println!("M = {docs}  N = {words}  V = {}  class counts = {counts:?}", spec.model.vocab_size());
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    corpus: Option<PathBuf>,
    validation: Option<PathBuf>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if corpus.is_some() {
        cfg.data.train = corpus;
    }
    if validation.is_some() {
        cfg.data.validation = validation;
    }
    let Some(train_path) = cfg.data.train.clone() else {
        bail!("no training corpus: pass --corpus or set data.train");
    };
    let train = read_corpus(&train_path)?;
    let val = match &cfg.data.validation {
        Some(p) => Some(read_corpus(p)?),
        None => None,
    };
    println!(
        "training on {} documents ({} classes, V = {}) for {} batches",
        train.docs.len(),
        train.num_classes(),
        train.vocab.len(),
        cfg.train.num_batches
    );
    let run = train_run(&train, val.as_ref(), &cfg)?;
    for row in &run.history {
        let v = match (row.val_accuracy, row.val_auc) {
            (Some(a), Some(u)) => format!("  val acc {a:.4}  val auc {u:.4}"),
            (Some(a), None) => format!("  val acc {a:.4}"),
            _ => String::new(),
        };
        println!("batch {:>5}  loss {:.5}{v}", row.batch, row.train_loss);
    }
    run.write(&cfg, out)?;
    println!("kept batch {}; artifacts in {}", run.report.best_batch, out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus: &Path, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let c = load_for(&ck, corpus)?;
    let m = evaluate(&c.docs, &ck.params, &ck.hyper, &LossConfig::for_classes(ck.hyper.classes))?;
    emit(out, &to_json_string(&m))?;
    if out.is_some() {
        println!("accuracy {:.4}  auc {}", m.accuracy, m.auc.map_or("-".into(), |a| format!("{a:.4}")));
    }
    Ok(())
}

fn cmd_embed(checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let c = load_for(&ck, corpus)?;
    let preds = predict_all(&c.docs, &ck.params, &ck.hyper, &LossConfig::for_classes(ck.hyper.classes))?;
    let mut text = String::new();
    for (i, (d, p)) in c.docs.iter().zip(&preds).enumerate() {
        let values: Vec<String> = p.embedding.iter().map(|&x| f64_17(x)).collect();
        text.push_str(&format!("{i}\t{}\t{}\n", d.label, values.join("\t")));
    }
    write_text(out, &text)?;
    println!("{} rows of dimension {} written to {}", preds.len(), ck.hyper.dim, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_interpret(
    checkpoint: &Path,
    corpus: Option<&Path>,
    doc: Option<usize>,
    embedding: Option<&str>,
    top: usize,
    init: InitKind,
    candidates: CandidateSet,
    opts: RelevanceOptions,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let source = match corpus {
        Some(p) => {
            let c = load_for(&ck, p)?;
            let i = doc.unwrap_or(0);
            let Some(d) = c.docs.get(i) else {
                bail!("document {i} out of range ({} documents)", c.docs.len());
            };
            Some(d.clone())
        }
        None => None,
    };
    let target = match (embedding, &source) {
        (Some(text), _) => {
            let v = parse_floats(text)?;
            if v.len() != ck.hyper.dim {
                bail!("embedding has {} values, the model has dimension {}", v.len(), ck.hyper.dim);
            }
            v
        }
        (None, Some(d)) => embed(d, &ck.params, &ck.hyper)?,
        (None, None) => bail!("pass --corpus/--doc or --embedding"),
    };
    let ids: Vec<usize> = match (candidates, &source) {
        (CandidateSet::Doc, Some(d)) => {
            let mut v = d.word_ids.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
        (CandidateSet::Doc, None) => bail!("--candidates doc needs a source document"),
        (CandidateSet::Vocab, _) => (0..ck.vocab.len()).collect(),
    };
    let init = match (init, &source) {
        (InitKind::Counts, Some(d)) => Some(count_init(d, &ids)),
        (InitKind::Counts, None) => bail!("--init counts needs a source document"),
        (InitKind::Uniform, _) => None,
    };
    let result = solve_relevance(&target, &ck.params, &ck.hyper, &ids, &RelevanceOptions { init, ..opts })?;
    let words = top_words(&result, &ck.vocab, top.min(ids.len()));
    emit(out, &to_json_string(&words))?;
    if let Some(p) = trace {
        let mut text = String::from("step,objective\n");
        for (s, v) in result.trace.iter().enumerate() {
            text.push_str(&format!("{s},{}\n", f64_17(*v)));
        }
        write_text(p, &text)?;
    }
    eprintln!(
        "objective {:.6e} -> {:.6e} (step {})",
        result.initial_objective, result.objective, result.best_step
    );
    Ok(())
}

fn cmd_verify(suite: SuiteArg, seed: u64, out: Option<&Path>) -> Result<Outcome> {
    let suite = match suite {
        SuiteArg::Gradcheck => Suite::Gradcheck,
        SuiteArg::Oracle => Suite::Oracle,
        SuiteArg::Auc => Suite::Auc,
    };
    let report = verify::run(suite, seed)?;
    emit(out, &report.to_json())?;
    for p in &report.properties {
        eprintln!(
            "{} {}: {:e}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.measured
        );
    }
    Ok(if report.passed {
        Outcome::Success
    } else {
        Outcome::VerificationFailed
    })
}

#[derive(serde::Serialize)]
struct MeanfieldReport {
    gamma: Vec<f64>,
    q_z: Vec<Vec<f64>>,
    free_energy: f64,
    sweeps: usize,
    converged: bool,
    log_evidence: Option<f64>,
    kl_gap: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_meanfield(
    model: &Path,
    words: &str,
    max_sweeps: usize,
    tol: f64,
    brute: bool,
    resolution: usize,
    out: Option<&Path>,
) -> Result<()> {
    let text = fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?;
    let lda = match serde_json::from_str::<LdaTrueModel>(&text) {
        Ok(m) => m,
        Err(_) => serde_json::from_str::<SynthSpec>(&text)
            .with_context(|| format!("{}: neither an LDA model nor a synth spec", model.display()))?
            .model,
    };
    lda.validate()?;
    let words = parse_ids(words)?;
    let run = run_meanfield(&lda.alpha, &lda.beta, &words, max_sweeps, tol)?;
    let f = free_energy(&run.state, &lda.alpha, &lda.beta, &words);
    let (log_evidence, kl_gap) = if brute {
        let bf = brute_force_posterior(&lda.alpha, &lda.beta, &words, resolution)?;
        (Some(bf.log_evidence), Some(f + bf.log_evidence))
    } else {
        (None, None)
    };
    let report = MeanfieldReport {
        sweeps: run.sweeps(),
        converged: run.converged,
        gamma: run.state.gamma,
        q_z: run.state.q_z,
        free_energy: f,
        log_evidence,
        kl_gap,
    };
    emit(out, &to_json_string(&report))
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Preprocess {
            input,
            format,
            out,
            config,
            test_input,
            test_out,
        } => {
            let test = test_input.as_deref().zip(test_out.as_deref());
            cmd_preprocess(&input, format, &out, config.as_deref(), test)?
        }
        Command::Synth {
            spec,
            docs,
            words,
            seed,
            out,
            latent,
            dump_spec,
        } => cmd_synth(spec.as_deref(), docs, words, seed, &out, latent.as_deref(), dump_spec.as_deref())?,
        Command::Train {
            config,
            corpus,
            validation,
            seed,
            out,
        } => cmd_train(config.as_deref(), corpus, validation, seed, &out)?,
        Command::Eval { checkpoint, corpus, out } => cmd_eval(&checkpoint, &corpus, out.as_deref())?,
        Command::Embed { checkpoint, corpus, out } => cmd_embed(&checkpoint, &corpus, &out)?,
        Command::Interpret {
            checkpoint,
            corpus,
            doc,
            embedding,
            top,
            init,
            candidates,
            steps,
            learning_rate,
            out,
            trace,
        } => cmd_interpret(
            &checkpoint,
            corpus.as_deref(),
            doc,
            embedding.as_deref(),
            top,
            init,
            candidates,
            RelevanceOptions {
                steps,
                learning_rate,
                init: None,
            },
            out.as_deref(),
            trace.as_deref(),
        )?,
        Command::Verify { suite, seed, out } => return cmd_verify(suite, seed, out.as_deref()),
        Command::Meanfield {
            model,
            words,
            max_sweeps,
            tol,
            brute_force,
            resolution,
            out,
        } => cmd_meanfield(&model, &words, max_sweeps, tol, brute_force, resolution, out.as_deref())?,
    }
    Ok(Outcome::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
