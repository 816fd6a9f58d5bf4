//! Line-oriented corpus file.
//!
//! ```text
//! coopnet-corpus 1
//! V <vocabulary size>
//! M <document count>
//! C <class count>
//! labels
//! <id>\t<name>          (C lines)
//! vocab
//! <id>\t<token>         (V lines)
//! docs
//! <label>\t<id> <id> …  (M lines)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{Corpus, Document, LabelTable, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &str = "coopnet-corpus 1";

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render(corpus)).map_err(|e| Error::io(path, e))
}

pub(crate) fn render(corpus: &Corpus) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "V {}", corpus.vocab.len());
    let _ = writeln!(out, "M {}", corpus.docs.len());
    let _ = writeln!(out, "C {}", corpus.labels.len());
    out.push_str("labels\n");
    for (i, name) in corpus.labels.names().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{name}");
    }
    out.push_str("vocab\n");
    for (i, tok) in corpus.vocab.tokens().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{tok}");
    }
    out.push_str("docs\n");
    for d in &corpus.docs {
        let _ = write!(out, "{}\t", d.label);
        for (j, id) in d.word_ids.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{id}");
        }
        out.push('\n');
    }
    out
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    fn expect(&mut self, literal: &str) -> Result<()> {
        let l = self.next_line()?;
        if l != literal {
            return Err(self.err(format!("expected `{literal}`, found `{l}`")));
        }
        Ok(())
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| self.err(format!("expected `{key} <count>`, found `{l}`")))
    }

    fn indexed(&mut self, expected_id: usize) -> Result<&'a str> {
        let l = self.next_line()?;
        let (id, value) = l
            .split_once('\t')
            .ok_or_else(|| self.err("expected `<id>\\t<value>`"))?;
        if id.parse::<usize>().ok() != Some(expected_id) {
            return Err(self.err(format!("expected id {expected_id}, found `{id}`")));
        }
        Ok(value)
    }
}

pub(crate) fn parse(text: &str, path: &Path) -> Result<Corpus> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        path,
        line: 0,
    };
    lines.expect(MAGIC)?;
    let v = lines.count("V")?;
    let m = lines.count("M")?;
    let c = lines.count("C")?;

    lines.expect("labels")?;
    let names = (0..c)
        .map(|i| lines.indexed(i).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let labels = LabelTable::new(names).map_err(|e| lines.err(e.to_string()))?;

    lines.expect("vocab")?;
    let tokens = (0..v)
        .map(|i| lines.indexed(i).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| lines.err(e.to_string()))?;

    lines.expect("docs")?;
    let mut docs = Vec::with_capacity(m);
    for _ in 0..m {
        let l = lines.next_line()?;
        let (label, ids) = l
            .split_once('\t')
            .ok_or_else(|| lines.err("expected `<label>\\t<ids>`"))?;
        let label: usize = label
            .parse()
            .ok()
            .filter(|&y| y < c)
            .ok_or_else(|| lines.err(format!("invalid label `{label}`")))?;
        let word_ids = ids
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().ok().filter(|&id| id < v))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| lines.err("invalid word id"))?;
        if word_ids.is_empty() {
            return Err(lines.err("empty document"));
        }
        docs.push(Document { word_ids, label });
    }
    if let Some((i, extra)) = lines.inner.next() {
        if !extra.is_empty() {
            lines.line = i + 1;
            return Err(lines.err("trailing content after the last document"));
        }
    }
    Ok(Corpus { vocab, labels, docs })
}
