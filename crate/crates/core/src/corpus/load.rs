use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::corpus::LabelTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub text: String,
    pub label: usize,
}

/// A row the CSV loader rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRow {
    pub line: u64,
    pub reason: String,
}

/// Labeled raw text, before tokenization.
#[derive(Clone, Debug)]
pub struct RawCorpus {
    pub docs: Vec<RawDocument>,
    pub labels: LabelTable,
    pub skipped: Vec<SkippedRow>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads the 20 Newsgroups layout: one sub-directory per category, one file
/// per article. Categories are labeled in sorted directory-name order and
/// bytes are decoded as UTF-8 with lossy replacement.
pub fn load_newsgroups(root: impl AsRef<Path>) -> Result<RawCorpus> {
    let root = root.as_ref();
    let categories: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if categories.is_empty() {
        return Err(Error::Parse {
            path: root.to_path_buf(),
            line: 0,
            message: "no category directories found".into(),
        });
    }
    let names = categories
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let labels = LabelTable::new(names)?;
    let mut docs = Vec::new();
    for (label, dir) in categories.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            docs.push(RawDocument {
                text: String::from_utf8_lossy(&bytes).into_owned(),
                label,
            });
        }
    }
    Ok(RawCorpus {
        docs,
        labels,
        skipped: Vec::new(),
    })
}

/// Loads a `text,label` CSV.
///
/// Rows with the wrong field count, an empty label or undecodable bytes are
/// skipped and reported. Labels sort numerically when every label is an
/// integer, lexicographically otherwise.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawCorpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());

    let mut records = reader.byte_records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "missing `text,label` header".into(),
            })
        }
    };
    let header_fields: Vec<String> = header
        .iter()
        .map(|f| String::from_utf8_lossy(f).trim().to_ascii_lowercase())
        .collect();
    if header_fields != ["text", "label"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `text,label`, found {header_fields:?}"),
        });
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for rec in records {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                skipped.push(SkippedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            skipped.push(SkippedRow {
                line,
                reason: format!("expected 2 fields, found {}", rec.len()),
            });
            continue;
        }
        let (Ok(text), Ok(label)) = (std::str::from_utf8(&rec[0]), std::str::from_utf8(&rec[1])) else {
            skipped.push(SkippedRow {
                line,
                reason: "invalid UTF-8".into(),
            });
            continue;
        };
        let label = label.trim();
        if label.is_empty() || label.contains(['\t', '\n', '\r']) {
            skipped.push(SkippedRow {
                line,
                reason: "empty or invalid label".into(),
            });
            continue;
        }
        rows.push((text.to_string(), label.to_string()));
    }

    let distinct: BTreeSet<&str> = rows.iter().map(|(_, l)| l.as_str()).collect();
    let mut names: Vec<String> = distinct.into_iter().map(str::to_string).collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().expect("checked above"));
    }
    let labels = LabelTable::new(names)?;
    let docs = rows
        .into_iter()
        .map(|(text, l)| RawDocument {
            label: labels.label_of(&l).expect("label collected above"),
            text,
        })
        .collect();
    Ok(RawCorpus { docs, labels, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newsgroups_layout() {
        let dir = tempfile::tempdir().unwrap();
        for cat in ["sci.space", "alt.atheism"] {
            fs::create_dir(dir.path().join(cat)).unwrap();
            for i in 0..3 {
                fs::write(dir.path().join(cat).join(format!("{i}")), format!("{cat} article {i}")).unwrap();
            }
        }
        let raw = load_newsgroups(dir.path()).unwrap();
        assert_eq!(raw.docs.len(), 6);
        assert_eq!(raw.labels.names(), &["alt.atheism", "sci.space"]);
        assert_eq!(raw.docs[0].label, 0);
        assert_eq!(raw.docs[5].label, 1);
        assert!(raw.docs[5].text.starts_with("sci.space"));
        assert!(load_newsgroups(dir.path().join("missing")).is_err());
    }

    #[test]
    fn csv_skips_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut body = String::from("text,label\n");
        for i in 0..100 {
            if i == 42 {
                body.push_str("\"only one field\"\n");
            } else {
                body.push_str(&format!("\"review, number {i}\",{}\n", i % 2));
            }
        }
        fs::write(&path, body).unwrap();
        let raw = load_csv(&path).unwrap();
        assert_eq!(raw.docs.len(), 99);
        assert_eq!(raw.skipped.len(), 1);
        assert_eq!(raw.skipped[0].line, 44);
        assert_eq!(raw.labels.names(), &["0", "1"]);
        assert_eq!(raw.docs[0].text, "review, number 0");
    }

    #[test]
    fn csv_numeric_labels_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "text,label\na,10\nb,2\nc,1\n").unwrap();
        let raw = load_csv(&path).unwrap();
        assert_eq!(raw.labels.names(), &["1", "2", "10"]);
        assert_eq!(raw.docs.iter().map(|d| d.label).collect::<Vec<_>>(), vec![2, 1, 0]);
    }

    #[test]
    fn csv_requires_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,b\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 1, .. })));
    }
}
