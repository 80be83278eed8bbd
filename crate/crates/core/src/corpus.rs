//! Labeled text corpora.
//!
//! Records arrive as JSONL (`{"id", "text", "label", "split"}`) or CSV with the
//! header `id,text,label,split`. Labels use the answer tokens `P` (patient) and
//! `H` (healthy control). `split` is optional and defaults to `train`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate document id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("document {id:?} at line {line} has empty text")]
    EmptyText { id: String, line: usize },
    #[error("cannot build {n_folds} folds: label {label} has only {available} documents")]
    TooFewDocuments {
        n_folds: usize,
        label: Label,
        available: usize,
    },
    #[error("unknown corpus format for {0:?} (expected .jsonl or .csv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "P")]
    Patient,
    #[serde(rename = "H")]
    Control,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Patient, Label::Control];

    pub fn token(self) -> &'static str {
        match self {
            Label::Patient => "P",
            Label::Control => "H",
        }
    }

    /// The answer phrase used in demonstrations and completions.
    pub fn answer(self) -> &'static str {
        match self {
            Label::Patient => "dementia patient (P)",
            Label::Control => "healthy control (H)",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Patient => Label::Control,
            Label::Control => Label::Patient,
        }
    }

    pub fn from_token(token: &str) -> Option<Label> {
        match token.trim() {
            "P" | "p" => Some(Label::Patient),
            "H" | "h" => Some(Label::Control),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
    Unassigned,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "" | "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(default)]
    pub split: Split,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            label,
            split: Split::Train,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(CorpusFormat::Jsonl),
            Some("csv") => Ok(CorpusFormat::Csv),
            _ => Err(CorpusError::UnknownFormat(path.display().to_string())),
        }
    }
}

/// Raw record shape shared by both formats; label and split are validated by hand
/// so that errors carry a line number.
#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    label: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    documents: Vec<Document>,
}

impl Corpus {
    /// Builds a corpus, enforcing unique ids and non-empty text. Line numbers in
    /// errors are 1-based positions in `documents`.
    pub fn from_documents(
        name: impl Into<String>,
        documents: Vec<Document>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, doc) in documents.iter().enumerate() {
            validate(doc, i + 1, &mut seen)?;
        }
        Ok(Corpus {
            name: name.into(),
            documents,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let format = CorpusFormat::from_path(path)?;
        Self::load_as(path, format)
    }

    pub fn load_as(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("corpus")
            .to_string();
        let file = File::open(path)?;
        let documents = match format {
            CorpusFormat::Jsonl => read_jsonl(BufReader::new(file))?,
            CorpusFormat::Csv => read_csv(file)?,
        };
        Ok(Corpus { name, documents })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let format = CorpusFormat::from_path(path)?;
        let file = File::create(path)?;
        match format {
            CorpusFormat::Jsonl => {
                let mut out = BufWriter::new(file);
                for doc in &self.documents {
                    serde_json::to_writer(&mut out, doc).map_err(std::io::Error::from)?;
                    out.write_all(b"\n")?;
                }
                out.flush()?;
            }
            CorpusFormat::Csv => {
                let mut out = csv::Writer::from_writer(file);
                out.write_record(["id", "text", "label", "split"])
                    .map_err(csv_io)?;
                for doc in &self.documents {
                    out.write_record([
                        doc.id.as_str(),
                        doc.text.as_str(),
                        doc.label.token(),
                        doc.split.as_str(),
                    ])
                    .map_err(csv_io)?;
                }
                out.flush()?;
            }
        }
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.id.as_str())
    }

    pub fn in_split(&self, split: Split) -> Vec<&Document> {
        self.documents.iter().filter(|d| d.split == split).collect()
    }

    /// Appends documents from another corpus, re-validating id uniqueness.
    pub fn extend(&mut self, other: Corpus) -> Result<(), CorpusError> {
        let mut seen: HashSet<String> = self.documents.iter().map(|d| d.id.clone()).collect();
        let offset = self.documents.len();
        for (i, doc) in other.documents.into_iter().enumerate() {
            validate(&doc, offset + i + 1, &mut seen)?;
            self.documents.push(doc);
        }
        Ok(())
    }

    pub fn label_count(&self, label: Label) -> usize {
        self.documents.iter().filter(|d| d.label == label).count()
    }
}

fn validate(doc: &Document, line: usize, seen: &mut HashSet<String>) -> Result<(), CorpusError> {
    if doc.id.is_empty() {
        return Err(CorpusError::MalformedRecord {
            line,
            reason: "empty id".into(),
        });
    }
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyText {
            id: doc.id.clone(),
            line,
        });
    }
    if !seen.insert(doc.id.clone()) {
        return Err(CorpusError::DuplicateId {
            id: doc.id.clone(),
            line,
        });
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn convert(raw: RawRecord, line: usize) -> Result<Document, CorpusError> {
    let label = Label::from_token(&raw.label).ok_or_else(|| CorpusError::MalformedRecord {
        line,
        reason: format!("label must be \"P\" or \"H\", got {:?}", raw.label),
    })?;
    let split = match raw.split.as_deref() {
        None => Split::Train,
        Some(s) => Split::parse(s).ok_or_else(|| CorpusError::MalformedRecord {
            line,
            reason: format!("split must be \"train\" or \"test\", got {s:?}"),
        })?,
    };
    Ok(Document {
        id: raw.id,
        text: raw.text,
        label,
        split,
    })
}

fn read_jsonl(reader: impl BufRead) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        let doc = convert(raw, line_no)?;
        validate(&doc, line_no, &mut seen)?;
        docs.push(doc);
    }
    Ok(docs)
}

fn read_csv(file: File) -> Result<Vec<Document>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::MalformedRecord {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    for required in ["id", "text", "label"] {
        if !headers.iter().any(|h| h == required) {
            return Err(CorpusError::MalformedRecord {
                line: 1,
                reason: format!("missing column {required:?}"),
            });
        }
    }
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for result in reader.deserialize::<RawRecord>() {
        let (line_no, raw) = match result {
            Ok(raw) => (docs.len() + 2, raw),
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line() as usize)
                    .unwrap_or(docs.len() + 2);
                return Err(CorpusError::MalformedRecord {
                    line,
                    reason: e.to_string(),
                });
            }
        };
        let doc = convert(raw, line_no)?;
        validate(&doc, line_no, &mut seen)?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Stratified assignment of documents to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Splits `docs` into (pool, held-out) for `fold`, preserving input order.
    pub fn partition<'a>(
        &self,
        docs: &[&'a Document],
        fold: usize,
    ) -> (Vec<&'a Document>, Vec<&'a Document>) {
        docs.iter().partition(|d| self.fold_of(&d.id) != Some(fold))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified fold assignment: each label's documents are shuffled with a
/// seeded PRNG, then dealt round-robin. The second label's deal continues where
/// the first stopped, so total fold sizes differ by at most one.
pub fn make_folds(
    docs: &[&Document],
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment, CorpusError> {
    for label in Label::ALL {
        let available = docs.iter().filter(|d| d.label == label).count();
        if n_folds < 2 || n_folds > available {
            return Err(CorpusError::TooFewDocuments {
                n_folds,
                label,
                available,
            });
        }
    }
    let mut assignment = BTreeMap::new();
    let mut next = 0usize;
    for (li, label) in Label::ALL.into_iter().enumerate() {
        let mut ids: Vec<&str> = docs
            .iter()
            .filter(|d| d.label == label)
            .map(|d| d.id.as_str())
            .collect();
        let mut rng = seed::rng(seed::derive_seed(seed, "folding", li as u64));
        ids.shuffle(&mut rng);
        for id in ids {
            assignment.insert(id.to_string(), next % n_folds);
            next += 1;
        }
    }
    Ok(FoldAssignment {
        n_folds,
        seed,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn docs(np: usize, nc: usize) -> Vec<Document> {
        (0..np)
            .map(|i| Document::new(format!("p{i:03}"), "text", Label::Patient))
            .chain((0..nc).map(|i| Document::new(format!("c{i:03}"), "text", Label::Control)))
            .collect()
    }

    #[test]
    fn loads_two_line_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "c.jsonl",
            "{\"id\":\"d1\",\"text\":\"a\",\"label\":\"P\"}\n{\"id\":\"d2\",\"text\":\"b\",\"label\":\"H\",\"split\":\"test\"}\n",
        );
        let corpus = Corpus::load(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.documents()[0].label, Label::Patient);
        assert_eq!(corpus.documents()[0].split, Split::Train);
        assert_eq!(corpus.documents()[1].label, Label::Control);
        assert_eq!(corpus.documents()[1].split, Split::Test);
        assert_eq!(corpus.name, "c");
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "c.jsonl",
            "{\"id\":\"d1\",\"text\":\"a\",\"label\":\"P\"}\n{\"id\":\"d1\",\"text\":\"b\",\"label\":\"H\"}\n",
        );
        match Corpus::load(&path) {
            Err(CorpusError::DuplicateId { id, line }) => {
                assert_eq!(id, "d1");
                assert_eq!(line, 2);
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "e.jsonl",
            "{\"id\":\"d1\",\"text\":\"  \\n \",\"label\":\"P\"}\n",
        );
        assert!(matches!(
            Corpus::load(&path),
            Err(CorpusError::EmptyText { line: 1, .. })
        ));
        let path = write(
            &dir,
            "l.jsonl",
            "{\"id\":\"d1\",\"text\":\"x\",\"label\":\"AD\"}\n",
        );
        assert!(matches!(
            Corpus::load(&path),
            Err(CorpusError::MalformedRecord { line: 1, .. })
        ));
        let path = write(&dir, "j.jsonl", "\n{not json}\n");
        assert!(matches!(
            Corpus::load(&path),
            Err(CorpusError::MalformedRecord { line: 2, .. })
        ));
    }

    #[test]
    fn csv_with_quoted_commas() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "c.csv",
            "id,text,label,split\nd1,\"the boy, the jar\",P,train\nd2,water,H,test\n",
        );
        let corpus = Corpus::load(&path).unwrap();
        assert_eq!(corpus.documents()[0].text, "the boy, the jar");
        assert_eq!(corpus.in_split(Split::Test).len(), 1);
    }

    #[test]
    fn canary_sized_counts() {
        let corpus = Corpus::from_documents("canary", docs(63, 67)).unwrap();
        assert_eq!(corpus.len(), 130);
        assert_eq!(corpus.label_count(Label::Patient), 63);
        assert_eq!(corpus.label_count(Label::Control), 67);
    }

    #[test]
    fn ten_docs_five_folds_one_each() {
        let corpus = Corpus::from_documents("c", docs(5, 5)).unwrap();
        let refs: Vec<&Document> = corpus.documents().iter().collect();
        let folds = make_folds(&refs, 5, 0).unwrap();
        for f in 0..5 {
            let (_, held) = folds.partition(&refs, f);
            assert_eq!(held.len(), 2);
            assert_eq!(held.iter().filter(|d| d.label == Label::Patient).count(), 1);
        }
    }

    #[test]
    fn hundred_thirty_docs_fold_size_26() {
        let corpus = Corpus::from_documents("c", docs(63, 67)).unwrap();
        let refs: Vec<&Document> = corpus.documents().iter().collect();
        let folds = make_folds(&refs, 5, 3).unwrap();
        assert_eq!(folds.fold_sizes(), vec![26; 5]);
        assert_eq!(folds, make_folds(&refs, 5, 3).unwrap());
        assert_ne!(folds, make_folds(&refs, 5, 4).unwrap());
    }

    #[test]
    fn too_few_documents() {
        let corpus = Corpus::from_documents("c", docs(2, 9)).unwrap();
        let refs: Vec<&Document> = corpus.documents().iter().collect();
        assert!(matches!(
            make_folds(&refs, 3, 0),
            Err(CorpusError::TooFewDocuments {
                label: Label::Patient,
                available: 2,
                ..
            })
        ));
        assert!(make_folds(&refs, 1, 0).is_err());
    }
}
