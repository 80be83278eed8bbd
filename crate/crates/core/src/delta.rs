//! The gain matrix.
//!
//! For every ordered pair of training documents `(i, j)`, `i != j`, the gain
//! of demonstrating with `i` when classifying `j` is the probability of `j`'s
//! gold label with `i` prepended, minus the same probability zero-shot. Gains
//! are computed per run and averaged over runs.
//!
//! Matrix file (JSON):
//! `{"schema": 1, "doc_ids": [...], "runs": n, "values": [row-major, null on the diagonal], "metadata": {...}}`.
//! Per-run probe records live in a sibling `*.raw.jsonl`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Label};
use crate::gateway::{
    correct_label_probability, Gateway, GatewayError, LabeledPrediction, ParseStatus,
};
use crate::prompt::{build_prompt, PromptError, PromptTemplate};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error("probe failed for target {target:?} (demo {demo:?}, run {run}): {source}")]
    Probe {
        target: String,
        demo: Option<String>,
        run: usize,
        #[source]
        source: GatewayError,
    },
    #[error("zero-shot and one-shot passes disagree: {0}")]
    FingerprintMismatch(String),
    #[error("matrix schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
    #[error("document {0:?} is not in the matrix")]
    UnknownDocId(String),
    #[error("document {0:?} cannot demonstrate for itself")]
    SelfPairing(String),
    #[error("need at least {needed} documents, got {found}")]
    TooFewDocuments { needed: usize, found: usize },
    #[error("runs must be at least 1")]
    ZeroRuns,
    #[error("invalid matrix file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One classified probe, reduced to what the matrix needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub label: Label,
    pub confidence: f64,
    pub parse_status: ParseStatus,
    pub p_correct: f64,
}

impl ProbeOutcome {
    fn new(pred: &LabeledPrediction, gold: Label) -> Self {
        ProbeOutcome {
            label: pred.label,
            confidence: pred.confidence,
            parse_status: pred.parse_status,
            p_correct: correct_label_probability(pred, gold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRecord {
    pub doc_id: String,
    pub runs: Vec<ProbeOutcome>,
    pub mean_p0: f64,
}

impl ZeroShotRecord {
    fn from_runs(doc_id: String, runs: Vec<ProbeOutcome>) -> Self {
        // Shifted by the first run so identical runs average to that value exactly.
        let first = runs.first().map_or(0.0, |o| o.p_correct);
        let mean_p0 = first
            + runs.iter().map(|o| o.p_correct - first).sum::<f64>() / runs.len().max(1) as f64;
        ZeroShotRecord {
            doc_id,
            runs,
            mean_p0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotPass {
    pub records: Vec<ZeroShotRecord>,
    pub runs: usize,
    pub prompt_fingerprint: String,
    pub model: String,
}

/// Per-run one-shot probes, `runs x d x d`, `None` on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct OneShotTensor {
    pub doc_ids: Vec<String>,
    pub runs: usize,
    cells: Vec<Option<ProbeOutcome>>,
    pub prompt_fingerprint: String,
    pub model: String,
}

impl OneShotTensor {
    fn offset(&self, run: usize, demo: usize, target: usize) -> usize {
        let d = self.doc_ids.len();
        (run * d + demo) * d + target
    }

    pub fn get(&self, run: usize, demo: usize, target: usize) -> Option<&ProbeOutcome> {
        self.cells[self.offset(run, demo, target)].as_ref()
    }

    pub fn p1(&self, run: usize, demo: usize, target: usize) -> Option<f64> {
        self.get(run, demo, target).map(|o| o.p_correct)
    }
}

fn check_runs(runs: usize) -> Result<(), DeltaError> {
    if runs == 0 {
        Err(DeltaError::ZeroRuns)
    } else {
        Ok(())
    }
}

/// Classifies each document zero-shot, `runs` times.
pub fn zero_shot_pass(
    gateway: &Gateway,
    docs: &[&Document],
    template: &PromptTemplate,
    runs: usize,
) -> Result<ZeroShotPass, DeltaError> {
    check_runs(runs)?;
    let mut requests = Vec::with_capacity(docs.len() * runs);
    for run in 0..runs {
        for doc in docs {
            requests.push(build_prompt(template, &[], doc)?.to_request(run));
        }
    }
    let results = gateway.classify_all(&requests);
    let mut per_doc: Vec<Vec<ProbeOutcome>> = vec![Vec::with_capacity(runs); docs.len()];
    for (k, result) in results.into_iter().enumerate() {
        let (run, j) = (k / docs.len(), k % docs.len());
        let pred = result.map_err(|source| DeltaError::Probe {
            target: docs[j].id.clone(),
            demo: None,
            run,
            source,
        })?;
        per_doc[j].push(ProbeOutcome::new(&pred, docs[j].label));
    }
    Ok(ZeroShotPass {
        records: docs
            .iter()
            .zip(per_doc)
            .map(|(d, runs)| ZeroShotRecord::from_runs(d.id.clone(), runs))
            .collect(),
        runs,
        prompt_fingerprint: template.fingerprint(),
        model: gateway.model_name().to_string(),
    })
}

/// Classifies every target with every other document as its single demonstration.
pub fn one_shot_pass(
    gateway: &Gateway,
    docs: &[&Document],
    template: &PromptTemplate,
    runs: usize,
) -> Result<OneShotTensor, DeltaError> {
    check_runs(runs)?;
    let d = docs.len();
    if d < 2 {
        return Err(DeltaError::TooFewDocuments {
            needed: 2,
            found: d,
        });
    }
    let mut requests = Vec::with_capacity(runs * d * (d - 1));
    let mut slots = Vec::with_capacity(requests.capacity());
    for run in 0..runs {
        for (i, demo) in docs.iter().enumerate() {
            for (j, target) in docs.iter().enumerate() {
                if i == j {
                    continue;
                }
                requests.push(build_prompt(template, &[demo], target)?.to_request(run));
                slots.push((run, i, j));
            }
        }
    }
    let mut tensor = OneShotTensor {
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        runs,
        cells: vec![None; runs * d * d],
        prompt_fingerprint: template.fingerprint(),
        model: gateway.model_name().to_string(),
    };
    for (result, (run, i, j)) in gateway.classify_all(&requests).into_iter().zip(slots) {
        let pred = result.map_err(|source| DeltaError::Probe {
            target: docs[j].id.clone(),
            demo: Some(docs[i].id.clone()),
            run,
            source,
        })?;
        let at = tensor.offset(run, i, j);
        tensor.cells[at] = Some(ProbeOutcome::new(&pred, docs[j].label));
    }
    Ok(tensor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetadata {
    pub model: String,
    pub prompt_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

/// `d x d` run-averaged gains; the diagonal is NaN and never read.
#[derive(Debug, Clone)]
pub struct DeltaMatrix {
    doc_ids: Vec<String>,
    runs: usize,
    values: Vec<f64>,
    pub metadata: MatrixMetadata,
    index: HashMap<String, usize>,
}

impl PartialEq for DeltaMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.doc_ids == other.doc_ids
            && self.runs == other.runs
            && self.metadata == other.metadata
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    schema: u32,
    doc_ids: Vec<String>,
    runs: usize,
    values: Vec<Option<f64>>,
    metadata: MatrixMetadata,
}

/// Averages per-run gains: `values[i][j] = (1/runs) * sum_r (p1[r][i][j] - p0[r][j])`.
pub fn build_delta_matrix(
    p0: &ZeroShotPass,
    p1: &OneShotTensor,
) -> Result<DeltaMatrix, DeltaError> {
    if p0.prompt_fingerprint != p1.prompt_fingerprint {
        return Err(DeltaError::FingerprintMismatch(format!(
            "prompt {} vs {}",
            p0.prompt_fingerprint, p1.prompt_fingerprint
        )));
    }
    if p0.model != p1.model {
        return Err(DeltaError::FingerprintMismatch(format!(
            "model {} vs {}",
            p0.model, p1.model
        )));
    }
    if p0.runs != p1.runs {
        return Err(DeltaError::FingerprintMismatch(format!(
            "runs {} vs {}",
            p0.runs, p1.runs
        )));
    }
    let ids: Vec<&String> = p0.records.iter().map(|r| &r.doc_id).collect();
    if ids.len() != p1.doc_ids.len() || ids.iter().zip(&p1.doc_ids).any(|(a, b)| *a != b) {
        return Err(DeltaError::FingerprintMismatch(
            "document order differs".into(),
        ));
    }
    let d = ids.len();
    let runs = p0.runs;
    let mut values = vec![f64::NAN; d * d];
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let mut sum = 0.0;
            for r in 0..runs {
                let p1v = p1.p1(r, i, j).ok_or_else(|| {
                    DeltaError::Invalid(format!("missing one-shot probe ({r}, {i}, {j})"))
                })?;
                sum += p1v - p0.records[j].runs[r].p_correct;
            }
            values[i * d + j] = sum / runs as f64;
        }
    }
    DeltaMatrix::from_values(
        p1.doc_ids.clone(),
        runs,
        values,
        MatrixMetadata {
            model: p0.model.clone(),
            prompt_fingerprint: p0.prompt_fingerprint.clone(),
            created: None,
        },
    )
}

impl DeltaMatrix {
    /// Builds a matrix from row-major values; the diagonal is overwritten with NaN.
    pub fn from_values(
        doc_ids: Vec<String>,
        runs: usize,
        mut values: Vec<f64>,
        metadata: MatrixMetadata,
    ) -> Result<Self, DeltaError> {
        let d = doc_ids.len();
        if values.len() != d * d {
            return Err(DeltaError::Invalid(format!(
                "{} values for {d} documents",
                values.len()
            )));
        }
        let mut index = HashMap::with_capacity(d);
        for (i, id) in doc_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(DeltaError::Invalid(format!("duplicate id {id:?}")));
            }
        }
        for i in 0..d {
            values[i * d + i] = f64::NAN;
        }
        Ok(DeltaMatrix {
            doc_ids,
            runs,
            values,
            metadata,
            index,
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn runs(&self) -> usize {
        self.runs
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn index_of(&self, id: &str) -> Result<usize, DeltaError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| DeltaError::UnknownDocId(id.to_string()))
    }

    /// Gain of demonstrating with `demo` for `target`.
    pub fn get(&self, demo: &str, target: &str) -> Result<f64, DeltaError> {
        let i = self.index_of(demo)?;
        let j = self.index_of(target)?;
        if i == j {
            return Err(DeltaError::SelfPairing(demo.to_string()));
        }
        Ok(self.values[i * self.len() + j])
    }

    /// Off-diagonal entries as `(demo, target, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, f64)> + '_ {
        let d = self.len();
        (0..d * d).filter(move |k| k / d != k % d).map(move |k| {
            (
                self.doc_ids[k / d].as_str(),
                self.doc_ids[k % d].as_str(),
                self.values[k],
            )
        })
    }

    /// Applies `f` to every off-diagonal entry.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DeltaMatrix {
        let mut out = self.clone();
        let d = self.len();
        for k in 0..d * d {
            if k / d != k % d {
                out.values[k] = f(self.values[k]);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DeltaError> {
        let d = self.len();
        let file = MatrixFile {
            schema: SCHEMA_VERSION,
            doc_ids: self.doc_ids.clone(),
            runs: self.runs,
            values: (0..d * d)
                .map(|k| (k / d != k % d).then_some(self.values[k]))
                .collect(),
            metadata: self.metadata.clone(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, &file)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DeltaError> {
        let text = std::fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw["schema"]
            .as_u64()
            .ok_or_else(|| DeltaError::Invalid("missing `schema`".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(DeltaError::SchemaVersionMismatch {
                found: found as u32,
            });
        }
        let file: MatrixFile = serde_json::from_value(raw)?;
        let d = file.doc_ids.len();
        if file.values.len() != d * d {
            return Err(DeltaError::Invalid(format!(
                "{} values for {d} documents",
                file.values.len()
            )));
        }
        let mut values = Vec::with_capacity(d * d);
        for (k, v) in file.values.into_iter().enumerate() {
            let diagonal = k / d == k % d;
            match (diagonal, v) {
                (true, None) => values.push(f64::NAN),
                (false, Some(x)) if (-1.0..=1.0).contains(&x) => values.push(x),
                (true, Some(_)) => {
                    return Err(DeltaError::Invalid(format!(
                        "diagonal entry {k} is not null"
                    )))
                }
                (false, _) => {
                    return Err(DeltaError::Invalid(format!(
                        "entry ({}, {}) missing or outside [-1, 1]",
                        k / d,
                        k % d
                    )))
                }
            }
        }
        Self::from_values(file.doc_ids, file.runs, values, file.metadata)
    }
}

/// `matrix.json` -> `matrix.raw.jsonl`.
pub fn raw_path_for(matrix_path: &Path) -> PathBuf {
    let stem = matrix_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("matrix");
    matrix_path.with_file_name(format!("{stem}.raw.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawRecord {
    ZeroShot {
        run: usize,
        target: String,
        #[serde(flatten)]
        outcome: ProbeOutcome,
    },
    OneShot {
        run: usize,
        demo: String,
        target: String,
        #[serde(flatten)]
        outcome: ProbeOutcome,
    },
}

/// Writes every per-run probe, zero-shot first, in deterministic order.
pub fn save_raw(
    path: impl AsRef<Path>,
    p0: &ZeroShotPass,
    p1: &OneShotTensor,
) -> Result<(), DeltaError> {
    let mut out = BufWriter::new(File::create(path)?);
    for run in 0..p0.runs {
        for rec in &p0.records {
            let line = RawRecord::ZeroShot {
                run,
                target: rec.doc_id.clone(),
                outcome: rec.runs[run],
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    let d = p1.doc_ids.len();
    for run in 0..p1.runs {
        for i in 0..d {
            for j in 0..d {
                if let Some(outcome) = p1.get(run, i, j) {
                    let line = RawRecord::OneShot {
                        run,
                        demo: p1.doc_ids[i].clone(),
                        target: p1.doc_ids[j].clone(),
                        outcome: *outcome,
                    };
                    serde_json::to_writer(&mut out, &line)?;
                    out.write_all(b"\n")?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads raw probes back into passes, using the matrix for ids and provenance.
pub fn load_raw(
    path: impl AsRef<Path>,
    matrix: &DeltaMatrix,
) -> Result<(ZeroShotPass, OneShotTensor), DeltaError> {
    let d = matrix.len();
    let runs = matrix.runs();
    let mut zero: Vec<Vec<Option<ProbeOutcome>>> = vec![vec![None; runs]; d];
    let mut tensor = OneShotTensor {
        doc_ids: matrix.doc_ids().to_vec(),
        runs,
        cells: vec![None; runs * d * d],
        prompt_fingerprint: matrix.metadata.prompt_fingerprint.clone(),
        model: matrix.metadata.model.clone(),
    };
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(&line)? {
            RawRecord::ZeroShot {
                run,
                target,
                outcome,
            } => {
                let j = matrix.index_of(&target)?;
                *zero[j]
                    .get_mut(run)
                    .ok_or_else(|| DeltaError::Invalid(format!("run {run} out of range")))? =
                    Some(outcome);
            }
            RawRecord::OneShot {
                run,
                demo,
                target,
                outcome,
            } => {
                let (i, j) = (matrix.index_of(&demo)?, matrix.index_of(&target)?);
                if run >= runs || i == j {
                    return Err(DeltaError::Invalid(format!("bad one-shot record {line}")));
                }
                let at = tensor.offset(run, i, j);
                tensor.cells[at] = Some(outcome);
            }
        }
    }
    let records = zero
        .into_iter()
        .enumerate()
        .map(|(j, runs)| {
            let runs: Option<Vec<ProbeOutcome>> = runs.into_iter().collect();
            runs.map(|r| ZeroShotRecord::from_runs(matrix.doc_ids()[j].clone(), r))
                .ok_or_else(|| DeltaError::Invalid(format!("missing zero-shot runs for {j}")))
        })
        .collect::<Result<_, _>>()?;
    Ok((
        ZeroShotPass {
            records,
            runs,
            prompt_fingerprint: matrix.metadata.prompt_fingerprint.clone(),
            model: matrix.metadata.model.clone(),
        },
        tensor,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{
        Backend, ChatRequest, MockBackend, MockOutcome, MockRule, RawCompletion, ScoreRequest,
        TokenLogprob,
    };
    use std::sync::Arc;

    fn docs(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document::new(format!("d{i}"), format!("text {i}"), Label::ALL[i % 2]))
            .collect()
    }

    fn meta() -> MatrixMetadata {
        MatrixMetadata {
            model: "m".into(),
            prompt_fingerprint: "f".into(),
            created: None,
        }
    }

    /// Zero-shot confidence depends on the run: 0.4, 0.5, 0.6 for the gold label.
    struct RunStub;

    impl Backend for RunStub {
        fn complete(&self, req: &ChatRequest, _: bool) -> Result<RawCompletion, GatewayError> {
            let p = [0.4, 0.5, 0.6][req.run % 3];
            Ok(RawCompletion::text(format!(
                "dementia patient (P) with probability {p}"
            )))
        }
        fn continuation_logprobs(
            &self,
            _: &ScoreRequest,
        ) -> Result<Vec<TokenLogprob>, GatewayError> {
            Err(GatewayError::LogprobsUnsupported)
        }
        fn model_name(&self) -> &str {
            "stub"
        }
    }

    #[test]
    fn zero_shot_means() {
        let d = [Document::new("a", "x", Label::Patient)];
        let refs: Vec<&Document> = d.iter().collect();
        let gw = Gateway::new(Arc::new(RunStub), 0, 2).unwrap();
        let pass = zero_shot_pass(&gw, &refs, &PromptTemplate::full(), 3).unwrap();
        // (0.4 + 0.5 + 0.6) / 3
        assert!((pass.records[0].mean_p0 - 0.5).abs() < 1e-12);
        let single = zero_shot_pass(&gw, &refs, &PromptTemplate::full(), 1).unwrap();
        assert_eq!(single.records[0].mean_p0, 0.4);

        let rule = MockRule::new(MockOutcome::new(Label::Control, 0.5))
            .with_zero_shot("a", MockOutcome::new(Label::Patient, 0.7))
            .validated()
            .unwrap();
        let gw = Gateway::new(Arc::new(MockBackend::new(rule)), 0, 2).unwrap();
        let pass = zero_shot_pass(&gw, &refs, &PromptTemplate::full(), 3).unwrap();
        assert_eq!(pass.records[0].mean_p0, 0.7);
        assert!(matches!(
            zero_shot_pass(&gw, &refs, &PromptTemplate::full(), 0),
            Err(DeltaError::ZeroRuns)
        ));
    }

    #[test]
    fn one_shot_pair_count_and_lookup() {
        let d = docs(3);
        let refs: Vec<&Document> = d.iter().collect();
        let rule = MockRule::new(MockOutcome::new(Label::Control, 0.5))
            .with_one_shot("d0", "d1", MockOutcome::new(Label::Control, 0.9))
            .validated()
            .unwrap();
        let mock = Arc::new(MockBackend::new(rule));
        let gw = Gateway::new(mock.clone(), 0, 3).unwrap();
        let t = one_shot_pass(&gw, &refs, &PromptTemplate::full(), 2).unwrap();
        assert_eq!(mock.chat_calls(), 2 * 6);
        // d1 is a Control document, so the 0.9 Control answer is correct.
        assert_eq!(t.p1(1, 0, 1), Some(0.9));
        assert_eq!(t.p1(0, 1, 1), None);
        let one = &refs[..1];
        assert!(matches!(
            one_shot_pass(&gw, one, &PromptTemplate::full(), 1),
            Err(DeltaError::TooFewDocuments { .. })
        ));
    }

    #[test]
    fn null_case_and_label_gain_case() {
        let d = docs(4);
        let refs: Vec<&Document> = d.iter().collect();
        let template = PromptTemplate::full();

        // Every prompt gets the same answer: p1 == p0 so all gains vanish.
        let flat = MockRule::new(MockOutcome::new(Label::Patient, 0.8))
            .validated()
            .unwrap();
        let gw = Gateway::new(Arc::new(MockBackend::new(flat)), 0, 4).unwrap();
        let m = build_delta_matrix(
            &zero_shot_pass(&gw, &refs, &template, 2).unwrap(),
            &one_shot_pass(&gw, &refs, &template, 2).unwrap(),
        )
        .unwrap();
        assert!(m.entries().all(|(_, _, v)| v == 0.0));

        // p0 = 0.5 everywhere; p1 = 0.9 same-label, 0.3 cross-label.
        let mut rule = MockRule::new(MockOutcome::new(Label::Patient, 0.5));
        for a in &d {
            for b in &d {
                if a.id != b.id {
                    let p = if a.label == b.label { 0.9 } else { 0.3 };
                    rule =
                        rule.with_one_shot(&a.id, &b.id, MockOutcome::from_p_correct(b.label, p));
                }
            }
        }
        let gw = Gateway::new(Arc::new(MockBackend::new(rule.validated().unwrap())), 0, 4).unwrap();
        let m = build_delta_matrix(
            &zero_shot_pass(&gw, &refs, &template, 1).unwrap(),
            &one_shot_pass(&gw, &refs, &template, 1).unwrap(),
        )
        .unwrap();
        for (a, b, v) in m.entries() {
            let same = d.iter().find(|x| x.id == a).unwrap().label
                == d.iter().find(|x| x.id == b).unwrap().label;
            let want = if same { 0.4 } else { -0.2 };
            assert!((v - want).abs() < 1e-12, "{a}->{b}: {v}");
        }
    }

    #[test]
    fn fingerprint_mismatch() {
        let d = docs(2);
        let refs: Vec<&Document> = d.iter().collect();
        let gw = Gateway::new(
            Arc::new(MockBackend::new(MockRule::new(MockOutcome::new(
                Label::Patient,
                0.6,
            )))),
            0,
            1,
        )
        .unwrap();
        let p0 = zero_shot_pass(&gw, &refs, &PromptTemplate::full(), 1).unwrap();
        let p1 = one_shot_pass(&gw, &refs, &crate::prompt::ablation_grid()[0], 1).unwrap();
        assert!(matches!(
            build_delta_matrix(&p0, &p1),
            Err(DeltaError::FingerprintMismatch(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let vals = vec![0.0, 0.1, -1.0 / 3.0, 0.25, 0.0, 1.0, -1.0, 0.2 + 0.1, 0.0];
        let m = DeltaMatrix::from_values(ids, 3, vals, meta()).unwrap();
        m.save(&path).unwrap();
        let back = DeltaMatrix::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.get("a", "a").is_err());
        assert_eq!(back.get("a", "c").unwrap(), -1.0 / 3.0);
        assert!(matches!(
            back.get("a", "z"),
            Err(DeltaError::UnknownDocId(_))
        ));

        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema\": 1", "\"schema\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            DeltaMatrix::load(&path),
            Err(DeltaError::SchemaVersionMismatch { found: 2 })
        ));
        assert_eq!(raw_path_for(&path), dir.path().join("m.raw.jsonl"));
    }

    #[test]
    fn raw_records_rebuild_the_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let d = docs(4);
        let refs: Vec<&Document> = d.iter().collect();
        let gw = Gateway::new(Arc::new(RunStub), 0, 4).unwrap();
        let t = PromptTemplate::full();
        let p0 = zero_shot_pass(&gw, &refs, &t, 3).unwrap();
        let p1 = one_shot_pass(&gw, &refs, &t, 3).unwrap();
        let m = build_delta_matrix(&p0, &p1).unwrap();
        let raw = dir.path().join("m.raw.jsonl");
        save_raw(&raw, &p0, &p1).unwrap();
        let (q0, q1) = load_raw(&raw, &m).unwrap();
        assert_eq!(q0, p0);
        assert_eq!(q1, p1);
        assert_eq!(build_delta_matrix(&q0, &q1).unwrap(), m);
    }
}
