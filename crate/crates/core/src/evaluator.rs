//! Metrics, run aggregation and experiment drivers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{make_folds, Corpus, CorpusError, Document, Label, Split};
use crate::delta::DeltaMatrix;
use crate::embedding::EmbeddingStore;
use crate::gateway::{ChatRequest, Gateway, GatewayError, ParseStatus};
use crate::prompt::{build_prompt, PromptError, PromptTemplate};
use crate::seed;
use crate::selector::{
    select, Artifacts, SelectionConfig, SelectionError, SelectionResult, Strategy,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one Patient and one Control example")]
    DegenerateLabels,
    #[error("no examples to score")]
    Empty,
    #[error("classification of {target:?} failed in run {run}: {source}")]
    Gateway {
        target: String,
        run: usize,
        #[source]
        source: GatewayError,
    },
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub doc_id: String,
    pub gold: Label,
    pub predicted: Label,
    pub p_patient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub acc: f64,
    pub auc: f64,
    pub sen: f64,
    pub spe: f64,
}

/// Mann-Whitney AUC of `p_patient` with half credit for ties, via mid-ranks.
pub fn auc(examples: &[ScoredExample]) -> Result<f64, EvalError> {
    let n_pos = examples.iter().filter(|e| e.gold == Label::Patient).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| examples[a].p_patient.total_cmp(&examples[b].p_patient));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len()
            && examples[order[end]].p_patient == examples[order[start]].p_patient
        {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let mid = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| examples[i].gold == Label::Patient)
            .count();
        rank_sum_pos += mid * pos_in_group as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn score_run(examples: &[ScoredExample]) -> Result<RunMetrics, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let auc = auc(examples)?;
    let count = |gold: Label, pred: Label| {
        examples
            .iter()
            .filter(|e| e.gold == gold && e.predicted == pred)
            .count() as f64
    };
    let tp = count(Label::Patient, Label::Patient);
    let fn_ = count(Label::Patient, Label::Control);
    let tn = count(Label::Control, Label::Control);
    let fp = count(Label::Control, Label::Patient);
    Ok(RunMetrics {
        acc: (tp + tn) / examples.len() as f64,
        auc,
        sen: tp / (tp + fn_),
        spe: tn / (tn + fp),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_run: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(per_run: Vec<f64>) -> Self {
        let n = per_run.len() as f64;
        let mean = per_run.iter().sum::<f64>() / n;
        let std = if per_run.len() < 2 {
            0.0
        } else {
            (per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MetricSummary { mean, std, per_run }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Examples scored per run.
    pub n: usize,
    pub runs: usize,
    pub acc: MetricSummary,
    pub auc: MetricSummary,
    pub sen: MetricSummary,
    pub spe: MetricSummary,
    /// Always `"sample"`: the standard deviation divides by `runs - 1`.
    pub std_kind: String,
    pub single_run: bool,
    pub fallback_parse_count: usize,
}

/// Mean and sample standard deviation of each metric across runs.
pub fn aggregate(runs: &[RunMetrics], n: usize, fallback_parse_count: usize) -> EvalReport {
    let col = |f: fn(&RunMetrics) -> f64| MetricSummary::from_values(runs.iter().map(f).collect());
    EvalReport {
        n,
        runs: runs.len(),
        acc: col(|r| r.acc),
        auc: col(|r| r.auc),
        sen: col(|r| r.sen),
        spe: col(|r| r.spe),
        std_kind: "sample".into(),
        single_run: runs.len() == 1,
        fallback_parse_count,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Aligned text table, metrics as percentages with run standard deviation.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows
        .iter()
        .map(|(name, _)| name.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}\n",
        "method", "ACC", "AUC", "SEN", "SPE"
    );
    let cell = |m: &MetricSummary| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std);
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}",
            name,
            cell(&r.acc),
            cell(&r.auc),
            cell(&r.sen),
            cell(&r.spe)
        );
    }
    out
}

/// One classified target, as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub run: usize,
    pub id: String,
    pub gold: Label,
    pub pred: Label,
    pub p_patient: f64,
    pub demos: Vec<String>,
    pub raw: String,
    pub parse_status: ParseStatus,
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<(), EvalError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Train-split documents form the pool; test-split documents are classified.
    Holdout,
    /// Stratified folds over the train split; each fold is classified with the
    /// remaining folds as pool.
    CrossValidation { n_folds: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

/// A pool of demonstration candidates and the targets classified against it.
#[derive(Debug, Clone)]
pub struct Fold<'a> {
    pub pool: Vec<&'a Document>,
    pub targets: Vec<&'a Document>,
}

/// Splits `train` into stratified folds.
pub fn cv_folds<'a>(
    train: &[&'a Document],
    n_folds: usize,
    seed: u64,
) -> Result<Vec<Fold<'a>>, EvalError> {
    let assignment = make_folds(train, n_folds, seed)?;
    Ok((0..n_folds)
        .map(|f| {
            let (pool, targets) = assignment.partition(train, f);
            Fold { pool, targets }
        })
        .collect())
}

pub struct Experiment<'a> {
    pub gateway: &'a Gateway,
    pub template: PromptTemplate,
    pub matrix: Option<&'a DeltaMatrix>,
    pub embeddings: Option<&'a EmbeddingStore>,
    pub runs: usize,
}

impl<'a> Experiment<'a> {
    fn artifacts(&self) -> Artifacts<'a> {
        Artifacts {
            matrix: self.matrix,
            embeddings: self.embeddings,
            gateway: Some(self.gateway),
        }
    }

    /// Resolves `spec` against a corpus into folds.
    pub fn folds<'c>(
        corpus: &'c Corpus,
        spec: SplitSpec,
        seed: u64,
    ) -> Result<Vec<Fold<'c>>, EvalError> {
        let train = corpus.in_split(Split::Train);
        match spec {
            SplitSpec::Holdout => {
                let targets = corpus.in_split(Split::Test);
                if targets.is_empty() {
                    return Err(EvalError::InvalidConfig(
                        "holdout evaluation needs documents in the test split".into(),
                    ));
                }
                Ok(vec![Fold {
                    pool: train,
                    targets,
                }])
            }
            SplitSpec::CrossValidation { n_folds } => cv_folds(&train, n_folds, seed),
        }
    }

    pub fn run_split(
        &self,
        corpus: &Corpus,
        spec: SplitSpec,
        config: &SelectionConfig,
    ) -> Result<ExperimentOutput, EvalError> {
        self.evaluate(&Self::folds(corpus, spec, config.seed)?, config, None)
    }

    /// Holdout-style evaluation of `targets` against `pool`.
    pub fn run(
        &self,
        targets: &[&Document],
        pool: &[&Document],
        config: &SelectionConfig,
    ) -> Result<ExperimentOutput, EvalError> {
        let fold = Fold {
            pool: pool.to_vec(),
            targets: targets.to_vec(),
        };
        self.evaluate(&[fold], config, None)
    }

    fn selections(
        &self,
        folds: &[Fold<'_>],
        config: &SelectionConfig,
    ) -> Result<Vec<Vec<SelectionResult>>, EvalError> {
        let artifacts = self.artifacts();
        folds
            .iter()
            .map(|fold| {
                fold.targets
                    .iter()
                    .map(|t| select(&artifacts, t, &fold.pool, config).map_err(EvalError::from))
                    .collect()
            })
            .collect()
    }

    /// Classifies every target of every fold `runs` times. With `order`, each
    /// selected demonstration list is permuted by it before prompting.
    pub fn evaluate(
        &self,
        folds: &[Fold<'_>],
        config: &SelectionConfig,
        order: Option<&[usize]>,
    ) -> Result<ExperimentOutput, EvalError> {
        if self.runs == 0 {
            return Err(EvalError::InvalidConfig("runs must be at least 1".into()));
        }
        self.artifacts().check(config.strategy)?;
        // Only random selection varies by run.
        let per_run_selection = config.strategy == Strategy::Random;
        let fixed = if per_run_selection {
            None
        } else {
            Some(self.selections(folds, config)?)
        };

        let mut run_metrics = Vec::with_capacity(self.runs);
        let mut predictions = Vec::new();
        let mut fallback = 0;
        let mut n = 0;
        for run in 0..self.runs {
            let drawn;
            let selections = match &fixed {
                Some(s) => s,
                None => {
                    let run_config = SelectionConfig {
                        seed: seed::derive_seed(config.seed, "random-selection", run as u64),
                        ..config.clone()
                    };
                    drawn = self.selections(folds, &run_config)?;
                    &drawn
                }
            };
            let mut requests: Vec<ChatRequest> = Vec::new();
            let mut targets: Vec<&Document> = Vec::new();
            for (fold, fold_sel) in folds.iter().zip(selections) {
                let by_id: HashMap<&str, &Document> =
                    fold.pool.iter().map(|d| (d.id.as_str(), *d)).collect();
                for (target, sel) in fold.targets.iter().zip(fold_sel) {
                    let mut demos: Vec<&Document> =
                        sel.demo_ids.iter().map(|id| by_id[id.as_str()]).collect();
                    if let Some(order) = order {
                        if order.len() != demos.len() {
                            return Err(EvalError::InvalidConfig(format!(
                                "ordering of length {} applied to {} demonstrations",
                                order.len(),
                                demos.len()
                            )));
                        }
                        demos = order.iter().map(|&i| demos[i]).collect();
                    }
                    requests.push(build_prompt(&self.template, &demos, target)?.to_request(run));
                    targets.push(target);
                }
            }
            let mut examples = Vec::with_capacity(requests.len());
            for ((result, target), req) in self
                .gateway
                .classify_all(&requests)
                .into_iter()
                .zip(&targets)
                .zip(&requests)
            {
                let pred = result.map_err(|source| EvalError::Gateway {
                    target: target.id.clone(),
                    run,
                    source,
                })?;
                if pred.parse_status == ParseStatus::Fallback {
                    fallback += 1;
                }
                examples.push(ScoredExample {
                    doc_id: target.id.clone(),
                    gold: target.label,
                    predicted: pred.label,
                    p_patient: pred.p_patient(),
                });
                predictions.push(PredictionRecord {
                    run,
                    id: target.id.clone(),
                    gold: target.label,
                    pred: pred.label,
                    p_patient: pred.p_patient(),
                    demos: req.demo_ids.clone(),
                    raw: pred.raw.text,
                    parse_status: pred.parse_status,
                });
            }
            n = examples.len();
            run_metrics.push(score_run(&examples)?);
        }
        Ok(ExperimentOutput {
            report: aggregate(&run_metrics, n, fallback),
            predictions,
        })
    }

    /// One report per shot count; `0` runs zero-shot.
    pub fn sweep_nshot(
        &self,
        folds: &[Fold<'_>],
        config: &SelectionConfig,
        n_values: &[usize],
    ) -> Result<Vec<(usize, EvalReport)>, EvalError> {
        n_values
            .iter()
            .map(|&n| {
                let cfg = SelectionConfig {
                    n_shot: n,
                    strategy: if n == 0 {
                        Strategy::ZeroShot
                    } else {
                        config.strategy
                    },
                    ..config.clone()
                };
                Ok((n, self.evaluate(folds, &cfg, None)?.report))
            })
            .collect()
    }

    /// Evaluates every ordering of the selected four demonstrations.
    pub fn ordering_study(
        &self,
        folds: &[Fold<'_>],
        config: &SelectionConfig,
    ) -> Result<OrderingStudy, EvalError> {
        if config.n_shot != 4 {
            return Err(EvalError::InvalidConfig(format!(
                "the ordering study needs n_shot = 4, got {}",
                config.n_shot
            )));
        }
        let mut entries = Vec::with_capacity(24);
        for perm in permutations(4) {
            let report = self.evaluate(folds, config, Some(&perm))?.report;
            entries.push(OrderingEntry {
                order: perm,
                acc: report.acc.mean,
            });
        }
        let accs: Vec<f64> = entries.iter().map(|e| e.acc).collect();
        let summary = MetricSummary::from_values(accs.clone());
        Ok(OrderingStudy {
            min: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: summary.mean,
            std: summary.std,
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingEntry {
    /// Positions in the score-ordered selection, in prompt order.
    pub order: Vec<usize>,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingStudy {
    pub entries: Vec<OrderingEntry>,
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepK {
    pub reports: Vec<(usize, EvalReport)>,
    /// Highest mean accuracy; ties go to the smallest k.
    pub best_k: usize,
}

/// Cross-validates gain-KNN selection on `train` for each neighbor count.
pub fn sweep_k(
    experiment: &Experiment<'_>,
    train: &[&Document],
    config: &SelectionConfig,
    k_range: &[usize],
    n_folds: usize,
    seed: u64,
) -> Result<SweepK, EvalError> {
    if k_range.is_empty() {
        return Err(EvalError::InvalidConfig("empty k range".into()));
    }
    let folds = cv_folds(train, n_folds, seed)?;
    let smallest_pool = folds.iter().map(|f| f.pool.len()).min().unwrap_or(0);
    let mut reports = Vec::with_capacity(k_range.len());
    for &k in k_range {
        if k == 0 || k > smallest_pool {
            return Err(SelectionError::KTooLarge {
                k,
                pool: smallest_pool,
            }
            .into());
        }
        let cfg = SelectionConfig {
            strategy: Strategy::DeltaKnn,
            k_neighbors: k,
            ..config.clone()
        };
        reports.push((k, experiment.evaluate(&folds, &cfg, None)?.report));
    }
    let mut best = &reports[0];
    for r in &reports[1..] {
        if r.1.acc.mean > best.1.acc.mean || (r.1.acc.mean == best.1.acc.mean && r.0 < best.0) {
            best = r;
        }
    }
    let best_k = best.0;
    Ok(SweepK { reports, best_k })
}
