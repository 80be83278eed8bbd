//! Demonstration selection strategies.
//!
//! Every strategy scores the candidates in a pool (the target itself is never
//! a candidate), then keeps the best `n_shot`: the top `n_shot / 2` of each
//! label when balancing, the top `n_shot` overall otherwise. Scored strategies
//! return demonstrations by score descending, ties broken by ascending id.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Label};
use crate::delta::{DeltaError, DeltaMatrix};
use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::gateway::{Gateway, GatewayError};
use crate::prompt::continuation_request;
use crate::seed;

pub use crate::evaluator::{sweep_k, SweepK};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("balanced selection needs an even n_shot, got {0}")]
    OddShotCount(usize),
    #[error("need {needed} {label:?} demonstrations but the pool has {available}")]
    InsufficientPerLabel {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("need {needed} demonstrations but the pool has {available}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("k_neighbors = {k} exceeds the pool size {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("k_neighbors must be at least 1")]
    ZeroNeighbors,
    #[error("document {0:?} is missing from the delta matrix or embeddings")]
    UnknownDocId(String),
    #[error("document {0:?} cannot be scored against itself")]
    SelfPairing(String),
    #[error("strategy {strategy} needs {artifact}; produce it with `deltaknn {producer}`")]
    MissingArtifact {
        strategy: Strategy,
        artifact: &'static str,
        producer: &'static str,
    },
    #[error("backend does not expose token log-probabilities")]
    LogprobsUnsupported,
    #[error(transparent)]
    Gateway(GatewayError),
    #[error(transparent)]
    Embedding(EmbeddingError),
    #[error(transparent)]
    Delta(DeltaError),
}

impl From<EmbeddingError> for SelectionError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::KTooLarge { k, pool } => SelectionError::KTooLarge { k, pool },
            EmbeddingError::UnknownDocId(id) => SelectionError::UnknownDocId(id),
            other => SelectionError::Embedding(other),
        }
    }
}

impl From<DeltaError> for SelectionError {
    fn from(e: DeltaError) -> Self {
        match e {
            DeltaError::UnknownDocId(id) => SelectionError::UnknownDocId(id),
            DeltaError::SelfPairing(id) => SelectionError::SelfPairing(id),
            other => SelectionError::Delta(other),
        }
    }
}

impl From<GatewayError> for SelectionError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::LogprobsUnsupported => SelectionError::LogprobsUnsupported,
            other => SelectionError::Gateway(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    Random,
    TopK,
    DeltaKnn,
    Cone,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ZeroShot,
        Strategy::Random,
        Strategy::TopK,
        Strategy::DeltaKnn,
        Strategy::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::Random => "random",
            Strategy::TopK => "top_k",
            Strategy::DeltaKnn => "delta_knn",
            Strategy::Cone => "cone",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub n_shot: usize,
    pub balance: bool,
    pub k_neighbors: usize,
    pub seed: u64,
    /// Average the target-token log-probabilities instead of summing them.
    pub cone_normalize: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::DeltaKnn,
            n_shot: 4,
            balance: true,
            k_neighbors: 13,
            seed: 0,
            cone_normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub target_id: String,
    pub demo_ids: Vec<String>,
    /// Strategy-specific score per demonstration; `None` for random picks and
    /// for gain-KNN candidates whose only neighbor was themselves.
    pub scores: Vec<Option<f64>>,
    pub strategy: Strategy,
    /// Neighbors used by gain-KNN, most similar first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neighbor_ids: Vec<String>,
}

impl SelectionResult {
    fn empty(target: &Document, strategy: Strategy) -> Self {
        SelectionResult {
            target_id: target.id.clone(),
            demo_ids: Vec::new(),
            scores: Vec::new(),
            strategy,
            neighbor_ids: Vec::new(),
        }
    }
}

/// Score descending (missing scores last), then id ascending.
fn by_score(a: (&str, Option<f64>), b: (&str, Option<f64>)) -> Ordering {
    let by = match (a.1, b.1) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    by.then_with(|| a.0.cmp(b.0))
}

fn candidates<'a>(pool: &[&'a Document], target: &Document) -> Vec<&'a Document> {
    pool.iter().copied().filter(|d| d.id != target.id).collect()
}

fn check_counts(pool: &[&Document], config: &SelectionConfig) -> Result<(), SelectionError> {
    let n = config.n_shot;
    if config.balance {
        if n % 2 == 1 {
            return Err(SelectionError::OddShotCount(n));
        }
        for label in Label::ALL {
            let available = pool.iter().filter(|d| d.label == label).count();
            if available < n / 2 {
                return Err(SelectionError::InsufficientPerLabel {
                    label,
                    needed: n / 2,
                    available,
                });
            }
        }
    } else if pool.len() < n {
        return Err(SelectionError::PoolTooSmall {
            needed: n,
            available: pool.len(),
        });
    }
    Ok(())
}

/// Keeps the best `n_shot` scored candidates (per label when balancing) in rank order.
fn pick(
    target: &Document,
    mut scored: Vec<(&Document, Option<f64>)>,
    config: &SelectionConfig,
    neighbor_ids: Vec<String>,
) -> SelectionResult {
    scored.sort_by(|a, b| by_score((&a.0.id, a.1), (&b.0.id, b.1)));
    let n = config.n_shot;
    let mut chosen: Vec<(&Document, Option<f64>)> = if config.balance {
        let mut out: Vec<(&Document, Option<f64>)> = Vec::with_capacity(n);
        for label in Label::ALL {
            out.extend(scored.iter().filter(|(d, _)| d.label == label).take(n / 2));
        }
        out.sort_by(|a, b| by_score((&a.0.id, a.1), (&b.0.id, b.1)));
        out
    } else {
        scored.into_iter().take(n).collect()
    };
    chosen.truncate(n);
    SelectionResult {
        target_id: target.id.clone(),
        demo_ids: chosen.iter().map(|(d, _)| d.id.clone()).collect(),
        scores: chosen.iter().map(|(_, s)| *s).collect(),
        strategy: config.strategy,
        neighbor_ids,
    }
}

/// Mean gain of `demo_id` over `neighbor_ids`.
pub fn average_delta<S: AsRef<str>>(
    matrix: &DeltaMatrix,
    demo_id: &str,
    neighbor_ids: &[S],
) -> Result<f64, SelectionError> {
    if neighbor_ids.is_empty() {
        return Err(SelectionError::ZeroNeighbors);
    }
    let mut sum = 0.0;
    for n in neighbor_ids {
        let n = n.as_ref();
        if n == demo_id {
            return Err(SelectionError::SelfPairing(demo_id.to_string()));
        }
        sum += matrix.get(demo_id, n)?;
    }
    Ok(sum / neighbor_ids.len() as f64)
}

/// Picks the candidates with the highest mean gain over the target's nearest neighbors.
pub fn select_delta_knn(
    matrix: &DeltaMatrix,
    embeddings: &EmbeddingStore,
    target: &Document,
    pool: &[&Document],
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    let pool = candidates(pool, target);
    check_counts(&pool, config)?;
    if config.n_shot == 0 {
        return Ok(SelectionResult::empty(target, config.strategy));
    }
    if config.k_neighbors == 0 {
        return Err(SelectionError::ZeroNeighbors);
    }
    let ids: Vec<&str> = pool.iter().map(|d| d.id.as_str()).collect();
    let neighbors = embeddings.nearest_neighbors(&target.id, &ids, config.k_neighbors)?;
    let neighbor_ids: Vec<String> = neighbors.ids().into_iter().map(String::from).collect();
    let mut scored = Vec::with_capacity(pool.len());
    for doc in &pool {
        if !matrix.contains(&doc.id) {
            return Err(SelectionError::UnknownDocId(doc.id.clone()));
        }
        let others: Vec<&str> = neighbor_ids
            .iter()
            .map(String::as_str)
            .filter(|n| *n != doc.id)
            .collect();
        let score = if others.is_empty() {
            None
        } else {
            Some(average_delta(matrix, &doc.id, &others)?)
        };
        scored.push((*doc, score));
    }
    Ok(pick(target, scored, config, neighbor_ids))
}

/// Picks the candidates most cosine-similar to the target.
pub fn select_top_k_similarity(
    embeddings: &EmbeddingStore,
    target: &Document,
    pool: &[&Document],
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    let pool = candidates(pool, target);
    check_counts(&pool, config)?;
    if config.n_shot == 0 {
        return Ok(SelectionResult::empty(target, config.strategy));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for doc in &pool {
        scored.push((*doc, Some(embeddings.cosine_between(&doc.id, &target.id)?)));
    }
    Ok(pick(target, scored, config, Vec::new()))
}

/// Uniform sample without replacement, reproducible per `(config.seed, target id)`.
pub fn select_random(
    target: &Document,
    pool: &[&Document],
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    let mut pool = candidates(pool, target);
    check_counts(&pool, config)?;
    // Independent of the order the caller listed the pool in.
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = seed::rng(seed::derive_seed_for(
        config.seed,
        "random-demos",
        &target.id,
    ));
    let n = config.n_shot;
    let mut chosen: Vec<&Document> = if config.balance {
        let mut out = Vec::with_capacity(n);
        for label in Label::ALL {
            let of_label: Vec<&Document> =
                pool.iter().copied().filter(|d| d.label == label).collect();
            out.extend(of_label.choose_multiple(&mut rng, n / 2).copied());
        }
        out
    } else {
        pool.choose_multiple(&mut rng, n).copied().collect()
    };
    chosen.shuffle(&mut rng);
    Ok(SelectionResult {
        target_id: target.id.clone(),
        demo_ids: chosen.iter().map(|d| d.id.clone()).collect(),
        scores: vec![None; chosen.len()],
        strategy: config.strategy,
        neighbor_ids: Vec::new(),
    })
}

/// Negative conditional entropy of the target text given one demonstration:
/// the mean (or, unnormalized, summed) target-token log-probability.
pub fn cone_score(logprobs: &[f64], normalize: bool) -> f64 {
    let sum: f64 = logprobs.iter().sum();
    if normalize && !logprobs.is_empty() {
        sum / logprobs.len() as f64
    } else {
        sum
    }
}

/// Picks the candidates under which the target text is least surprising.
pub fn select_cone(
    gateway: &Gateway,
    target: &Document,
    pool: &[&Document],
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    let pool = candidates(pool, target);
    check_counts(&pool, config)?;
    if config.n_shot == 0 {
        return Ok(SelectionResult::empty(target, config.strategy));
    }
    let requests: Vec<_> = pool
        .iter()
        .map(|d| continuation_request(d, target))
        .collect();
    let mut scored = Vec::with_capacity(pool.len());
    for (doc, lps) in pool
        .iter()
        .zip(gateway.continuation_logprobs_all(&requests))
    {
        let lps: Vec<f64> = lps?.iter().map(|t| t.logprob).collect();
        scored.push((*doc, Some(cone_score(&lps, config.cone_normalize))));
    }
    Ok(pick(target, scored, config, Vec::new()))
}

/// Whatever a strategy may need; missing pieces surface as `MissingArtifact`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub matrix: Option<&'a DeltaMatrix>,
    pub embeddings: Option<&'a EmbeddingStore>,
    pub gateway: Option<&'a Gateway>,
}

impl<'a> Artifacts<'a> {
    fn embeddings(&self, strategy: Strategy) -> Result<&'a EmbeddingStore, SelectionError> {
        self.embeddings.ok_or(SelectionError::MissingArtifact {
            strategy,
            artifact: "document embeddings",
            producer: "embed",
        })
    }

    fn matrix(&self, strategy: Strategy) -> Result<&'a DeltaMatrix, SelectionError> {
        self.matrix.ok_or(SelectionError::MissingArtifact {
            strategy,
            artifact: "a delta matrix",
            producer: "build-matrix",
        })
    }

    /// Fails early when `strategy` cannot run with these artifacts.
    pub fn check(&self, strategy: Strategy) -> Result<(), SelectionError> {
        match strategy {
            Strategy::ZeroShot | Strategy::Random => Ok(()),
            Strategy::TopK => self.embeddings(strategy).map(|_| ()),
            Strategy::DeltaKnn => {
                self.matrix(strategy)?;
                self.embeddings(strategy).map(|_| ())
            }
            Strategy::Cone => self
                .gateway
                .map(|_| ())
                .ok_or(SelectionError::MissingArtifact {
                    strategy,
                    artifact: "a backend",
                    producer: "eval",
                }),
        }
    }
}

/// Dispatches on `config.strategy`.
pub fn select(
    artifacts: &Artifacts<'_>,
    target: &Document,
    pool: &[&Document],
    config: &SelectionConfig,
) -> Result<SelectionResult, SelectionError> {
    artifacts.check(config.strategy)?;
    match config.strategy {
        Strategy::ZeroShot => Ok(SelectionResult::empty(target, Strategy::ZeroShot)),
        Strategy::Random => select_random(target, pool, config),
        Strategy::TopK => {
            select_top_k_similarity(artifacts.embeddings(Strategy::TopK)?, target, pool, config)
        }
        Strategy::DeltaKnn => select_delta_knn(
            artifacts.matrix(Strategy::DeltaKnn)?,
            artifacts.embeddings(Strategy::DeltaKnn)?,
            target,
            pool,
            config,
        ),
        Strategy::Cone => select_cone(
            artifacts.gateway.expect("checked above"),
            target,
            pool,
            config,
        ),
    }
}
