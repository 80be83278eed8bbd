//! Demonstration selection for few-shot in-context learning.
//!
//! The crate builds a matrix of empirical one-shot gains (how much a single
//! demonstration raises a model's probability of the correct label over its
//! zero-shot answer), then picks demonstrations for a new target by averaging
//! those gains over the target's nearest neighbors in embedding space.
//!
//! Module map:
//!
//! - [`corpus`]: labeled documents, loading, stratified folds.
//! - [`gateway`]: chat-completion backends (HTTP or mock) and prediction parsing.
//! - [`embedding`]: embedding loading, remote embedding with a disk cache, cosine KNN.
//! - [`prompt`]: prompt components, demonstration formatting, ablation grid.
//! - [`delta`]: zero-shot / one-shot probing and the gain matrix.
//! - [`selector`]: zero-shot, random, top-k, gain-KNN and conditional-entropy selection.
//! - [`evaluator`]: metrics, run aggregation, experiments and sweeps.
//! - [`synthetic`]: reproducible synthetic corpora and mocks for demos and tests.

pub mod corpus;
pub mod delta;
pub mod embedding;
pub mod evaluator;
pub mod gateway;
pub mod prompt;
pub mod seed;
pub mod selector;
pub mod synthetic;

pub use corpus::{Corpus, CorpusError, CorpusFormat, Document, FoldAssignment, Label, Split};
pub use delta::{DeltaError, DeltaMatrix, MatrixMetadata, OneShotTensor, ZeroShotRecord};
pub use embedding::{EmbeddingError, EmbeddingStore, EmbeddingVector, NeighborList};
pub use evaluator::{EvalError, EvalReport, Experiment, RunMetrics, ScoredExample, SplitSpec};
pub use gateway::{
    Backend, BackendConfig, BackendKind, ChatRequest, Gateway, GatewayError, LabeledPrediction,
    MockBackend, MockRule, ParseStatus, RawCompletion,
};
pub use prompt::{PromptError, PromptInstance, PromptTemplate};
pub use selector::{SelectionConfig, SelectionError, SelectionResult, Strategy};
