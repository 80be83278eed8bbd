//! Reproducible synthetic corpora with a matching mock backend.
//!
//! Embeddings cluster by label. The mock answers zero-shot with a fixed
//! Patient-leaning guess, and a single demonstration shifts the probability of
//! the correct label up when it shares the target's label and down otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Document, Label, Split};
use crate::embedding::{EmbeddingSource, EmbeddingStore, EmbeddingVector};
use crate::gateway::{MockOutcome, MockRule};
use crate::seed;

const WORDS: &[&str] = &[
    "cookie",
    "girl",
    "boy",
    "woman",
    "jar",
    "stool",
    "plate",
    "dishcloth",
    "water",
    "window",
    "cupboard",
    "curtain",
    "dishes",
    "sink",
    "the",
    "is",
    "and",
    "um",
    "uh",
    "falling",
    "reaching",
    "drying",
    "overflowing",
    "mother",
    "kitchen",
    "outside",
    "taking",
    "there",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train_per_label: usize,
    pub test_per_label: usize,
    pub dim: usize,
    /// Half-width of the uniform noise added to each label centroid.
    pub noise: f64,
    pub seed: u64,
    /// Zero-shot answer is always Patient with this confidence.
    pub zero_shot_confidence: f64,
    pub same_label_gain: f64,
    pub cross_label_gain: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_per_label: 20,
            test_per_label: 10,
            dim: 16,
            noise: 0.5,
            seed: 0,
            zero_shot_confidence: 0.6,
            same_label_gain: 0.4,
            cross_label_gain: -0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub embeddings: EmbeddingStore,
    pub mock: MockRule,
}

impl SyntheticSpec {
    /// Zero-shot probability of the gold label.
    pub fn p0(&self, gold: Label) -> f64 {
        match gold {
            Label::Patient => self.zero_shot_confidence,
            Label::Control => 1.0 - self.zero_shot_confidence,
        }
    }

    /// One-shot probability of the target's gold label.
    pub fn p1(&self, demo: Label, target: Label) -> f64 {
        let gain = if demo == target {
            self.same_label_gain
        } else {
            self.cross_label_gain
        };
        (self.p0(target) + gain).clamp(0.0, 1.0)
    }

    pub fn generate(&self) -> Result<SyntheticData, CorpusError> {
        let mut rng = seed::rng(seed::derive_seed(self.seed, "synthetic", 0));
        let centroids: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut docs = Vec::new();
        let mut vectors = Vec::new();
        for (split, count) in [
            (Split::Train, self.train_per_label),
            (Split::Test, self.test_per_label),
        ] {
            for (li, label) in Label::ALL.into_iter().enumerate() {
                for i in 0..count {
                    let id = format!("{}-{}-{i:03}", split_tag(split), label.token());
                    let n_words = rng.random_range(6..16);
                    let text: Vec<&str> = (0..n_words)
                        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                        .collect();
                    let values: Vec<f64> = centroids[li]
                        .iter()
                        .map(|c| c + rng.random_range(-self.noise..=self.noise))
                        .collect();
                    vectors.push(EmbeddingVector::new(
                        id.clone(),
                        values,
                        EmbeddingSource::File,
                    ));
                    docs.push(Document::new(id, text.join(" "), label).with_split(split));
                }
            }
        }
        let corpus = Corpus::from_documents("synthetic", docs)?;
        let embeddings = EmbeddingStore::from_vectors(vectors)
            .expect("synthetic ids are unique and dimensions agree");
        let mock = self.mock_for(corpus.documents());
        Ok(SyntheticData {
            corpus,
            embeddings,
            mock,
        })
    }

    /// One-shot entries for every (train demo, any other document) pair.
    pub fn mock_for(&self, docs: &[Document]) -> MockRule {
        let mut rule = MockRule::new(MockOutcome::new(Label::Patient, self.zero_shot_confidence));
        rule.model_name = "synthetic-mock".into();
        for demo in docs.iter().filter(|d| d.split == Split::Train) {
            for target in docs.iter().filter(|t| t.id != demo.id) {
                rule = rule.with_one_shot(
                    &demo.id,
                    &target.id,
                    MockOutcome::from_p_correct(target.label, self.p1(demo.label, target.label)),
                );
            }
        }
        rule.validated()
            .expect("synthetic confidences lie in [0, 1]")
    }
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
        Split::Unassigned => "doc",
    }
}
