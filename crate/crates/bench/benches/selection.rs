use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deltaknn::embedding::{EmbeddingSource, EmbeddingVector};
use deltaknn::evaluator::{auc, ScoredExample};
use deltaknn::selector::select_delta_knn;
use deltaknn::{DeltaMatrix, Document, EmbeddingStore, Label, MatrixMetadata, SelectionConfig};
use rand::Rng;

const DIM: usize = 256;

struct Fixture {
    docs: Vec<Document>,
    target: Document,
    store: EmbeddingStore,
    matrix: DeltaMatrix,
}

fn fixture(d: usize) -> Fixture {
    let mut rng = deltaknn::seed::rng(0);
    let docs: Vec<Document> = (0..d)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Patient
            } else {
                Label::Control
            };
            Document::new(format!("doc{i:04}"), "text", label)
        })
        .collect();
    let target = Document::new("target", "text", Label::Patient);
    let vectors: Vec<EmbeddingVector> = docs
        .iter()
        .chain(std::iter::once(&target))
        .map(|doc| {
            let v = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            EmbeddingVector::new(doc.id.clone(), v, EmbeddingSource::File)
        })
        .collect();
    let store = EmbeddingStore::from_vectors(vectors).unwrap();
    let values = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let matrix = DeltaMatrix::from_values(
        docs.iter().map(|x| x.id.clone()).collect(),
        3,
        values,
        MatrixMetadata {
            model: "bench".into(),
            prompt_fingerprint: "bench".into(),
            created: None,
        },
    )
    .unwrap();
    Fixture {
        docs,
        target,
        store,
        matrix,
    }
}

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("nearest_neighbors");
    for d in [100, 400, 1600] {
        let f = fixture(d);
        let ids: Vec<&str> = f.docs.iter().map(|x| x.id.as_str()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| {
                f.store
                    .nearest_neighbors(black_box("target"), &ids, 13)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn gain_knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("select_delta_knn");
    let config = SelectionConfig::default();
    for d in [100, 400, 1600] {
        let f = fixture(d);
        let pool: Vec<&Document> = f.docs.iter().collect();
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| {
                select_delta_knn(&f.matrix, &f.store, black_box(&f.target), &pool, &config).unwrap()
            })
        });
    }
    group.finish();
}

fn auc_bench(c: &mut Criterion) {
    let mut rng = deltaknn::seed::rng(1);
    let mut group = c.benchmark_group("auc");
    for n in [100, 1000, 10000] {
        let examples: Vec<ScoredExample> = (0..n)
            .map(|i| {
                let gold = if i % 2 == 0 {
                    Label::Patient
                } else {
                    Label::Control
                };
                let p: f64 = rng.random_range(0.0..1.0);
                ScoredExample {
                    doc_id: format!("x{i}"),
                    gold,
                    predicted: if p >= 0.5 {
                        Label::Patient
                    } else {
                        Label::Control
                    },
                    p_patient: p,
                }
            })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| auc(black_box(&examples)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, knn, gain_knn, auc_bench);
criterion_main!(benches);
