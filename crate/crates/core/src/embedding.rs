//! Document embeddings and exact cosine nearest-neighbor search.
//!
//! Embedding files are JSONL, one `{"id": "...", "vector": [...]}` per line.
//! Remote embeddings come from `POST {base}/v1/embeddings` and are cached on
//! disk, one file per `sha256(model, text)`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::http::{endpoint, JsonClient};
use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {found} (for {id:?})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        id: String,
    },
    #[error("no embedding for document {0:?}")]
    UnknownDocId(String),
    #[error("k = {k} exceeds pool size {pool}")]
    KTooLarge { k: usize, pool: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("duplicate embedding for {0:?}")]
    DuplicateId(String),
    #[error("target {0:?} is part of its own neighbor pool")]
    TargetInPool(String),
    #[error("malformed embedding record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Transport(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Remote,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub doc_id: String,
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(doc_id: impl Into<String>, values: Vec<f64>, source: EmbeddingSource) -> Self {
        let normalized = (norm(&values) - 1.0).abs() <= 1e-6;
        EmbeddingVector {
            doc_id: doc_id.into(),
            values,
            source,
            normalized,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity. Errors on zero vectors or unequal dimensions.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
            id: String::new(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub target_id: String,
    /// Sorted by cosine descending, ties by ascending id.
    pub neighbors: Vec<(String, f64)>,
}

impl NeighborList {
    pub fn ids(&self) -> Vec<&str> {
        self.neighbors.iter().map(|(id, _)| id.as_str()).collect()
    }
}

/// Descending score, ascending id.
pub(crate) fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: Option<usize>,
    vectors: BTreeMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_vectors(vectors: Vec<EmbeddingVector>) -> Result<Self, EmbeddingError> {
        let mut store = Self::new();
        for v in vectors {
            store.insert(v)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, v: EmbeddingVector) -> Result<(), EmbeddingError> {
        match self.dim {
            Some(d) if d != v.values.len() => {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: d,
                    found: v.values.len(),
                    id: v.doc_id,
                })
            }
            _ => self.dim = Some(v.values.len()),
        }
        if self.vectors.contains_key(&v.doc_id) {
            return Err(EmbeddingError::DuplicateId(v.doc_id));
        }
        self.vectors.insert(v.doc_id.clone(), v);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        #[derive(Deserialize)]
        struct Record {
            id: String,
            vector: Vec<f64>,
        }
        let reader = BufReader::new(File::open(path)?);
        let mut store = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| EmbeddingError::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            store.insert(EmbeddingVector::new(
                rec.id,
                rec.vector,
                EmbeddingSource::File,
            ))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let mut out = BufWriter::new(File::create(path)?);
        for v in self.vectors.values() {
            let line = json!({"id": v.doc_id, "vector": v.values});
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&EmbeddingVector, EmbeddingError> {
        self.vectors
            .get(id)
            .ok_or_else(|| EmbeddingError::UnknownDocId(id.to_string()))
    }

    pub fn cosine_between(&self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        cosine(&self.get(a)?.values, &self.get(b)?.values)
    }

    /// The `k` pool members most cosine-similar to `target_id`.
    pub fn nearest_neighbors<S: AsRef<str>>(
        &self,
        target_id: &str,
        pool: &[S],
        k: usize,
    ) -> Result<NeighborList, EmbeddingError> {
        if k > pool.len() {
            return Err(EmbeddingError::KTooLarge {
                k,
                pool: pool.len(),
            });
        }
        let target = &self.get(target_id)?.values;
        let mut scored = Vec::with_capacity(pool.len());
        for id in pool {
            let id = id.as_ref();
            if id == target_id {
                return Err(EmbeddingError::TargetInPool(id.to_string()));
            }
            scored.push((id.to_string(), cosine(target, &self.get(id)?.values)?));
        }
        scored.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        scored.truncate(k);
        Ok(NeighborList {
            target_id: target_id.to_string(),
            neighbors: scored,
        })
    }
}

/// Client for a remote embeddings endpoint with an on-disk cache.
#[derive(Debug)]
pub struct EmbeddingClient {
    client: JsonClient,
    base_url: String,
    model_name: String,
    cache_dir: PathBuf,
    batch_size: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    vector: Vec<f64>,
}

impl EmbeddingClient {
    pub fn new(
        base_url: impl Into<String>,
        model_name: impl Into<String>,
        cache_dir: impl Into<PathBuf>,
        api_key_env: &str,
        timeout: Duration,
        max_retries: usize,
    ) -> Self {
        EmbeddingClient {
            client: JsonClient::new(
                timeout,
                api_key_env,
                max_retries,
                Duration::from_millis(500),
            ),
            base_url: base_url.into(),
            model_name: model_name.into(),
            cache_dir: cache_dir.into(),
            batch_size: 64,
        }
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn cache_key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.model_name.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn cache_path(&self, text: &str) -> PathBuf {
        self.cache_dir
            .join(format!("{}.json", self.cache_key(text)))
    }

    fn cached(&self, text: &str) -> Option<Vec<f64>> {
        let data = fs::read_to_string(self.cache_path(text)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&data).ok()?;
        (entry.model == self.model_name).then_some(entry.vector)
    }

    fn store(&self, text: &str, vector: &[f64]) -> Result<(), EmbeddingError> {
        fs::create_dir_all(&self.cache_dir)?;
        let path = self.cache_path(text);
        let tmp = path.with_extension("json.tmp");
        let entry = CacheEntry {
            model: self.model_name.clone(),
            vector: vector.to_vec(),
        };
        fs::write(
            &tmp,
            serde_json::to_vec(&entry).map_err(std::io::Error::from)?,
        )?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Embeds `texts` in order; cached texts are not sent.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut out: Vec<Option<Vec<f64>>> = texts.iter().map(|t| self.cached(t)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(self.batch_size) {
            let input: Vec<&str> = chunk.iter().map(|&i| texts[i]).collect();
            let body = json!({"model": self.model_name, "input": input});
            let v = self
                .client
                .post(&endpoint(&self.base_url, "v1/embeddings"), &body)?;
            let data = v["data"]
                .as_array()
                .ok_or_else(|| GatewayError::MalformedResponse("missing `data` array".into()))?;
            if data.len() != chunk.len() {
                return Err(GatewayError::MalformedResponse(format!(
                    "asked for {} embeddings, got {}",
                    chunk.len(),
                    data.len()
                ))
                .into());
            }
            // Servers may reorder; `index` is authoritative when present.
            for (pos, item) in data.iter().enumerate() {
                let slot = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
                let &i = chunk.get(slot).ok_or_else(|| {
                    GatewayError::MalformedResponse(format!("embedding index {slot} out of range"))
                })?;
                let vector: Vec<f64> = serde_json::from_value(item["embedding"].clone())
                    .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
                self.store(texts[i], &vector)?;
                out[i] = Some(vector);
            }
        }
        let vectors: Vec<Vec<f64>> = out
            .into_iter()
            .map(|v| v.ok_or_else(|| GatewayError::MalformedResponse("missing embedding".into())))
            .collect::<Result<_, _>>()?;
        if let Some(first) = vectors.first() {
            for v in &vectors {
                if v.len() != first.len() {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: first.len(),
                        found: v.len(),
                        id: String::new(),
                    });
                }
            }
        }
        Ok(vectors)
    }

    pub fn embed_documents<'a>(
        &self,
        docs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let (ids, texts): (Vec<&str>, Vec<&str>) = docs.into_iter().unzip();
        let vectors = self.embed_texts(&texts)?;
        Ok(ids
            .into_iter()
            .zip(vectors)
            .map(|(id, v)| EmbeddingVector::new(id, v, EmbeddingSource::Remote))
            .collect())
    }
}
