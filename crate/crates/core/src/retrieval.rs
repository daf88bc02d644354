//! In-context example selection: MCQ encodings, cosine similarity, exact
//! top-k search, and seeded random selection.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Mcq, TopicLevel};
use crate::seed;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding is empty")]
    EmptyVector,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot sample {k} items from a pool of {pool}")]
    SampleTooLarge { k: usize, pool: usize },
    #[error("target {0} is part of its own example pool")]
    TargetInPool(String),
    #[error("no embedding for mcq {0}")]
    MissingEmbedding(String),
    #[error("no precomputed vector for text hash {0}")]
    MissingVector(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("vector file: {0}")]
    VectorFile(String),
    #[error("embedding cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which parts of an MCQ go into its encoding text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    StemOnly,
    StemKey,
    #[default]
    StemKeyExplanation,
}

impl EncodingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncodingMode::StemOnly => "stem_only",
            EncodingMode::StemKey => "stem_key",
            EncodingMode::StemKeyExplanation => "stem_key_explanation",
        }
    }
}

/// Newline-joined stem / key / explanation according to `mode`. A missing
/// explanation degrades `StemKeyExplanation` to `StemKey`.
pub fn encoding_text(mcq: &Mcq, mode: EncodingMode) -> String {
    match (mode, &mcq.key_explanation) {
        (EncodingMode::StemOnly, _) => mcq.stem.clone(),
        (EncodingMode::StemKey, _) | (EncodingMode::StemKeyExplanation, None) => {
            format!("{}\n{}", mcq.stem, mcq.key)
        }
        (EncodingMode::StemKeyExplanation, Some(expl)) => {
            format!("{}\n{}\n{}", mcq.stem, mcq.key, expl)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = RetrievalError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Vec<f64> {
        v.0
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    cosine(a.values(), b.values())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub id: String,
    pub similarity: f64,
}

/// Heap entry ordered so that the *worst* kept candidate sits on top:
/// lower similarity is worse, and among equal similarities the larger
/// index is worse.
struct Ranked {
    similarity: f64,
    index: usize,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .similarity
            .total_cmp(&self.similarity)
            .then(self.index.cmp(&other.index))
    }
}

/// Exact top-`k` by cosine similarity over `(index, vector)` candidates.
/// Output is sorted by descending similarity, ties by ascending index.
pub fn top_k<'a, I>(query: &[f64], candidates: I, k: usize) -> Result<Vec<(usize, f64)>, RetrievalError>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (index, vector) in candidates {
        let similarity = cosine(query, vector)?;
        heap.push(Ranked { similarity, index });
        if heap.len() > k {
            heap.pop();
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|r| (r.index, r.similarity))
        .collect())
}

/// Embeddings for a set of MCQs under one encoding mode.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    pub mode: EncodingMode,
    vectors: HashMap<String, EmbeddingVector>,
    dim: Option<usize>,
}

impl EmbeddingStore {
    pub fn new(mode: EncodingMode) -> Self {
        Self {
            mode,
            vectors: HashMap::new(),
            dim: None,
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: EmbeddingVector) -> Result<(), RetrievalError> {
        match self.dim {
            Some(d) if d != vector.dim() => {
                return Err(RetrievalError::DimensionMismatch {
                    left: d,
                    right: vector.dim(),
                })
            }
            _ => self.dim = Some(vector.dim()),
        }
        self.vectors.insert(id.into(), vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&EmbeddingVector, RetrievalError> {
        self.vectors
            .get(id)
            .ok_or_else(|| RetrievalError::MissingEmbedding(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnSelection {
    pub neighbors: Vec<NeighborResult>,
    /// Set when topic exclusion left nothing to choose from.
    pub empty_after_filter: bool,
}

/// Top-`k` pool members by cosine similarity to `target`. When
/// `exclude_same_topic` is set, members sharing the target's label at that
/// level are dropped before ranking.
pub fn knn_select(
    target: &Mcq,
    pool: &[Mcq],
    k: usize,
    store: &EmbeddingStore,
    exclude_same_topic: Option<TopicLevel>,
) -> Result<KnnSelection, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if pool.iter().any(|m| m.id == target.id) {
        return Err(RetrievalError::TargetInPool(target.id.clone()));
    }
    let query = store.get(&target.id)?;
    let mut candidates = Vec::with_capacity(pool.len());
    for (index, mcq) in pool.iter().enumerate() {
        if let Some(level) = exclude_same_topic {
            if mcq.topic(level) == target.topic(level) {
                continue;
            }
        }
        candidates.push((index, store.get(&mcq.id)?.values()));
    }
    if candidates.is_empty() {
        return Ok(KnnSelection {
            neighbors: Vec::new(),
            empty_after_filter: true,
        });
    }
    let ranked = top_k(query.values(), candidates, k)?;
    Ok(KnnSelection {
        neighbors: ranked
            .into_iter()
            .map(|(i, similarity)| NeighborResult {
                id: pool[i].id.clone(),
                similarity,
            })
            .collect(),
        empty_after_filter: false,
    })
}

/// Uniform sample of `k` pool members without replacement.
pub fn random_select<T: Clone>(pool: &[T], k: usize, seed: u64) -> Result<Vec<T>, RetrievalError> {
    if k > pool.len() {
        return Err(RetrievalError::SampleTooLarge { k, pool: pool.len() });
    }
    let mut rng = seed::rng(seed);
    Ok(pool.choose_multiple(&mut rng, k).cloned().collect())
}

/// Content hash used to key vectors by text.
pub fn text_hash(text: &str) -> String {
    seed::sha256_hex(text.as_bytes())
}

/// Source of text embeddings.
pub trait EmbeddingProvider {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> &str;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError>;
}

/// Deterministic hashed bag-of-words embedding. Needs no network or model;
/// similar wording gives similar vectors. Used for offline runs and demos.
#[derive(Debug, Clone)]
pub struct LexicalEmbedder {
    dim: usize,
    id: String,
}

impl LexicalEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            id: format!("lexical-v1-{dim}"),
        }
    }

    fn bump(&self, values: &mut [f64], feature: &str, weight: f64) {
        let h = seed::derive(0x1e71ca1, feature);
        let slot = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        values[slot] += sign * weight;
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        for w in &words {
            // digits carry little topical signal
            let weight = if w.chars().all(|c| c.is_ascii_digit()) { 0.25 } else { 1.0 };
            self.bump(&mut values, &format!("w:{w}"), weight);
        }
        for pair in words.windows(2) {
            self.bump(&mut values, &format!("b:{} {}", pair[0], pair[1]), 0.5);
        }
        if values.iter().all(|v| *v == 0.0) {
            values[0] = 1.0;
        }
        EmbeddingVector(values)
    }
}

impl EmbeddingProvider for LexicalEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Vectors read from a vector file, looked up by text hash.
#[derive(Debug, Clone)]
pub struct PrecomputedVectors {
    id: String,
    dim: usize,
    rows: HashMap<String, EmbeddingVector>,
}

impl PrecomputedVectors {
    /// Vector file layout: a `dim count` header line, then `count` rows of
    /// `<text sha256 hex> v1 v2 ... v_dim`, whitespace separated.
    pub fn parse(id: impl Into<String>, content: &str) -> Result<Self, RetrievalError> {
        let bad = |m: String| RetrievalError::VectorFile(m);
        let mut lines = content.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut parts = header.split_whitespace();
        let dim: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| bad("header dim".into()))?;
        let count: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| bad("header count".into()))?;
        let mut rows = HashMap::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let mut fields = line.split_whitespace();
            let hash = fields.next().ok_or_else(|| bad(format!("row {}: empty", i + 1)))?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if values.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    left: dim,
                    right: values.len(),
                });
            }
            rows.insert(hash.to_string(), EmbeddingVector::new(values)?);
        }
        if rows.len() != count {
            return Err(bad(format!("header says {count} rows, found {}", rows.len())));
        }
        Ok(Self {
            id: id.into(),
            dim,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let content = fs::read_to_string(path)?;
        let id = format!("precomputed-{}", &seed::sha256_hex(content.as_bytes())[..16]);
        Self::parse(id, &content)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingProvider for PrecomputedVectors {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        texts
            .iter()
            .map(|t| {
                let h = text_hash(t);
                self.rows
                    .get(&h)
                    .cloned()
                    .ok_or(RetrievalError::MissingVector(h))
            })
            .collect()
    }
}

/// Renders rows into the vector file layout. Rows are written in the given
/// order; duplicate hashes are dropped after the first.
pub fn write_vector_file(rows: &[(String, EmbeddingVector)]) -> Result<String, RetrievalError> {
    let mut seen = std::collections::HashSet::new();
    let unique: Vec<_> = rows.iter().filter(|(h, _)| seen.insert(h.clone())).collect();
    let dim = unique.first().map(|(_, v)| v.dim()).unwrap_or(0);
    let mut out = format!("{dim} {}\n", unique.len());
    for (hash, vector) in unique {
        if vector.dim() != dim {
            return Err(RetrievalError::DimensionMismatch {
                left: dim,
                right: vector.dim(),
            });
        }
        out.push_str(hash);
        for v in vector.values() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(feature = "remote")]
pub use remote::RemoteEmbedder;

#[cfg(feature = "remote")]
mod remote {
    use super::*;

    /// Embedding endpoint speaking the common `POST {base}/embeddings` shape.
    pub struct RemoteEmbedder {
        id: String,
        model: String,
        url: String,
        api_key: Option<String>,
        http: reqwest::blocking::Client,
    }

    impl RemoteEmbedder {
        pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
            Self {
                id: format!("remote:{model}"),
                model: model.to_string(),
                url: format!("{}/embeddings", base_url.trim_end_matches('/')),
                api_key,
                http: reqwest::blocking::Client::new(),
            }
        }
    }

    #[derive(Deserialize)]
    struct EmbeddingResponse {
        data: Vec<EmbeddingDatum>,
    }

    #[derive(Deserialize)]
    struct EmbeddingDatum {
        index: usize,
        embedding: Vec<f64>,
    }

    impl EmbeddingProvider for RemoteEmbedder {
        fn id(&self) -> &str {
            &self.id
        }

        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
            let mut req = self
                .http
                .post(&self.url)
                .json(&serde_json::json!({ "model": self.model, "input": texts }));
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| RetrievalError::Provider(e.to_string()))?;
            let mut body: EmbeddingResponse = resp
                .json()
                .map_err(|e| RetrievalError::Provider(e.to_string()))?;
            if body.data.len() != texts.len() {
                return Err(RetrievalError::Provider(format!(
                    "asked for {} embeddings, got {}",
                    texts.len(),
                    body.data.len()
                )));
            }
            body.data.sort_by_key(|d| d.index);
            body.data
                .into_iter()
                .map(|d| EmbeddingVector::new(d.embedding))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    provider: String,
    mode: EncodingMode,
    text_hash: String,
    vector: EmbeddingVector,
}

/// Append-only embedding cache keyed by (provider id, mode, text hash).
/// Backed by a line-delimited file when opened from a path.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: HashMap<(String, EncodingMode, String), EmbeddingVector>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, RetrievalError> {
        let mut cache = Self {
            path: Some(path.to_path_buf()),
            entries: HashMap::new(),
        };
        if path.exists() {
            let content = fs::read_to_string(path)?;
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(line).map_err(|e| RetrievalError::Cache {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?;
                cache
                    .entries
                    .insert((rec.provider, rec.mode, rec.text_hash), rec.vector);
            }
        }
        Ok(cache)
    }

    pub fn get(&self, provider: &str, mode: EncodingMode, hash: &str) -> Option<&EmbeddingVector> {
        self.entries
            .get(&(provider.to_string(), mode, hash.to_string()))
    }

    fn dim_for(&self, provider: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|((p, _, _), _)| p == provider)
            .map(|(_, v)| v.dim())
    }

    fn insert_all(&mut self, records: Vec<CacheRecord>) -> Result<(), RetrievalError> {
        if let Some(path) = &self.path {
            let mut buf = String::new();
            for rec in &records {
                buf.push_str(&serde_json::to_string(rec).expect("record serializes"));
                buf.push('\n');
            }
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            file.write_all(buf.as_bytes())?;
        }
        for rec in records {
            self.entries
                .insert((rec.provider, rec.mode, rec.text_hash), rec.vector);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Embeds `texts` in order, serving repeats from `cache` and sending only
/// misses to the provider. New vectors are persisted before returning.
pub fn embed(
    texts: &[&str],
    mode: EncodingMode,
    provider: &dyn EmbeddingProvider,
    cache: &mut EmbeddingCache,
) -> Result<Vec<EmbeddingVector>, RetrievalError> {
    let hashes: Vec<String> = texts.iter().map(|t| text_hash(t)).collect();
    let mut missing: Vec<usize> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for (i, h) in hashes.iter().enumerate() {
        if cache.get(provider.id(), mode, h).is_none() && queued.insert(h.clone()) {
            missing.push(i);
        }
    }
    if !missing.is_empty() {
        let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
        let fresh = provider.embed_batch(&batch)?;
        let expected_dim = cache.dim_for(provider.id()).or(fresh.first().map(|v| v.dim()));
        let mut records = Vec::with_capacity(fresh.len());
        for (&i, vector) in missing.iter().zip(fresh) {
            if let Some(d) = expected_dim {
                if vector.dim() != d {
                    return Err(RetrievalError::DimensionMismatch {
                        left: d,
                        right: vector.dim(),
                    });
                }
            }
            records.push(CacheRecord {
                provider: provider.id().to_string(),
                mode,
                text_hash: hashes[i].clone(),
                vector,
            });
        }
        cache.insert_all(records)?;
    }
    Ok(hashes
        .iter()
        .map(|h| {
            cache
                .get(provider.id(), mode, h)
                .cloned()
                .expect("every hash cached above")
        })
        .collect())
}

/// Embeds every MCQ's encoding text into a store keyed by MCQ id.
pub fn embed_corpus(
    mcqs: &[Mcq],
    mode: EncodingMode,
    provider: &dyn EmbeddingProvider,
    cache: &mut EmbeddingCache,
) -> Result<EmbeddingStore, RetrievalError> {
    let texts: Vec<String> = mcqs.iter().map(|m| encoding_text(m, mode)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embed(&refs, mode, provider, cache)?;
    let mut store = EmbeddingStore::new(mode);
    for (mcq, v) in mcqs.iter().zip(vectors) {
        store.insert(mcq.id.clone(), v)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample_mcq;
    use std::cell::Cell;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn encoding_modes() {
        let mut m = sample_mcq("a");
        assert_eq!(encoding_text(&m, EncodingMode::StemOnly), m.stem);
        assert_eq!(
            encoding_text(&m, EncodingMode::StemKey),
            format!("{}\n30", m.stem)
        );
        assert!(encoding_text(&m, EncodingMode::StemKeyExplanation).ends_with("10 x 3 = 30"));
        m.key_explanation = None;
        assert_eq!(
            encoding_text(&m, EncodingMode::StemKeyExplanation),
            encoding_text(&m, EncodingMode::StemKey)
        );
        assert_eq!(EncodingMode::default(), EncodingMode::StemKeyExplanation);
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.974_631_846).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])),
            Err(RetrievalError::ZeroVector)
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn top_k_tie_order_by_index() {
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        let got = top_k(&[1.0, 0.0], rows.iter().enumerate().map(|(i, r)| (i, r.as_slice())), 3).unwrap();
        let idx: Vec<usize> = got.iter().map(|(i, _)| *i).collect();
        assert_eq!(idx, vec![0, 2, 3]);
    }

    fn store_for(mcqs: &[Mcq]) -> EmbeddingStore {
        let mut cache = EmbeddingCache::in_memory();
        embed_corpus(mcqs, EncodingMode::StemKeyExplanation, &LexicalEmbedder::new(32), &mut cache).unwrap()
    }

    #[test]
    fn knn_truncates_to_pool() {
        let target = sample_mcq("t");
        let pool = vec![sample_mcq("p")];
        let store = store_for(&[target.clone(), pool[0].clone()]);
        let sel = knn_select(&target, &pool, 3, &store, None).unwrap();
        assert_eq!(sel.neighbors.len(), 1);
        assert!(!sel.empty_after_filter);
    }

    #[test]
    fn knn_topic_exclusion_can_empty_the_pool() {
        let target = sample_mcq("t");
        let pool = vec![sample_mcq("p1"), sample_mcq("p2")];
        let mut all = pool.clone();
        all.push(target.clone());
        let store = store_for(&all);
        let sel = knn_select(&target, &pool, 3, &store, Some(TopicLevel::FINEST)).unwrap();
        assert!(sel.neighbors.is_empty());
        assert!(sel.empty_after_filter);
    }

    #[test]
    fn knn_rejects_target_in_pool_and_zero_k() {
        let target = sample_mcq("t");
        let store = store_for(std::slice::from_ref(&target));
        assert!(matches!(
            knn_select(&target, std::slice::from_ref(&target), 3, &store, None),
            Err(RetrievalError::TargetInPool(_))
        ));
        assert!(matches!(
            knn_select(&target, &[], 0, &store, None),
            Err(RetrievalError::ZeroK)
        ));
    }

    #[test]
    fn random_select_rules() {
        let pool: Vec<u32> = (0..10).collect();
        assert_eq!(random_select(&pool, 3, 9).unwrap(), random_select(&pool, 3, 9).unwrap());
        let mut all = random_select(&pool, 10, 1).unwrap();
        all.sort();
        assert_eq!(all, pool);
        assert!(matches!(
            random_select(&pool, 11, 1),
            Err(RetrievalError::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn random_select_is_uniform() {
        // each item appears with p = 3/10; tolerance 5 binomial sigmas
        let pool: Vec<usize> = (0..10).collect();
        let trials = 10_000;
        let mut counts = [0usize; 10];
        for seed in 0..trials {
            for i in random_select(&pool, 3, seed as u64).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 0.3;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sigma, "{counts:?}");
        }
    }

    struct Counting {
        inner: LexicalEmbedder,
        calls: Cell<usize>,
    }

    impl EmbeddingProvider for Counting {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
            self.calls.set(self.calls.get() + texts.len());
            self.inner.embed_batch(texts)
        }
    }

    #[test]
    fn embed_cache_laws() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let provider = Counting {
            inner: LexicalEmbedder::new(16),
            calls: Cell::new(0),
        };
        let mut cache = EmbeddingCache::open(&path).unwrap();
        assert!(embed(&[], EncodingMode::StemOnly, &provider, &mut cache).unwrap().is_empty());
        let first = embed(&["a b", "a b", "c"], EncodingMode::StemOnly, &provider, &mut cache).unwrap();
        assert_eq!(first[0], first[1]);
        assert_eq!(provider.calls.get(), 2);

        let mut reopened = EmbeddingCache::open(&path).unwrap();
        let again = embed(&["c", "a b"], EncodingMode::StemOnly, &provider, &mut reopened).unwrap();
        assert_eq!(provider.calls.get(), 2);
        assert_eq!(again[0], first[2]);
        // a different mode is a different key
        embed(&["c"], EncodingMode::StemKey, &provider, &mut reopened).unwrap();
        assert_eq!(provider.calls.get(), 3);
    }

    #[test]
    fn embed_rejects_dimension_change() {
        let mut cache = EmbeddingCache::in_memory();
        let small = PrecomputedVectors::parse(
            "fixed",
            &format!("2 1\n{} 1 0\n", text_hash("x")),
        )
        .unwrap();
        embed(&["x"], EncodingMode::StemOnly, &small, &mut cache).unwrap();
        let wide = PrecomputedVectors::parse(
            "fixed",
            &format!("3 1\n{} 1 0 0\n", text_hash("y")),
        )
        .unwrap();
        assert!(matches!(
            embed(&["y"], EncodingMode::StemOnly, &wide, &mut cache),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vector_file_round_trip() {
        let rows = vec![
            (text_hash("a"), v(&[0.5, -1.25])),
            (text_hash("b"), v(&[3.0, 1e-7])),
        ];
        let content = write_vector_file(&rows).unwrap();
        assert!(content.starts_with("2 2\n"));
        let pre = PrecomputedVectors::parse("p", &content).unwrap();
        let got = pre.embed_batch(&["b", "a"]).unwrap();
        assert_eq!(got, vec![rows[1].1.clone(), rows[0].1.clone()]);
        assert!(matches!(
            pre.embed_batch(&["zzz"]),
            Err(RetrievalError::MissingVector(_))
        ));
        assert!(PrecomputedVectors::parse("p", "2 3\n").is_err());
    }
}
