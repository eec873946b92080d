//! Per-page embedding store with exact cosine search, namespaced by patient.
//!
//! On disk a store is two files: `<path>` holds a header (`TMVS`, format
//! version u16, dimension u32, row count u64) followed by little-endian f32
//! rows; `<path>.meta.jsonl` holds one metadata record per row, in row order.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::gateway::EmbeddingVector;
use crate::record::{self, RecordError};

const MAGIC: &[u8; 4] = b"TMVS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredVector {
    pub page_id: String,
    pub patient_id: String,
    pub vector: EmbeddingVector,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub page_id: String,
    /// Cosine similarity in [-1, 1].
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub count: usize,
    pub dimension: Option<usize>,
    pub pages_per_patient: BTreeMap<String, usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("dimension mismatch: store holds {expected}-dimensional vectors, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("store file version {found} is not supported (expected {FORMAT_VERSION}); re-ingest or migrate the store")]
    Version { found: u16 },
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct RowMeta {
    patient_id: String,
    page_id: String,
    content_hash: String,
}

#[derive(Debug, Default, Clone, PartialEq)]
struct State {
    dimension: Option<usize>,
    rows: BTreeMap<(String, String), StoredVector>,
}

/// Thread-safe store: many concurrent readers or one writer.
#[derive(Debug, Default)]
pub struct VectorStore {
    state: RwLock<State>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.jsonl");
    PathBuf::from(name)
}

impl VectorStore {
    pub fn new() -> Self {
        VectorStore::default()
    }

    /// Inserts or replaces vectors keyed by (patient_id, page_id). A batch
    /// whose dimensions disagree with each other or with the store is
    /// rejected whole.
    pub fn upsert(&self, vectors: Vec<StoredVector>) -> Result<usize, StoreError> {
        let mut state = self.state.write().unwrap_or_else(|e| e.into_inner());
        let Some(first) = vectors.first() else { return Ok(0) };
        let expected = state.dimension.unwrap_or(first.vector.dimension());
        if let Some(bad) = vectors.iter().find(|v| v.vector.dimension() != expected) {
            return Err(StoreError::DimensionMismatch { expected, found: bad.vector.dimension() });
        }
        state.dimension = Some(expected);
        let written = vectors.len();
        for v in vectors {
            state.rows.insert((v.patient_id.clone(), v.page_id.clone()), v);
        }
        Ok(written)
    }

    pub fn len(&self) -> usize {
        self.read().rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dimension(&self) -> Option<usize> {
        self.read().dimension
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Content hash stored for a page, if the page is present.
    pub fn content_hash(&self, patient_id: &str, page_id: &str) -> Option<String> {
        self.read().rows.get(&(patient_id.to_string(), page_id.to_string())).map(|v| v.content_hash.clone())
    }

    pub fn page_ids(&self, patient_id: &str) -> Vec<String> {
        self.read().rows.range(patient_range(patient_id)).map(|(_, v)| v.page_id.clone()).collect()
    }

    /// Every stored row ordered by (patient_id, page_id).
    pub fn snapshot(&self) -> Vec<StoredVector> {
        self.read().rows.values().cloned().collect()
    }

    pub fn stats(&self) -> StoreStats {
        let state = self.read();
        let mut pages_per_patient = BTreeMap::new();
        for (patient, _) in state.rows.keys() {
            *pages_per_patient.entry(patient.clone()).or_insert(0) += 1;
        }
        StoreStats { count: state.rows.len(), dimension: state.dimension, pages_per_patient }
    }

    /// Exact top-`k` pages of `patient_id` by cosine similarity, best first,
    /// ties broken by ascending page id. An unknown patient yields no hits.
    pub fn search_top_k(
        &self,
        patient_id: &str,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        let state = self.read();
        if let Some(dim) = state.dimension {
            if dim != query.dimension() {
                return Err(StoreError::DimensionMismatch { expected: dim, found: query.dimension() });
            }
        }
        let query_norm = norm(&query.values);
        let mut hits: Vec<SearchHit> = state
            .rows
            .range(patient_range(patient_id))
            .map(|(_, v)| SearchHit {
                page_id: v.page_id.clone(),
                score: cosine(&query.values, query_norm, &v.vector.values),
            })
            .collect();
        if hits.is_empty() {
            tracing::warn!(patient_id, "vector search for a patient with no stored pages");
        }
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.page_id.cmp(&b.page_id)));
        hits.truncate(k);
        Ok(hits)
    }

    /// Writes the store to `path` and its metadata sidecar.
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let state = self.read();
        let dim = state.dimension.unwrap_or(0);
        let mut bytes = Vec::with_capacity(HEADER_LEN + state.rows.len() * dim * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(state.rows.len() as u64).to_le_bytes());
        let mut meta = Vec::with_capacity(state.rows.len());
        for v in state.rows.values() {
            for x in &v.vector.values {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            meta.push(RowMeta {
                patient_id: v.patient_id.clone(),
                page_id: v.page_id.clone(),
                content_hash: v.content_hash.clone(),
            });
        }
        record::write_jsonl(&sidecar_path(path), &meta)?;
        record::write_atomic(path, &bytes)?;
        Ok(())
    }

    /// Replaces the contents with the store at `path`. On error the current
    /// contents are left untouched.
    pub fn load(&self, path: &Path) -> Result<(), StoreError> {
        let loaded = read_state(path)?;
        *self.state.write().unwrap_or_else(|e| e.into_inner()) = loaded;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<VectorStore, StoreError> {
        Ok(VectorStore { state: RwLock::new(read_state(path)?) })
    }

    /// Opens `path` if it exists, otherwise returns an empty store.
    pub fn open_or_empty(path: &Path) -> Result<VectorStore, StoreError> {
        if path.exists() {
            VectorStore::open(path)
        } else {
            Ok(VectorStore::new())
        }
    }
}

fn patient_range(patient_id: &str) -> std::ops::RangeInclusive<(String, String)> {
    // Page ids never contain U+10FFFF, so this bounds every key of the patient.
    (patient_id.to_string(), String::new())..=(patient_id.to_string(), char::MAX.to_string())
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

fn cosine(query: &[f32], query_norm: f64, v: &[f32]) -> f64 {
    let denom = query_norm * norm(v);
    if denom == 0.0 {
        return 0.0;
    }
    let dot: f64 = query.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
    (dot / denom).clamp(-1.0, 1.0)
}

fn read_state(path: &Path) -> Result<State, StoreError> {
    let display = path.display().to_string();
    let corrupt = |reason: String| StoreError::Corrupt { path: display.clone(), reason };
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io { path: display.clone(), source })?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("missing TMVS header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(StoreError::Version { found: version });
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let expected_len = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(HEADER_LEN));
    if expected_len != Some(bytes.len()) {
        return Err(corrupt(format!("{} bytes for {count} rows of dimension {dim}", bytes.len())));
    }
    if count > 0 && dim == 0 {
        return Err(corrupt("rows with zero dimension".into()));
    }
    let meta: Vec<RowMeta> = record::read_jsonl(&sidecar_path(path))?;
    if meta.len() != count {
        return Err(corrupt(format!("sidecar has {} records for {count} rows", meta.len())));
    }
    let mut rows = BTreeMap::new();
    let mut seen: HashMap<(String, String), ()> = HashMap::new();
    for (i, m) in meta.into_iter().enumerate() {
        let start = HEADER_LEN + i * dim * 4;
        let values: Vec<f32> = bytes[start..start + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let vector = EmbeddingVector::new(values).map_err(|e| corrupt(format!("row {i}: {e}")))?;
        let key = (m.patient_id.clone(), m.page_id.clone());
        if seen.insert(key.clone(), ()).is_some() {
            return Err(corrupt(format!("duplicate row for page {} of patient {}", m.page_id, m.patient_id)));
        }
        rows.insert(
            key,
            StoredVector { page_id: m.page_id, patient_id: m.patient_id, vector, content_hash: m.content_hash },
        );
    }
    Ok(State { dimension: (count > 0).then_some(dim), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(patient: &str, page: &str, values: &[f32]) -> StoredVector {
        StoredVector {
            page_id: page.into(),
            patient_id: patient.into(),
            vector: EmbeddingVector::new(values.to_vec()).unwrap(),
            content_hash: format!("h-{page}"),
        }
    }

    fn q(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn upsert_replaces_duplicates() {
        let store = VectorStore::new();
        let rows = vec![sv("p", "a", &[1.0, 0.0]), sv("p", "b", &[0.0, 1.0]), sv("p", "c", &[1.0, 1.0])];
        assert_eq!(store.upsert(rows).unwrap(), 3);
        store.upsert(vec![sv("p", "a", &[0.5, 0.5])]).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.upsert(Vec::new()).unwrap(), 0);
    }

    #[test]
    fn mixed_dimensions_are_rejected_whole() {
        let store = VectorStore::new();
        let err = store.upsert(vec![sv("p", "a", &[1.0; 8]), sv("p", "b", &[1.0; 16])]).unwrap_err();
        assert!(matches!(err, StoreError::DimensionMismatch { expected: 8, found: 16 }));
        assert!(store.is_empty());
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let store = VectorStore::new();
        store.upsert(vec![sv("p", "a", &[1.0, 0.0, 0.0]), sv("p", "b", &[0.0, 1.0, 0.0])]).unwrap();
        let hits = store.search_top_k("p", &q(&[1.0, 0.0, 0.0]), 2).unwrap();
        assert_eq!(hits[0], SearchHit { page_id: "a".into(), score: 1.0 });
        assert_eq!(hits[1], SearchHit { page_id: "b".into(), score: 0.0 });
    }

    #[test]
    fn ties_break_by_page_id_and_patients_are_isolated() {
        let store = VectorStore::new();
        store
            .upsert(vec![sv("p", "z", &[1.0, 0.0]), sv("p", "m", &[2.0, 0.0]), sv("other", "a", &[1.0, 0.0])])
            .unwrap();
        let hits = store.search_top_k("p", &q(&[1.0, 0.0]), 5).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.page_id.as_str()).collect();
        assert_eq!(ids, ["m", "z"]);
        assert!(store.search_top_k("nobody", &q(&[1.0, 0.0]), 1).unwrap().is_empty());
        assert!(matches!(store.search_top_k("p", &q(&[1.0, 0.0]), 0), Err(StoreError::InvalidK)));
    }

    #[test]
    fn persist_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.tmvs");
        let store = VectorStore::new();
        let rows: Vec<StoredVector> = (0..100)
            .map(|i| sv(&format!("p{}", i % 7), &format!("pg{i:03}"), &[i as f32 * 0.1, -1.0 / (i as f32 + 1.0), 3.5]))
            .collect();
        store.upsert(rows).unwrap();
        store.persist(&path).unwrap();
        let loaded = VectorStore::open(&path).unwrap();
        let bits = |s: &VectorStore| -> Vec<(String, Vec<u32>)> {
            s.snapshot()
                .into_iter()
                .map(|v| (v.page_id, v.vector.values.iter().map(|x| x.to_bits()).collect()))
                .collect()
        };
        assert_eq!(bits(&loaded), bits(&store));
        assert_eq!(loaded.snapshot(), store.snapshot());
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tmvs");
        VectorStore::new().persist(&path).unwrap();
        let loaded = VectorStore::open(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.dimension(), None);
    }

    #[test]
    fn corrupt_file_leaves_store_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tmvs");
        let store = VectorStore::new();
        store.upsert(vec![sv("p", "a", &[1.0, 2.0])]).unwrap();
        store.persist(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let target = VectorStore::new();
        target.upsert(vec![sv("q", "x", &[9.0, 9.0])]).unwrap();
        assert!(matches!(target.load(&path), Err(StoreError::Corrupt { .. })));
        assert_eq!(target.page_ids("q"), ["x"]);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tmvs");
        VectorStore::new().persist(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(VectorStore::open(&path), Err(StoreError::Version { found: 9 })));
    }

    /// Independent oracle: score every page, then fully sort.
    fn brute_force(rows: &[(String, Vec<f32>)], query: &[f32], k: usize) -> Vec<String> {
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        let mut scored: Vec<(f64, String)> = rows
            .iter()
            .map(|(id, v)| {
                let d = dot(query, query).sqrt() * dot(v, v).sqrt();
                (if d == 0.0 { 0.0 } else { dot(query, v) / d }, id.clone())
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }

    proptest! {
        #[test]
        fn search_matches_brute_force(
            rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..200),
            other in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 0..20),
            query in prop::collection::vec(-1.0f32..1.0, 6),
            k in 1usize..15,
            scale_exp in -4i32..6,
        ) {
            let store = VectorStore::new();
            let named: Vec<(String, Vec<f32>)> = rows.iter().enumerate().map(|(i, v)| (format!("pg{i:04}"), v.clone())).collect();
            store.upsert(named.iter().map(|(id, v)| sv("p", id, v)).collect()).unwrap();
            store.upsert(other.iter().enumerate().map(|(i, v)| sv("intruder", &format!("x{i}"), v)).collect()).unwrap();
            let hits = store.search_top_k("p", &q(&query), k).unwrap();
            let ids: Vec<String> = hits.iter().map(|h| h.page_id.clone()).collect();
            prop_assert_eq!(&ids, &brute_force(&named, &query, k));
            prop_assert!(hits.iter().all(|h| (-1.0..=1.0).contains(&h.score)));
            // Powers of two scale exactly, so ranks must not move at all.
            let scaled: Vec<f32> = query.iter().map(|x| x * 2f32.powi(scale_exp)).collect();
            let scaled_ids: Vec<String> = store.search_top_k("p", &q(&scaled), k).unwrap().into_iter().map(|h| h.page_id).collect();
            prop_assert_eq!(scaled_ids, ids);
        }
    }
}
