//! Exact L2 grounding over the item embedding matrix.
//!
//! Ordering is by squared distance accumulated in `f64`, ties broken by ascending item id.
//! Reported distances are the square roots of those sums.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{ItemCatalog, ItemId};
use crate::embed::Embedder;
use crate::error::{Error, Result};

pub const STORE_MAGIC: [u8; 4] = *b"MGFE";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
/// Items returned per grounding action.
pub const DEFAULT_K: usize = 10;
const PARALLEL_THRESHOLD: usize = 1 << 16;
const BUILD_BATCH: usize = 256;

/// Row `i` is the embedding of catalog item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    rows: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize, rows: Vec<f32>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Store("dimension must be positive".into()));
        }
        if !rows.len().is_multiple_of(dimension) {
            return Err(Error::Store(format!(
                "{} values is not a multiple of dimension {dimension}",
                rows.len()
            )));
        }
        if let Some(index) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: "store", index });
        }
        Ok(Self { dimension, rows })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, id: ItemId) -> Option<&[f32]> {
        let start = id.index().checked_mul(self.dimension)?;
        self.rows.get(start..start + self.dimension)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.rows.chunks_exact(self.dimension)
    }

    /// Little-endian: magic, version u32, dim u32, count u64, `count * dim` f32 rows,
    /// then the CRC32 (IEEE) of every preceding byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * 4 + 4);
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::Store("file too short".into()));
        }
        if bytes[..4] != STORE_MAGIC {
            return Err(Error::Store("bad magic".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != STORE_VERSION {
            return Err(Error::Store(format!("unsupported version {version}")));
        }
        let dim = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload_len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Store("size overflow".into()))?;
        let expected = HEADER_LEN + payload_len + 4;
        if bytes.len() != expected {
            return Err(Error::Store(format!(
                "length {} does not match header (expected {expected})",
                bytes.len()
            )));
        }
        let body = &bytes[..expected - 4];
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Store("checksum mismatch".into()));
        }
        let rows = body[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dim, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Squared L2 distance from `query` to every row, in item order.
    pub fn squared_distances(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dimension {
            return Err(Error::InvalidInput(format!(
                "query dimension {} does not match store dimension {}",
                query.len(),
                self.dimension
            )));
        }
        let dist = |row: &[f32]| -> f64 {
            row.iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum()
        };
        Ok(if self.rows.len() >= PARALLEL_THRESHOLD {
            self.rows.par_chunks_exact(self.dimension).map(dist).collect()
        } else {
            self.rows.chunks_exact(self.dimension).map(dist).collect()
        })
    }

    /// The `k` nearest items to an already-embedded query.
    pub fn nearest(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        let dists = self.squared_distances(query)?;
        let by_distance =
            |a: &u32, b: &u32| -> Ordering { dists[*a as usize].total_cmp(&dists[*b as usize]).then(a.cmp(b)) };
        let mut ids: Vec<u32> = (0..dists.len() as u32).collect();
        let k = k.min(ids.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < ids.len() {
            ids.select_nth_unstable_by(k - 1, by_distance);
            ids.truncate(k);
        }
        ids.sort_unstable_by(by_distance);
        Ok(ids
            .into_iter()
            .map(|i| Hit {
                item_id: ItemId(i),
                distance: dists[i as usize].sqrt(),
            })
            .collect())
    }

    /// 1-based rank of `target` for an already-embedded query: items strictly closer, plus
    /// equally distant items with a smaller id, plus one.
    pub fn rank_of_embedding(&self, query: &[f32], target: ItemId) -> Result<usize> {
        if target.index() >= self.len() {
            return Err(Error::UnknownItem {
                item_id: target.0,
                context: "rank target".into(),
            });
        }
        let dists = self.squared_distances(query)?;
        let t = dists[target.index()];
        let ahead = dists
            .iter()
            .enumerate()
            .filter(|&(j, &d)| d < t || (d == t && j < target.index()))
            .count();
        Ok(ahead + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub item_id: ItemId,
    pub distance: f64,
}

/// The relevant-item list returned by one grounding action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub query_title: String,
    pub hits: Vec<Hit>,
    /// Set when `k` exceeded the catalog size and fewer hits were returned.
    pub truncated: bool,
}

impl GroundingResult {
    pub fn contains(&self, id: ItemId) -> bool {
        self.hits.iter().any(|h| h.item_id == id)
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.hits.iter().map(|h| h.item_id).collect()
    }
}

/// Embeds `query_title` and returns the `k` closest catalog items.
pub fn ground(store: &EmbeddingStore, query_title: &str, k: usize, embedder: &dyn Embedder) -> Result<GroundingResult> {
    if store.is_empty() {
        return Err(Error::Store("cannot ground against an empty store".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let query = embedder.embed(query_title)?;
    let hits = store.nearest(&query, k)?;
    Ok(GroundingResult {
        query_title: query_title.to_string(),
        truncated: hits.len() < k,
        hits,
    })
}

pub fn rank_of(store: &EmbeddingStore, query_title: &str, target: ItemId, embedder: &dyn Embedder) -> Result<usize> {
    let query = embedder.embed(query_title)?;
    store.rank_of_embedding(&query, target)
}

/// Failed index build. `checkpoint` holds every row embedded before the failure and can
/// be passed back to [`build_index_resume`].
#[derive(Debug)]
pub struct BuildFailure {
    pub checkpoint: EmbeddingStore,
    pub source: Error,
}

pub fn build_index(
    catalog: &ItemCatalog,
    embedder: &dyn Embedder,
) -> std::result::Result<EmbeddingStore, BuildFailure> {
    build_index_resume(catalog, embedder, None)
}

pub fn build_index_resume(
    catalog: &ItemCatalog,
    embedder: &dyn Embedder,
    checkpoint: Option<EmbeddingStore>,
) -> std::result::Result<EmbeddingStore, BuildFailure> {
    let dim = embedder.dimension();
    let empty = || EmbeddingStore {
        dimension: dim.max(1),
        rows: Vec::new(),
    };
    if catalog.is_empty() {
        return Err(BuildFailure {
            checkpoint: empty(),
            source: Error::InvalidInput("catalog is empty".into()),
        });
    }
    let mut store = match checkpoint {
        Some(cp) if cp.dimension == dim && cp.len() <= catalog.len() => cp,
        Some(cp) => {
            return Err(BuildFailure {
                source: Error::Store(format!(
                    "checkpoint ({} rows of dim {}) does not fit catalog ({} items, dim {dim})",
                    cp.len(),
                    cp.dimension,
                    catalog.len()
                )),
                checkpoint: cp,
            })
        }
        None => empty(),
    };
    store.rows.reserve(catalog.len().saturating_sub(store.len()) * dim);
    let titles = catalog.titles();
    while store.len() < titles.len() {
        let start = store.len();
        let end = (start + BUILD_BATCH).min(titles.len());
        match embedder.embed_batch(&titles[start..end]) {
            Ok(batch) => {
                for e in batch {
                    if e.len() != dim {
                        return Err(BuildFailure {
                            checkpoint: store,
                            source: Error::Store(format!("embedder returned dimension {}", e.len())),
                        });
                    }
                    store.rows.extend_from_slice(&e);
                }
            }
            Err(source) => {
                return Err(BuildFailure {
                    checkpoint: store,
                    source,
                })
            }
        }
    }
    Ok(store)
}

/// A store paired with the embedder that produced it.
#[derive(Clone)]
pub struct Grounder {
    store: Arc<EmbeddingStore>,
    embedder: Arc<dyn Embedder>,
}

impl Grounder {
    pub fn new(store: Arc<EmbeddingStore>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        if store.dimension() != embedder.dimension() {
            return Err(Error::Config(format!(
                "embedder dimension {} does not match store dimension {}",
                embedder.dimension(),
                store.dimension()
            )));
        }
        Ok(Self { store, embedder })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn ground(&self, query_title: &str, k: usize) -> Result<GroundingResult> {
        ground(&self.store, query_title, k, self.embedder.as_ref())
    }

    pub fn rank_of(&self, query_title: &str, target: ItemId) -> Result<usize> {
        rank_of(&self.store, query_title, target, self.embedder.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::ToyEmbedder;

    fn store_from(rows: &[[f32; 2]]) -> EmbeddingStore {
        EmbeddingStore::new(2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cat = ItemCatalog::from_titles(vec!["A".into(), "B".into(), "C".into()]).unwrap();
        let emb = ToyEmbedder::new(8, 0).unwrap();
        let store = build_index(&cat, &emb).unwrap();
        assert_eq!(store.len(), 3);
        let bytes = store.to_bytes();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, store);
        assert_eq!(build_index(&cat, &emb).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupted_file_fails_checksum() {
        let mut bytes = store_from(&[[1.0, 2.0], [3.0, 4.0]]).to_bytes();
        bytes[HEADER_LEN] ^= 1;
        assert!(EmbeddingStore::from_bytes(&bytes).is_err());
        let mut bad_magic = store_from(&[[1.0, 2.0]]).to_bytes();
        bad_magic[0] = b'X';
        assert!(EmbeddingStore::from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn exact_title_query_ranks_first_at_zero() {
        let titles: Vec<String> = ["Kind of Blue", "Blue Train", "A Love Supreme", "Giant Steps"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cat = ItemCatalog::from_titles(titles).unwrap();
        let emb = ToyEmbedder::new(16, 1).unwrap();
        let store = build_index(&cat, &emb).unwrap();
        let r = ground(&store, "A Love Supreme", 2, &emb).unwrap();
        assert_eq!(r.hits[0].item_id, ItemId(2));
        assert_eq!(r.hits[0].distance, 0.0);
        assert_eq!(rank_of(&store, "A Love Supreme", ItemId(2), &emb).unwrap(), 1);
    }

    #[test]
    fn hand_placed_rank() {
        // query at origin; squared distances 4, 1, 1, 9, 0.25
        let store = store_from(&[[2.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 3.0], [0.5, 0.0]]);
        let q = [0.0f32, 0.0];
        assert_eq!(store.rank_of_embedding(&q, ItemId(4)).unwrap(), 1);
        assert_eq!(store.rank_of_embedding(&q, ItemId(1)).unwrap(), 2);
        assert_eq!(store.rank_of_embedding(&q, ItemId(2)).unwrap(), 3);
        assert_eq!(store.rank_of_embedding(&q, ItemId(0)).unwrap(), 4);
        assert_eq!(store.rank_of_embedding(&q, ItemId(3)).unwrap(), 5);
        let hits = store.nearest(&q, 3).unwrap();
        let ids: Vec<u32> = hits.iter().map(|h| h.item_id.0).collect();
        assert_eq!(ids, vec![4, 1, 2]);
    }

    #[test]
    fn all_equal_rows_tie_by_id() {
        let store = store_from(&[[1.0, 1.0]; 4]);
        assert_eq!(store.rank_of_embedding(&[0.0, 0.0], ItemId(0)).unwrap(), 1);
        assert_eq!(store.rank_of_embedding(&[0.0, 0.0], ItemId(3)).unwrap(), 4);
        let ids: Vec<u32> = store
            .nearest(&[5.0, 5.0], 4)
            .unwrap()
            .iter()
            .map(|h| h.item_id.0)
            .collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_larger_than_catalog_is_flagged() {
        let cat = ItemCatalog::from_titles(vec!["A".into(), "B".into()]).unwrap();
        let emb = ToyEmbedder::new(8, 0).unwrap();
        let store = build_index(&cat, &emb).unwrap();
        let r = ground(&store, "A", 10, &emb).unwrap();
        assert_eq!(r.hits.len(), 2);
        assert!(r.truncated);
        assert!(ground(&store, "A", 0, &emb).is_err());
        assert!(matches!(ground(&store, " ", 1, &emb), Err(Error::EmptyText)));
    }

    #[test]
    fn unknown_rank_target_errors() {
        let store = store_from(&[[0.0, 0.0]]);
        assert!(matches!(
            store.rank_of_embedding(&[0.0, 0.0], ItemId(5)),
            Err(Error::UnknownItem { .. })
        ));
    }

    struct FailAfter {
        inner: ToyEmbedder,
        ok_calls: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl Embedder for FailAfter {
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn embed(&self, text: &str) -> Result<crate::embed::Embedding> {
            self.inner.embed(text)
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<crate::embed::Embedding>> {
            let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if n >= self.ok_calls {
                return Err(Error::Remote {
                    endpoint: "test".into(),
                    attempts: 3,
                    message: "down".into(),
                });
            }
            self.inner.embed_batch(texts)
        }
    }

    #[test]
    fn failed_build_keeps_checkpoint_and_resumes() {
        let titles: Vec<String> = (0..600).map(|i| format!("Title {i}")).collect();
        let cat = ItemCatalog::from_titles(titles).unwrap();
        let inner = ToyEmbedder::new(8, 0).unwrap();
        let flaky = FailAfter {
            inner: inner.clone(),
            ok_calls: 1,
            calls: Default::default(),
        };
        let fail = build_index(&cat, &flaky).unwrap_err();
        assert_eq!(fail.checkpoint.len(), BUILD_BATCH);
        assert!(fail.source.is_remote());
        let resumed = build_index_resume(&cat, &inner, Some(fail.checkpoint)).unwrap();
        assert_eq!(resumed, build_index(&cat, &inner).unwrap());
    }
}
