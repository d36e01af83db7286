//! Item catalog, chronological interaction sequences, splits and popularity.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Most recent interactions kept per user, target included.
pub const MAX_SEQUENCE_LEN: usize = 20;

/// Dense catalog row index.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One line of the catalog file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub item_id: u32,
    pub title: String,
}

/// One line of the interactions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: u64,
    pub item_id: u32,
    pub timestamp: i64,
}

/// The actual item space: every title a recommendation may resolve to.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCatalog {
    titles: Vec<String>,
    index: HashMap<String, ItemId>,
}

impl ItemCatalog {
    /// Builds a catalog from records in any order. Ids must be unique and dense in `[0, N)`,
    /// titles non-empty and distinct.
    pub fn from_records(records: Vec<CatalogRecord>) -> Result<Self> {
        let n = records.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        for rec in records {
            let idx = rec.item_id as usize;
            if idx >= n {
                return Err(Error::InvalidInput(format!(
                    "item_id {} outside dense range [0, {n})",
                    rec.item_id
                )));
            }
            if rec.title.trim().is_empty() {
                return Err(Error::InvalidInput(format!("item {} has an empty title", rec.item_id)));
            }
            if slots[idx].is_some() {
                return Err(Error::InvalidInput(format!("duplicate item_id {}", rec.item_id)));
            }
            slots[idx] = Some(rec.title);
        }
        // n records, all in range, no duplicates: every slot is filled.
        let titles: Vec<String> = slots.into_iter().map(|t| t.unwrap_or_default()).collect();
        Self::from_titles(titles)
    }

    /// Builds a catalog where row `i` has title `titles[i]`.
    pub fn from_titles(titles: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(titles.len());
        for (i, t) in titles.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::InvalidInput(format!("item {i} has an empty title")));
            }
            if index.insert(t.clone(), ItemId(i as u32)).is_some() {
                return Err(Error::InvalidInput(format!("duplicate title {t:?}")));
            }
        }
        Ok(Self { titles, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(jsonl::read_values(path)?)
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn contains(&self, id: ItemId) -> bool {
        id.index() < self.titles.len()
    }

    pub fn title(&self, id: ItemId) -> Option<&str> {
        self.titles.get(id.index()).map(String::as_str)
    }

    /// Exact-title lookup.
    pub fn lookup(&self, title: &str) -> Option<ItemId> {
        self.index.get(title).copied()
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }

    pub fn records(&self) -> Vec<CatalogRecord> {
        self.titles
            .iter()
            .enumerate()
            .map(|(i, t)| CatalogRecord {
                item_id: i as u32,
                title: t.clone(),
            })
            .collect()
    }

    fn require(&self, id: ItemId, context: impl FnOnce() -> String) -> Result<&str> {
        self.title(id).ok_or_else(|| Error::UnknownItem {
            item_id: id.0,
            context: context(),
        })
    }

    /// Titles for a list of ids, failing on the first unknown id.
    pub fn titles_of(&self, ids: &[ItemId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.require(id, || "title lookup".into()).map(str::to_string))
            .collect()
    }
}

/// A user's chronological history and the held-out next item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: UserId,
    pub history: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug)]
pub struct IngestOutcome {
    pub catalog: ItemCatalog,
    /// Sorted by user id.
    pub sequences: Vec<InteractionSequence>,
    /// Users with fewer than two usable events.
    pub skipped_users: usize,
    /// History entries removed because they repeated the user's target.
    pub removed_target_repeats: usize,
}

/// Reads the catalog and interaction files and builds one sequence per user.
pub fn ingest(catalog_file: &Path, interactions_file: &Path) -> Result<IngestOutcome> {
    let catalog = ItemCatalog::load(catalog_file)?;
    let interactions = jsonl::read(interactions_file)?;
    build_sequences(catalog, interactions)
}

/// In-memory variant of [`ingest`].
pub fn ingest_str(catalog_text: &str, interactions_text: &str) -> Result<IngestOutcome> {
    let records: Vec<CatalogRecord> = jsonl::parse_str(catalog_text, "catalog")?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let catalog = ItemCatalog::from_records(records)?;
    let interactions = jsonl::parse_str(interactions_text, "interactions")?;
    build_sequences(catalog, interactions)
}

fn build_sequences(catalog: ItemCatalog, interactions: Vec<(usize, InteractionRecord)>) -> Result<IngestOutcome> {
    let mut per_user: BTreeMap<u64, Vec<(i64, ItemId)>> = BTreeMap::new();
    for (line, rec) in interactions {
        let item = ItemId(rec.item_id);
        if !catalog.contains(item) {
            return Err(Error::UnknownItem {
                item_id: rec.item_id,
                context: format!("interactions line {line}"),
            });
        }
        per_user.entry(rec.user_id).or_default().push((rec.timestamp, item));
    }

    let mut sequences = Vec::with_capacity(per_user.len());
    let mut skipped_users = 0;
    let mut removed_target_repeats = 0;
    for (user, mut events) in per_user {
        // Stable: equal timestamps keep file order.
        events.sort_by_key(|&(ts, _)| ts);
        let start = events.len().saturating_sub(MAX_SEQUENCE_LEN);
        let recent = &events[start..];
        if recent.len() < 2 {
            skipped_users += 1;
            continue;
        }
        let (last, earlier) = recent.split_last().expect("len >= 2");
        let target = last.1;
        let before = earlier.len();
        let history: Vec<ItemId> = earlier.iter().map(|&(_, id)| id).filter(|&id| id != target).collect();
        removed_target_repeats += before - history.len();
        if history.is_empty() {
            skipped_users += 1;
            continue;
        }
        sequences.push(InteractionSequence {
            user_id: UserId(user),
            history,
            target,
        });
    }
    if skipped_users > 0 {
        log::warn!("skipped {skipped_users} user(s) with fewer than two usable events");
    }
    Ok(IngestOutcome {
        catalog,
        sequences,
        skipped_users,
        removed_target_repeats,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<InteractionSequence>,
    pub valid: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

/// Partitions users into train/valid/test by `ratios`. Deterministic for a fixed seed;
/// each part is returned sorted by user id.
pub fn split(sequences: &[InteractionSequence], ratios: (u32, u32, u32), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::InvalidInput("split ratios must be positive".into()));
    }
    let n = sequences.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!(
            "need at least 10 sequences to split, got {n}"
        )));
    }
    let total = f64::from(a + b + c);
    let n_train = ((n as f64) * f64::from(a) / total).round() as usize;
    let n_valid = (((n as f64) * f64::from(b) / total).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let take = |range: &[usize]| {
        let mut part: Vec<InteractionSequence> = range.iter().map(|&i| sequences[i].clone()).collect();
        part.sort_by_key(|s| s.user_id);
        part
    };
    Ok(Split {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

/// Interaction counts over the training split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PopularityTable {
    counts: BTreeMap<ItemId, u64>,
}

impl PopularityTable {
    pub fn count(&self, id: ItemId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// `1 / count`, or `f64::INFINITY` for items never seen in training.
    pub fn difficulty(&self, id: ItemId) -> f64 {
        match self.count(id) {
            0 => f64::INFINITY,
            c => 1.0 / c as f64,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn counts(&self) -> &BTreeMap<ItemId, u64> {
        &self.counts
    }
}

pub fn popularity(train: &[InteractionSequence]) -> PopularityTable {
    let mut counts = BTreeMap::new();
    for seq in train {
        for &id in seq.history.iter().chain(std::iter::once(&seq.target)) {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    PopularityTable { counts }
}
