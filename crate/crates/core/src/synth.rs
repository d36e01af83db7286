//! Deterministic synthetic data for tests, benches and demos.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::ScriptRecord;
use crate::catalog::{CatalogRecord, InteractionRecord, InteractionSequence, ItemCatalog, ItemId};
use crate::embed::{Embedder, Embedding};
use crate::error::{Error, Result};

const GENRES: [&str; 8] = ["Jazz", "Rock", "Opera", "Blues", "Techno", "Folk", "Reggae", "Soul"];
const WORDS: [&str; 16] = [
    "Midnight", "Golden", "Silent", "River", "Electric", "Velvet", "Broken", "Crystal", "Distant", "Summer", "Iron",
    "Paper", "Wild", "Hidden", "Lunar", "Neon",
];

/// `n` unique titles of the form `"{Word} {Word} {Genre} {i}"`.
pub fn catalog_records(n: usize, seed: u64) -> Vec<CatalogRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u32)
        .map(|i| {
            let a = WORDS.choose(&mut rng).copied().unwrap_or_default();
            let b = WORDS.choose(&mut rng).copied().unwrap_or_default();
            let genre = GENRES[i as usize % GENRES.len()];
            CatalogRecord {
                item_id: i,
                title: format!("{a} {b} {genre} {i}"),
            }
        })
        .collect()
}

pub fn catalog(n: usize, seed: u64) -> ItemCatalog {
    ItemCatalog::from_records(catalog_records(n, seed)).expect("synthetic titles are unique")
}

/// Interaction logs where each user mostly stays within one genre.
pub fn interactions(catalog_size: usize, users: usize, seed: u64) -> Vec<InteractionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for u in 0..users as u64 {
        let genre = rng.random_range(0..GENRES.len());
        let events = rng.random_range(3..=24);
        let mut ts = rng.random_range(1_000_000i64..2_000_000);
        for _ in 0..events {
            let item = if rng.random_bool(0.8) {
                let slots = catalog_size.div_ceil(GENRES.len()).max(1);
                (rng.random_range(0..slots) * GENRES.len() + genre).min(catalog_size - 1)
            } else {
                rng.random_range(0..catalog_size)
            };
            ts += rng.random_range(1..10_000);
            out.push(InteractionRecord {
                user_id: u,
                item_id: item as u32,
                timestamp: ts,
            });
        }
    }
    out
}

/// Scripted policy turns for each sequence, keyed by user id. Scripts vary in shape:
/// direct answers, a few groundings, runs past the grounding cap, and broken output.
pub fn scripts(seqs: &[InteractionSequence], catalog: &ItemCatalog, seed: u64) -> Vec<ScriptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seqs.iter()
        .map(|s| {
            let title = |id: ItemId| catalog.title(id).unwrap_or_default().to_string();
            let recent = title(*s.history.last().expect("non-empty history"));
            let first = title(s.history[0]);
            let ground = |t: &str| format!("<think>The user seems to like {t}.</think>\n<ground>{t}</ground>");
            let answer = |t: &str| format!("<think>I have enough information.</think>\n<answer>{t}</answer>");
            let turns = match rng.random_range(0..10) {
                0 => vec![answer(&recent)],
                1 => vec!["I think the user wants jazz.".to_string()],
                2 => (0..8).map(|_| ground(&recent)).collect(),
                3 => {
                    let mut t: Vec<String> = (0..7).map(|_| ground(&first)).collect();
                    t.push(answer(&recent));
                    t
                }
                4 => vec![ground(&first), "<think>Hmm.</think>".into(), answer(&first)],
                _ => vec![ground(&first), ground(&recent), answer(&recent)],
            };
            ScriptRecord {
                key: s.user_id.to_string(),
                turns,
            }
        })
        .collect()
}

/// Embeds titles by table lookup; unknown titles are an error. Useful for placing
/// items at hand-chosen coordinates.
#[derive(Clone, Debug)]
pub struct LookupEmbedder {
    dimension: usize,
    table: HashMap<String, Vec<f32>>,
}

impl LookupEmbedder {
    pub fn new(dimension: usize, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let table: HashMap<String, Vec<f32>> = entries.into_iter().collect();
        if let Some((t, _)) = table.iter().find(|(_, v)| v.len() != dimension) {
            return Err(Error::InvalidInput(format!("vector for {t:?} has the wrong dimension")));
        }
        Ok(Self { dimension, table })
    }
}

impl Embedder for LookupEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let v = self
            .table
            .get(text.trim())
            .ok_or_else(|| Error::InvalidInput(format!("no vector for {text:?}")))?;
        Embedding::new(v.clone())
    }
}
