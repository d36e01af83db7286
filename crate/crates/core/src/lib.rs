//! Multi-turn grounded recommendation: a policy reasons in tagged turns, grounds free-text
//! titles against the real item space, receives user-agent feedback, and finally answers
//! with one item. This crate holds the data pipeline, grounding engine, response grammar,
//! rollout orchestration, GRPO scoring and evaluation.

pub mod agents;
pub mod catalog;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod grpo;
pub mod index;
pub mod jsonl;
pub mod prompts;
pub mod remote;
pub mod rollout;
pub mod seeds;
pub mod synth;
pub mod trajectory;

pub use agents::{Policy, ScriptedPolicy, SimulatedUserAgent, UserAgent};
pub use catalog::{InteractionSequence, ItemCatalog, ItemId, PopularityTable, UserId};
pub use config::{Config, RunManifest};
pub use embed::{Embedder, Embedding, ToyEmbedder};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use grammar::{FormatVerdict, Violation};
pub use grpo::{GrpoHyper, TokenScores};
pub use index::{EmbeddingStore, Grounder, GroundingResult};
pub use rollout::{Environment, RolloutConfig};
pub use trajectory::{EpisodeStatus, Segment, SegmentSource, Trajectory};
