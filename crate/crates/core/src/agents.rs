//! Recommendation policies and user agents.
//!
//! Both come in a deterministic flavour for tests and offline runs and a remote flavour
//! backed by an OpenAI-compatible chat-completions endpoint.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{ItemCatalog, ItemId, UserId};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::prompts;
use crate::remote::{self, ChatMessage, ChatRequest, EndpointConfig, JsonClient};
use crate::trajectory::Segment;

/// Everything a policy sees before producing one turn.
#[derive(Clone, Debug)]
pub struct PolicyTurnRequest<'a> {
    pub episode_id: &'a str,
    pub user_id: UserId,
    pub turn_index: usize,
    pub max_turns: usize,
    pub system_prompt: &'a str,
    pub user_prompt: &'a str,
    /// Transcript so far, ending at a policy-turn boundary.
    pub segments: &'a [Segment],
    /// Per-episode sampling seed.
    pub seed: u64,
}

impl PolicyTurnRequest<'_> {
    pub fn transcript(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    fn check(&self) -> Result<()> {
        if self.turn_index >= self.max_turns {
            return Err(Error::Policy(format!(
                "turn {} requested but the episode allows {} turns",
                self.turn_index, self.max_turns
            )));
        }
        Ok(())
    }
}

pub trait Policy: Send + Sync {
    /// Raw text of one policy turn, up to and including one ground or answer block.
    fn turn(&self, request: &PolicyTurnRequest<'_>) -> Result<String>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScriptRecord {
    /// Episode id, or a user id to script every episode of that user, or `*`.
    pub key: String,
    pub turns: Vec<String>,
}

/// Replays fixed turns. Lookup tries the episode id, then the user id, then `*`.
#[derive(Clone, Debug, Default)]
pub struct ScriptedPolicy {
    scripts: HashMap<String, Vec<String>>,
}

impl ScriptedPolicy {
    pub fn new(records: impl IntoIterator<Item = ScriptRecord>) -> Self {
        Self {
            scripts: records.into_iter().map(|r| (r.key, r.turns)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(jsonl::read_values::<ScriptRecord>(path)?))
    }

    pub fn insert(&mut self, key: impl Into<String>, turns: Vec<String>) {
        self.scripts.insert(key.into(), turns);
    }
}

impl Policy for ScriptedPolicy {
    fn turn(&self, request: &PolicyTurnRequest<'_>) -> Result<String> {
        request.check()?;
        let script = self
            .scripts
            .get(request.episode_id)
            .or_else(|| self.scripts.get(&request.user_id.to_string()))
            .or_else(|| self.scripts.get("*"))
            .ok_or_else(|| Error::Policy(format!("no script for episode {}", request.episode_id)))?;
        script.get(request.turn_index).cloned().ok_or_else(|| {
            Error::Policy(format!(
                "script for episode {} has no turn {}",
                request.episode_id, request.turn_index
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemotePolicyConfig {
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RemotePolicyConfig {
    fn default() -> Self {
        Self {
            endpoint: EndpointConfig::default(),
            temperature: 1.0,
            max_tokens: 1024,
        }
    }
}

/// Policy served by a chat-completions endpoint. Policy turns become assistant
/// messages; injected blocks become user messages.
#[derive(Clone, Debug)]
pub struct RemotePolicy {
    client: JsonClient,
    temperature: f64,
    max_tokens: u32,
}

impl RemotePolicy {
    pub fn new(config: RemotePolicyConfig) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(config.endpoint)?,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        })
    }

    pub fn messages(request: &PolicyTurnRequest<'_>) -> Vec<ChatMessage> {
        let mut messages = vec![
            ChatMessage::new("system", request.system_prompt),
            ChatMessage::new("user", request.user_prompt),
        ];
        for seg in request.segments {
            let role = if seg.source.is_policy() { "assistant" } else { "user" };
            let merge = messages.len() > 2 && role == "user";
            match messages.last_mut() {
                Some(last) if merge && last.role == role => last.content.push_str(&seg.text),
                _ => messages.push(ChatMessage::new(role, seg.text.clone())),
            }
        }
        messages
    }
}

/// Restores a closing tag dropped by a stop sequence.
fn close_dangling(mut text: String) -> String {
    for tag in ["ground", "answer"] {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        if let Some(at) = text.rfind(&open) {
            if !text[at..].contains(&close) {
                text.push_str(&close);
            }
        }
    }
    text
}

impl Policy for RemotePolicy {
    fn turn(&self, request: &PolicyTurnRequest<'_>) -> Result<String> {
        request.check()?;
        let chat = ChatRequest {
            model: self.client.config().model.clone(),
            messages: Self::messages(request),
            temperature: self.temperature,
            seed: Some(request.seed),
            max_tokens: Some(self.max_tokens),
            stop: vec!["</ground>".into(), "</answer>".into()],
        };
        let (text, _) = remote::chat(&self.client, &chat)?;
        Ok(close_dangling(text))
    }
}

/// Inputs to one user-agent critique.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackRequest {
    pub history_titles: Vec<String>,
    pub grounded_title: String,
    /// Rendered `<item_list>` block.
    pub item_list: String,
    pub hits: Vec<ItemId>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Affirm,
    Deny,
    Suggest,
    Unknown,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Simulated,
    Remote,
    /// The remote agent failed and the simulator answered instead.
    SimulatedFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feedback {
    pub text: String,
    pub stance: Stance,
    pub provenance: Provenance,
}

pub trait UserAgent: Send + Sync {
    /// `target` is the held-out item of the episode's user.
    fn feedback(&self, target: ItemId, request: &FeedbackRequest) -> Feedback;
}

pub const AFFIRM_TEXT: &str = "The list matches my interests.";
const SUGGEST_LEAD: &str = "Not quite what I am looking for.";
const DENY_LEAD: &str = "This does not match my interests.";
pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.1;

const STOPWORDS: &[&str] = &[
    "all", "an", "and", "are", "as", "at", "be", "but", "by", "do", "for", "from", "he", "her", "his", "in", "into",
    "is", "it", "its", "me", "my", "no", "not", "of", "on", "or", "our", "she", "so", "that", "the", "this", "to",
    "up", "vol", "was", "we", "with", "you", "your",
];

/// Lowercased alphanumeric tokens of length at least two, stopwords removed.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Deterministic user agent.
///
/// Affirms when the target is in the item list. Otherwise, if the token Jaccard similarity
/// between the grounded title and the history reaches the threshold it suggests the two
/// highest TF-IDF history tokens, else it denies and names the most frequent history token.
/// Feedback never contains the target title.
#[derive(Clone, Debug)]
pub struct SimulatedUserAgent {
    catalog: Arc<ItemCatalog>,
    threshold: f64,
}

impl SimulatedUserAgent {
    pub fn new(catalog: Arc<ItemCatalog>) -> Self {
        Self::with_threshold(catalog, DEFAULT_JACCARD_THRESHOLD)
    }

    pub fn with_threshold(catalog: Arc<ItemCatalog>, threshold: f64) -> Self {
        Self { catalog, threshold }
    }

    fn compose(&self, request: &FeedbackRequest, target: ItemId) -> (Stance, String) {
        if request.hits.contains(&target) {
            return (Stance::Affirm, AFFIRM_TEXT.to_string());
        }
        let docs: Vec<Vec<String>> = request.history_titles.iter().map(|t| tokens(t)).collect();
        let history_set: BTreeSet<String> = docs.iter().flatten().cloned().collect();
        let query_set: BTreeSet<String> = tokens(&request.grounded_title).into_iter().collect();

        let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in &docs {
            for t in doc {
                *tf.entry(t).or_default() += 1;
            }
            for t in doc.iter().collect::<BTreeSet<_>>() {
                *df.entry(t).or_default() += 1;
            }
        }

        if jaccard(&query_set, &history_set) >= self.threshold {
            let n = docs.len().max(1) as f64;
            let mut scored: Vec<(&str, f64)> = tf
                .iter()
                .map(|(&t, &count)| (t, count as f64 * ((n / df[t] as f64).ln() + 1.0)))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
            let top: Vec<&str> = scored.iter().take(2).map(|(t, _)| *t).collect();
            let text = match top.as_slice() {
                [a, b] => format!("{SUGGEST_LEAD} I am more interested in {a} and {b}."),
                [a] => format!("{SUGGEST_LEAD} I am more interested in {a}."),
                _ => SUGGEST_LEAD.to_string(),
            };
            (Stance::Suggest, text)
        } else {
            // most frequent token; BTreeMap order breaks ties alphabetically
            let favourite = tf.iter().fold(None::<(&str, usize)>, |best, (&t, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((t, c)),
            });
            let text = match favourite {
                Some((t, _)) => format!("{DENY_LEAD} I mostly enjoy {t}."),
                None => DENY_LEAD.to_string(),
            };
            (Stance::Deny, text)
        }
    }

    fn scrub(&self, stance: Stance, text: String, target: ItemId) -> String {
        let Some(title) = self.catalog.title(target) else {
            return text;
        };
        let needle = title.trim().to_lowercase();
        let leaks = |s: &str| !needle.is_empty() && s.to_lowercase().contains(&needle);
        if !leaks(&text) {
            return text;
        }
        let lead = match stance {
            Stance::Affirm => AFFIRM_TEXT,
            Stance::Suggest => SUGGEST_LEAD,
            _ => DENY_LEAD,
        };
        [lead, "No.", "-"]
            .into_iter()
            .find(|s| !leaks(s))
            .unwrap_or("")
            .to_string()
    }
}

impl UserAgent for SimulatedUserAgent {
    fn feedback(&self, target: ItemId, request: &FeedbackRequest) -> Feedback {
        let (stance, text) = self.compose(request, target);
        Feedback {
            text: self.scrub(stance, text, target),
            stance,
            provenance: Provenance::Simulated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteUserAgentConfig {
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    pub temperature: f64,
}

impl Default for RemoteUserAgentConfig {
    fn default() -> Self {
        Self {
            endpoint: EndpointConfig {
                model: "gpt-4.1-nano-2025-04-14".into(),
                ..EndpointConfig::default()
            },
            temperature: 0.0,
        }
    }
}

/// LLM-backed user agent; falls back to the simulator when the endpoint fails.
#[derive(Clone, Debug)]
pub struct RemoteUserAgent {
    client: JsonClient,
    temperature: f64,
    fallback: SimulatedUserAgent,
}

impl RemoteUserAgent {
    pub fn new(config: RemoteUserAgentConfig, fallback: SimulatedUserAgent) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(config.endpoint)?,
            temperature: config.temperature,
            fallback,
        })
    }

    pub fn prompt(request: &FeedbackRequest) -> String {
        prompts::user_agent_prompt(&request.history_titles, &request.grounded_title, &request.item_list)
    }
}

impl UserAgent for RemoteUserAgent {
    fn feedback(&self, target: ItemId, request: &FeedbackRequest) -> Feedback {
        let chat = ChatRequest {
            model: self.client.config().model.clone(),
            messages: vec![ChatMessage::new("user", Self::prompt(request))],
            temperature: self.temperature,
            seed: None,
            max_tokens: None,
            stop: Vec::new(),
        };
        match remote::chat(&self.client, &chat) {
            Ok((text, _)) if !text.trim().is_empty() => Feedback {
                text: text.trim().to_string(),
                stance: Stance::Unknown,
                provenance: Provenance::Remote,
            },
            outcome => {
                if let Err(e) = outcome {
                    log::warn!("user agent failed, using simulator: {e}");
                }
                Feedback {
                    provenance: Provenance::SimulatedFallback,
                    ..self.fallback.feedback(target, request)
                }
            }
        }
    }
}
