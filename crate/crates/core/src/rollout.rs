//! Episode orchestration: prompt assembly, think/ground/feedback cycles, the grounding
//! cap, and grouped sampling for GRPO.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{FeedbackRequest, Policy, PolicyTurnRequest, UserAgent};
use crate::catalog::{InteractionSequence, ItemCatalog, ItemId, UserId};
use crate::error::{Error, Result};
use crate::grammar::{self, ActionKind, NOTICE_TEXT};
use crate::index::{Grounder, GroundingResult};
use crate::jsonl;
use crate::prompts;
use crate::seeds::derive_seed;
use crate::trajectory::{EpisodeStatus, Segment, SegmentSource, Trajectory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub max_groundings: usize,
    pub k_per_ground: usize,
    pub recall_size: usize,
    pub group_size: usize,
    /// Policy turns per episode; `max_groundings + 2` when unset.
    pub max_turns: Option<usize>,
    /// Re-samples of an aborted episode before its group is dropped.
    pub abort_retries: usize,
    /// Worker threads; 0 uses all cores.
    pub parallelism: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_groundings: 6,
            k_per_ground: 10,
            recall_size: 30,
            group_size: 6,
            max_turns: None,
            abort_retries: 2,
            parallelism: 0,
        }
    }
}

impl RolloutConfig {
    pub fn turns(&self) -> usize {
        self.max_turns.unwrap_or(self.max_groundings + 2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_groundings", self.max_groundings),
            ("k_per_ground", self.k_per_ground),
            ("recall_size", self.recall_size),
            ("group_size", self.group_size),
            ("max_turns", self.turns()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("rollout.{name} must be positive")));
        }
        if self.turns() <= self.max_groundings {
            return Err(Error::Config(format!(
                "rollout.max_turns ({}) must exceed max_groundings ({})",
                self.turns(),
                self.max_groundings
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub user_id: UserId,
    pub items: Vec<ItemId>,
}

/// Precomputed initial recall lists keyed by user.
#[derive(Clone, Debug, Default)]
pub struct RecallTable {
    lists: HashMap<UserId, Vec<ItemId>>,
}

impl RecallTable {
    pub fn new(records: impl IntoIterator<Item = RecallRecord>) -> Self {
        Self {
            lists: records.into_iter().map(|r| (r.user_id, r.items)).collect(),
        }
    }

    pub fn load(path: &Path, catalog: &ItemCatalog) -> Result<Self> {
        let records = jsonl::read::<RecallRecord>(path)?;
        for (line, r) in &records {
            if let Some(bad) = r.items.iter().find(|id| !catalog.contains(**id)) {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    line: *line,
                    message: format!("unknown item_id {bad}"),
                });
            }
        }
        Ok(Self::new(records.into_iter().map(|(_, r)| r)))
    }

    pub fn get(&self, user: UserId) -> Option<&[ItemId]> {
        self.lists.get(&user).map(Vec::as_slice)
    }
}

/// The candidate list shown in the prompt.
///
/// A list from `table` is used as given (cut to `size`, topped up from the fallback when
/// short). The fallback ranks non-history items by distance to the mean of the history
/// embeddings.
pub fn initial_recall(
    seq: &InteractionSequence,
    grounder: &Grounder,
    table: Option<&RecallTable>,
    size: usize,
) -> Result<Vec<ItemId>> {
    if seq.history.is_empty() {
        return Err(Error::InvalidInput(format!(
            "user {} has an empty history",
            seq.user_id
        )));
    }
    let mut out: Vec<ItemId> = table
        .and_then(|t| t.get(seq.user_id))
        .map(|l| l.iter().copied().take(size).collect())
        .unwrap_or_default();
    if out.len() >= size {
        return Ok(out);
    }
    let store = grounder.store();
    if store.is_empty() {
        return Err(Error::InvalidInput(
            "cannot compute a recall list from an empty store".into(),
        ));
    }
    let mut mean = vec![0f64; store.dimension()];
    for &id in &seq.history {
        let row = store.row(id).ok_or(Error::UnknownItem {
            item_id: id.0,
            context: "history".into(),
        })?;
        for (m, x) in mean.iter_mut().zip(row) {
            *m += f64::from(*x);
        }
    }
    let query: Vec<f32> = mean.iter().map(|m| (m / seq.history.len() as f64) as f32).collect();
    let distances = store.squared_distances(&query)?;
    let mut order: Vec<u32> = (0..store.len() as u32).collect();
    order.sort_by(|&a, &b| distances[a as usize].total_cmp(&distances[b as usize]).then(a.cmp(&b)));
    for id in order.into_iter().map(ItemId) {
        if out.len() >= size {
            break;
        }
        if !seq.history.contains(&id) && !out.contains(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

/// Shared, read-only collaborators of every episode.
pub struct Environment<'a> {
    pub catalog: &'a ItemCatalog,
    pub grounder: &'a Grounder,
    pub policy: &'a dyn Policy,
    pub user_agent: &'a dyn UserAgent,
    pub recall: Option<&'a RecallTable>,
    pub config: &'a RolloutConfig,
}

/// A finished episode plus data that is not part of the trajectory record.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    /// Every executed grounding, in order.
    pub groundings: Vec<GroundingResult>,
    pub abort_reason: Option<String>,
}

struct Episode {
    segments: Vec<Segment>,
    groundings: Vec<GroundingResult>,
    answer: Option<String>,
}

enum Stop {
    Completed,
    Invalid,
    Aborted(String),
}

/// Runs one episode to completion. Never returns an error: infrastructure failures end
/// the episode as `Aborted`, protocol failures as `FormatInvalid`.
pub fn run_episode(env: &Environment<'_>, seq: &InteractionSequence, episode_id: &str, seed: u64) -> EpisodeOutcome {
    let mut ep = Episode {
        segments: Vec::new(),
        groundings: Vec::new(),
        answer: None,
    };
    let (prompt, stop) = match episode_prompt(env, seq) {
        Ok(p) => {
            let stop = drive(env, seq, episode_id, seed, &p, &mut ep);
            (prompts::episode_prompt(&p), stop)
        }
        Err(e) => (String::new(), Stop::Aborted(e.to_string())),
    };
    let (status, abort_reason) = match stop {
        Stop::Completed if grammar::validate_segments(&ep.segments).is_valid() => (EpisodeStatus::Completed, None),
        Stop::Completed | Stop::Invalid => (EpisodeStatus::FormatInvalid, None),
        Stop::Aborted(reason) => (EpisodeStatus::Aborted, Some(reason)),
    };
    let answer_title = if status == EpisodeStatus::Completed {
        ep.answer
    } else {
        None
    };
    EpisodeOutcome {
        trajectory: Trajectory {
            episode_id: episode_id.to_string(),
            user_id: seq.user_id,
            prompt,
            segments: ep.segments,
            grounding_count: ep.groundings.len(),
            answer_title,
            status,
        },
        groundings: ep.groundings,
        abort_reason,
    }
}

fn episode_prompt(env: &Environment<'_>, seq: &InteractionSequence) -> Result<String> {
    let recall = initial_recall(seq, env.grounder, env.recall, env.config.recall_size)?;
    Ok(prompts::user_prompt(
        &env.catalog.titles_of(&seq.history)?,
        &env.catalog.titles_of(&recall)?,
    ))
}

fn drive(
    env: &Environment<'_>,
    seq: &InteractionSequence,
    episode_id: &str,
    seed: u64,
    user_prompt: &str,
    ep: &mut Episode,
) -> Stop {
    let config = env.config;
    let max_turns = config.turns();
    let mut noticed = false;
    for turn_index in 0..max_turns {
        let request = PolicyTurnRequest {
            episode_id,
            user_id: seq.user_id,
            turn_index,
            max_turns,
            system_prompt: prompts::SYSTEM_PROMPT,
            user_prompt,
            segments: &ep.segments,
            seed,
        };
        let text = match env.policy.turn(&request) {
            Ok(t) => t,
            Err(e) => return Stop::Aborted(e.to_string()),
        };
        let actions = grammar::parse_turn(&text);
        ep.segments.push(Segment::new(text, SegmentSource::PolicyGenerated));
        let Ok(actions) = actions else {
            return Stop::Invalid;
        };
        let title = match actions.last().map(|a| (&a.kind, a.title())) {
            Some((ActionKind::Answer(_), Some(t))) => {
                ep.answer = Some(t.to_string());
                return Stop::Completed;
            }
            // after the notice only an answer is acceptable
            _ if noticed => return Stop::Invalid,
            Some((ActionKind::Ground(_), Some(t))) => t.to_string(),
            _ => continue,
        };
        if ep.groundings.len() >= config.max_groundings {
            noticed = true;
            ep.segments.push(Segment::new(
                format!("\n{NOTICE_TEXT}\n"),
                SegmentSource::NoticeInjected,
            ));
            continue;
        }
        if let Err(e) = ground_and_critique(env, seq, &title, ep) {
            return Stop::Aborted(e.to_string());
        }
    }
    Stop::Invalid
}

fn ground_and_critique(env: &Environment<'_>, seq: &InteractionSequence, title: &str, ep: &mut Episode) -> Result<()> {
    let result = env.grounder.ground(title, env.config.k_per_ground)?;
    let item_list = grammar::render_item_list(&result, env.catalog)?;
    let feedback = env.user_agent.feedback(
        seq.target,
        &FeedbackRequest {
            history_titles: env.catalog.titles_of(&seq.history)?,
            grounded_title: title.to_string(),
            item_list: item_list.clone(),
            hits: result.ids(),
        },
    );
    ep.segments.push(Segment::new(
        format!("\n{item_list}\n"),
        SegmentSource::ItemListInjected,
    ));
    ep.segments.push(Segment::new(
        format!("{}\n", grammar::render_feedback(&feedback.text)),
        SegmentSource::FeedbackInjected,
    ));
    ep.groundings.push(result);
    Ok(())
}

/// Policy sampling seed for one attempt of one episode.
pub fn episode_seed(master: u64, episode_id: &str, attempt: usize) -> u64 {
    derive_seed(master, &format!("policy/{episode_id}/{attempt}"))
}

#[derive(Clone, Debug)]
pub enum GroupOutcome {
    Complete {
        episodes: Vec<EpisodeOutcome>,
        resampled: usize,
    },
    /// An episode stayed aborted after every retry.
    Dropped { episode_id: String, reason: String },
}

/// Samples `group_size` episodes for one user. Episode ids are `"{user_id}-{i}"`.
pub fn run_group(env: &Environment<'_>, seq: &InteractionSequence, master_seed: u64) -> Result<GroupOutcome> {
    let g = env.config.group_size;
    if g < 2 {
        return Err(Error::Config(format!("group size must be at least 2, got {g}")));
    }
    let mut episodes = Vec::with_capacity(g);
    let mut resampled = 0;
    for i in 0..g {
        let episode_id = format!("{}-{i}", seq.user_id);
        let mut attempt = 0;
        loop {
            let outcome = run_episode(env, seq, &episode_id, episode_seed(master_seed, &episode_id, attempt));
            if outcome.trajectory.status != EpisodeStatus::Aborted {
                episodes.push(outcome);
                break;
            }
            if attempt == env.config.abort_retries {
                return Ok(GroupOutcome::Dropped {
                    episode_id,
                    reason: outcome.abort_reason.unwrap_or_default(),
                });
            }
            attempt += 1;
            resampled += 1;
        }
    }
    Ok(GroupOutcome::Complete { episodes, resampled })
}

#[derive(Clone, Debug, Default)]
pub struct RolloutSummary {
    /// Trajectories of complete groups, in input order.
    pub episodes: Vec<EpisodeOutcome>,
    pub dropped_groups: usize,
    pub resampled_episodes: usize,
}

impl RolloutSummary {
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.episodes.iter().map(|e| e.trajectory.clone()).collect()
    }
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs one group per sequence on a bounded worker pool. Output order follows `seqs`.
pub fn run_rollouts(env: &Environment<'_>, seqs: &[InteractionSequence], master_seed: u64) -> Result<RolloutSummary> {
    env.config.validate()?;
    let outcomes = pool(env.config.parallelism)?.install(|| {
        seqs.par_iter()
            .map(|seq| run_group(env, seq, master_seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut summary = RolloutSummary::default();
    for outcome in outcomes {
        match outcome {
            GroupOutcome::Complete { episodes, resampled } => {
                summary.resampled_episodes += resampled;
                summary.episodes.extend(episodes);
            }
            GroupOutcome::Dropped { episode_id, reason } => {
                log::warn!("dropping group of episode {episode_id}: {reason}");
                summary.dropped_groups += 1;
            }
        }
    }
    if summary.dropped_groups > 0 {
        log::warn!("{} group(s) dropped after repeated aborts", summary.dropped_groups);
    }
    Ok(summary)
}

/// Runs one episode per sequence (no grouping), as used for evaluation and analyses.
pub fn run_single(
    env: &Environment<'_>,
    seqs: &[InteractionSequence],
    master_seed: u64,
) -> Result<Vec<EpisodeOutcome>> {
    env.config.validate()?;
    pool(env.config.parallelism)?.install(|| {
        Ok(seqs
            .par_iter()
            .map(|seq| {
                let id = format!("{}-0", seq.user_id);
                run_episode(env, seq, &id, episode_seed(master_seed, &id, 0))
            })
            .collect())
    })
}

/// The title of the last executed grounding, recovered from a stored trajectory.
pub fn last_grounded_title(trajectory: &Trajectory) -> Option<String> {
    let at = trajectory
        .segments
        .iter()
        .rposition(|s| s.source == SegmentSource::ItemListInjected)?;
    let turn = trajectory.segments[..at].iter().rev().find(|s| s.source.is_policy())?;
    grammar::parse_turn(&turn.text)
        .ok()?
        .iter()
        .rev()
        .find_map(|a| match &a.kind {
            ActionKind::Ground(t) => Some(t.trim().to_string()),
            _ => None,
        })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::agents::{ScriptedPolicy, SimulatedUserAgent};
    use crate::embed::{Embedder, ToyEmbedder};
    use crate::index::{build_index, EmbeddingStore};

    struct Fixture {
        catalog: ItemCatalog,
        grounder: Grounder,
        agent: SimulatedUserAgent,
    }

    fn fixture() -> Fixture {
        let titles: Vec<String> = (0..40).map(|i| format!("Item number {i}")).collect();
        let catalog = ItemCatalog::from_titles(titles).unwrap();
        let embedder: Arc<dyn Embedder> = Arc::new(ToyEmbedder::new(16, 3).unwrap());
        let store = build_index(&catalog, embedder.as_ref()).unwrap();
        let grounder = Grounder::new(Arc::new(store), embedder).unwrap();
        let agent = SimulatedUserAgent::new(Arc::new(catalog.clone()));
        Fixture {
            catalog,
            grounder,
            agent,
        }
    }

    fn seq() -> InteractionSequence {
        InteractionSequence {
            user_id: UserId(3),
            history: vec![ItemId(1), ItemId(2)],
            target: ItemId(7),
        }
    }

    fn run(turns: &[&str], config: &RolloutConfig) -> EpisodeOutcome {
        let f = fixture();
        let mut policy = ScriptedPolicy::default();
        policy.insert("*", turns.iter().map(|s| s.to_string()).collect());
        let env = Environment {
            catalog: &f.catalog,
            grounder: &f.grounder,
            policy: &policy,
            user_agent: &f.agent,
            recall: None,
            config,
        };
        run_episode(&env, &seq(), "3-0", 0)
    }

    const GROUND: &str = "<think>look</think><ground>Item number 7</ground>";
    const ANSWER: &str = "<think>done</think><answer>Item number 7</answer>";

    #[test]
    fn immediate_answer_completes() {
        let out = run(&[ANSWER], &RolloutConfig::default());
        let t = &out.trajectory;
        assert_eq!(t.status, EpisodeStatus::Completed);
        assert_eq!(t.grounding_count, 0);
        assert_eq!(t.answer_title.as_deref(), Some("Item number 7"));
        assert!(t.prompt.starts_with(prompts::SYSTEM_PROMPT));
    }

    #[test]
    fn two_groundings_interleave_injections() {
        let out = run(
            &[GROUND, GROUND, "<think>a</think>", "<think>b</think>", ANSWER],
            &RolloutConfig::default(),
        );
        let t = &out.trajectory;
        assert_eq!(t.status, EpisodeStatus::Completed);
        assert_eq!(t.grounding_count, 2);
        use SegmentSource::*;
        let sources: Vec<_> = t.segments.iter().map(|s| s.source).collect();
        assert_eq!(
            sources,
            vec![
                PolicyGenerated,
                ItemListInjected,
                FeedbackInjected,
                PolicyGenerated,
                ItemListInjected,
                FeedbackInjected,
                PolicyGenerated,
                PolicyGenerated,
                PolicyGenerated
            ]
        );
        assert_eq!(
            t.policy_text(),
            [GROUND, GROUND, "<think>a</think>", "<think>b</think>", ANSWER].concat()
        );
        assert_eq!(last_grounded_title(t).as_deref(), Some("Item number 7"));
    }

    #[test]
    fn cap_injects_one_notice_then_requires_answer() {
        let config = RolloutConfig {
            max_groundings: 2,
            ..RolloutConfig::default()
        };
        let out = run(&[GROUND, GROUND, GROUND, ANSWER], &config);
        let t = &out.trajectory;
        assert_eq!(t.status, EpisodeStatus::Completed);
        assert_eq!(t.grounding_count, 2);
        let notices: Vec<_> = t
            .segments
            .iter()
            .filter(|s| s.source == SegmentSource::NoticeInjected)
            .collect();
        assert_eq!(notices.len(), 1);
        assert_eq!(notices[0].text, format!("\n{NOTICE_TEXT}\n"));

        let refused = run(&[GROUND, GROUND, GROUND, GROUND, ANSWER], &config);
        assert_eq!(refused.trajectory.status, EpisodeStatus::FormatInvalid);
        assert_eq!(refused.trajectory.grounding_count, 2);
        assert_eq!(refused.trajectory.answer_title, None);
    }

    #[test]
    fn seven_grounds_with_default_cap() {
        let turns = vec![GROUND; 8];
        let out = run(&turns, &RolloutConfig::default());
        let t = &out.trajectory;
        assert_eq!(t.grounding_count, 6);
        assert_eq!(t.status, EpisodeStatus::FormatInvalid);
        let notice_at = t
            .segments
            .iter()
            .position(|s| s.source == SegmentSource::NoticeInjected)
            .unwrap();
        let lists_before = t.segments[..notice_at]
            .iter()
            .filter(|s| s.source == SegmentSource::ItemListInjected)
            .count();
        assert_eq!(lists_before, 6);
    }

    #[test]
    fn grammar_violation_and_turn_exhaustion_are_invalid() {
        assert_eq!(
            run(&["hello"], &RolloutConfig::default()).trajectory.status,
            EpisodeStatus::FormatInvalid
        );
        let thinks = vec!["<think>x</think>"; 8];
        assert_eq!(
            run(&thinks, &RolloutConfig::default()).trajectory.status,
            EpisodeStatus::FormatInvalid
        );
    }

    #[test]
    fn exhausted_script_aborts() {
        let out = run(&[GROUND], &RolloutConfig::default());
        assert_eq!(out.trajectory.status, EpisodeStatus::Aborted);
        assert!(out.abort_reason.is_some());
    }

    #[test]
    fn fallback_recall_excludes_history_and_follows_distance() {
        let rows = vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0, 0.5, 0.0, 2.0, 0.0];
        let store = EmbeddingStore::new(2, rows).unwrap();
        let grounder = Grounder::new(Arc::new(store), Arc::new(ToyEmbedder::new(2, 0).unwrap())).unwrap();
        let s = InteractionSequence {
            user_id: UserId(1),
            history: vec![ItemId(0)],
            target: ItemId(1),
        };
        let recall = initial_recall(&s, &grounder, None, 4).unwrap();
        assert_eq!(recall, vec![ItemId(3), ItemId(1), ItemId(4), ItemId(2)]);

        let table = RecallTable::new([RecallRecord {
            user_id: UserId(1),
            items: vec![ItemId(2)],
        }]);
        let padded = initial_recall(&s, &grounder, Some(&table), 3).unwrap();
        assert_eq!(padded, vec![ItemId(2), ItemId(3), ItemId(1)]);
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        assert_eq!(RolloutConfig::default().turns(), 8);
        let bad = RolloutConfig {
            max_turns: Some(6),
            ..RolloutConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = RolloutConfig {
            k_per_ground: 0,
            ..RolloutConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn scripted_group_is_identical_and_aborts_drop() {
        let f = fixture();
        let mut policy = ScriptedPolicy::default();
        policy.insert("*", vec![GROUND.into(), ANSWER.into()]);
        let config = RolloutConfig::default();
        let env = Environment {
            catalog: &f.catalog,
            grounder: &f.grounder,
            policy: &policy,
            user_agent: &f.agent,
            recall: None,
            config: &config,
        };
        let GroupOutcome::Complete { episodes, resampled } = run_group(&env, &seq(), 1).unwrap() else {
            panic!("group dropped");
        };
        assert_eq!(episodes.len(), 6);
        assert_eq!(resampled, 0);
        let first = &episodes[0].trajectory;
        for (i, e) in episodes.iter().enumerate() {
            assert_eq!(e.trajectory.episode_id, format!("3-{i}"));
            assert_eq!(e.trajectory.segments, first.segments);
        }

        let mut broken = ScriptedPolicy::default();
        broken.insert("3-4", vec![]);
        broken.insert("*", vec![ANSWER.into()]);
        let env = Environment { policy: &broken, ..env };
        assert!(
            matches!(run_group(&env, &seq(), 1).unwrap(), GroupOutcome::Dropped { ref episode_id, .. } if episode_id == "3-4")
        );
        let summary = run_rollouts(&env, &[seq()], 1).unwrap();
        assert_eq!(summary.dropped_groups, 1);
        assert!(summary.episodes.is_empty());
    }
}
