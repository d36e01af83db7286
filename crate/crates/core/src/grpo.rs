//! Episode rewards, group-relative advantages and the masked clipped policy loss.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::grammar;
use crate::index::Grounder;
use crate::trajectory::{EpisodeStatus, Trajectory};

/// Reward for any episode that breaks the response format.
pub const FORMAT_PENALTY: f64 = -0.5;
/// Added to the group standard deviation before dividing.
pub const STD_EPS: f64 = 1e-8;

/// NDCG of a single relevant item at 1-based `rank`.
pub fn ndcg_reward(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub rank: Option<usize>,
    pub format_valid: bool,
    pub reward: f64,
}

impl RewardRecord {
    pub fn from_rank(rank: usize) -> Self {
        Self {
            rank: Some(rank),
            format_valid: true,
            reward: ndcg_reward(rank),
        }
    }

    pub fn invalid() -> Self {
        Self {
            rank: None,
            format_valid: false,
            reward: FORMAT_PENALTY,
        }
    }
}

/// Whether a stored trajectory passes the format gate.
pub fn format_valid(trajectory: &Trajectory) -> bool {
    trajectory.status == EpisodeStatus::Completed
        && trajectory.answer_title.is_some()
        && grammar::validate_segments(&trajectory.segments).is_valid()
}

pub fn reward(trajectory: &Trajectory, grounder: &Grounder, target: ItemId) -> Result<RewardRecord> {
    if trajectory.status == EpisodeStatus::Aborted {
        return Err(Error::Schema {
            episode_id: trajectory.episode_id.clone(),
            message: "aborted episodes carry no reward".into(),
        });
    }
    match (&trajectory.answer_title, format_valid(trajectory)) {
        (Some(title), true) => Ok(RewardRecord::from_rank(grounder.rank_of(title, target)?)),
        _ => Ok(RewardRecord::invalid()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// All rewards equal; advantages are all zero.
    pub degenerate: bool,
}

/// Standardizes rewards within a group using the population standard deviation.
pub fn advantages(rewards: &[f64]) -> Result<GroupScore> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite {
            field: "reward",
            index: i,
        });
    }
    let n = rewards.len() as f64;
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt() + STD_EPS;
        rewards.iter().map(|r| (r - mean) / scale).collect()
    };
    Ok(GroupScore {
        rewards: rewards.to_vec(),
        advantages,
        degenerate,
    })
}

/// Per-token log-probabilities of one response under the current, old and reference
/// policies. `mask[i]` is true when token `i` was written by the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScores {
    pub token_ids: Vec<u32>,
    pub logp_theta: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.mask.len();
        let lens = [
            self.token_ids.len(),
            self.logp_theta.len(),
            self.logp_old.len(),
            self.logp_ref.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidInput(format!(
                "token arrays differ in length: ids {}, theta {}, old {}, ref {}, mask {n}",
                lens[0], lens[1], lens[2], lens[3]
            )));
        }
        for (field, values) in [
            ("logp_theta", &self.logp_theta),
            ("logp_old", &self.logp_old),
            ("logp_ref", &self.logp_ref),
        ] {
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { field, index });
            }
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("no policy-generated token in the mask".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossAggregation {
    /// Mean over policy tokens.
    #[default]
    TokenMean,
    /// Sum over policy tokens.
    SequenceSum,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoHyper {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub aggregation: LossAggregation,
}

impl Default for GrpoHyper {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 1e-3,
            aggregation: LossAggregation::TokenMean,
        }
    }
}

impl GrpoHyper {
    /// Any positive finite `clip_eps` is accepted so that very wide clip ranges can
    /// disable clipping.
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0) {
            return Err(Error::Config(format!(
                "grpo.clip_eps must be positive, got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(Error::Config(format!(
                "grpo.kl_beta must be non-negative, got {}",
                self.kl_beta
            )));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub mean_ratio: f64,
    /// Fraction of policy tokens where the clipped branch was selected.
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

/// `k3` estimator of KL(θ ‖ ref) at one token; non-negative for finite input.
pub fn k3(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

/// Clipped surrogate minus the KL penalty, negated and aggregated over policy tokens.
pub fn masked_grpo_loss(scores: &TokenScores, advantage: f64, hyper: &GrpoHyper) -> Result<(f64, LossDiagnostics)> {
    hyper.validate()?;
    if !advantage.is_finite() {
        return Err(Error::NonFinite {
            field: "advantage",
            index: 0,
        });
    }
    scores.check()?;
    let (lo, hi) = (1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps);
    let mut total = 0.0;
    let mut ratio_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut n = 0usize;
    for i in 0..scores.len() {
        if !scores.mask[i] {
            continue;
        }
        let ratio = (scores.logp_theta[i] - scores.logp_old[i]).exp();
        let unclipped = ratio * advantage;
        let clipped_term = ratio.clamp(lo, hi) * advantage;
        if clipped_term < unclipped {
            clipped += 1;
        }
        let kl = k3(scores.logp_theta[i], scores.logp_ref[i]);
        total += unclipped.min(clipped_term) - hyper.kl_beta * kl;
        ratio_sum += ratio;
        kl_sum += kl;
        n += 1;
    }
    let count = n as f64;
    let loss = match hyper.aggregation {
        LossAggregation::TokenMean => -total / count,
        LossAggregation::SequenceSum => -total,
    };
    Ok((
        loss,
        LossDiagnostics {
            mean_ratio: ratio_sum / count,
            clip_fraction: clipped as f64 / count,
            mean_kl: kl_sum / count,
            tokens: n,
        },
    ))
}

/// Token mask from tokenizer offsets into the transcript. A token counts as policy output
/// only when its whole byte range lies in policy-generated text; empty ranges never do.
pub fn token_mask(trajectory: &Trajectory, offsets: &[(usize, usize)]) -> Vec<bool> {
    let bytes = trajectory.byte_mask();
    offsets
        .iter()
        .map(|&(start, end)| start < end && end <= bytes.len() && bytes[start..end].iter().all(|&b| b))
        .collect()
}

/// One line of the log-probability file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogprobRecord {
    pub episode_id: String,
    pub token_ids: Vec<u32>,
    pub logp_theta: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub mask: Vec<u8>,
}

impl LogprobRecord {
    pub fn token_scores(&self) -> Result<TokenScores> {
        let schema = |message: String| Error::Schema {
            episode_id: self.episode_id.clone(),
            message,
        };
        let mask = self
            .mask
            .iter()
            .enumerate()
            .map(|(i, &m)| match m {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(schema(format!("mask[{i}] is {other}, expected 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let scores = TokenScores {
            token_ids: self.token_ids.clone(),
            logp_theta: self.logp_theta.clone(),
            logp_old: self.logp_old.clone(),
            logp_ref: self.logp_ref.clone(),
            mask,
        };
        scores.check().map_err(|e| schema(e.to_string()))?;
        Ok(scores)
    }
}

/// One line of the scored file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub episode_id: String,
    pub reward: f64,
    pub advantage: f64,
    pub loss: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreOutcome {
    /// Sorted by episode id.
    pub rows: Vec<ScoredRow>,
    pub skipped_groups: usize,
}

/// Scores every complete group. Trajectories are grouped by user; a group missing a
/// member, containing an aborted episode, or lacking log-probs for a member is skipped.
pub fn score_groups(
    trajectories: &[Trajectory],
    logprobs: &[LogprobRecord],
    targets: &HashMap<UserId, ItemId>,
    grounder: &Grounder,
    hyper: &GrpoHyper,
    group_size: usize,
) -> Result<ScoreOutcome> {
    hyper.validate()?;
    let mut seen = HashSet::new();
    for t in trajectories {
        if !seen.insert(t.episode_id.as_str()) {
            return Err(Error::Schema {
                episode_id: t.episode_id.clone(),
                message: "duplicate trajectory".into(),
            });
        }
    }
    let mut by_episode: HashMap<&str, &LogprobRecord> = HashMap::new();
    for r in logprobs {
        if !seen.contains(r.episode_id.as_str()) {
            return Err(Error::Schema {
                episode_id: r.episode_id.clone(),
                message: "log-probs for an unknown episode".into(),
            });
        }
        if by_episode.insert(&r.episode_id, r).is_some() {
            return Err(Error::Schema {
                episode_id: r.episode_id.clone(),
                message: "duplicate log-prob record".into(),
            });
        }
    }

    let mut groups: BTreeMap<UserId, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        groups.entry(t.user_id).or_default().push(t);
    }
    let mut outcome = ScoreOutcome::default();
    for (user, mut members) in groups {
        members.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
        let complete = members.len() == group_size
            && members
                .iter()
                .all(|t| t.status != EpisodeStatus::Aborted && by_episode.contains_key(t.episode_id.as_str()));
        if !complete {
            log::warn!(
                "skipping incomplete group of user {user} ({} of {group_size} usable)",
                members.len()
            );
            outcome.skipped_groups += 1;
            continue;
        }
        let target = *targets.get(&user).ok_or_else(|| Error::Schema {
            episode_id: members[0].episode_id.clone(),
            message: format!("no target for user {user}"),
        })?;
        let rewards = members
            .iter()
            .map(|t| reward(t, grounder, target).map(|r| r.reward))
            .collect::<Result<Vec<f64>>>()?;
        let score = advantages(&rewards)?;
        for (i, t) in members.iter().enumerate() {
            let scores = by_episode[t.episode_id.as_str()].token_scores()?;
            let (loss, diag) = masked_grpo_loss(&scores, score.advantages[i], hyper).map_err(|e| Error::Schema {
                episode_id: t.episode_id.clone(),
                message: e.to_string(),
            })?;
            outcome.rows.push(ScoredRow {
                episode_id: t.episode_id.clone(),
                reward: score.rewards[i],
                advantage: score.advantages[i],
                loss,
                clip_frac: diag.clip_fraction,
                kl: diag.mean_kl,
            });
        }
    }
    outcome.rows.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    if outcome.skipped_groups > 0 {
        log::warn!("{} incomplete group(s) skipped", outcome.skipped_groups);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn scores(theta: Vec<f64>, old: Vec<f64>, reference: Vec<f64>, mask: Vec<bool>) -> TokenScores {
        TokenScores {
            token_ids: (0..mask.len() as u32).collect(),
            logp_theta: theta,
            logp_old: old,
            logp_ref: reference,
            mask,
        }
    }

    #[test]
    fn reward_values() {
        assert_eq!(ndcg_reward(1), 1.0);
        assert_abs_diff_eq!(ndcg_reward(3), 0.5, epsilon = 1e-12);
        assert_eq!(RewardRecord::invalid().reward, -0.5);
    }

    #[test]
    fn two_element_group() {
        let g = advantages(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g.advantages[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(g.advantages[1], -1.0, epsilon = 1e-7);
        assert!(!g.degenerate);
    }

    #[test]
    fn degenerate_and_tiny_groups() {
        let g = advantages(&[0.5, 0.5, 0.5]).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.advantages, vec![0.0; 3]);
        assert!(advantages(&[1.0]).is_err());
        assert!(matches!(
            advantages(&[1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn identical_policies_give_minus_advantage() {
        let s = scores(
            vec![-1.0, -2.0, -0.5],
            vec![-1.0, -2.0, -0.5],
            vec![-1.0, -2.0, -0.5],
            vec![true, false, true],
        );
        let (loss, diag) = masked_grpo_loss(&s, 0.7, &GrpoHyper::default()).unwrap();
        assert_abs_diff_eq!(loss, -0.7, epsilon = 1e-15);
        assert_eq!(diag.mean_kl, 0.0);
        assert_eq!(diag.mean_ratio, 1.0);
        assert_eq!(diag.tokens, 2);
    }

    #[test]
    fn clip_binds_above_one_plus_eps() {
        let s = scores(vec![2f64.ln()], vec![0.0], vec![2f64.ln()], vec![true]);
        let hyper = GrpoHyper {
            kl_beta: 0.0,
            ..GrpoHyper::default()
        };
        let (loss, diag) = masked_grpo_loss(&s, 1.0, &hyper).unwrap();
        assert_abs_diff_eq!(loss, -1.2, epsilon = 1e-12);
        assert_eq!(diag.clip_fraction, 1.0);
    }

    #[test]
    fn sequence_sum_aggregation() {
        let s = scores(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], vec![true, true, false, true]);
        let hyper = GrpoHyper {
            aggregation: LossAggregation::SequenceSum,
            ..GrpoHyper::default()
        };
        assert_abs_diff_eq!(masked_grpo_loss(&s, 0.5, &hyper).unwrap().0, -1.5, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_inputs_name_the_index() {
        let s = scores(
            vec![0.0, 0.0],
            vec![0.0, f64::INFINITY],
            vec![0.0, 0.0],
            vec![true, false],
        );
        let err = masked_grpo_loss(&s, 1.0, &GrpoHyper::default()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::NonFinite {
                    field: "logp_old",
                    index: 1
                }
            ),
            "{err}"
        );
        let none = scores(vec![0.0], vec![0.0], vec![0.0], vec![false]);
        assert!(masked_grpo_loss(&none, 1.0, &GrpoHyper::default()).is_err());
    }

    #[test]
    fn k3_is_nonnegative() {
        for (a, b) in [(0.0, 0.0), (-3.0, -0.1), (-0.1, -3.0), (-20.0, -1e-9)] {
            assert!(k3(a, b) >= 0.0);
        }
    }

    #[test]
    fn logprob_mask_must_be_binary() {
        let r = LogprobRecord {
            episode_id: "1-0".into(),
            token_ids: vec![1],
            logp_theta: vec![0.0],
            logp_old: vec![0.0],
            logp_ref: vec![0.0],
            mask: vec![2],
        };
        assert!(matches!(r.token_scores(), Err(Error::Schema { ref episode_id, .. }) if episode_id == "1-0"));
    }
}
