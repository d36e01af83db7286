//! Full-ranking metrics and the trajectory analyses.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::catalog::{InteractionSequence, ItemId, PopularityTable, UserId};
use crate::error::{Error, Result};
use crate::grpo::{format_valid, ndcg_reward};
use crate::index::Grounder;
use crate::rollout::{self, Environment, RolloutConfig};
use crate::trajectory::Trajectory;

pub const CUTOFFS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_RANK_CEILING: usize = 4096;

/// HR@K and NDCG@K for one cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRank {
    pub episode_id: String,
    pub user_id: UserId,
    /// Absent for invalid or aborted episodes, which count as misses.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<CutoffMetrics>,
    pub samples: usize,
    pub misses: usize,
    pub ranks: Vec<EpisodeRank>,
    /// Free-form echo of the configuration used to produce the report.
    pub config: serde_json::Value,
}

/// Metrics over ranks where `None` is a miss at every cutoff.
pub fn metrics(ranks: &[Option<usize>], cutoffs: &[usize]) -> Vec<CutoffMetrics> {
    let n = ranks.len().max(1) as f64;
    cutoffs
        .iter()
        .map(|&k| {
            let hits = ranks.iter().flatten().filter(|&&r| r <= k);
            let (count, gain) = hits.fold((0usize, 0.0), |(c, g), &r| (c + 1, g + ndcg_reward(r)));
            CutoffMetrics {
                k,
                hr: count as f64 / n,
                ndcg: gain / n,
            }
        })
        .collect()
}

/// Ranks every trajectory's answer against its user's target. Each trajectory is one
/// sample; ranks are reported in episode-id order.
pub fn evaluate(
    trajectories: &[Trajectory],
    grounder: &Grounder,
    targets: &HashMap<UserId, ItemId>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut ranks = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let target = *targets.get(&t.user_id).ok_or_else(|| Error::Schema {
            episode_id: t.episode_id.clone(),
            message: format!("no target for user {}", t.user_id),
        })?;
        let rank = match &t.answer_title {
            Some(title) if format_valid(t) => Some(grounder.rank_of(title, target)?),
            _ => None,
        };
        ranks.push(EpisodeRank {
            episode_id: t.episode_id.clone(),
            user_id: t.user_id,
            rank,
        });
    }
    ranks.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    let values: Vec<Option<usize>> = ranks.iter().map(|r| r.rank).collect();
    Ok(EvalReport {
        metrics: metrics(&values, &CUTOFFS),
        samples: ranks.len(),
        misses: values.iter().filter(|r| r.is_none()).count(),
        ranks,
        config,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBin {
    /// 0 or 1 groundings.
    Low,
    /// 2 to 4.
    Medium,
    /// 5 or more.
    High,
}

impl FrequencyBin {
    pub fn of(groundings: usize) -> Self {
        match groundings {
            0..=1 => FrequencyBin::Low,
            2..=4 => FrequencyBin::Medium,
            _ => FrequencyBin::High,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: FrequencyBin,
    pub episodes: usize,
    /// Mean of 1/popularity over episodes with a finite difficulty; absent when none.
    pub mean_difficulty: Option<f64>,
    /// Episodes whose target never occurs in training.
    pub excluded_infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    /// Only bins with at least one episode.
    pub bins: Vec<BinStats>,
}

impl DifficultyReport {
    pub fn bin(&self, bin: FrequencyBin) -> Option<&BinStats> {
        self.bins.iter().find(|b| b.bin == bin)
    }
}

pub fn analyze_difficulty(
    trajectories: &[Trajectory],
    targets: &HashMap<UserId, ItemId>,
    popularity: &PopularityTable,
) -> Result<DifficultyReport> {
    let mut acc: BTreeMap<FrequencyBin, (usize, usize, f64, usize)> = BTreeMap::new();
    for t in trajectories {
        let target = *targets.get(&t.user_id).ok_or_else(|| Error::Schema {
            episode_id: t.episode_id.clone(),
            message: format!("no target for user {}", t.user_id),
        })?;
        let d = popularity.difficulty(target);
        let e = acc.entry(FrequencyBin::of(t.grounding_count)).or_default();
        e.0 += 1;
        if d.is_finite() {
            e.1 += 1;
            e.2 += d;
        } else {
            e.3 += 1;
        }
    }
    Ok(DifficultyReport {
        bins: acc
            .into_iter()
            .map(|(bin, (episodes, finite, sum, excluded))| BinStats {
                bin,
                episodes,
                mean_difficulty: (finite > 0).then(|| sum / finite as f64),
                excluded_infinite: excluded,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapPoint {
    pub cap: usize,
    /// Mean rank over episodes with a grounding and a rank within the ceiling.
    pub mean_rank: Option<f64>,
    pub counted: usize,
    pub without_grounding: usize,
    pub above_ceiling: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankVsCapReport {
    pub rank_ceiling: usize,
    pub points: Vec<CapPoint>,
}

/// Mean target rank of the last grounded title for each episode.
pub fn rank_point(
    cap: usize,
    last_titles: &[(Option<String>, ItemId)],
    grounder: &Grounder,
    ceiling: usize,
) -> Result<CapPoint> {
    let mut point = CapPoint {
        cap,
        mean_rank: None,
        counted: 0,
        without_grounding: 0,
        above_ceiling: 0,
    };
    let mut sum = 0.0;
    for (title, target) in last_titles {
        let Some(title) = title else {
            point.without_grounding += 1;
            continue;
        };
        let rank = grounder.rank_of(title, *target)?;
        if rank > ceiling {
            point.above_ceiling += 1;
        } else {
            point.counted += 1;
            sum += rank as f64;
        }
    }
    point.mean_rank = (point.counted > 0).then(|| sum / point.counted as f64);
    Ok(point)
}

/// Reruns one episode per sequence for each cap and reports the mean rank of the target
/// under the final grounded title.
pub fn analyze_rank_vs_cap(
    env: &Environment<'_>,
    seqs: &[InteractionSequence],
    caps: &[usize],
    ceiling: usize,
    master_seed: u64,
) -> Result<RankVsCapReport> {
    if caps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("caps must be sorted ascending".into()));
    }
    let mut points = Vec::with_capacity(caps.len());
    for &cap in caps {
        let config = RolloutConfig {
            max_groundings: cap,
            max_turns: None,
            ..env.config.clone()
        };
        let capped = Environment {
            config: &config,
            ..*env
        };
        let outcomes = rollout::run_single(&capped, seqs, master_seed)?;
        let titles: Vec<(Option<String>, ItemId)> = outcomes
            .iter()
            .zip(seqs)
            .map(|(o, s)| (o.groundings.last().map(|g| g.query_title.clone()), s.target))
            .collect();
        points.push(rank_point(cap, &titles, env.grounder, ceiling)?);
    }
    Ok(RankVsCapReport {
        rank_ceiling: ceiling,
        points,
    })
}
