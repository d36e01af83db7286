//! Property tests for the engine invariants.

use std::sync::Arc;

use mgfrec_core::agents::{Policy, PolicyTurnRequest, SimulatedUserAgent};
use mgfrec_core::catalog::{split, InteractionSequence, ItemCatalog, ItemId, UserId};
use mgfrec_core::embed::ToyEmbedder;
use mgfrec_core::eval::metrics;
use mgfrec_core::grammar::{parse_turn, validate_segments, ActionKind};
use mgfrec_core::grpo::{advantages, k3, masked_grpo_loss, ndcg_reward, GrpoHyper, TokenScores};
use mgfrec_core::index::{build_index, EmbeddingStore, Grounder};
use mgfrec_core::rollout::{run_episode, Environment, RolloutConfig};
use mgfrec_core::{EpisodeStatus, SegmentSource};
use proptest::prelude::*;

fn body() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.'!?-]{0,24}"
}

fn title() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9][a-zA-Z0-9 ,.'-]{0,20}"
}

fn turn() -> impl Strategy<Value = Vec<ActionKind>> {
    (
        prop::collection::vec(body().prop_map(ActionKind::Think), 1..4),
        prop_oneof![
            Just(None),
            title().prop_map(|t| Some(ActionKind::Ground(t))),
            title().prop_map(|t| Some(ActionKind::Answer(t))),
        ],
    )
        .prop_map(|(mut thinks, last)| {
            thinks.extend(last);
            thinks
        })
}

fn token_scores(max: usize) -> impl Strategy<Value = TokenScores> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-6.0f64..-0.01, n),
            prop::collection::vec(-6.0f64..-0.01, n),
            prop::collection::vec(-6.0f64..-0.01, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(theta, old, reference, mut mask)| {
                mask[0] = true;
                TokenScores {
                    token_ids: (0..theta.len() as u32).collect(),
                    logp_theta: theta,
                    logp_old: old,
                    logp_ref: reference,
                    mask,
                }
            })
    })
}

proptest! {
    #[test]
    fn rendered_turns_parse_back(actions in turn(), seps in prop::collection::vec("[ \n\t]{0,3}", 5)) {
        let mut text = String::new();
        for (i, a) in actions.iter().enumerate() {
            text.push_str(&seps[i % seps.len()]);
            text.push_str(&a.render());
        }
        let parsed = parse_turn(&text).unwrap();
        let kinds: Vec<ActionKind> = parsed.iter().map(|a| a.kind.clone()).collect();
        prop_assert_eq!(kinds, actions);
        for a in &parsed {
            prop_assert_eq!(&text[a.span.0..a.span.1], a.kind.render());
        }
    }

    #[test]
    fn parser_never_panics(text in "(<|>|/|think|ground|answer|item_list|feedback|[a-z ]){0,60}") {
        let _ = parse_turn(&text);
    }

    #[test]
    fn advantages_ignore_shift_and_scale(
        rewards in prop::collection::vec(-1.0f64..1.0, 2..12),
        shift in -5.0f64..5.0,
        scale in 0.5f64..20.0,
    ) {
        let base = advantages(&rewards).unwrap();
        prop_assume!(!base.degenerate);
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let moved: Vec<f64> = rewards.iter().map(|r| (r + shift) * scale).collect();
        let other = advantages(&moved).unwrap();
        for (a, b) in base.advantages.iter().zip(&other.advantages) {
            // the 1e-8 guard bends this by about 1e-8 / std
            prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn masked_tokens_have_no_influence(scores in token_scores(40), adv in -3.0f64..3.0, delta in -5.0f64..5.0) {
        let hyper = GrpoHyper::default();
        let (base, _) = masked_grpo_loss(&scores, adv, &hyper).unwrap();
        for i in (0..scores.len()).filter(|&i| !scores.mask[i]) {
            let mut p = scores.clone();
            p.logp_theta[i] += delta;
            p.logp_old[i] -= delta;
            p.logp_ref[i] += delta / 2.0;
            prop_assert_eq!(masked_grpo_loss(&p, adv, &hyper).unwrap().0, base);
        }
    }

    #[test]
    fn wide_clip_reduces_to_mean_ratio(scores in token_scores(40), adv in -3.0f64..3.0) {
        let hyper = GrpoHyper { clip_eps: 1e9, kl_beta: 0.0, ..GrpoHyper::default() };
        let (loss, diag) = masked_grpo_loss(&scores, adv, &hyper).unwrap();
        prop_assert!((loss + adv * diag.mean_ratio).abs() < 1e-10);
    }

    #[test]
    fn k3_nonnegative(a in -50.0f64..0.0, b in -50.0f64..0.0) {
        prop_assert!(k3(a, b) >= 0.0);
    }

    #[test]
    fn reward_strictly_decreases(r in 1usize..100_000) {
        prop_assert!(ndcg_reward(r) > ndcg_reward(r + 1));
        prop_assert!(ndcg_reward(r) > 0.0 && ndcg_reward(r) <= 1.0);
    }

    #[test]
    fn metrics_bounded_and_permutation_invariant(ranks in prop::collection::vec(prop::option::of(1usize..60), 1..30)) {
        let m = metrics(&ranks, &[5, 10, 20]);
        for c in &m {
            prop_assert!(c.ndcg <= c.hr + 1e-15);
        }
        prop_assert!(m[0].hr <= m[1].hr && m[1].hr <= m[2].hr);
        prop_assert!(m[0].ndcg <= m[1].ndcg && m[1].ndcg <= m[2].ndcg);
        let mut reversed = ranks.clone();
        reversed.reverse();
        let r = metrics(&reversed, &[5, 10, 20]);
        for (a, b) in m.iter().zip(&r) {
            prop_assert!((a.hr - b.hr).abs() < 1e-12 && (a.ndcg - b.ndcg).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_matches_full_scan(
        rows in prop::collection::vec(prop::collection::vec(-3i8..3, 3), 1..60),
        query in prop::collection::vec(-3i8..3, 3),
        k in 1usize..15,
    ) {
        let flat: Vec<f32> = rows.iter().flatten().map(|&v| f32::from(v)).collect();
        let store = EmbeddingStore::new(3, flat).unwrap();
        let q: Vec<f32> = query.iter().map(|&v| f32::from(v)).collect();
        let mut oracle: Vec<(i64, u32)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&query).map(|(a, b)| (i64::from(*a) - i64::from(*b)).pow(2)).sum(), i as u32))
            .collect();
        oracle.sort();
        let got: Vec<u32> = store.nearest(&q, k).unwrap().iter().map(|h| h.item_id.0).collect();
        let want: Vec<u32> = oracle.iter().take(k).map(|&(_, i)| i).collect();
        prop_assert_eq!(got, want);
        for (pos, &(_, id)) in oracle.iter().enumerate() {
            prop_assert_eq!(store.rank_of_embedding(&q, ItemId(id)).unwrap(), pos + 1);
        }
    }

    #[test]
    fn split_partitions_users(n in 10usize..80, seed in any::<u64>()) {
        let seqs: Vec<InteractionSequence> = (0..n as u64)
            .map(|u| InteractionSequence { user_id: UserId(u), history: vec![ItemId(0)], target: ItemId(1) })
            .collect();
        let s = split(&seqs, (8, 1, 1), seed).unwrap();
        prop_assert_eq!(&s, &split(&seqs, (8, 1, 1), seed).unwrap());
        let mut all: Vec<u64> = s.train.iter().chain(&s.valid).chain(&s.test).map(|x| x.user_id.0).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
    }
}

/// Replays arbitrary text chosen per turn from a fixed pool.
struct SoupPolicy {
    turns: Vec<String>,
}

impl Policy for SoupPolicy {
    fn turn(&self, request: &PolicyTurnRequest<'_>) -> mgfrec_core::Result<String> {
        Ok(self.turns[request.turn_index % self.turns.len()].clone())
    }
}

fn soup_turn() -> impl Strategy<Value = String> {
    prop_oneof![
        turn().prop_map(|t| t.iter().map(ActionKind::render).collect::<String>()),
        Just("<think>x</think><ground>Item 3</ground>".to_string()),
        "(<|>|/|think|ground|answer|feedback|Item 1|[a-z ]){0,30}",
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_terminate_with_sound_masks(turns in prop::collection::vec(soup_turn(), 1..10), cap in 1usize..4) {
        let catalog = ItemCatalog::from_titles((0..12).map(|i| format!("Item {i}")).collect()).unwrap();
        let embedder = Arc::new(ToyEmbedder::new(8, 1).unwrap());
        let store = build_index(&catalog, embedder.as_ref()).unwrap();
        let grounder = Grounder::new(Arc::new(store), embedder).unwrap();
        let agent = SimulatedUserAgent::new(Arc::new(catalog.clone()));
        let policy = SoupPolicy { turns: turns.clone() };
        let config = RolloutConfig { max_groundings: cap, recall_size: 3, k_per_ground: 4, ..RolloutConfig::default() };
        let env = Environment { catalog: &catalog, grounder: &grounder, policy: &policy, user_agent: &agent, recall: None, config: &config };
        let seq = InteractionSequence { user_id: UserId(1), history: vec![ItemId(0)], target: ItemId(5) };
        let t = run_episode(&env, &seq, "1-0", 0).trajectory;

        let policy_turns = t.segments.iter().filter(|s| s.source.is_policy()).count();
        prop_assert!(policy_turns <= config.turns());
        let expected: String = (0..policy_turns).map(|i| turns[i % turns.len()].as_str()).collect();
        prop_assert_eq!(t.policy_text(), expected);
        let lists = t.segments.iter().filter(|s| s.source == SegmentSource::ItemListInjected).count();
        prop_assert_eq!(t.grounding_count, lists);
        prop_assert!(t.grounding_count <= cap);
        prop_assert!(t.status != EpisodeStatus::Aborted);
        if t.status == EpisodeStatus::Completed {
            prop_assert!(t.answer_title.is_some());
            prop_assert!(validate_segments(&t.segments).is_valid());
        }
        let mask = t.byte_mask();
        for ((start, end), seg) in t.spans().into_iter().zip(&t.segments) {
            prop_assert!(mask[start..end].iter().all(|&m| m == seg.source.is_policy()));
        }
    }
}
