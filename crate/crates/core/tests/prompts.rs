//! Prompt rendering pinned against hand-written golden files.

use mgfrec_core::agents::{FeedbackRequest, RemoteUserAgent};
use mgfrec_core::prompts;

const USER_AGENT_GOLDEN: &str = include_str!("data/user_agent_prompt.txt");
const EPISODE_GOLDEN: &str = include_str!("data/episode_prompt.txt");

fn titles(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn user_agent_prompt_matches_golden() {
    let request = FeedbackRequest {
        history_titles: titles(&["Kind of Blue", "Blue Train", "Giant Steps"]),
        grounded_title: "A Love Supreme".into(),
        item_list: "<item_list>\n1. A Love Supreme\n2. Giant Steps\n</item_list>".into(),
        hits: vec![],
    };
    assert_eq!(RemoteUserAgent::prompt(&request), USER_AGENT_GOLDEN);
}

#[test]
fn episode_prompt_matches_golden() {
    let user = prompts::user_prompt(
        &titles(&["Kind of Blue", "Blue Train"]),
        &titles(&["Giant Steps", "Time Out", "Mingus Ah Um"]),
    );
    assert_eq!(prompts::episode_prompt(&user), EPISODE_GOLDEN);
}
