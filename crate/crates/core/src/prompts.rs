//! Prompt templates for the recommendation policy and the user agent.

/// System prompt describing the think / ground / answer protocol.
pub const SYSTEM_PROMPT: &str = "You are a helpful recommendation agent who provides well-reasoned and detailed responses.
You must conduct reasoning inside <think> and </think> first every time you get new information.
After reasoning, if you want to find items in the item database, you can call a grounding engine by using <ground> item title </ground>. It will return the top relevant items between <item_list> and </item_list>, as well as feedback from a user agent between <feedback> and </feedback>.
You can use the feedback to conduct further reasoning inside <think> and </think>, or you may call the grounding engine again. You may repeat the reasoning and grounding process as many times as needed.
If you find that no further external information is needed, you can directly provide one recommended item inside <answer> and </answer>.";

/// User-agent prompt; the three `{}` slots take the history, the grounded title and the
/// rendered item list, in that order.
pub const USER_AGENT_TEMPLATE: &str = "Act as a user agent.
Record of items you've interacted with: {}
Now, you will be provided with an item title and a list of items from the database related to the item. Reflect on whether the item title is appropriate and provide feedback.
Important rules:
1. Summarize your interests based on your interaction history.
2. Provide feedback on the item title in relation to your interests.
3. Your feedback may affirm or deny the suitability of the given item title, or offer suggestions for improvement.
4. You may incorporate the list of items related to the item title when providing feedback.
Given item title: {}
List of items related to the title: {}
Output your feedback.";

fn numbered(titles: &[String]) -> String {
    titles
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}\n", i + 1, t))
        .collect()
}

/// User message: chronological history, then the initial recall list.
pub fn user_prompt(history_titles: &[String], recall_titles: &[String]) -> String {
    format!(
        "The user has interacted with the following items in chronological order:\n{}\n\
         Initial list of candidate items from the item database:\n{}\n\
         Recommend the next item for this user.",
        numbered(history_titles),
        numbered(recall_titles)
    )
}

/// The full prompt stored with a trajectory.
pub fn episode_prompt(user_prompt: &str) -> String {
    format!("{SYSTEM_PROMPT}\n\n{user_prompt}")
}

pub fn user_agent_prompt(history_titles: &[String], grounded_title: &str, item_list: &str) -> String {
    let history = history_titles.join(", ");
    let mut slots = [history.as_str(), grounded_title, item_list].into_iter();
    let mut out = String::with_capacity(USER_AGENT_TEMPLATE.len() + 256);
    let mut parts = USER_AGENT_TEMPLATE.split("{}").peekable();
    while let Some(part) = parts.next() {
        out.push_str(part);
        if parts.peek().is_some() {
            out.push_str(slots.next().unwrap_or_default());
        }
    }
    out
}
