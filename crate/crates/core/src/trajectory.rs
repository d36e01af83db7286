//! Trajectory records: the transcript of one episode split into source-tagged segments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::UserId;
use crate::error::Result;
use crate::jsonl;

/// Who produced a piece of transcript text. Everything except `PolicyGenerated` is
/// excluded from the policy loss.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentSource {
    PolicyGenerated,
    ItemListInjected,
    FeedbackInjected,
    RecallInjected,
    NoticeInjected,
}

impl SegmentSource {
    pub fn is_policy(self) -> bool {
        self == SegmentSource::PolicyGenerated
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub source: SegmentSource,
}

impl Segment {
    pub fn new(text: impl Into<String>, source: SegmentSource) -> Self {
        Self {
            text: text.into(),
            source,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Completed,
    FormatInvalid,
    Aborted,
}

/// One line of the trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub user_id: UserId,
    /// System prompt and user message, not part of the response transcript.
    pub prompt: String,
    pub segments: Vec<Segment>,
    pub grounding_count: usize,
    pub answer_title: Option<String>,
    pub status: EpisodeStatus,
}

impl Trajectory {
    /// The response transcript: every segment concatenated in order.
    pub fn transcript(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Byte span of each segment within [`Trajectory::transcript`].
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.segments
            .iter()
            .map(|s| {
                let span = (at, at + s.text.len());
                at = span.1;
                span
            })
            .collect()
    }

    /// Concatenation of policy-generated text only.
    pub fn policy_text(&self) -> String {
        self.segments
            .iter()
            .filter(|s| s.source.is_policy())
            .map(|s| s.text.as_str())
            .collect()
    }

    /// Per-byte loss mask over the transcript: `true` where the policy wrote the byte.
    pub fn byte_mask(&self) -> Vec<bool> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.source.is_policy(), s.text.len()))
            .collect()
    }

    pub fn load_all(path: &Path) -> Result<Vec<Trajectory>> {
        jsonl::read_values(path)
    }

    pub fn save_all(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
        jsonl::write(path, trajectories)
    }
}
