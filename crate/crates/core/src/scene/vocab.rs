//! The closed caption vocabulary.
//!
//! Agent captions come from the rule-based captioner (motion and obstacle
//! templates); relation captions describe a pair of agents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STANDING_STILL: usize = 0;
pub const WALKING_SLOWLY: usize = 1;
pub const WALKING: usize = 2;
pub const OBSTACLE_RIGHT: usize = 3;
pub const OBSTACLE_FRONT: usize = 4;
pub const OBSTACLE_LEFT: usize = 5;
pub const OBSTACLE_NOT_AHEAD: usize = 6;
pub const NO_OBSTACLE: usize = 7;
pub const WALKING_TOGETHER: usize = 8;
pub const STANDING_TOGETHER: usize = 9;

pub const VOCABULARY: [&str; 10] = [
    "The person is standing still.",
    "The person is walking slowly.",
    "The person is walking.",
    "There is an obstacle on the right.",
    "There is an obstacle in front.",
    "There is an obstacle on the left.",
    "There is no obstacle in the heading direction of the person.",
    "There is no obstacle around.",
    "They are walking together.",
    "They are standing together.",
];

pub fn vocabulary_size() -> usize {
    VOCABULARY.len()
}

/// One caption drawn from [`VOCABULARY`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionToken {
    pub template_id: usize,
    pub text: String,
}

impl CaptionToken {
    pub fn new(template_id: usize) -> Result<Self> {
        let text = VOCABULARY.get(template_id).ok_or_else(|| {
            Error::InvalidInput(format!("caption template {template_id} outside vocabulary"))
        })?;
        Ok(Self {
            template_id,
            text: (*text).to_owned(),
        })
    }

    /// Panics on an out-of-range id; for the crate's own template constants.
    pub fn of(template_id: usize) -> Self {
        Self::new(template_id).expect("template constant within vocabulary")
    }

    pub fn is_consistent(&self) -> bool {
        VOCABULARY
            .get(self.template_id)
            .is_some_and(|t| *t == self.text)
    }
}
