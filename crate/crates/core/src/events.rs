//! Decisions, clickstream events and training batches.

use serde::{Deserialize, Serialize};

use crate::clock::Millis;

/// A single arm or a ranked list of arms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArmChoice {
    Single(String),
    Ranking(Vec<String>),
}

impl ArmChoice {
    pub fn ids(&self) -> Vec<&str> {
        match self {
            ArmChoice::Single(a) => vec![a.as_str()],
            ArmChoice::Ranking(r) => r.iter().map(String::as_str).collect(),
        }
    }

    pub fn single(&self) -> Option<&str> {
        match self {
            ArmChoice::Single(a) => Some(a),
            ArmChoice::Ranking(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub bandit_id: String,
    pub request_id: String,
    pub arm: ArmChoice,
    pub param_version: u64,
    pub served_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionEvent {
    pub bandit_id: String,
    pub request_id: String,
    pub session_id: String,
    pub arm: ArmChoice,
    pub context: Vec<f64>,
    pub param_version: u64,
    /// Probability the served arm had under the sampling distribution, where
    /// the policy defines one (Exp3, epsilon greedy, IGW).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<f64>,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEvent {
    pub bandit_id: String,
    pub request_id: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub click_position: Option<usize>,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub request_id: String,
    pub context: Vec<f64>,
    pub arm: ArmChoice,
    pub reward: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub click_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<f64>,
    /// `true` when no reward arrived inside the window and the default applied.
    #[serde(default)]
    pub defaulted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub bandit_id: String,
    pub seq: u64,
    pub examples: Vec<TrainingExample>,
    /// Impression timestamps of the first and last example.
    pub window: (Millis, Millis),
}
