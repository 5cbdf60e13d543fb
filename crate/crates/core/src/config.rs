//! Versioned JSON run configurations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EqlenError, Result};
use crate::gradcheck::GradcheckConfig;
use crate::lab::EfficiencyConfig;
use crate::trainer::{default_questions, TrainConfig};
use crate::types::{PolicyTable, Question};

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// Where a run's questions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionSet {
    /// The synthetic answer-match task.
    Synthetic {
        #[serde(default = "default_question_count")]
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Inline { items: Vec<Question> },
}

fn default_question_count() -> usize {
    32
}

impl Default for QuestionSet {
    fn default() -> Self {
        QuestionSet::Synthetic {
            count: default_question_count(),
            seed: 0,
        }
    }
}

impl QuestionSet {
    pub fn resolve(&self, train: &TrainConfig) -> Result<Vec<Question>> {
        let qs = match self {
            QuestionSet::Synthetic { count, seed } => {
                if *count == 0 {
                    return Err(EqlenError::config("questions.count", "must be positive"));
                }
                default_questions(*count, &train.policy, *seed)
            }
            QuestionSet::Inline { items } => {
                if items.is_empty() {
                    return Err(EqlenError::config("questions.items", "must not be empty"));
                }
                items.clone()
            }
        };
        let vocab = train.policy.vocab()?;
        for q in &qs {
            q.verifier
                .validate()
                .map_err(|e| EqlenError::config(format!("questions[{}].verifier", q.id), e.to_string()))?;
            if !q.prompt.iter().all(|&t| vocab.contains(t)) {
                return Err(EqlenError::config(format!("questions[{}].prompt", q.id), "token outside vocab"));
            }
        }
        Ok(qs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub train: TrainConfig,
    #[serde(default)]
    pub questions: QuestionSet,
    /// Starting policy. The uniform policy of `train.policy` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_policy: Option<PolicyTable>,
}

impl RunConfig {
    pub fn starting_policy(&self) -> Result<PolicyTable> {
        match &self.initial_policy {
            Some(p) => {
                let shape = &self.train.policy;
                if p.vocab().size() != shape.vocab_size || p.vocab().eos_id() != shape.eos_id || p.order() != shape.order {
                    return Err(EqlenError::config("initial_policy", "shape differs from train.policy"));
                }
                Ok(p.clone())
            }
            None => self.train.policy.uniform_policy(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            train: TrainConfig::default(),
            questions: QuestionSet::default(),
            initial_policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Params {
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
}

fn default_lrs() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}

impl Default for Prop1Params {
    fn default() -> Self {
        Prop1Params { lrs: default_lrs() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Params {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Shift applied to the zero-mean pairing probability.
    #[serde(default)]
    pub p_offset: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    10_000
}

fn default_trials() -> usize {
    100
}

impl Default for Prop2Params {
    fn default() -> Self {
        Prop2Params {
            steps: default_steps(),
            trials: default_trials(),
            p_offset: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub prop1: Prop1Params,
    #[serde(default)]
    pub prop2: Prop2Params,
    #[serde(default)]
    pub efficiency: EfficiencyConfig,
}

/// Any document carrying a schema version.
pub trait Versioned {
    fn schema_version(&self) -> u32;
}

impl Versioned for RunConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl Versioned for LabConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl Versioned for GradcheckConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

pub fn parse<T: Versioned + serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let doc: T = serde_json::from_str(text).map_err(|e| EqlenError::config("<document>", e.to_string()))?;
    if doc.schema_version() != SCHEMA_VERSION {
        return Err(EqlenError::config(
            "schema_version",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", doc.schema_version()),
        ));
    }
    Ok(doc)
}

pub fn load<T: Versioned + serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| EqlenError::io(path, e))?;
    parse(&text)
}
