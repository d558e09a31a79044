//! Hard-label majority voting with a designated fallback member.
//!
//! A label wins when it alone attains the maximal vote count. Otherwise the
//! fallback member's own prediction is returned. For three members this is
//! "two agreeing members decide, three-way disagreement falls back".

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{PredictError, Predictor};
use crate::corpus::{DatasetSplit, LabelSchema};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnsembleError {
    #[error("no predictions to vote on")]
    Empty,
    #[error("fallback index {index} out of range for {members} members")]
    BadFallback { index: usize, members: usize },
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("member {index} uses task {found} but member 0 uses task {expected}")]
    MixedSchemas {
        index: usize,
        expected: crate::corpus::TaskId,
        found: crate::corpus::TaskId,
    },
    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecidedBy {
    Majority,
    Fallback,
}

impl DecidedBy {
    pub fn as_str(self) -> &'static str {
        match self {
            DecidedBy::Majority => "majority",
            DecidedBy::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub label: u32,
    pub vote_counts: BTreeMap<u32, usize>,
    pub decided_by: DecidedBy,
}

pub fn vote(predictions: &[u32], fallback_index: usize) -> Result<VoteOutcome, EnsembleError> {
    if predictions.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if fallback_index >= predictions.len() {
        return Err(EnsembleError::BadFallback {
            index: fallback_index,
            members: predictions.len(),
        });
    }
    let mut vote_counts = BTreeMap::new();
    for &p in predictions {
        *vote_counts.entry(p).or_insert(0usize) += 1;
    }
    let max = *vote_counts.values().max().expect("non-empty");
    let mut leaders = vote_counts.iter().filter(|(_, &n)| n == max).map(|(&l, _)| l);
    let first = leaders.next().expect("non-empty");
    let (label, decided_by) = if leaders.next().is_none() {
        (first, DecidedBy::Majority)
    } else {
        (predictions[fallback_index], DecidedBy::Fallback)
    };
    Ok(VoteOutcome {
        label,
        vote_counts,
        decided_by,
    })
}

/// Ordered members and the position of the fallback member.
#[derive(Clone)]
pub struct EnsembleSpec {
    members: Vec<(String, Arc<dyn Predictor>)>,
    fallback_index: usize,
}

impl std::fmt::Debug for EnsembleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleSpec")
            .field("members", &self.member_names())
            .field("fallback_index", &self.fallback_index)
            .finish()
    }
}

impl EnsembleSpec {
    pub fn new(members: Vec<(String, Arc<dyn Predictor>)>, fallback_index: usize) -> Result<Self, EnsembleError> {
        if members.len() < 2 {
            return Err(EnsembleError::TooFewMembers(members.len()));
        }
        if fallback_index >= members.len() {
            return Err(EnsembleError::BadFallback {
                index: fallback_index,
                members: members.len(),
            });
        }
        let first = members[0].1.schema().clone();
        for (index, (_, m)) in members.iter().enumerate().skip(1) {
            if m.schema() != &first {
                return Err(EnsembleError::MixedSchemas {
                    index,
                    expected: first.task(),
                    found: m.schema().task(),
                });
            }
        }
        Ok(EnsembleSpec {
            members,
            fallback_index,
        })
    }

    pub fn fallback_index(&self) -> usize {
        self.fallback_index
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_names(&self) -> Vec<&str> {
        self.members.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Every member's label in member order.
    pub fn member_labels(&self, text: &str) -> Result<Vec<u32>, EnsembleError> {
        self.members
            .iter()
            .enumerate()
            .map(|(index, (_, m))| {
                m.predict_label(text).map_err(|e| {
                    EnsembleError::Predict(PredictError::Member {
                        index,
                        source: Box::new(e),
                    })
                })
            })
            .collect()
    }

    pub fn predict(&self, text: &str) -> Result<VoteOutcome, EnsembleError> {
        vote(&self.member_labels(text)?, self.fallback_index)
    }

    pub fn predict_split(&self, split: &DatasetSplit) -> Result<Vec<VoteOutcome>, EnsembleError> {
        split.texts().map(|t| self.predict(t)).collect()
    }
}

impl Predictor for EnsembleSpec {
    fn schema(&self) -> &LabelSchema {
        self.members[0].1.schema()
    }

    fn predict_label(&self, text: &str) -> Result<u32, PredictError> {
        self.predict(text).map(|o| o.label).map_err(|e| match e {
            EnsembleError::Predict(p) => p,
            other => PredictError::Failed(other.to_string()),
        })
    }
}
