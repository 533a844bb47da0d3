//! Fine-grained, coarse-grained and overall scores.
//!
//! fine    = sum(entity) / (2 n_e) + sum(relational) / (2 n_r)
//! coarse  = sum(global) / n_g
//! overall = (fine + coarse) / 2
//!
//! The fine-grained formula is undefined when a group is empty; the
//! [`EmptyGroupRule`] decides what happens then.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DegeneracyFlag, QuestionScores};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyGroupRule {
    /// Drop the empty term and average the remaining group alone.
    #[default]
    DropTermRenormalize,
    /// An empty group contributes zero to its half of the fine-grained score.
    ScoreZero,
}

impl EmptyGroupRule {
    pub fn description(self) -> &'static str {
        match self {
            EmptyGroupRule::DropTermRenormalize => {
                "empty question group dropped; fine-grained score is the mean of the other group"
            }
            EmptyGroupRule::ScoreZero => {
                "empty question group contributes zero to the fine-grained score"
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    #[serde(default)]
    pub empty_group_rule: EmptyGroupRule,
}

fn check_unit(name: &str, scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        Some(i) => Err(Error::InvalidInput(format!(
            "{name} score #{i} = {} is outside [0,1]",
            scores[i]
        ))),
        None => Ok(()),
    }
}

/// Returns `None` when the score is undefined (both groups empty under
/// [`EmptyGroupRule::DropTermRenormalize`]).
pub fn fine_grained_score(
    entity: &[f64],
    relational: &[f64],
    policy: AggregationPolicy,
) -> Result<Option<f64>> {
    check_unit("entity", entity)?;
    check_unit("relational", relational)?;
    let half = |xs: &[f64]| xs.iter().sum::<f64>() / (2.0 * xs.len() as f64);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let fine = match (
        entity.is_empty(),
        relational.is_empty(),
        policy.empty_group_rule,
    ) {
        (false, false, _) => Some(half(entity) + half(relational)),
        (true, true, EmptyGroupRule::DropTermRenormalize) => None,
        (false, true, EmptyGroupRule::DropTermRenormalize) => Some(mean(entity)),
        (true, false, EmptyGroupRule::DropTermRenormalize) => Some(mean(relational)),
        (true, true, EmptyGroupRule::ScoreZero) => Some(0.0),
        (false, true, EmptyGroupRule::ScoreZero) => Some(half(entity)),
        (true, false, EmptyGroupRule::ScoreZero) => Some(half(relational)),
    };
    Ok(fine)
}

pub fn coarse_grained_score(global: &[f64]) -> Result<f64> {
    if global.is_empty() {
        return Err(Error::InvalidInput(
            "coarse-grained score needs at least one global question".into(),
        ));
    }
    check_unit("global", global)?;
    Ok(global.iter().sum::<f64>() / global.len() as f64)
}

/// Returns the overall score and whether it fell back to coarse-only.
pub fn overall_score(fine: Option<f64>, coarse: f64) -> Result<(f64, bool)> {
    check_unit("coarse", &[coarse])?;
    match fine {
        Some(f) => {
            check_unit("fine", &[f])?;
            Ok(((f + coarse) / 2.0, false))
        }
        None => Ok((coarse, true)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub fine_grained: Option<f64>,
    pub coarse_grained: f64,
    pub overall: f64,
    pub coarse_only: bool,
}

pub fn aggregate(
    entity: &[f64],
    relational: &[f64],
    global: &[f64],
    policy: AggregationPolicy,
) -> Result<Aggregate> {
    let fine_grained = fine_grained_score(entity, relational, policy)?;
    let coarse_grained = coarse_grained_score(global)?;
    let (overall, coarse_only) = overall_score(fine_grained, coarse_grained)?;
    Ok(Aggregate {
        fine_grained,
        coarse_grained,
        overall,
        coarse_only,
    })
}

/// Aggregates a scored question set and adds the coarse-only flag when it
/// applies.
pub fn aggregate_scores(
    scores: &QuestionScores,
    policy: AggregationPolicy,
    flags: &mut BTreeSet<DegeneracyFlag>,
) -> Result<Aggregate> {
    let e: Vec<f64> = scores.entity.iter().map(|s| s.score).collect();
    let r: Vec<f64> = scores.relational.iter().map(|s| s.score).collect();
    let g: Vec<f64> = scores.global.iter().map(|s| s.score).collect();
    if e.is_empty() {
        flags.insert(DegeneracyFlag::NoEntityQuestions);
    }
    if r.is_empty() {
        flags.insert(DegeneracyFlag::NoRelationalQuestions);
    }
    let agg = aggregate(&e, &r, &g, policy)?;
    if agg.coarse_only {
        flags.insert(DegeneracyFlag::CoarseOnly);
    }
    Ok(agg)
}
