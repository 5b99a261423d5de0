//! Score aggregation, top-K selection and score-outlier detection, run by the
//! requester over a round's [`ScoreMatrix`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{Address, ScoreMatrix};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScoringError {
    #[error("score matrix has no participants and no submissions")]
    EmptyMatrix,
    #[error("outlier detection needs at least 3 participants, have {0}")]
    QuorumTooSmall(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub worker: Address,
    pub score_bp: u32,
}

/// Floor mean of the peer scores each model received (0 when nobody scored
/// it), sorted best first with ties going to the lower address.
pub fn aggregate_scores(matrix: &ScoreMatrix) -> Result<Vec<AggregateScore>, ScoringError> {
    if matrix.participants.is_empty() && matrix.rows.is_empty() {
        return Err(ScoringError::EmptyMatrix);
    }
    let mut out: Vec<AggregateScore> = matrix
        .models()
        .into_iter()
        .map(|model| {
            let peers = matrix.peer_scores(&model);
            let score_bp = if peers.is_empty() {
                0
            } else {
                let sum: u64 = peers.iter().map(|(_, s)| *s as u64).sum();
                (sum / peers.len() as u64) as u32
            };
            AggregateScore {
                worker: model,
                score_bp,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score_bp.cmp(&a.score_bp).then_with(|| a.worker.cmp(&b.worker)));
    Ok(out)
}

/// The first `k` aggregates whose worker is in `eligible`.
pub fn select_top_k(aggregates: &[AggregateScore], eligible: &[Address], k: usize) -> Vec<Address> {
    aggregates
        .iter()
        .filter(|a| eligible.contains(&a.worker))
        .take(k)
        .map(|a| a.worker.clone())
        .collect()
}

/// Integer median; even-length inputs take the floor of the two middle values.
pub fn median_bp(scores: &mut [u16]) -> Option<u16> {
    if scores.is_empty() {
        return None;
    }
    scores.sort_unstable();
    let mid = scores.len() / 2;
    Some(if scores.len() % 2 == 1 {
        scores[mid]
    } else {
        ((scores[mid - 1] as u32 + scores[mid] as u32) / 2) as u16
    })
}

/// Participants that submitted nothing this round.
pub fn non_submitters(matrix: &ScoreMatrix) -> BTreeSet<Address> {
    matrix
        .participants
        .iter()
        .filter(|p| !matrix.has_submitted(p))
        .cloned()
        .collect()
}

/// Flags evaluators whose scores stray more than `tolerance_bp` from the
/// per-model median on more than `flag_fraction` of the models they scored,
/// plus every participant that did not submit.
pub fn detect_dishonest(
    matrix: &ScoreMatrix,
    tolerance_bp: u16,
    flag_fraction: f64,
) -> Result<BTreeSet<Address>, ScoringError> {
    if matrix.participants.len() < 3 {
        return Err(ScoringError::QuorumTooSmall(matrix.participants.len()));
    }
    let medians: std::collections::BTreeMap<Address, u16> = matrix
        .models()
        .into_iter()
        .filter_map(|m| {
            let mut scores: Vec<u16> = matrix.peer_scores(&m).into_iter().map(|(_, s)| s).collect();
            median_bp(&mut scores).map(|med| (m, med))
        })
        .collect();

    let mut dishonest = non_submitters(matrix);
    for (evaluator, row) in &matrix.rows {
        let mut scored = 0usize;
        let mut flagged = 0usize;
        for (model, &score) in row {
            let Some(&median) = medians.get(model) else {
                continue;
            };
            scored += 1;
            if (score as i32 - median as i32).unsigned_abs() > tolerance_bp as u32 {
                flagged += 1;
            }
        }
        if scored > 0 && flagged as f64 > flag_fraction * scored as f64 {
            dishonest.insert(evaluator.clone());
        }
    }
    Ok(dishonest)
}
