use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Address;

pub const MAX_SCORE_BP: u16 = 10_000;

/// One evaluator's score for one model, in basis points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub model_owner: Address,
    pub score_bp: u16,
}

impl ScoreEntry {
    pub fn new(model_owner: Address, score_bp: u16) -> Self {
        Self {
            model_owner,
            score_bp,
        }
    }
}

/// Evaluator x model grid for one round. Absent cells mean "not scored";
/// self-evaluations never appear.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub round: u32,
    /// Workers that were active when the grid was read.
    pub participants: Vec<Address>,
    pub rows: BTreeMap<Address, BTreeMap<Address, u16>>,
}

impl ScoreMatrix {
    pub fn new(round: u32, participants: Vec<Address>) -> Self {
        Self {
            round,
            participants,
            rows: BTreeMap::new(),
        }
    }

    /// Records a row; self-scores are dropped.
    pub fn insert_row(&mut self, evaluator: Address, entries: &[ScoreEntry]) {
        let row = entries
            .iter()
            .filter(|e| e.model_owner != evaluator)
            .map(|e| (e.model_owner.clone(), e.score_bp))
            .collect();
        self.rows.insert(evaluator, row);
    }

    pub fn score(&self, evaluator: &Address, model: &Address) -> Option<u16> {
        self.rows.get(evaluator)?.get(model).copied()
    }

    pub fn has_submitted(&self, evaluator: &Address) -> bool {
        self.rows.contains_key(evaluator)
    }

    pub fn evaluators(&self) -> impl Iterator<Item = &Address> {
        self.rows.keys()
    }

    /// Every model that is either a participant or was scored by someone.
    pub fn models(&self) -> BTreeSet<Address> {
        let mut models: BTreeSet<Address> = self.participants.iter().cloned().collect();
        for row in self.rows.values() {
            models.extend(row.keys().cloned());
        }
        models
    }

    /// Peer scores received by `model`, in evaluator order.
    pub fn peer_scores(&self, model: &Address) -> Vec<(Address, u16)> {
        self.rows
            .iter()
            .filter(|(e, _)| *e != model)
            .filter_map(|(e, row)| row.get(model).map(|s| (e.clone(), *s)))
            .collect()
    }

    /// True when the grid has no submitted rows.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.rows.values().map(BTreeMap::len).sum()
    }
}
