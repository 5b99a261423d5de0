use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AggregateScore;
use crate::config::SimConfig;
use crate::learner::Metrics;
use crate::ledger::{Address, ScoreMatrix, TokenAudit, Tokens};
use crate::store::ContentHash;

/// One row per (worker, epoch), evaluated on the shared test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: u32,
    /// 1-based epoch counter across the whole run.
    pub epoch: usize,
    pub worker: Address,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub elapsed_ms: f64,
}

/// Timing and storage figures of one round. These depend on the machine and
/// on whether models were encrypted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub elapsed_ms: f64,
    pub objects_collected: usize,
    pub objects_stored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Digest of each worker's trained model in plaintext form.
    pub model_digests: BTreeMap<Address, ContentHash>,
    pub scores: ScoreMatrix,
    pub aggregates: Vec<AggregateScore>,
    pub ranking: Vec<Address>,
    pub payouts: BTreeMap<Address, Tokens>,
    pub flagged: Vec<Address>,
    /// Offender -> how its deposit was split.
    pub slashed: BTreeMap<Address, BTreeMap<Address, Tokens>>,
    /// Test accuracy of the average of the surviving workers' models.
    pub global_accuracy: f64,
    /// Test accuracy of each worker's model after its last local epoch.
    pub worker_accuracy: BTreeMap<Address, f64>,
    pub cost: RoundCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_model_digest: ContentHash,
    pub final_metrics: Metrics,
    pub balances: BTreeMap<Address, Tokens>,
    pub refunds: BTreeMap<Address, Tokens>,
    pub pool_shares: BTreeMap<Address, Tokens>,
    pub slashed: Vec<Address>,
    pub total_paid: Tokens,
    pub undistributed: Tokens,
    pub audit: TokenAudit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub wall_ms: f64,
    pub crypto_ms: f64,
    pub objects_pushed: u64,
    pub bytes_pushed: u64,
    pub objects_stored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    pub rounds: Vec<RoundRecord>,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub cost: RunCost,
    /// Path of the JSONL ledger event log, when one was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_log: Option<String>,
}

impl RunReport {
    /// Copy with every timing and storage figure cleared and the encryption
    /// flag normalised, leaving only what learning and the ledger decided.
    pub fn without_costs(&self) -> RunReport {
        let mut out = self.clone();
        out.config.encrypt = false;
        out.config.out_dir = None;
        out.ledger_log = None;
        out.cost = RunCost::default();
        for r in &mut out.rounds {
            r.cost = RoundCost::default();
        }
        for e in &mut out.epochs {
            e.elapsed_ms = 0.0;
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.summary.final_metrics.accuracy
    }
}
