use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::Tokens;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// How a worker behaves when it is time to submit scores. Training is always
/// honest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WorkerBehavior {
    Honest,
    /// Skips submission with `probability` in every round from `from_round` on.
    NonSubmitter { from_round: u32, probability: f64 },
    /// Scores its own model 10000 bp and every peer `floor_bp` (10000 unless given).
    InflatedScorer { floor_bp: u16 },
}

impl fmt::Display for WorkerBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Honest => f.write_str("honest"),
            Self::NonSubmitter {
                from_round,
                probability,
            } => write!(f, "nonsubmitter:{from_round}:{probability}"),
            Self::InflatedScorer { floor_bp } => write!(f, "inflated:{floor_bp}"),
        }
    }
}

impl FromStr for WorkerBehavior {
    type Err = ConfigError;

    /// Accepts `honest`, `nonsubmitter[:FROM_ROUND[:PROBABILITY]]` and
    /// `inflated[:FLOOR_BP]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default().to_ascii_lowercase();
        let args: Vec<&str> = parts.collect();
        let bad = || ConfigError(format!("unrecognized behavior '{s}'"));
        match (kind.as_str(), args.as_slice()) {
            ("honest", []) => Ok(Self::Honest),
            ("nonsubmitter" | "non-submitter", rest) if rest.len() <= 2 => {
                let from_round = rest.first().map_or(Ok(0), |v| v.parse()).map_err(|_| bad())?;
                let probability: f64 = rest.get(1).map_or(Ok(1.0), |v| v.parse()).map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&probability) {
                    return Err(bad());
                }
                Ok(Self::NonSubmitter {
                    from_round,
                    probability,
                })
            }
            ("inflated" | "inflatedscorer", rest) if rest.len() <= 1 => {
                let floor_bp: u16 = rest.first().map_or(Ok(10_000), |v| v.parse()).map_err(|_| bad())?;
                if floor_bp > 10_000 {
                    return Err(bad());
                }
                Ok(Self::InflatedScorer { floor_bp })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for WorkerBehavior {
    type Error = ConfigError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<WorkerBehavior> for String {
    fn from(b: WorkerBehavior) -> Self {
        b.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub spread: f64,
    /// Size of the shared held-out test set used for reporting.
    pub test_n: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            dim: 64,
            classes: 10,
            spread: 0.3,
            test_n: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub workers: usize,
    pub rounds: u32,
    pub epochs_per_round: usize,
    pub top_k: u32,
    pub reward: Tokens,
    pub collateral: Tokens,
    pub encrypt: bool,
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Empty means every worker is honest.
    pub behaviors: Vec<WorkerBehavior>,
    pub push_window: usize,
    pub tolerance_bp: u16,
    pub flag_fraction: f64,
    /// Seize and redistribute the deposit of flagged workers.
    pub forfeiture: bool,
    pub parallel: bool,
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of each shard held back for peer scoring.
    pub holdout_fraction: f64,
    /// Score peers on the shared test set instead of a local slice.
    pub shared_test_set: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workers: 3,
            rounds: 30,
            epochs_per_round: 3,
            top_k: 2,
            reward: 3000,
            collateral: 100,
            encrypt: true,
            seed: 42,
            dataset: DatasetConfig::default(),
            behaviors: Vec::new(),
            push_window: 5,
            tolerance_bp: 2000,
            flag_fraction: 0.5,
            forfeiture: true,
            parallel: false,
            hidden_layers: vec![32],
            learning_rate: 0.05,
            batch_size: 32,
            holdout_fraction: 0.2,
            shared_test_set: false,
            out_dir: None,
        }
    }
}

impl SimConfig {
    pub fn arch(&self) -> Vec<usize> {
        let mut arch = vec![self.dataset.dim];
        arch.extend(&self.hidden_layers);
        arch.push(self.dataset.classes);
        arch
    }

    pub fn behavior(&self, worker: usize) -> WorkerBehavior {
        self.behaviors
            .get(worker)
            .cloned()
            .unwrap_or(WorkerBehavior::Honest)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if self.workers < 2 {
            return fail("workers must be ≥ 2".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be ≥ 1".into());
        }
        if self.epochs_per_round == 0 {
            return fail("epochs-per-round must be ≥ 1".into());
        }
        if self.top_k == 0 || self.top_k as usize > self.workers {
            return fail(format!(
                "top-k must be between 1 and the worker count ({}), got {}",
                self.workers, self.top_k
            ));
        }
        if self.reward == 0 {
            return fail("reward must be positive".into());
        }
        if !self.behaviors.is_empty() && self.behaviors.len() != self.workers {
            return fail(format!(
                "behaviors must be empty or list one entry per worker ({}), got {}",
                self.workers,
                self.behaviors.len()
            ));
        }
        if self.push_window == 0 {
            return fail("push-window must be ≥ 1".into());
        }
        if self.tolerance_bp > 10_000 {
            return fail("tolerance must be at most 10000 bp".into());
        }
        if !(0.0..=1.0).contains(&self.flag_fraction) {
            return fail("flag fraction must lie in [0, 1]".into());
        }
        let d = &self.dataset;
        if d.dim == 0 || d.classes < 2 {
            return fail("dataset needs dim ≥ 1 and at least 2 classes".into());
        }
        if !(d.spread.is_finite() && d.spread >= 0.0) {
            return fail("spread must be finite and non-negative".into());
        }
        if d.n < d.classes || d.n < 2 * self.workers {
            return fail(format!(
                "dataset of {} points is too small for {} classes and {} workers",
                d.n, d.classes, self.workers
            ));
        }
        if d.test_n < d.classes {
            return fail("test set must hold at least one point per class".into());
        }
        if self.hidden_layers.contains(&0) {
            return fail("hidden layers must be non-empty".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning rate must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout fraction must lie in [0, 1)".into());
        }
        if !self.shared_test_set && self.holdout_fraction == 0.0 {
            return fail("local scoring needs a positive holdout fraction".into());
        }
        Ok(())
    }
}
