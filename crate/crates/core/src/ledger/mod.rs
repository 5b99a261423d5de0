//! Replica of the task contract: a state machine over task status, the
//! worker registry, collateral, score submissions, rankings and balances.
//!
//! [`TaskLedger`] holds the state and validates every operation completely
//! before mutating anything, so a rejected call leaves the ledger untouched.
//! [`Contract`] wraps it behind a single lock and appends each call to a
//! replayable event log.
//!
//! Token flows are integer-exact. At every state
//!
//! ```text
//! total_reward + deposits_paid_in
//!     == Σ balances + Σ deposits held + forfeit_pool + undistributed reward + refunds
//! ```

mod contract;
mod scores;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::ContentHash;

pub use contract::{Call, Contract, LedgerEvent, Outcome, ReplayError};
pub use scores::{ScoreEntry, ScoreMatrix, MAX_SCORE_BP};

pub type Tokens = u64;

/// Opaque participant identifier. Ordering is lexicographic and is used for
/// every deterministic tie-break.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(String);

impl Address {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Zero-padded worker address, so lexicographic order matches index order.
    pub fn worker(index: usize) -> Self {
        Self(format!("w{:03}", index + 1))
    }

    pub fn requester() -> Self {
        Self("requester".to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Created,
    Running,
    Completed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub address: Address,
    pub deposit_held: Tokens,
    pub active: bool,
    pub flag_count: u32,
    pub balance: Tokens,
    /// Collateral handed back (pre-start exit or task close).
    pub refunded: Tokens,
    /// Hex PKCS#1 DER public key used to wrap model keys for this worker.
    pub public_key: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("total reward must be positive")]
    ZeroReward,
    #[error("caller is not the requester")]
    NotRequester,
    #[error("worker {0} is already registered")]
    AlreadyRegistered(Address),
    #[error("wrong deposit: expected {expected}, got {got}")]
    WrongDeposit { expected: Tokens, got: Tokens },
    #[error("task is no longer accepting workers")]
    TaskAlreadyRunning,
    #[error("need at least {needed} active workers, have {have}")]
    NotEnoughWorkers { needed: usize, have: usize },
    #[error("operation not allowed while task is {0:?}")]
    WrongStatus(TaskStatus),
    #[error("{0} already submitted scores this round")]
    DuplicateSubmission(Address),
    #[error("round {given} is stale (current round is {current})")]
    StaleRound { given: u32, current: u32 },
    #[error("round {given} is in the future (current round is {current})")]
    FutureRound { given: u32, current: u32 },
    #[error("unknown worker {0}")]
    UnknownWorker(Address),
    #[error("worker {0} is not active")]
    InactiveWorker(Address),
    #[error("score {0} outside [0, 10000]")]
    ScoreOutOfRange(u16),
    #[error("model {0} scored more than once in one submission")]
    DuplicateEntry(Address),
    #[error("round {0} is already ranked")]
    AlreadyRanked(u32),
    #[error("ranking must list {expected} workers, got {got}")]
    BadRankLength { expected: usize, got: usize },
    #[error("worker {0} appears twice in the ranking")]
    DuplicateInRanking(Address),
    #[error("rewards for round {0} already distributed")]
    AlreadyDistributed(u32),
    #[error("round {0} has no ranking")]
    NoRanking(u32),
    #[error("worker {0} is already inactive")]
    AlreadyInactive(Address),
    #[error("worker {0} holds no deposit")]
    NoDeposit(Address),
    #[error("rewards for round {0} not yet distributed")]
    RewardsPending(u32),
    #[error("task has not completed")]
    NotCompleted,
    #[error("task is already closed")]
    AlreadyClosed,
    #[error("task is already initialized")]
    AlreadyInitialized,
}

pub type LedgerResult<T> = Result<T, LedgerError>;

/// Result of closing a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseOutcome {
    pub final_model: ContentHash,
    pub refunds: BTreeMap<Address, Tokens>,
    /// Shares of the mid-task forfeit pool handed to the remaining workers.
    pub pool_shares: BTreeMap<Address, Tokens>,
}

/// Breakdown of where every token that entered the ledger currently sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAudit {
    pub total_reward: Tokens,
    pub deposits_paid_in: Tokens,
    pub balances: Tokens,
    pub deposits_held: Tokens,
    pub forfeit_pool: Tokens,
    pub undistributed_reward: Tokens,
    pub refunded: Tokens,
}

impl TokenAudit {
    pub fn inflow(&self) -> u128 {
        self.total_reward as u128 + self.deposits_paid_in as u128
    }

    pub fn accounted(&self) -> u128 {
        [
            self.balances,
            self.deposits_held,
            self.forfeit_pool,
            self.undistributed_reward,
            self.refunded,
        ]
        .iter()
        .map(|&t| t as u128)
        .sum()
    }

    pub fn is_balanced(&self) -> bool {
        self.inflow() == self.accounted()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLedger {
    requester: Address,
    status: TaskStatus,
    closed: bool,
    model_uri: ContentHash,
    final_model: Option<ContentHash>,
    num_rounds: u32,
    current_round: u32,
    total_reward: Tokens,
    round_budgets: Vec<Tokens>,
    collateral: Tokens,
    top_k: u32,
    workers: BTreeMap<Address, WorkerRecord>,
    submissions: BTreeMap<u32, BTreeMap<Address, Vec<ScoreEntry>>>,
    rankings: BTreeMap<u32, Vec<Address>>,
    payouts: BTreeMap<u32, BTreeMap<Address, Tokens>>,
    forfeit_pool: Tokens,
    deposits_paid_in: Tokens,
    rewards_paid: Tokens,
    refunded_total: Tokens,
}

/// Splits `budget` over ranks 1..=n: rank i gets floor(budget / 2^i) and the
/// last rank also takes whatever the floors left over.
pub fn geometric_split(budget: Tokens, n: usize) -> Vec<Tokens> {
    if n == 0 {
        return Vec::new();
    }
    let mut shares: Vec<Tokens> = (1..=n)
        .map(|i| u32::try_from(i).ok().and_then(|i| budget.checked_shr(i)).unwrap_or(0))
        .collect();
    let paid: Tokens = shares.iter().sum();
    *shares.last_mut().unwrap() += budget - paid;
    shares
}

/// Equal split with the remainder going to the first (lowest) recipient.
fn equal_split(amount: Tokens, recipients: &[Address]) -> BTreeMap<Address, Tokens> {
    let mut out = BTreeMap::new();
    if recipients.is_empty() {
        return out;
    }
    let n = recipients.len() as Tokens;
    let share = amount / n;
    let remainder = amount % n;
    for (i, addr) in recipients.iter().enumerate() {
        let extra = if i == 0 { remainder } else { 0 };
        out.insert(addr.clone(), share + extra);
    }
    out
}

impl TaskLedger {
    pub fn initialize_task(
        requester: Address,
        model_uri: ContentHash,
        num_rounds: u32,
        total_reward: Tokens,
        collateral: Tokens,
        top_k: u32,
    ) -> LedgerResult<Self> {
        if num_rounds == 0 {
            return Err(LedgerError::InvalidParams("num_rounds must be at least 1"));
        }
        if top_k == 0 {
            return Err(LedgerError::InvalidParams("top_k must be at least 1"));
        }
        if total_reward == 0 {
            return Err(LedgerError::ZeroReward);
        }
        let per_round = total_reward / num_rounds as Tokens;
        let mut round_budgets = vec![per_round; num_rounds as usize];
        *round_budgets.last_mut().unwrap() = total_reward - per_round * (num_rounds as Tokens - 1);
        Ok(Self {
            requester,
            status: TaskStatus::Created,
            closed: false,
            model_uri,
            final_model: None,
            num_rounds,
            current_round: 0,
            total_reward,
            round_budgets,
            collateral,
            top_k,
            workers: BTreeMap::new(),
            submissions: BTreeMap::new(),
            rankings: BTreeMap::new(),
            payouts: BTreeMap::new(),
            forfeit_pool: 0,
            deposits_paid_in: 0,
            rewards_paid: 0,
            refunded_total: 0,
        })
    }

    pub fn requester(&self) -> &Address {
        &self.requester
    }

    pub fn status(&self) -> TaskStatus {
        self.status
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn model_uri(&self) -> ContentHash {
        self.model_uri
    }

    pub fn final_model(&self) -> Option<ContentHash> {
        self.final_model
    }

    pub fn num_rounds(&self) -> u32 {
        self.num_rounds
    }

    pub fn current_round(&self) -> u32 {
        self.current_round
    }

    pub fn total_reward(&self) -> Tokens {
        self.total_reward
    }

    pub fn round_budgets(&self) -> &[Tokens] {
        &self.round_budgets
    }

    pub fn collateral(&self) -> Tokens {
        self.collateral
    }

    pub fn top_k(&self) -> u32 {
        self.top_k
    }

    pub fn forfeit_pool(&self) -> Tokens {
        self.forfeit_pool
    }

    pub fn worker(&self, address: &Address) -> Option<&WorkerRecord> {
        self.workers.get(address)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.workers.values()
    }

    pub fn active_workers(&self) -> Vec<Address> {
        self.workers
            .values()
            .filter(|w| w.active)
            .map(|w| w.address.clone())
            .collect()
    }

    pub fn ranking(&self, round: u32) -> Option<&[Address]> {
        self.rankings.get(&round).map(Vec::as_slice)
    }

    pub fn payouts(&self, round: u32) -> Option<&BTreeMap<Address, Tokens>> {
        self.payouts.get(&round)
    }

    pub fn audit(&self) -> TokenAudit {
        TokenAudit {
            total_reward: self.total_reward,
            deposits_paid_in: self.deposits_paid_in,
            balances: self.workers.values().map(|w| w.balance).sum(),
            deposits_held: self.workers.values().map(|w| w.deposit_held).sum(),
            forfeit_pool: self.forfeit_pool,
            undistributed_reward: self.total_reward - self.rewards_paid,
            refunded: self.refunded_total,
        }
    }

    /// Length a ranking for the current state must have.
    pub fn expected_rank_len(&self) -> usize {
        (self.top_k as usize).min(self.active_workers().len())
    }

    fn require_requester(&self, caller: &Address) -> LedgerResult<()> {
        if caller != &self.requester {
            return Err(LedgerError::NotRequester);
        }
        Ok(())
    }

    fn require_status(&self, status: TaskStatus) -> LedgerResult<()> {
        if self.status != status {
            return Err(LedgerError::WrongStatus(self.status));
        }
        Ok(())
    }

    fn require_current_round(&self, round: u32) -> LedgerResult<()> {
        let current = self.current_round;
        if round < current {
            return Err(LedgerError::StaleRound {
                given: round,
                current,
            });
        }
        if round > current {
            return Err(LedgerError::FutureRound {
                given: round,
                current,
            });
        }
        Ok(())
    }

    fn active_record(&self, address: &Address) -> LedgerResult<&WorkerRecord> {
        let record = self
            .workers
            .get(address)
            .ok_or_else(|| LedgerError::UnknownWorker(address.clone()))?;
        if !record.active {
            return Err(LedgerError::InactiveWorker(address.clone()));
        }
        Ok(record)
    }

    fn worker_mut(&mut self, address: &Address) -> &mut WorkerRecord {
        self.workers
            .get_mut(address)
            .expect("worker presence checked before mutation")
    }

    pub fn join_task(
        &mut self,
        address: Address,
        deposit: Tokens,
        public_key: Option<String>,
    ) -> LedgerResult<ContentHash> {
        if self.status != TaskStatus::Created {
            return Err(LedgerError::TaskAlreadyRunning);
        }
        if address == self.requester {
            return Err(LedgerError::InvalidParams("the requester cannot join as a worker"));
        }
        if self.workers.contains_key(&address) {
            return Err(LedgerError::AlreadyRegistered(address));
        }
        if deposit != self.collateral {
            return Err(LedgerError::WrongDeposit {
                expected: self.collateral,
                got: deposit,
            });
        }
        self.deposits_paid_in += deposit;
        self.workers.insert(
            address.clone(),
            WorkerRecord {
                address,
                deposit_held: deposit,
                active: true,
                flag_count: 0,
                balance: 0,
                refunded: 0,
                public_key,
            },
        );
        Ok(self.model_uri)
    }

    pub fn start_task(&mut self, caller: &Address) -> LedgerResult<()> {
        self.require_requester(caller)?;
        self.require_status(TaskStatus::Created)?;
        let have = self.active_workers().len();
        if have < 2 {
            return Err(LedgerError::NotEnoughWorkers { needed: 2, have });
        }
        self.status = TaskStatus::Running;
        self.current_round = 0;
        Ok(())
    }

    pub fn submit_score(
        &mut self,
        round: u32,
        evaluator: &Address,
        entries: Vec<ScoreEntry>,
    ) -> LedgerResult<()> {
        self.require_status(TaskStatus::Running)?;
        self.require_current_round(round)?;
        self.active_record(evaluator)?;
        if self
            .submissions
            .get(&round)
            .is_some_and(|s| s.contains_key(evaluator))
        {
            return Err(LedgerError::DuplicateSubmission(evaluator.clone()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &entries {
            if entry.score_bp > MAX_SCORE_BP {
                return Err(LedgerError::ScoreOutOfRange(entry.score_bp));
            }
            self.active_record(&entry.model_owner)?;
            if !seen.insert(&entry.model_owner) {
                return Err(LedgerError::DuplicateEntry(entry.model_owner.clone()));
            }
        }
        self.submissions
            .entry(round)
            .or_default()
            .insert(evaluator.clone(), entries);
        Ok(())
    }

    /// Raw submissions, self-scores included.
    pub fn raw_submissions(&self, round: u32) -> Option<&BTreeMap<Address, Vec<ScoreEntry>>> {
        self.submissions.get(&round)
    }

    pub fn get_submissions(&self, round: u32) -> LedgerResult<ScoreMatrix> {
        if self.status == TaskStatus::Created {
            return Err(LedgerError::WrongStatus(self.status));
        }
        if round > self.current_round {
            return Err(LedgerError::FutureRound {
                given: round,
                current: self.current_round,
            });
        }
        let mut matrix = ScoreMatrix::new(round, self.active_workers());
        if let Some(subs) = self.submissions.get(&round) {
            for (evaluator, entries) in subs {
                matrix.insert_row(evaluator.clone(), entries);
            }
        }
        Ok(matrix)
    }

    pub fn submit_round_topk(
        &mut self,
        caller: &Address,
        round: u32,
        ranked: Vec<Address>,
    ) -> LedgerResult<()> {
        self.require_requester(caller)?;
        self.require_status(TaskStatus::Running)?;
        self.require_current_round(round)?;
        if self.rankings.contains_key(&round) {
            return Err(LedgerError::AlreadyRanked(round));
        }
        let expected = self.expected_rank_len();
        if ranked.len() != expected {
            return Err(LedgerError::BadRankLength {
                expected,
                got: ranked.len(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for addr in &ranked {
            self.active_record(addr)?;
            if !seen.insert(addr) {
                return Err(LedgerError::DuplicateInRanking(addr.clone()));
            }
        }
        self.rankings.insert(round, ranked);
        Ok(())
    }

    pub fn distribute_rewards(
        &mut self,
        caller: &Address,
        round: u32,
    ) -> LedgerResult<BTreeMap<Address, Tokens>> {
        self.require_requester(caller)?;
        self.require_status(TaskStatus::Running)?;
        self.require_current_round(round)?;
        if self.payouts.contains_key(&round) {
            return Err(LedgerError::AlreadyDistributed(round));
        }
        let ranked = self
            .rankings
            .get(&round)
            .ok_or(LedgerError::NoRanking(round))?
            .clone();
        let budget = self.round_budgets[round as usize];
        let shares = geometric_split(budget, ranked.len());
        let mut paid = BTreeMap::new();
        for (addr, share) in ranked.into_iter().zip(shares) {
            self.worker_mut(&addr).balance += share;
            self.rewards_paid += share;
            *paid.entry(addr).or_insert(0) += share;
        }
        self.payouts.insert(round, paid.clone());
        Ok(paid)
    }

    /// Voluntary exit. Before the start the collateral is refunded; once the
    /// task runs it is forfeited into the pool.
    pub fn remove_worker(&mut self, address: &Address) -> LedgerResult<Tokens> {
        if self.status == TaskStatus::Completed {
            return Err(LedgerError::WrongStatus(self.status));
        }
        let record = self
            .workers
            .get(address)
            .ok_or_else(|| LedgerError::UnknownWorker(address.clone()))?;
        if !record.active {
            return Err(LedgerError::AlreadyInactive(address.clone()));
        }
        let status = self.status;
        let worker = self.worker_mut(address);
        let deposit = std::mem::take(&mut worker.deposit_held);
        worker.active = false;
        match status {
            TaskStatus::Created => {
                worker.refunded += deposit;
                self.refunded_total += deposit;
                Ok(deposit)
            }
            _ => {
                self.forfeit_pool += deposit;
                Ok(0)
            }
        }
    }

    pub fn flag_worker(&mut self, caller: &Address, worker: &Address) -> LedgerResult<u32> {
        self.require_requester(caller)?;
        self.require_status(TaskStatus::Running)?;
        self.active_record(worker)?;
        let record = self.worker_mut(worker);
        record.flag_count += 1;
        Ok(record.flag_count)
    }

    /// Seizes the offender's deposit and splits it equally over the other
    /// active workers, remainder to the lowest address. With no survivors the
    /// deposit stays in the forfeit pool.
    pub fn forfeit_and_redistribute(
        &mut self,
        caller: &Address,
        offender: &Address,
    ) -> LedgerResult<BTreeMap<Address, Tokens>> {
        self.require_requester(caller)?;
        self.require_status(TaskStatus::Running)?;
        let record = self.active_record(offender)?;
        if record.deposit_held == 0 {
            return Err(LedgerError::NoDeposit(offender.clone()));
        }
        let survivors: Vec<Address> = self
            .active_workers()
            .into_iter()
            .filter(|a| a != offender)
            .collect();
        let offender_rec = self.worker_mut(offender);
        let deposit = std::mem::take(&mut offender_rec.deposit_held);
        offender_rec.active = false;
        if survivors.is_empty() {
            self.forfeit_pool += deposit;
            return Ok(BTreeMap::new());
        }
        let shares = equal_split(deposit, &survivors);
        for (addr, share) in &shares {
            self.worker_mut(addr).balance += share;
        }
        Ok(shares)
    }

    pub fn next_round(&mut self, caller: &Address) -> LedgerResult<u32> {
        self.require_requester(caller)?;
        self.require_status(TaskStatus::Running)?;
        if !self.payouts.contains_key(&self.current_round) {
            return Err(LedgerError::RewardsPending(self.current_round));
        }
        self.current_round += 1;
        if self.current_round == self.num_rounds {
            self.status = TaskStatus::Completed;
        }
        Ok(self.current_round)
    }

    /// Records the final model, refunds the collateral of every worker still
    /// active, and hands the forfeit pool to those same workers.
    pub fn close_task(
        &mut self,
        caller: &Address,
        final_model: ContentHash,
    ) -> LedgerResult<CloseOutcome> {
        self.require_requester(caller)?;
        if self.status != TaskStatus::Completed {
            return Err(LedgerError::NotCompleted);
        }
        if self.closed {
            return Err(LedgerError::AlreadyClosed);
        }
        let active = self.active_workers();
        let mut refunds = BTreeMap::new();
        for addr in &active {
            let worker = self.worker_mut(addr);
            let deposit = std::mem::take(&mut worker.deposit_held);
            worker.refunded += deposit;
            self.refunded_total += deposit;
            refunds.insert(addr.clone(), deposit);
        }
        let pool_shares = equal_split(self.forfeit_pool, &active);
        if !pool_shares.is_empty() {
            for (addr, share) in &pool_shares {
                self.worker_mut(addr).balance += share;
            }
            self.forfeit_pool = 0;
        }
        self.final_model = Some(final_model);
        self.closed = true;
        Ok(CloseOutcome {
            final_model,
            refunds,
            pool_shares,
        })
    }
}
