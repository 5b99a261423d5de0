use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{
    Address, CloseOutcome, LedgerError, LedgerResult, ScoreEntry, ScoreMatrix, TaskLedger, Tokens,
};
use crate::store::ContentHash;

/// A ledger transaction as recorded in the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Call {
    InitializeTask {
        requester: Address,
        model_uri: ContentHash,
        num_rounds: u32,
        total_reward: Tokens,
        collateral: Tokens,
        top_k: u32,
    },
    JoinTask {
        address: Address,
        deposit: Tokens,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        public_key: Option<String>,
    },
    StartTask {
        caller: Address,
    },
    SubmitScore {
        round: u32,
        evaluator: Address,
        entries: Vec<ScoreEntry>,
    },
    SubmitRoundTopk {
        caller: Address,
        round: u32,
        ranked: Vec<Address>,
    },
    DistributeRewards {
        caller: Address,
        round: u32,
    },
    RemoveWorker {
        address: Address,
    },
    FlagWorker {
        caller: Address,
        worker: Address,
    },
    ForfeitAndRedistribute {
        caller: Address,
        offender: Address,
    },
    NextRound {
        caller: Address,
    },
    CloseTask {
        caller: Address,
        final_model: ContentHash,
    },
}

/// Successful result of a call. Serializes to the `result` object of a log
/// record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Outcome {
    ModelUri { model_uri: ContentHash },
    Refund { refund: Tokens },
    Payouts { payouts: BTreeMap<Address, Tokens> },
    Flagged { flag_count: u32 },
    Round { round: u32 },
    Closed(CloseOutcome),
    Done {},
}

/// One line of the JSON Lines event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub call: Call,
    pub result: Value,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("event log is empty")]
    Empty,
    #[error("first event must be initialize_task")]
    MissingInitialize,
    #[error("sequence gap at record {index}: expected seq {expected}, found {found}")]
    SequenceGap {
        index: usize,
        expected: u64,
        found: u64,
    },
    #[error("replay diverged at seq {seq}: recorded {recorded}, replayed {replayed}")]
    Divergence {
        seq: u64,
        recorded: Value,
        replayed: Value,
    },
    #[error("malformed log line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn result_json(result: &LedgerResult<Outcome>) -> Value {
    match result {
        Ok(outcome) => serde_json::to_value(outcome).expect("outcomes always serialize"),
        Err(e) => serde_json::json!({ "error": e.to_string() }),
    }
}

impl TaskLedger {
    /// Applies a call to an initialized ledger.
    pub fn apply(&mut self, call: &Call) -> LedgerResult<Outcome> {
        match call.clone() {
            Call::InitializeTask { .. } => Err(LedgerError::AlreadyInitialized),
            Call::JoinTask {
                address,
                deposit,
                public_key,
            } => self
                .join_task(address, deposit, public_key)
                .map(|model_uri| Outcome::ModelUri { model_uri }),
            Call::StartTask { caller } => self.start_task(&caller).map(|_| Outcome::Done {}),
            Call::SubmitScore {
                round,
                evaluator,
                entries,
            } => self
                .submit_score(round, &evaluator, entries)
                .map(|_| Outcome::Done {}),
            Call::SubmitRoundTopk {
                caller,
                round,
                ranked,
            } => self
                .submit_round_topk(&caller, round, ranked)
                .map(|_| Outcome::Done {}),
            Call::DistributeRewards { caller, round } => self
                .distribute_rewards(&caller, round)
                .map(|payouts| Outcome::Payouts { payouts }),
            Call::RemoveWorker { address } => self
                .remove_worker(&address)
                .map(|refund| Outcome::Refund { refund }),
            Call::FlagWorker { caller, worker } => self
                .flag_worker(&caller, &worker)
                .map(|flag_count| Outcome::Flagged { flag_count }),
            Call::ForfeitAndRedistribute { caller, offender } => self
                .forfeit_and_redistribute(&caller, &offender)
                .map(|payouts| Outcome::Payouts { payouts }),
            Call::NextRound { caller } => self.next_round(&caller).map(|round| Outcome::Round { round }),
            Call::CloseTask {
                caller,
                final_model,
            } => self.close_task(&caller, final_model).map(Outcome::Closed),
        }
    }
}

struct Inner {
    ledger: TaskLedger,
    log: Vec<LedgerEvent>,
}

/// The serialization point for all ledger traffic. Every mutating call is
/// appended to the event log, rejected calls included.
pub struct Contract {
    inner: Mutex<Inner>,
}

impl Contract {
    pub fn initialize(
        requester: Address,
        model_uri: ContentHash,
        num_rounds: u32,
        total_reward: Tokens,
        collateral: Tokens,
        top_k: u32,
    ) -> LedgerResult<Self> {
        let call = Call::InitializeTask {
            requester: requester.clone(),
            model_uri,
            num_rounds,
            total_reward,
            collateral,
            top_k,
        };
        let ledger = TaskLedger::initialize_task(
            requester,
            model_uri,
            num_rounds,
            total_reward,
            collateral,
            top_k,
        )?;
        let event = LedgerEvent {
            seq: 0,
            call,
            result: result_json(&Ok(Outcome::Done {})),
        };
        Ok(Self {
            inner: Mutex::new(Inner {
                ledger,
                log: vec![event],
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("ledger lock poisoned")
    }

    pub fn execute(&self, call: Call) -> LedgerResult<Outcome> {
        let mut inner = self.lock();
        let result = inner.ledger.apply(&call);
        let seq = inner.log.len() as u64;
        inner.log.push(LedgerEvent {
            seq,
            call,
            result: result_json(&result),
        });
        result
    }

    pub fn join_task(
        &self,
        address: &Address,
        deposit: Tokens,
        public_key: Option<String>,
    ) -> LedgerResult<ContentHash> {
        match self.execute(Call::JoinTask {
            address: address.clone(),
            deposit,
            public_key,
        })? {
            Outcome::ModelUri { model_uri } => Ok(model_uri),
            other => unreachable!("join_task produced {other:?}"),
        }
    }

    pub fn start_task(&self, caller: &Address) -> LedgerResult<()> {
        self.execute(Call::StartTask {
            caller: caller.clone(),
        })
        .map(|_| ())
    }

    pub fn submit_score(
        &self,
        round: u32,
        evaluator: &Address,
        entries: Vec<ScoreEntry>,
    ) -> LedgerResult<()> {
        self.execute(Call::SubmitScore {
            round,
            evaluator: evaluator.clone(),
            entries,
        })
        .map(|_| ())
    }

    pub fn get_submissions(&self, round: u32) -> LedgerResult<ScoreMatrix> {
        self.lock().ledger.get_submissions(round)
    }

    pub fn submit_round_topk(
        &self,
        caller: &Address,
        round: u32,
        ranked: Vec<Address>,
    ) -> LedgerResult<()> {
        self.execute(Call::SubmitRoundTopk {
            caller: caller.clone(),
            round,
            ranked,
        })
        .map(|_| ())
    }

    pub fn distribute_rewards(
        &self,
        caller: &Address,
        round: u32,
    ) -> LedgerResult<BTreeMap<Address, Tokens>> {
        match self.execute(Call::DistributeRewards {
            caller: caller.clone(),
            round,
        })? {
            Outcome::Payouts { payouts } => Ok(payouts),
            other => unreachable!("distribute_rewards produced {other:?}"),
        }
    }

    pub fn remove_worker(&self, address: &Address) -> LedgerResult<Tokens> {
        match self.execute(Call::RemoveWorker {
            address: address.clone(),
        })? {
            Outcome::Refund { refund } => Ok(refund),
            other => unreachable!("remove_worker produced {other:?}"),
        }
    }

    pub fn flag_worker(&self, caller: &Address, worker: &Address) -> LedgerResult<u32> {
        match self.execute(Call::FlagWorker {
            caller: caller.clone(),
            worker: worker.clone(),
        })? {
            Outcome::Flagged { flag_count } => Ok(flag_count),
            other => unreachable!("flag_worker produced {other:?}"),
        }
    }

    pub fn forfeit_and_redistribute(
        &self,
        caller: &Address,
        offender: &Address,
    ) -> LedgerResult<BTreeMap<Address, Tokens>> {
        match self.execute(Call::ForfeitAndRedistribute {
            caller: caller.clone(),
            offender: offender.clone(),
        })? {
            Outcome::Payouts { payouts } => Ok(payouts),
            other => unreachable!("forfeit_and_redistribute produced {other:?}"),
        }
    }

    pub fn next_round(&self, caller: &Address) -> LedgerResult<u32> {
        match self.execute(Call::NextRound {
            caller: caller.clone(),
        })? {
            Outcome::Round { round } => Ok(round),
            other => unreachable!("next_round produced {other:?}"),
        }
    }

    pub fn close_task(
        &self,
        caller: &Address,
        final_model: ContentHash,
    ) -> LedgerResult<CloseOutcome> {
        match self.execute(Call::CloseTask {
            caller: caller.clone(),
            final_model,
        })? {
            Outcome::Closed(out) => Ok(out),
            other => unreachable!("close_task produced {other:?}"),
        }
    }

    /// Runs `f` against the committed state.
    pub fn read<R>(&self, f: impl FnOnce(&TaskLedger) -> R) -> R {
        f(&self.lock().ledger)
    }

    pub fn snapshot(&self) -> TaskLedger {
        self.lock().ledger.clone()
    }

    pub fn events(&self) -> Vec<LedgerEvent> {
        self.lock().log.clone()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for event in &self.lock().log {
            serde_json::to_writer(&mut out, event)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<LedgerEvent>, ReplayError> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event =
                serde_json::from_str(&line).map_err(|source| ReplayError::Parse { line: i + 1, source })?;
            events.push(event);
        }
        Ok(events)
    }

    /// Rebuilds a contract from a recorded log, checking that every call
    /// reproduces its recorded result.
    pub fn replay(events: &[LedgerEvent]) -> Result<Self, ReplayError> {
        let first = events.first().ok_or(ReplayError::Empty)?;
        let Call::InitializeTask {
            requester,
            model_uri,
            num_rounds,
            total_reward,
            collateral,
            top_k,
        } = first.call.clone()
        else {
            return Err(ReplayError::MissingInitialize);
        };
        if first.seq != 0 {
            return Err(ReplayError::SequenceGap {
                index: 0,
                expected: 0,
                found: first.seq,
            });
        }
        let contract = Self::initialize(
            requester,
            model_uri,
            num_rounds,
            total_reward,
            collateral,
            top_k,
        )
        .map_err(|e| ReplayError::Divergence {
            seq: 0,
            recorded: first.result.clone(),
            replayed: serde_json::json!({ "error": e.to_string() }),
        })?;
        for (index, event) in events.iter().enumerate().skip(1) {
            if event.seq != index as u64 {
                return Err(ReplayError::SequenceGap {
                    index,
                    expected: index as u64,
                    found: event.seq,
                });
            }
            let replayed = result_json(&contract.execute(event.call.clone()));
            if replayed != event.result {
                return Err(ReplayError::Divergence {
                    seq: event.seq,
                    recorded: event.result.clone(),
                    replayed,
                });
            }
        }
        Ok(contract)
    }
}
