//! Requester and worker actors and the round driver that wires the ledger,
//! store, crypto, learner and aggregation together.

mod report;
mod scoring;
mod tracker;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::Rng;
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregation::{average_model_refs, AggregationError};
use crate::config::{ConfigError, SimConfig, WorkerBehavior};
use crate::crypto::{
    grant_access, open_model, seal_model, seal_model_for_group, CryptoError, Envelope, KeyPair,
    PublicKey,
};
use crate::learner::{
    deserialize_model, evaluate, generate_dataset, generate_holdout, init_model, partition_even,
    serialize_model, split_holdout, train_local_observed, Dataset, LearnerError, ModelState,
    TrainConfig,
};
use crate::ledger::{Address, Contract, LedgerError, LedgerEvent, ScoreEntry, TaskLedger, Tokens};
use crate::rng::{crypto_rng, derive_seed, sim_rng};
use crate::store::{ContentHash, ContentStore, StoreError};

pub use report::{EpochRecord, RoundCost, RoundRecord, RunCost, RunReport, RunSummary};
pub use scoring::{
    aggregate_scores, detect_dishonest, median_bp, non_submitters, select_top_k, AggregateScore,
    ScoringError,
};
pub use tracker::PushTracker;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("ledger rejected a call: {0}")]
    Ledger(#[from] LedgerError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
    #[error("learner: {0}")]
    Learner(#[from] LearnerError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error("scoring: {0}")]
    Scoring(#[from] ScoringError),
    #[error("run aborted: training of {worker} diverged in round {round} ({source})")]
    Aborted {
        round: u32,
        worker: Address,
        source: LearnerError,
    },
    #[error("no active workers remain in round {round}")]
    NoActiveWorkers { round: u32 },
    #[error("no model from {owner} addressed to {reader}")]
    MissingModel { owner: Address, reader: Address },
}

impl ProtocolError {
    pub fn is_config_error(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub final_model: ModelState,
    pub events: Vec<LedgerEvent>,
    pub ledger: TaskLedger,
}

impl RunOutput {
    pub fn final_model_bytes(&self) -> Vec<u8> {
        serialize_model(&self.final_model)
    }
}

/// owner -> reader -> object to fetch.
type Directory = BTreeMap<Address, BTreeMap<Address, ContentHash>>;

struct Worker {
    index: usize,
    address: Address,
    behavior: WorkerBehavior,
    keys: Option<KeyPair>,
    train: Dataset,
    eval: Dataset,
    tracker: PushTracker,
    crypto_rng: ChaCha20Rng,
    behavior_rng: ChaCha8Rng,
}

/// Shared plumbing every actor touches.
struct Env {
    store: ContentStore,
    start: Instant,
    crypto_ns: AtomicU64,
    objects_pushed: AtomicU64,
    bytes_pushed: AtomicU64,
}

impl Env {
    fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn timed_crypto<T>(&self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.crypto_ns
            .fetch_add(t.elapsed().as_nanos() as u64, Ordering::Relaxed);
        out
    }

    fn push(&self, bytes: &[u8], tracker: &mut PushTracker) -> Result<ContentHash, StoreError> {
        let hash = self.store.put(bytes)?;
        self.objects_pushed.fetch_add(1, Ordering::Relaxed);
        self.bytes_pushed
            .fetch_add(bytes.len() as u64, Ordering::Relaxed);
        for old in tracker.track_push(hash) {
            self.store.unpin(&old)?;
        }
        Ok(hash)
    }

    fn fetch(
        &self,
        dir: &Directory,
        owner: &Address,
        reader: &Address,
        keys: Option<&KeyPair>,
    ) -> Result<ModelState, ProtocolError> {
        let hash = dir
            .get(owner)
            .and_then(|row| row.get(reader))
            .ok_or_else(|| ProtocolError::MissingModel {
                owner: owner.clone(),
                reader: reader.clone(),
            })?;
        let bytes = self.store.get(hash)?;
        let plain = match keys {
            Some(keys) => self.timed_crypto(|| {
                let envelope = Envelope::from_bytes(&bytes)?;
                open_model(&keys.private, &envelope)
            })?,
            None => bytes,
        };
        Ok(deserialize_model(&plain)?)
    }

    /// Fetches the listed owners' models addressed to `reader` and averages
    /// them in owner order.
    fn fetch_average(
        &self,
        dir: &Directory,
        owners: &[Address],
        reader: &Address,
        keys: Option<&KeyPair>,
    ) -> Result<ModelState, ProtocolError> {
        let models = owners
            .iter()
            .map(|o| self.fetch(dir, o, reader, keys))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(average_model_refs(&models.iter().collect::<Vec<_>>())?)
    }
}

impl Worker {
    fn submits(&mut self, round: u32) -> bool {
        match self.behavior {
            WorkerBehavior::NonSubmitter {
                from_round,
                probability,
            } if round >= from_round => self.behavior_rng.gen::<f64>() >= probability,
            _ => true,
        }
    }

    /// Scores for every peer model this round, or `None` when withholding.
    fn score_round(
        &mut self,
        env: &Env,
        dir: &Directory,
        round: u32,
        peers: &[Address],
    ) -> Result<Option<Vec<ScoreEntry>>, ProtocolError> {
        if !self.submits(round) {
            return Ok(None);
        }
        let others = peers.iter().filter(|p| **p != self.address);
        let entries = match self.behavior {
            WorkerBehavior::InflatedScorer { floor_bp } => {
                let mut entries = vec![ScoreEntry::new(self.address.clone(), 10_000)];
                entries.extend(others.map(|p| ScoreEntry::new(p.clone(), floor_bp)));
                entries
            }
            _ => others
                .map(|p| {
                    let model = env.fetch(dir, p, &self.address, self.keys.as_ref())?;
                    let metrics = evaluate(&model, &self.eval)?;
                    Ok(ScoreEntry::new(p.clone(), metrics.accuracy_bp()))
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?,
        };
        Ok(Some(entries))
    }
}

/// Runs `f` on each item, concurrently when `parallel` is set. Results come
/// back in input order either way.
fn each<T: Send, R: Send>(
    parallel: bool,
    items: Vec<T>,
    f: impl Fn(T) -> R + Sync + Send,
) -> Vec<R> {
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

pub fn run_task(cfg: &SimConfig) -> Result<RunReport, ProtocolError> {
    simulate(cfg).map(|out| out.report)
}

/// Runs the whole task and returns the report together with the final model
/// and the ledger event log.
pub fn simulate(cfg: &SimConfig) -> Result<RunOutput, ProtocolError> {
    cfg.validate()?;
    let env = Env {
        store: ContentStore::new(),
        start: Instant::now(),
        crypto_ns: AtomicU64::new(0),
        objects_pushed: AtomicU64::new(0),
        bytes_pushed: AtomicU64::new(0),
    };
    let seed = cfg.seed;
    let ds = &cfg.dataset;
    let train = generate_dataset(seed, ds.n, ds.dim, ds.classes, ds.spread)?;
    let test = generate_holdout(seed, ds.test_n, ds.dim, ds.classes, ds.spread)?;
    let shards = partition_even(&train, cfg.workers, derive_seed(seed, "partition", 0))?;

    let requester = Address::requester();
    let requester_keys = match cfg.encrypt {
        true => Some(env.timed_crypto(|| {
            KeyPair::generate(&mut crypto_rng(seed, "requester-keys", 0))
        })?),
        false => None,
    };
    let mut requester_rng = crypto_rng(seed, "requester-seal", 0);
    let mut requester_tracker = PushTracker::new(cfg.push_window);

    let mut workers = Vec::with_capacity(cfg.workers);
    for (index, shard) in shards.iter().enumerate() {
        let (local_train, local_eval) = if cfg.shared_test_set {
            (shard.clone(), test.clone())
        } else {
            split_holdout(shard, cfg.holdout_fraction, derive_seed(seed, "holdout", index as u64))?
        };
        let keys = match cfg.encrypt {
            true => Some(env.timed_crypto(|| {
                KeyPair::generate(&mut crypto_rng(seed, "worker-keys", index as u64))
            })?),
            false => None,
        };
        workers.push(Worker {
            index,
            address: Address::worker(index),
            behavior: cfg.behavior(index),
            keys,
            train: local_train,
            eval: local_eval,
            tracker: PushTracker::new(cfg.push_window),
            crypto_rng: crypto_rng(seed, "worker-seal", index as u64),
            behavior_rng: sim_rng(seed, "behavior", index as u64),
        });
    }

    // Requester publishes the initial model, sealed to itself.
    let initial = init_model(&cfg.arch(), derive_seed(seed, "init", 0))?;
    let initial_bytes = serialize_model(&initial);
    let model_uri = match &requester_keys {
        Some(keys) => {
            let env_bytes = env
                .timed_crypto(|| seal_model(&keys.public, &initial_bytes, &mut requester_rng))?
                .to_bytes();
            env.push(&env_bytes, &mut requester_tracker)?
        }
        None => env.push(&initial_bytes, &mut requester_tracker)?,
    };
    let contract = Contract::initialize(
        requester.clone(),
        model_uri,
        cfg.rounds,
        cfg.reward,
        cfg.collateral,
        cfg.top_k,
    )?;

    let mut bootstrap: BTreeMap<Address, ContentHash> = BTreeMap::new();
    for w in &workers {
        let public_key = w.keys.as_ref().map(|k| hex::encode(k.public.to_der()));
        let uri = contract.join_task(&w.address, cfg.collateral, public_key)?;
        bootstrap.insert(w.address.clone(), uri);
    }
    // Give every joined worker a copy of the initial model key.
    if let Some(keys) = &requester_keys {
        let original = Envelope::from_bytes(&env.store.get(&model_uri)?)?;
        let recipients: Vec<&PublicKey> = workers
            .iter()
            .map(|w| &w.keys.as_ref().expect("encrypting run").public)
            .collect();
        let grants = env.timed_crypto(|| {
            grant_access(&keys.private, &original, &recipients, &mut requester_rng)
        })?;
        for (w, grant) in workers.iter().zip(grants) {
            let hash = env.push(&grant.to_bytes(), &mut requester_tracker)?;
            bootstrap.insert(w.address.clone(), hash);
        }
    }
    contract.start_task(&requester)?;

    let mut prev_dir: Directory = BTreeMap::from([(requester.clone(), bootstrap)]);
    let mut prev_owners = vec![requester.clone()];
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut epochs = Vec::new();

    for round in 0..cfg.rounds {
        let active = contract.read(|l| l.active_workers());
        if active.is_empty() {
            return Err(ProtocolError::NoActiveWorkers { round });
        }
        let mut participants: Vec<&mut Worker> = workers
            .iter_mut()
            .filter(|w| active.contains(&w.address))
            .collect();

        // (1) fetch, open and average the previous round's models.
        let starts = each(cfg.parallel, participants.iter().map(|w| &**w).collect(), |w| {
            env.fetch_average(&prev_dir, &prev_owners, &w.address, w.keys.as_ref())
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let collected = env.store.gc();

        // (2) local training, reporting each epoch on the shared test set.
        let trained = each(
            cfg.parallel,
            participants.iter().map(|w| &**w).zip(&starts).collect(),
            |(w, start)| {
                let train_cfg = TrainConfig {
                    learning_rate: cfg.learning_rate,
                    epochs: cfg.epochs_per_round,
                    batch_size: cfg.batch_size,
                    seed: derive_seed(seed, "train", round as u64 * cfg.workers as u64 + w.index as u64),
                };
                let mut rows = Vec::with_capacity(cfg.epochs_per_round);
                let mut eval_err = None;
                let model = train_local_observed(start, &w.train, &train_cfg, |report| {
                    match evaluate(report.model, &test) {
                        Ok(m) => rows.push(EpochRecord {
                            round,
                            epoch: round as usize * cfg.epochs_per_round + report.epoch + 1,
                            worker: w.address.clone(),
                            accuracy: m.accuracy,
                            macro_precision: m.macro_precision,
                            macro_recall: m.macro_recall,
                            elapsed_ms: env.elapsed_ms(),
                        }),
                        Err(e) => eval_err = Some(e),
                    }
                })
                .map_err(|source| ProtocolError::Aborted {
                    round,
                    worker: w.address.clone(),
                    source,
                })?;
                if let Some(e) = eval_err {
                    return Err(e.into());
                }
                Ok((model, rows))
            },
        )
        .into_iter()
        .collect::<Result<Vec<_>, ProtocolError>>()?;

        // Seal for every active worker plus the requester and push.
        let mut readers: Vec<(Address, Option<PublicKey>)> = participants
            .iter()
            .map(|w| (w.address.clone(), w.keys.as_ref().map(|k| k.public.clone())))
            .collect();
        readers.push((
            requester.clone(),
            requester_keys.as_ref().map(|k| k.public.clone()),
        ));
        let pushes = each(
            cfg.parallel,
            participants.iter_mut().zip(&trained).collect(),
            |(w, (model, _))| -> Result<(Address, BTreeMap<Address, ContentHash>), ProtocolError> {
                let bytes = serialize_model(model);
                let mut row = BTreeMap::new();
                if cfg.encrypt {
                    let keys: Vec<&PublicKey> = readers
                        .iter()
                        .map(|(_, k)| k.as_ref().expect("encrypting run"))
                        .collect();
                    let envelopes = env
                        .timed_crypto(|| seal_model_for_group(&keys, &bytes, &mut w.crypto_rng))?;
                    for ((reader, _), envelope) in readers.iter().zip(envelopes) {
                        let hash = env.push(&envelope.to_bytes(), &mut w.tracker)?;
                        row.insert(reader.clone(), hash);
                    }
                } else {
                    let hash = env.push(&bytes, &mut w.tracker)?;
                    for (reader, _) in &readers {
                        row.insert(reader.clone(), hash);
                    }
                }
                Ok((w.address.clone(), row))
            },
        );
        let mut dir: Directory = BTreeMap::new();
        for push in pushes {
            let (owner, row) = push?;
            dir.insert(owner, row);
        }

        let mut model_digests = BTreeMap::new();
        let mut worker_accuracy = BTreeMap::new();
        for (w, (model, rows)) in participants.iter().zip(&trained) {
            model_digests.insert(w.address.clone(), ContentHash::of(&serialize_model(model)));
            if let Some(last) = rows.last() {
                worker_accuracy.insert(w.address.clone(), last.accuracy);
            }
            epochs.extend(rows.iter().cloned());
        }

        // (3) peer evaluation, submitted in address order.
        let submissions = each(cfg.parallel, participants.iter_mut().collect(), |w| {
            w.score_round(&env, &dir, round, &active)
                .map(|entries| (w.address.clone(), entries))
        });
        for submission in submissions {
            if let (evaluator, Some(entries)) = submission? {
                contract.submit_score(round, &evaluator, entries)?;
            }
        }

        // (4) requester: aggregate, detect, rank, pay, advance.
        let matrix = contract.get_submissions(round)?;
        let aggregates = aggregate_scores(&matrix)?;
        let flagged = match detect_dishonest(&matrix, cfg.tolerance_bp, cfg.flag_fraction) {
            Ok(set) => set,
            Err(ScoringError::QuorumTooSmall(_)) => non_submitters(&matrix),
            Err(e) => return Err(e.into()),
        };
        let mut slashed = BTreeMap::new();
        for offender in &flagged {
            contract.flag_worker(&requester, offender)?;
            if cfg.forfeiture {
                let held = contract.read(|l| l.worker(offender).map_or(0, |r| r.deposit_held));
                let shares = if held > 0 {
                    contract.forfeit_and_redistribute(&requester, offender)?
                } else {
                    contract.remove_worker(offender)?;
                    BTreeMap::new()
                };
                slashed.insert(offender.clone(), shares);
            }
        }
        let survivors = contract.read(|l| l.active_workers());
        let expected = contract.read(|l| l.expected_rank_len());
        let ranking = select_top_k(&aggregates, &survivors, expected);
        contract.submit_round_topk(&requester, round, ranking.clone())?;
        let payouts = contract.distribute_rewards(&requester, round)?;
        contract.next_round(&requester)?;

        let survivor_models: Vec<&ModelState> = participants
            .iter()
            .zip(&trained)
            .filter(|(w, _)| survivors.contains(&w.address))
            .map(|(_, (m, _))| m)
            .collect();
        let global_accuracy = match survivor_models.is_empty() {
            true => 0.0,
            false => evaluate(&average_model_refs(&survivor_models)?, &test)?.accuracy,
        };

        rounds.push(RoundRecord {
            round,
            model_digests,
            scores: matrix,
            aggregates,
            ranking,
            payouts,
            flagged: flagged.into_iter().collect(),
            slashed,
            global_accuracy,
            worker_accuracy,
            cost: RoundCost {
                elapsed_ms: env.elapsed_ms(),
                objects_collected: collected,
                objects_stored: env.store.len(),
            },
        });

        dir.retain(|owner, _| survivors.contains(owner));
        prev_owners = dir.keys().cloned().collect();
        prev_dir = dir;
    }

    // Requester builds, publishes and records the final global model.
    if prev_owners.is_empty() {
        return Err(ProtocolError::NoActiveWorkers { round: cfg.rounds });
    }
    let final_model =
        env.fetch_average(&prev_dir, &prev_owners, &requester, requester_keys.as_ref())?;
    env.store.gc();
    let final_bytes = serialize_model(&final_model);
    let final_uri = match &requester_keys {
        Some(keys) => {
            let sealed = env
                .timed_crypto(|| seal_model(&keys.public, &final_bytes, &mut requester_rng))?
                .to_bytes();
            env.push(&sealed, &mut requester_tracker)?
        }
        None => env.push(&final_bytes, &mut requester_tracker)?,
    };
    let close = contract.close_task(&requester, final_uri)?;
    let final_metrics = evaluate(&final_model, &test)?;

    let ledger = contract.snapshot();
    let balances: BTreeMap<Address, Tokens> =
        ledger.workers().map(|r| (r.address.clone(), r.balance)).collect();
    let refunds: BTreeMap<Address, Tokens> =
        ledger.workers().map(|r| (r.address.clone(), r.refunded)).collect();
    let slashed: BTreeSet<Address> = rounds
        .iter()
        .flat_map(|r| r.slashed.keys().cloned())
        .collect();
    let audit = ledger.audit();
    let summary = RunSummary {
        final_model_digest: ContentHash::of(&final_bytes),
        final_metrics,
        balances,
        refunds,
        pool_shares: close.pool_shares,
        slashed: slashed.into_iter().collect(),
        total_paid: rounds
            .iter()
            .flat_map(|r| r.payouts.values())
            .sum(),
        undistributed: audit.undistributed_reward,
        audit,
    };
    let report = RunReport {
        config: cfg.clone(),
        rounds,
        epochs,
        summary,
        cost: RunCost {
            wall_ms: env.elapsed_ms(),
            crypto_ms: env.crypto_ns.load(Ordering::Relaxed) as f64 / 1e6,
            objects_pushed: env.objects_pushed.load(Ordering::Relaxed),
            bytes_pushed: env.bytes_pushed.load(Ordering::Relaxed),
            objects_stored: env.store.len(),
        },
        ledger_log: None,
    };
    Ok(RunOutput {
        report,
        final_model,
        events: contract.events(),
        ledger,
    })
}
