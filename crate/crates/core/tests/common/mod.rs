//! Independent reference implementations used as test oracles. None of these
//! call into the library code they check.
#![allow(dead_code)]

use fedsim_core::ledger::{Address, Call, ScoreEntry, TaskLedger, TaskStatus};
use fedsim_core::store::ContentHash;

/// Element-wise arithmetic mean, one index at a time.
pub fn mean_oracle(lists: &[Vec<f64>]) -> Vec<f64> {
    let len = lists[0].len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let mut sum = 0.0f64;
        for l in lists {
            sum += l[i];
        }
        out.push(sum / lists.len() as f64);
    }
    out
}

/// Mean cross-entropy of a ReLU MLP computed straight from the flat
/// parameter vector: per layer, a fan_in x fan_out row-major weight block
/// followed by fan_out biases.
pub fn naive_loss(arch: &[usize], params: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let mut a = x.clone();
        let mut off = 0;
        let layers = arch.len() - 1;
        for l in 0..layers {
            let (fi, fo) = (arch[l], arch[l + 1]);
            let mut z = vec![0.0; fo];
            for j in 0..fo {
                let mut s = params[off + fi * fo + j];
                for i in 0..fi {
                    s += a[i] * params[off + i * fo + j];
                }
                z[j] = if l + 1 < layers { s.max(0.0) } else { s };
            }
            off += fi * fo + fo;
            a = z;
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[y];
    }
    total / xs.len() as f64
}

/// Central finite differences of [`naive_loss`].
pub fn numeric_gradient(
    arch: &[usize],
    params: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up = naive_loss(arch, &p, xs, ys);
            p[k] = orig - h;
            let down = naive_loss(arch, &p, xs, ys);
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Dense score grid: `grid[e][m]` is evaluator e's score for model m.
pub type Grid = Vec<Vec<Option<u16>>>;

/// Aggregates and ranking by brute force: sum the off-diagonal column,
/// floor-divide, then stable-sort descending. Addresses are `worker(i)`, so
/// index order is address order and a stable sort settles ties.
pub fn brute_force_ranking(grid: &Grid, submitted: &[bool]) -> Vec<(usize, u32)> {
    let n = grid.len();
    let mut agg: Vec<(usize, u32)> = (0..n)
        .map(|m| {
            let mut sum = 0u64;
            let mut count = 0u64;
            for e in 0..n {
                if e == m || !submitted[e] {
                    continue;
                }
                if let Some(s) = grid[e][m] {
                    sum += s as u64;
                    count += 1;
                }
            }
            (m, if count == 0 { 0 } else { (sum / count) as u32 })
        })
        .collect();
    let mut sorted = Vec::with_capacity(n);
    while !agg.is_empty() {
        let mut best = 0;
        for i in 1..agg.len() {
            if agg[i].1 > agg[best].1 {
                best = i;
            }
        }
        sorted.push(agg.remove(best));
    }
    sorted
}

/// Rank i of 1..=n receives floor(budget / 2^i); the last rank also takes
/// the leftover, computed by repeated halving.
pub fn geometric_oracle(budget: u64, n: usize) -> Vec<u64> {
    let mut shares = Vec::with_capacity(n);
    let mut half = budget;
    for _ in 0..n {
        half /= 2;
        shares.push(half);
    }
    let paid: u64 = shares.iter().sum();
    if let Some(last) = shares.last_mut() {
        *last += budget - paid;
    }
    shares
}

/// Runs a full task where every round ranks the first `k` workers by
/// address. Returns the ledger and the per-round payout sums.
pub fn run_ledger_task(total: u64, rounds: u32, k: u32, workers: usize) -> (TaskLedger, Vec<u64>) {
    let req = Address::requester();
    let mut ledger =
        TaskLedger::initialize_task(req.clone(), ContentHash::of(b"m0"), rounds, total, 10, k)
            .expect("valid parameters");
    for i in 0..workers {
        ledger.join_task(Address::worker(i), 10, None).unwrap();
    }
    ledger.start_task(&req).unwrap();
    let mut sums = Vec::new();
    for r in 0..rounds {
        let ranked: Vec<Address> = (0..ledger.expected_rank_len()).map(Address::worker).collect();
        ledger.submit_round_topk(&req, r, ranked).unwrap();
        let paid = ledger.distribute_rewards(&req, r).unwrap();
        sums.push(paid.values().sum());
        ledger.next_round(&req).unwrap();
    }
    ledger.close_task(&req, ContentHash::of(b"final")).unwrap();
    (ledger, sums)
}

fn req() -> Address {
    Address::requester()
}

fn w(i: usize) -> Address {
    Address::worker(i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Created,
    Running,
    Completed,
    Closed,
}

pub const PHASES: [Phase; 4] = [Phase::Created, Phase::Running, Phase::Completed, Phase::Closed];

pub const OPS: [&str; 11] = [
    "initialize_task",
    "join_task",
    "start_task",
    "submit_score",
    "submit_round_topk",
    "distribute_rewards",
    "remove_worker",
    "flag_worker",
    "forfeit_and_redistribute",
    "next_round",
    "close_task",
];

pub fn ledger_in(phase: Phase) -> TaskLedger {
    let mut l = TaskLedger::initialize_task(req(), ContentHash::of(b"m0"), 2, 100, 10, 2).unwrap();
    for i in 0..3 {
        l.join_task(w(i), 10, None).unwrap();
    }
    if phase == Phase::Created {
        return l;
    }
    l.start_task(&req()).unwrap();
    if phase == Phase::Running {
        return l;
    }
    for r in 0..2 {
        l.submit_round_topk(&req(), r, vec![w(0), w(1)]).unwrap();
        l.distribute_rewards(&req(), r).unwrap();
        l.next_round(&req()).unwrap();
    }
    if phase == Phase::Completed {
        return l;
    }
    l.close_task(&req(), ContentHash::of(b"final")).unwrap();
    l
}

/// A well-formed call for `op`, with whatever earlier steps it needs in the
/// running phase already applied to `ledger`.
pub fn prepare(ledger: &mut TaskLedger, op: &str) -> Call {
    let round = ledger.current_round().min(ledger.num_rounds() - 1);
    let running = ledger.status() == TaskStatus::Running;
    match op {
        "initialize_task" => Call::InitializeTask {
            requester: req(),
            model_uri: ContentHash::of(b"m1"),
            num_rounds: 1,
            total_reward: 10,
            collateral: 1,
            top_k: 1,
        },
        "join_task" => Call::JoinTask {
            address: w(7),
            deposit: 10,
            public_key: None,
        },
        "start_task" => Call::StartTask { caller: req() },
        "submit_score" => Call::SubmitScore {
            round,
            evaluator: w(0),
            entries: vec![ScoreEntry::new(w(1), 9000)],
        },
        "submit_round_topk" => Call::SubmitRoundTopk {
            caller: req(),
            round,
            ranked: vec![w(0), w(1)],
        },
        "distribute_rewards" => {
            if running {
                ledger.submit_round_topk(&req(), round, vec![w(0), w(1)]).unwrap();
            }
            Call::DistributeRewards { caller: req(), round }
        }
        "remove_worker" => Call::RemoveWorker { address: w(2) },
        "flag_worker" => Call::FlagWorker {
            caller: req(),
            worker: w(2),
        },
        "forfeit_and_redistribute" => Call::ForfeitAndRedistribute {
            caller: req(),
            offender: w(2),
        },
        "next_round" => {
            if running {
                ledger.submit_round_topk(&req(), round, vec![w(0), w(1)]).unwrap();
                ledger.distribute_rewards(&req(), round).unwrap();
            }
            Call::NextRound { caller: req() }
        }
        "close_task" => Call::CloseTask {
            caller: req(),
            final_model: ContentHash::of(b"final"),
        },
        other => unreachable!("unknown op {other}"),
    }
}

pub fn legal(phase: Phase, op: &str) -> bool {
    match op {
        "initialize_task" => false,
        "join_task" | "start_task" => phase == Phase::Created,
        "remove_worker" => matches!(phase, Phase::Created | Phase::Running),
        "close_task" => phase == Phase::Completed,
        _ => phase == Phase::Running,
    }
}

/// Applies a well-formed call for every (phase, operation) pair. Legal pairs
/// must succeed; illegal ones must fail and leave the ledger untouched.
pub fn check_status_matrix() -> Result<usize, String> {
    let mut checked = 0;
    for phase in PHASES {
        for op in OPS {
            let mut ledger = ledger_in(phase);
            let call = prepare(&mut ledger, op);
            let before = ledger.clone();
            let result = ledger.apply(&call);
            match (legal(phase, op), result) {
                (true, Err(e)) => return Err(format!("{op} in {phase:?} failed: {e}")),
                (false, Ok(_)) => return Err(format!("{op} in {phase:?} unexpectedly succeeded")),
                (false, Err(_)) if ledger != before => {
                    return Err(format!("{op} in {phase:?} changed state on error"))
                }
                _ => {}
            }
            if !ledger.audit().is_balanced() {
                return Err(format!("{op} in {phase:?} broke conservation"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
