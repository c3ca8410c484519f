//! Independent reference checks shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use stsim::nic::{CounterId, Nic, NicConfig, OpId, OpKind, TriggeredOp};
use stsim::simcore::{SlotId, TraceRecord};

/// One step of a triggered-op scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Enqueue the next op of the scenario.
    Enqueue,
    /// Add 1 to counter 0 or 1.
    Bump(usize),
}

/// (trigger counter, threshold, completion counter), all counters in 0..2.
pub type OpSpec = (usize, u64, usize);

/// Brute-force evaluator: after every step, fire every enqueued op whose
/// trigger has reached its threshold, complete it at once, and repeat until
/// nothing changes. Returns the step at which each op fired.
pub fn reference_fires(ops: &[OpSpec], steps: &[Step]) -> Vec<Option<usize>> {
    let mut counters = [0u64; 2];
    let mut enqueued = 0;
    let mut fired = vec![None; ops.len()];
    for (i, step) in steps.iter().enumerate() {
        match *step {
            Step::Enqueue => enqueued += 1,
            Step::Bump(c) => counters[c] += 1,
        }
        loop {
            let ready = (0..enqueued).find(|&k| fired[k].is_none() && counters[ops[k].0] >= ops[k].1);
            let Some(k) = ready else { break };
            fired[k] = Some(i);
            counters[ops[k].2] += 1;
        }
    }
    fired
}

/// Drives the real NIC model through the same scenario. Errors describe a
/// double fire.
pub fn nic_fires(ops: &[OpSpec], steps: &[Step]) -> Result<Vec<Option<usize>>, String> {
    let mut nic = Nic::new(NicConfig {
        nodes: 1,
        counter_budget: 4,
        tops_capacity: Some(8),
    });
    let ctr: Vec<CounterId> = (0..2).map(|_| nic.alloc_counter(0).unwrap()).collect();
    let mut ids: Vec<OpId> = Vec::new();
    let mut fired = vec![None; ops.len()];
    for (i, step) in steps.iter().enumerate() {
        let mut queue = match *step {
            Step::Enqueue => {
                let (trigger, threshold, completion) = ops[ids.len()];
                let op = TriggeredOp {
                    kind: OpKind::AtomicIncrement {
                        slot: SlotId(0),
                        increment: 1,
                    },
                    node: 0,
                    pool: 0,
                    uses_pool: true,
                    trigger: ctr[trigger],
                    threshold,
                    completion: ctr[completion],
                    epoch: 0,
                };
                let (id, now) = nic.enqueue_triggered(op).map_err(|e| e.to_string())?;
                ids.push(id);
                now
            }
            Step::Bump(c) => nic.counter_add(ctr[c], 1).map_err(|e| e.to_string())?,
        };
        while let Some(id) = queue.pop() {
            let k = ids.iter().position(|&x| x == id).ok_or("unknown op fired")?;
            if fired[k].is_some() {
                return Err(format!("op {k} fired twice"));
            }
            fired[k] = Some(i);
            nic.begin_execute(id).map_err(|e| e.to_string())?;
            queue.extend(nic.complete(id).map_err(|e| e.to_string())?);
        }
    }
    Ok(fired)
}

fn all_ops(n: usize) -> Vec<Vec<OpSpec>> {
    let mut one = Vec::new();
    for t in 0..2 {
        for th in 1..=3 {
            for c in 0..2 {
                one.push((t, th, c));
            }
        }
    }
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                one.iter().map(move |&o| {
                    let mut v = prefix.clone();
                    v.push(o);
                    v
                })
            })
            .collect();
    }
    out
}

/// Every order of `n_ops` enqueues and every sequence of `n_bumps` updates.
fn all_schedules(n_ops: usize, n_bumps: usize) -> Vec<Vec<Step>> {
    let total = n_ops + n_bumps;
    let mut out = Vec::new();
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != n_ops {
            continue;
        }
        for bumps in 0u32..(1 << n_bumps) {
            let mut b = 0;
            let steps = (0..total)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        Step::Enqueue
                    } else {
                        b += 1;
                        Step::Bump((bumps >> (b - 1) & 1) as usize)
                    }
                })
                .collect();
            out.push(steps);
        }
    }
    out
}

/// Exhaustive comparison; returns (cases checked, first few disagreements).
pub fn exhaustive_nic_check() -> (u64, Vec<String>) {
    let mut cases = 0;
    let mut bad = Vec::new();
    for n_ops in 1..=3 {
        let configs = all_ops(n_ops);
        for n_bumps in 0..=4 {
            for steps in all_schedules(n_ops, n_bumps) {
                for ops in &configs {
                    cases += 1;
                    let want = reference_fires(ops, &steps);
                    match nic_fires(ops, &steps) {
                        Ok(got) if got == want => {}
                        got => {
                            if bad.len() < 5 {
                                bad.push(format!("ops {ops:?} steps {steps:?}: nic {got:?}, reference {want:?}"));
                            }
                        }
                    }
                }
            }
        }
    }
    (cases, bad)
}

fn pair_key(r: &TraceRecord) -> Option<(String, u64, u64, u64)> {
    Some((
        r.get("win")?.to_string(),
        r.get_u64("target")?,
        r.get_u64("origin")?,
        r.get_u64("pair")?,
    ))
}

/// Payload data may only start or land while the matching exposure epoch of
/// its target is open.
pub fn epoch_violations(trace: &[TraceRecord]) -> Vec<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum S {
        Open,
        Closed,
    }
    let mut state: HashMap<(String, u64, u64, u64), S> = HashMap::new();
    let mut bad = Vec::new();
    for r in trace {
        match r.action {
            "exposure_open" | "exposure_close" => {
                if let Some(k) = pair_key(r) {
                    let s = if r.action == "exposure_open" { S::Open } else { S::Closed };
                    state.insert(k, s);
                }
            }
            "payload_begin" | "payload_deliver" => {
                let Some(k) = pair_key(r) else { continue };
                if state.get(&k) != Some(&S::Open) {
                    bad.push(r.to_string());
                }
            }
            _ => {}
        }
    }
    bad
}

/// Trace records by action name.
pub fn count(trace: &[TraceRecord], action: &str) -> usize {
    trace.iter().filter(|r| r.action == action).count()
}
