//! NIC triggered operations: hardware counters, MMIO registers bound to
//! counters, and a bounded pool of deferred command descriptors.
//!
//! This is a pure state machine. Every call that can make a descriptor's
//! trigger counter reach its threshold returns the descriptors that fired,
//! in enqueue order; the simulator decides when they execute and calls
//! [`Nic::complete`] afterwards, which bumps the completion counter and may
//! fire chained descriptors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rma::{DeliveryTag, SignalTag};
pub use crate::simcore::{CounterId, OpId, RegisterId};
use crate::simcore::{Rank, RegionId, SlotId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NicError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {node}: counter budget of {budget} exhausted")]
    CounterBudget { node: usize, budget: u32 },
    #[error("unknown or released counter {0}")]
    UnknownCounter(CounterId),
    #[error("unknown register {0}")]
    UnknownRegister(RegisterId),
    #[error("unknown triggered op {0}")]
    UnknownOp(OpId),
    #[error("counter {counter} lives on node {counter_node}, op targets node {node}")]
    CrossNode {
        counter: CounterId,
        counter_node: usize,
        node: usize,
    },
    #[error("triggered-op pool of rank {pool} is full ({capacity} descriptors)")]
    ResourceExhausted { pool: Rank, capacity: u32 },
    #[error("tops_capacity is not configured but a triggered op was needed")]
    CapacityUnset,
    #[error("counter {0} reset while descriptors still wait on it")]
    ResetWithSubscribers(CounterId),
    #[error("{op}: illegal transition from {from:?}")]
    BadTransition { op: OpId, from: OpState },
}

/// How counters are reused across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CounterMode {
    /// Counters are reset to zero at each epoch; thresholds restart at 1.
    Reset,
    /// Counters only grow; thresholds grow with the epoch count.
    #[default]
    Monotonic,
}

impl FromStr for CounterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reset" => Ok(CounterMode::Reset),
            "monotonic" => Ok(CounterMode::Monotonic),
            _ => Err(format!("counter_mode must be reset or monotonic, got `{s}`")),
        }
    }
}

impl fmt::Display for CounterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CounterMode::Reset => "reset",
            CounterMode::Monotonic => "monotonic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    /// Inter-node payload write; source bytes are read when it starts executing.
    PayloadPut {
        src: RegionId,
        src_offset: usize,
        dst: RegionId,
        dst_offset: usize,
        bytes: usize,
        tag: Option<DeliveryTag>,
    },
    /// Remote atomic increment of a signal slot.
    SignalPut {
        slot: SlotId,
        increment: u64,
        tag: Option<SignalTag>,
    },
    /// Local atomic increment of a signal slot.
    AtomicIncrement { slot: SlotId, increment: u64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::PayloadPut { .. } => "payload",
            OpKind::SignalPut { .. } => "signal",
            OpKind::AtomicIncrement { .. } => "atomic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggeredOp {
    pub kind: OpKind,
    /// Node whose NIC holds the descriptor.
    pub node: usize,
    /// Endpoint (rank) whose descriptor budget this op draws from.
    pub pool: Rank,
    pub uses_pool: bool,
    pub trigger: CounterId,
    pub threshold: u64,
    pub completion: CounterId,
    /// Throttling epoch of the issuing rank.
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpState {
    Pending,
    Fired,
    Executing,
    Complete,
}

#[derive(Debug)]
struct Counter {
    node: usize,
    value: u64,
    /// Pending descriptors triggered by this counter.
    subscribers: Vec<OpId>,
    /// Live descriptors naming this counter as trigger or completion.
    refs: u32,
    live: bool,
    retiring: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TopsPool {
    pub in_flight: u32,
    pub max_in_flight: u32,
    /// Pool-using descriptors that have completed, ever.
    pub completed: u64,
}

#[derive(Debug, Clone)]
pub struct NicConfig {
    pub nodes: usize,
    pub counter_budget: u32,
    pub tops_capacity: Option<u32>,
}

#[derive(Debug)]
pub struct Nic {
    counters: Vec<Counter>,
    live_per_node: Vec<u32>,
    budget: u32,
    registers: Vec<CounterId>,
    ops: Vec<(TriggeredOp, OpState)>,
    pools: BTreeMap<Rank, TopsPool>,
    capacity: Option<u32>,
}

impl Nic {
    pub fn new(cfg: NicConfig) -> Self {
        Nic {
            counters: Vec::new(),
            live_per_node: vec![0; cfg.nodes],
            budget: cfg.counter_budget,
            registers: Vec::new(),
            ops: Vec::new(),
            pools: BTreeMap::new(),
            capacity: cfg.tops_capacity,
        }
    }

    pub fn capacity(&self) -> Option<u32> {
        self.capacity
    }

    pub fn alloc_counter(&mut self, node: usize) -> Result<CounterId, NicError> {
        let live = self.live_per_node.get_mut(node).ok_or(NicError::UnknownNode(node))?;
        if *live >= self.budget {
            return Err(NicError::CounterBudget {
                node,
                budget: self.budget,
            });
        }
        *live += 1;
        self.counters.push(Counter {
            node,
            value: 0,
            subscribers: Vec::new(),
            refs: 0,
            live: true,
            retiring: false,
        });
        Ok(CounterId(self.counters.len() as u32 - 1))
    }

    fn live_counter(&self, id: CounterId) -> Result<&Counter, NicError> {
        self.counters
            .get(id.index())
            .filter(|c| c.live)
            .ok_or(NicError::UnknownCounter(id))
    }

    fn live_counter_mut(&mut self, id: CounterId) -> Result<&mut Counter, NicError> {
        self.counters
            .get_mut(id.index())
            .filter(|c| c.live)
            .ok_or(NicError::UnknownCounter(id))
    }

    /// Binds a fresh MMIO register to `counter`. Several registers may share
    /// one counter.
    pub fn bind_mmio(&mut self, counter: CounterId) -> Result<RegisterId, NicError> {
        self.live_counter(counter)?;
        self.registers.push(counter);
        Ok(RegisterId(self.registers.len() as u32 - 1))
    }

    pub fn register_counter(&self, reg: RegisterId) -> Result<CounterId, NicError> {
        self.registers
            .get(reg.index())
            .copied()
            .ok_or(NicError::UnknownRegister(reg))
    }

    pub fn counter(&self, id: CounterId) -> Result<u64, NicError> {
        Ok(self.live_counter(id)?.value)
    }

    pub fn counter_node(&self, id: CounterId) -> Result<usize, NicError> {
        Ok(self.live_counter(id)?.node)
    }

    pub fn subscribers(&self, id: CounterId) -> Result<&[OpId], NicError> {
        Ok(&self.live_counter(id)?.subscribers)
    }

    pub fn pool(&self, rank: Rank) -> TopsPool {
        self.pools.get(&rank).copied().unwrap_or_default()
    }

    /// Free descriptor slots of a rank's pool; `None` without a configured
    /// capacity.
    pub fn pool_free(&self, rank: Rank) -> Option<u32> {
        self.capacity.map(|c| c - self.pool(rank).in_flight)
    }

    pub fn max_in_flight(&self) -> u32 {
        self.pools.values().map(|p| p.max_in_flight).max().unwrap_or(0)
    }

    pub fn ops_enqueued(&self) -> u64 {
        self.ops.len() as u64
    }

    pub fn op(&self, id: OpId) -> Result<&TriggeredOp, NicError> {
        self.ops.get(id.index()).map(|(op, _)| op).ok_or(NicError::UnknownOp(id))
    }

    pub fn state(&self, id: OpId) -> Result<OpState, NicError> {
        self.ops.get(id.index()).map(|(_, s)| *s).ok_or(NicError::UnknownOp(id))
    }

    /// Descriptors still waiting for their trigger.
    pub fn pending(&self) -> impl Iterator<Item = (OpId, &TriggeredOp)> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| *s == OpState::Pending)
            .map(|(i, (op, _))| (OpId(i as u32), op))
    }

    /// Adds a descriptor. Returns its id and, if its trigger counter already
    /// meets the threshold, the id again in the fired list.
    pub fn enqueue_triggered(&mut self, op: TriggeredOp) -> Result<(OpId, Vec<OpId>), NicError> {
        for c in [op.trigger, op.completion] {
            let counter_node = self.live_counter(c)?.node;
            if counter_node != op.node {
                return Err(NicError::CrossNode {
                    counter: c,
                    counter_node,
                    node: op.node,
                });
            }
        }
        if op.uses_pool {
            let capacity = self.capacity.ok_or(NicError::CapacityUnset)?;
            let pool = self.pools.entry(op.pool).or_default();
            if pool.in_flight >= capacity {
                return Err(NicError::ResourceExhausted {
                    pool: op.pool,
                    capacity,
                });
            }
            pool.in_flight += 1;
            pool.max_in_flight = pool.max_in_flight.max(pool.in_flight);
        }
        let id = OpId(self.ops.len() as u32);
        self.live_counter_mut(op.trigger)?.refs += 1;
        self.live_counter_mut(op.completion)?.refs += 1;
        let ready = self.live_counter(op.trigger)?.value >= op.threshold;
        let trigger = op.trigger;
        if ready {
            self.ops.push((op, OpState::Fired));
            Ok((id, vec![id]))
        } else {
            self.ops.push((op, OpState::Pending));
            self.live_counter_mut(trigger)?.subscribers.push(id);
            Ok((id, Vec::new()))
        }
    }

    pub fn counter_add(&mut self, id: CounterId, delta: u64) -> Result<Vec<OpId>, NicError> {
        let counter = self.live_counter_mut(id)?;
        counter.value += delta;
        let value = counter.value;
        let subs = std::mem::take(&mut counter.subscribers);
        let (fire, keep): (Vec<OpId>, Vec<OpId>) = subs
            .into_iter()
            .partition(|op| self.ops[op.index()].0.threshold <= value);
        self.live_counter_mut(id)?.subscribers = keep;
        for op in &fire {
            self.ops[op.index()].1 = OpState::Fired;
        }
        Ok(fire)
    }

    /// A local store to an MMIO register: increments the bound counter by one.
    pub fn mmio_store(&mut self, reg: RegisterId) -> Result<(CounterId, Vec<OpId>), NicError> {
        let counter = self.register_counter(reg)?;
        Ok((counter, self.counter_add(counter, 1)?))
    }

    pub fn begin_execute(&mut self, id: OpId) -> Result<&TriggeredOp, NicError> {
        let (op, state) = self.ops.get_mut(id.index()).ok_or(NicError::UnknownOp(id))?;
        if *state != OpState::Fired {
            return Err(NicError::BadTransition { op: id, from: *state });
        }
        *state = OpState::Executing;
        Ok(op)
    }

    /// Marks an executing descriptor complete, releases its pool slot and
    /// bumps its completion counter. Returns descriptors chained off that
    /// counter that fired.
    pub fn complete(&mut self, id: OpId) -> Result<Vec<OpId>, NicError> {
        let (op, state) = self.ops.get_mut(id.index()).ok_or(NicError::UnknownOp(id))?;
        if *state != OpState::Executing {
            return Err(NicError::BadTransition { op: id, from: *state });
        }
        *state = OpState::Complete;
        let (trigger, completion, pool, uses_pool) = (op.trigger, op.completion, op.pool, op.uses_pool);
        if uses_pool {
            let p = self.pools.get_mut(&pool).expect("pool exists for enqueued op");
            p.in_flight -= 1;
            p.completed += 1;
        }
        let fired = self.counter_add(completion, 1)?;
        for c in [trigger, completion] {
            let counter = &mut self.counters[c.index()];
            counter.refs -= 1;
            if counter.retiring && counter.refs == 0 {
                self.release(c);
            }
        }
        Ok(fired)
    }

    /// Epoch-scoped reset back to zero.
    pub fn reset_counter(&mut self, id: CounterId) -> Result<(), NicError> {
        let counter = self.live_counter_mut(id)?;
        if !counter.subscribers.is_empty() {
            return Err(NicError::ResetWithSubscribers(id));
        }
        counter.value = 0;
        Ok(())
    }

    /// Releases a counter once no live descriptor references it.
    pub fn retire_counter(&mut self, id: CounterId) -> Result<(), NicError> {
        let counter = self.live_counter_mut(id)?;
        if counter.refs == 0 {
            self.release(id);
        } else {
            counter.retiring = true;
        }
        Ok(())
    }

    fn release(&mut self, id: CounterId) {
        let counter = &mut self.counters[id.index()];
        if counter.live {
            counter.live = false;
            self.live_per_node[counter.node] -= 1;
        }
    }

    pub fn live_counters(&self, node: usize) -> u32 {
        self.live_per_node.get(node).copied().unwrap_or(0)
    }
}
