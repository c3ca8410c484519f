//! The simulator ties the models together: host timelines run their
//! programs, GPU streams run tasks, the NIC runs triggered operations, and
//! everything meets in one deterministic event loop.

mod device;
mod exec;

use std::collections::BTreeMap;

use crate::cost::CostModel;
use crate::error::SimError;
use crate::gpu::{DeviceMemory, Gpu, GpuTask, Phase};
use crate::host::{BlockCause, HostOp};
use crate::nic::{CounterMode, Nic, NicConfig, OpId};
use crate::p2p::{MatchQueues, Message, ReqId};
use crate::rma::{DeliveryTag, MergePolicy, SignalKind, SignalTag, ThrottlePolicy, Window};
use crate::simcore::{
    EntityId, Event, Rank, RegionId, Scheduler, SlotId, StreamId, Trace, TraceRecord, VirtualTime, WinId,
};

/// Whether signal puts draw from the triggered-op pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignalPool {
    #[default]
    Shared,
    Separate,
}

impl std::str::FromStr for SignalPool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared" => Ok(SignalPool::Shared),
            "separate" => Ok(SignalPool::Separate),
            _ => Err(format!("signal_pool must be shared or separate, got `{s}`")),
        }
    }
}

/// Drop the `nth` (0-based) signal of `kind` sent from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropSignal {
    pub kind: SignalKind,
    pub from: Rank,
    pub to: Rank,
    pub nth: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub drop_signal: Option<DropSignal>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub ranks: usize,
    pub ranks_per_node: usize,
    pub cost: CostModel,
    pub tops_capacity: Option<u32>,
    /// Live NIC counters allowed per node.
    pub counter_budget: u32,
    pub counter_mode: CounterMode,
    pub signal_pool: SignalPool,
    pub throttle: ThrottlePolicy,
    pub merge: MergePolicy,
    /// Keep trace records in the report (the hash is always computed).
    pub keep_trace: bool,
    pub faults: FaultPlan,
}

impl SimConfig {
    pub fn new(ranks: usize, ranks_per_node: usize) -> Self {
        SimConfig {
            ranks,
            ranks_per_node,
            cost: CostModel::default(),
            tops_capacity: None,
            counter_budget: 1024,
            counter_mode: CounterMode::Monotonic,
            signal_pool: SignalPool::Shared,
            throttle: ThrottlePolicy::Adaptive,
            merge: MergePolicy::Merged,
            keep_trace: false,
            faults: FaultPlan::default(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.ranks.div_ceil(self.ranks_per_node)
    }

    pub fn node_of(&self, rank: Rank) -> usize {
        rank / self.ranks_per_node
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.ranks == 0 || self.ranks_per_node == 0 {
            return Err(SimError::Config("ranks and ranks_per_node must be positive".into()));
        }
        if self.tops_capacity == Some(0) {
            return Err(SimError::Config("tops_capacity must be positive".into()));
        }
        if let ThrottlePolicy::AppLevel { sync_interval: 0 } = self.throttle {
            return Err(SimError::Config("app_sync_interval must be positive".into()));
        }
        self.cost.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub final_time: VirtualTime,
    pub host_blocked_ns: Vec<u64>,
    pub blocked_by_cause: Vec<BTreeMap<BlockCause, u64>>,
    /// Time each rank spent between inner-loop marks.
    pub inner_loop_ns: Vec<u64>,
    /// Stream synchronizes issued, per rank.
    pub host_syncs: Vec<u64>,
    pub kernel_launches: u64,
    /// Launches generated by the communication runtime, per rank.
    pub comm_launches: Vec<u64>,
    pub triggered_ops_enqueued: u64,
    pub max_tops_in_flight: u32,
    pub bytes_moved: u64,
    pub trace_len: u64,
    pub trace_hash: u64,
    /// Empty unless the run kept its trace.
    pub trace: Vec<TraceRecord>,
}

impl SimReport {
    pub fn total_blocked_ns(&self) -> u64 {
        self.host_blocked_ns.iter().sum()
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub report: SimReport,
    pub memory: DeviceMemory,
}

#[derive(Debug)]
enum Delivery {
    Put {
        tag: DeliveryTag,
        region: RegionId,
        offset: usize,
        data: Vec<u8>,
    },
    Signal {
        slot: SlotId,
        tag: SignalTag,
    },
    Message(Message),
}

#[derive(Debug)]
enum Action {
    HostStep(Rank),
    HostWake(Rank),
    StreamKick(StreamId),
    PhaseStart(StreamId),
    PhaseDone(StreamId),
    StreamWake(StreamId),
    NicFire(OpId),
    NicDone { op: OpId, data: Vec<u8> },
    Deliver(Delivery),
}

impl Action {
    fn name(&self) -> &'static str {
        match self {
            Action::HostStep(_) => "host_step",
            Action::HostWake(_) => "host_wake",
            Action::StreamKick(_) => "stream_kick",
            Action::PhaseStart(_) => "phase_start",
            Action::PhaseDone(_) => "phase_done",
            Action::StreamWake(_) => "stream_wake",
            Action::NicFire(_) => "nic_fire",
            Action::NicDone { .. } => "nic_done",
            Action::Deliver(_) => "deliver",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum WatchKey {
    Slot(SlotId),
    Stream(StreamId),
    /// Classic puts of a rank delivered.
    Puts(Rank),
    /// A triggered op of a rank completed.
    Nic(Rank),
    Req(Rank),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Watcher {
    Host(Rank),
    Stream(StreamId),
}

#[derive(Debug, Clone, Copy)]
struct Block {
    cause: BlockCause,
    since: VirtualTime,
}

#[derive(Debug, Default)]
struct Host {
    program: Vec<HostOp>,
    pc: usize,
    block: Option<Block>,
    wake_pending: bool,
    done: bool,
    blocked_ns: u64,
    by_cause: BTreeMap<BlockCause, u64>,
    inner_start: Option<VirtualTime>,
    inner_ns: u64,
    syncs: u64,
    /// Requests posted since the last wait_all.
    reqs: Vec<ReqId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpClass {
    Post,
    Access,
}

#[derive(Debug, Clone, Copy)]
struct OpMeta {
    win: WinId,
    rank: Rank,
    class: OpClass,
}

#[derive(Debug, Default, Clone, Copy)]
struct ThrottleState {
    /// Pool descriptors enqueued in the rank's current throttle epoch.
    epoch_ops: u32,
}

pub struct Simulator {
    cfg: SimConfig,
    sched: Scheduler<Action>,
    trace: Trace,
    gpu: Gpu,
    nic: Nic,
    windows: Vec<Window>,
    queues: MatchQueues,
    hosts: Vec<Host>,
    streams: Vec<Vec<StreamId>>,
    watchers: BTreeMap<WatchKey, Vec<Watcher>>,
    requests: Vec<bool>,
    op_meta: Vec<OpMeta>,
    throttle: Vec<ThrottleState>,
    kernel_launches: u64,
    comm_launches: Vec<u64>,
    bytes_moved: u64,
    drop_matches: u64,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = cfg.ranks;
        Ok(Simulator {
            sched: Scheduler::new(),
            trace: Trace::new(cfg.keep_trace),
            gpu: Gpu::new(n),
            nic: Nic::new(NicConfig {
                nodes: cfg.nodes(),
                counter_budget: cfg.counter_budget,
                tops_capacity: cfg.tops_capacity,
            }),
            windows: Vec::new(),
            queues: MatchQueues::new(n),
            hosts: (0..n).map(|_| Host::default()).collect(),
            streams: vec![Vec::new(); n],
            watchers: BTreeMap::new(),
            requests: Vec::new(),
            op_meta: Vec::new(),
            throttle: vec![ThrottleState::default(); n],
            kernel_launches: 0,
            comm_launches: vec![0; n],
            bytes_moved: 0,
            drop_matches: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> VirtualTime {
        self.sched.now()
    }

    /// Creates a stream on `rank`; programs refer to it by its index among
    /// that rank's streams.
    pub fn create_stream(&mut self, rank: Rank) -> Result<StreamId, SimError> {
        let id = self.gpu.create_stream(rank)?;
        self.streams[rank].push(id);
        Ok(id)
    }

    pub fn alloc_region(&mut self, rank: Rank, bytes: usize) -> Result<RegionId, SimError> {
        if rank >= self.cfg.ranks {
            return Err(crate::gpu::GpuError::UnknownRank(rank).into());
        }
        Ok(self.gpu.memory.alloc_region(rank, bytes))
    }

    /// Allocates a window spanning every rank. Ranks activate it with
    /// `HostOp::WinCreate`.
    pub fn create_window(&mut self, bytes_per_rank: usize) -> WinId {
        let id = WinId(self.windows.len() as u32);
        let w = Window::new(id, self.cfg.ranks, bytes_per_rank, &mut self.gpu.memory);
        self.windows.push(w);
        id
    }

    pub fn window_region(&self, win: WinId, rank: Rank) -> RegionId {
        self.windows[win.index()].region(rank)
    }

    pub fn memory(&self) -> &DeviceMemory {
        &self.gpu.memory
    }

    pub fn memory_mut(&mut self) -> &mut DeviceMemory {
        &mut self.gpu.memory
    }

    /// Queues a task at time zero without going through a host program.
    pub fn enqueue(&mut self, stream: StreamId, task: GpuTask) -> Result<(), SimError> {
        self.enqueue_task(stream, task, VirtualTime::ZERO)
    }

    pub fn load(&mut self, rank: Rank, program: Vec<HostOp>) {
        self.hosts[rank].program = program;
    }

    /// Runs to quiescence.
    pub fn run(mut self) -> Result<SimOutcome, SimError> {
        for r in 0..self.cfg.ranks {
            if self.hosts[r].program.is_empty() {
                self.hosts[r].done = true;
            } else {
                self.sched.schedule(VirtualTime::ZERO, EntityId::Host(r), Action::HostStep(r))?;
            }
        }
        while let Some(Event { entity, action, .. }) = self.sched.pop() {
            let before = self.trace.len();
            let name = action.name();
            self.dispatch(action)?;
            if self.trace.len() == before {
                self.rec(entity, name, String::new());
            }
        }
        self.check_quiescent()?;
        Ok(self.finish())
    }

    fn dispatch(&mut self, action: Action) -> Result<(), SimError> {
        match action {
            Action::HostStep(r) => self.host_step(r),
            Action::HostWake(r) => {
                self.hosts[r].wake_pending = false;
                if self.hosts[r].block.is_some() {
                    self.host_step(r)?;
                }
                Ok(())
            }
            Action::StreamKick(s) => self.stream_kick(s),
            Action::PhaseStart(s) => self.phase_start(s),
            Action::PhaseDone(s) => self.phase_done(s),
            Action::StreamWake(s) => self.stream_wake(s),
            Action::NicFire(op) => self.nic_fire(op),
            Action::NicDone { op, data } => self.nic_done(op, data),
            Action::Deliver(d) => self.deliver(d),
        }
    }

    fn rec(&mut self, entity: EntityId, action: &'static str, detail: String) {
        let now = self.sched.now();
        self.trace.push(now, entity, action, detail);
    }

    fn at(&mut self, delay: u64, entity: EntityId, action: Action) -> Result<(), SimError> {
        let at = self.sched.now() + delay;
        self.sched.schedule(at, entity, action)?;
        Ok(())
    }

    fn watch(&mut self, key: WatchKey, who: Watcher) {
        let list = self.watchers.entry(key).or_default();
        if !list.contains(&who) {
            list.push(who);
        }
    }

    fn notify(&mut self, key: WatchKey) -> Result<(), SimError> {
        let Some(list) = self.watchers.remove(&key) else {
            return Ok(());
        };
        for who in list {
            match who {
                Watcher::Host(r) => {
                    if !self.hosts[r].wake_pending {
                        self.hosts[r].wake_pending = true;
                        self.at(0, EntityId::Host(r), Action::HostWake(r))?;
                    }
                }
                Watcher::Stream(s) => {
                    let st = self.gpu.stream_mut(s)?;
                    if !st.wake_pending {
                        st.wake_pending = true;
                        self.at(0, EntityId::Stream(s), Action::StreamWake(s))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn node(&self, rank: Rank) -> usize {
        self.cfg.node_of(rank)
    }

    fn same_node(&self, a: Rank, b: Rank) -> bool {
        self.node(a) == self.node(b)
    }

    fn check_quiescent(&self) -> Result<(), SimError> {
        let mut blocked = Vec::new();
        for (r, h) in self.hosts.iter().enumerate() {
            if h.done {
                continue;
            }
            let op = h.program.get(h.pc).map_or("end", HostOp::name);
            match h.block {
                Some(b) => blocked.push(format!("host{r} blocked in op #{} ({op}) on {}", h.pc, b.cause)),
                None => blocked.push(format!("host{r} stalled at op #{} ({op})", h.pc)),
            }
        }
        for s in self.gpu.streams() {
            if s.is_drained() {
                continue;
            }
            match &s.current {
                Some(cur) => {
                    let mut what = format!("{} (rank {}) stuck in `{}`", s.id, s.rank, cur.task.label);
                    if let Some(Phase::WaitPoll(conds)) = cur.task.phases.get(cur.phase) {
                        for c in conds {
                            let v = self.gpu.memory.slot(c.slot).unwrap_or(0);
                            if v < c.at_least {
                                what.push_str(&format!(", {} = {v} < {}", c.slot, c.at_least));
                            }
                        }
                    }
                    blocked.push(what);
                }
                None => blocked.push(format!("{} (rank {}) has {} queued tasks", s.id, s.rank, s.queue.len())),
            }
        }
        for (id, op) in self.nic.pending() {
            let v = self.nic.counter(op.trigger).unwrap_or(0);
            blocked.push(format!(
                "{id} ({} from rank {}) waits on {} = {v} < {}",
                op.kind.name(),
                op.pool,
                op.trigger,
                op.threshold
            ));
        }
        if blocked.is_empty() {
            Ok(())
        } else {
            Err(SimError::Deadlock {
                time: self.sched.now().ns(),
                blocked,
            })
        }
    }

    fn finish(self) -> SimOutcome {
        let trace_len = self.trace.len();
        let trace_hash = self.trace.hash();
        let report = SimReport {
            final_time: self.sched.now(),
            host_blocked_ns: self.hosts.iter().map(|h| h.blocked_ns).collect(),
            blocked_by_cause: self.hosts.iter().map(|h| h.by_cause.clone()).collect(),
            inner_loop_ns: self.hosts.iter().map(|h| h.inner_ns).collect(),
            host_syncs: self.hosts.iter().map(|h| h.syncs).collect(),
            kernel_launches: self.kernel_launches,
            comm_launches: self.comm_launches,
            triggered_ops_enqueued: self.nic.ops_enqueued(),
            max_tops_in_flight: self.nic.max_in_flight(),
            bytes_moved: self.bytes_moved,
            trace_len,
            trace_hash,
            trace: self.trace.into_records(),
        };
        SimOutcome {
            report,
            memory: self.gpu.memory,
        }
    }

    /// Whether this signal is the one the fault plan drops.
    fn drop_signal(&mut self, tag: &SignalTag) -> bool {
        let Some(f) = self.cfg.faults.drop_signal else {
            return false;
        };
        if f.kind != tag.kind || f.from != tag.from || f.to != tag.to {
            return false;
        }
        let hit = self.drop_matches == f.nth;
        self.drop_matches += 1;
        hit
    }
}
