//! Host-side interpretation of runtime calls.
//!
//! Every call checks its blocking condition before touching any state, so
//! a blocked call is simply re-executed when something it watches changes.

use crate::error::SimError;
use crate::gpu::{CopyDesc, GpuError, GpuTask, Phase, SlotCond, SlotWrite, TaskClass};
use crate::host::{BlockCause, HostOp, Mark, SyncKind};
use crate::kv;
use crate::nic::{CounterMode, NicError, OpKind, TriggeredOp};
use crate::p2p::{Envelope, Message, P2pError, PostedRecv, ReqId};
use crate::rma::{
    Access, AccessMode, DeliveryTag, EpochHook, Exposure, MergePolicy, PendingPut, RankWin, RmaError, SignalKind, SignalTag,
    ThrottlePolicy, WinCounters,
};
use crate::simcore::{EntityId, Rank, RegionId, StreamId, VirtualTime, WinId};

use super::{Action, Block, Delivery, OpClass, OpMeta, SignalPool, Simulator, WatchKey, Watcher};

pub(super) enum Flow {
    /// The call finished. `cost` is host time it consumed, of which
    /// `blocked` counts as blocked under `cause` (or the cause the call was
    /// blocked on).
    Next {
        cost: u64,
        blocked: u64,
        cause: Option<BlockCause>,
    },
    Block {
        cause: BlockCause,
        keys: Vec<WatchKey>,
    },
}

impl Flow {
    fn cost(cost: u64) -> Flow {
        Flow::Next {
            cost,
            blocked: 0,
            cause: None,
        }
    }
}

pub(super) enum OpFail {
    Rma(RmaError),
    P2p(P2pError),
    Sim(SimError),
}

impl OpFail {
    fn at(self, rank: Rank, op: usize) -> SimError {
        match self {
            OpFail::Rma(source) => SimError::Rma { rank, op, source },
            OpFail::P2p(source) => SimError::P2p { rank, op, source },
            OpFail::Sim(e) => e,
        }
    }
}

impl From<RmaError> for OpFail {
    fn from(e: RmaError) -> Self {
        OpFail::Rma(e)
    }
}

impl From<P2pError> for OpFail {
    fn from(e: P2pError) -> Self {
        OpFail::P2p(e)
    }
}

impl From<SimError> for OpFail {
    fn from(e: SimError) -> Self {
        OpFail::Sim(e)
    }
}

impl From<GpuError> for OpFail {
    fn from(e: GpuError) -> Self {
        OpFail::Sim(e.into())
    }
}

impl From<NicError> for OpFail {
    fn from(e: NicError) -> Self {
        match e {
            NicError::CapacityUnset => {
                OpFail::Sim(SimError::Config("tops_capacity must be set when triggered operations are used".into()))
            }
            NicError::CounterBudget { .. } => OpFail::Sim(SimError::Config(e.to_string())),
            e => OpFail::Sim(e.into()),
        }
    }
}

fn is_marker(task: &GpuTask) -> bool {
    task.phases.iter().all(|p| matches!(p, Phase::Hook(_)))
}

/// Prepends `hook` to the first task, or makes it a task of its own.
fn with_hook_first(mut tasks: Vec<GpuTask>, hook: Phase, label: &str) -> Vec<GpuTask> {
    match tasks.first_mut() {
        Some(t) => t.phases.insert(0, hook),
        None => tasks.push(GpuTask::new(label, TaskClass::Comm, vec![hook])),
    }
    tasks
}

fn with_hook_last(mut tasks: Vec<GpuTask>, hook: Phase, label: &str) -> Vec<GpuTask> {
    match tasks.last_mut() {
        Some(t) => t.phases.push(hook),
        None => tasks.push(GpuTask::new(label, TaskClass::Comm, vec![hook])),
    }
    tasks
}

impl Simulator {
    pub(super) fn host_step(&mut self, r: Rank) -> Result<(), SimError> {
        loop {
            let h = &self.hosts[r];
            if h.done {
                return Ok(());
            }
            let pc = h.pc;
            let Some(op) = h.program.get(pc).cloned() else {
                self.hosts[r].done = true;
                self.rec(EntityId::Host(r), "host_done", kv!("ops" => pc));
                return Ok(());
            };
            match self.exec(r, &op).map_err(|f| f.at(r, pc))? {
                Flow::Next { cost, blocked, cause } => {
                    let now = self.now();
                    let mut total = blocked;
                    let mut cause = cause;
                    if let Some(b) = self.hosts[r].block.take() {
                        total += now - b.since;
                        cause = Some(b.cause);
                    }
                    if let Some(c) = cause {
                        self.end_block(r, c, total);
                    }
                    self.hosts[r].pc += 1;
                    if cost > 0 {
                        return self.at(cost, EntityId::Host(r), Action::HostStep(r));
                    }
                }
                Flow::Block { cause, keys } => {
                    let now = self.now();
                    match self.hosts[r].block {
                        Some(b) if b.cause == cause => {}
                        Some(b) => {
                            self.end_block(r, b.cause, now - b.since);
                            self.begin_block(r, cause);
                        }
                        None => self.begin_block(r, cause),
                    }
                    for k in keys {
                        self.watch(k, Watcher::Host(r));
                    }
                    return Ok(());
                }
            }
        }
    }

    fn begin_block(&mut self, r: Rank, cause: BlockCause) {
        let since = self.now();
        self.hosts[r].block = Some(Block { cause, since });
        let op = self.hosts[r].pc;
        self.rec(EntityId::Host(r), "host_block_begin", kv!("cause" => cause, "op" => op));
        if matches!(cause, BlockCause::Throttle | BlockCause::CounterReset) {
            self.rec(EntityId::Host(r), "throttle_wait_begin", kv!("cause" => cause));
        }
    }

    fn end_block(&mut self, r: Rank, cause: BlockCause, blocked: u64) {
        let h = &mut self.hosts[r];
        h.blocked_ns += blocked;
        *h.by_cause.entry(cause).or_insert(0) += blocked;
        let detail = kv!("cause" => cause, "blocked_ns" => blocked);
        if matches!(cause, BlockCause::Throttle | BlockCause::CounterReset) {
            self.rec(EntityId::Host(r), "throttle_wait_end", detail.clone());
        }
        self.rec(EntityId::Host(r), "host_block_end", detail);
    }

    fn stream_of(&self, r: Rank, idx: usize) -> Result<StreamId, OpFail> {
        self.streams[r]
            .get(idx)
            .copied()
            .ok_or_else(|| OpFail::Sim(SimError::Config(format!("rank {r} has no stream #{idx}"))))
    }

    fn active_win(&self, win: WinId, r: Rank) -> Result<usize, RmaError> {
        match self.windows.get(win.index()) {
            Some(w) if w.is_active(r) => Ok(win.index()),
            _ => Err(RmaError::UnknownWindow(win)),
        }
    }

    fn reset_mode(&self) -> bool {
        self.cfg.counter_mode == CounterMode::Reset
    }

    fn signals_use_pool(&self) -> bool {
        self.cfg.signal_pool == SignalPool::Shared
    }

    /// Host poll charged when a throttle wait ends.
    fn poll_cost(&self, r: Rank) -> u64 {
        match self.hosts[r].block {
            Some(b) if b.cause == BlockCause::Throttle => self.cfg.cost.host_poll,
            _ => 0,
        }
    }

    fn signal_delay(&self, a: Rank, b: Rank) -> u64 {
        let c = &self.cfg.cost;
        if self.same_node(a, b) {
            c.xgmi_latency + c.signal
        } else {
            c.inter_signal()
        }
    }

    /// Admission check for `n` descriptors from rank `r`'s pool.
    fn throttle_check(&self, r: Rank, n: u32) -> Result<Option<Flow>, OpFail> {
        if n == 0 {
            return Ok(None);
        }
        let cap = self.nic.capacity().ok_or(NicError::CapacityUnset)?;
        let epoch_ops = self.throttle[r].epoch_ops;
        if epoch_ops + n > cap {
            return Err(SimError::Config(format!(
                "rank {r}: one epoch needs at least {} triggered ops but tops_capacity is {cap}",
                epoch_ops + n
            ))
            .into());
        }
        let in_flight = self.nic.pool(r).in_flight;
        let free = cap - in_flight;
        let was_blocked = self.hosts[r].block.is_some_and(|b| b.cause == BlockCause::Throttle);
        let drained = in_flight == epoch_ops;
        let admit = match self.cfg.throttle {
            ThrottlePolicy::Adaptive => free >= n,
            ThrottlePolicy::Static | ThrottlePolicy::AppLevel { .. } => {
                if was_blocked {
                    drained
                } else {
                    free >= n
                }
            }
        };
        Ok((!admit).then(|| Flow::Block {
            cause: BlockCause::Throttle,
            keys: vec![WatchKey::Nic(r)],
        }))
    }

    fn ensure_counters(&mut self, w: usize, r: Rank) -> Result<WinCounters, OpFail> {
        if let Some(c) = self.windows[w].ranks[r].counters {
            return Ok(c);
        }
        let node = self.node(r);
        let post = self.nic.alloc_counter(node)?;
        let trig = self.nic.alloc_counter(node)?;
        let comp = self.nic.alloc_counter(node)?;
        let sig = self.nic.alloc_counter(node)?;
        let c = WinCounters {
            post,
            post_reg: self.nic.bind_mmio(post)?,
            trig,
            trig_reg: self.nic.bind_mmio(trig)?,
            comp,
            sig,
        };
        self.windows[w].ranks[r].counters = Some(c);
        Ok(c)
    }

    fn enqueue_top(&mut self, op: TriggeredOp, w: usize, r: Rank, class: OpClass) -> Result<(), OpFail> {
        let uses_pool = op.uses_pool;
        let detail = kv!(
            "kind" => op.kind.name(),
            "ctr" => op.trigger,
            "threshold" => op.threshold,
            "pool" => op.pool
        );
        let (id, fired) = self.nic.enqueue_triggered(op)?;
        debug_assert_eq!(id.index(), self.op_meta.len());
        self.op_meta.push(OpMeta {
            win: WinId(w as u32),
            rank: r,
            class,
        });
        if uses_pool {
            self.throttle[r].epoch_ops += 1;
        }
        let rw = &mut self.windows[w].ranks[r];
        match class {
            OpClass::Post => rw.post_ops_outstanding += 1,
            OpClass::Access => rw.access_ops_outstanding += 1,
        }
        self.rec(EntityId::Op(id), "tops_enqueue", detail);
        self.fire(fired)?;
        Ok(())
    }

    fn enqueue_tasks(&mut self, r: Rank, stream: usize, tasks: Vec<GpuTask>, cursor: &mut VirtualTime) -> Result<(), OpFail> {
        let s = self.stream_of(r, stream)?;
        for t in tasks {
            if !is_marker(&t) {
                *cursor = *cursor + self.cfg.cost.host_enqueue;
            }
            self.enqueue_task(s, t, *cursor)?;
        }
        Ok(())
    }

    fn exec(&mut self, r: Rank, op: &HostOp) -> Result<Flow, OpFail> {
        match op {
            HostOp::Launch { stream, task } => {
                let s = self.stream_of(r, *stream)?;
                let c = self.cfg.cost.host_enqueue;
                self.enqueue_task(s, task.clone(), self.now() + c)?;
                Ok(Flow::cost(c))
            }
            HostOp::Sync { stream, kind } => self.sync(r, *stream, *kind),
            HostOp::WinCreate { win } => {
                let w = self.windows.get_mut(win.index()).ok_or(RmaError::UnknownWindow(*win))?;
                if w.is_active(r) {
                    return Err(RmaError::InvalidArgument(format!("{win} already created on rank {r}")).into());
                }
                w.set_active(r, true);
                self.rec(EntityId::Host(r), "win_create", kv!("win" => win));
                Ok(Flow::cost(0))
            }
            HostOp::WinFree { win } => {
                let w = self.active_win(*win, r)?;
                let rw = &self.windows[w].ranks[r];
                if rw.exposure.is_some() || rw.access.is_some() {
                    return Err(RmaError::InvalidArgument(format!("{win} freed with an open epoch")).into());
                }
                if let Some(c) = rw.counters {
                    for ctr in [c.post, c.trig, c.comp, c.sig] {
                        self.nic.retire_counter(ctr)?;
                    }
                }
                // Outstanding counts stay: descriptors still in flight
                // decrement them when they complete.
                let rw = &mut self.windows[w].ranks[r];
                *rw = RankWin {
                    post_ops_outstanding: rw.post_ops_outstanding,
                    access_ops_outstanding: rw.access_ops_outstanding,
                    ..RankWin::default()
                };
                self.windows[w].set_active(r, false);
                self.rec(EntityId::Host(r), "win_free", kv!("win" => win));
                Ok(Flow::cost(0))
            }
            HostOp::Post { win, group } => self.post(r, *win, group),
            HostOp::Start { win, group, mode } => self.start(r, *win, group, *mode),
            HostOp::Put {
                win,
                target,
                src,
                src_offset,
                dst_offset,
                bytes,
            } => self.put(r, *win, *target, *src, *src_offset, *dst_offset, *bytes),
            HostOp::Complete { win } => self.complete(r, *win),
            HostOp::Wait { win } => self.wait(r, *win),
            HostOp::PostStream { win, group, stream } => self.post_stream(r, *win, group, *stream),
            HostOp::CompleteStream { win, stream } => self.complete_stream(r, *win, *stream),
            HostOp::WaitStream { win, stream } => self.wait_stream(r, *win, *stream),
            HostOp::Isend {
                dst,
                tag,
                region,
                offset,
                bytes,
            } => self.isend(r, *dst, *tag, *region, *offset, *bytes),
            HostOp::Irecv {
                src,
                tag,
                region,
                offset,
                bytes,
            } => self.irecv(r, *src, *tag, *region, *offset, *bytes),
            HostOp::WaitAll => self.wait_all(r),
            HostOp::Mark(m) => {
                let now = self.now();
                let h = &mut self.hosts[r];
                match m {
                    Mark::InnerBegin => h.inner_start = Some(now),
                    Mark::InnerEnd => {
                        if let Some(t0) = h.inner_start.take() {
                            h.inner_ns += now - t0;
                        }
                    }
                }
                let name = match m {
                    Mark::InnerBegin => "inner_begin",
                    Mark::InnerEnd => "inner_end",
                };
                self.rec(EntityId::Host(r), "mark", kv!("at" => name));
                Ok(Flow::cost(0))
            }
        }
    }

    fn sync(&mut self, r: Rank, stream: usize, kind: SyncKind) -> Result<Flow, OpFail> {
        let s = self.stream_of(r, stream)?;
        let cause = kind.cause();
        if !self.gpu.stream(s)?.is_drained() {
            return Ok(Flow::Block {
                cause,
                keys: vec![WatchKey::Stream(s)],
            });
        }
        self.hosts[r].syncs += 1;
        self.rec(EntityId::Host(r), "host_sync", kv!("stream" => s, "cause" => cause));
        let c = self.cfg.cost.host_sync;
        Ok(Flow::Next {
            cost: c,
            blocked: c,
            cause: Some(cause),
        })
    }

    fn post(&mut self, r: Rank, win: WinId, group: &[Rank]) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        if self.windows[w].ranks[r].exposure.is_some() {
            return Err(RmaError::EpochAlreadyOpen { win, what: "exposure" }.into());
        }
        self.windows[w].check_group(r, group)?;
        let serial = self.windows[w].ranks[r].serial;
        let now = self.now();
        let mut cursor = 0;
        let mut pairs = Vec::with_capacity(group.len());
        for &o in group {
            let k = self.windows[w].count_post(r, o);
            pairs.push((o, k));
        }
        let hook = EpochHook::ExposureOpen {
            win,
            target: r,
            serial,
            origins: pairs.clone(),
        };
        self.apply_hook(EntityId::Host(r), &hook);
        for &o in group {
            let slot = self.windows[w].post_slot(&mut self.gpu.memory, o, r);
            cursor += self.cfg.cost.nic_enqueue;
            let tag = SignalTag {
                kind: SignalKind::Post,
                win,
                from: r,
                to: o,
            };
            let at = now + cursor + self.signal_delay(r, o);
            self.sched
                .schedule(at, EntityId::Host(r), Action::Deliver(Delivery::Signal { slot, tag }))?;
        }
        self.windows[w].ranks[r].exposure = Some(Exposure {
            pairs,
            mode: AccessMode::Classic,
            serial,
        });
        let detail = kv!("win" => win, "group" => group.len(), "serial" => serial, "mode" => "classic");
        self.rec(EntityId::Host(r), "epoch_post", detail);
        Ok(Flow::cost(cursor))
    }

    fn start(&mut self, r: Rank, win: WinId, group: &[Rank], mode: AccessMode) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        if self.windows[w].ranks[r].access.is_some() {
            return Err(RmaError::EpochAlreadyOpen { win, what: "access" }.into());
        }
        self.windows[w].check_group(r, group)?;
        match mode {
            AccessMode::Classic => {
                let mut keys = Vec::new();
                for &t in group {
                    let slot = self.windows[w].post_slot(&mut self.gpu.memory, r, t);
                    let need = self.windows[w].accesses(r, t) + 1;
                    if self.gpu.memory.slot(slot)? < need {
                        keys.push(WatchKey::Slot(slot));
                    }
                }
                if !keys.is_empty() {
                    return Ok(Flow::Block {
                        cause: BlockCause::Epoch,
                        keys,
                    });
                }
            }
            AccessMode::Stream => {
                if self.reset_mode() {
                    let rw = &self.windows[w].ranks[r];
                    if let Some(c) = rw.counters {
                        if rw.access_ops_outstanding > 0 {
                            return Ok(Flow::Block {
                                cause: BlockCause::CounterReset,
                                keys: vec![WatchKey::Nic(r)],
                            });
                        }
                        self.nic.reset_counter(c.trig)?;
                        self.nic.reset_counter(c.comp)?;
                    }
                }
            }
        }
        for &t in group {
            self.windows[w].count_access(r, t);
        }
        self.windows[w].ranks[r].access = Some(Access {
            group: group.to_vec(),
            mode,
            pending_puts: Vec::new(),
            inter_payloads: 0,
            puts_in_flight: 0,
        });
        let mode_name = match mode {
            AccessMode::Classic => "classic",
            AccessMode::Stream => "stream",
        };
        let detail = kv!("win" => win, "group" => group.len(), "mode" => mode_name);
        self.rec(EntityId::Host(r), "epoch_start", detail);
        Ok(Flow::cost(0))
    }

    #[allow(clippy::too_many_arguments)]
    fn put(
        &mut self,
        r: Rank,
        win: WinId,
        target: Rank,
        src: RegionId,
        src_offset: usize,
        dst_offset: usize,
        bytes: usize,
    ) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        let acc = self.windows[w].ranks[r]
            .access
            .as_ref()
            .ok_or(RmaError::EpochClosed { win, what: "access" })?;
        if !acc.group.contains(&target) {
            return Err(RmaError::GroupMismatch { win, rank: target }.into());
        }
        if bytes == 0 {
            return Err(RmaError::InvalidArgument(format!("{win}: put of zero bytes")).into());
        }
        let mode = acc.mode;
        let dst = self.windows[w].region(target);
        self.gpu.memory.check_range(dst, dst_offset, bytes)?;
        self.gpu.memory.check_range(src, src_offset, bytes)?;
        let tag = DeliveryTag {
            win,
            origin: r,
            target,
            pair: self.windows[w].accesses(r, target),
        };
        let intra = self.same_node(r, target);
        let put_kv = kv!("win" => win, "target" => target, "bytes" => bytes, "intra" => intra);
        match mode {
            AccessMode::Classic => {
                let data = self.gpu.memory.read(src, src_offset, bytes)?;
                let cost = &self.cfg.cost;
                let (c, delay) = if intra {
                    (cost.host_enqueue, cost.ipc_copy(bytes))
                } else {
                    (cost.nic_enqueue, cost.inter_transfer(bytes))
                };
                if intra {
                    self.kernel_launches += 1;
                    self.comm_launches[r] += 1;
                }
                if let Some(acc) = self.windows[w].ranks[r].access.as_mut() {
                    acc.puts_in_flight += 1;
                }
                self.rec(EntityId::Host(r), "put_enqueue", put_kv);
                self.rec(
                    EntityId::Host(r),
                    "payload_begin",
                    kv!("win" => win, "origin" => r, "target" => target, "pair" => tag.pair, "bytes" => bytes),
                );
                let at = self.now() + c + delay;
                let d = Delivery::Put {
                    tag,
                    region: dst,
                    offset: dst_offset,
                    data,
                };
                self.sched.schedule(at, EntityId::Host(r), Action::Deliver(d))?;
                Ok(Flow::cost(c))
            }
            AccessMode::Stream if intra => {
                if let Some(acc) = self.windows[w].ranks[r].access.as_mut() {
                    acc.pending_puts.push(PendingPut {
                        target,
                        src,
                        src_offset,
                        dst_offset,
                        bytes,
                    });
                }
                self.rec(EntityId::Host(r), "put_enqueue", put_kv);
                Ok(Flow::cost(0))
            }
            AccessMode::Stream => {
                if let Some(block) = self.throttle_check(r, 1)? {
                    return Ok(block);
                }
                let poll = self.poll_cost(r);
                let ctrs = self.ensure_counters(w, r)?;
                let rw = &self.windows[w].ranks[r];
                let threshold = if self.reset_mode() { 1 } else { rw.trig_mmios + 1 };
                let op = TriggeredOp {
                    kind: OpKind::PayloadPut {
                        src,
                        src_offset,
                        dst,
                        dst_offset,
                        bytes,
                        tag: Some(tag),
                    },
                    node: self.node(r),
                    pool: r,
                    uses_pool: true,
                    trigger: ctrs.trig,
                    threshold,
                    completion: ctrs.comp,
                    epoch: rw.trig_mmios,
                };
                self.enqueue_top(op, w, r, OpClass::Access)?;
                let rw = &mut self.windows[w].ranks[r];
                rw.payloads_total += 1;
                if let Some(acc) = rw.access.as_mut() {
                    acc.inter_payloads += 1;
                }
                self.rec(EntityId::Host(r), "put_enqueue", put_kv);
                Ok(Flow::Next {
                    cost: poll + self.cfg.cost.nic_enqueue,
                    blocked: poll,
                    cause: None,
                })
            }
        }
    }

    fn complete(&mut self, r: Rank, win: WinId) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        let acc = self.windows[w].ranks[r]
            .access
            .as_ref()
            .ok_or(RmaError::EpochClosed { win, what: "access" })?;
        if acc.mode != AccessMode::Classic {
            return Err(RmaError::ModeMismatch {
                win,
                open: acc.mode,
                needed: AccessMode::Classic,
            }
            .into());
        }
        if acc.puts_in_flight > 0 {
            return Ok(Flow::Block {
                cause: BlockCause::Epoch,
                keys: vec![WatchKey::Puts(r)],
            });
        }
        let group = acc.group.clone();
        let now = self.now();
        let mut cursor = 0;
        for &t in &group {
            self.windows[w].count_complete(r, t);
            let slot = self.windows[w].complete_slot(&mut self.gpu.memory, t, r);
            cursor += self.cfg.cost.nic_enqueue;
            let tag = SignalTag {
                kind: SignalKind::Complete,
                win,
                from: r,
                to: t,
            };
            let at = now + cursor + self.signal_delay(r, t);
            self.sched
                .schedule(at, EntityId::Host(r), Action::Deliver(Delivery::Signal { slot, tag }))?;
        }
        self.windows[w].ranks[r].access = None;
        let detail = kv!("win" => win, "group" => group.len(), "mode" => "classic");
        self.rec(EntityId::Host(r), "epoch_complete", detail);
        Ok(Flow::cost(cursor))
    }

    fn wait(&mut self, r: Rank, win: WinId) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        let exp = self.windows[w].ranks[r]
            .exposure
            .clone()
            .ok_or(RmaError::EpochClosed { win, what: "exposure" })?;
        if exp.mode != AccessMode::Classic {
            return Err(RmaError::ModeMismatch {
                win,
                open: exp.mode,
                needed: AccessMode::Classic,
            }
            .into());
        }
        let mut keys = Vec::new();
        for &(o, k) in &exp.pairs {
            let slot = self.windows[w].complete_slot(&mut self.gpu.memory, r, o);
            if self.gpu.memory.slot(slot)? < k {
                keys.push(WatchKey::Slot(slot));
            }
        }
        if !keys.is_empty() {
            return Ok(Flow::Block {
                cause: BlockCause::Epoch,
                keys,
            });
        }
        let hook = EpochHook::ExposureClose {
            win,
            target: r,
            serial: exp.serial,
            origins: exp.pairs.clone(),
        };
        self.apply_hook(EntityId::Host(r), &hook);
        let rw = &mut self.windows[w].ranks[r];
        rw.serial += 1;
        rw.exposure = None;
        let detail = kv!("win" => win, "group" => exp.pairs.len(), "serial" => exp.serial, "mode" => "classic");
        self.rec(EntityId::Host(r), "epoch_wait", detail);
        Ok(Flow::cost(0))
    }

    fn post_stream(&mut self, r: Rank, win: WinId, group: &[Rank], stream: usize) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        if self.windows[w].ranks[r].exposure.is_some() {
            return Err(RmaError::EpochAlreadyOpen { win, what: "exposure" }.into());
        }
        self.windows[w].check_group(r, group)?;
        self.stream_of(r, stream)?;
        let (intra, inter): (Vec<Rank>, Vec<Rank>) = group.iter().partition(|&&o| self.same_node(r, o));
        let sig_pool = self.signals_use_pool();
        if self.reset_mode() {
            let rw = &self.windows[w].ranks[r];
            if rw.counters.is_some() && rw.post_ops_outstanding > 0 {
                return Ok(Flow::Block {
                    cause: BlockCause::CounterReset,
                    keys: vec![WatchKey::Nic(r)],
                });
            }
        }
        let pool_ops = if sig_pool { inter.len() as u32 } else { 0 };
        if let Some(block) = self.throttle_check(r, pool_ops)? {
            return Ok(block);
        }
        let poll = self.poll_cost(r);
        let now = self.now();
        let mut cursor = now + poll;
        let serial = self.windows[w].ranks[r].serial;
        let pairs: Vec<(Rank, u64)> = group.iter().map(|&o| (o, self.windows[w].count_post(r, o))).collect();
        let mut mmio = None;
        if !inter.is_empty() {
            let ctrs = self.ensure_counters(w, r)?;
            if self.reset_mode() {
                self.nic.reset_counter(ctrs.post)?;
            }
            let threshold = if self.reset_mode() {
                1
            } else {
                self.windows[w].ranks[r].post_mmios + 1
            };
            for &o in &inter {
                let slot = self.windows[w].post_slot(&mut self.gpu.memory, o, r);
                let tag = SignalTag {
                    kind: SignalKind::Post,
                    win,
                    from: r,
                    to: o,
                };
                let op = TriggeredOp {
                    kind: OpKind::SignalPut {
                        slot,
                        increment: 1,
                        tag: Some(tag),
                    },
                    node: self.node(r),
                    pool: r,
                    uses_pool: sig_pool,
                    trigger: ctrs.post,
                    threshold,
                    completion: ctrs.sig,
                    epoch: serial,
                };
                self.enqueue_top(op, w, r, OpClass::Post)?;
                cursor = cursor + self.cfg.cost.nic_enqueue;
            }
            self.windows[w].ranks[r].post_mmios += 1;
            mmio = Some(ctrs.post_reg);
        }
        let mut writes = Vec::with_capacity(intra.len());
        for &(o, k) in &pairs {
            if !self.same_node(r, o) {
                continue;
            }
            let slot = self.windows[w].post_slot(&mut self.gpu.memory, o, r);
            writes.push(SlotWrite {
                slot,
                value: k,
                tag: Some(SignalTag {
                    kind: SignalKind::Post,
                    win,
                    from: r,
                    to: o,
                }),
            });
        }
        let hook = Phase::Hook(EpochHook::ExposureOpen {
            win,
            target: r,
            serial,
            origins: pairs.clone(),
        });
        let tasks = match self.cfg.merge {
            MergePolicy::Merged => {
                let mut phases = vec![hook];
                if !writes.is_empty() {
                    phases.push(Phase::SignalStore(writes));
                }
                if let Some(reg) = mmio {
                    phases.push(Phase::MmioStore(vec![reg]));
                }
                vec![GpuTask::new("post_stream", TaskClass::Comm, phases)]
            }
            MergePolicy::Independent => {
                let mut tasks: Vec<GpuTask> = writes
                    .into_iter()
                    .map(|wr| GpuTask::signal_store("post_stream.signal", vec![wr]))
                    .collect();
                if let Some(reg) = mmio {
                    tasks.push(GpuTask::mmio_store("post_stream.trigger", vec![reg]));
                }
                with_hook_first(tasks, hook, "post_stream")
            }
        };
        self.enqueue_tasks(r, stream, tasks, &mut cursor)?;
        self.windows[w].ranks[r].exposure = Some(Exposure {
            pairs,
            mode: AccessMode::Stream,
            serial,
        });
        let detail = kv!("win" => win, "group" => group.len(), "serial" => serial, "mode" => "stream");
        self.rec(EntityId::Host(r), "epoch_post", detail);
        Ok(Flow::Next {
            cost: cursor - now,
            blocked: poll,
            cause: None,
        })
    }

    fn complete_stream(&mut self, r: Rank, win: WinId, stream: usize) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        let acc = self.windows[w].ranks[r]
            .access
            .as_ref()
            .ok_or(RmaError::EpochClosed { win, what: "access" })?;
        if acc.mode != AccessMode::Stream {
            return Err(RmaError::ModeMismatch {
                win,
                open: acc.mode,
                needed: AccessMode::Stream,
            }
            .into());
        }
        self.stream_of(r, stream)?;
        let group = acc.group.clone();
        let inter_payloads = acc.inter_payloads;
        let (intra, inter): (Vec<Rank>, Vec<Rank>) = group.iter().partition(|&&t| self.same_node(r, t));
        let sig_pool = self.signals_use_pool();
        let pool_ops = if sig_pool { inter.len() as u32 } else { 0 };
        if let Some(block) = self.throttle_check(r, pool_ops)? {
            return Ok(block);
        }
        let poll = self.poll_cost(r);
        let now = self.now();
        let mut cursor = now + poll;

        let mut conds = Vec::with_capacity(group.len());
        for &t in &group {
            let slot = self.windows[w].post_slot(&mut self.gpu.memory, r, t);
            conds.push(SlotCond {
                slot,
                at_least: self.windows[w].accesses(r, t),
            });
        }
        let mut mmio = None;
        if !inter.is_empty() {
            let ctrs = self.ensure_counters(w, r)?;
            let reset = self.reset_mode();
            let rw = &self.windows[w].ranks[r];
            let (trigger, threshold) = if inter_payloads > 0 {
                (ctrs.comp, if reset { inter_payloads } else { rw.payloads_total })
            } else {
                (ctrs.trig, if reset { 1 } else { rw.trig_mmios + 1 })
            };
            let epoch = rw.trig_mmios;
            for &t in &inter {
                self.windows[w].count_complete(r, t);
                let slot = self.windows[w].complete_slot(&mut self.gpu.memory, t, r);
                let tag = SignalTag {
                    kind: SignalKind::Complete,
                    win,
                    from: r,
                    to: t,
                };
                let op = TriggeredOp {
                    kind: OpKind::SignalPut {
                        slot,
                        increment: 1,
                        tag: Some(tag),
                    },
                    node: self.node(r),
                    pool: r,
                    uses_pool: sig_pool,
                    trigger,
                    threshold,
                    completion: ctrs.sig,
                    epoch,
                };
                self.enqueue_top(op, w, r, OpClass::Access)?;
                cursor = cursor + self.cfg.cost.nic_enqueue;
            }
            self.windows[w].ranks[r].trig_mmios += 1;
            mmio = Some(ctrs.trig_reg);
        }
        let pending = self.windows[w].ranks[r]
            .access
            .as_mut()
            .map(|a| std::mem::take(&mut a.pending_puts))
            .unwrap_or_default();
        let copies: Vec<CopyDesc> = pending
            .into_iter()
            .map(|p| CopyDesc {
                src: p.src,
                src_offset: p.src_offset,
                dst: self.windows[w].region(p.target),
                dst_offset: p.dst_offset,
                bytes: p.bytes,
                tag: Some(DeliveryTag {
                    win,
                    origin: r,
                    target: p.target,
                    pair: self.windows[w].accesses(r, p.target),
                }),
            })
            .collect();
        let mut writes = Vec::with_capacity(intra.len());
        for &t in &intra {
            let n = self.windows[w].count_complete(r, t);
            let slot = self.windows[w].complete_slot(&mut self.gpu.memory, t, r);
            writes.push(SlotWrite {
                slot,
                value: n,
                tag: Some(SignalTag {
                    kind: SignalKind::Complete,
                    win,
                    from: r,
                    to: t,
                }),
            });
        }
        let tasks = match self.cfg.merge {
            MergePolicy::Merged => {
                let mut tasks = Vec::new();
                let mut a = Vec::new();
                if !conds.is_empty() {
                    a.push(Phase::WaitPoll(conds));
                }
                if let Some(reg) = mmio {
                    a.push(Phase::MmioStore(vec![reg]));
                }
                if !a.is_empty() {
                    tasks.push(GpuTask::new("complete_stream.wait", TaskClass::Comm, a));
                }
                let mut b = Vec::new();
                if !copies.is_empty() {
                    b.push(Phase::PayloadCopy(copies));
                }
                if !writes.is_empty() {
                    b.push(Phase::SignalStore(writes));
                }
                if !b.is_empty() {
                    tasks.push(GpuTask::new("complete_stream.copy", TaskClass::Comm, b));
                }
                tasks
            }
            MergePolicy::Independent => {
                let mut tasks: Vec<GpuTask> = conds
                    .into_iter()
                    .map(|c| GpuTask::wait_poll("complete_stream.wait", vec![c]))
                    .collect();
                if let Some(reg) = mmio {
                    tasks.push(GpuTask::mmio_store("complete_stream.trigger", vec![reg]));
                }
                tasks.extend(copies.into_iter().map(|c| GpuTask::payload_copy("complete_stream.copy", vec![c])));
                tasks.extend(
                    writes
                        .into_iter()
                        .map(|wr| GpuTask::signal_store("complete_stream.signal", vec![wr])),
                );
                tasks
            }
        };
        self.enqueue_tasks(r, stream, tasks, &mut cursor)?;
        self.windows[w].ranks[r].access = None;
        self.throttle[r].epoch_ops = 0;
        let detail = kv!("win" => win, "group" => group.len(), "mode" => "stream", "inter_payloads" => inter_payloads);
        self.rec(EntityId::Host(r), "epoch_complete", detail);
        Ok(Flow::Next {
            cost: cursor - now,
            blocked: poll,
            cause: None,
        })
    }

    fn wait_stream(&mut self, r: Rank, win: WinId, stream: usize) -> Result<Flow, OpFail> {
        let w = self.active_win(win, r)?;
        let exp = self.windows[w].ranks[r]
            .exposure
            .clone()
            .ok_or(RmaError::EpochClosed { win, what: "exposure" })?;
        if exp.mode != AccessMode::Stream {
            return Err(RmaError::ModeMismatch {
                win,
                open: exp.mode,
                needed: AccessMode::Stream,
            }
            .into());
        }
        self.stream_of(r, stream)?;
        let now = self.now();
        let mut cursor = now;
        let mut conds = Vec::with_capacity(exp.pairs.len());
        for &(o, k) in &exp.pairs {
            let slot = self.windows[w].complete_slot(&mut self.gpu.memory, r, o);
            conds.push(SlotCond { slot, at_least: k });
        }
        let hook = Phase::Hook(EpochHook::ExposureClose {
            win,
            target: r,
            serial: exp.serial,
            origins: exp.pairs.clone(),
        });
        let tasks = match self.cfg.merge {
            MergePolicy::Merged => {
                let mut phases = Vec::new();
                if !conds.is_empty() {
                    phases.push(Phase::WaitPoll(conds));
                }
                phases.push(hook);
                vec![GpuTask::new("wait_stream", TaskClass::Comm, phases)]
            }
            MergePolicy::Independent => {
                let tasks = conds
                    .into_iter()
                    .map(|c| GpuTask::wait_poll("wait_stream.wait", vec![c]))
                    .collect();
                with_hook_last(tasks, hook, "wait_stream")
            }
        };
        self.enqueue_tasks(r, stream, tasks, &mut cursor)?;
        let rw = &mut self.windows[w].ranks[r];
        rw.serial += 1;
        rw.exposure = None;
        let detail = kv!("win" => win, "group" => exp.pairs.len(), "serial" => exp.serial, "mode" => "stream");
        self.rec(EntityId::Host(r), "epoch_wait", detail);
        Ok(Flow::cost(cursor - now))
    }

    fn new_request(&mut self, r: Rank) -> ReqId {
        let id = ReqId(self.requests.len() as u32);
        self.requests.push(false);
        self.hosts[r].reqs.push(id);
        id
    }

    fn isend(&mut self, r: Rank, dst: Rank, tag: u32, region: RegionId, offset: usize, bytes: usize) -> Result<Flow, OpFail> {
        if dst >= self.cfg.ranks {
            return Err(P2pError::UnknownRank(dst).into());
        }
        if bytes == 0 {
            return Err(P2pError::Empty.into());
        }
        let data = self.gpu.memory.read(region, offset, bytes)?;
        let req = self.new_request(r);
        let cost = &self.cfg.cost;
        let intra = self.same_node(r, dst);
        let (c, delay) = if intra {
            (cost.host_enqueue, cost.ipc_copy(bytes))
        } else {
            (cost.nic_enqueue, cost.inter_transfer(bytes))
        };
        if intra {
            self.kernel_launches += 1;
            self.comm_launches[r] += 1;
        }
        let msg = Message {
            envelope: Envelope {
                src: r,
                dst,
                tag,
                bytes,
            },
            send_req: req,
            data,
        };
        self.rec(
            EntityId::Host(r),
            "send_post",
            kv!("dst" => dst, "tag" => tag, "bytes" => bytes, "req" => req),
        );
        let at = self.now() + c + delay;
        self.sched
            .schedule(at, EntityId::Host(r), Action::Deliver(Delivery::Message(msg)))?;
        Ok(Flow::cost(c))
    }

    fn irecv(&mut self, r: Rank, src: Rank, tag: u32, region: RegionId, offset: usize, bytes: usize) -> Result<Flow, OpFail> {
        if src >= self.cfg.ranks {
            return Err(P2pError::UnknownRank(src).into());
        }
        if bytes == 0 {
            return Err(P2pError::Empty.into());
        }
        self.gpu.memory.check_range(region, offset, bytes)?;
        let req = self.new_request(r);
        self.rec(
            EntityId::Host(r),
            "recv_post",
            kv!("src" => src, "tag" => tag, "bytes" => bytes, "req" => req),
        );
        let recv = PostedRecv {
            req,
            src,
            tag,
            region,
            offset,
            bytes,
        };
        if let Some(m) = self.queues.post_recv(r, recv)? {
            self.apply_match(m)?;
        }
        Ok(Flow::cost(self.cfg.cost.host_enqueue))
    }

    fn wait_all(&mut self, r: Rank) -> Result<Flow, OpFail> {
        if self.hosts[r].reqs.is_empty() {
            return Ok(Flow::cost(0));
        }
        if !self.hosts[r].reqs.iter().all(|q| self.requests[q.index()]) {
            return Ok(Flow::Block {
                cause: BlockCause::P2pWait,
                keys: vec![WatchKey::Req(r)],
            });
        }
        let n = std::mem::take(&mut self.hosts[r].reqs).len();
        self.rec(EntityId::Host(r), "wait_all", kv!("requests" => n));
        let c = self.cfg.cost.host_sync;
        Ok(Flow::Next {
            cost: c,
            blocked: c,
            cause: Some(BlockCause::P2pWait),
        })
    }
}
