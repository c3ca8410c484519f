//! Stream execution, triggered-op execution and point deliveries.

use crate::error::SimError;
use crate::gpu::{Current, GpuTask, Phase, QueuedTask, TaskClass};
use crate::kv;
use crate::nic::{OpId, OpKind};
use crate::rma::{DeliveryTag, EpochHook, SignalTag};
use crate::simcore::{EntityId, StreamId, VirtualTime};

use super::{Action, Delivery, OpClass, Simulator, WatchKey, Watcher};

fn delivery_kv(t: &DeliveryTag, bytes: usize) -> String {
    kv!("win" => t.win, "origin" => t.origin, "target" => t.target, "pair" => t.pair, "bytes" => bytes)
}

fn signal_kv(t: &SignalTag) -> String {
    kv!("kind" => t.kind, "win" => t.win, "from" => t.from, "to" => t.to)
}

fn is_marker(task: &GpuTask) -> bool {
    task.phases.iter().all(|p| matches!(p, Phase::Hook(_)))
}

impl Simulator {
    pub(super) fn enqueue_task(&mut self, s: StreamId, task: GpuTask, ready_at: VirtualTime) -> Result<(), SimError> {
        task.validate()?;
        let detail = kv!("label" => task.label, "ready" => ready_at);
        self.rec(EntityId::Stream(s), "task_enqueue", detail);
        let st = self.gpu.stream_mut(s)?;
        st.queue.push_back(QueuedTask { ready_at, task });
        if st.current.is_none() && !st.kick_pending {
            st.kick_pending = true;
            let at = ready_at.max(self.sched.now());
            self.sched.schedule(at, EntityId::Stream(s), Action::StreamKick(s))?;
        }
        Ok(())
    }

    pub(super) fn stream_kick(&mut self, s: StreamId) -> Result<(), SimError> {
        self.gpu.stream_mut(s)?.kick_pending = false;
        self.start_next(s)
    }

    fn start_next(&mut self, s: StreamId) -> Result<(), SimError> {
        let now = self.sched.now();
        let st = self.gpu.stream_mut(s)?;
        if st.current.is_some() {
            return Ok(());
        }
        let Some(front) = st.queue.front() else {
            return Ok(());
        };
        if front.ready_at > now {
            if !st.kick_pending {
                st.kick_pending = true;
                let at = front.ready_at;
                self.sched.schedule(at, EntityId::Stream(s), Action::StreamKick(s))?;
            }
            return Ok(());
        }
        let task = st.queue.pop_front().expect("front exists").task;
        let rank = st.rank;
        let marker = is_marker(&task);
        let (label, class) = (task.label.clone(), task.class);
        st.current = Some(Current {
            task,
            phase: 0,
            launched: marker,
            blocked: false,
            captured: Vec::new(),
        });
        if marker {
            return self.phase_start(s);
        }
        self.kernel_launches += 1;
        if class == TaskClass::Comm {
            self.comm_launches[rank] += 1;
        }
        self.rec(EntityId::Stream(s), "kernel_launch", kv!("label" => label));
        self.at(self.cfg.cost.kernel_launch, EntityId::Stream(s), Action::PhaseStart(s))
    }

    fn current(&mut self, s: StreamId) -> Result<&mut Current, SimError> {
        Ok(self
            .gpu
            .stream_mut(s)?
            .current
            .as_mut()
            .expect("phase event on a stream with no running task"))
    }

    pub(super) fn phase_start(&mut self, s: StreamId) -> Result<(), SimError> {
        let cur = self.current(s)?;
        cur.launched = true;
        let phase = cur.task.phases[cur.phase].clone();
        let cost = self.cfg.cost.clone();
        match phase {
            Phase::Compute { duration, .. } => self.at(duration, EntityId::Stream(s), Action::PhaseDone(s)),
            Phase::SignalStore(_) => self.at(cost.signal, EntityId::Stream(s), Action::PhaseDone(s)),
            Phase::MmioStore(_) => self.at(cost.mmio, EntityId::Stream(s), Action::PhaseDone(s)),
            Phase::PayloadCopy(copies) => {
                let mut captured = Vec::with_capacity(copies.len());
                let mut total = 0;
                for c in &copies {
                    self.gpu.memory.check_range(c.dst, c.dst_offset, c.bytes)?;
                    captured.push(self.gpu.memory.read(c.src, c.src_offset, c.bytes)?);
                    total += c.bytes;
                    if let Some(tag) = &c.tag {
                        self.rec(EntityId::Stream(s), "payload_begin", delivery_kv(tag, c.bytes));
                    }
                }
                self.current(s)?.captured = captured;
                self.at(cost.intra_copy(total), EntityId::Stream(s), Action::PhaseDone(s))
            }
            Phase::WaitPoll(conds) => {
                let mut waiting = Vec::new();
                for c in &conds {
                    if !self.gpu.memory.holds(c)? {
                        waiting.push(c.slot);
                    }
                }
                if waiting.is_empty() {
                    return self.phase_done(s);
                }
                self.current(s)?.blocked = true;
                let detail = kv!("slots" => waiting.len());
                self.rec(EntityId::Stream(s), "wait_block", detail);
                for slot in waiting {
                    self.watch(WatchKey::Slot(slot), Watcher::Stream(s));
                }
                Ok(())
            }
            Phase::Hook(_) => self.phase_done(s),
        }
    }

    pub(super) fn stream_wake(&mut self, s: StreamId) -> Result<(), SimError> {
        let st = self.gpu.stream_mut(s)?;
        st.wake_pending = false;
        let Some(cur) = st.current.as_ref().filter(|c| c.blocked) else {
            return Ok(());
        };
        let Phase::WaitPoll(conds) = cur.task.phases[cur.phase].clone() else {
            return Ok(());
        };
        let mut waiting = Vec::new();
        for c in &conds {
            if !self.gpu.memory.holds(c)? {
                waiting.push(c.slot);
            }
        }
        if waiting.is_empty() {
            self.current(s)?.blocked = false;
            self.rec(EntityId::Stream(s), "wait_resume", String::new());
            return self.phase_done(s);
        }
        for slot in waiting {
            self.watch(WatchKey::Slot(slot), Watcher::Stream(s));
        }
        Ok(())
    }

    pub(super) fn phase_done(&mut self, s: StreamId) -> Result<(), SimError> {
        let cur = self.current(s)?;
        let phase = cur.task.phases[cur.phase].clone();
        let captured = std::mem::take(&mut cur.captured);
        let e = EntityId::Stream(s);
        match phase {
            Phase::Compute { write, .. } => {
                if let Some(w) = write {
                    self.gpu.memory.write(w.region, w.offset, &w.bytes)?;
                }
            }
            Phase::SignalStore(writes) => {
                for w in writes {
                    if let Some(tag) = &w.tag {
                        if self.drop_signal(tag) {
                            self.rec(e, "signal_dropped", signal_kv(tag));
                            continue;
                        }
                    }
                    let old = self.gpu.memory.slot(w.slot)?;
                    self.gpu.memory.store_slot(w.slot, w.value.max(old))?;
                    let mut detail = kv!("slot" => w.slot, "value" => w.value);
                    if let Some(tag) = &w.tag {
                        detail.push(',');
                        detail.push_str(&signal_kv(tag));
                    }
                    self.rec(e, "signal_store", detail);
                    self.notify(WatchKey::Slot(w.slot))?;
                }
            }
            Phase::PayloadCopy(copies) => {
                for (c, data) in copies.iter().zip(captured) {
                    self.gpu.memory.write(c.dst, c.dst_offset, &data)?;
                    self.bytes_moved += c.bytes as u64;
                    let detail = match &c.tag {
                        Some(tag) => delivery_kv(tag, c.bytes),
                        None => kv!("dst" => c.dst, "bytes" => c.bytes),
                    };
                    self.rec(e, "payload_deliver", detail);
                }
            }
            Phase::WaitPoll(_) => {}
            Phase::MmioStore(regs) => {
                for reg in regs {
                    let (ctr, fired) = self.nic.mmio_store(reg)?;
                    let value = self.nic.counter(ctr)?;
                    self.rec(e, "mmio_store", kv!("reg" => reg, "ctr" => ctr, "value" => value));
                    self.fire(fired)?;
                }
            }
            Phase::Hook(hook) => self.apply_hook(e, &hook),
        }
        let cur = self.current(s)?;
        cur.phase += 1;
        if cur.phase < cur.task.phases.len() {
            return self.phase_start(s);
        }
        let st = self.gpu.stream_mut(s)?;
        let done = st.current.take().expect("running task");
        st.completed += 1;
        let n = st.completed;
        if !is_marker(&done.task) {
            self.rec(e, "kernel_complete", kv!("label" => done.task.label, "n" => n));
        }
        self.notify(WatchKey::Stream(s))?;
        self.start_next(s)
    }

    pub(super) fn apply_hook(&mut self, e: EntityId, hook: &EpochHook) {
        let (action, win, target, serial, origins) = match hook {
            EpochHook::ExposureOpen {
                win,
                target,
                serial,
                origins,
            } => ("exposure_open", win, target, serial, origins),
            EpochHook::ExposureClose {
                win,
                target,
                serial,
                origins,
            } => ("exposure_close", win, target, serial, origins),
        };
        if origins.is_empty() {
            self.rec(e, action, kv!("win" => win, "target" => target, "serial" => serial));
        }
        for (o, k) in origins {
            let detail = kv!("win" => win, "target" => target, "origin" => o, "pair" => k, "serial" => serial);
            self.rec(e, action, detail);
        }
    }

    pub(super) fn fire(&mut self, ops: Vec<OpId>) -> Result<(), SimError> {
        for op in ops {
            self.at(self.cfg.cost.trigger_fire, EntityId::Op(op), Action::NicFire(op))?;
        }
        Ok(())
    }

    pub(super) fn nic_fire(&mut self, op: OpId) -> Result<(), SimError> {
        let t = self.nic.begin_execute(op)?.clone();
        let e = EntityId::Op(op);
        self.rec(e, "tops_fire", kv!("kind" => t.kind.name(), "ctr" => t.trigger, "threshold" => t.threshold));
        let cost = &self.cfg.cost;
        match &t.kind {
            OpKind::PayloadPut {
                src,
                src_offset,
                dst,
                dst_offset,
                bytes,
                tag,
            } => {
                let delay = cost.inter_transfer(*bytes);
                self.gpu.memory.check_range(*dst, *dst_offset, *bytes)?;
                let data = self.gpu.memory.read(*src, *src_offset, *bytes)?;
                if let Some(tag) = tag {
                    self.rec(e, "payload_begin", delivery_kv(tag, *bytes));
                }
                self.at(delay, e, Action::NicDone { op, data })
            }
            OpKind::SignalPut { .. } => self.at(cost.inter_signal(), e, Action::NicDone { op, data: Vec::new() }),
            OpKind::AtomicIncrement { .. } => self.at(cost.signal, e, Action::NicDone { op, data: Vec::new() }),
        }
    }

    pub(super) fn nic_done(&mut self, op: OpId, data: Vec<u8>) -> Result<(), SimError> {
        let t = self.nic.op(op)?.clone();
        let e = EntityId::Op(op);
        match &t.kind {
            OpKind::PayloadPut {
                dst, dst_offset, tag, ..
            } => {
                self.gpu.memory.write(*dst, *dst_offset, &data)?;
                self.bytes_moved += data.len() as u64;
                let detail = match tag {
                    Some(tag) => delivery_kv(tag, data.len()),
                    None => kv!("dst" => dst, "bytes" => data.len()),
                };
                self.rec(e, "payload_deliver", detail);
            }
            OpKind::SignalPut { slot, increment, tag } => {
                let dropped = match tag {
                    Some(tag) => self.drop_signal(tag),
                    None => false,
                };
                if dropped {
                    self.rec(e, "signal_dropped", signal_kv(tag.as_ref().expect("tagged")));
                } else {
                    let v = self.gpu.memory.add_slot(*slot, *increment)?;
                    let mut detail = kv!("slot" => slot, "value" => v);
                    if let Some(tag) = tag {
                        detail.push(',');
                        detail.push_str(&signal_kv(tag));
                    }
                    self.rec(e, "signal_deliver", detail);
                    self.notify(WatchKey::Slot(*slot))?;
                }
            }
            OpKind::AtomicIncrement { slot, increment } => {
                let v = self.gpu.memory.add_slot(*slot, *increment)?;
                self.rec(e, "atomic_increment", kv!("slot" => slot, "value" => v));
                self.notify(WatchKey::Slot(*slot))?;
            }
        }
        let fired = self.nic.complete(op)?;
        self.rec(e, "tops_complete", kv!("pool" => t.pool, "in_flight" => self.nic.pool(t.pool).in_flight));
        let value = self.nic.counter(t.completion)?;
        self.rec(EntityId::Nic(t.node), "counter_add", kv!("ctr" => t.completion, "value" => value));
        if let Some(meta) = self.op_meta.get(op.index()).copied() {
            let rw = &mut self.windows[meta.win.index()].ranks[meta.rank];
            match meta.class {
                OpClass::Post => rw.post_ops_outstanding -= 1,
                OpClass::Access => rw.access_ops_outstanding -= 1,
            }
            self.notify(WatchKey::Nic(meta.rank))?;
        }
        self.fire(fired)
    }

    pub(super) fn deliver(&mut self, d: Delivery) -> Result<(), SimError> {
        match d {
            Delivery::Put {
                tag,
                region,
                offset,
                data,
            } => {
                let e = EntityId::Host(tag.origin);
                self.gpu.memory.write(region, offset, &data)?;
                self.bytes_moved += data.len() as u64;
                self.rec(e, "payload_deliver", delivery_kv(&tag, data.len()));
                if let Some(acc) = self.windows[tag.win.index()].ranks[tag.origin].access.as_mut() {
                    acc.puts_in_flight -= 1;
                }
                self.notify(WatchKey::Puts(tag.origin))
            }
            Delivery::Signal { slot, tag } => {
                let e = EntityId::Host(tag.from);
                if self.drop_signal(&tag) {
                    self.rec(e, "signal_dropped", signal_kv(&tag));
                    return Ok(());
                }
                let v = self.gpu.memory.add_slot(slot, 1)?;
                let mut detail = kv!("slot" => slot, "value" => v);
                detail.push(',');
                detail.push_str(&signal_kv(&tag));
                self.rec(e, "signal_deliver", detail);
                self.notify(WatchKey::Slot(slot))
            }
            Delivery::Message(msg) => {
                let env = msg.envelope;
                let e = EntityId::Host(env.dst);
                self.requests[msg.send_req.index()] = true;
                self.rec(
                    e,
                    "arrive",
                    kv!("src" => env.src, "dst" => env.dst, "tag" => env.tag, "bytes" => env.bytes),
                );
                self.notify(WatchKey::Req(env.src))?;
                let matched = self.queues.arrive(msg).map_err(|source| SimError::P2p {
                    rank: env.dst,
                    op: self.hosts[env.dst].pc,
                    source,
                })?;
                if let Some(m) = matched {
                    self.apply_match(m)?;
                }
                Ok(())
            }
        }
    }

    pub(super) fn apply_match(&mut self, m: crate::p2p::Matched) -> Result<(), SimError> {
        let env = m.msg.envelope;
        let e = EntityId::Host(env.dst);
        self.rec(
            e,
            "match",
            kv!("src" => env.src, "tag" => env.tag, "send" => m.msg.send_req, "recv" => m.recv.req),
        );
        self.gpu.memory.write(m.recv.region, m.recv.offset, &m.msg.data)?;
        self.bytes_moved += env.bytes as u64;
        self.rec(e, "deliver", kv!("src" => env.src, "tag" => env.tag, "bytes" => env.bytes));
        self.requests[m.recv.req.index()] = true;
        self.notify(WatchKey::Req(env.dst))
    }
}
