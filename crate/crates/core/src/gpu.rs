//! GPU devices: per-rank device memory, streams, and the task descriptions
//! the stream execution controller (SEC) runs in FIFO order.
//!
//! A [`GpuTask`] is one kernel launch. It carries an ordered list of
//! [`Phase`]s; independent kernels have a single phase, a merged kernel
//! packs several signal/wait/copy phases behind one launch cost.

use std::collections::VecDeque;

use thiserror::Error;

use crate::nic::RegisterId;
use crate::rma::{DeliveryTag, EpochHook, SignalTag};
use crate::simcore::{Rank, RegionId, SlotId, StreamId, VirtualTime};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GpuError {
    #[error("unknown rank {0}")]
    UnknownRank(Rank),
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("unknown signal slot {0}")]
    UnknownSlot(SlotId),
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("{region}: access [{offset}, {offset}+{len}) outside {size} bytes")]
    OutOfBounds {
        region: RegionId,
        offset: usize,
        len: usize,
        size: usize,
    },
    #[error("task `{0}`: payload copy of zero bytes")]
    EmptyCopy(String),
    #[error("task `{0}`: wait-poll expectation must be >= 1")]
    ZeroExpectation(String),
    #[error("task `{0}` has no phases")]
    EmptyTask(String),
}

/// Bytes a compute kernel writes when it completes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemWrite {
    pub region: RegionId,
    pub offset: usize,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotWrite {
    pub slot: SlotId,
    pub value: u64,
    pub tag: Option<SignalTag>,
}

/// `slot >= at_least`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotCond {
    pub slot: SlotId,
    pub at_least: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyDesc {
    pub src: RegionId,
    pub src_offset: usize,
    pub dst: RegionId,
    pub dst_offset: usize,
    pub bytes: usize,
    pub tag: Option<DeliveryTag>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Compute { duration: u64, write: Option<MemWrite> },
    SignalStore(Vec<SlotWrite>),
    /// Source bytes are read when the phase starts and land when it ends.
    PayloadCopy(Vec<CopyDesc>),
    /// Blocks the stream until every condition holds.
    WaitPoll(Vec<SlotCond>),
    MmioStore(Vec<RegisterId>),
    /// Zero-cost epoch bookkeeping executed in stream order.
    Hook(EpochHook),
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Compute { .. } => "compute",
            Phase::SignalStore(_) => "signal_store",
            Phase::PayloadCopy(_) => "payload_copy",
            Phase::WaitPoll(_) => "wait_poll",
            Phase::MmioStore(_) => "mmio_store",
            Phase::Hook(_) => "hook",
        }
    }
}

/// Whether a kernel belongs to the application or was generated by the
/// communication runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskClass {
    App,
    Comm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuTask {
    pub label: String,
    pub class: TaskClass,
    pub phases: Vec<Phase>,
}

impl GpuTask {
    pub fn new(label: impl Into<String>, class: TaskClass, phases: Vec<Phase>) -> Self {
        GpuTask {
            label: label.into(),
            class,
            phases,
        }
    }

    pub fn compute(label: impl Into<String>, duration: u64) -> Self {
        Self::new(label, TaskClass::App, vec![Phase::Compute { duration, write: None }])
    }

    /// Compute kernel that leaves `bytes` in `region` when it finishes.
    pub fn compute_writing(
        label: impl Into<String>,
        duration: u64,
        region: RegionId,
        offset: usize,
        bytes: Vec<u8>,
    ) -> Self {
        let write = Some(MemWrite { region, offset, bytes });
        Self::new(label, TaskClass::App, vec![Phase::Compute { duration, write }])
    }

    pub fn signal_store(label: impl Into<String>, writes: Vec<SlotWrite>) -> Self {
        Self::new(label, TaskClass::Comm, vec![Phase::SignalStore(writes)])
    }

    pub fn payload_copy(label: impl Into<String>, copies: Vec<CopyDesc>) -> Self {
        Self::new(label, TaskClass::Comm, vec![Phase::PayloadCopy(copies)])
    }

    pub fn wait_poll(label: impl Into<String>, conds: Vec<SlotCond>) -> Self {
        Self::new(label, TaskClass::Comm, vec![Phase::WaitPoll(conds)])
    }

    pub fn mmio_store(label: impl Into<String>, registers: Vec<RegisterId>) -> Self {
        Self::new(label, TaskClass::Comm, vec![Phase::MmioStore(registers)])
    }

    pub fn validate(&self) -> Result<(), GpuError> {
        if self.phases.is_empty() {
            return Err(GpuError::EmptyTask(self.label.clone()));
        }
        for phase in &self.phases {
            match phase {
                Phase::PayloadCopy(copies) if copies.is_empty() || copies.iter().any(|c| c.bytes == 0) => {
                    return Err(GpuError::EmptyCopy(self.label.clone()));
                }
                Phase::WaitPoll(conds) if conds.iter().any(|c| c.at_least == 0) => {
                    return Err(GpuError::ZeroExpectation(self.label.clone()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Region {
    owner: Rank,
    data: Vec<u8>,
}

#[derive(Debug)]
struct SlotCell {
    owner: Rank,
    value: u64,
}

/// Device memory of every rank, with real contents so data movement can be
/// checked against an oracle.
#[derive(Debug, Default)]
pub struct DeviceMemory {
    regions: Vec<Region>,
    slots: Vec<SlotCell>,
}

impl DeviceMemory {
    pub fn alloc_region(&mut self, owner: Rank, bytes: usize) -> RegionId {
        self.regions.push(Region {
            owner,
            data: vec![0; bytes],
        });
        RegionId(self.regions.len() as u32 - 1)
    }

    pub fn alloc_slot(&mut self, owner: Rank) -> SlotId {
        self.slots.push(SlotCell { owner, value: 0 });
        SlotId(self.slots.len() as u32 - 1)
    }

    fn region_ref(&self, id: RegionId) -> Result<&Region, GpuError> {
        self.regions.get(id.index()).ok_or(GpuError::UnknownRegion(id))
    }

    pub fn region(&self, id: RegionId) -> Result<&[u8], GpuError> {
        Ok(&self.region_ref(id)?.data)
    }

    pub fn region_owner(&self, id: RegionId) -> Result<Rank, GpuError> {
        Ok(self.region_ref(id)?.owner)
    }

    pub fn check_range(&self, id: RegionId, offset: usize, len: usize) -> Result<(), GpuError> {
        let size = self.region_ref(id)?.data.len();
        if offset.checked_add(len).is_none_or(|end| end > size) {
            return Err(GpuError::OutOfBounds {
                region: id,
                offset,
                len,
                size,
            });
        }
        Ok(())
    }

    pub fn read(&self, id: RegionId, offset: usize, len: usize) -> Result<Vec<u8>, GpuError> {
        self.check_range(id, offset, len)?;
        Ok(self.regions[id.index()].data[offset..offset + len].to_vec())
    }

    pub fn write(&mut self, id: RegionId, offset: usize, bytes: &[u8]) -> Result<(), GpuError> {
        self.check_range(id, offset, bytes.len())?;
        self.regions[id.index()].data[offset..offset + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn slot(&self, id: SlotId) -> Result<u64, GpuError> {
        self.slots
            .get(id.index())
            .map(|s| s.value)
            .ok_or(GpuError::UnknownSlot(id))
    }

    pub fn slot_owner(&self, id: SlotId) -> Result<Rank, GpuError> {
        self.slots
            .get(id.index())
            .map(|s| s.owner)
            .ok_or(GpuError::UnknownSlot(id))
    }

    pub fn store_slot(&mut self, id: SlotId, value: u64) -> Result<(), GpuError> {
        let cell = self.slots.get_mut(id.index()).ok_or(GpuError::UnknownSlot(id))?;
        debug_assert!(value >= cell.value, "{id} decreased {} -> {value}", cell.value);
        cell.value = value;
        Ok(())
    }

    pub fn add_slot(&mut self, id: SlotId, inc: u64) -> Result<u64, GpuError> {
        let cell = self.slots.get_mut(id.index()).ok_or(GpuError::UnknownSlot(id))?;
        cell.value += inc;
        Ok(cell.value)
    }

    pub fn holds(&self, cond: &SlotCond) -> Result<bool, GpuError> {
        Ok(self.slot(cond.slot)? >= cond.at_least)
    }
}

/// The task a stream is currently executing.
#[derive(Debug)]
pub struct Current {
    pub task: GpuTask,
    /// Index of the phase in progress.
    pub phase: usize,
    /// False while the launch latency is still elapsing.
    pub launched: bool,
    pub blocked: bool,
    /// Source bytes captured at the start of a copy phase.
    pub captured: Vec<Vec<u8>>,
}

/// A task becomes visible to the SEC once the host has finished enqueueing it.
#[derive(Debug)]
pub struct QueuedTask {
    pub ready_at: VirtualTime,
    pub task: GpuTask,
}

#[derive(Debug)]
pub struct Stream {
    pub id: StreamId,
    pub rank: Rank,
    pub queue: VecDeque<QueuedTask>,
    pub current: Option<Current>,
    pub kick_pending: bool,
    pub wake_pending: bool,
    pub completed: u64,
}

impl Stream {
    pub fn is_drained(&self) -> bool {
        self.queue.is_empty() && self.current.is_none()
    }

    pub fn is_blocked(&self) -> bool {
        self.current.as_ref().is_some_and(|c| c.blocked)
    }
}

#[derive(Debug)]
pub struct Gpu {
    ranks: usize,
    streams: Vec<Stream>,
    pub memory: DeviceMemory,
}

impl Gpu {
    pub fn new(ranks: usize) -> Self {
        Gpu {
            ranks,
            streams: Vec::new(),
            memory: DeviceMemory::default(),
        }
    }

    pub fn create_stream(&mut self, rank: Rank) -> Result<StreamId, GpuError> {
        if rank >= self.ranks {
            return Err(GpuError::UnknownRank(rank));
        }
        let id = StreamId(self.streams.len() as u32);
        self.streams.push(Stream {
            id,
            rank,
            queue: VecDeque::new(),
            current: None,
            kick_pending: false,
            wake_pending: false,
            completed: 0,
        });
        Ok(id)
    }

    pub fn stream(&self, id: StreamId) -> Result<&Stream, GpuError> {
        self.streams.get(id.index()).ok_or(GpuError::UnknownStream(id))
    }

    pub fn stream_mut(&mut self, id: StreamId) -> Result<&mut Stream, GpuError> {
        self.streams.get_mut(id.index()).ok_or(GpuError::UnknownStream(id))
    }

    pub fn streams(&self) -> impl Iterator<Item = &Stream> {
        self.streams.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_ids_are_distinct_and_start_empty() {
        let mut gpu = Gpu::new(2);
        let a = gpu.create_stream(0).unwrap();
        let b = gpu.create_stream(0).unwrap();
        assert_eq!(a, StreamId(0));
        assert_ne!(a, b);
        let s = gpu.stream(a).unwrap();
        assert!(s.is_drained());
        assert_eq!(s.rank, 0);
    }

    #[test]
    fn stream_on_unknown_rank_fails() {
        let mut gpu = Gpu::new(2);
        assert_eq!(gpu.create_stream(2), Err(GpuError::UnknownRank(2)));
    }

    #[test]
    fn memory_bounds_are_checked() {
        let mut mem = DeviceMemory::default();
        let r = mem.alloc_region(0, 8);
        mem.write(r, 4, &[1, 2, 3, 4]).unwrap();
        assert_eq!(mem.read(r, 4, 4).unwrap(), vec![1, 2, 3, 4]);
        assert!(matches!(mem.write(r, 6, &[0; 4]), Err(GpuError::OutOfBounds { .. })));
        assert!(matches!(mem.read(r, usize::MAX, 2), Err(GpuError::OutOfBounds { .. })));
    }

    #[test]
    fn slots_count_up() {
        let mut mem = DeviceMemory::default();
        let s = mem.alloc_slot(1);
        assert_eq!(mem.slot(s), Ok(0));
        mem.store_slot(s, 3).unwrap();
        assert_eq!(mem.add_slot(s, 1), Ok(4));
        assert!(mem.holds(&SlotCond { slot: s, at_least: 4 }).unwrap());
        assert!(!mem.holds(&SlotCond { slot: s, at_least: 5 }).unwrap());
        assert_eq!(mem.slot(SlotId(9)), Err(GpuError::UnknownSlot(SlotId(9))));
    }

    #[test]
    fn task_validation() {
        let empty_copy = GpuTask::payload_copy(
            "c",
            vec![CopyDesc {
                src: RegionId(0),
                src_offset: 0,
                dst: RegionId(1),
                dst_offset: 0,
                bytes: 0,
                tag: None,
            }],
        );
        assert_eq!(empty_copy.validate(), Err(GpuError::EmptyCopy("c".into())));
        let zero_wait = GpuTask::wait_poll("w", vec![SlotCond { slot: SlotId(0), at_least: 0 }]);
        assert_eq!(zero_wait.validate(), Err(GpuError::ZeroExpectation("w".into())));
        assert!(GpuTask::compute("k", 0).validate().is_ok());
        assert!(GpuTask::new("e", TaskClass::App, vec![]).validate().is_err());
    }
}
