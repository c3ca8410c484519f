//! One-sided communication: windows, access/exposure epochs, the classic
//! post/start/complete/wait protocol and its stream-triggered counterpart,
//! throttling and kernel-merging policies.
//!
//! The protocol logic that needs time (blocking, delivery) runs inside the
//! simulator; this module holds the policy types and per-window bookkeeping.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::gpu::DeviceMemory;
use crate::nic::{CounterId, RegisterId};
use crate::simcore::{Rank, RegionId, SlotId, WinId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RmaError {
    #[error("{win}: no {what} epoch is open")]
    EpochClosed { win: WinId, what: &'static str },
    #[error("{win}: {what} epoch already open")]
    EpochAlreadyOpen { win: WinId, what: &'static str },
    #[error("{win}: rank {rank} is not a valid member of this epoch's group")]
    GroupMismatch { win: WinId, rank: Rank },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{win}: epoch opened in {open:?} mode, call needs {needed:?}")]
    ModeMismatch {
        win: WinId,
        open: AccessMode,
        needed: AccessMode,
    },
    #[error("unknown or inactive window {0}")]
    UnknownWindow(WinId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccessMode {
    #[default]
    Classic,
    /// Puts are deferred and triggered from the GPU stream.
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThrottlePolicy {
    /// The application synchronizes its stream every `sync_interval`
    /// iterations.
    AppLevel { sync_interval: u32 },
    /// Drain every earlier epoch before admitting new descriptors.
    Static,
    /// Admit as soon as enough individual descriptors have completed.
    #[default]
    Adaptive,
}

impl ThrottlePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ThrottlePolicy::AppLevel { .. } => "app",
            ThrottlePolicy::Static => "static",
            ThrottlePolicy::Adaptive => "adaptive",
        }
    }

    /// Parses `app`, `static` or `adaptive`; `app` takes `sync_interval`.
    pub fn parse(s: &str, sync_interval: u32) -> Result<Self, String> {
        match s {
            "app" => Ok(ThrottlePolicy::AppLevel { sync_interval }),
            "static" => Ok(ThrottlePolicy::Static),
            "adaptive" => Ok(ThrottlePolicy::Adaptive),
            _ => Err(format!("throttle must be app, static or adaptive, got `{s}`")),
        }
    }
}

impl fmt::Display for ThrottlePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergePolicy {
    Independent,
    #[default]
    Merged,
}

impl FromStr for MergePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independent" => Ok(MergePolicy::Independent),
            "merged" => Ok(MergePolicy::Merged),
            _ => Err(format!("merge must be independent or merged, got `{s}`")),
        }
    }
}

impl fmt::Display for MergePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergePolicy::Independent => "independent",
            MergePolicy::Merged => "merged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignalKind {
    Post,
    Complete,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Post => "post",
            SignalKind::Complete => "complete",
        })
    }
}

/// Identifies a protocol signal for tracing and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalTag {
    pub kind: SignalKind,
    pub win: WinId,
    pub from: Rank,
    pub to: Rank,
}

/// Identifies one epoch's payload between an origin and a target. `pair` is
/// the index of the epoch between exactly these two ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryTag {
    pub win: WinId,
    pub origin: Rank,
    pub target: Rank,
    pub pair: u64,
}

/// Exposure-epoch bookkeeping that runs in stream order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpochHook {
    ExposureOpen {
        win: WinId,
        target: Rank,
        serial: u64,
        /// (origin, pair index) for every group member.
        origins: Vec<(Rank, u64)>,
    },
    ExposureClose {
        win: WinId,
        target: Rank,
        serial: u64,
        origins: Vec<(Rank, u64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exposure {
    /// (origin, pair index) for every group member.
    pub pairs: Vec<(Rank, u64)>,
    pub mode: AccessMode,
    pub serial: u64,
}

/// An intra-node put deferred until `complete_stream`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPut {
    pub target: Rank,
    pub src: RegionId,
    pub src_offset: usize,
    pub dst_offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub group: Vec<Rank>,
    pub mode: AccessMode,
    pub pending_puts: Vec<PendingPut>,
    /// Inter-node triggered payloads enqueued in this epoch.
    pub inter_payloads: u64,
    /// Classic puts issued but not yet delivered.
    pub puts_in_flight: u32,
}

/// NIC resources a rank uses for the stream path of one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinCounters {
    pub post: CounterId,
    pub post_reg: RegisterId,
    pub trig: CounterId,
    pub trig_reg: RegisterId,
    /// Completion counter of payloads; triggers completion signals.
    pub comp: CounterId,
    /// Completion counter of signals.
    pub sig: CounterId,
}

#[derive(Debug, Clone, Default)]
pub struct RankWin {
    pub exposure: Option<Exposure>,
    pub access: Option<Access>,
    /// Completed exposure epochs.
    pub serial: u64,
    pub counters: Option<WinCounters>,
    pub post_mmios: u64,
    pub trig_mmios: u64,
    /// Inter-node payloads enqueued over the window's lifetime.
    pub payloads_total: u64,
    /// Post signals not yet completed on the NIC.
    pub post_ops_outstanding: u32,
    /// Payloads and completion signals not yet completed on the NIC.
    pub access_ops_outstanding: u32,
}

#[derive(Debug)]
pub struct Window {
    pub id: WinId,
    pub bytes: usize,
    regions: Vec<RegionId>,
    active: Vec<bool>,
    pub ranks: Vec<RankWin>,
    /// (origin, target) -> slot owned by origin.
    post_slots: BTreeMap<(Rank, Rank), SlotId>,
    /// (target, origin) -> slot owned by target.
    complete_slots: BTreeMap<(Rank, Rank), SlotId>,
    posts: BTreeMap<(Rank, Rank), u64>,
    accesses: BTreeMap<(Rank, Rank), u64>,
    completes: BTreeMap<(Rank, Rank), u64>,
}

fn bump(map: &mut BTreeMap<(Rank, Rank), u64>, key: (Rank, Rank)) -> u64 {
    let v = map.entry(key).or_insert(0);
    *v += 1;
    *v
}

impl Window {
    /// Allocates a `bytes`-sized region on each of `nranks` ranks. The window
    /// starts inactive on every rank.
    pub fn new(id: WinId, nranks: usize, bytes: usize, mem: &mut DeviceMemory) -> Self {
        Window {
            id,
            bytes,
            regions: (0..nranks).map(|r| mem.alloc_region(r, bytes)).collect(),
            active: vec![false; nranks],
            ranks: vec![RankWin::default(); nranks],
            post_slots: BTreeMap::new(),
            complete_slots: BTreeMap::new(),
            posts: BTreeMap::new(),
            accesses: BTreeMap::new(),
            completes: BTreeMap::new(),
        }
    }

    pub fn region(&self, rank: Rank) -> RegionId {
        self.regions[rank]
    }

    pub fn nranks(&self) -> usize {
        self.regions.len()
    }

    pub fn is_active(&self, rank: Rank) -> bool {
        self.active.get(rank).copied().unwrap_or(false)
    }

    pub fn set_active(&mut self, rank: Rank, on: bool) {
        self.active[rank] = on;
    }

    /// Checks that `group` names distinct participants other than `rank`.
    pub fn check_group(&self, rank: Rank, group: &[Rank]) -> Result<(), RmaError> {
        let mut seen = vec![false; self.nranks()];
        for &g in group {
            if g == rank || g >= self.nranks() || seen[g] {
                return Err(RmaError::GroupMismatch { win: self.id, rank: g });
            }
            seen[g] = true;
        }
        Ok(())
    }

    pub fn post_slot(&mut self, mem: &mut DeviceMemory, origin: Rank, target: Rank) -> SlotId {
        *self
            .post_slots
            .entry((origin, target))
            .or_insert_with(|| mem.alloc_slot(origin))
    }

    pub fn complete_slot(&mut self, mem: &mut DeviceMemory, target: Rank, origin: Rank) -> SlotId {
        *self
            .complete_slots
            .entry((target, origin))
            .or_insert_with(|| mem.alloc_slot(target))
    }

    /// Target `t` posts to origin `o`; returns the pair index, starting at 1.
    pub fn count_post(&mut self, t: Rank, o: Rank) -> u64 {
        bump(&mut self.posts, (t, o))
    }

    pub fn count_access(&mut self, o: Rank, t: Rank) -> u64 {
        bump(&mut self.accesses, (o, t))
    }

    pub fn count_complete(&mut self, o: Rank, t: Rank) -> u64 {
        bump(&mut self.completes, (o, t))
    }

    /// Access epochs origin `o` has opened towards `t`.
    pub fn accesses(&self, o: Rank, t: Rank) -> u64 {
        self.accesses.get(&(o, t)).copied().unwrap_or(0)
    }

    pub fn completes(&self, o: Rank, t: Rank) -> u64 {
        self.completes.get(&(o, t)).copied().unwrap_or(0)
    }
}
