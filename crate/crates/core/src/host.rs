//! Host programs: the per-rank sequence of runtime calls the simulator
//! interprets on each rank's host timeline.

use std::fmt;

use crate::gpu::GpuTask;
use crate::rma::AccessMode;
use crate::simcore::{Rank, RegionId, WinId};

/// Why a host timeline is not making progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockCause {
    /// A stream synchronize inside the iteration.
    StreamSync,
    /// The synchronize after the last inner iteration.
    FinalSync,
    /// A synchronize the application inserts for throttling.
    AppThrottleSync,
    /// Waiting for triggered-op descriptors to free up.
    Throttle,
    /// Waiting for a counter's previous epoch to drain before a reset.
    CounterReset,
    /// Classic epoch synchronization.
    Epoch,
    P2pWait,
}

impl BlockCause {
    pub const ALL: [BlockCause; 7] = [
        BlockCause::StreamSync,
        BlockCause::FinalSync,
        BlockCause::AppThrottleSync,
        BlockCause::Throttle,
        BlockCause::CounterReset,
        BlockCause::Epoch,
        BlockCause::P2pWait,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockCause::StreamSync => "stream_sync",
            BlockCause::FinalSync => "final_sync",
            BlockCause::AppThrottleSync => "app_sync",
            BlockCause::Throttle => "throttle",
            BlockCause::CounterReset => "counter_reset",
            BlockCause::Epoch => "epoch",
            BlockCause::P2pWait => "p2p_wait",
        }
    }

    /// Host-side resource recovery rather than communication waiting.
    pub fn is_throttle(self) -> bool {
        matches!(
            self,
            BlockCause::Throttle | BlockCause::CounterReset | BlockCause::AppThrottleSync
        )
    }
}

impl fmt::Display for BlockCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncKind {
    Iteration,
    Final,
    AppThrottle,
}

impl SyncKind {
    pub fn cause(self) -> BlockCause {
        match self {
            SyncKind::Iteration => BlockCause::StreamSync,
            SyncKind::Final => BlockCause::FinalSync,
            SyncKind::AppThrottle => BlockCause::AppThrottleSync,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    InnerBegin,
    InnerEnd,
}

/// One runtime call. Streams are named by their index among the rank's own
/// streams, in creation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostOp {
    Launch {
        stream: usize,
        task: GpuTask,
    },
    Sync {
        stream: usize,
        kind: SyncKind,
    },
    WinCreate {
        win: WinId,
    },
    WinFree {
        win: WinId,
    },
    Post {
        win: WinId,
        group: Vec<Rank>,
    },
    Start {
        win: WinId,
        group: Vec<Rank>,
        mode: AccessMode,
    },
    Put {
        win: WinId,
        target: Rank,
        src: RegionId,
        src_offset: usize,
        dst_offset: usize,
        bytes: usize,
    },
    Complete {
        win: WinId,
    },
    Wait {
        win: WinId,
    },
    PostStream {
        win: WinId,
        group: Vec<Rank>,
        stream: usize,
    },
    CompleteStream {
        win: WinId,
        stream: usize,
    },
    WaitStream {
        win: WinId,
        stream: usize,
    },
    Isend {
        dst: Rank,
        tag: u32,
        region: RegionId,
        offset: usize,
        bytes: usize,
    },
    Irecv {
        src: Rank,
        tag: u32,
        region: RegionId,
        offset: usize,
        bytes: usize,
    },
    /// Waits for every request this rank posted since the previous wait.
    WaitAll,
    Mark(Mark),
}

impl HostOp {
    pub fn name(&self) -> &'static str {
        match self {
            HostOp::Launch { .. } => "launch",
            HostOp::Sync { .. } => "stream_synchronize",
            HostOp::WinCreate { .. } => "win_create",
            HostOp::WinFree { .. } => "win_free",
            HostOp::Post { .. } => "win_post",
            HostOp::Start { .. } => "win_start",
            HostOp::Put { .. } => "put",
            HostOp::Complete { .. } => "win_complete",
            HostOp::Wait { .. } => "win_wait",
            HostOp::PostStream { .. } => "win_post_stream",
            HostOp::CompleteStream { .. } => "win_complete_stream",
            HostOp::WaitStream { .. } => "win_wait_stream",
            HostOp::Isend { .. } => "isend",
            HostOp::Irecv { .. } => "irecv",
            HostOp::WaitAll => "wait_all",
            HostOp::Mark(_) => "mark",
        }
    }
}
