use thiserror::Error;

use crate::gpu::GpuError;
use crate::nic::NicError;
use crate::p2p::P2pError;
use crate::rma::RmaError;
use crate::simcore::Rank;

/// Fatal simulation outcome.
#[derive(Debug, Error)]
pub enum SimError {
    /// A model tried to schedule an event before `now`; always a bug in the
    /// protocol model.
    #[error("event for {entity} scheduled at {at} ns, before now ({now} ns)")]
    ScheduledInPast { at: u64, now: u64, entity: String },

    #[error("deadlock at {time} ns; blocked: {}", blocked.join("; "))]
    Deadlock { time: u64, blocked: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rank {rank}, host op #{op}: {source}")]
    Rma {
        rank: Rank,
        op: usize,
        #[source]
        source: RmaError,
    },

    #[error("rank {rank}, host op #{op}: {source}")]
    P2p {
        rank: Rank,
        op: usize,
        #[source]
        source: P2pError,
    },

    #[error(transparent)]
    Gpu(#[from] GpuError),

    #[error(transparent)]
    Nic(#[from] NicError),
}

impl SimError {
    pub fn is_deadlock(&self) -> bool {
        matches!(self, SimError::Deadlock { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_))
    }
}
