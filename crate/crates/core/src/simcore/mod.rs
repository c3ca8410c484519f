//! Discrete-event plumbing shared by every model: virtual time, the event
//! queue, and the trace.

mod engine;
mod trace;

pub use engine::{Event, EventId, Scheduler};
pub use trace::{trace_hash, Trace, TraceRecord};

use std::fmt;
use std::ops::{Add, Sub};

/// Rank of a simulated process. Ranks index dense per-rank tables.
pub type Rank = usize;

/// Virtual time in integer nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn ns(self) -> u64 {
        self.0
    }
}

impl Add<u64> for VirtualTime {
    type Output = VirtualTime;

    fn add(self, rhs: u64) -> VirtualTime {
        VirtualTime(self.0 + rhs)
    }
}

impl Sub for VirtualTime {
    type Output = u64;

    fn sub(self, rhs: VirtualTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}
pub(crate) use id_newtype;

id_newtype!(
    /// A GPU stream.
    StreamId,
    "s"
);
id_newtype!(
    /// A NIC hardware counter.
    CounterId,
    "ctr"
);
id_newtype!(
    /// An MMIO register bound to a NIC counter.
    RegisterId,
    "reg"
);
id_newtype!(
    /// A triggered-operation descriptor.
    OpId,
    "top"
);
id_newtype!(
    /// A device-memory byte region.
    RegionId,
    "region"
);
id_newtype!(
    /// A device-memory signal cell.
    SlotId,
    "slot"
);
id_newtype!(
    /// An RMA window.
    WinId,
    "win"
);

/// Who an event or trace record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityId {
    Sim,
    Host(Rank),
    Stream(StreamId),
    Nic(usize),
    Op(OpId),
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityId::Sim => f.write_str("sim"),
            EntityId::Host(r) => write!(f, "host{r}"),
            EntityId::Stream(s) => write!(f, "{s}"),
            EntityId::Nic(n) => write!(f, "nic{n}"),
            EntityId::Op(op) => write!(f, "{op}"),
        }
    }
}

/// Builds a trace detail string: `kv!("rank" => 3, "slot" => s)` gives
/// `rank=3,slot=slot7`.
#[macro_export]
macro_rules! kv {
    () => { String::new() };
    ($($key:literal => $val:expr),+ $(,)?) => {{
        use std::fmt::Write as _;
        let mut out = String::new();
        $(
            if !out.is_empty() {
                out.push(',');
            }
            let _ = write!(out, "{}={}", $key, $val);
        )+
        out
    }};
}
