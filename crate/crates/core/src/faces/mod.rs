//! Faces nearest-neighbor halo exchange on a 3D rank grid.
//!
//! Every rank owns a 26-piece surface buffer and a receive window with the
//! same layout. Slot `e` of a rank's window holds the piece that the
//! neighbor at offset `e` sent, which is that neighbor's piece `-e`.

mod grid;

use std::fmt;
use std::str::FromStr;

pub use grid::{message_size, parse_dims, GridSpec, Kind, Layout, Neighbor, Offset};

use crate::cost::CostModel;
use crate::error::SimError;
use crate::gpu::{DeviceMemory, GpuTask};
use crate::host::{HostOp, Mark, SyncKind};
use crate::nic::CounterMode;
use crate::rma::{AccessMode, MergePolicy, ThrottlePolicy};
use crate::sim::{FaultPlan, SignalPool, SimConfig, SimReport, Simulator};
use crate::simcore::{Rank, RegionId, WinId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    P2p,
    Arma,
    StArma,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::P2p, Variant::Arma, Variant::StArma];

    pub fn name(self) -> &'static str {
        match self {
            Variant::P2p => "p2p",
            Variant::Arma => "arma",
            Variant::StArma => "st_arma",
        }
    }

    fn uses_windows(self) -> bool {
        self != Variant::P2p
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("variant must be p2p, arma or st_arma, got `{s}`"))
    }
}

/// Independent-stream compute kernel launched every inner iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Overlap {
    #[default]
    Off,
    On(u64),
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Overlap::Off => f.write_str("off"),
            Overlap::On(ns) => write!(f, "on:{ns}"),
        }
    }
}

impl FromStr for Overlap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "off" {
            return Ok(Overlap::Off);
        }
        s.strip_prefix("on:")
            .and_then(|ns| ns.parse().ok())
            .map(Overlap::On)
            .ok_or_else(|| format!("overlap must be off or on:<ns>, got `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub variant: Variant,
    pub grid: GridSpec,
    pub outer: usize,
    pub middle: usize,
    pub inner: usize,
    pub throttle: ThrottlePolicy,
    pub merge: MergePolicy,
    pub overlap: Overlap,
    pub seed: u64,
    pub cost: CostModel,
    pub tops_capacity: Option<u32>,
    pub counter_budget: u32,
    pub counter_mode: CounterMode,
    pub signal_pool: SignalPool,
    /// Duration of the init, increment and compare kernels.
    pub kernel_ns: u64,
    pub keep_trace: bool,
    pub faults: FaultPlan,
    /// Test hook: this rank writes every piece into the wrong slot.
    pub misroute: Option<Rank>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            variant: Variant::StArma,
            grid: GridSpec::new(2, 2, 2),
            outer: 2,
            middle: 2,
            inner: 10,
            throttle: ThrottlePolicy::Adaptive,
            merge: MergePolicy::Merged,
            overlap: Overlap::Off,
            seed: 1,
            cost: CostModel::default(),
            tops_capacity: None,
            counter_budget: 1024,
            counter_mode: CounterMode::Monotonic,
            signal_pool: SignalPool::Shared,
            kernel_ns: 2_000,
            keep_trace: false,
            faults: FaultPlan::default(),
            misroute: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.grid.validate()?;
        if self.outer == 0 || self.middle == 0 || self.inner == 0 {
            return Err(SimError::Config("outer, middle and inner must all be >= 1".into()));
        }
        if let ThrottlePolicy::AppLevel { sync_interval: 0 } = self.throttle {
            return Err(SimError::Config("sync_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        let mut c = SimConfig::new(self.grid.ranks(), self.grid.ranks_per_node);
        c.cost = self.cost.clone();
        c.tops_capacity = self.tops_capacity;
        c.counter_budget = self.counter_budget;
        c.counter_mode = self.counter_mode;
        c.signal_pool = self.signal_pool;
        c.throttle = self.throttle;
        c.merge = self.merge;
        c.keep_trace = self.keep_trace;
        c.faults = self.faults.clone();
        c
    }

    /// Index of the last inner iteration over the whole run.
    pub fn last_iteration(&self) -> u64 {
        (self.outer * self.middle * self.inner) as u64 - 1
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Byte `byte` of piece `piece` that `rank` produces in global iteration
/// `iter`.
pub fn element_value(seed: u64, rank: Rank, iter: u64, piece: usize, byte: usize) -> u8 {
    let mut h = splitmix(seed);
    for v in [rank as u64, iter, piece as u64, (byte / 8) as u64] {
        h = splitmix(h ^ v);
    }
    (h >> (8 * (byte % 8))) as u8
}

/// A rank's full surface buffer for one iteration.
fn surface(seed: u64, grid: &GridSpec, layout: &Layout, rank: Rank, iter: u64) -> Vec<u8> {
    let mut buf = vec![0; layout.total()];
    for o in Offset::all() {
        let start = layout.offset(o);
        for b in 0..layout.len(o) {
            buf[start + b] = element_value(seed, rank, iter, o.index(), b);
        }
    }
    debug_assert_eq!(buf.len(), grid.layout().total());
    buf
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultRow {
    pub variant: Variant,
    pub px: usize,
    pub py: usize,
    pub pz: usize,
    pub ranks_per_node: usize,
    pub n: usize,
    pub s: usize,
    pub inner: usize,
    pub throttle: String,
    pub merge: String,
    pub overlap: String,
    pub seed: u64,
    pub virtual_time_ns: u64,
    pub host_blocked_ns: u64,
    pub kernel_launches: u64,
    pub triggered_ops_enqueued: u64,
    pub max_tops_in_flight: u32,
    pub bytes_moved: u64,
    pub trace_hash: u64,
}

impl ResultRow {
    pub const HEADER: &'static str = "variant,px,py,pz,ranks_per_node,n,s,inner,throttle,merge,overlap,seed,\
virtual_time_ns,host_blocked_ns,kernel_launches,triggered_ops_enqueued,max_tops_in_flight,bytes_moved,trace_hash";

    pub fn new(cfg: &BenchmarkConfig, report: &SimReport) -> Self {
        let g = &cfg.grid;
        ResultRow {
            variant: cfg.variant,
            px: g.px,
            py: g.py,
            pz: g.pz,
            ranks_per_node: g.ranks_per_node,
            n: g.n,
            s: g.s,
            inner: cfg.inner,
            throttle: cfg.throttle.to_string(),
            merge: cfg.merge.to_string(),
            overlap: cfg.overlap.to_string(),
            seed: cfg.seed,
            virtual_time_ns: report.inner_loop_ns.iter().copied().max().unwrap_or(0),
            host_blocked_ns: report.total_blocked_ns(),
            kernel_launches: report.kernel_launches,
            triggered_ops_enqueued: report.triggered_ops_enqueued,
            max_tops_in_flight: report.max_tops_in_flight,
            bytes_moved: report.bytes_moved,
            trace_hash: report.trace_hash,
        }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.px, self.py, self.pz)
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:016x}",
            self.variant,
            self.px,
            self.py,
            self.pz,
            self.ranks_per_node,
            self.n,
            self.s,
            self.inner,
            self.throttle,
            self.merge,
            self.overlap,
            self.seed,
            self.virtual_time_ns,
            self.host_blocked_ns,
            self.kernel_launches,
            self.triggered_ops_enqueued,
            self.max_tops_in_flight,
            self.bytes_moved,
            self.trace_hash
        )
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct FacesRun {
    pub report: SimReport,
    pub row: ResultRow,
    pub memory: DeviceMemory,
    /// Each rank's receive buffer from the last outer iteration.
    pub recv: Vec<RegionId>,
}

impl FacesRun {
    pub fn received(&self, rank: Rank) -> &[u8] {
        self.memory.region(self.recv[rank]).expect("receive region exists")
    }
}

struct Plan<'a> {
    cfg: &'a BenchmarkConfig,
    layout: Layout,
    src: Vec<RegionId>,
    wins: Vec<WinId>,
    recv: Vec<Vec<RegionId>>,
}

impl Plan<'_> {
    fn program(&self, r: Rank) -> Vec<HostOp> {
        let cfg = self.cfg;
        let grid = &cfg.grid;
        let nbrs = grid.neighbors(r);
        let group: Vec<Rank> = nbrs.iter().map(|n| n.rank).collect();
        let src = self.src[r];
        let launch = |task| HostOp::Launch { stream: 0, task };
        let sync = |kind| HostOp::Sync { stream: 0, kind };
        let kernel = |label: &str, iter| {
            let bytes = surface(cfg.seed, grid, &self.layout, r, iter);
            launch(GpuTask::compute_writing(label, cfg.kernel_ns, src, 0, bytes))
        };
        let compare = || launch(GpuTask::compute("compare", cfg.kernel_ns));
        let puts = |win| {
            nbrs.iter().map(move |nb| {
                let slot = if cfg.misroute == Some(r) { nb.offset } else { nb.offset.neg() };
                HostOp::Put {
                    win,
                    target: nb.rank,
                    src,
                    src_offset: self.layout.offset(nb.offset),
                    dst_offset: self.layout.offset(slot),
                    bytes: self.layout.len(nb.offset),
                }
            })
        };

        let mut p = Vec::new();
        for o in 0..cfg.outer {
            let win = self.wins.get(o).copied();
            if let Some(win) = win {
                p.push(HostOp::WinCreate { win });
            }
            for m in 0..cfg.middle {
                let g0 = ((o * cfg.middle + m) * cfg.inner) as u64;
                p.push(kernel("init", g0));
                p.push(HostOp::Mark(Mark::InnerBegin));
                for i in 0..cfg.inner {
                    let g = g0 + i as u64;
                    if let Overlap::On(ns) = cfg.overlap {
                        p.push(HostOp::Launch {
                            stream: 1,
                            task: GpuTask::compute("overlap", ns),
                        });
                    }
                    match (cfg.variant, win) {
                        (Variant::Arma, Some(win)) => {
                            p.push(HostOp::Post { win, group: group.clone() });
                            p.push(kernel("inc", g));
                            p.push(sync(SyncKind::Iteration));
                            p.push(HostOp::Start {
                                win,
                                group: group.clone(),
                                mode: AccessMode::Classic,
                            });
                            p.extend(puts(win));
                            p.push(HostOp::Complete { win });
                            p.push(HostOp::Wait { win });
                            p.push(compare());
                            p.push(sync(SyncKind::Iteration));
                        }
                        (Variant::StArma, Some(win)) => {
                            p.push(HostOp::PostStream {
                                win,
                                group: group.clone(),
                                stream: 0,
                            });
                            p.push(kernel("inc", g));
                            p.push(HostOp::Start {
                                win,
                                group: group.clone(),
                                mode: AccessMode::Stream,
                            });
                            p.extend(puts(win));
                            p.push(HostOp::CompleteStream { win, stream: 0 });
                            p.push(HostOp::WaitStream { win, stream: 0 });
                            p.push(compare());
                            if let ThrottlePolicy::AppLevel { sync_interval } = cfg.throttle {
                                if (i + 1) % sync_interval as usize == 0 && i + 1 < cfg.inner {
                                    p.push(sync(SyncKind::AppThrottle));
                                }
                            }
                        }
                        _ => {
                            let recv = self.recv[o][r];
                            for nb in &nbrs {
                                p.push(HostOp::Irecv {
                                    src: nb.rank,
                                    tag: nb.offset.neg().index() as u32,
                                    region: recv,
                                    offset: self.layout.offset(nb.offset),
                                    bytes: self.layout.len(nb.offset),
                                });
                            }
                            p.push(kernel("inc", g));
                            p.push(sync(SyncKind::Iteration));
                            for nb in &nbrs {
                                p.push(HostOp::Isend {
                                    dst: nb.rank,
                                    tag: nb.offset.index() as u32,
                                    region: src,
                                    offset: self.layout.offset(nb.offset),
                                    bytes: self.layout.len(nb.offset),
                                });
                            }
                            p.push(HostOp::WaitAll);
                            p.push(compare());
                            p.push(sync(SyncKind::Iteration));
                        }
                    }
                }
                if cfg.variant == Variant::StArma {
                    p.push(sync(SyncKind::Final));
                }
                if cfg.overlap != Overlap::Off {
                    p.push(HostOp::Sync {
                        stream: 1,
                        kind: SyncKind::Final,
                    });
                }
                p.push(HostOp::Mark(Mark::InnerEnd));
            }
            if let Some(win) = win {
                p.push(HostOp::WinFree { win });
            }
        }
        p
    }
}

/// Builds and runs one Faces configuration.
pub fn run_variant(cfg: &BenchmarkConfig) -> Result<FacesRun, SimError> {
    cfg.validate()?;
    let grid = &cfg.grid;
    let ranks = grid.ranks();
    let layout = grid.layout();
    let mut sim = Simulator::new(cfg.sim_config())?;
    for r in 0..ranks {
        sim.create_stream(r)?;
        if cfg.overlap != Overlap::Off {
            sim.create_stream(r)?;
        }
    }
    let src = (0..ranks)
        .map(|r| sim.alloc_region(r, layout.total()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut wins = Vec::new();
    let mut recv = Vec::new();
    for _ in 0..cfg.outer {
        if cfg.variant.uses_windows() {
            let w = sim.create_window(layout.total());
            recv.push((0..ranks).map(|r| sim.window_region(w, r)).collect());
            wins.push(w);
        } else {
            recv.push(
                (0..ranks)
                    .map(|r| sim.alloc_region(r, layout.total()))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
    }
    let plan = Plan {
        cfg,
        layout,
        src,
        wins,
        recv,
    };
    for r in 0..ranks {
        sim.load(r, plan.program(r));
    }
    let last_recv = plan.recv.last().cloned().unwrap_or_default();
    let out = sim.run()?;
    Ok(FacesRun {
        row: ResultRow::new(cfg, &out.report),
        report: out.report,
        memory: out.memory,
        recv: last_recv,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub rank: Rank,
    pub coords: [usize; 3],
    /// Which slot of the receive buffer.
    pub offset: Offset,
    pub byte: usize,
    pub expected: u8,
    pub found: u8,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, z] = self.coords;
        write!(
            f,
            "rank {} at ({x},{y},{z}) slot {} byte {}: expected {:#04x}, found {:#04x}",
            self.rank, self.offset, self.byte, self.expected, self.found
        )
    }
}

/// Checks every receive buffer against what the final iteration must have
/// left there. Returns at most 10 mismatches.
pub fn verify_exchange(run: &FacesRun, cfg: &BenchmarkConfig) -> Result<(), Vec<Mismatch>> {
    const LIMIT: usize = 10;
    let grid = &cfg.grid;
    let layout = grid.layout();
    let last = cfg.last_iteration();
    let mut bad = Vec::new();
    'ranks: for r in 0..grid.ranks() {
        let buf = run.received(r);
        for e in Offset::all() {
            let start = layout.offset(e);
            let sender = grid.neighbor(r, e);
            for b in 0..layout.len(e) {
                let expected = match sender {
                    Some(n) => element_value(cfg.seed, n, last, e.neg().index(), b),
                    None => 0,
                };
                let found = buf[start + b];
                if found != expected {
                    bad.push(Mismatch {
                        rank: r,
                        coords: grid.coords(r),
                        offset: e,
                        byte: b,
                        expected,
                        found,
                    });
                    if bad.len() == LIMIT {
                        break 'ranks;
                    }
                }
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}
