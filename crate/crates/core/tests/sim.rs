use stsim::gpu::{CopyDesc, GpuTask, SlotCond, SlotWrite};
use stsim::host::{BlockCause, HostOp, SyncKind};
use stsim::p2p::P2pError;
use stsim::rma::{AccessMode, RmaError, ThrottlePolicy};
use stsim::simcore::{TraceRecord, WinId};
use stsim::{CostModel, SimConfig, SimError, SimOutcome, Simulator};

fn config(ranks: usize, rpn: usize) -> SimConfig {
    let mut cfg = SimConfig::new(ranks, rpn);
    cfg.keep_trace = true;
    cfg.tops_capacity = Some(64);
    cfg
}

fn sim(ranks: usize, rpn: usize) -> Simulator {
    let mut s = Simulator::new(config(ranks, rpn)).unwrap();
    for r in 0..ranks {
        s.create_stream(r).unwrap();
    }
    s
}

fn cost() -> CostModel {
    CostModel::default()
}

fn launch(task: GpuTask) -> HostOp {
    HostOp::Launch { stream: 0, task }
}

fn sync() -> HostOp {
    HostOp::Sync { stream: 0, kind: SyncKind::Iteration }
}

fn blocked(out: &SimOutcome, rank: usize, cause: BlockCause) -> u64 {
    out.report.blocked_by_cause[rank].get(&cause).copied().unwrap_or(0)
}

fn records<'a>(out: &'a SimOutcome, action: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
    out.report.trace.iter().filter(move |r| r.action == action)
}

fn pattern(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(7).wrapping_add(salt)).collect()
}

#[test]
fn empty_simulation_ends_at_zero() {
    let out = Simulator::new(config(2, 2)).unwrap().run().unwrap();
    assert_eq!(out.report.final_time.ns(), 0);
    assert_eq!(out.report.trace_len, 0);
}

#[test]
fn single_kernel_costs_launch_plus_duration() {
    let mut s = Simulator::new(config(1, 1)).unwrap();
    let st = s.create_stream(0).unwrap();
    s.enqueue(st, GpuTask::compute("k", 1234)).unwrap();
    let out = s.run().unwrap();
    assert_eq!(out.report.final_time.ns(), cost().kernel_launch + 1234);
    assert_eq!(out.report.kernel_launches, 1);
}

#[test]
fn unsatisfied_poll_is_reported_as_deadlock() {
    let mut s = Simulator::new(config(1, 1)).unwrap();
    let st = s.create_stream(0).unwrap();
    let slot = s.memory_mut().alloc_slot(0);
    s.enqueue(st, GpuTask::wait_poll("w", vec![SlotCond { slot, at_least: 1 }])).unwrap();
    match s.run() {
        Err(SimError::Deadlock { blocked, .. }) => {
            let name = st.to_string();
            assert!(blocked.iter().any(|b| b.contains(&name)), "{blocked:?}");
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn stream_runs_in_order_and_streams_are_independent() {
    let mut s = Simulator::new(config(1, 1)).unwrap();
    let a = s.create_stream(0).unwrap();
    let b = s.create_stream(0).unwrap();
    s.enqueue(a, GpuTask::compute("a1", 1000)).unwrap();
    s.enqueue(a, GpuTask::compute("a2", 1000)).unwrap();
    s.enqueue(b, GpuTask::compute("b1", 1000)).unwrap();
    let out = s.run().unwrap();
    let l = cost().kernel_launch;
    let done: Vec<(String, u64)> = records(&out, "kernel_complete")
        .map(|r| (r.get("label").unwrap().to_string(), r.time.ns()))
        .collect();
    let at = |label: &str| done.iter().find(|(l, _)| l == label).unwrap().1;
    assert_eq!(at("a1"), l + 1000);
    assert_eq!(at("a2"), 2 * (l + 1000));
    assert_eq!(at("b1"), l + 1000);
    assert_eq!(out.report.final_time.ns(), 2 * (l + 1000));
}

#[test]
fn synchronize_costs() {
    let c = cost();
    let run = |program: Vec<HostOp>| {
        let mut s = sim(1, 1);
        s.load(0, program);
        s.run().unwrap()
    };

    let idle = run(vec![sync()]);
    assert_eq!(idle.report.host_blocked_ns[0], c.host_sync);
    assert_eq!(idle.report.host_syncs[0], 1);

    let d = 7_000;
    let busy = run(vec![launch(GpuTask::compute("k", d)), sync()]);
    assert_eq!(busy.report.host_blocked_ns[0], c.kernel_launch + d + c.host_sync);

    let twice = run(vec![launch(GpuTask::compute("k", d)), sync(), sync()]);
    assert_eq!(twice.report.host_blocked_ns[0], c.kernel_launch + d + 2 * c.host_sync);
}

#[test]
fn poll_resumes_once_every_condition_holds() {
    let c = cost();
    let mut s = Simulator::new(config(1, 1)).unwrap();
    let waiter = s.create_stream(0).unwrap();
    let writer = s.create_stream(0).unwrap();
    let slot = s.memory_mut().alloc_slot(0);
    s.enqueue(waiter, GpuTask::wait_poll("w", vec![SlotCond { slot, at_least: 2 }])).unwrap();
    let store = |v| GpuTask::signal_store("s", vec![SlotWrite { slot, value: v, tag: None }]);
    s.enqueue(writer, store(1)).unwrap();
    s.enqueue(writer, GpuTask::compute("k", 1000)).unwrap();
    s.enqueue(writer, store(2)).unwrap();
    let out = s.run().unwrap();

    let second_store = 3 * c.kernel_launch + 1000 + 2 * c.signal;
    let resume: Vec<u64> = records(&out, "wait_resume").map(|r| r.time.ns()).collect();
    assert_eq!(resume, vec![second_store]);
    assert_eq!(out.memory.slot(slot).unwrap(), 2);
    assert_eq!(records(&out, "wait_block").count(), 1);
}

#[test]
fn payload_copy_moves_bytes() {
    let mut s = Simulator::new(config(1, 1)).unwrap();
    let st = s.create_stream(0).unwrap();
    let src = s.alloc_region(0, 128).unwrap();
    let dst = s.alloc_region(0, 128).unwrap();
    let data = pattern(128, 3);
    s.memory_mut().write(src, 0, &data).unwrap();
    let copy = CopyDesc { src, src_offset: 0, dst, dst_offset: 0, bytes: 128, tag: None };
    s.enqueue(st, GpuTask::payload_copy("c", vec![copy])).unwrap();
    let out = s.run().unwrap();
    assert_eq!(out.memory.region(dst).unwrap(), &data[..]);
}

fn classic_pair(target_delay: u64) -> (SimOutcome, WinId, Vec<u8>) {
    let mut s = sim(2, 1);
    let win = s.create_window(64);
    let src = s.alloc_region(0, 64).unwrap();
    let data = pattern(64, 11);
    s.memory_mut().write(src, 0, &data).unwrap();
    s.load(
        0,
        vec![
            HostOp::WinCreate { win },
            HostOp::Start { win, group: vec![1], mode: AccessMode::Classic },
            HostOp::Put { win, target: 1, src, src_offset: 0, dst_offset: 0, bytes: 64 },
            HostOp::Complete { win },
            HostOp::WinFree { win },
        ],
    );
    s.load(
        1,
        vec![
            HostOp::WinCreate { win },
            launch(GpuTask::compute("k", target_delay)),
            sync(),
            HostOp::Post { win, group: vec![0] },
            HostOp::Wait { win },
            HostOp::WinFree { win },
        ],
    );
    (s.run().unwrap(), win, data)
}

#[test]
fn classic_origin_waits_for_the_post() {
    let c = cost();
    let (out, _, data) = classic_pair(50_000);

    let post_at = c.host_enqueue + c.kernel_launch + 50_000 + c.host_sync;
    let start_done = post_at + c.nic_enqueue + c.inter_signal();
    let put_issued = start_done + c.nic_enqueue;
    let delivered = put_issued + c.inter_transfer(64);
    assert_eq!(blocked(&out, 0, BlockCause::Epoch), start_done + (delivered - put_issued));

    let wait_from = post_at + c.nic_enqueue;
    let done_arrives = delivered + c.nic_enqueue + c.inter_signal();
    assert_eq!(blocked(&out, 1, BlockCause::Epoch), done_arrives - wait_from);

    let got: Vec<&TraceRecord> = records(&out, "payload_deliver").collect();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].time.ns(), delivered);
    assert!(out.report.host_blocked_ns[0] > 0);
    assert_eq!(out.report.bytes_moved, data.len() as u64);
}

#[test]
fn classic_delivers_window_data() {
    let mut s = sim(2, 1);
    let win = s.create_window(64);
    let src = s.alloc_region(0, 64).unwrap();
    let data = pattern(64, 5);
    s.memory_mut().write(src, 0, &data).unwrap();
    let dst = s.window_region(win, 1);
    s.load(
        0,
        vec![
            HostOp::WinCreate { win },
            HostOp::Start { win, group: vec![1], mode: AccessMode::Classic },
            HostOp::Put { win, target: 1, src, src_offset: 0, dst_offset: 0, bytes: 64 },
            HostOp::Complete { win },
            HostOp::WinFree { win },
        ],
    );
    s.load(
        1,
        vec![
            HostOp::WinCreate { win },
            HostOp::Post { win, group: vec![0] },
            HostOp::Wait { win },
            HostOp::WinFree { win },
        ],
    );
    let out = s.run().unwrap();
    assert_eq!(out.memory.region(dst).unwrap(), &data[..]);
}

#[test]
fn empty_classic_epoch_completes() {
    let mut s = sim(2, 1);
    let win = s.create_window(16);
    s.load(
        0,
        vec![
            HostOp::WinCreate { win },
            HostOp::Start { win, group: vec![1], mode: AccessMode::Classic },
            HostOp::Complete { win },
            HostOp::WinFree { win },
        ],
    );
    s.load(
        1,
        vec![
            HostOp::WinCreate { win },
            HostOp::Post { win, group: vec![0] },
            HostOp::Wait { win },
            HostOp::WinFree { win },
        ],
    );
    let out = s.run().unwrap();
    assert_eq!(out.report.bytes_moved, 0);
}

#[test]
fn put_outside_an_epoch_is_rejected() {
    let mut s = sim(2, 1);
    let win = s.create_window(16);
    let src = s.alloc_region(0, 16).unwrap();
    s.load(
        0,
        vec![
            HostOp::WinCreate { win },
            HostOp::Put { win, target: 1, src, src_offset: 0, dst_offset: 0, bytes: 16 },
        ],
    );
    s.load(1, vec![HostOp::WinCreate { win }]);
    match s.run() {
        Err(SimError::Rma { rank: 0, source: RmaError::EpochClosed { .. }, .. }) => {}
        other => panic!("expected EpochClosed, got {other:?}"),
    }
}

#[test]
fn zero_byte_put_is_rejected() {
    let mut s = sim(2, 1);
    let win = s.create_window(16);
    let src = s.alloc_region(0, 16).unwrap();
    s.load(
        0,
        vec![
            HostOp::WinCreate { win },
            HostOp::Start { win, group: vec![1], mode: AccessMode::Classic },
            HostOp::Put { win, target: 1, src, src_offset: 0, dst_offset: 0, bytes: 0 },
        ],
    );
    s.load(1, vec![HostOp::WinCreate { win }, HostOp::Post { win, group: vec![0] }]);
    match s.run() {
        Err(SimError::Rma { source: RmaError::InvalidArgument(_), .. }) => {}
        other => panic!("expected InvalidArgument, got {other:?}"),
    }
}

/// Origin 0 runs one stream epoch of `puts` 16-byte puts to rank 1, then
/// launches a kernel that rewrites the source before completing the epoch.
fn stream_epoch(cfg: SimConfig, puts: usize) -> Result<(SimOutcome, Vec<u8>, Vec<u8>), SimError> {
    let ranks = cfg.ranks;
    let mut s = Simulator::new(cfg)?;
    for r in 0..ranks {
        s.create_stream(r)?;
    }
    let bytes = 16 * puts;
    let win = s.create_window(bytes);
    let src = s.alloc_region(0, bytes)?;
    let stale = pattern(bytes, 1);
    let fresh = pattern(bytes, 99);
    s.memory_mut().write(src, 0, &stale)?;
    let dst = s.window_region(win, 1);

    let mut origin = vec![
        HostOp::WinCreate { win },
        HostOp::Start { win, group: vec![1], mode: AccessMode::Stream },
    ];
    for i in 0..puts {
        origin.push(HostOp::Put { win, target: 1, src, src_offset: 16 * i, dst_offset: 16 * i, bytes: 16 });
    }
    origin.push(launch(GpuTask::compute_writing("update", 3000, src, 0, fresh.clone())));
    origin.push(HostOp::CompleteStream { win, stream: 0 });
    origin.push(HostOp::Sync { stream: 0, kind: SyncKind::Final });
    origin.push(HostOp::WinFree { win });
    s.load(0, origin);
    s.load(
        1,
        vec![
            HostOp::WinCreate { win },
            HostOp::PostStream { win, group: vec![0], stream: 0 },
            HostOp::WaitStream { win, stream: 0 },
            HostOp::Sync { stream: 0, kind: SyncKind::Final },
            HostOp::WinFree { win },
        ],
    );
    let out = s.run()?;
    let got = out.memory.region(dst)?.to_vec();
    Ok((out, got, fresh))
}

#[test]
fn stream_puts_share_one_trigger_and_read_at_execution() {
    let (out, got, fresh) = stream_epoch(config(2, 1), 3).unwrap();
    assert_eq!(got, fresh, "puts must read the source when they execute");

    let origin: Vec<&TraceRecord> = records(&out, "tops_enqueue").filter(|r| r.get("pool") == Some("0")).collect();
    let payloads: Vec<_> = origin.iter().filter(|r| r.get("kind") == Some("payload")).collect();
    let signals: Vec<_> = origin.iter().filter(|r| r.get("kind") == Some("signal")).collect();
    assert_eq!(payloads.len(), 3);
    assert_eq!(signals.len(), 1);
    let trigger = payloads[0].get("ctr").unwrap();
    assert!(payloads.iter().all(|p| p.get("ctr") == Some(trigger)));
    assert_ne!(signals[0].get("ctr"), Some(trigger));
    assert_eq!(signals[0].get_u64("threshold"), Some(3));
    assert_eq!(out.report.host_syncs[0], 1);
    assert_eq!(blocked(&out, 0, BlockCause::Epoch), 0);
}

#[test]
fn intra_node_stream_epoch_uses_no_triggered_ops() {
    let (out, got, fresh) = stream_epoch(config(2, 2), 3).unwrap();
    assert_eq!(got, fresh);
    assert_eq!(records(&out, "tops_enqueue").count(), 0);
    assert_eq!(records(&out, "mmio_store").count(), 0);
    assert_eq!(out.report.triggered_ops_enqueued, 0);
}

/// Origin 0 runs two stream epochs of five puts each against rank 1.
fn two_epochs(throttle: ThrottlePolicy, capacity: u32) -> SimOutcome {
    let mut cfg = config(2, 1);
    cfg.tops_capacity = Some(capacity);
    cfg.throttle = throttle;
    let mut s = Simulator::new(cfg).unwrap();
    for r in 0..2 {
        s.create_stream(r).unwrap();
    }
    let win = s.create_window(80);
    let src = s.alloc_region(0, 80).unwrap();
    let mut origin = vec![HostOp::WinCreate { win }];
    let mut target = vec![HostOp::WinCreate { win }];
    for _ in 0..2 {
        origin.push(HostOp::Start { win, group: vec![1], mode: AccessMode::Stream });
        for i in 0..5 {
            origin.push(HostOp::Put { win, target: 1, src, src_offset: 16 * i, dst_offset: 16 * i, bytes: 16 });
        }
        origin.push(HostOp::CompleteStream { win, stream: 0 });
        target.push(HostOp::PostStream { win, group: vec![0], stream: 0 });
        target.push(HostOp::WaitStream { win, stream: 0 });
    }
    for p in [&mut origin, &mut target] {
        p.push(HostOp::Sync { stream: 0, kind: SyncKind::Final });
        p.push(HostOp::WinFree { win });
    }
    s.load(0, origin);
    s.load(1, target);
    s.run().unwrap()
}

/// (enqueue time of the origin's 9th op, first and last completion among
/// its first six).
fn throttle_points(out: &SimOutcome) -> (u64, u64, u64) {
    let ops: Vec<(String, u64)> = records(out, "tops_enqueue")
        .filter(|r| r.get("pool") == Some("0"))
        .map(|r| (r.entity.to_string(), r.time.ns()))
        .collect();
    assert_eq!(ops.len(), 12);
    let first_epoch: Vec<u64> = ops[..6]
        .iter()
        .map(|(id, _)| {
            records(out, "tops_complete")
                .find(|r| &r.entity.to_string() == id)
                .unwrap()
                .time
                .ns()
        })
        .collect();
    (ops[8].1, *first_epoch.iter().min().unwrap(), *first_epoch.iter().max().unwrap())
}

#[test]
fn static_throttle_drains_before_reuse() {
    let out = two_epochs(ThrottlePolicy::Static, 8);
    let (ninth, _, last) = throttle_points(&out);
    assert!(ninth >= last, "ninth op at {ninth}, epoch drained at {last}");
    assert!(blocked(&out, 0, BlockCause::Throttle) > 0);
    assert!(out.report.max_tops_in_flight <= 8);
}

#[test]
fn adaptive_throttle_reuses_freed_descriptors() {
    let out = two_epochs(ThrottlePolicy::Adaptive, 8);
    let (ninth, first, last) = throttle_points(&out);
    assert!(ninth >= first && ninth < last, "ninth at {ninth}, completions {first}..{last}");
    assert_eq!(out.report.max_tops_in_flight, 8);

    let stat = two_epochs(ThrottlePolicy::Static, 8);
    assert!(out.report.final_time <= stat.report.final_time);
}

#[test]
fn epoch_larger_than_the_pool_is_a_config_error() {
    let mut cfg = config(2, 1);
    cfg.tops_capacity = Some(8);
    let err = stream_epoch(cfg, 8).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn missing_capacity_is_a_config_error() {
    let mut cfg = config(2, 1);
    cfg.tops_capacity = None;
    let err = stream_epoch(cfg, 1).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn self_send_uses_an_ipc_copy() {
    let c = cost();
    let mut s = sim(1, 1);
    let src = s.alloc_region(0, 64).unwrap();
    let dst = s.alloc_region(0, 64).unwrap();
    let data = pattern(64, 42);
    s.memory_mut().write(src, 0, &data).unwrap();
    s.load(
        0,
        vec![
            HostOp::Isend { dst: 0, tag: 7, region: src, offset: 0, bytes: 64 },
            HostOp::Irecv { src: 0, tag: 7, region: dst, offset: 0, bytes: 64 },
            HostOp::WaitAll,
        ],
    );
    let out = s.run().unwrap();
    let arrived = c.host_enqueue + c.ipc_copy(64);
    let arrive: Vec<u64> = records(&out, "arrive").map(|r| r.time.ns()).collect();
    assert_eq!(arrive, vec![arrived]);
    assert_eq!(out.report.kernel_launches, 1);
    assert_eq!(out.memory.region(dst).unwrap(), &data[..]);
    let wait_from = c.host_enqueue + c.host_enqueue;
    assert_eq!(blocked(&out, 0, BlockCause::P2pWait), arrived - wait_from + c.host_sync);
}

#[test]
fn wait_all_costs() {
    let c = cost();
    let mut s = sim(2, 1);
    let src = s.alloc_region(0, 64).unwrap();
    let dst = s.alloc_region(1, 64).unwrap();
    let data = pattern(64, 8);
    s.memory_mut().write(src, 0, &data).unwrap();
    s.load(0, vec![HostOp::Isend { dst: 1, tag: 1, region: src, offset: 0, bytes: 64 }, HostOp::WaitAll]);
    s.load(1, vec![HostOp::Irecv { src: 0, tag: 1, region: dst, offset: 0, bytes: 64 }, HostOp::WaitAll]);
    let out = s.run().unwrap();
    assert_eq!(blocked(&out, 0, BlockCause::P2pWait), c.inter_transfer(64) + c.host_sync);
    assert_eq!(out.memory.region(dst).unwrap(), &data[..]);

    let mut s = sim(1, 1);
    s.load(0, vec![HostOp::WaitAll]);
    let out = s.run().unwrap();
    assert_eq!(out.report.host_blocked_ns[0], 0);
}

#[test]
fn late_receive_matches_an_early_message() {
    let mut s = sim(2, 1);
    let src = s.alloc_region(0, 32).unwrap();
    let dst = s.alloc_region(1, 32).unwrap();
    let data = pattern(32, 77);
    s.memory_mut().write(src, 0, &data).unwrap();
    s.load(0, vec![HostOp::Isend { dst: 1, tag: 3, region: src, offset: 0, bytes: 32 }, HostOp::WaitAll]);
    s.load(
        1,
        vec![
            launch(GpuTask::compute("k", 20_000)),
            sync(),
            HostOp::Irecv { src: 0, tag: 3, region: dst, offset: 0, bytes: 32 },
            HostOp::WaitAll,
        ],
    );
    let out = s.run().unwrap();
    assert_eq!(out.memory.region(dst).unwrap(), &data[..]);
}

#[test]
fn oversized_message_is_a_truncation_error() {
    let mut s = sim(2, 1);
    let src = s.alloc_region(0, 64).unwrap();
    let dst = s.alloc_region(1, 64).unwrap();
    s.load(0, vec![HostOp::Isend { dst: 1, tag: 0, region: src, offset: 0, bytes: 64 }, HostOp::WaitAll]);
    s.load(1, vec![HostOp::Irecv { src: 0, tag: 0, region: dst, offset: 0, bytes: 32 }, HostOp::WaitAll]);
    match s.run() {
        Err(SimError::P2p { source: P2pError::Truncation { sent: 64, posted: 32, .. }, .. }) => {}
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn recreated_window_starts_a_fresh_epoch_count() {
    let mut s = sim(2, 1);
    let win = s.create_window(16);
    let src = s.alloc_region(0, 16).unwrap();
    let mut origin = Vec::new();
    let mut target = Vec::new();
    for _ in 0..2 {
        origin.extend([
            HostOp::WinCreate { win },
            HostOp::Start { win, group: vec![1], mode: AccessMode::Stream },
            HostOp::Put { win, target: 1, src, src_offset: 0, dst_offset: 0, bytes: 16 },
            HostOp::CompleteStream { win, stream: 0 },
            HostOp::Sync { stream: 0, kind: SyncKind::Final },
            HostOp::WinFree { win },
        ]);
        target.extend([
            HostOp::WinCreate { win },
            HostOp::PostStream { win, group: vec![0], stream: 0 },
            HostOp::WaitStream { win, stream: 0 },
            HostOp::Sync { stream: 0, kind: SyncKind::Final },
            HostOp::WinFree { win },
        ]);
    }
    s.load(0, origin);
    s.load(1, target);
    let out = s.run().unwrap();
    let serials: Vec<u64> = records(&out, "exposure_open").map(|r| r.get_u64("serial").unwrap()).collect();
    assert_eq!(serials, vec![0, 0]);
}
