//! Decoupled asynchronous IO stack.
//!
//! Submission and completion are handled by independent worker pools. Each
//! submission worker binds up to `commands_per_worker` in-flight commands and
//! spreads them over its submission queues; completion workers reap disjoint
//! subsets of the completion queues and scatter payloads straight into output
//! feature rows. A submission worker never waits on a specific completion:
//! the only stalls it can experience are flow control (in-flight budget,
//! buffer slots, ring full), all of which are instrumented.
//!
//! The synchronous ablation path couples the two stages the way a
//! one-command-per-worker design would: submit, spin on the paired completion
//! queue, scatter, repeat.

mod matrix;
mod pending;

pub use matrix::RowBlock;
pub use pending::{BatchIoState, PendingEntry, PendingTable};

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use crate::feature::FeatureLayout;
use crate::metrics::Counters;
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::storage::{IoCommand, IoStatus, QueueFull, StorageEngine};

/// One unit of submission work: a slice of misses headed for one row block.
struct SubmitJob {
    items: Vec<(u64, u32)>,
    block: Arc<RowBlock>,
    batch: Option<Arc<BatchIoState>>,
    done: Sender<()>,
}

/// Full command-id traces for conservation audits, enabled per run.
#[derive(Default)]
pub struct CommandAudit {
    pub submitted: Mutex<Vec<(u32, u64)>>,
    pub reaped: Mutex<Vec<(u32, u64)>>,
}

pub struct IoStackOptions {
    pub submitter_workers: usize,
    pub completion_workers: usize,
    pub commands_per_worker: usize,
    pub sync_io: bool,
    pub audit_commands: bool,
}

pub struct IoStack {
    storage: Arc<StorageEngine>,
    layout: FeatureLayout,
    pending: Arc<PendingTable>,
    counters: Arc<Counters>,
    opts: IoStackOptions,

    budget_tx: Vec<Sender<()>>,
    budget_rx: Vec<Receiver<()>>,
    job_tx: Vec<Sender<SubmitJob>>,
    submit_handles: Vec<JoinHandle<()>>,
    completion_handles: Vec<JoinHandle<()>>,
    shutdown: Arc<AtomicBool>,
    audit: Option<Arc<CommandAudit>>,
}

struct WorkerCtx {
    storage: Arc<StorageEngine>,
    layout: FeatureLayout,
    pending: Arc<PendingTable>,
    counters: Arc<Counters>,
    audit: Option<Arc<CommandAudit>>,
    /// Token return paths, one per submission worker.
    budget_tx: Vec<Sender<()>>,
}

impl WorkerCtx {
    fn acquire_slot(&self) -> u32 {
        loop {
            match self.storage.iobuf().acquire() {
                Some(s) => return s,
                None => {
                    self.counters.flow_control_waits.fetch_add(1, Ordering::Relaxed);
                    std::thread::yield_now();
                }
            }
        }
    }

    /// Registers routing state and pushes one command. The pending entry is
    /// inserted before the SQ push so a completion can never miss it.
    fn submit_one(
        &self,
        worker: u32,
        vid: u64,
        block: &Arc<RowBlock>,
        row: u32,
        batch: Option<&Arc<BatchIoState>>,
        track_pending: bool,
    ) -> IoCommand {
        let slot = self.acquire_slot();
        self.submit_with_slot(worker, vid, slot, block, row, batch, track_pending)
    }

    #[allow(clippy::too_many_arguments)]
    fn submit_with_slot(
        &self,
        worker: u32,
        vid: u64,
        slot: u32,
        block: &Arc<RowBlock>,
        row: u32,
        batch: Option<&Arc<BatchIoState>>,
        track_pending: bool,
    ) -> IoCommand {
        let addr = self.layout.vertex_to_block(crate::graph::VertexId(vid));
        let cmd = IoCommand {
            cmd_id: self.storage.alloc_cmd_id(),
            shard: addr.shard as u32,
            lba: addr.lba,
            num_blocks: self.layout.blocks_per_feature as u32,
            dest_slot: slot,
        };
        if track_pending {
            self.pending.insert(
                cmd.cmd_id,
                PendingEntry {
                    block: Arc::clone(block),
                    row,
                    dest_slot: slot,
                    worker,
                    batch: batch.cloned(),
                },
            );
        }
        if let Some(audit) = &self.audit {
            audit.submitted.lock().push((cmd.shard, cmd.cmd_id));
        }
        self.push_with_rotation(addr.shard, worker as usize, cmd);
        self.counters.submitted.fetch_add(1, Ordering::Relaxed);
        self.counters.record_inflight_up();
        cmd
    }

    /// Pushes to the worker's own SQ on the target shard, rotating to sibling
    /// queues while the ring is full.
    fn push_with_rotation(&self, shard: usize, worker: usize, cmd: IoCommand) {
        let queues = self.storage.queues_per_shard();
        let mut qi = worker % queues;
        let mut cmd = cmd;
        let mut attempts = 0usize;
        loop {
            match self.storage.sq(shard, qi).push(cmd) {
                Ok(()) => return,
                Err(QueueFull(c)) => {
                    cmd = c;
                    self.counters.sq_full_retries.fetch_add(1, Ordering::Relaxed);
                    qi = (qi + 1) % queues;
                    attempts += 1;
                    if attempts % queues == 0 {
                        std::thread::yield_now();
                    }
                }
            }
        }
    }

    /// Consumes one completion entry: route, scatter, recycle.
    fn scatter(&self, shard: usize, cmd_id: u64, status: IoStatus) {
        let entry = self
            .pending
            .remove(cmd_id)
            .unwrap_or_else(|| panic!("completion for unknown cmd_id {cmd_id}"));
        let ok = status == IoStatus::Ok;
        if ok {
            let payload = unsafe { self.storage.iobuf().slot(entry.dest_slot) };
            entry.block.write_row_le_bytes(entry.row, payload);
        }
        self.storage.iobuf().release(entry.dest_slot);
        if let Some(audit) = &self.audit {
            audit.reaped.lock().push((shard as u32, cmd_id));
        }
        let _ = self.budget_tx[entry.worker as usize].try_send(());
        self.counters.scattered.fetch_add(1, Ordering::Relaxed);
        self.counters.record_inflight_down();
        if let Some(batch) = &entry.batch {
            batch.complete_one(ok);
        }
    }
}

impl IoStack {
    pub fn start(storage: Arc<StorageEngine>, counters: Arc<Counters>, opts: IoStackOptions) -> Self {
        let layout = *storage.layout();
        let pending = Arc::new(PendingTable::new());
        let shutdown = Arc::new(AtomicBool::new(false));
        let audit = opts.audit_commands.then(|| Arc::new(CommandAudit::default()));

        // Per-worker in-flight budgets, pre-filled with one token per command
        // the worker may bind.
        let mut budget_tx = Vec::new();
        let mut budget_rx = Vec::new();
        for _ in 0..opts.submitter_workers {
            let (tx, rx) = bounded(opts.commands_per_worker);
            for _ in 0..opts.commands_per_worker {
                tx.send(()).unwrap();
            }
            budget_tx.push(tx);
            budget_rx.push(rx);
        }

        let ctx = || WorkerCtx {
            storage: Arc::clone(&storage),
            layout,
            pending: Arc::clone(&pending),
            counters: Arc::clone(&counters),
            audit: audit.clone(),
            budget_tx: budget_tx.clone(),
        };

        // Submission pool.
        let mut job_tx = Vec::new();
        let mut submit_handles = Vec::new();
        for w in 0..opts.submitter_workers {
            let (tx, rx) = unbounded::<SubmitJob>();
            job_tx.push(tx);
            let ctx = ctx();
            let budget = budget_rx[w].clone();
            let counters = Arc::clone(&counters);
            submit_handles.push(
                std::thread::Builder::new()
                    .name(format!("submit-{w}"))
                    .spawn(move || {
                        while let Ok(job) = rx.recv() {
                            for &(vid, row) in &job.items {
                                if budget.try_recv().is_err() {
                                    counters.flow_control_waits.fetch_add(1, Ordering::Relaxed);
                                    budget.recv().expect("budget channel closed");
                                }
                                ctx.submit_one(w as u32, vid, &job.block, row, job.batch.as_ref(), true);
                            }
                            let _ = job.done.send(());
                        }
                    })
                    .expect("spawn submit worker"),
            );
        }

        // Completion pool; not started in sync mode, where each submitter is
        // the single consumer of its own completion queues.
        let mut completion_handles = Vec::new();
        if !opts.sync_io {
            let queues = storage.queues_per_shard();
            let num_shards = storage.num_shards();
            for c in 0..opts.completion_workers {
                let ctx = ctx();
                let shutdown = Arc::clone(&shutdown);
                let owned: Vec<(usize, usize)> = (0..num_shards * queues)
                    .filter(|i| i % opts.completion_workers == c)
                    .map(|i| (i / queues, i % queues))
                    .collect();
                completion_handles.push(
                    std::thread::Builder::new()
                        .name(format!("complete-{c}"))
                        .spawn(move || {
                            let mut empty_rounds = 0u32;
                            loop {
                                let mut swept = false;
                                for &(shard, qi) in &owned {
                                    while let Some(e) = ctx.storage.cq(shard, qi).pop() {
                                        ctx.scatter(shard, e.cmd_id, e.status);
                                        swept = true;
                                    }
                                }
                                if swept {
                                    empty_rounds = 0;
                                    continue;
                                }
                                if shutdown.load(Ordering::Acquire) {
                                    return;
                                }
                                empty_rounds = empty_rounds.saturating_add(1);
                                if empty_rounds < 64 {
                                    std::thread::yield_now();
                                } else {
                                    std::thread::sleep(Duration::from_micros(20));
                                }
                            }
                        })
                        .expect("spawn completion worker"),
                );
            }
        }

        IoStack {
            storage,
            layout,
            pending,
            counters,
            opts,
            budget_tx,
            budget_rx,
            job_tx,
            submit_handles,
            completion_handles,
            shutdown,
            audit,
        }
    }

    pub fn storage(&self) -> &Arc<StorageEngine> {
        &self.storage
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn audit(&self) -> Option<&Arc<CommandAudit>> {
        self.audit.as_ref()
    }

    pub fn is_sync(&self) -> bool {
        self.opts.sync_io
    }

    fn ctx(&self) -> WorkerCtx {
        WorkerCtx {
            storage: Arc::clone(&self.storage),
            layout: self.layout,
            pending: Arc::clone(&self.pending),
            counters: Arc::clone(&self.counters),
            audit: self.audit.clone(),
            budget_tx: self.budget_tx.clone(),
        }
    }

    /// Asynchronous miss extraction: registers the expected completions, then
    /// partitions the misses evenly across the submission pool. Returns once
    /// every command has been pushed; completions scatter in the background
    /// and are awaited through `batch`.
    pub fn submit_misses(
        &self,
        misses: &[(u64, u32)],
        block: &Arc<RowBlock>,
        batch: &Arc<BatchIoState>,
    ) -> usize {
        assert!(!self.opts.sync_io, "submit_misses is the async path");
        let n = misses.len();
        batch.add_expected(n);
        if n == 0 {
            return 0;
        }
        let workers = self.opts.submitter_workers;
        let per = n.div_ceil(workers);
        let (done_tx, done_rx) = bounded(workers);
        let mut jobs = 0;
        for (w, chunk) in misses.chunks(per).enumerate() {
            self.job_tx[w]
                .send(SubmitJob {
                    items: chunk.to_vec(),
                    block: Arc::clone(block),
                    batch: Some(Arc::clone(batch)),
                    done: done_tx.clone(),
                })
                .expect("submit pool alive");
            jobs += 1;
        }
        for _ in 0..jobs {
            done_rx.recv().expect("submit job ack");
        }
        n
    }

    /// Synchronous ablation: each worker handles one command at a time,
    /// spin-polling its own completion queue between submission and scatter.
    pub fn sync_io_extract(
        &self,
        misses: &[(u64, u32)],
        block: &Arc<RowBlock>,
        batch: &Arc<BatchIoState>,
    ) -> usize {
        assert!(self.opts.sync_io, "sync_io_extract requires sync mode");
        let n = misses.len();
        batch.add_expected(n);
        if n == 0 {
            return 0;
        }
        let workers = self.opts.submitter_workers;
        let per = n.div_ceil(workers);
        std::thread::scope(|s| {
            for (w, chunk) in misses.chunks(per).enumerate() {
                let ctx = self.ctx();
                let block = Arc::clone(block);
                let batch = Arc::clone(batch);
                s.spawn(move || {
                    for &(vid, row) in chunk {
                        sync_one(&ctx, w, vid, &block, row, Some(&batch));
                    }
                });
            }
        });
        n
    }

    /// Waits until no commands are in flight.
    pub fn drain(&self) {
        let start = Instant::now();
        while self.counters.inflight.load(Ordering::Acquire) != 0 {
            assert!(
                start.elapsed() < Duration::from_secs(60),
                "IO drain timed out with {} commands in flight",
                self.counters.inflight.load(Ordering::Acquire)
            );
            std::thread::sleep(Duration::from_micros(50));
        }
    }

    /// Duration-based uniform-random read benchmark. Returns sustained
    /// commands per second measured after `warmup`.
    pub fn run_bench(
        &self,
        num_vertices: u64,
        seed: u64,
        warmup: Duration,
        measure: Duration,
    ) -> BenchStats {
        let scratch = Arc::new(RowBlock::new_reusable(
            self.storage.iobuf().num_slots() as u32,
            self.layout.dim as u32,
        ));
        let workers = self.opts.submitter_workers;
        let started = Instant::now();
        let measure_from = started + warmup;
        let deadline = measure_from + measure;
        let start_snap = Mutex::new(None);
        let end_snap = Mutex::new(None);

        std::thread::scope(|s| {
            for w in 0..workers {
                let ctx = self.ctx();
                let scratch = Arc::clone(&scratch);
                let budget = self.budget_rx[w].clone();
                let counters = Arc::clone(&self.counters);
                let sync = self.opts.sync_io;
                s.spawn(move || {
                    let mut rng = RngStream::new(
                        seed,
                        Purpose::BenchIo,
                        StreamKey {
                            salt: w as u64,
                            ..Default::default()
                        },
                    );
                    loop {
                        if Instant::now() >= deadline {
                            return;
                        }
                        let vid = rng.next_below(num_vertices);
                        if sync {
                            // Scratch rows keyed by worker keep sync scatters disjoint.
                            sync_one(&ctx, w, vid, &scratch, w as u32, None);
                        } else {
                            if budget.try_recv().is_err() {
                                counters.flow_control_waits.fetch_add(1, Ordering::Relaxed);
                                match budget.recv_timeout(Duration::from_millis(20)) {
                                    Ok(()) => {}
                                    Err(RecvTimeoutError::Timeout) => continue,
                                    Err(RecvTimeoutError::Disconnected) => return,
                                }
                            }
                            // The slot index doubles as the scratch row, so
                            // concurrent scatters stay disjoint.
                            let slot = ctx.acquire_slot();
                            ctx.submit_with_slot(w as u32, vid, slot, &scratch, slot, None, true);
                        }
                    }
                });
            }
            // Sampler thread: snapshot counters at the warmup mark and again
            // at the deadline so the window is exact.
            let counters = Arc::clone(&self.counters);
            let start_snap = &start_snap;
            let end_snap = &end_snap;
            s.spawn(move || {
                let now = Instant::now();
                if measure_from > now {
                    std::thread::sleep(measure_from - now);
                }
                *start_snap.lock() = Some(counters.snapshot());
                let now = Instant::now();
                if deadline > now {
                    std::thread::sleep(deadline - now);
                }
                *end_snap.lock() = Some(counters.snapshot());
            });
        });

        self.drain();
        let start = start_snap.lock().take().unwrap_or_default();
        let end = end_snap.lock().take().unwrap_or_default();
        let delta = end.delta_since(&start);
        let secs = measure.as_secs_f64();
        BenchStats {
            commands: delta.scattered,
            cmds_per_sec: delta.scattered as f64 / secs,
            bytes_per_sec: delta.bytes_read as f64 / secs,
            measured_secs: secs,
            counters: delta,
        }
    }

    /// Stops pools after in-flight work drains.
    pub fn shutdown(&mut self) {
        self.drain();
        self.job_tx.clear();
        for h in self.submit_handles.drain(..) {
            let _ = h.join();
        }
        self.shutdown.store(true, Ordering::Release);
        for h in self.completion_handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for IoStack {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Coupled submit-poll-scatter of a single command, the unit of the sync
/// ablation. The worker owns completion queue column `w` on every shard.
fn sync_one(
    ctx: &WorkerCtx,
    w: usize,
    vid: u64,
    block: &Arc<RowBlock>,
    row: u32,
    batch: Option<&Arc<BatchIoState>>,
) {
    let cmd = ctx.submit_one(w as u32, vid, block, row, batch, false);
    let queues = ctx.storage.queues_per_shard();
    let cq = ctx.storage.cq(cmd.shard as usize, w % queues);
    ctx.counters.coupled_polls.fetch_add(1, Ordering::Relaxed);
    let entry = loop {
        match cq.pop() {
            Some(e) => break e,
            None => std::thread::yield_now(),
        }
    };
    assert_eq!(entry.cmd_id, cmd.cmd_id, "sync worker owns its queue column");
    let ok = entry.status == IoStatus::Ok;
    if ok {
        let payload = unsafe { ctx.storage.iobuf().slot(cmd.dest_slot) };
        block.write_row_le_bytes(row, payload);
    }
    ctx.storage.iobuf().release(cmd.dest_slot);
    if let Some(audit) = &ctx.audit {
        audit.reaped.lock().push((cmd.shard, cmd.cmd_id));
    }
    ctx.counters.scattered.fetch_add(1, Ordering::Relaxed);
    ctx.counters.record_inflight_down();
    if let Some(b) = batch {
        b.complete_one(ok);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchStats {
    pub commands: u64,
    pub cmds_per_sec: f64,
    pub bytes_per_sec: f64,
    pub measured_secs: f64,
    pub counters: crate::metrics::CounterSnapshot,
}
