//! Virtual NVMe-like shard devices with submission/completion ring queues.
//!
//! Each shard owns one device worker thread and a paired set of SQ/CQ rings,
//! one pair per submitter worker. Commands carry the logical block address
//! and the IO-buffer slot the payload lands in; completions flow back on the
//! CQ paired with the SQ the command was consumed from.

mod device;
mod iobuf;
mod ring;

pub use device::DeviceModel;
pub use iobuf::IoBuffer;
pub use ring::{QueueFull, Ring};

use std::fs::File;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{EngineError, Result};
use crate::feature::{shard_file_name, FeatureLayout};
use crate::metrics::Counters;

/// One read command flowing through a submission queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoCommand {
    pub cmd_id: u64,
    pub shard: u32,
    pub lba: u64,
    pub num_blocks: u32,
    pub dest_slot: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoStatus {
    Ok,
    ReadError,
}

/// Completion entry posted by the device worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEntry {
    pub cmd_id: u64,
    pub status: IoStatus,
}

pub type SubmissionQueue = Ring<IoCommand>;
pub type CompletionQueue = Ring<CompletionEntry>;

struct ShardQueues {
    sqs: Vec<Arc<SubmissionQueue>>,
    cqs: Vec<Arc<CompletionQueue>>,
}

/// All shard devices of a run: rings, IO buffer, device worker threads.
pub struct StorageEngine {
    shards: Vec<ShardQueues>,
    iobuf: Arc<IoBuffer>,
    model: DeviceModel,
    layout: FeatureLayout,
    next_cmd_id: AtomicU64,
    shutdown: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

pub struct StorageOptions {
    pub queue_depth: usize,
    pub queues_per_shard: usize,
    pub io_slots: usize,
    pub model: DeviceModel,
}

impl StorageEngine {
    /// Opens the shard backing files under `dir` and starts one device worker
    /// per shard.
    pub fn open(
        dir: &Path,
        layout: FeatureLayout,
        num_vertices: u64,
        opts: StorageOptions,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        let slot_size = layout.padded_bytes();
        let iobuf = Arc::new(IoBuffer::new(opts.io_slots, slot_size));
        let shutdown = Arc::new(AtomicBool::new(false));

        let mut shards = Vec::with_capacity(layout.num_shards);
        let mut workers = Vec::with_capacity(layout.num_shards);
        for shard in 0..layout.num_shards {
            let sqs: Vec<_> = (0..opts.queues_per_shard)
                .map(|_| Arc::new(Ring::new(opts.queue_depth)))
                .collect();
            let cqs: Vec<_> = (0..opts.queues_per_shard)
                .map(|_| Arc::new(Ring::new(opts.queue_depth)))
                .collect();

            let path = dir.join(shard_file_name(shard));
            let file = File::open(&path).map_err(|e| EngineError::io(&path, e))?;
            let num_blocks =
                layout.shard_feature_count(num_vertices, shard) * layout.blocks_per_feature as u64;

            let worker = device::ShardWorker {
                sqs: sqs.clone(),
                cqs: cqs.clone(),
                file,
                num_blocks,
                block_size: layout.block_size,
                model: opts.model,
                iobuf: Arc::clone(&iobuf),
                counters: Arc::clone(&counters),
                shutdown: Arc::clone(&shutdown),
            };
            workers.push(
                std::thread::Builder::new()
                    .name(format!("shard-dev-{shard}"))
                    .spawn(move || worker.run())
                    .expect("spawn device worker"),
            );
            shards.push(ShardQueues { sqs, cqs });
        }

        Ok(StorageEngine {
            shards,
            iobuf,
            model: opts.model,
            layout,
            next_cmd_id: AtomicU64::new(1),
            shutdown,
            workers,
        })
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn model(&self) -> &DeviceModel {
        &self.model
    }

    pub fn iobuf(&self) -> &Arc<IoBuffer> {
        &self.iobuf
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn queues_per_shard(&self) -> usize {
        self.shards[0].sqs.len()
    }

    pub fn alloc_cmd_id(&self) -> u64 {
        self.next_cmd_id.fetch_add(1, Ordering::Relaxed)
    }

    pub fn sq(&self, shard: usize, queue: usize) -> &Arc<SubmissionQueue> {
        &self.shards[shard].sqs[queue]
    }

    pub fn cq(&self, shard: usize, queue: usize) -> &Arc<CompletionQueue> {
        &self.shards[shard].cqs[queue]
    }

    /// Aggregate service ceiling over all shards, commands per second.
    pub fn theoretical_max_cmds_per_sec(&self) -> f64 {
        self.model.max_commands_per_sec() * self.shards.len() as f64
    }

    /// Stops device workers once their queues drain and joins them.
    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::Release);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StorageEngine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{self, synth_feature};
    use crate::graph::VertexId;
    use std::time::{Duration, Instant};

    fn test_engine(
        dir: &Path,
        num_vertices: u64,
        shards: usize,
        latency: Duration,
        parallelism: usize,
    ) -> (StorageEngine, Arc<Counters>) {
        let layout = FeatureLayout::new(16, 512, shards).unwrap();
        feature::write_shard_files(dir, num_vertices, &layout).unwrap();
        let counters = Arc::new(Counters::default());
        let engine = StorageEngine::open(
            dir,
            layout,
            num_vertices,
            StorageOptions {
                queue_depth: 64,
                queues_per_shard: 2,
                io_slots: 128,
                model: DeviceModel {
                    service_latency: latency,
                    internal_parallelism: parallelism,
                },
            },
            Arc::clone(&counters),
        )
        .unwrap();
        (engine, counters)
    }

    fn poll_one(cq: &CompletionQueue, timeout: Duration) -> CompletionEntry {
        let start = Instant::now();
        loop {
            if let Some(e) = cq.pop() {
                return e;
            }
            assert!(start.elapsed() < timeout, "timed out polling CQ");
            std::thread::yield_now();
        }
    }

    #[test]
    fn single_command_respects_latency_floor_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let latency = Duration::from_millis(1);
        let (engine, _) = test_engine(dir.path(), 32, 1, latency, 4);

        let v = VertexId(7);
        let addr = engine.layout().vertex_to_block(v);
        let slot = engine.iobuf().acquire().unwrap();
        let cmd = IoCommand {
            cmd_id: engine.alloc_cmd_id(),
            shard: addr.shard as u32,
            lba: addr.lba,
            num_blocks: engine.layout().blocks_per_feature as u32,
            dest_slot: slot,
        };
        let start = Instant::now();
        engine.sq(addr.shard, 0).push(cmd).unwrap();
        let entry = poll_one(engine.cq(addr.shard, 0), Duration::from_secs(5));
        let elapsed = start.elapsed();

        assert_eq!(entry.cmd_id, cmd.cmd_id);
        assert_eq!(entry.status, IoStatus::Ok);
        assert!(elapsed >= latency, "completed after {elapsed:?}, floor {latency:?}");

        let payload = unsafe { engine.iobuf().slot(slot) };
        let expect = feature::feature_to_block_bytes(&synth_feature(v, engine.layout()), engine.layout());
        assert_eq!(payload, &expect[..], "payload must equal backing-file bytes");
        engine.iobuf().release(slot);
    }

    #[test]
    fn two_waves_of_service() {
        // 64 commands, parallelism 32, latency 1 ms: two waves, ~2 ms total.
        let dir = tempfile::tempdir().unwrap();
        let latency = Duration::from_millis(1);
        let (engine, _) = test_engine(dir.path(), 64, 1, latency, 32);

        let mut slots = Vec::new();
        let start = Instant::now();
        for v in 0..64u64 {
            let addr = engine.layout().vertex_to_block(VertexId(v));
            let slot = engine.iobuf().acquire().unwrap();
            slots.push(slot);
            engine
                .sq(0, 0)
                .push(IoCommand {
                    cmd_id: engine.alloc_cmd_id(),
                    shard: 0,
                    lba: addr.lba,
                    num_blocks: 1,
                    dest_slot: slot,
                })
                .unwrap();
        }
        let mut got = 0;
        while got < 64 {
            if engine.cq(0, 0).pop().is_some() {
                got += 1;
            } else {
                std::thread::yield_now();
            }
        }
        let elapsed = start.elapsed();
        let expect = Duration::from_millis(2);
        assert!(
            elapsed >= expect.mul_f64(0.8) && elapsed <= expect.mul_f64(1.2) + Duration::from_millis(1),
            "two waves took {elapsed:?}, expected about {expect:?}"
        );
        for s in slots {
            engine.iobuf().release(s);
        }
    }

    #[test]
    fn out_of_range_lba_posts_read_error() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, _) = test_engine(dir.path(), 8, 1, Duration::from_micros(100), 4);
        let slot = engine.iobuf().acquire().unwrap();
        engine
            .sq(0, 0)
            .push(IoCommand {
                cmd_id: engine.alloc_cmd_id(),
                shard: 0,
                lba: 10_000,
                num_blocks: 1,
                dest_slot: slot,
            })
            .unwrap();
        let entry = poll_one(engine.cq(0, 0), Duration::from_secs(5));
        assert_eq!(entry.status, IoStatus::ReadError);
        engine.iobuf().release(slot);
    }

    #[test]
    fn submit_reconcile_multiset_across_queues() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, counters) = test_engine(dir.path(), 256, 2, Duration::from_micros(50), 16);
        let total = 256usize; // queue_depth * 4
        let mut submitted = Vec::new();
        let mut received = Vec::new();
        let mut next_v = 0u64;
        let mut slot_of = std::collections::HashMap::new();
        let deadline = Instant::now() + Duration::from_secs(30);
        while received.len() < total {
            assert!(Instant::now() < deadline, "reconciliation timed out");
            if submitted.len() < total {
                if let Some(slot) = engine.iobuf().acquire() {
                    let v = VertexId(next_v % 256);
                    next_v += 1;
                    let addr = engine.layout().vertex_to_block(v);
                    let cmd = IoCommand {
                        cmd_id: engine.alloc_cmd_id(),
                        shard: addr.shard as u32,
                        lba: addr.lba,
                        num_blocks: 1,
                        dest_slot: slot,
                    };
                    let queue = (cmd.cmd_id % 2) as usize;
                    if engine.sq(addr.shard, queue).push(cmd).is_ok() {
                        submitted.push(cmd.cmd_id);
                        slot_of.insert(cmd.cmd_id, slot);
                    } else {
                        engine.iobuf().release(slot);
                    }
                }
            }
            for shard in 0..2 {
                for queue in 0..2 {
                    while let Some(e) = engine.cq(shard, queue).pop() {
                        assert_eq!(e.status, IoStatus::Ok);
                        engine.iobuf().release(slot_of.remove(&e.cmd_id).unwrap());
                        received.push(e.cmd_id);
                    }
                }
            }
        }
        let mut a = submitted.clone();
        let mut b = received.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b, "completions multiset equals submissions multiset");
        assert_eq!(counters.snapshot().completed, total as u64);
    }
}
