//! Virtual shard device: consumes submission queues, services reads against a
//! backing file under a fixed-latency bounded-parallelism model, and posts
//! completions to the paired completion queues.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::metrics::Counters;

use super::iobuf::IoBuffer;
use super::ring::Ring;
use super::{CompletionEntry, IoCommand, IoStatus};

/// Service model: each command takes `service_latency` and at most
/// `internal_parallelism` commands are in service at once, so steady-state
/// throughput per shard is `internal_parallelism / service_latency`.
#[derive(Debug, Clone, Copy)]
pub struct DeviceModel {
    pub service_latency: Duration,
    pub internal_parallelism: usize,
}

impl DeviceModel {
    pub fn max_commands_per_sec(&self) -> f64 {
        self.internal_parallelism as f64 / self.service_latency.as_secs_f64()
    }
}

pub(super) struct ShardWorker {
    pub sqs: Vec<Arc<Ring<IoCommand>>>,
    pub cqs: Vec<Arc<Ring<CompletionEntry>>>,
    pub file: File,
    pub num_blocks: u64,
    pub block_size: usize,
    pub model: DeviceModel,
    pub iobuf: Arc<IoBuffer>,
    pub counters: Arc<Counters>,
    pub shutdown: Arc<AtomicBool>,
}

struct InService {
    cmd: IoCommand,
    queue: usize,
}

// Only start sleeping when the next deadline is comfortably far; wake early
// and spin the rest so service times stay accurate under scheduler noise.
const SLEEP_THRESHOLD: Duration = Duration::from_micros(400);
const SLEEP_SLACK: Duration = Duration::from_micros(200);

impl ShardWorker {
    pub fn run(mut self) {
        let mut in_service: BinaryHeap<Reverse<(Instant, u64)>> = BinaryHeap::new();
        let mut by_tag: std::collections::HashMap<u64, InService> = std::collections::HashMap::new();
        let mut rr_cursor = 0usize;
        let mut idle_rounds = 0u32;

        loop {
            let now = Instant::now();

            // Complete everything whose service time has elapsed.
            while let Some(&Reverse((deadline, tag))) = in_service.peek() {
                if deadline > now {
                    break;
                }
                in_service.pop();
                let entry = by_tag.remove(&tag).expect("in-service entry");
                self.service(entry.cmd, entry.queue);
            }

            // Refill service slots from the submission queues, round-robin.
            let mut admitted = false;
            while in_service.len() < self.model.internal_parallelism {
                match self.next_command(&mut rr_cursor) {
                    Some((cmd, queue)) => {
                        let deadline = Instant::now() + self.model.service_latency;
                        in_service.push(Reverse((deadline, cmd.cmd_id)));
                        by_tag.insert(cmd.cmd_id, InService { cmd, queue });
                        admitted = true;
                    }
                    None => break,
                }
            }
            if admitted {
                idle_rounds = 0;
            }

            match in_service.peek() {
                Some(&Reverse((deadline, _))) => {
                    idle_rounds = 0;
                    let now = Instant::now();
                    if deadline > now + SLEEP_THRESHOLD {
                        std::thread::sleep(deadline - now - SLEEP_SLACK);
                    } else {
                        std::thread::yield_now();
                    }
                }
                None => {
                    if self.shutdown.load(Ordering::Acquire) && self.sqs_empty() {
                        return;
                    }
                    // Nothing in service and nothing queued: back off gently so
                    // idle shards do not burn the cores the engine needs.
                    idle_rounds = idle_rounds.saturating_add(1);
                    if idle_rounds < 64 {
                        std::thread::yield_now();
                    } else {
                        std::thread::sleep(Duration::from_micros(50));
                    }
                }
            }
        }
    }

    fn sqs_empty(&self) -> bool {
        self.sqs.iter().all(|q| q.is_empty())
    }

    fn next_command(&mut self, cursor: &mut usize) -> Option<(IoCommand, usize)> {
        let n = self.sqs.len();
        for i in 0..n {
            let qi = (*cursor + i) % n;
            if let Some(cmd) = self.sqs[qi].pop() {
                *cursor = (qi + 1) % n;
                return Some((cmd, qi));
            }
        }
        None
    }

    fn service(&self, cmd: IoCommand, queue: usize) {
        let status = if cmd.lba + cmd.num_blocks as u64 > self.num_blocks {
            IoStatus::ReadError
        } else {
            let len = cmd.num_blocks as usize * self.block_size;
            let dst = unsafe { &mut self.iobuf.slot_mut(cmd.dest_slot)[..len] };
            match self.file.read_exact_at(dst, cmd.lba * self.block_size as u64) {
                Ok(()) => {
                    self.counters
                        .bytes_read
                        .fetch_add(len as u64, Ordering::Relaxed);
                    IoStatus::Ok
                }
                Err(_) => IoStatus::ReadError,
            }
        };
        let entry = CompletionEntry {
            cmd_id: cmd.cmd_id,
            status,
        };
        // The paired CQ can be momentarily full if the reaper is behind;
        // hold the completion until space frees up.
        let mut entry = entry;
        loop {
            match self.cqs[queue].push(entry) {
                Ok(()) => break,
                Err(super::ring::QueueFull(e)) => {
                    entry = e;
                    std::thread::yield_now();
                }
            }
        }
        self.counters.completed.fetch_add(1, Ordering::Relaxed);
    }
}
