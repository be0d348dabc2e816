//! Routing state for in-flight commands: which output row a completion
//! scatters to, and per-batch outstanding counts.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use super::matrix::RowBlock;

/// Where a completed command's payload goes.
pub struct PendingEntry {
    pub block: Arc<RowBlock>,
    pub row: u32,
    pub dest_slot: u32,
    pub worker: u32,
    pub batch: Option<Arc<BatchIoState>>,
}

const PENDING_SHARDS: usize = 64;

/// Map from `cmd_id` to scatter destination, sharded by command id so
/// completion workers land on disjoint shards instead of one hot lock.
pub struct PendingTable {
    shards: Vec<Mutex<HashMap<u64, PendingEntry>>>,
}

impl PendingTable {
    pub fn new() -> Self {
        PendingTable {
            shards: (0..PENDING_SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
        }
    }

    #[inline]
    fn shard(&self, cmd_id: u64) -> &Mutex<HashMap<u64, PendingEntry>> {
        &self.shards[(cmd_id % PENDING_SHARDS as u64) as usize]
    }

    /// Must be called before the command's SQ push.
    pub fn insert(&self, cmd_id: u64, entry: PendingEntry) {
        let prev = self.shard(cmd_id).lock().insert(cmd_id, entry);
        debug_assert!(prev.is_none(), "cmd_id {cmd_id} reused while in flight");
    }

    pub fn remove(&self, cmd_id: u64) -> Option<PendingEntry> {
        self.shard(cmd_id).lock().remove(&cmd_id)
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.iter().all(|s| s.lock().is_empty())
    }
}

impl Default for PendingTable {
    fn default() -> Self {
        Self::new()
    }
}

/// Outstanding-IO tracking for one mini-batch.
///
/// Misses are registered stage by stage (`add_expected` before each hop's
/// submissions), the batch is sealed once the last stage has registered, and
/// batch-complete fires exactly once, when the count reaches zero after
/// sealing.
pub struct BatchIoState {
    outstanding: AtomicI64,
    sealed: AtomicBool,
    failed: AtomicBool,
    lock: Mutex<()>,
    cond: Condvar,
}

impl BatchIoState {
    pub fn new() -> Arc<Self> {
        Arc::new(BatchIoState {
            outstanding: AtomicI64::new(0),
            sealed: AtomicBool::new(false),
            failed: AtomicBool::new(false),
            lock: Mutex::new(()),
            cond: Condvar::new(),
        })
    }

    /// Registers `n` expected completions. Must precede their submission.
    pub fn add_expected(&self, n: usize) {
        debug_assert!(!self.sealed.load(Ordering::Acquire), "add_expected after seal");
        self.outstanding.fetch_add(n as i64, Ordering::AcqRel);
    }

    /// Marks one completion scattered. `ok = false` records a device error.
    pub fn complete_one(&self, ok: bool) {
        if !ok {
            self.failed.store(true, Ordering::Release);
        }
        let prev = self.outstanding.fetch_sub(1, Ordering::AcqRel);
        debug_assert!(prev > 0, "more completions than expected");
        if prev == 1 && self.sealed.load(Ordering::Acquire) {
            let _g = self.lock.lock();
            self.cond.notify_all();
        }
    }

    /// Declares that no further stages will register work.
    pub fn seal(&self) {
        self.sealed.store(true, Ordering::Release);
        if self.outstanding.load(Ordering::Acquire) == 0 {
            let _g = self.lock.lock();
            self.cond.notify_all();
        }
    }

    pub fn is_done(&self) -> bool {
        self.sealed.load(Ordering::Acquire) && self.outstanding.load(Ordering::Acquire) == 0
    }

    pub fn outstanding(&self) -> i64 {
        self.outstanding.load(Ordering::Acquire)
    }

    /// Blocks until all sealed work has completed. Returns `false` if any
    /// completion carried a device error.
    pub fn wait(&self) -> bool {
        let mut g = self.lock.lock();
        while !self.is_done() {
            self.cond.wait(&mut g);
        }
        !self.failed.load(Ordering::Acquire)
    }
}
