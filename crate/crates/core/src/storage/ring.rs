//! Bounded lock-free ring queue used for both submission and completion
//! queues.
//!
//! Multiple producers reserve slots by CAS on the tail; each queue has
//! exactly one consumer, which is the part of the NVMe queue-pair discipline
//! the engine relies on (the device drains its SQs, one completion worker
//! drains each CQ). Slot sequence numbers make a producer's payload write
//! visible only after it is fully written, and prevent a producer from
//! overwriting an entry the consumer has not taken.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicU64, Ordering};

struct Slot<T> {
    sequence: AtomicU64,
    value: UnsafeCell<MaybeUninit<T>>,
}

/// Fixed-capacity multi-producer single-consumer ring.
pub struct Ring<T> {
    slots: Box<[Slot<T>]>,
    mask: u64,
    tail: AtomicU64,
    head: AtomicU64,
}

unsafe impl<T: Send> Send for Ring<T> {}
unsafe impl<T: Send> Sync for Ring<T> {}

/// Push failed because `tail - head` reached the queue depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueFull<T>(pub T);

impl<T: Copy> Ring<T> {
    pub fn new(depth: usize) -> Self {
        assert!(depth.is_power_of_two(), "queue depth must be a power of two");
        let slots = (0..depth)
            .map(|i| Slot {
                sequence: AtomicU64::new(i as u64),
                value: UnsafeCell::new(MaybeUninit::uninit()),
            })
            .collect();
        Ring {
            slots,
            mask: depth as u64 - 1,
            tail: AtomicU64::new(0),
            head: AtomicU64::new(0),
        }
    }

    pub fn depth(&self) -> usize {
        self.mask as usize + 1
    }

    /// Entries currently unconsumed. Approximate under concurrency.
    pub fn len(&self) -> usize {
        let tail = self.tail.load(Ordering::Acquire);
        let head = self.head.load(Ordering::Acquire);
        tail.saturating_sub(head) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-producer push. FIFO per queue; fails when the ring is full.
    pub fn push(&self, value: T) -> Result<(), QueueFull<T>> {
        let mut tail = self.tail.load(Ordering::Relaxed);
        loop {
            let slot = &self.slots[(tail & self.mask) as usize];
            let seq = slot.sequence.load(Ordering::Acquire);
            if seq == tail {
                // Slot free at this position; try to claim it.
                match self.tail.compare_exchange_weak(
                    tail,
                    tail + 1,
                    Ordering::Relaxed,
                    Ordering::Relaxed,
                ) {
                    Ok(_) => {
                        unsafe { (*slot.value.get()).write(value) };
                        slot.sequence.store(tail + 1, Ordering::Release);
                        return Ok(());
                    }
                    Err(current) => tail = current,
                }
            } else if seq < tail {
                // Consumer has not freed this slot: ring is full.
                return Err(QueueFull(value));
            } else {
                // Another producer claimed this position; move on.
                tail = self.tail.load(Ordering::Relaxed);
            }
        }
    }

    /// Single-consumer pop of the oldest unconsumed entry.
    ///
    /// Must only ever be called by the queue's one consumer; two racing
    /// consumers would observe duplicated entries.
    pub fn pop(&self) -> Option<T> {
        let head = self.head.load(Ordering::Relaxed);
        let slot = &self.slots[(head & self.mask) as usize];
        let seq = slot.sequence.load(Ordering::Acquire);
        if seq == head + 1 {
            let value = unsafe { (*slot.value.get()).assume_init() };
            // Free the slot for the producer one lap ahead.
            slot.sequence.store(head + self.mask + 1, Ordering::Release);
            self.head.store(head + 1, Ordering::Release);
            Some(value)
        } else {
            None
        }
    }
}
