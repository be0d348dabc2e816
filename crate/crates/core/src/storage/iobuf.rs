//! Temporary IO buffer: fixed-size slots that hold feature payloads between
//! device service and the scatter into the output matrix.

use crossbeam::queue::ArrayQueue;

/// Slot pool. A slot is owned by at most one in-flight command: the submitter
/// acquires it, the device fills it, the completion worker reads it and
/// releases it back to the pool.
pub struct IoBuffer {
    data: *mut u8,
    slot_size: usize,
    num_slots: usize,
    free: ArrayQueue<u32>,
}

unsafe impl Send for IoBuffer {}
unsafe impl Sync for IoBuffer {}

impl IoBuffer {
    pub fn new(num_slots: usize, slot_size: usize) -> Self {
        assert!(num_slots > 0 && slot_size > 0);
        let data = Box::into_raw(vec![0u8; num_slots * slot_size].into_boxed_slice()) as *mut u8;
        let free = ArrayQueue::new(num_slots);
        for i in 0..num_slots {
            free.push(i as u32).unwrap();
        }
        IoBuffer {
            data,
            slot_size,
            num_slots,
            free,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn slot_size(&self) -> usize {
        self.slot_size
    }

    pub fn free_slots(&self) -> usize {
        self.free.len()
    }

    /// Takes a free slot, or `None` if all are in flight.
    pub fn acquire(&self) -> Option<u32> {
        self.free.pop()
    }

    /// Returns a slot to the pool once its payload has been consumed.
    pub fn release(&self, slot: u32) {
        self.free
            .push(slot)
            .expect("slot released twice or foreign slot");
    }

    /// Mutable view of a slot's bytes.
    ///
    /// # Safety
    /// The caller must be the slot's unique owner (between `acquire` and
    /// `release`), and device/consumer handoff must be ordered through a
    /// queue, which the engine's SQ/CQ protocol guarantees.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn slot_mut(&self, slot: u32) -> &mut [u8] {
        debug_assert!((slot as usize) < self.num_slots);
        std::slice::from_raw_parts_mut(self.data.add(slot as usize * self.slot_size), self.slot_size)
    }

    /// Read-only view of a slot's bytes. Same ownership contract as
    /// [`slot_mut`](IoBuffer::slot_mut).
    pub unsafe fn slot(&self, slot: u32) -> &[u8] {
        debug_assert!((slot as usize) < self.num_slots);
        std::slice::from_raw_parts(self.data.add(slot as usize * self.slot_size), self.slot_size)
    }
}

impl Drop for IoBuffer {
    fn drop(&mut self) {
        unsafe {
            drop(Box::from_raw(std::slice::from_raw_parts_mut(
                self.data,
                self.num_slots * self.slot_size,
            )));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_are_disjoint() {
        let buf = IoBuffer::new(4, 16);
        let a = buf.acquire().unwrap();
        let b = buf.acquire().unwrap();
        assert_ne!(a, b);
        unsafe {
            buf.slot_mut(a).fill(0xAA);
            buf.slot_mut(b).fill(0xBB);
            assert!(buf.slot(a).iter().all(|&x| x == 0xAA));
            assert!(buf.slot(b).iter().all(|&x| x == 0xBB));
        }
        buf.release(a);
        buf.release(b);
    }

    #[test]
    fn exhausts_and_recycles() {
        let buf = IoBuffer::new(2, 8);
        let a = buf.acquire().unwrap();
        let _b = buf.acquire().unwrap();
        assert_eq!(buf.acquire(), None);
        buf.release(a);
        assert!(buf.acquire().is_some());
    }
}
