//! Output feature matrix storage.
//!
//! Rows are assigned level by level as sampling discovers new vertices, so the
//! matrix is built from per-level blocks with stable addresses. Every row is
//! written exactly once per batch, by exactly one of: fast-tier copy,
//! slow-tier copy, or IO scatter. Per-row fill flags enforce that discipline
//! and feed the end-of-batch audit.

use std::sync::atomic::{AtomicBool, Ordering};

/// A contiguous block of output rows, written concurrently on disjoint rows.
pub struct RowBlock {
    base_row: u32,
    rows: u32,
    dim: u32,
    data: *mut f32,
    /// One flag per row; `None` for reusable scratch blocks (IO benchmark).
    flags: Option<Box<[AtomicBool]>>,
}

unsafe impl Send for RowBlock {}
unsafe impl Sync for RowBlock {}

impl RowBlock {
    pub fn new(base_row: u32, rows: u32, dim: u32) -> Self {
        let flags = (0..rows).map(|_| AtomicBool::new(false)).collect();
        Self::alloc(base_row, rows, dim, Some(flags))
    }

    /// A block whose rows may be overwritten; used as scatter scratch by the
    /// raw IO benchmark where rows are recycled continuously.
    pub fn new_reusable(rows: u32, dim: u32) -> Self {
        Self::alloc(0, rows, dim, None)
    }

    fn alloc(base_row: u32, rows: u32, dim: u32, flags: Option<Box<[AtomicBool]>>) -> Self {
        let data =
            Box::into_raw(vec![0f32; rows as usize * dim as usize].into_boxed_slice()) as *mut f32;
        RowBlock {
            base_row,
            rows,
            dim,
            data,
            flags,
        }
    }

    pub fn base_row(&self) -> u32 {
        self.base_row
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    #[inline]
    fn mark_filled(&self, row: u32) {
        if let Some(flags) = &self.flags {
            let was = flags[row as usize].swap(true, Ordering::Release);
            assert!(!was, "row {row} written twice (base {})", self.base_row);
        }
    }

    /// Writes a full row from `f32` values.
    pub fn write_row(&self, row: u32, values: &[f32]) {
        assert!(row < self.rows);
        assert_eq!(values.len(), self.dim as usize);
        unsafe {
            std::ptr::copy_nonoverlapping(
                values.as_ptr(),
                self.data.add(row as usize * self.dim as usize),
                self.dim as usize,
            );
        }
        self.mark_filled(row);
    }

    /// Writes a full row by decoding little-endian `f32` payload bytes, as
    /// delivered in IO buffer slots.
    pub fn write_row_le_bytes(&self, row: u32, bytes: &[u8]) {
        assert!(row < self.rows);
        let dim = self.dim as usize;
        assert!(bytes.len() >= dim * 4);
        unsafe {
            let dst = self.data.add(row as usize * dim);
            for (j, chunk) in bytes[..dim * 4].chunks_exact(4).enumerate() {
                *dst.add(j) = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        self.mark_filled(row);
    }

    /// Reads a row. Only valid after the writer has been synchronized with,
    /// which the batch-completion protocol provides.
    pub fn row(&self, row: u32) -> &[f32] {
        assert!(row < self.rows);
        unsafe {
            std::slice::from_raw_parts(self.data.add(row as usize * self.dim as usize), self.dim as usize)
        }
    }

    pub fn filled_count(&self) -> u32 {
        match &self.flags {
            Some(flags) => flags.iter().filter(|f| f.load(Ordering::Acquire)).count() as u32,
            None => self.rows,
        }
    }

    pub fn all_filled(&self) -> bool {
        self.filled_count() == self.rows
    }
}

impl Drop for RowBlock {
    fn drop(&mut self) {
        unsafe {
            drop(Box::from_raw(std::slice::from_raw_parts_mut(
                self.data,
                self.rows as usize * self.dim as usize,
            )));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let block = RowBlock::new(10, 3, 4);
        block.write_row(1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(block.row(1), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(block.filled_count(), 1);
        assert!(!block.all_filled());
    }

    #[test]
    fn le_bytes_decode() {
        let block = RowBlock::new(0, 1, 2);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&0.25f32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]); // trailing pad is ignored
        block.write_row_le_bytes(0, &bytes);
        assert_eq!(block.row(0), &[0.5, 0.25]);
    }

    #[test]
    #[should_panic(expected = "written twice")]
    fn double_write_panics() {
        let block = RowBlock::new(0, 1, 1);
        block.write_row(0, &[1.0]);
        block.write_row(0, &[2.0]);
    }

    #[test]
    fn reusable_block_allows_rewrites() {
        let block = RowBlock::new_reusable(1, 1);
        block.write_row(0, &[1.0]);
        block.write_row(0, &[2.0]);
        assert_eq!(block.row(0), &[2.0]);
        assert!(block.all_filled());
    }
}
