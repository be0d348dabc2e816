//! Graph topology in compressed sparse row form, plus its on-disk format.
//!
//! The topology is the structure that lives resident in the slow tier for the
//! whole run; training only ever reads it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{EngineError, Result};

/// Vertex ordinal. Valid ids are `0..num_vertices` of the owning graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexId(pub u64);

impl From<u64> for VertexId {
    fn from(v: u64) -> Self {
        VertexId(v)
    }
}

/// Compressed sparse row adjacency.
#[derive(Debug, Clone)]
pub struct CsrTopology {
    num_vertices: u64,
    indptr: Vec<u64>,
    indices: Vec<u64>,
}

const TOPOLOGY_MAGIC: &[u8; 4] = b"TSTO";
const TOPOLOGY_VERSION: u32 = 1;

impl CsrTopology {
    /// Validates and wraps raw CSR arrays.
    pub fn new(num_vertices: u64, indptr: Vec<u64>, indices: Vec<u64>) -> Result<Self> {
        if indptr.len() as u64 != num_vertices + 1 {
            return Err(EngineError::Topology(format!(
                "indptr has {} entries, expected {}",
                indptr.len(),
                num_vertices + 1
            )));
        }
        if indptr[0] != 0 {
            return Err(EngineError::Topology("indptr[0] must be 0".into()));
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(EngineError::Topology("indptr must be non-decreasing".into()));
        }
        if *indptr.last().unwrap() != indices.len() as u64 {
            return Err(EngineError::Topology(format!(
                "indptr ends at {} but indices has {} entries",
                indptr.last().unwrap(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&v| v >= num_vertices) {
            return Err(EngineError::Topology(format!(
                "neighbor id {bad} out of range (num_vertices = {num_vertices})"
            )));
        }
        Ok(CsrTopology {
            num_vertices,
            indptr,
            indices,
        })
    }

    pub fn num_vertices(&self) -> u64 {
        self.num_vertices
    }

    pub fn num_edges(&self) -> u64 {
        self.indices.len() as u64
    }

    #[inline]
    pub fn degree(&self, v: VertexId) -> u64 {
        self.indptr[v.0 as usize + 1] - self.indptr[v.0 as usize]
    }

    #[inline]
    pub fn neighbors(&self, v: VertexId) -> &[u64] {
        let lo = self.indptr[v.0 as usize] as usize;
        let hi = self.indptr[v.0 as usize + 1] as usize;
        &self.indices[lo..hi]
    }

    /// Checks that `(src, dst)` is an edge of the topology.
    pub fn has_edge(&self, src: VertexId, dst: VertexId) -> bool {
        self.neighbors(src).contains(&dst.0)
    }

    /// Resident size of the CSR arrays, used for slow-tier budgeting.
    pub fn resident_bytes(&self) -> u64 {
        (self.indptr.len() + self.indices.len()) as u64 * 8
    }

    /// Writes the binary topology file: magic `TSTO`, version, counts, then
    /// `indptr` and `indices` as little-endian u64.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| EngineError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| EngineError::io(path, e));
        emit(TOPOLOGY_MAGIC)?;
        emit(&TOPOLOGY_VERSION.to_le_bytes())?;
        emit(&self.num_vertices.to_le_bytes())?;
        emit(&self.num_edges().to_le_bytes())?;
        for &x in &self.indptr {
            emit(&x.to_le_bytes())?;
        }
        for &x in &self.indices {
            emit(&x.to_le_bytes())?;
        }
        w.flush().map_err(|e| EngineError::io(path, e))
    }

    /// Reads and validates a topology file written by [`write_file`].
    ///
    /// [`write_file`]: CsrTopology::write_file
    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EngineError::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| EngineError::io(path, e))?;
        if &magic != TOPOLOGY_MAGIC {
            return Err(EngineError::format(path, "bad magic, not a topology file"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| EngineError::io(path, e))?;
        let version = u32::from_le_bytes(u32buf);
        if version != TOPOLOGY_VERSION {
            return Err(EngineError::format(path, format!("unsupported version {version}")));
        }
        let num_vertices = read_u64(&mut r, path)?;
        let num_edges = read_u64(&mut r, path)?;
        let indptr = read_u64_vec(&mut r, num_vertices as usize + 1, path)?;
        let indices = read_u64_vec(&mut r, num_edges as usize, path)?;
        CsrTopology::new(num_vertices, indptr, indices)
    }
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| EngineError::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u64_vec(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<u64>> {
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw).map_err(|e| EngineError::io(path, e))?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_csr() -> CsrTopology {
        // 0 -> {1, 2}, 1 -> {2}, 2 -> {}
        CsrTopology::new(3, vec![0, 2, 3, 3], vec![1, 2, 2]).unwrap()
    }

    #[test]
    fn neighbors_and_degrees() {
        let g = small_csr();
        assert_eq!(g.neighbors(VertexId(0)), &[1, 2]);
        assert_eq!(g.neighbors(VertexId(1)), &[2]);
        assert_eq!(g.neighbors(VertexId(2)), &[] as &[u64]);
        assert_eq!(g.degree(VertexId(0)), 2);
        assert_eq!(g.degree(VertexId(2)), 0);
    }

    #[test]
    fn rejects_decreasing_indptr() {
        let err = CsrTopology::new(3, vec![0, 2, 1, 3], vec![1, 2, 2]);
        assert!(matches!(err, Err(EngineError::Topology(_))));
    }

    #[test]
    fn rejects_nonzero_start() {
        let err = CsrTopology::new(2, vec![1, 1, 2], vec![0, 1]);
        assert!(matches!(err, Err(EngineError::Topology(_))));
    }

    #[test]
    fn rejects_out_of_range_neighbor() {
        let err = CsrTopology::new(2, vec![0, 1, 2], vec![0, 5]);
        assert!(matches!(err, Err(EngineError::Topology(_))));
    }

    #[test]
    fn rejects_indptr_indices_mismatch() {
        let err = CsrTopology::new(2, vec![0, 1, 3], vec![0, 1]);
        assert!(matches!(err, Err(EngineError::Topology(_))));
    }

    #[test]
    fn file_round_trip() {
        let g = small_csr();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topo.tsto");
        g.write_file(&path).unwrap();
        let back = CsrTopology::read_file(&path).unwrap();
        assert_eq!(back.num_vertices(), g.num_vertices());
        assert_eq!(back.indptr, g.indptr);
        assert_eq!(back.indices, g.indices);
    }

    #[test]
    fn read_rejects_garbage_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOPE0000000000000000000000").unwrap();
        assert!(matches!(
            CsrTopology::read_file(&path),
            Err(EngineError::Format { .. })
        ));
    }
}
