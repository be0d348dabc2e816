//! Heterogeneous two-tier static feature cache.
//!
//! One pre-sampling epoch counts how often each vertex appears in the
//! deduplicated per-batch feature-request sets. Vertices are then ranked by
//! that hotness (ties broken by ascending id): the hottest features fill the
//! fast tier, the next-hottest fill the slow tier, and the rest stay on the
//! shard devices. The directory is immutable during training, so lookups can
//! run from any number of workers without coordination.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{EngineError, Result};
use crate::feature::ShardFiles;
use crate::graph::{CsrTopology, VertexId};
use crate::iostack::RowBlock;
use crate::rng::Purpose;
use crate::sampler::{dedup_assign, make_seed_batches, sample_hop};

/// Per-vertex access counters from one pre-sampling epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HotnessTable {
    counts: Vec<u64>,
}

const HOTNESS_MAGIC: &[u8; 4] = b"THOT";

impl HotnessTable {
    pub fn zeros(num_vertices: u64) -> Self {
        HotnessTable {
            counts: vec![0; num_vertices as usize],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        HotnessTable { counts }
    }

    pub fn count(&self, v: VertexId) -> u64 {
        self.counts[v.0 as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Vertex ids sorted by descending hotness, ties by ascending id.
    pub fn ranked(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = (0..self.counts.len() as u64).collect();
        ids.sort_by(|&a, &b| {
            self.counts[b as usize]
                .cmp(&self.counts[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }

    /// Sidecar format: magic `THOT`, vertex count, then one u64 LE counter
    /// per vertex.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| EngineError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(HOTNESS_MAGIC).map_err(|e| EngineError::io(path, e))?;
        w.write_all(&(self.counts.len() as u64).to_le_bytes())
            .map_err(|e| EngineError::io(path, e))?;
        for &c in &self.counts {
            w.write_all(&c.to_le_bytes()).map_err(|e| EngineError::io(path, e))?;
        }
        w.flush().map_err(|e| EngineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| EngineError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| EngineError::io(path, e))?;
        if &magic != HOTNESS_MAGIC {
            return Err(EngineError::format(path, "bad magic, not a hotness sidecar"));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|e| EngineError::io(path, e))?;
        let n = u64::from_le_bytes(buf) as usize;
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|e| EngineError::io(path, e))?;
        Ok(HotnessTable {
            counts: raw
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

/// Runs one epoch of sampling purely to collect hotness statistics.
///
/// Uses its own purpose stream so training epochs draw exactly the same
/// numbers whether or not pre-sampling ran. A vertex appearing several times
/// within one batch counts once: hotness predicts fetch traffic, and the
/// extraction stage fetches each vertex once per batch.
pub fn presample_hotness(
    topo: &CsrTopology,
    train_set: &[u64],
    batch_size: usize,
    fanouts: &[usize],
    seed: u64,
) -> HotnessTable {
    let mut table = HotnessTable::zeros(topo.num_vertices());
    let batches = make_seed_batches(train_set, batch_size, seed, Purpose::Presample, 0);
    for (batch_id, seeds) in batches.iter().enumerate() {
        let mut frontier = seeds.clone();
        let mut hop_outputs = Vec::with_capacity(fanouts.len());
        for (h, &fanout) in fanouts.iter().enumerate() {
            let (edges, next) = sample_hop(
                topo,
                &frontier,
                fanout,
                seed,
                Purpose::Presample,
                0,
                batch_id as u64,
                h as u64 + 1,
            );
            hop_outputs.push(edges);
            frontier = next;
        }
        let (unique, _) = dedup_assign(seeds, &hop_outputs);
        for v in unique {
            table.counts[v as usize] += 1;
        }
    }
    table
}

/// Location of one vertex's feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Fast(u32),
    Slow(u32),
    Disk,
}

/// Immutable placement map plus the tier stores it points into.
pub struct CacheDirectory {
    tags: Vec<Location>,
    fast: TierStore,
    slow: TierStore,
    dim: usize,
}

/// One tier's feature payload, indexed by the directory offsets.
struct TierStore {
    data: Vec<f32>,
}

impl TierStore {
    fn row(&self, offset: u32, dim: usize) -> &[f32] {
        let at = offset as usize * dim;
        &self.data[at..at + dim]
    }
}

/// How a deduplicated request list splits across tiers. Row assignments ride
/// along so hits can be copied and misses submitted without re-lookups.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Partition {
    pub fast_hits: Vec<(u64, u32)>,
    pub slow_hits: Vec<(u64, u32)>,
    pub misses: Vec<(u64, u32)>,
}

impl CacheDirectory {
    /// Places features by descending hotness: fast tier until the next
    /// feature would overflow `fast_cap_bytes`, then slow tier likewise, then
    /// disk. Cached payloads are copied out of the shard files.
    pub fn init(
        hotness: &HotnessTable,
        source: &ShardFiles,
        fast_cap_bytes: u64,
        slow_cap_bytes: u64,
    ) -> Result<CacheDirectory> {
        let dim = source.layout().dim;
        let feature_bytes = source.layout().feature_bytes() as u64;
        let num_vertices = hotness.len() as u64;

        let fast_slots = (fast_cap_bytes / feature_bytes).min(num_vertices) as usize;
        let slow_slots = (slow_cap_bytes / feature_bytes).min(num_vertices) as usize;

        let ranked = hotness.ranked();
        let mut tags = vec![Location::Disk; num_vertices as usize];
        let mut fast = Vec::with_capacity(fast_slots * dim);
        let mut slow = Vec::with_capacity(slow_slots.min(ranked.len().saturating_sub(fast_slots)) * dim);

        let mut row = vec![0f32; dim];
        for (rank, &v) in ranked.iter().enumerate() {
            if rank < fast_slots {
                source.read_feature_into(VertexId(v), &mut row)?;
                tags[v as usize] = Location::Fast((rank) as u32);
                fast.extend_from_slice(&row);
            } else if rank < fast_slots + slow_slots {
                source.read_feature_into(VertexId(v), &mut row)?;
                tags[v as usize] = Location::Slow((rank - fast_slots) as u32);
                slow.extend_from_slice(&row);
            } else {
                break;
            }
        }

        Ok(CacheDirectory {
            tags,
            fast: TierStore { data: fast },
            slow: TierStore { data: slow },
            dim,
        })
    }

    /// An all-disk directory, the NoCache ablation.
    pub fn disabled(num_vertices: u64, dim: usize) -> CacheDirectory {
        CacheDirectory {
            tags: vec![Location::Disk; num_vertices as usize],
            fast: TierStore { data: Vec::new() },
            slow: TierStore { data: Vec::new() },
            dim,
        }
    }

    pub fn location(&self, v: VertexId) -> Location {
        self.tags[v.0 as usize]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fast_count(&self) -> usize {
        self.fast.data.len() / self.dim.max(1)
    }

    pub fn slow_count(&self) -> usize {
        self.slow.data.len() / self.dim.max(1)
    }

    /// Cached bytes for `v`, if it is resident in either tier.
    pub fn cached_feature(&self, v: VertexId) -> Option<&[f32]> {
        match self.location(v) {
            Location::Fast(off) => Some(self.fast.row(off, self.dim)),
            Location::Slow(off) => Some(self.slow.row(off, self.dim)),
            Location::Disk => None,
        }
    }

    /// Splits a deduplicated `(vertex, output_row)` list by directory tag,
    /// preserving row assignments and relative order.
    pub fn lookup_partition(&self, requests: &[(u64, u32)]) -> Partition {
        let mut p = Partition::default();
        for &(v, row) in requests {
            match self.tags[v as usize] {
                Location::Fast(_) => p.fast_hits.push((v, row)),
                Location::Slow(_) => p.slow_hits.push((v, row)),
                Location::Disk => p.misses.push((v, row)),
            }
        }
        p
    }

    /// Copies tier hits into their output rows. Rows are disjoint, so callers
    /// may fan this out over workers.
    pub fn copy_hits(&self, hits: &[(u64, u32)], block: &Arc<RowBlock>) {
        for &(v, row) in hits {
            let feature = self
                .cached_feature(VertexId(v))
                .expect("copy_hits called with a non-resident vertex");
            block.write_row(row, feature);
        }
    }

    /// Scans the directory against the hotness table and panics on a tier
    /// ordering violation. Test and audit hook.
    pub fn assert_tier_ordering(&self, hotness: &HotnessTable) {
        let mut min_fast = u64::MAX;
        let mut max_slow = 0u64;
        let mut max_disk = 0u64;
        let mut has_slow = false;
        let mut has_disk = false;
        for (v, tag) in self.tags.iter().enumerate() {
            let h = hotness.counts()[v];
            match tag {
                Location::Fast(_) => min_fast = min_fast.min(h),
                Location::Slow(_) => {
                    max_slow = max_slow.max(h);
                    has_slow = true;
                }
                Location::Disk => {
                    max_disk = max_disk.max(h);
                    has_disk = true;
                }
            }
        }
        if has_slow {
            assert!(
                min_fast == u64::MAX || min_fast >= max_slow,
                "fast tier min hotness {min_fast} below slow tier max {max_slow}"
            );
        }
        if has_disk {
            let cached_floor = if has_slow { max_slow } else { min_fast };
            assert!(
                cached_floor == u64::MAX || cached_floor >= max_disk || self.slow_count() + self.fast_count() == 0,
                "disk-resident vertex hotter than cached tier"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{synth_feature, write_shard_files, FeatureLayout};
    use crate::graph::CsrTopology;

    fn star_graph(leaves: u64) -> CsrTopology {
        // center 0 -> 1..=leaves, leaves point back to 0
        let n = leaves + 1;
        let mut indptr = vec![0u64];
        let mut indices: Vec<u64> = (1..=leaves).collect();
        indptr.push(leaves);
        for _ in 1..=leaves {
            indices.push(0);
            indptr.push(indices.len() as u64);
        }
        CsrTopology::new(n, indptr, indices).unwrap()
    }

    fn shard_fixture(num_vertices: u64, dim: usize) -> (tempfile::TempDir, ShardFiles) {
        let dir = tempfile::tempdir().unwrap();
        let layout = FeatureLayout::new(dim, 512, 2).unwrap();
        write_shard_files(dir.path(), num_vertices, &layout).unwrap();
        let files = ShardFiles::open(dir.path(), layout).unwrap();
        (dir, files)
    }

    #[test]
    fn star_presample_counts_full_neighborhood() {
        let g = star_graph(5);
        let table = presample_hotness(&g, &[0], 8, &[10], 1);
        assert_eq!(table.count(VertexId(0)), 1);
        for v in 1..=5 {
            assert_eq!(table.count(VertexId(v)), 1, "leaf {v}");
        }
    }

    #[test]
    fn presample_is_deterministic() {
        let g = star_graph(8);
        let train: Vec<u64> = (0..9).collect();
        let a = presample_hotness(&g, &train, 4, &[2, 2], 99);
        let b = presample_hotness(&g, &train, 4, &[2, 2], 99);
        assert_eq!(a, b);
    }

    #[test]
    fn hotness_sidecar_round_trip() {
        let table = HotnessTable::from_counts(vec![5, 0, 3, 1 << 40]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.thot");
        table.save(&path).unwrap();
        assert_eq!(HotnessTable::load(&path).unwrap(), table);
    }

    #[test]
    fn ranked_breaks_ties_by_ascending_id() {
        let table = HotnessTable::from_counts(vec![3, 5, 3, 1]);
        assert_eq!(table.ranked(), vec![1, 0, 2, 3]);
    }

    #[test]
    fn init_fills_tiers_in_hotness_order() {
        let (_dir, files) = shard_fixture(3, 4);
        let hotness = HotnessTable::from_counts(vec![1, 5, 3]); // b=1 hottest, c=2, a=0
        let feature_bytes = 16;
        let dir = CacheDirectory::init(&hotness, &files, feature_bytes, feature_bytes).unwrap();
        assert!(matches!(dir.location(VertexId(1)), Location::Fast(_)));
        assert!(matches!(dir.location(VertexId(2)), Location::Slow(_)));
        assert!(matches!(dir.location(VertexId(0)), Location::Disk));
        dir.assert_tier_ordering(&hotness);
    }

    #[test]
    fn zero_caps_leave_everything_on_disk() {
        let (_dir, files) = shard_fixture(5, 4);
        let hotness = HotnessTable::from_counts(vec![5, 4, 3, 2, 1]);
        let dir = CacheDirectory::init(&hotness, &files, 0, 0).unwrap();
        for v in 0..5 {
            assert_eq!(dir.location(VertexId(v)), Location::Disk);
        }
    }

    #[test]
    fn cached_bytes_equal_shard_bytes() {
        let (_dir, files) = shard_fixture(10, 8);
        let hotness = HotnessTable::from_counts((0..10).rev().collect());
        let dir = CacheDirectory::init(&hotness, &files, 3 * 32, 4 * 32).unwrap();
        for v in 0..10u64 {
            if let Some(cached) = dir.cached_feature(VertexId(v)) {
                assert_eq!(cached, files.read_feature(VertexId(v)).unwrap(), "vertex {v}");
            }
        }
        assert_eq!(dir.fast_count(), 3);
        assert_eq!(dir.slow_count(), 4);
    }

    #[test]
    fn partition_matches_sequential_tag_filter() {
        let (_dir, files) = shard_fixture(100, 4);
        let hotness = HotnessTable::from_counts((0..100).map(|v| (v * 7919) % 100).collect());
        let dir = CacheDirectory::init(&hotness, &files, 20 * 16, 30 * 16).unwrap();

        let requests: Vec<(u64, u32)> = (0..100u64).map(|v| (v, v as u32)).collect();
        let p = dir.lookup_partition(&requests);

        let mut expect = Partition::default();
        for &(v, row) in &requests {
            match dir.location(VertexId(v)) {
                Location::Fast(_) => expect.fast_hits.push((v, row)),
                Location::Slow(_) => expect.slow_hits.push((v, row)),
                Location::Disk => expect.misses.push((v, row)),
            }
        }
        assert_eq!(p, expect);
        assert_eq!(
            p.fast_hits.len() + p.slow_hits.len() + p.misses.len(),
            requests.len()
        );
    }

    #[test]
    fn all_fast_has_no_misses_and_all_disk_has_no_hits() {
        let (_dir, files) = shard_fixture(4, 4);
        let hotness = HotnessTable::from_counts(vec![1; 4]);
        let requests: Vec<(u64, u32)> = (0..4u64).map(|v| (v, v as u32)).collect();

        let all_fast = CacheDirectory::init(&hotness, &files, 4 * 16, 0).unwrap();
        let p = all_fast.lookup_partition(&requests);
        assert!(p.misses.is_empty() && p.slow_hits.is_empty());

        let all_disk = CacheDirectory::disabled(4, 4);
        let p = all_disk.lookup_partition(&requests);
        assert!(p.fast_hits.is_empty() && p.slow_hits.is_empty());
        assert_eq!(p.misses.len(), 4);
    }

    #[test]
    fn copy_hits_writes_oracle_bytes() {
        let (_dir, files) = shard_fixture(6, 4);
        let hotness = HotnessTable::from_counts(vec![6, 5, 4, 3, 2, 1]);
        let dir = CacheDirectory::init(&hotness, &files, 2 * 16, 2 * 16).unwrap();
        let block = Arc::new(RowBlock::new(0, 4, 4));
        let p = dir.lookup_partition(&[(0, 0), (1, 1), (2, 2), (3, 3)]);
        dir.copy_hits(&p.fast_hits, &block);
        dir.copy_hits(&p.slow_hits, &block);
        for v in 0..4u64 {
            assert_eq!(block.row(v as u32), synth_feature(VertexId(v), files.layout()));
        }
        // copy_hits with no hits is a no-op
        dir.copy_hits(&[], &block);
    }
}
