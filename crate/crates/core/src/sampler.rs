//! Mini-batch seed generation and k-hop random neighbor sampling.
//!
//! Each vertex's draw at a given hop uses a stream keyed by
//! `(epoch, batch, hop, vertex)`, so the sampled subgraph is a pure function
//! of the seed and never depends on worker scheduling.

use std::collections::{HashMap, HashSet};

use crate::graph::{CsrTopology, VertexId};
use crate::rng::{Purpose, RngStream, StreamKey};

/// Shuffles the training set with the epoch's seed stream and chunks it into
/// consecutive batches; the last batch may be smaller.
pub fn make_seed_batches(
    train_set: &[u64],
    batch_size: usize,
    seed: u64,
    purpose: Purpose,
    epoch: u64,
) -> Vec<Vec<u64>> {
    assert!(!train_set.is_empty(), "train set must be non-empty");
    let mut shuffled = train_set.to_vec();
    let mut rng = RngStream::new(
        seed,
        purpose,
        StreamKey {
            epoch,
            ..Default::default()
        },
    );
    rng.shuffle(&mut shuffled);
    shuffled.chunks(batch_size).map(<[u64]>::to_vec).collect()
}

/// Samples up to `fanout` distinct neighbors for every frontier vertex.
///
/// Vertices with degree at most `fanout` emit all their neighbors; larger
/// neighborhoods are sampled without replacement by a partial Fisher-Yates
/// pass over the adjacency slice. Returns the sampled edges in emission order
/// and the deduplicated next frontier.
#[allow(clippy::too_many_arguments)]
pub fn sample_hop(
    topo: &CsrTopology,
    frontier: &[u64],
    fanout: usize,
    seed: u64,
    purpose: Purpose,
    epoch: u64,
    batch: u64,
    hop: u64,
) -> (Vec<(u64, u64)>, Vec<u64>) {
    let mut edges = Vec::new();
    let mut next = Vec::new();
    let mut seen = HashSet::new();
    for &v in frontier {
        let neighbors = topo.neighbors(VertexId(v));
        if neighbors.len() <= fanout {
            for &u in neighbors {
                edges.push((v, u));
                if seen.insert(u) {
                    next.push(u);
                }
            }
        } else {
            let mut rng = RngStream::new(
                seed,
                purpose,
                StreamKey {
                    epoch,
                    batch,
                    hop,
                    salt: v,
                },
            );
            let mut pool: Vec<u64> = neighbors.to_vec();
            let d = pool.len();
            for i in 0..fanout {
                let j = i + rng.next_below((d - i) as u64) as usize;
                pool.swap(i, j);
                let u = pool[i];
                edges.push((v, u));
                if seen.insert(u) {
                    next.push(u);
                }
            }
        }
    }
    (edges, next)
}

/// Incremental first-occurrence deduplication with stable row assignment.
///
/// Levels are fed in order (seeds, hop 1 emissions, hop 2 emissions, ...); a
/// vertex keeps the row from its first appearance no matter how many hops
/// sample it again.
#[derive(Debug, Default)]
pub struct BatchAssembly {
    row_of: HashMap<u64, u32>,
    unique: Vec<u64>,
    level_bases: Vec<u32>,
}

impl BatchAssembly {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one level's emissions (duplicates welcome) and returns the
    /// vertices that are new to this batch, with their assigned rows.
    pub fn add_level(&mut self, emitted: &[u64]) -> Vec<(u64, u32)> {
        self.level_bases.push(self.unique.len() as u32);
        let mut fresh = Vec::new();
        for &v in emitted {
            if !self.row_of.contains_key(&v) {
                let row = self.unique.len() as u32;
                self.row_of.insert(v, row);
                self.unique.push(v);
                fresh.push((v, row));
            }
        }
        fresh
    }

    pub fn row(&self, v: u64) -> Option<u32> {
        self.row_of.get(&v).copied()
    }

    pub fn unique(&self) -> &[u64] {
        &self.unique
    }

    pub fn num_rows(&self) -> u32 {
        self.unique.len() as u32
    }

    pub fn level_base(&self, level: usize) -> u32 {
        self.level_bases[level]
    }
}

/// One-shot deduplication over seeds plus all hop outputs; the convenience
/// form of [`BatchAssembly`] used when the whole batch is already sampled.
pub fn dedup_assign(seeds: &[u64], hop_outputs: &[Vec<(u64, u64)>]) -> (Vec<u64>, HashMap<u64, u32>) {
    let mut assembly = BatchAssembly::new();
    assembly.add_level(seeds);
    for edges in hop_outputs {
        let emitted: Vec<u64> = edges.iter().map(|&(_, dst)| dst).collect();
        assembly.add_level(&emitted);
    }
    let BatchAssembly { row_of, unique, .. } = assembly;
    (unique, row_of)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CsrTopology;

    fn line_graph() -> CsrTopology {
        // 0 -> {1,2,3}, 1 -> {0}, 2 -> {}, 3 -> {0, 1}
        CsrTopology::new(4, vec![0, 3, 4, 4, 6], vec![1, 2, 3, 0, 0, 1]).unwrap()
    }

    #[test]
    fn batch_partition_arithmetic() {
        let batches = make_seed_batches(&[1, 2, 3, 4, 5], 2, 7, Purpose::SeedShuffle, 0);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn batches_are_a_permutation_and_deterministic() {
        let train: Vec<u64> = (0..100).collect();
        let a = make_seed_batches(&train, 100, 3, Purpose::SeedShuffle, 1);
        let b = make_seed_batches(&train, 100, 3, Purpose::SeedShuffle, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        let mut sorted = a[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, train);
        assert_ne!(a[0], train, "shuffle should move something");
    }

    #[test]
    fn different_epochs_shuffle_differently() {
        let train: Vec<u64> = (0..50).collect();
        let a = make_seed_batches(&train, 50, 3, Purpose::SeedShuffle, 0);
        let b = make_seed_batches(&train, 50, 3, Purpose::SeedShuffle, 1);
        assert_ne!(a, b);
    }

    #[test]
    fn small_degree_emits_all_neighbors() {
        let g = line_graph();
        let (edges, next) = sample_hop(&g, &[0], 10, 1, Purpose::Sample, 0, 0, 1);
        assert_eq!(edges, vec![(0, 1), (0, 2), (0, 3)]);
        assert_eq!(next, vec![1, 2, 3]);
    }

    #[test]
    fn isolated_vertex_emits_nothing() {
        let g = line_graph();
        let (edges, next) = sample_hop(&g, &[2], 5, 1, Purpose::Sample, 0, 0, 1);
        assert!(edges.is_empty());
        assert!(next.is_empty());
    }

    #[test]
    fn oversized_degree_samples_without_replacement() {
        // One hub with 40 neighbors.
        let n = 41u64;
        let indptr: Vec<u64> = std::iter::once(0)
            .chain(std::iter::repeat(40).take(n as usize))
            .collect();
        let indices: Vec<u64> = (1..=40).collect();
        let g = CsrTopology::new(n, indptr, indices).unwrap();
        let (edges, _) = sample_hop(&g, &[0], 10, 9, Purpose::Sample, 0, 0, 1);
        assert_eq!(edges.len(), 10);
        let dsts: HashSet<u64> = edges.iter().map(|&(_, d)| d).collect();
        assert_eq!(dsts.len(), 10, "no duplicates per (vertex, hop)");
        assert!(edges.iter().all(|&(s, d)| s == 0 && g.has_edge(VertexId(s), VertexId(d))));
    }

    #[test]
    fn sampling_is_deterministic_per_key() {
        let g = line_graph();
        let a = sample_hop(&g, &[0, 3], 2, 5, Purpose::Sample, 1, 2, 1);
        let b = sample_hop(&g, &[0, 3], 2, 5, Purpose::Sample, 1, 2, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn dedup_first_occurrence_order() {
        let (unique, rows) = dedup_assign(&[5], &[vec![(5, 9), (5, 5)]]);
        assert_eq!(unique, vec![5, 9]);
        assert_eq!(rows[&5], 0);
        assert_eq!(rows[&9], 1);
    }

    #[test]
    fn dedup_without_duplicates_preserves_concat_order() {
        let (unique, _) = dedup_assign(&[1, 2], &[vec![(1, 3), (2, 4)]]);
        assert_eq!(unique, vec![1, 2, 3, 4]);
    }

    #[test]
    fn dedup_matches_set_union_oracle() {
        let g = line_graph();
        let seeds = vec![0, 3];
        let (e1, f1) = sample_hop(&g, &seeds, 3, 11, Purpose::Sample, 0, 0, 1);
        let (e2, _) = sample_hop(&g, &f1, 3, 11, Purpose::Sample, 0, 0, 2);
        let (unique, rows) = dedup_assign(&seeds, &[e1.clone(), e2.clone()]);

        let mut oracle: HashSet<u64> = seeds.iter().copied().collect();
        oracle.extend(e1.iter().map(|&(_, d)| d));
        oracle.extend(e2.iter().map(|&(_, d)| d));
        assert_eq!(unique.len(), oracle.len());
        assert_eq!(unique.len(), rows.len());
        // Every edge endpoint has a row.
        for (s, d) in e1.iter().chain(e2.iter()) {
            assert!(rows.contains_key(s) && rows.contains_key(d));
        }
    }

    #[test]
    fn assembly_levels_track_bases() {
        let mut asm = BatchAssembly::new();
        let l0 = asm.add_level(&[10, 20]);
        assert_eq!(l0, vec![(10, 0), (20, 1)]);
        let l1 = asm.add_level(&[20, 30]);
        assert_eq!(l1, vec![(30, 2)]);
        assert_eq!(asm.level_base(0), 0);
        assert_eq!(asm.level_base(1), 2);
        assert_eq!(asm.unique(), &[10, 20, 30]);
    }
}
