//! Synthetic dataset generation: topology, shard feature files, and the
//! dataset manifest. Everything is a pure function of the generation seed, so
//! repeated runs produce byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::feature::{write_shard_files, FeatureLayout};
use crate::graph::CsrTopology;
use crate::rng::{Purpose, RngStream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DegreeDistribution {
    /// Every vertex gets exactly `avg_degree` out-neighbors.
    Uniform,
    /// Degrees drawn from a truncated Pareto with the given exponent, scaled
    /// so the mean lands near `avg_degree`.
    Powerlaw { alpha: f64 },
}

/// What to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_vertices: u64,
    pub avg_degree: u64,
    pub distribution: DegreeDistribution,
    pub dim: usize,
    pub block_size: usize,
    pub num_shards: usize,
    pub seed: u64,
}

/// Manifest written next to the generated files and embedded in run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_vertices: u64,
    pub num_edges: u64,
    pub avg_degree: u64,
    pub distribution: DegreeDistribution,
    pub dim: usize,
    pub block_size: usize,
    pub num_shards: usize,
    pub seed: u64,
}

pub const TOPOLOGY_FILE: &str = "topology.tsto";
pub const META_FILE: &str = "meta.toml";
pub const HOTNESS_FILE: &str = "hotness.thot";

impl DatasetMeta {
    pub fn layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::new(self.dim, self.block_size, self.num_shards)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| EngineError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| EngineError::format(&path, e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(META_FILE);
        let text = toml::to_string_pretty(self).expect("meta serializes");
        std::fs::write(&path, text).map_err(|e| EngineError::io(&path, e))?;
        Ok(path)
    }

    /// The training vertex set: a uniform fraction of all vertices, selected
    /// with the dataset seed so it is a property of the dataset, not the run.
    pub fn train_set(&self, fraction: f64) -> Vec<u64> {
        let count = ((self.num_vertices as f64 * fraction).ceil() as u64)
            .clamp(1, self.num_vertices) as usize;
        let mut ids: Vec<u64> = (0..self.num_vertices).collect();
        let mut rng = RngStream::new(self.seed, Purpose::TrainSetSelect, StreamKey::default());
        rng.shuffle(&mut ids);
        ids.truncate(count);
        ids.sort_unstable();
        ids
    }
}

/// Builds the topology for a spec without touching disk.
pub fn build_topology(spec: &DatasetSpec) -> Result<CsrTopology> {
    if spec.num_vertices < 2 {
        return Err(EngineError::Config("need at least 2 vertices".into()));
    }
    if spec.avg_degree == 0 {
        return Err(EngineError::Config("avg_degree must be positive".into()));
    }
    let n = spec.num_vertices;
    let mut degree_rng = RngStream::new(spec.seed, Purpose::DatasetGen, StreamKey::default());

    let degrees: Vec<u64> = match spec.distribution {
        DegreeDistribution::Uniform => vec![spec.avg_degree; n as usize],
        DegreeDistribution::Powerlaw { alpha } => {
            if alpha <= 1.0 {
                return Err(EngineError::Config("powerlaw alpha must be > 1".into()));
            }
            // Pareto with x_min chosen so the (untruncated) mean is avg_degree.
            let x_min = spec.avg_degree as f64 * (alpha - 1.0) / alpha;
            let cap = (n - 1).min(spec.avg_degree.saturating_mul(1000));
            (0..n)
                .map(|_| {
                    let u = 1.0 - degree_rng.next_f64(); // (0, 1]
                    let d = (x_min * u.powf(-1.0 / alpha)).floor() as u64;
                    d.clamp(1, cap)
                })
                .collect()
        }
    };

    let mut indptr = Vec::with_capacity(n as usize + 1);
    indptr.push(0u64);
    let mut total = 0u64;
    for &d in &degrees {
        total += d;
        indptr.push(total);
    }

    let mut indices = Vec::with_capacity(total as usize);
    for v in 0..n {
        let mut rng = RngStream::new(
            spec.seed,
            Purpose::DatasetGen,
            StreamKey {
                salt: v + 1,
                ..Default::default()
            },
        );
        for _ in 0..degrees[v as usize] {
            // Uniform endpoint, excluding self loops.
            let mut u = rng.next_below(n);
            while u == v {
                u = rng.next_below(n);
            }
            indices.push(u);
        }
    }

    CsrTopology::new(n, indptr, indices)
}

/// Generates topology, shard feature files, and the manifest under `dir`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetMeta> {
    std::fs::create_dir_all(dir).map_err(|e| EngineError::io(dir, e))?;
    let layout = FeatureLayout::new(spec.dim, spec.block_size, spec.num_shards)?;
    let topo = build_topology(spec)?;
    topo.write_file(&dir.join(TOPOLOGY_FILE))?;
    write_shard_files(dir, spec.num_vertices, &layout)?;
    let meta = DatasetMeta {
        num_vertices: spec.num_vertices,
        num_edges: topo.num_edges(),
        avg_degree: spec.avg_degree,
        distribution: spec.distribution,
        dim: spec.dim,
        block_size: spec.block_size,
        num_shards: spec.num_shards,
        seed: spec.seed,
    };
    meta.save(dir)?;
    Ok(meta)
}
