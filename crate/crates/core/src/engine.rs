//! The assembled training engine: topology and cache residency, storage and
//! IO stack, per-batch operator implementations, and the epoch driver.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::cache::{presample_hotness, CacheDirectory, HotnessTable};
use crate::config::{EngineConfig, TrainerKind};
use crate::error::{EngineError, Result};
use crate::feature::{synth_feature, FeatureLayout, ShardFiles};
use crate::gen::{DatasetMeta, HOTNESS_FILE, TOPOLOGY_FILE};
use crate::graph::{CsrTopology, VertexId};
use crate::iostack::{BatchIoState, IoStack, IoStackOptions, RowBlock};
use crate::metrics::{
    combine_checksums, fnv1a, stage_totals_us, CounterSnapshot, Counters, RunRecord, SpanSink,
};
use crate::pipeline::{build_plan, execute, run_serial, Budget, OpKind, OpRunner, Operator};
use crate::rng::{mix64, Purpose};
use crate::sampler::{make_seed_batches, sample_hop, BatchAssembly};
use crate::storage::{DeviceModel, StorageEngine, StorageOptions};
use crate::trainer::{synthetic_train, train_step, BatchView, GnnVariant, ModelParams};

const LABEL_SALT: u64 = 0x6C61_6265_6C73; // "labels"

/// Deterministic synthetic class label for a vertex.
pub fn synthetic_label(v: u64, classes: usize) -> u32 {
    (mix64(v ^ LABEL_SALT) % classes as u64) as u32
}

/// Per-batch outputs kept for reports and equivalence checks. The feature
/// matrix itself is consumed by the train step.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub batch_id: u64,
    pub rows: u32,
    pub loss: Option<f32>,
    pub checksum: u64,
    pub unique: Vec<u64>,
}

/// One epoch's record plus its per-batch outputs.
pub struct EpochRun {
    pub record: RunRecord,
    pub batches: Vec<BatchResult>,
}

struct LevelData {
    /// Vertices first seen at this level, with their global rows.
    fresh: Vec<(u64, u32)>,
    frontier: Vec<u64>,
    block: Arc<RowBlock>,
    base: u32,
}

struct MiniBatchOut {
    unique: Vec<u64>,
    adj: Vec<Vec<u32>>,
    num_seeds: usize,
    checksum: u64,
    matrix: Mutex<Option<Vec<f32>>>,
}

/// All mutable state of one in-flight batch. Operators communicate through
/// write-once cells; the plan's dependency edges order every access.
struct BatchSlot {
    batch_id: u64,
    seeds: Vec<u64>,
    assembly: Mutex<BatchAssembly>,
    levels: Vec<OnceLock<LevelData>>,
    edges: Vec<OnceLock<Vec<(u64, u64)>>>,
    misses: Vec<OnceLock<Vec<(u64, u32)>>>,
    io: Arc<BatchIoState>,
    out: OnceLock<MiniBatchOut>,
}

impl BatchSlot {
    fn new(batch_id: u64, seeds: Vec<u64>, hops: usize, dim: u32) -> Self {
        let mut assembly = BatchAssembly::new();
        let fresh = assembly.add_level(&seeds);
        let block = Arc::new(RowBlock::new(0, fresh.len() as u32, dim));
        let slot = BatchSlot {
            batch_id,
            seeds,
            assembly: Mutex::new(assembly),
            levels: (0..=hops).map(|_| OnceLock::new()).collect(),
            edges: (0..hops).map(|_| OnceLock::new()).collect(),
            misses: (0..=hops).map(|_| OnceLock::new()).collect(),
            io: BatchIoState::new(),
            out: OnceLock::new(),
        };
        let frontier = slot.seeds.clone();
        slot.levels[0]
            .set(LevelData {
                fresh,
                frontier,
                block,
                base: 0,
            })
            .ok()
            .expect("level 0 set once");
        slot
    }

    fn level(&self, h: usize) -> &LevelData {
        self.levels[h].get().expect("level produced by plan order")
    }
}

/// The engine: everything needed to run epochs over one dataset under one
/// configuration.
pub struct Engine {
    cfg: EngineConfig,
    meta: DatasetMeta,
    layout: FeatureLayout,
    topo: Arc<CsrTopology>,
    cache: Arc<CacheDirectory>,
    hotness: Option<HotnessTable>,
    train_set: Vec<u64>,
    iostack: IoStack,
    counters: Arc<Counters>,
    params: Mutex<ModelParams<f32>>,
    data_dir: PathBuf,
}

impl Engine {
    pub fn new(data_dir: &Path, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let meta = DatasetMeta::load(data_dir)?;
        let layout = meta.layout()?;
        let topo = Arc::new(CsrTopology::read_file(&data_dir.join(TOPOLOGY_FILE))?);

        // The slow tier must hold the whole topology before any features.
        if let Some(total) = cfg.slow_tier_total_bytes {
            let need = topo.resident_bytes() + cfg.slow_tier_feature_bytes;
            if need > total {
                return Err(EngineError::Config(format!(
                    "slow tier of {total} bytes cannot hold topology ({}) plus feature budget ({})",
                    topo.resident_bytes(),
                    cfg.slow_tier_feature_bytes
                )));
            }
        }

        let train_set = meta.train_set(cfg.train_fraction);
        let shard_files = ShardFiles::open(data_dir, layout)?;

        let (cache, hotness) = if cfg.cache_enabled {
            let sidecar = data_dir.join(HOTNESS_FILE);
            let hotness = if sidecar.exists() {
                let loaded = HotnessTable::load(&sidecar)?;
                if loaded.len() as u64 != meta.num_vertices {
                    return Err(EngineError::format(&sidecar, "hotness table size mismatch"));
                }
                loaded
            } else {
                presample_hotness(&topo, &train_set, cfg.batch_size, &cfg.fanouts, cfg.seed)
            };
            let dir = CacheDirectory::init(
                &hotness,
                &shard_files,
                cfg.fast_tier_bytes,
                cfg.slow_tier_feature_bytes,
            )?;
            (Arc::new(dir), Some(hotness))
        } else {
            (
                Arc::new(CacheDirectory::disabled(meta.num_vertices, layout.dim)),
                None,
            )
        };

        let counters = Arc::new(Counters::default());
        let io_slots = 2 * cfg.submitter_workers * cfg.commands_per_worker;
        let storage = Arc::new(StorageEngine::open(
            data_dir,
            layout,
            meta.num_vertices,
            StorageOptions {
                queue_depth: cfg.queue_depth,
                queues_per_shard: cfg.submitter_workers,
                io_slots,
                model: DeviceModel {
                    service_latency: cfg.device_latency(),
                    internal_parallelism: cfg.device_parallelism,
                },
            },
            Arc::clone(&counters),
        )?);
        let iostack = IoStack::start(
            storage,
            Arc::clone(&counters),
            IoStackOptions {
                submitter_workers: cfg.submitter_workers,
                completion_workers: cfg.completion_workers,
                commands_per_worker: cfg.commands_per_worker,
                sync_io: cfg.sync_io,
                audit_commands: cfg.audit_commands,
            },
        );

        let params = Mutex::new(ModelParams::init(
            cfg.seed,
            layout.dim,
            cfg.hidden_dim,
            cfg.num_classes,
        ));

        Ok(Engine {
            cfg,
            meta,
            layout,
            topo,
            cache,
            hotness,
            train_set,
            iostack,
            counters,
            params,
            data_dir: data_dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn topology(&self) -> &Arc<CsrTopology> {
        &self.topo
    }

    pub fn cache(&self) -> &Arc<CacheDirectory> {
        &self.cache
    }

    pub fn hotness(&self) -> Option<&HotnessTable> {
        self.hotness.as_ref()
    }

    pub fn train_set(&self) -> &[u64] {
        &self.train_set
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn iostack(&self) -> &IoStack {
        &self.iostack
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Runs `cfg.epochs` training epochs.
    pub fn run(&self) -> Result<Vec<EpochRun>> {
        (0..self.cfg.epochs).map(|e| self.run_epoch(e)).collect()
    }

    /// Runs one epoch under the configured mode flags.
    pub fn run_epoch(&self, epoch: usize) -> Result<EpochRun> {
        let seed_batches = make_seed_batches(
            &self.train_set,
            self.cfg.batch_size,
            self.cfg.seed,
            Purpose::SeedShuffle,
            epoch as u64,
        );
        let num_batches = seed_batches.len() as u64;
        let hops = self.cfg.hops();
        let slots: Vec<Arc<BatchSlot>> = seed_batches
            .into_iter()
            .enumerate()
            .map(|(i, seeds)| Arc::new(BatchSlot::new(i as u64, seeds, hops, self.layout.dim as u32)))
            .collect();

        let sink = SpanSink::new();
        let start_counters = self.counters.snapshot();
        let start = Instant::now();

        let runner = EpochRunner {
            engine: self,
            epoch: epoch as u64,
            slots: &slots,
            results: Mutex::new(Vec::with_capacity(slots.len())),
        };

        let plan = build_plan(hops, self.cfg.pipeline_depth)?;
        let outcome = if self.cfg.pipeline_enabled && self.cfg.pipeline_depth > 1 {
            execute(
                &plan,
                &runner,
                num_batches,
                Budget::uniform(),
                self.cfg.pipeline_threads,
                &sink,
            )
        } else {
            run_serial(&plan, &runner, num_batches, &sink)
        };
        if let Err(e) = outcome {
            // Abandon the epoch, but never while commands are in flight.
            self.iostack.drain();
            return Err(e);
        }

        let epoch_time = start.elapsed();
        self.iostack.drain();
        let end_counters = self.counters.snapshot();
        let delta = end_counters.delta_since(&start_counters);
        self.audit_epoch(&delta)?;

        let mut batches = runner.results.into_inner();
        batches.sort_by_key(|b| b.batch_id);
        let per_batch_loss: Vec<f32> = batches.iter().filter_map(|b| b.loss).collect();
        let checksums: Vec<u64> = batches.iter().map(|b| b.checksum).collect();
        let spans = sink.take();
        let record = RunRecord {
            config: self.cfg.clone(),
            dataset: self.meta.clone(),
            epoch,
            num_batches: num_batches as usize,
            epoch_time_s: epoch_time.as_secs_f64(),
            stage_us: stage_totals_us(&spans),
            counters: delta,
            commands_per_sec: delta.scattered as f64 / epoch_time.as_secs_f64(),
            bytes_per_sec: delta.bytes_read as f64 / epoch_time.as_secs_f64(),
            per_batch_loss,
            feature_checksum: combine_checksums(&checksums),
            spans,
        };
        Ok(EpochRun { record, batches })
    }

    /// Conservation and decoupling audits over one epoch's counter deltas.
    fn audit_epoch(&self, delta: &CounterSnapshot) -> Result<()> {
        if delta.submitted != delta.completed || delta.completed != delta.scattered {
            return Err(EngineError::Fatal(format!(
                "command conservation violated: submitted {} completed {} scattered {}",
                delta.submitted, delta.completed, delta.scattered
            )));
        }
        if !self.cfg.sync_io && delta.coupled_polls != 0 {
            return Err(EngineError::Fatal(
                "submitter polled a completion queue in async mode".into(),
            ));
        }
        if let Some(audit) = self.iostack.audit() {
            let mut submitted = audit.submitted.lock().clone();
            let mut reaped = audit.reaped.lock().clone();
            submitted.sort_unstable();
            reaped.sort_unstable();
            if submitted != reaped {
                return Err(EngineError::Fatal(format!(
                    "command multiset mismatch: {} submitted vs {} reaped",
                    submitted.len(),
                    reaped.len()
                )));
            }
        }
        Ok(())
    }

    // Per-operator implementations. The plan's edges guarantee each `get()`
    // below observes a populated cell.

    fn op_sample(&self, epoch: u64, slot: &BatchSlot, h: usize) -> Result<()> {
        let prev = slot.level(h - 1);
        let fanout = self.cfg.fanouts[h - 1];
        let (edges, frontier) = sample_hop(
            &self.topo,
            &prev.frontier,
            fanout,
            self.cfg.seed,
            Purpose::Sample,
            epoch,
            slot.batch_id,
            h as u64,
        );
        let emitted: Vec<u64> = edges.iter().map(|&(_, dst)| dst).collect();
        let (fresh, base) = {
            let mut asm = slot.assembly.lock();
            let base = asm.num_rows();
            (asm.add_level(&emitted), base)
        };
        let block = Arc::new(RowBlock::new(base, fresh.len() as u32, self.layout.dim as u32));
        slot.edges[h - 1].set(edges).ok().expect("edges set once");
        slot.levels[h]
            .set(LevelData {
                fresh,
                frontier,
                block,
                base,
            })
            .ok()
            .expect("level set once");
        Ok(())
    }

    fn op_lookup(&self, slot: &BatchSlot, h: usize) -> Result<()> {
        let level = slot.level(h);
        // Local rows within the level's block.
        let requests: Vec<(u64, u32)> = level
            .fresh
            .iter()
            .enumerate()
            .map(|(i, &(v, _))| (v, i as u32))
            .collect();
        let p = self.cache.lookup_partition(&requests);
        self.counters
            .fast_hits
            .fetch_add(p.fast_hits.len() as u64, std::sync::atomic::Ordering::Relaxed);
        self.counters
            .slow_hits
            .fetch_add(p.slow_hits.len() as u64, std::sync::atomic::Ordering::Relaxed);
        self.counters
            .misses
            .fetch_add(p.misses.len() as u64, std::sync::atomic::Ordering::Relaxed);
        self.cache.copy_hits(&p.fast_hits, &level.block);
        self.cache.copy_hits(&p.slow_hits, &level.block);
        slot.misses[h].set(p.misses).ok().expect("misses set once");
        Ok(())
    }

    fn op_submit(&self, slot: &BatchSlot, h: usize) -> Result<()> {
        let misses = slot.misses[h].get().expect("lookup ran first");
        let block = &slot.level(h).block;
        if self.cfg.sync_io {
            self.iostack.sync_io_extract(misses, block, &slot.io);
        } else {
            self.iostack.submit_misses(misses, block, &slot.io);
        }
        Ok(())
    }

    fn op_complete(&self, slot: &BatchSlot) -> Result<()> {
        slot.io.seal();
        if !slot.io.wait() {
            return Err(EngineError::Fatal(format!(
                "device read error while extracting batch {}",
                slot.batch_id
            )));
        }
        Ok(())
    }

    fn op_batch_gen(&self, slot: &BatchSlot) -> Result<()> {
        let asm = slot.assembly.lock();
        let rows = asm.num_rows() as usize;
        let dim = self.layout.dim;

        let mut matrix = vec![0f32; rows * dim];
        for h in 0..self.levels_len(slot) {
            let level = slot.level(h);
            if !level.block.all_filled() {
                return Err(EngineError::Fatal(format!(
                    "batch {} level {h}: {}/{} rows filled",
                    slot.batch_id,
                    level.block.filled_count(),
                    level.block.rows()
                )));
            }
            for local in 0..level.block.rows() {
                let global = level.base as usize + local as usize;
                matrix[global * dim..(global + 1) * dim].copy_from_slice(level.block.row(local));
            }
        }

        let unique = asm.unique().to_vec();
        if self.cfg.audit_features {
            for (row, &v) in unique.iter().enumerate() {
                let expect = synth_feature(VertexId(v), &self.layout);
                if matrix[row * dim..(row + 1) * dim] != expect[..] {
                    return Err(EngineError::Fatal(format!(
                        "feature integrity violation at batch {} row {row} vertex {v}",
                        slot.batch_id
                    )));
                }
            }
        }

        // Sampled adjacency in rows, deduplicated per source in emission order.
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); rows];
        let mut seen: HashSet<(u32, u32)> = HashSet::new();
        for edges in &slot.edges {
            for &(src, dst) in edges.get().expect("all hops sampled") {
                let s = asm.row(src).expect("src has a row");
                let d = asm.row(dst).expect("dst has a row");
                if seen.insert((s, d)) {
                    adj[s as usize].push(d);
                }
            }
        }

        let checksum = fnv1a(unsafe {
            std::slice::from_raw_parts(matrix.as_ptr() as *const u8, matrix.len() * 4)
        });
        slot.out
            .set(MiniBatchOut {
                unique,
                adj,
                num_seeds: slot.seeds.len(),
                checksum,
                matrix: Mutex::new(Some(matrix)),
            })
            .ok()
            .expect("batch generated once");
        Ok(())
    }

    fn levels_len(&self, slot: &BatchSlot) -> usize {
        slot.levels.len()
    }

    fn op_train(&self, slot: &BatchSlot, results: &Mutex<Vec<BatchResult>>) -> Result<()> {
        let out = slot.out.get().expect("batch generated");
        let matrix = out.matrix.lock().take().expect("matrix consumed once");
        let loss = match self.cfg.trainer {
            TrainerKind::Synthetic => {
                let cost = Duration::from_micros(self.cfg.synthetic_train_us);
                let (checksum, _) = synthetic_train(slot.batch_id, &matrix, cost);
                debug_assert_eq!(checksum, out.checksum);
                None
            }
            TrainerKind::Sage | TrainerKind::Gcn => {
                let variant = if self.cfg.trainer == TrainerKind::Sage {
                    GnnVariant::Sage
                } else {
                    GnnVariant::Gcn
                };
                let labels: Vec<u32> = out.unique[..out.num_seeds]
                    .iter()
                    .map(|&v| synthetic_label(v, self.cfg.num_classes))
                    .collect();
                let view = BatchView {
                    features: &matrix,
                    rows: out.unique.len(),
                    dim: self.layout.dim,
                    adj: &out.adj,
                    num_seeds: out.num_seeds,
                };
                let mut params = self.params.lock();
                let report = train_step(
                    slot.batch_id,
                    &view,
                    &mut params,
                    &labels,
                    self.cfg.learning_rate,
                    variant,
                )?;
                Some(report.loss)
            }
        };
        results.lock().push(BatchResult {
            batch_id: slot.batch_id,
            rows: out.unique.len() as u32,
            loss,
            checksum: out.checksum,
            unique: out.unique.clone(),
        });
        Ok(())
    }
}

/// Adapter between the pipeline executor and the engine's operator methods.
struct EpochRunner<'a> {
    engine: &'a Engine,
    epoch: u64,
    slots: &'a [Arc<BatchSlot>],
    results: Mutex<Vec<BatchResult>>,
}

impl OpRunner for EpochRunner<'_> {
    fn run(&self, op: Operator) -> Result<()> {
        let slot = &self.slots[op.batch as usize];
        match op.kind {
            OpKind::Sample(h) => self.engine.op_sample(self.epoch, slot, h as usize),
            OpKind::Lookup(h) => self.engine.op_lookup(slot, h as usize),
            OpKind::Submit(h) => self.engine.op_submit(slot, h as usize),
            OpKind::Complete => self.engine.op_complete(slot),
            OpKind::BatchGen => self.engine.op_batch_gen(slot),
            OpKind::Train => self.engine.op_train(slot, &self.results),
        }
    }
}
