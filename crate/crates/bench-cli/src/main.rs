//! `gnnbench`: dataset generation, cache pre-sampling, raw IO benchmarks,
//! epoch runs across ablation modes, and CSV reporting.

mod records;
mod report;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use oocgnn::cache::presample_hotness;
use oocgnn::engine::Engine;
use oocgnn::gen::{self, DatasetSpec, DegreeDistribution};
use oocgnn::graph::CsrTopology;
use oocgnn::iostack::{IoStack, IoStackOptions};
use oocgnn::metrics::Counters;
use oocgnn::storage::{DeviceModel, StorageEngine, StorageOptions};
use oocgnn::{EngineConfig, Result as EngineResult};

use records::{append_records, read_records, IoBenchRecord, Record};

#[derive(Parser)]
#[command(name = "gnnbench", version, about = "Out-of-core GNN training benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (topology, shard files, manifest).
    Gen(GenArgs),
    /// Run the pre-sampling epoch and persist the hotness sidecar.
    Presample(PresampleArgs),
    /// Raw IO throughput benchmark over the virtual shard devices.
    BenchIo(BenchIoArgs),
    /// Run training epochs under the configured ablation modes.
    Train(TrainArgs),
    /// Summarize a record stream into per-figure CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vertices: u64,
    #[arg(long, default_value_t = 8)]
    avg_degree: u64,
    #[arg(long, value_enum, default_value_t = DistArg::Powerlaw)]
    dist: DistArg,
    /// Pareto exponent for the powerlaw distribution.
    #[arg(long, default_value_t = 1.2)]
    alpha: f64,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    block_size: usize,
    #[arg(long, default_value_t = 4)]
    shards: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Powerlaw,
}

#[derive(Args)]
struct PresampleArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Engine config; sampling fields (fanouts, batch size, seed,
    /// train fraction) drive the pre-sampling epoch.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the sidecar (defaults to hotness.thot in the dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchIoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 32)]
    commands_per_worker: usize,
    #[arg(long, default_value_t = 2)]
    completion_workers: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Async)]
    mode: ModeArg,
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    #[arg(long, default_value_t = 1.0)]
    warmup_seconds: f64,
    #[arg(long, default_value_t = 1000)]
    latency_us: u64,
    #[arg(long, default_value_t = 32)]
    parallelism: usize,
    #[arg(long, default_value_t = 1024)]
    queue_depth: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Append the result to this JSONL record stream.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Async,
    Sync,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Engine config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the operator pipeline (serial NoPipe baseline).
    #[arg(long)]
    no_pipeline: bool,
    /// Disable the feature cache (all reads go to the devices).
    #[arg(long)]
    no_cache: bool,
    /// Use the coupled synchronous IO path.
    #[arg(long)]
    sync_io: bool,
    #[arg(long)]
    pipeline_depth: Option<usize>,
    #[arg(long)]
    synthetic_train_us: Option<u64>,
    /// Enable full command-conservation and feature-integrity audits.
    #[arg(long)]
    audit: bool,
    /// Append per-epoch records to this JSONL stream.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSONL record stream produced by `bench-io` / `train`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Presample(args) => cmd_presample(args),
        Command::BenchIo(args) => cmd_bench_io(args),
        Command::Train(args) => cmd_train(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        num_vertices: args.vertices,
        avg_degree: args.avg_degree,
        distribution: match args.dist {
            DistArg::Uniform => DegreeDistribution::Uniform,
            DistArg::Powerlaw => DegreeDistribution::Powerlaw { alpha: args.alpha },
        },
        dim: args.dim,
        block_size: args.block_size,
        num_shards: args.shards,
        seed: args.seed,
    };
    let meta = gen::generate_dataset(&spec, &args.out)?;
    println!(
        "generated {} vertices, {} edges, dim {}, {} shards under {}",
        meta.num_vertices,
        meta.num_edges,
        meta.dim,
        meta.num_shards,
        args.out.display()
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<EngineConfig> {
    match path {
        Some(p) => Ok(EngineConfig::from_path(p)?),
        None => Ok(EngineConfig::default()),
    }
}

fn cmd_presample(args: PresampleArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let meta = gen::DatasetMeta::load(&args.data)?;
    let topo = CsrTopology::read_file(&args.data.join(gen::TOPOLOGY_FILE))?;
    let train_set = meta.train_set(cfg.train_fraction);
    let table = presample_hotness(&topo, &train_set, cfg.batch_size, &cfg.fanouts, cfg.seed);
    let out = args.out.unwrap_or_else(|| args.data.join(gen::HOTNESS_FILE));
    table.save(&out)?;
    let hot = table.counts().iter().filter(|&&c| c > 0).count();
    println!(
        "pre-sampled {} batches worth of hotness: {}/{} vertices touched -> {}",
        train_set.len().div_ceil(cfg.batch_size),
        hot,
        meta.num_vertices,
        out.display()
    );
    Ok(())
}

fn cmd_bench_io(args: BenchIoArgs) -> anyhow::Result<()> {
    let meta = gen::DatasetMeta::load(&args.data)?;
    let layout = meta.layout()?;
    let counters = Arc::new(Counters::default());
    let sync = matches!(args.mode, ModeArg::Sync);
    let storage = Arc::new(StorageEngine::open(
        &args.data,
        layout,
        meta.num_vertices,
        StorageOptions {
            queue_depth: args.queue_depth,
            queues_per_shard: args.workers,
            io_slots: 2 * args.workers * args.commands_per_worker,
            model: DeviceModel {
                service_latency: Duration::from_micros(args.latency_us),
                internal_parallelism: args.parallelism,
            },
        },
        Arc::clone(&counters),
    )?);
    let theoretical = storage.theoretical_max_cmds_per_sec();
    let stack = IoStack::start(
        storage,
        counters,
        IoStackOptions {
            submitter_workers: args.workers,
            completion_workers: args.completion_workers,
            commands_per_worker: args.commands_per_worker,
            sync_io: sync,
            audit_commands: false,
        },
    );
    let stats = stack.run_bench(
        meta.num_vertices,
        args.seed,
        Duration::from_secs_f64(args.warmup_seconds),
        Duration::from_secs_f64(args.seconds),
    );
    let record = IoBenchRecord {
        mode: if sync { "sync" } else { "async" }.into(),
        shards: meta.num_shards,
        workers: args.workers,
        commands_per_worker: args.commands_per_worker,
        dim: meta.dim,
        latency_us: args.latency_us,
        parallelism: args.parallelism,
        seed: args.seed,
        measured_secs: stats.measured_secs,
        commands: stats.commands,
        cmds_per_sec: stats.cmds_per_sec,
        bytes_per_sec: stats.bytes_per_sec,
        theoretical_max_cmds_per_sec: theoretical,
        pct_of_max: stats.cmds_per_sec / theoretical,
    };
    println!(
        "{} mode: {:.0} cmds/s ({:.1}% of {:.0} theoretical max), {:.1} MiB/s",
        record.mode,
        record.cmds_per_sec,
        record.pct_of_max * 100.0,
        theoretical,
        record.bytes_per_sec / (1024.0 * 1024.0)
    );
    eprintln!(
        "  inflight high-water {}, flow-control waits {}, sq-full retries {}, coupled polls {}",
        stats.counters.inflight_high_water,
        stats.counters.flow_control_waits,
        stats.counters.sq_full_retries,
        stats.counters.coupled_polls
    );
    if let Some(path) = args.records {
        append_records(&path, &[Record::BenchIo(record)])?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_pipeline {
        cfg.pipeline_enabled = false;
    }
    if args.no_cache {
        cfg.cache_enabled = false;
    }
    if args.sync_io {
        cfg.sync_io = true;
    }
    if let Some(d) = args.pipeline_depth {
        cfg.pipeline_depth = d;
    }
    if let Some(c) = args.synthetic_train_us {
        cfg.synthetic_train_us = c;
    }
    if args.audit {
        cfg.audit_commands = true;
        cfg.audit_features = true;
    }

    let engine = Engine::new(&args.data, cfg)?;
    let mode = Record::mode_label(engine.config());
    let mut out_records = Vec::new();
    for epoch in 0..engine.config().epochs {
        let run: EngineResult<_> = engine.run_epoch(epoch);
        let run = run.with_context(|| format!("epoch {epoch} failed an invariant"))?;
        let r = &run.record;
        let hits = r.counters.fast_hits + r.counters.slow_hits;
        let total = (hits + r.counters.misses).max(1);
        println!(
            "epoch {epoch} [{mode}]: {:.3}s, {} batches, {:.0} cmds/s, hit rate {:.1}%, loss {}",
            r.epoch_time_s,
            r.num_batches,
            r.commands_per_sec,
            hits as f64 / total as f64 * 100.0,
            r.per_batch_loss
                .last()
                .map_or("n/a".into(), |l| format!("{l:.4}")),
        );
        out_records.push(Record::Train(Box::new(run.record)));
    }
    if let Some(path) = &args.records {
        append_records(path, &out_records)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    if !args.records.exists() {
        bail!("record stream {} does not exist", args.records.display());
    }
    let records = read_records(&args.records)?;
    report::write_reports(&records, &args.out_dir)?;
    println!(
        "wrote {} records into 4 CSV tables under {}",
        records.len(),
        args.out_dir.display()
    );
    Ok(())
}
