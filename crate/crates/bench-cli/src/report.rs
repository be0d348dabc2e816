//! CSV summaries of a record stream, one file per figure family.

use std::path::Path;

use anyhow::Context;

use oocgnn::metrics::OpKindTag;

use crate::records::Record;

pub const IO_VS_SHARDS: &str = "io_vs_shards.csv";
pub const IO_VS_DIM: &str = "io_vs_dim.csv";
pub const EPOCH_VS_MODE: &str = "epoch_vs_mode.csv";
pub const HIT_RATES: &str = "hit_rates.csv";

pub fn write_reports(records: &[Record], out_dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    write_io_vs_shards(records, &out_dir.join(IO_VS_SHARDS))?;
    write_io_vs_dim(records, &out_dir.join(IO_VS_DIM))?;
    write_epoch_vs_mode(records, &out_dir.join(EPOCH_VS_MODE))?;
    write_hit_rates(records, &out_dir.join(HIT_RATES))?;
    Ok(())
}

fn write_io_vs_shards(records: &[Record], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "shards",
        "mode",
        "workers",
        "commands_per_worker",
        "dim",
        "cmds_per_sec",
        "bytes_per_sec",
        "pct_of_max",
    ])?;
    for r in records {
        if let Record::BenchIo(b) = r {
            w.write_record([
                b.shards.to_string(),
                b.mode.clone(),
                b.workers.to_string(),
                b.commands_per_worker.to_string(),
                b.dim.to_string(),
                format!("{:.1}", b.cmds_per_sec),
                format!("{:.1}", b.bytes_per_sec),
                format!("{:.4}", b.pct_of_max),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_io_vs_dim(records: &[Record], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dim", "mode", "shards", "cmds_per_sec", "bytes_per_sec", "pct_of_max"])?;
    for r in records {
        if let Record::BenchIo(b) = r {
            w.write_record([
                b.dim.to_string(),
                b.mode.clone(),
                b.shards.to_string(),
                format!("{:.1}", b.cmds_per_sec),
                format!("{:.1}", b.bytes_per_sec),
                format!("{:.4}", b.pct_of_max),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_epoch_vs_mode(records: &[Record], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mode",
        "epoch",
        "num_batches",
        "epoch_time_s",
        "cmds_per_sec",
        "sample_us",
        "lookup_us",
        "submit_us",
        "complete_us",
        "batch_gen_us",
        "train_us",
    ])?;
    for r in records {
        if let Record::Train(t) = r {
            let stage = |tag: OpKindTag| {
                t.stage_us
                    .iter()
                    .find(|(k, _)| *k == tag)
                    .map(|(_, us)| *us)
                    .unwrap_or(0)
                    .to_string()
            };
            w.write_record([
                Record::mode_label(&t.config),
                t.epoch.to_string(),
                t.num_batches.to_string(),
                format!("{:.6}", t.epoch_time_s),
                format!("{:.1}", t.commands_per_sec),
                stage(OpKindTag::Sample),
                stage(OpKindTag::Lookup),
                stage(OpKindTag::Submit),
                stage(OpKindTag::Complete),
                stage(OpKindTag::BatchGen),
                stage(OpKindTag::Train),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_hit_rates(records: &[Record], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mode",
        "epoch",
        "fast_hits",
        "slow_hits",
        "misses",
        "fast_rate",
        "slow_rate",
        "miss_rate",
    ])?;
    for r in records {
        if let Record::Train(t) = r {
            let c = &t.counters;
            let total = (c.fast_hits + c.slow_hits + c.misses).max(1) as f64;
            w.write_record([
                Record::mode_label(&t.config),
                t.epoch.to_string(),
                c.fast_hits.to_string(),
                c.slow_hits.to_string(),
                c.misses.to_string(),
                format!("{:.4}", c.fast_hits as f64 / total),
                format!("{:.4}", c.slow_hits as f64 / total),
                format!("{:.4}", c.misses as f64 / total),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
