//! CSV and JSONL persistence for run outputs.
//!
//! Writers append row by row through a buffered file handle, so long runs
//! remain inspectable mid-flight. Numeric formatting uses Rust's shortest
//! round-trip float display, which is deterministic.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::meta::{EpisodeTaskMetric, StepMetric, UpdateLosses};
use crate::oracle::OracleResult;

/// Streaming CSV writer for per-slot metric records `{t, s0, sn, sum, jain}`.
pub struct StepMetricsWriter {
    w: csv::Writer<BufWriter<File>>,
}

impl StepMetricsWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["t", "s0", "sn", "sum", "jain"])?;
        Ok(StepMetricsWriter { w })
    }

    pub fn write(&mut self, m: &StepMetric) -> io::Result<()> {
        self.w.write_record([
            m.t.to_string(),
            m.s0.to_string(),
            m.sn.to_string(),
            m.sum.to_string(),
            m.jain.map(|j| j.to_string()).unwrap_or_default(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn write_step_metrics(path: &Path, steps: &[StepMetric]) -> io::Result<()> {
    let mut w = StepMetricsWriter::create(path)?;
    for s in steps {
        w.write(s)?;
    }
    w.finish()
}

/// One slot-trace record, line-delimited JSON.
#[derive(Serialize)]
pub struct TraceRecord {
    pub t: usize,
    pub agent_tx: bool,
    pub obs: u8,
    pub success_node: Option<usize>,
}

pub struct TraceWriter {
    w: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(TraceWriter {
            w: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.w, rec)?;
        self.w.write_all(b"\n")
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.w.flush()
    }
}

/// Streaming CSV writer for per-episode, per-task training curves.
pub struct CurveWriter {
    w: csv::Writer<BufWriter<File>>,
}

impl CurveWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["episode", "task", "sum_throughput", "jain", "mean_reward"])?;
        Ok(CurveWriter { w })
    }

    pub fn write(&mut self, c: &EpisodeTaskMetric) -> io::Result<()> {
        self.w.write_record([
            c.episode.to_string(),
            c.task.clone(),
            c.sum_throughput.to_string(),
            c.jain.map(|j| j.to_string()).unwrap_or_default(),
            c.mean_reward.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Streaming CSV writer for per-update loss records.
pub struct LossWriter {
    w: csv::Writer<BufWriter<File>>,
}

impl LossWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record([
            "episode", "update", "critic1", "critic2", "kl", "encoder", "actor", "temperature",
            "alpha", "tasks_used",
        ])?;
        Ok(LossWriter { w })
    }

    pub fn write(&mut self, l: &UpdateLosses) -> io::Result<()> {
        self.w.write_record([
            l.episode.to_string(),
            l.update.to_string(),
            l.critic1.to_string(),
            l.critic2.to_string(),
            l.kl.to_string(),
            l.encoder.to_string(),
            l.actor.to_string(),
            l.temperature.to_string(),
            l.alpha.to_string(),
            l.tasks_used.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Oracle table rows `{scenario, value, kind, policy, rollout}`.
pub fn write_oracle_table(
    path: &Path,
    rows: &[(String, Result<(OracleResult, Option<f64>), String>)],
) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["scenario", "value", "kind", "policy", "rollout", "error"])?;
    for (label, row) in rows {
        match row {
            Ok((r, rollout)) => w.write_record([
                label.clone(),
                r.value.to_string(),
                serde_json::to_value(r.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                r.policy_sketch.clone(),
                rollout.map(|v| v.to_string()).unwrap_or_default(),
                String::new(),
            ])?,
            Err(e) => w.write_record([
                label.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Latent export rows `{env, z..., weights...}`.
pub fn write_latents(
    path: &Path,
    latent_dim: usize,
    num_experts: usize,
    rows: &[(String, Vec<f64>, Vec<f64>)],
) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["env".to_string()];
    header.extend((0..latent_dim).map(|d| format!("z{d}")));
    header.extend((0..num_experts).map(|m| format!("w{m}")));
    w.write_record(&header)?;
    for (env, z, g) in rows {
        let mut rec = vec![env.clone()];
        rec.extend(z.iter().map(|v| v.to_string()));
        rec.extend(g.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reproducibility record written next to every run's outputs.
#[derive(Serialize)]
pub struct RunRecord<C: Serialize> {
    pub command: String,
    pub config: C,
    pub config_hash: String,
    pub code_version: String,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub fn write_run_record<C: Serialize>(path: &Path, record: &RunRecord<C>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, record)?;
    w.write_all(b"\n")?;
    w.flush()
}

pub fn code_version() -> String {
    format!("coex {}", env!("CARGO_PKG_VERSION"))
}
