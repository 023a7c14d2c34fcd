//! Benchmark harness: concurrent write/read, cold reads, large stripes,
//! the eigenmode workload and staging copies.
//!
//! Two profiles run the same protocol. `sim` drives the cache model and the
//! network model on a virtual clock, so results are deterministic for a
//! seed. `real` moves actual bytes through an in-process cluster and times
//! it with the wall clock.

pub mod eigen;
pub mod real;
pub mod sim;
pub mod stage;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientError;
use crate::cluster::ClusterError;
use crate::config::ConfigError;
use crate::layout::{logical_to_physical, Distribution, LayoutError};

/// CSV header of `stripefs-bench rw`.
pub const CSV_HEADER: &str = "mode,P,N,S_bytes,stripe_bytes,run,write_bps,read_bps,served_from_cache_pct";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("trim_mean needs at least 3 samples, got {0}")]
    Arity(usize),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("data integrity failure: {0}")]
    Integrity(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    ClusterConfig(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Process exit status for the command-line tools.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Integrity(_) => 2,
            BenchError::Arity(_) | BenchError::Config(_) | BenchError::ClusterConfig(_) => 4,
            BenchError::Cluster(ClusterError::Config(_)) => 4,
            _ => 3,
        }
    }
}

/// Drops one smallest and one largest sample and averages the rest.
pub fn trim_mean(samples: &[f64]) -> Result<f64, BenchError> {
    if samples.len() < 3 {
        return Err(BenchError::Arity(samples.len()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(BenchError::Config("non-finite sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let kept = &s[1..s.len() - 1];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadMode {
    /// Read right after writing; data is still cached.
    Warm,
    /// Push the file out of the cache with unrelated writes first.
    Cold,
}

impl ReadMode {
    pub fn name(self) -> &'static str {
        match self {
            ReadMode::Warm => "warm",
            ReadMode::Cold => "cold",
        }
    }
}

/// One concurrent write/read experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RwConfig {
    pub procs: usize,
    pub iods: u32,
    pub per_proc_bytes: u64,
    pub stripe: u64,
    pub repeats: usize,
    pub mode: ReadMode,
    pub seed: u64,
}

impl RwConfig {
    pub fn new(procs: usize, iods: u32, per_proc_bytes: u64, stripe: u64) -> Self {
        RwConfig { procs, iods, per_proc_bytes, stripe, repeats: 5, mode: ReadMode::Warm, seed: 1 }
    }

    pub fn validate(&self, page_size: u64) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.procs == 0 || self.iods == 0 {
            return bad("need at least one process and one daemon".into());
        }
        if self.stripe == 0 || self.per_proc_bytes == 0 {
            return bad("stripe and per-process bytes must be positive".into());
        }
        if self.per_proc_bytes < self.stripe && !self.per_proc_bytes.is_multiple_of(page_size) {
            return bad(format!("S={} is below the stripe and not a multiple of the page size", self.per_proc_bytes));
        }
        if self.repeats < 3 {
            return bad(format!("repeats must be at least 3, got {}", self.repeats));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<Distribution, BenchError> {
        Ok(Distribution::round_robin(self.stripe, self.iods)?)
    }
}

/// Outcome of one repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSample {
    pub run: usize,
    /// seconds each process spent writing, then reading
    pub write_times: Vec<f64>,
    pub read_times: Vec<f64>,
    pub write_bps: f64,
    pub read_bps: f64,
    pub served_from_cache_pct: f64,
}

impl RunSample {
    /// Aggregate bandwidths by the max-elapsed rule.
    pub fn from_times(
        run: usize,
        total_bytes: u64,
        write_times: Vec<f64>,
        read_times: Vec<f64>,
        cache_pct: f64,
    ) -> Self {
        let rate = |t: &[f64]| total_bytes as f64 / t.iter().copied().fold(0.0, f64::max);
        RunSample {
            run,
            write_bps: rate(&write_times),
            read_bps: rate(&read_times),
            write_times,
            read_times,
            served_from_cache_pct: cache_pct,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub cfg: RwConfig,
    pub runs: Vec<RunSample>,
    pub write_bps: f64,
    pub read_bps: f64,
    pub served_from_cache_pct: f64,
}

impl BenchResult {
    pub fn from_runs(cfg: RwConfig, runs: Vec<RunSample>) -> Result<Self, BenchError> {
        let w: Vec<f64> = runs.iter().map(|r| r.write_bps).collect();
        let r: Vec<f64> = runs.iter().map(|r| r.read_bps).collect();
        let pct = runs.iter().map(|r| r.served_from_cache_pct).sum::<f64>() / runs.len().max(1) as f64;
        Ok(BenchResult { write_bps: trim_mean(&w)?, read_bps: trim_mean(&r)?, served_from_cache_pct: pct, cfg, runs })
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.runs
            .iter()
            .map(|s| CsvRow {
                mode: self.cfg.mode.name().into(),
                p: self.cfg.procs,
                n: self.cfg.iods,
                s_bytes: self.cfg.per_proc_bytes,
                stripe_bytes: self.cfg.stripe,
                run: s.run,
                write_bps: s.write_bps,
                read_bps: s.read_bps,
                served_from_cache_pct: s.served_from_cache_pct,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub mode: String,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "S_bytes")]
    pub s_bytes: u64,
    pub stripe_bytes: u64,
    pub run: usize,
    pub write_bps: f64,
    pub read_bps: f64,
    pub served_from_cache_pct: f64,
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Daemon hit by each writer when `P = N` and the stripe equals the
/// per-process size. Fails unless every writer touches exactly one daemon
/// and no two writers share one.
pub fn large_stripe_plan(procs: u32, per_proc_bytes: u64) -> Result<Vec<u32>, BenchError> {
    let dist = Distribution::round_robin(per_proc_bytes, procs)?;
    let mut seen = vec![false; procs as usize];
    (0..u64::from(procs))
        .map(|r| {
            let ext = logical_to_physical(r * per_proc_bytes, per_proc_bytes, &dist);
            if ext.len() != 1 {
                return Err(BenchError::Integrity(format!("rank {r} maps to {} extents", ext.len())));
            }
            let iod = ext[0].iod;
            if std::mem::replace(&mut seen[iod as usize], true) {
                return Err(BenchError::Integrity(format!("daemon {iod} serves two writers")));
            }
            Ok(iod)
        })
        .collect()
}
