//! The write/read protocol on a virtual clock.
//!
//! Clients stream fragments without waiting for acknowledgements, so a
//! daemon never feeds back into the clients' send schedule. That lets each
//! daemon be simulated on its own: gather every request it receives, order
//! them by arrival and push them through its link and cache model.
//!
//! No payload bytes exist here. Each daemon keeps a map from sub-file
//! ranges to the logical offsets that were written there, and every read is
//! checked against it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BenchError, BenchResult, ReadMode, RunSample, RwConfig};
use crate::client::fragments;
use crate::iod::cache::{CacheModel, CacheParams, ThrottleModel, DEFAULT_FLUSH_BATCH};
use crate::layout::PhysExtent;
use crate::transport::SimParams;
use crate::wire::{IOD_HEADER_LEN, RESPONSE_HEADER_LEN};

const MIB: u64 = 1 << 20;

/// Hardware of the simulated cluster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimProfile {
    pub cache: CacheParams,
    pub throttle: ThrottleModel,
    pub net: SimParams,
    /// largest daemon request payload
    pub fragment: u64,
    /// processes start within this many seconds of each other
    pub jitter_s: f64,
}

impl SimProfile {
    /// Cluster of the original measurements: 256 MiB per daemon, flushing
    /// from 40 % dirty, concurrent cold reads at about 13 MB/s.
    pub fn testbed() -> Self {
        SimProfile {
            cache: CacheParams {
                capacity: 256 * MIB,
                page_size: 64 * 1024,
                dirty_threshold: 0.40,
                flush_batch: DEFAULT_FLUSH_BATCH,
            },
            throttle: ThrottleModel { concurrent_read_penalty: 13.0 / 24.0, ..ThrottleModel::default() },
            net: SimParams::default(),
            fragment: 32 * 1024,
            jitter_s: 1e-4,
        }
    }

    /// Desk-scale variant: a quarter of the cache, same rates.
    pub fn desk() -> Self {
        let mut p = Self::testbed();
        p.cache.capacity = 64 * MIB;
        p
    }

    fn link(&self, bytes: u64) -> f64 {
        bytes as f64 / self.net.bandwidth_bps
    }

    fn latency(&self) -> f64 {
        self.net.latency_us * 1e-6
    }
}

const FILE: u64 = 1;

/// A request as seen by a daemon.
#[derive(Clone, Copy, Debug)]
struct Req {
    arrival: f64,
    rank: usize,
    seq: usize,
    piece: PhysExtent,
}

/// Sub-file ranges of one daemon and the logical offset written to each.
#[derive(Default)]
struct Tags(BTreeMap<u64, (u64, u64)>);

impl Tags {
    fn record(&mut self, p: &PhysExtent) {
        // writers never overlap in this protocol, so plain insertion suffices
        self.0.insert(p.sub_offset, (p.length, p.logical_offset));
    }

    fn check(&self, p: &PhysExtent) -> Result<(), BenchError> {
        let mut at = p.sub_offset;
        let end = p.sub_offset + p.length;
        while at < end {
            let hit = self.0.range(..=at).next_back().filter(|(s, (l, _))| at < *s + *l);
            let Some((&s, &(l, logical))) = hit else {
                return Err(BenchError::Integrity(format!("iod {} sub-offset {at} was never written", p.iod)));
            };
            if logical + (at - s) != p.logical_offset + (at - p.sub_offset) {
                return Err(BenchError::Integrity(format!("iod {} sub-offset {at} holds foreign data", p.iod)));
            }
            at = s + l;
        }
        Ok(())
    }
}

struct Daemon {
    model: CacheModel,
    tags: Tags,
    in_free: f64,
    out_free: f64,
}

/// Runs every repeat of `cfg`.
pub fn run_rw(cfg: &RwConfig, prof: &SimProfile) -> Result<BenchResult, BenchError> {
    cfg.validate(prof.cache.page_size)?;
    let runs = (0..cfg.repeats).map(|k| run_once(cfg, prof, k)).collect::<Result<Vec<_>, _>>()?;
    BenchResult::from_runs(cfg.clone(), runs)
}

/// One repeat: write, barrier, reopen, (evict), read, verify.
pub fn run_once(cfg: &RwConfig, prof: &SimProfile, run: usize) -> Result<RunSample, BenchError> {
    let dist = cfg.distribution()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let start: Vec<f64> = (0..cfg.procs).map(|_| rng.gen::<f64>() * prof.jitter_s).collect();
    let mut daemons = (0..cfg.iods)
        .map(|_| {
            Ok(Daemon {
                model: CacheModel::new(prof.cache, prof.throttle).map_err(|e| BenchError::Config(e.to_string()))?,
                tags: Tags::default(),
                in_free: 0.0,
                out_free: 0.0,
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let plans: Vec<Vec<PhysExtent>> = (0..cfg.procs)
        .map(|r| fragments(&dist, r as u64 * cfg.per_proc_bytes, cfg.per_proc_bytes, prof.fragment))
        .collect();

    // write phase: each client's link paces its fragments
    let mut inbox: Vec<Vec<Req>> = vec![Vec::new(); cfg.iods as usize];
    for (rank, plan) in plans.iter().enumerate() {
        let mut free = start[rank];
        for (seq, &piece) in plan.iter().enumerate() {
            free += prof.link(piece.length + IOD_HEADER_LEN as u64);
            inbox[piece.iod as usize].push(Req { arrival: free + prof.latency(), rank, seq, piece });
        }
    }
    let mut write_done = start.clone();
    for (d, reqs) in daemons.iter_mut().zip(&mut inbox) {
        reqs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.rank.cmp(&b.rank)).then(a.seq.cmp(&b.seq)));
        for q in reqs.iter() {
            let received = q.arrival.max(d.in_free + prof.link(q.piece.length + IOD_HEADER_LEN as u64));
            d.in_free = received;
            let span = d.model.write(received, FILE, q.piece.sub_offset, q.piece.length);
            d.tags.record(&q.piece);
            let ack = span.done + prof.latency() + prof.link(RESPONSE_HEADER_LEN as u64);
            write_done[q.rank] = write_done[q.rank].max(ack);
        }
    }
    let write_times: Vec<f64> = write_done.iter().zip(&start).map(|(d, s)| d - s).collect();

    // barrier, close and reopen each cost a manager round trip
    let mut t = write_done.iter().copied().fold(0.0, f64::max) + 4.0 * prof.latency();
    if cfg.mode == ReadMode::Cold {
        t = evict(&mut daemons, prof, t);
    }
    for d in &mut daemons {
        d.model.reset_stats();
        d.in_free = t;
        d.out_free = t;
    }

    // read phase: requests are tiny, the data comes back over the daemons'
    // and then the clients' links
    let read_start: Vec<f64> = (0..cfg.procs).map(|_| t + rng.gen::<f64>() * prof.jitter_s).collect();
    let mut inbox: Vec<Vec<Req>> = vec![Vec::new(); cfg.iods as usize];
    let mut streams = vec![std::collections::BTreeSet::new(); cfg.iods as usize];
    for (rank, plan) in plans.iter().enumerate() {
        let mut free = read_start[rank];
        for (seq, &piece) in plan.iter().enumerate() {
            free += prof.link(IOD_HEADER_LEN as u64);
            inbox[piece.iod as usize].push(Req { arrival: free + prof.latency(), rank, seq, piece });
            streams[piece.iod as usize].insert(rank);
        }
    }
    let mut replies: Vec<Vec<(f64, u64)>> = vec![Vec::new(); cfg.procs];
    let (mut hit, mut miss) = (0u64, 0u64);
    for ((d, reqs), readers) in daemons.iter_mut().zip(&mut inbox).zip(&streams) {
        reqs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.rank.cmp(&b.rank)).then(a.seq.cmp(&b.seq)));
        for q in reqs.iter() {
            d.tags.check(&q.piece)?;
            let r = d.model.read(q.arrival, FILE, q.piece.sub_offset, q.piece.length, readers.len());
            hit += r.hit_bytes;
            miss += r.miss_bytes;
            let bytes = q.piece.length + RESPONSE_HEADER_LEN as u64;
            let sent = r.done.max(d.out_free) + prof.link(bytes);
            d.out_free = sent;
            replies[q.rank].push((sent + prof.latency(), bytes));
        }
    }
    let mut read_times = Vec::with_capacity(cfg.procs);
    for (rank, mut rs) in replies.into_iter().enumerate() {
        rs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut free = read_start[rank];
        for (arrival, bytes) in rs {
            free = arrival.max(free + prof.link(bytes));
        }
        read_times.push(free - read_start[rank]);
    }
    let pct = if hit + miss == 0 { 0.0 } else { 100.0 * hit as f64 / (hit + miss) as f64 };
    let total = cfg.procs as u64 * cfg.per_proc_bytes;
    Ok(RunSample::from_times(run, total, write_times, read_times, pct))
}

/// Writes three cache capacities of unrelated data to every daemon and lets
/// the flusher drain; returns when the last daemon is idle.
fn evict(daemons: &mut [Daemon], prof: &SimProfile, t: f64) -> f64 {
    let cap = prof.cache.capacity;
    let chunk = prof.cache.page_size * 16;
    let mut end = t;
    for d in daemons.iter_mut() {
        let mut at = t;
        for filler in 0..3 {
            let mut off = 0;
            while off < cap {
                let n = chunk.min(cap - off);
                at = d.model.write(at, FILE + 1 + filler, off, n).done;
                off += n;
            }
        }
        d.model.flush(at, None);
        end = end.max(d.model.settle_all());
    }
    end
}

/// Write bandwidth as P grows at fixed N and fixed S/N.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub iods: u32,
    pub per_iod_bytes: u64,
    /// (P, aggregate write bandwidth)
    pub points: Vec<(usize, f64)>,
}

impl Sweep {
    /// First P whose bandwidth falls more than 1 % below the best seen so far.
    pub fn knee(&self) -> Option<usize> {
        let mut best: f64 = 0.0;
        for &(p, bw) in &self.points {
            if bw < best * 0.99 {
                return Some(p);
            }
            best = best.max(bw);
        }
        None
    }

    /// Per-daemon rate at which extra bytes are absorbed between the knee
    /// and the last point of the sweep.
    pub fn post_knee_per_iod_bps(&self) -> Option<f64> {
        let knee = self.knee()?;
        let &(p0, bw0) = self.points.iter().find(|(p, _)| *p == knee)?;
        let &(p1, bw1) = self.points.last()?;
        if p1 <= p0 {
            return None;
        }
        let bytes = |p: usize| p as f64 * self.per_iod_bytes as f64;
        // per daemon, time = bytes / (aggregate / N)
        let time = |p: usize, bw: f64| bytes(p) * f64::from(self.iods) / bw;
        Some((bytes(p1) - bytes(p0)) / (time(p1, bw1) - time(p0, bw0)))
    }
}

/// Sweeps P over `procs` with `S = per_iod_bytes * N`; reports the trimmed
/// mean write bandwidth of `repeats` runs per point.
pub fn saturation_sweep(
    iods: u32,
    per_iod_bytes: u64,
    stripe: u64,
    procs: impl IntoIterator<Item = usize>,
    repeats: usize,
    prof: &SimProfile,
) -> Result<Sweep, BenchError> {
    let mut points = Vec::new();
    for p in procs {
        let cfg = RwConfig { repeats, ..RwConfig::new(p, iods, per_iod_bytes * u64::from(iods), stripe) };
        points.push((p, run_rw(&cfg, prof)?.write_bps));
    }
    Ok(Sweep { iods, per_iod_bytes, points })
}
