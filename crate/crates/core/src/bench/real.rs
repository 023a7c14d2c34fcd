//! The write/read protocol with real bytes through an in-process cluster.
//!
//! Every process is a thread with its own client. Times come from the wall
//! clock, so the numbers describe this machine, not the modelled hardware.

use std::sync::Barrier;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BenchError, BenchResult, ReadMode, RunSample, RwConfig};
use crate::client::Client;
use crate::cluster::Cluster;
use crate::config::ClusterConfig;
use crate::metamgr::PartitionConfig;

/// Cluster configuration with one partition of exactly `iods` daemons,
/// keeping transport and daemon settings from `base`.
pub fn cluster_for(base: &ClusterConfig, iods: u32) -> ClusterConfig {
    let mut c = base.clone();
    c.partitions = vec![PartitionConfig { name: "pvfs1".into(), nodes: (0..iods).collect() }];
    c.nodes.clear();
    c.metamgr.node = None;
    c
}

/// Payload of one rank in one repeat.
pub fn payload(seed: u64, run: usize, rank: usize, len: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((run as u64) << 32) | rank as u64);
    let mut buf = vec![0u8; len as usize];
    rng.fill_bytes(&mut buf);
    buf
}

pub fn run_rw(cfg: &RwConfig, base: &ClusterConfig) -> Result<BenchResult, BenchError> {
    let cc = cluster_for(base, cfg.iods);
    cfg.validate(cc.iod.page_size)?;
    let cluster = Cluster::launch(cc)?;
    let runs = (0..cfg.repeats).map(|k| run_once(cfg, &cluster, k)).collect::<Result<Vec<_>, _>>()?;
    BenchResult::from_runs(cfg.clone(), runs)
}

fn hit_miss(cluster: &Cluster) -> (u64, u64) {
    cluster.daemons().values().map(|d| d.cache_stats()).fold((0, 0), |(h, m), s| (h + s.hit_bytes, m + s.miss_bytes))
}

/// Pushes every page of earlier files out of the daemon caches.
fn evict(cluster: &Cluster, client: &Client, run: usize) -> Result<(), BenchError> {
    let cc = cluster.config();
    let n = cluster.daemons().len() as u64;
    let total = 3 * cc.iod.cache_capacity * n;
    let path = format!("/pvfs1/filler{run}");
    let mut h = client.create(&path, crate::layout::Distribution::round_robin(64 * 1024, n as u32)?)?;
    let chunk = vec![0x5au8; 4 << 20];
    let mut off = 0;
    while off < total {
        let len = (chunk.len() as u64).min(total - off);
        client.write_at(&mut h, off, &chunk[..len as usize])?;
        off += len;
    }
    cluster.settle()?;
    client.remove(&path)?;
    Ok(())
}

pub fn run_once(cfg: &RwConfig, cluster: &Cluster, run: usize) -> Result<RunSample, BenchError> {
    let path = format!("/pvfs1/bench{run}");
    let coord = cluster.client()?;
    coord.create(&path, cfg.distribution()?)?;
    let clients = (0..cfg.procs).map(|_| cluster.client()).collect::<Result<Vec<_>, _>>()?;
    let barrier = Barrier::new(cfg.procs + 1);
    let s = cfg.per_proc_bytes;

    let (times, before) = std::thread::scope(|scope| -> Result<_, BenchError> {
        let workers: Vec<_> = clients
            .iter()
            .enumerate()
            .map(|(rank, client)| {
                let barrier = &barrier;
                let path = &path;
                scope.spawn(move || -> Result<(f64, f64), BenchError> {
                    let data = payload(cfg.seed, run, rank, s);
                    let t0 = Instant::now();
                    let wrote = client.open(path).and_then(|mut h| {
                        client.write_at(&mut h, rank as u64 * s, &data).and_then(|_| client.close(&mut h))
                    });
                    let write_t = t0.elapsed().as_secs_f64();
                    barrier.wait();
                    barrier.wait();
                    let t1 = Instant::now();
                    let got = client.open(path).and_then(|mut h| client.read_at(&mut h, rank as u64 * s, s));
                    let read_t = t1.elapsed().as_secs_f64();
                    wrote?;
                    let got = got?;
                    if Sha256::digest(&got) != Sha256::digest(&data) {
                        return Err(BenchError::Integrity(format!("rank {rank} read back different bytes")));
                    }
                    Ok((write_t, read_t))
                })
            })
            .collect();
        // between the phases: optional eviction, then a statistics snapshot
        barrier.wait();
        let evicted = if cfg.mode == ReadMode::Cold { evict(cluster, &coord, run) } else { Ok(()) };
        let before = hit_miss(cluster);
        barrier.wait();
        let times =
            workers.into_iter().map(|w| w.join().expect("bench worker panicked")).collect::<Result<Vec<_>, _>>();
        evicted?;
        Ok((times?, before))
    })?;
    let after = hit_miss(cluster);
    let (hit, miss) = (after.0 - before.0, after.1 - before.1);
    coord.remove(&path)?;
    let pct = if hit + miss == 0 { 0.0 } else { 100.0 * hit as f64 / (hit + miss) as f64 };
    let (w, r): (Vec<f64>, Vec<f64>) = times.into_iter().unzip();
    Ok(RunSample::from_times(run, cfg.procs as u64 * s, w, r, pct))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClusterConfig {
        let mut c = ClusterConfig::single_partition(1);
        c.iod.cache_capacity = 4 << 20;
        c
    }

    #[test]
    fn warm_and_cold_runs_verify_and_account() {
        let mut cfg = RwConfig { repeats: 3, ..RwConfig::new(4, 2, 1 << 20, 64 * 1024) };
        let warm = run_rw(&cfg, &small()).unwrap();
        assert_eq!(warm.runs.len(), 3);
        assert_eq!(warm.served_from_cache_pct, 100.0);
        cfg.mode = ReadMode::Cold;
        let cold = run_rw(&cfg, &small()).unwrap();
        assert_eq!(cold.served_from_cache_pct, 0.0);
        assert!(cold.write_bps > 0.0 && cold.read_bps > 0.0);
    }

    #[test]
    fn payloads_differ_per_rank_and_run() {
        assert_ne!(payload(1, 0, 0, 64), payload(1, 0, 1, 64));
        assert_ne!(payload(1, 0, 0, 64), payload(1, 1, 0, 64));
        assert_eq!(payload(7, 2, 3, 64), payload(7, 2, 3, 64));
    }
}
