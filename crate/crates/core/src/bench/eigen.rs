//! Eigenmode workload: many lattice vectors in one round-robin striped file,
//! read back by processes that each own a block of the z and t axes.
//!
//! A mode vector is stored time-slice by time-slice; within a slice the
//! z-planes follow each other. With the stripe set to one time-slice every
//! slice lives on exactly one daemon.

use std::sync::Barrier;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::BenchError;
use crate::client::collective::{collective_read, collective_write};
use crate::client::{Client, CollectiveMode, GroupMember};
use crate::cluster::Cluster;
use crate::layout::{logical_to_physical, Distribution, View};

/// Spin times colour components per lattice site.
pub const SPIN_COLOR: u64 = 12;
/// A complex double.
pub const ELEMENT_BYTES: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EigenWorkload {
    /// lattice extent (x, y, z, t)
    pub dims: [u64; 4],
    pub spin_color: u64,
    pub element_size: u64,
    pub n_modes: u64,
    pub n_procs: usize,
    /// processes along z and along t; their product is `n_procs`
    pub z_split: u64,
    pub t_split: u64,
}

impl EigenWorkload {
    /// Splits `n_procs` over t first, then z.
    pub fn new(dims: [u64; 4], n_modes: u64, n_procs: usize) -> Result<Self, BenchError> {
        let p = n_procs as u64;
        let t_split = (1..=p).rev().find(|d| p.is_multiple_of(*d) && dims[3].is_multiple_of(*d) && dims[2].is_multiple_of(p / d));
        let Some(t_split) = t_split else {
            return Err(BenchError::Config(format!("{n_procs} processes do not divide the z and t axes of {dims:?}")));
        };
        let w = EigenWorkload {
            dims,
            spin_color: SPIN_COLOR,
            element_size: ELEMENT_BYTES,
            n_modes,
            n_procs,
            z_split: p / t_split,
            t_split,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let [x, y, z, t] = self.dims;
        if [x, y, z, t, self.n_modes, self.spin_color, self.element_size].contains(&0) || self.n_procs == 0 {
            return Err(BenchError::Config("empty lattice, no modes or no processes".into()));
        }
        if self.z_split * self.t_split != self.n_procs as u64 || z % self.z_split != 0 || t % self.t_split != 0 {
            return Err(BenchError::Config(format!(
                "decomposition {}x{} does not fit {} processes on z={z}, t={t}",
                self.z_split, self.t_split, self.n_procs
            )));
        }
        self.file_size().ok_or_else(|| BenchError::Config("file size overflows".into()))?;
        Ok(())
    }

    /// Elements per mode vector.
    pub fn vector_len(&self) -> u64 {
        self.spin_color * self.dims.iter().product::<u64>()
    }

    pub fn vector_bytes(&self) -> u64 {
        self.vector_len() * self.element_size
    }

    pub fn time_slice_bytes(&self) -> u64 {
        self.spin_color * self.dims[0] * self.dims[1] * self.dims[2] * self.element_size
    }

    fn plane_bytes(&self) -> u64 {
        self.time_slice_bytes() / self.dims[2]
    }

    pub fn file_size(&self) -> Option<u64> {
        self.n_modes.checked_mul(self.vector_len())?.checked_mul(self.element_size)
    }

    pub fn distribution(&self, iods: u32) -> Result<Distribution, BenchError> {
        Ok(Distribution::round_robin(self.time_slice_bytes(), iods)?)
    }

    /// (file offset, length) runs owned by `rank` within mode `mode`, in
    /// the order they appear in the rank's local buffer.
    pub fn runs(&self, rank: usize, mode: u64) -> Vec<(u64, u64)> {
        let r = rank as u64;
        let (zi, ti) = (r % self.z_split, r / self.z_split);
        let zs = self.dims[2] / self.z_split;
        let ts = self.dims[3] / self.t_split;
        let base = mode * self.vector_bytes();
        (ti * ts..(ti + 1) * ts)
            .map(|t| (base + t * self.time_slice_bytes() + zi * zs * self.plane_bytes(), zs * self.plane_bytes()))
            .collect()
    }

    /// Deterministic content of one mode.
    pub fn mode_bytes(&self, seed: u64, mode: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(mode);
        let mut v = vec![0u8; self.vector_bytes() as usize];
        rng.fill_bytes(&mut v);
        v
    }
}

/// How the ranks move their slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EigenIo {
    /// one `write_at`/`read_at` per run
    #[default]
    Independent,
    /// one collective call per phase through an extent-list view
    Collective(CollectiveMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenReport {
    pub file_size: u64,
    pub write_bps: f64,
    pub read_bps: f64,
    /// SHA-256 of the reassembled file
    pub digest: String,
}

/// Checks that every time-slice of the file sits on one daemon.
pub fn assert_slice_placement(w: &EigenWorkload, dist: &Distribution) -> Result<(), BenchError> {
    let ts = w.time_slice_bytes();
    for s in 0..w.n_modes * w.dims[3] {
        let ext = logical_to_physical(s * ts, ts, dist);
        if ext.len() != 1 {
            return Err(BenchError::Integrity(format!("time-slice {s} spans {} daemons", ext.len())));
        }
    }
    Ok(())
}

/// Writes the modes from every rank's portion, then reads the portions back
/// and reassembles every mode. Fails on any byte difference.
pub fn run_eigenmode(
    cluster: &Cluster,
    w: &EigenWorkload,
    path: &str,
    seed: u64,
    io: EigenIo,
) -> Result<EigenReport, BenchError> {
    w.validate()?;
    let iods = cluster.daemons().len() as u32;
    let dist = w.distribution(iods)?;
    assert_slice_placement(w, &dist)?;
    cluster.client()?.create(path, dist)?;
    let modes: Vec<Vec<u8>> = (0..w.n_modes).map(|m| w.mode_bytes(seed, m)).collect();
    let ranks: Vec<(Client, Option<GroupMember>)> = match io {
        EigenIo::Independent => {
            (0..w.n_procs).map(|_| cluster.client().map(|c| (c, None))).collect::<Result<_, _>>()?
        }
        EigenIo::Collective(_) => cluster.group(w.n_procs)?.into_iter().map(|(c, g)| (c, Some(g))).collect(),
    };
    let barrier = Barrier::new(w.n_procs);
    let file_size = w.file_size().expect("validated");

    let results = std::thread::scope(|s| {
        let handles: Vec<_> = ranks
            .into_iter()
            .enumerate()
            .map(|(rank, (client, group))| {
                let (barrier, modes) = (&barrier, &modes);
                s.spawn(move || -> Result<(f64, f64, Vec<Vec<u8>>), BenchError> {
                    match (io, group) {
                        (EigenIo::Collective(mode), Some(mut g)) => {
                            rank_collective(w, &client, &mut g, rank, path, modes, mode, barrier)
                        }
                        _ => rank_independent(w, &client, rank, path, modes, barrier),
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eigen worker panicked")).collect::<Result<Vec<_>, _>>()
    })?;

    // reassemble from the slices alone and compare with the generator
    let mut digest = Sha256::new();
    for (m, mode) in modes.iter().enumerate() {
        let mut full = vec![0u8; mode.len()];
        let base = m as u64 * w.vector_bytes();
        for (rank, (_, _, local)) in results.iter().enumerate() {
            let mut pos = 0;
            for (off, len) in w.runs(rank, m as u64) {
                let at = (off - base) as usize;
                full[at..at + len as usize].copy_from_slice(&local[m][pos..pos + len as usize]);
                pos += len as usize;
            }
        }
        if &full != mode {
            return Err(BenchError::Integrity(format!("mode {m} reassembled differently")));
        }
        digest.update(&full);
    }
    let max = |f: fn(&(f64, f64, Vec<Vec<u8>>)) -> f64| results.iter().map(f).fold(0.0, f64::max);
    Ok(EigenReport {
        file_size,
        write_bps: file_size as f64 / max(|r| r.0),
        read_bps: file_size as f64 / max(|r| r.1),
        digest: hex::encode(digest.finalize()),
    })
}

type RankResult = Result<(f64, f64, Vec<Vec<u8>>), BenchError>;

fn rank_independent(
    w: &EigenWorkload,
    client: &Client,
    rank: usize,
    path: &str,
    modes: &[Vec<u8>],
    barrier: &Barrier,
) -> RankResult {
    let t0 = Instant::now();
    let wrote = client.open(path).and_then(|mut h| {
        for (m, mode) in modes.iter().enumerate() {
            let base = m as u64 * w.vector_bytes();
            for (off, len) in w.runs(rank, m as u64) {
                let at = (off - base) as usize;
                client.write_at(&mut h, off, &mode[at..at + len as usize])?;
            }
        }
        client.close(&mut h)
    });
    let wt = t0.elapsed().as_secs_f64();
    barrier.wait();
    wrote?;
    let t1 = Instant::now();
    let mut h = client.open(path)?;
    let mut local = Vec::with_capacity(w.n_modes as usize);
    for m in 0..w.n_modes {
        let mut part = Vec::new();
        for (off, len) in w.runs(rank, m) {
            part.extend(client.read_at(&mut h, off, len)?);
        }
        local.push(part);
    }
    Ok((wt, t1.elapsed().as_secs_f64(), local))
}

/// The rank's runs over all modes form one view; each phase is a single
/// collective call.
#[allow(clippy::too_many_arguments)]
fn rank_collective(
    w: &EigenWorkload,
    client: &Client,
    g: &mut GroupMember,
    rank: usize,
    path: &str,
    modes: &[Vec<u8>],
    mode: CollectiveMode,
    barrier: &Barrier,
) -> RankResult {
    let runs: Vec<(u64, u64)> = (0..w.n_modes).flat_map(|m| w.runs(rank, m)).collect();
    let mut mine = Vec::new();
    for (m, bytes) in modes.iter().enumerate() {
        let base = m as u64 * w.vector_bytes();
        for (off, len) in w.runs(rank, m as u64) {
            let at = (off - base) as usize;
            mine.extend_from_slice(&bytes[at..at + len as usize]);
        }
    }
    let view = View::extent_list(runs)?;
    let t0 = Instant::now();
    let mut h = client.open(path)?;
    h.set_view(view.clone())?;
    collective_write(client, g, &mut h, 0, &mine, mode)?;
    client.close(&mut h)?;
    let wt = t0.elapsed().as_secs_f64();
    barrier.wait();
    let t1 = Instant::now();
    let mut h = client.open(path)?;
    h.set_view(view)?;
    let back = collective_read(client, g, &mut h, 0, mine.len() as u64, mode)?;
    let rt = t1.elapsed().as_secs_f64();
    let per_mode = mine.len() / w.n_modes as usize;
    Ok((wt, rt, back.chunks(per_mode).map(<[u8]>::to_vec).collect()))
}
