//! Staging: copy a local file into the file system and prove it arrived.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::BenchError;
use crate::client::Client;
use crate::layout::Distribution;

pub const CHUNK: usize = 4 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub bytes: u64,
    /// SHA-256 of the source, equal to that of the read-back copy
    pub digest: String,
    pub elapsed: Duration,
}

/// Copies `src` to `dst` chunk by chunk, optionally pacing reads of the
/// source to `source_bps`, then reads `dst` back and compares digests.
pub fn stage_copy(
    client: &Client,
    src: &Path,
    dst: &str,
    dist: Distribution,
    source_bps: Option<f64>,
) -> Result<StageReport, BenchError> {
    let t0 = Instant::now();
    let mut input = File::open(src)?;
    let mut h = client.create(dst, dist)?;
    let mut src_digest = Sha256::new();
    let mut buf = vec![0u8; CHUNK];
    let mut off = 0u64;
    loop {
        let n = read_full(&mut input, &mut buf)?;
        if n == 0 {
            break;
        }
        src_digest.update(&buf[..n]);
        client.write_at(&mut h, off, &buf[..n])?;
        off += n as u64;
        if let Some(rate) = source_bps {
            let due = Duration::from_secs_f64(off as f64 / rate);
            if let Some(wait) = due.checked_sub(t0.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }
    let size = client.close(&mut h)?;
    if size != off {
        return Err(BenchError::Integrity(format!("copied {off} bytes but the file holds {size}")));
    }
    let src_digest = hex::encode(src_digest.finalize());
    let back = digest_of(client, dst)?;
    if back != src_digest {
        return Err(BenchError::Integrity(format!("{dst} differs from {}", src.display())));
    }
    Ok(StageReport { bytes: off, digest: src_digest, elapsed: t0.elapsed() })
}

/// SHA-256 of a file in the file system, read sequentially.
pub fn digest_of(client: &Client, path: &str) -> Result<String, BenchError> {
    let mut h = client.open(path)?;
    let size = h.meta().logical_size;
    let mut d = Sha256::new();
    let mut off = 0;
    while off < size {
        let chunk = client.read_at(&mut h, off, (CHUNK as u64).min(size - off))?;
        if chunk.is_empty() {
            break;
        }
        off += chunk.len() as u64;
        d.update(&chunk);
    }
    Ok(hex::encode(d.finalize()))
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Throughput bound of a staging copy on the modelled hardware.
pub fn modelled_stage_bps(source_bps: f64, network_bps: f64) -> f64 {
    source_bps.min(network_bps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Cluster;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn copy_of_ten_mib_matches() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        let mut data = vec![0u8; 10 << 20];
        rand_chacha::ChaCha8Rng::seed_from_u64(3).fill_bytes(&mut data);
        std::fs::write(&src, &data).unwrap();
        let cluster = Cluster::sim(4).unwrap();
        let c = cluster.client().unwrap();
        let r = stage_copy(&c, &src, "/pvfs1/staged", Distribution::round_robin(65536, 4).unwrap(), None).unwrap();
        assert_eq!(r.bytes, 10 << 20);
        assert_eq!(r.digest, hex::encode(Sha256::digest(&data)));
        assert_eq!(digest_of(&c, "/pvfs1/staged").unwrap(), r.digest);
    }

    #[test]
    fn missing_source_is_an_io_error() {
        let cluster = Cluster::sim(1).unwrap();
        let c = cluster.client().unwrap();
        let e =
            stage_copy(&c, Path::new("/nonexistent/x"), "/pvfs1/y", Distribution::round_robin(4096, 1).unwrap(), None);
        assert!(matches!(e, Err(BenchError::Io(_))));
    }

    #[test]
    fn bound_is_the_slower_side() {
        assert_eq!(modelled_stage_bps(40e6, 93e6), 40e6);
        assert_eq!(modelled_stage_bps(400e6, 93e6), 93e6);
    }
}
