use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripefs::bench::eigen::{run_eigenmode, EigenIo, EigenWorkload};
use stripefs::bench::sim::{run_rw, saturation_sweep, SimProfile};
use stripefs::bench::stage::digest_of;
use stripefs::bench::{large_stripe_plan, trim_mean, ReadMode, RwConfig};
use stripefs::cluster::Cluster;
use stripefs::layout::{logical_to_physical, Distribution};

const MIB: u64 = 1 << 20;

/// Post-knee per-daemon write rate must sit within this fraction of the
/// disk write rate.
const DISK_RATE_TOLERANCE: f64 = 0.10;
const KNEE_RANGE: std::ops::RangeInclusive<usize> = 50..=52;
const MIN_WARM_OVER_COLD: f64 = 5.0;

pub fn saturation_curve() -> Result<String, String> {
    let prof = SimProfile::testbed();
    if prof.cache.capacity != 256 * MIB || prof.cache.dirty_threshold != 0.40 {
        return Err(format!("testbed profile drifted: {:?}", prof.cache));
    }
    let sweep = saturation_sweep(32, 2 * MIB, 64 * 1024, 8..=64, 3, &prof).map_err(|e| e.to_string())?;
    let again = saturation_sweep(32, 2 * MIB, 64 * 1024, 48..=54, 3, &prof).map_err(|e| e.to_string())?;
    let same = sweep.points.iter().filter(|(p, _)| (48..=54).contains(p)).copied().collect::<Vec<_>>();
    if same != again.points {
        return Err("the virtual clock is not deterministic".into());
    }
    let knee = sweep.knee().ok_or("no knee in the sweep")?;
    let rate = sweep.post_knee_per_iod_bps().ok_or("no post-knee points")?;
    let disk = prof.throttle.disk_write_bps;
    let detail = format!("knee at P={knee}, post-knee {:.2} MB/s per iod vs disk {:.2} MB/s", rate / 1e6, disk / 1e6);
    if !KNEE_RANGE.contains(&knee) || (rate - disk).abs() > DISK_RATE_TOLERANCE * disk {
        return Err(detail);
    }
    Ok(detail)
}

pub fn warm_vs_cold() -> Result<String, String> {
    let prof = SimProfile::testbed();
    let mut cfg = RwConfig::new(8, 4, 8 * MIB, 64 * 1024);
    let warm = run_rw(&cfg, &prof).map_err(|e| e.to_string())?;
    cfg.mode = ReadMode::Cold;
    let cold = run_rw(&cfg, &prof).map_err(|e| e.to_string())?;
    let ratio = warm.read_bps / cold.read_bps;
    let detail = format!(
        "warm {:.1} MB/s, cold {:.1} MB/s, ratio {ratio:.2}, cold from cache {}%",
        warm.read_bps / 1e6,
        cold.read_bps / 1e6,
        cold.served_from_cache_pct
    );
    if ratio < MIN_WARM_OVER_COLD || cold.served_from_cache_pct != 0.0 {
        return Err(detail);
    }
    Ok(detail)
}

/// Drops the minimum and the maximum by insertion sort, then sums from the
/// smallest kept value up.
fn trim_oracle(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = Vec::with_capacity(xs.len());
    for &x in xs {
        let at = v.iter().position(|&y| y > x).unwrap_or(v.len());
        v.insert(at, x);
    }
    let kept = &v[1..v.len() - 1];
    let mut sum = 0.0;
    for x in kept {
        sum += x;
    }
    sum / kept.len() as f64
}

pub fn trim_mean_rule() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7417);
    for i in 0..10_000 {
        let xs: Vec<f64> = (0..5)
            .map(|_| match rng.gen_range(0..3) {
                0 => rng.gen_range(0.0..1e9),
                1 => f64::from(rng.gen_range(0..4u32)),
                _ => rng.gen_range(-1e3..1e3),
            })
            .collect();
        let got = trim_mean(&xs).map_err(|e| e.to_string())?;
        let want = trim_oracle(&xs);
        if got.to_bits() != want.to_bits() {
            return Err(format!("list {i} {xs:?}: {got} vs {want}"));
        }
    }
    Ok("10000 lists agree bit for bit".into())
}

pub fn large_stripe() -> Result<String, String> {
    const P: u32 = 32;
    const S: u64 = MIB;
    let plan = large_stripe_plan(P, S).map_err(|e| e.to_string())?;
    if plan != (0..P).collect::<Vec<_>>() {
        return Err(format!("plan {plan:?}"));
    }
    let dist = Distribution::round_robin(S, P).map_err(|e| e.to_string())?;
    let mut seen = std::collections::BTreeSet::new();
    for r in 0..u64::from(P) {
        let ext = logical_to_physical(r * S, S, &dist);
        if ext.len() != 1 || ext[0].iod as u64 != r || ext[0].sub_offset != 0 || ext[0].length != S {
            return Err(format!("rank {r}: {ext:?}"));
        }
        seen.insert(ext[0].iod);
    }
    // and through a live cluster: each daemon ends up holding one rank's data
    let cluster = Cluster::sim(P).map_err(|e| e.to_string())?;
    let c = cluster.client().map_err(|e| e.to_string())?;
    let mut h = c.create("/pvfs1/large", dist).map_err(|e| e.to_string())?;
    for r in 0..u64::from(P) {
        c.write_at(&mut h, r * S, &vec![r as u8; S as usize]).map_err(|e| e.to_string())?;
    }
    let stats = c.stat(&h).map_err(|e| e.to_string())?;
    if stats.len() != P as usize || stats.iter().any(|s| s.size != S) {
        return Err(format!("sub-file sizes {:?}", stats.iter().map(|s| s.size).collect::<Vec<_>>()));
    }
    Ok(format!("{} ranks on {} distinct daemons, one extent each", P, seen.len()))
}

pub fn eigenmode() -> Result<String, String> {
    let full = EigenWorkload::new([16, 16, 16, 32], 300, 32).map_err(|e| e.to_string())?;
    // 12 spin-colour components on a 16^3 x 32 lattice
    const FULL_VECTOR_LEN: u64 = 1_572_864;
    if full.vector_len() != FULL_VECTOR_LEN || full.vector_len() != 12 * 16 * 16 * 16 * 32 {
        return Err(format!("vector length {}", full.vector_len()));
    }
    if full.file_size() != Some(300 * FULL_VECTOR_LEN * 16) {
        return Err(format!("file size {:?}", full.file_size()));
    }
    let desk = EigenWorkload::new([4, 4, 4, 8], 20, 8).map_err(|e| e.to_string())?;
    let cluster = Cluster::sim(8).map_err(|e| e.to_string())?;
    let report = run_eigenmode(&cluster, &desk, "/pvfs1/modes", 11, EigenIo::Independent).map_err(|e| e.to_string())?;
    let c = cluster.client().map_err(|e| e.to_string())?;
    let stored = digest_of(&c, "/pvfs1/modes").map_err(|e| e.to_string())?;
    if stored != report.digest || report.file_size != 20 * desk.vector_bytes() {
        return Err(format!("stored file digest {stored} differs from reassembly {}", report.digest));
    }
    Ok(format!("full file {} bytes; desk run of {} bytes reassembled", 300 * FULL_VECTOR_LEN * 16, report.file_size))
}
