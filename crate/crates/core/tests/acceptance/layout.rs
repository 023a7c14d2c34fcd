use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripefs::layout::{logical_to_physical, physical_to_logical, Distribution, PhysExtent, StripeSpec};

const INSTANCES: usize = 10_000;
const STRIPES: [u64; 3] = [1, 4096, 65536];
const MAX_LEN: u64 = 40_000;

/// Places every byte on its own, then merges neighbours that continue the
/// same sub-file run.
fn brute_force(offset: u64, length: u64, s: &StripeSpec) -> Vec<PhysExtent> {
    let n = u64::from(s.n_iods);
    let mut out: Vec<PhysExtent> = Vec::new();
    for b in offset..offset + length {
        let unit = b / s.stripe_size;
        let iod = ((unit + u64::from(s.base_iod)) % n) as u32;
        let sub = (unit / n) * s.stripe_size + b % s.stripe_size;
        match out.last_mut() {
            Some(e) if e.iod == iod && e.sub_offset + e.length == sub => e.length += 1,
            _ => out.push(PhysExtent { iod, sub_offset: sub, length: 1, logical_offset: b }),
        }
    }
    out
}

pub fn oracle_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a70);
    let mut bytes = 0u64;
    for i in 0..INSTANCES {
        let stripe = STRIPES[rng.gen_range(0..STRIPES.len())];
        let n = rng.gen_range(1..=64u32);
        let spec = StripeSpec::with_base(stripe, n, rng.gen_range(0..n)).map_err(|e| e.to_string())?;
        // mostly far into the file, sometimes at the very start
        let offset =
            if rng.gen_bool(0.2) { rng.gen_range(0..4 * stripe * u64::from(n)) } else { rng.gen_range(0..1u64 << 40) };
        let length = rng.gen_range(0..=MAX_LEN);
        let dist = Distribution::RoundRobin(spec);
        let got = logical_to_physical(offset, length, &dist);
        let want = brute_force(offset, length, &spec);
        if got != want {
            return Err(format!(
                "instance {i}: offset {offset} length {length} {spec:?}: {} extents vs {}",
                got.len(),
                want.len()
            ));
        }
        for e in &got {
            let back = physical_to_logical(e.iod, e.sub_offset, &dist).map_err(|e| e.to_string())?;
            if back != e.logical_offset {
                return Err(format!("instance {i}: inverse of {e:?} gives {back}"));
            }
        }
        bytes += length;
    }
    Ok(format!("{INSTANCES} instances, {bytes} bytes placed individually"))
}
