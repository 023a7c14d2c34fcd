use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripefs::client::{Client, FileHandle};
use stripefs::cluster::Cluster;
use stripefs::layout::{Distribution, View};

const SCHEDULES: u64 = 1000;
const MAX_PROCS: usize = 8;
const IODS: u32 = 8;
const MAX_FILE: u64 = 8 << 20;

/// File offsets of the view bytes from `start` on, computed without the
/// library's own view code.
pub fn view_bytes(view: &View, start: u64) -> Box<dyn Iterator<Item = u64> + '_> {
    match view {
        View::Full => Box::new(start..),
        &View::BlockCyclic { first_offset, block, stride } => {
            Box::new((start..).map(move |v| first_offset + (v / block) * stride + v % block))
        }
        View::ExtentList(list) => Box::new(list.iter().flat_map(|&(o, l)| o..o + l).skip(start as usize)),
    }
}

/// View bytes that land below `limit`.
fn view_room(view: &View, limit: u64) -> u64 {
    match view {
        View::Full => limit,
        &View::BlockCyclic { first_offset, block, stride } => {
            if limit <= first_offset {
                return 0;
            }
            let span = limit - first_offset;
            (span / stride) * block + (span % stride).min(block)
        }
        View::ExtentList(list) => list.iter().map(|&(o, l)| l.min(limit.saturating_sub(o))).sum(),
    }
}

pub fn random_dist(rng: &mut impl Rng, max_iods: u32) -> Distribution {
    let n = rng.gen_range(1..=max_iods);
    match rng.gen_range(0..3) {
        0 => {
            let stripe = [512, 4096, 65536, 1 << 20][rng.gen_range(0..4)];
            Distribution::RoundRobin(stripe_spec(stripe, n, rng.gen_range(0..n)))
        }
        1 => Distribution::block_cyclic([1000, 8192, 100_000][rng.gen_range(0..3)], n).unwrap(),
        _ => {
            let k = rng.gen_range(1..=6);
            let mut ext: Vec<(u32, u64)> =
                (0..k).map(|_| (rng.gen_range(0..n), rng.gen_range(1024..=131_072))).collect();
            // every daemon of the file appears at least once
            ext.extend((0..n).map(|i| (i, rng.gen_range(1024..=65536))));
            Distribution::irregular(ext).unwrap()
        }
    }
}

fn stripe_spec(stripe: u64, n: u32, base: u32) -> stripefs::layout::StripeSpec {
    stripefs::layout::StripeSpec::with_base(stripe, n, base).unwrap()
}

fn random_view(rng: &mut impl Rng, file: u64) -> View {
    match rng.gen_range(0..3) {
        0 => View::Full,
        1 => {
            let block = rng.gen_range(512..=65536);
            let stride = block * rng.gen_range(1..=4);
            View::block_cyclic(rng.gen_range(0..=file / 2), block, stride).unwrap()
        }
        _ => {
            let mut cuts: Vec<u64> = (0..rng.gen_range(2..=16)).map(|_| rng.gen_range(0..file)).collect();
            cuts.sort();
            cuts.dedup();
            let list: Vec<(u64, u64)> = cuts.chunks_exact(2).map(|c| (c[0], c[1] - c[0])).collect();
            if list.is_empty() {
                View::Full
            } else {
                View::extent_list(list).unwrap()
            }
        }
    }
}

fn schedule(cluster: &Cluster, clients: &[Client], k: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k);
    let file = if k.is_multiple_of(50) { MAX_FILE } else { (4096f64 * 2048f64.powf(rng.gen::<f64>())) as u64 };
    let views_on = rng.gen_bool(0.5);
    let p = rng.gen_range(1..=MAX_PROCS);
    let path = format!("/pvfs1/rt{k}");
    let dist = random_dist(&mut rng, IODS);
    let err = |e: stripefs::client::ClientError| format!("schedule {k}: {e}");

    let mut handles: Vec<FileHandle> = Vec::with_capacity(p);
    handles.push(clients[0].create(&path, dist.clone()).map_err(err)?);
    for c in &clients[1..p] {
        handles.push(c.open(&path).map_err(err)?);
    }
    if views_on {
        for h in &mut handles {
            h.set_view(random_view(&mut rng, file)).map_err(err)?;
        }
    }

    let mut reference = vec![0u8; file as usize];
    let mut size = 0u64;
    let mut moved = 0u64;
    for op in 0..rng.gen_range(6..=16) {
        let r = rng.gen_range(0..p);
        let view = handles[r].view().clone();
        let room = view_room(&view, file);
        if room == 0 {
            continue;
        }
        let offset = rng.gen_range(0..room);
        let cap = if rng.gen_bool(0.5) { 4096 } else { (file / 4).max(1) };
        let len = rng.gen_range(1..=cap.min(room - offset));
        if rng.gen_bool(0.6) {
            let mut data = vec![0u8; len as usize];
            rng.fill_bytes(&mut data);
            clients[r].write_at(&mut handles[r], offset, &data).map_err(err)?;
            for (b, f) in data.iter().zip(view_bytes(&view, offset)) {
                reference[f as usize] = *b;
                size = size.max(f + 1);
            }
        } else {
            let got = clients[r].read_at(&mut handles[r], offset, len).map_err(err)?;
            let want: Vec<u8> = view_bytes(&view, offset)
                .take(len as usize)
                .take_while(|&f| f < size)
                .map(|f| reference[f as usize])
                .collect();
            if got != want {
                return Err(format!(
                    "schedule {k} op {op}: rank {r} read {} bytes at {offset}, expected {}",
                    got.len(),
                    want.len()
                ));
            }
        }
        moved += len;
    }
    for (c, h) in clients.iter().zip(&mut handles) {
        c.close(h).map_err(err)?;
    }

    let checker = cluster.client().map_err(|e| e.to_string())?;
    let mut h = checker.open(&path).map_err(err)?;
    if h.meta().logical_size != size {
        return Err(format!("schedule {k}: size {} expected {size}", h.meta().logical_size));
    }
    let whole = checker.read_at(&mut h, 0, file).map_err(err)?;
    if whole[..] != reference[..size as usize] {
        return Err(format!("schedule {k}: final contents differ"));
    }
    checker.close(&mut h).map_err(err)?;
    checker.remove(&path).map_err(err)?;
    Ok(moved + size)
}

pub fn round_trip_integrity() -> Result<String, String> {
    let cluster = Cluster::sim(IODS).map_err(|e| e.to_string())?;
    let clients = (0..MAX_PROCS).map(|_| cluster.client()).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let mut moved = 0;
    for k in 0..SCHEDULES {
        moved += schedule(&cluster, &clients, k)?;
    }
    Ok(format!("{SCHEDULES} schedules, {:.0} MiB checked", moved as f64 / (1u64 << 20) as f64))
}
