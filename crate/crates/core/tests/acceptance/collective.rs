use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripefs::client::collective::{collective_read, collective_write};
use stripefs::client::{Align, Client, CollectiveMode};
use stripefs::cluster::Cluster;
use stripefs::layout::{Distribution, View};

const INSTANCES: u64 = 500;
const MAX_RANKS: usize = 8;
const MAX_BYTES: u64 = 1 << 20;
const IODS: u32 = 8;

struct Rank {
    view: View,
    write_at: u64,
    data: Vec<u8>,
    read_at: u64,
    read_len: u64,
}

fn random_rank(rng: &mut impl Rng, rank: usize, p: usize) -> Rank {
    // mostly small requests with the occasional full megabyte
    let mut size = || {
        if rng.gen_bool(0.1) {
            MAX_BYTES
        } else {
            (2f64.powf(rng.gen_range(0.0..20.0))) as u64
        }
    };
    let (len, rlen) = (size(), size());
    let view = match rng.gen_range(0..3) {
        0 => View::Full,
        // interleaved blocks, the usual collective pattern
        1 => {
            let block = [1000, 4096, 65536][rng.gen_range(0..3)];
            View::block_cyclic(rank as u64 * block, block, p as u64 * block).unwrap()
        }
        _ => {
            let block = rng.gen_range(1..=32768);
            View::block_cyclic(rng.gen_range(0..MAX_BYTES), block, block * rng.gen_range(1..=3)).unwrap()
        }
    };
    let mut data = vec![0u8; len as usize];
    rng.fill_bytes(&mut data);
    Rank { view, write_at: rng.gen_range(0..MAX_BYTES), data, read_at: rng.gen_range(0..2 * MAX_BYTES), read_len: rlen }
}

fn whole(c: &Client, path: &str) -> Result<Vec<u8>, String> {
    let mut h = c.open(path).map_err(|e| e.to_string())?;
    let size = h.meta().logical_size;
    c.read_at(&mut h, 0, size).map_err(|e| e.to_string())
}

fn instance(cluster: &Cluster, checker: &Client, k: u64) -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc011_0000 + k);
    let p = rng.gen_range(1..=MAX_RANKS);
    let stripe = [4096, 65536, 1 << 20][rng.gen_range(0..3)];
    let dist = Distribution::round_robin(stripe, rng.gen_range(1..=IODS)).unwrap();
    let align = if rng.gen_bool(0.5) { Align::Stripe } else { Align::Naive };
    let modes = [("twophase", CollectiveMode::TwoPhase(align)), ("diskdirected", CollectiveMode::DiskDirected)];
    let ranks: Vec<Rank> = (0..p).map(|r| random_rank(&mut rng, r, p)).collect();
    let e = |e: stripefs::client::ClientError| format!("instance {k}: {e}");

    // reference: independent writes in rank order, so higher ranks win
    let ind = format!("/pvfs1/ind{k}");
    let mut h = checker.create(&ind, dist.clone()).map_err(e)?;
    for r in &ranks {
        h.set_view(r.view.clone()).map_err(e)?;
        checker.write_at(&mut h, r.write_at, &r.data).map_err(e)?;
    }
    let mut expected_reads = Vec::new();
    for r in &ranks {
        h.set_view(r.view.clone()).map_err(e)?;
        expected_reads.push(checker.read_at(&mut h, r.read_at, r.read_len).map_err(e)?);
    }
    checker.close(&mut h).map_err(e)?;
    for (name, _) in &modes {
        checker.create(&format!("/pvfs1/{name}{k}"), dist.clone()).map_err(e)?;
    }

    let group = cluster.group(p).map_err(|e| e.to_string())?;
    let results: Vec<Result<Vec<Vec<u8>>, String>> = std::thread::scope(|s| {
        let workers: Vec<_> = group
            .into_iter()
            .zip(&ranks)
            .map(|((client, mut g), r)| {
                let (ind, modes) = (&ind, &modes);
                s.spawn(move || -> Result<Vec<Vec<u8>>, String> {
                    let mut reads = Vec::new();
                    for (name, mode) in modes {
                        let mut h = client.open(&format!("/pvfs1/{name}{k}")).map_err(e)?;
                        h.set_view(r.view.clone()).map_err(e)?;
                        collective_write(&client, &mut g, &mut h, r.write_at, &r.data, *mode).map_err(e)?;
                        client.close(&mut h).map_err(e)?;
                        let mut h = client.open(ind).map_err(e)?;
                        h.set_view(r.view.clone()).map_err(e)?;
                        reads.push(collective_read(&client, &mut g, &mut h, r.read_at, r.read_len, *mode).map_err(e)?);
                        client.close(&mut h).map_err(e)?;
                    }
                    Ok(reads)
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap_or_else(|_| Err("rank panicked".into()))).collect()
    });

    for (rank, got) in results.into_iter().enumerate() {
        for (m, read) in got?.iter().enumerate() {
            if *read != expected_reads[rank] {
                return Err(format!("instance {k}: {} read of rank {rank} differs", modes[m].0));
            }
        }
    }
    let reference = whole(checker, &ind)?;
    for (name, _) in &modes {
        let path = format!("/pvfs1/{name}{k}");
        if whole(checker, &path)? != reference {
            return Err(format!("instance {k}: {name} file differs from independent writes ({p} ranks, {align:?})"));
        }
        checker.remove(&path).map_err(e)?;
    }
    checker.remove(&ind).map_err(e)?;
    Ok(ranks.iter().map(|r| r.data.len() as u64 + r.read_len).sum())
}

pub fn collective_equals_independent() -> Result<String, String> {
    let cluster = Cluster::sim(IODS).map_err(|e| e.to_string())?;
    let checker = cluster.client().map_err(|e| e.to_string())?;
    let mut bytes = 0;
    for k in 0..INSTANCES {
        bytes += instance(&cluster, &checker, k)?;
    }
    Ok(format!("{INSTANCES} instances in both modes, {:.0} MiB per mode", bytes as f64 / (1u64 << 20) as f64))
}
