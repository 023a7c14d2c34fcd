use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripefs::client::Client;
use stripefs::cluster::Cluster;
use stripefs::config::ClusterConfig;
use stripefs::metamgr::PartitionConfig;

use super::roundtrip::random_dist;

const NAMESPACES: u64 = 100;

fn dumps(cluster: &Cluster) -> Result<Vec<String>, String> {
    cluster
        .manager_nodes()
        .into_iter()
        .map(|n| cluster.manager(n).map(|m| m.dump()).ok_or_else(|| format!("manager on {n} is down")))
        .collect()
}

/// Random creates, size changes and removals; `model` tracks path -> size.
fn churn(
    rng: &mut impl Rng,
    c: &Client,
    parts: &[(String, u32)],
    model: &mut BTreeMap<String, u64>,
) -> Result<(), String> {
    for _ in 0..rng.gen_range(5..=40) {
        let (part, width) = &parts[rng.gen_range(0..parts.len())];
        let path = format!("/{part}/f{}", rng.gen_range(0..16));
        let e = |e: stripefs::client::ClientError| format!("{path}: {e}");
        match (model.contains_key(&path), rng.gen_range(0..4)) {
            (false, _) => {
                let mut h = c.create(&path, random_dist(rng, *width)).map_err(e)?;
                let size = if rng.gen_bool(0.5) {
                    let end = rng.gen_range(1..1u64 << 40);
                    c.write_at(&mut h, end - 1, &[7]).map_err(e)?;
                    end
                } else {
                    0
                };
                c.close(&mut h).map_err(e)?;
                model.insert(path, size);
            }
            (true, 0) => {
                c.remove(&path).map_err(e)?;
                model.remove(&path);
            }
            (true, _) => {
                let mut h = c.open(&path).map_err(e)?;
                let end = rng.gen_range(1..1u64 << 41);
                c.write_at(&mut h, end - 1, &[9]).map_err(e)?;
                c.close(&mut h).map_err(e)?;
                let size = model.get_mut(&path).unwrap();
                *size = (*size).max(end);
            }
        }
    }
    Ok(())
}

fn check_model(c: &Client, parts: &[(String, u32)], model: &BTreeMap<String, u64>) -> Result<(), String> {
    let mut listed = BTreeMap::new();
    for (p, _) in parts {
        for m in c.list(p).map_err(|e| e.to_string())? {
            listed.insert(m.path, m.logical_size);
        }
    }
    if &listed != model {
        return Err(format!("listing {listed:?} differs from model {model:?}"));
    }
    Ok(())
}

fn namespace(k: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0_0000 + k);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ClusterConfig::single_partition(4);
    if rng.gen_bool(0.5) {
        cfg.partitions.push(PartitionConfig { name: "pvfs2".into(), nodes: vec![4, 5, 6] });
    }
    cfg.metamgr.journal_path = Some(dir.path().join("meta.journal"));
    let parts: Vec<(String, u32)> = cfg.partitions.iter().map(|p| (p.name.clone(), p.nodes.len() as u32)).collect();
    let cluster = Cluster::launch(cfg).map_err(|e| e.to_string())?;
    let c = cluster.client().map_err(|e| e.to_string())?;
    let mut model = BTreeMap::new();

    // two kill/restart cycles with work before, between and after
    for round in 0..2 {
        churn(&mut rng, &c, &parts, &mut model)?;
        let before = dumps(&cluster)?;
        for n in cluster.manager_nodes() {
            cluster.stop_manager(n).map_err(|e| e.to_string())?;
        }
        if c.list("pvfs1").is_ok() {
            return Err(format!("namespace {k}: manager answered while down"));
        }
        for n in cluster.manager_nodes() {
            cluster.start_manager(n).map_err(|e| e.to_string())?;
        }
        let after = dumps(&cluster)?;
        if before != after {
            return Err(format!("namespace {k} round {round}: dump changed across restart"));
        }
        check_model(&c, &parts, &model).map_err(|m| format!("namespace {k} round {round}: {m}"))?;
    }
    churn(&mut rng, &c, &parts, &mut model)?;
    check_model(&c, &parts, &model).map_err(|m| format!("namespace {k} after restarts: {m}"))
}

pub fn manager_restart() -> Result<String, String> {
    for k in 0..NAMESPACES {
        namespace(k)?;
    }
    Ok(format!("{NAMESPACES} namespaces, two restarts each, dumps identical"))
}
