use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripefs::transport::{
    address_to_node_id, frame, node_id_to_address, Address, Datagram, NodeId, SimParams, SimTransport, SocketTransport,
    Transport,
};

const MESSAGES: usize = 10_000;
const NODES: u32 = 8;
const DRAIN: Duration = Duration::from_secs(60);

/// `magic | src | dst | len | payload` for src 0x01020304, dst 7 and
/// payload `de ad`, written out by hand.
const GOLDEN: [u8; 18] = [
    0x46, 0x54, 0x53, 0x50, // "PSTF"
    0x04, 0x03, 0x02, 0x01, // src
    0x07, 0x00, 0x00, 0x00, // dst
    0x02, 0x00, 0x00, 0x00, // len
    0xde, 0xad,
];

fn bijection() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb1);
    for _ in 0..32 {
        let n = rng.gen_range(1..=4096u32);
        let mut hosts: Vec<u32> = (0..n).map(|i| node_id_to_address(NodeId(i)).host_index).collect();
        for (i, &h) in hosts.iter().enumerate() {
            if address_to_node_id(Address { host_index: h, port: 0 }).map_err(|e| e.to_string())? != NodeId(i as u32) {
                return Err(format!("host {h} does not map back to {i}"));
            }
        }
        hosts.sort_unstable();
        if hosts != (1..=n).collect::<Vec<_>>() {
            return Err(format!("addresses of 0..{n} are not 1..={n}"));
        }
    }
    if address_to_node_id(Address { host_index: 0, port: 0 }).is_ok() {
        return Err("host index 0 accepted".into());
    }
    Ok(())
}

/// Payload of the `seq`-th message from `src` to `dst`, derived from the
/// triple alone so the receiver can recompute it.
fn body(src: u32, dst: u32, seq: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(((src as u64) << 40) ^ ((dst as u64) << 32) ^ seq);
    let mut b = seq.to_le_bytes().to_vec();
    let extra = if rng.gen_bool(0.02) { rng.gen_range(0..=60_000) } else { rng.gen_range(0..512) };
    let at = b.len();
    b.resize(at + extra, 0);
    rng.fill_bytes(&mut b[at..]);
    b
}

fn soak(t: Arc<dyn Transport>, name: &str) -> Result<(), String> {
    let (tx, rx) = mpsc::channel::<Datagram>();
    let regs = (0..NODES)
        .map(|i| {
            let tx = Mutex::new(tx.clone());
            t.register(NodeId(i), Arc::new(move |d: Datagram| tx.lock().unwrap().send(d).unwrap()))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;

    let per_sender = MESSAGES / NODES as usize;
    let sent: Vec<BTreeMap<u32, u64>> = std::thread::scope(|s| {
        let senders: Vec<_> = (0..NODES)
            .map(|src| {
                let t = t.clone();
                s.spawn(move || -> Result<BTreeMap<u32, u64>, String> {
                    let mut rng = ChaCha8Rng::seed_from_u64(0x50a4 + src as u64);
                    let mut next: BTreeMap<u32, u64> = BTreeMap::new();
                    for _ in 0..per_sender {
                        let dst = rng.gen_range(0..NODES);
                        let seq = next.entry(dst).or_insert(0);
                        let r = t.send(NodeId(src), NodeId(dst), &body(src, dst, *seq)).map_err(|e| e.to_string())?;
                        if r.seq != *seq {
                            return Err(format!("receipt seq {} for message {seq} {src}->{dst}", r.seq));
                        }
                        *seq += 1;
                    }
                    Ok(next)
                })
            })
            .collect();
        senders.into_iter().map(|h| h.join().unwrap()).collect::<Result<Vec<_>, _>>()
    })?;

    let mut seen: HashMap<(u32, u32), u64> = HashMap::new();
    for i in 0..MESSAGES {
        let d = rx.recv_timeout(DRAIN).map_err(|_| format!("{name}: only {i} of {MESSAGES} messages arrived"))?;
        let (src, dst) = (d.src.0, d.dst.0);
        let expect = seen.entry((src, dst)).or_insert(0);
        if d.payload != body(src, dst, *expect) {
            return Err(format!("{name}: message {expect} {src}->{dst} out of order or corrupted"));
        }
        *expect += 1;
    }
    if let Ok(d) = rx.recv_timeout(Duration::from_millis(200)) {
        return Err(format!("{name}: extra delivery {}->{}", d.src, d.dst));
    }
    for (src, counts) in sent.iter().enumerate() {
        for (&dst, &n) in counts {
            if seen.get(&(src as u32, dst)).copied().unwrap_or(0) != n {
                return Err(format!("{name}: {src}->{dst} sent {n}, delivered {:?}", seen.get(&(src as u32, dst))));
            }
        }
    }
    drop(regs);
    Ok(())
}

fn golden_frames() -> Result<(), String> {
    let payload = [0xde, 0xad];
    if frame::encode(NodeId(0x0102_0304), NodeId(7), &payload) != GOLDEN {
        return Err("encoded frame differs from the fixture".into());
    }

    // what the socket backend puts on the wire
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let t = SocketTransport::new(HashMap::from([(NodeId(7), listener.local_addr().unwrap())]));
    t.send(NodeId(0x0102_0304), NodeId(7), &payload).map_err(|e| e.to_string())?;
    let (mut conn, _) = listener.accept().map_err(|e| e.to_string())?;
    let mut wire = [0u8; GOLDEN.len()];
    conn.read_exact(&mut wire).map_err(|e| e.to_string())?;
    if wire != GOLDEN {
        return Err(format!("socket wrote {wire:02x?}"));
    }

    // and what it accepts from a raw peer
    let t = SocketTransport::new(HashMap::new());
    let (tx, rx) = mpsc::channel();
    let tx = Mutex::new(tx);
    let _reg = t
        .register(NodeId(7), Arc::new(move |d: Datagram| tx.lock().unwrap().send(d).unwrap()))
        .map_err(|e| e.to_string())?;
    let mut raw = TcpStream::connect(t.local_addr(NodeId(7)).unwrap()).map_err(|e| e.to_string())?;
    raw.write_all(&GOLDEN).map_err(|e| e.to_string())?;
    let d = rx.recv_timeout(Duration::from_secs(10)).map_err(|_| "raw frame not delivered".to_string())?;
    if d != (Datagram { src: NodeId(0x0102_0304), dst: NodeId(7), payload: payload.to_vec() }) {
        return Err(format!("raw frame decoded as {d:?}"));
    }
    Ok(())
}

pub fn transport_contract() -> Result<String, String> {
    bijection()?;
    soak(Arc::new(SimTransport::new(SimParams::default()).map_err(|e| e.to_string())?), "sim")?;
    soak(Arc::new(SocketTransport::new(HashMap::new())), "socket")?;
    golden_frames()?;
    Ok(format!("bijection; {MESSAGES}-message soak on sim and socket; golden frames"))
}
