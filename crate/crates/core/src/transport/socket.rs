use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::thread;

use log::{debug, warn};

use super::frame;
use super::mailbox::Mailbox;
use super::{Handler, NodeId, Receipt, Registration, Transport, TransportError, DEFAULT_MTU};

type Stream = Arc<Mutex<BufWriter<TcpStream>>>;

/// TCP backend. One stream carries each `(src, dst)` direction for its whole
/// life, which gives per-pair ordering for free.
///
/// A node without a configured address can still receive replies: frames
/// sent to it travel back over the stream its peer accepted from it.
#[derive(Clone)]
pub struct SocketTransport {
    inner: Arc<Inner>,
}

struct Inner {
    mtu: usize,
    addrs: RwLock<HashMap<NodeId, SocketAddr>>,
    local: RwLock<HashMap<NodeId, LocalNode>>,
    /// keyed by (sender, receiver)
    streams: Mutex<HashMap<(NodeId, NodeId), Stream>>,
    seqs: Mutex<HashMap<(NodeId, NodeId), u64>>,
}

struct LocalNode {
    mailbox: Mailbox,
    stop: Arc<AtomicBool>,
    listen_addr: SocketAddr,
}

impl SocketTransport {
    /// `addrs` is the static address book (`nodes[i].host/port`). Nodes
    /// registered without an entry listen on an ephemeral loopback port.
    pub fn new(addrs: HashMap<NodeId, SocketAddr>) -> Self {
        Self::with_mtu(addrs, DEFAULT_MTU)
    }

    pub fn with_mtu(addrs: HashMap<NodeId, SocketAddr>, mtu: usize) -> Self {
        SocketTransport {
            inner: Arc::new(Inner {
                mtu,
                addrs: RwLock::new(addrs),
                local: RwLock::new(HashMap::new()),
                streams: Mutex::new(HashMap::new()),
                seqs: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn local_addr(&self, id: NodeId) -> Option<SocketAddr> {
        self.inner.local.read().unwrap().get(&id).map(|n| n.listen_addr)
    }
}

impl Inner {
    fn deliver(&self, d: super::Datagram) {
        let local = self.local.read().unwrap();
        match local.get(&d.dst) {
            Some(node) if !node.stop.load(Ordering::SeqCst) => {
                node.mailbox.post(d);
            }
            _ => debug!("dropping frame for unregistered {}", d.dst),
        }
    }

    /// Reads frames from `stream` until it closes. Every frame teaches us a
    /// return path `(frame.dst -> frame.src)` over this same stream.
    fn spawn_reader(self: &Arc<Self>, stream: TcpStream, writer: Stream) {
        let weak = Arc::downgrade(self);
        let mtu = self.mtu;
        thread::spawn(move || {
            let mut reader = BufReader::new(stream);
            loop {
                match frame::read_frame(&mut reader, mtu) {
                    Ok(Some(d)) => {
                        let Some(inner) = weak.upgrade() else { break };
                        inner.streams.lock().unwrap().entry((d.dst, d.src)).or_insert_with(|| writer.clone());
                        inner.deliver(d);
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!("frame reader stopped: {e}");
                        break;
                    }
                }
            }
        });
    }

    fn stream_to(self: &Arc<Self>, src: NodeId, dst: NodeId) -> Result<Stream, TransportError> {
        if let Some(s) = self.streams.lock().unwrap().get(&(src, dst)) {
            return Ok(s.clone());
        }
        let addr = self.addrs.read().unwrap().get(&dst).copied().ok_or(TransportError::Unreachable(dst))?;
        let tcp = TcpStream::connect(addr).map_err(|_| TransportError::Unreachable(dst))?;
        tcp.set_nodelay(true).ok();
        let read_half = tcp.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
        let writer: Stream = Arc::new(Mutex::new(BufWriter::new(tcp)));
        let chosen = self.streams.lock().unwrap().entry((src, dst)).or_insert_with(|| writer.clone()).clone();
        self.spawn_reader(read_half, writer);
        Ok(chosen)
    }
}

impl Transport for SocketTransport {
    fn register(&self, id: NodeId, handler: Handler) -> Result<Registration, TransportError> {
        let mut local = self.inner.local.write().unwrap();
        if local.contains_key(&id) {
            return Err(TransportError::AlreadyRegistered(id));
        }
        let configured = self.inner.addrs.read().unwrap().get(&id).copied();
        let bind = configured.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 0)));
        let listener = TcpListener::bind(bind).map_err(|e| TransportError::Io(format!("bind {bind}: {e}")))?;
        let listen_addr = listener.local_addr().map_err(|e| TransportError::Io(e.to_string()))?;
        if configured.is_none() {
            self.inner.addrs.write().unwrap().insert(id, listen_addr);
        }
        let stop = Arc::new(AtomicBool::new(false));
        let accepted = Arc::new(Mutex::new(Vec::new()));
        local.insert(id, LocalNode { mailbox: Mailbox::spawn(id, handler), stop: stop.clone(), listen_addr });
        drop(local);

        let weak: Weak<Inner> = Arc::downgrade(&self.inner);
        let accept_stop = stop.clone();
        let accept_list = accepted.clone();
        thread::Builder::new()
            .name(format!("accept-{}", id.0))
            .spawn(move || {
                for conn in listener.incoming() {
                    if accept_stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(tcp) = conn else { continue };
                    let Some(inner) = weak.upgrade() else { break };
                    tcp.set_nodelay(true).ok();
                    let (Ok(read_half), Ok(keep)) = (tcp.try_clone(), tcp.try_clone()) else {
                        continue;
                    };
                    accept_list.lock().unwrap().push(keep);
                    inner.spawn_reader(read_half, Arc::new(Mutex::new(BufWriter::new(tcp))));
                }
            })
            .map_err(|e| TransportError::Io(e.to_string()))?;

        let weak: Weak<Inner> = Arc::downgrade(&self.inner);
        Ok(Registration::new(id, move || {
            stop.store(true, Ordering::SeqCst);
            // wake the accept loop so it observes the stop flag
            let _ = TcpStream::connect(listen_addr);
            for s in accepted.lock().unwrap().drain(..) {
                let _ = s.shutdown(Shutdown::Both);
            }
            if let Some(inner) = weak.upgrade() {
                inner.local.write().unwrap().remove(&id);
                if configured.is_none() {
                    inner.addrs.write().unwrap().remove(&id);
                }
                inner.streams.lock().unwrap().retain(|&(s, d), _| s != id && d != id);
            }
        }))
    }

    fn send(&self, src: NodeId, dst: NodeId, payload: &[u8]) -> Result<Receipt, TransportError> {
        if payload.len() > self.inner.mtu {
            return Err(TransportError::FragmentationRequired { len: payload.len(), mtu: self.inner.mtu });
        }
        let stream = self.inner.stream_to(src, dst)?;
        let mut seqs = self.inner.seqs.lock().unwrap();
        let seq = seqs.entry((src, dst)).or_insert(0);
        let mut w = stream.lock().unwrap();
        if let Err(e) = frame::write_frame(&mut *w, src, dst, payload) {
            warn!("send {src}->{dst} failed: {e}");
            drop(w);
            self.inner.streams.lock().unwrap().remove(&(src, dst));
            return Err(TransportError::Unreachable(dst));
        }
        let r = Receipt { seq: *seq, sent_at: 0.0, delivered_at: 0.0 };
        *seq += 1;
        Ok(r)
    }

    fn mtu(&self) -> usize {
        self.inner.mtu
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc::channel;
    use std::time::Duration;

    #[test]
    fn loopback_over_tcp() {
        let t = SocketTransport::new(HashMap::new());
        let (tx, rx) = channel();
        let tx = Mutex::new(tx);
        let _r = t.register(NodeId(1), Arc::new(move |d| tx.lock().unwrap().send(d).unwrap())).unwrap();
        let payload: Vec<u8> = (0..4096u32).map(|i| (i % 251) as u8).collect();
        t.send(NodeId(0), NodeId(1), &payload).unwrap();
        let d = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(d.payload, payload);
        assert_eq!(d.src, NodeId(0));
    }

    #[test]
    fn unknown_destination_is_unreachable() {
        let t = SocketTransport::new(HashMap::new());
        assert_eq!(t.send(NodeId(0), NodeId(99), b"x"), Err(TransportError::Unreachable(NodeId(99))));
    }

    #[test]
    fn reply_travels_back_over_accepted_stream() {
        // node 5 has no listener entry on the other side's address book; the
        // server answers over the incoming connection
        let server = SocketTransport::new(HashMap::new());
        let t2 = server.clone();
        let _s = server
            .register(
                NodeId(1),
                Arc::new(move |d| {
                    t2.send(d.dst, d.src, &d.payload).unwrap();
                }),
            )
            .unwrap();
        let addr = server.local_addr(NodeId(1)).unwrap();

        let client = SocketTransport::new(HashMap::from([(NodeId(1), addr)]));
        let (tx, rx) = channel();
        let tx = Mutex::new(tx);
        let _c = client.register(NodeId(5), Arc::new(move |d| tx.lock().unwrap().send(d).unwrap())).unwrap();
        client.send(NodeId(5), NodeId(1), b"ping").unwrap();
        let d = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(d.payload, b"ping");
        assert_eq!(d.src, NodeId(1));
    }
}
