//! Byte-level message formats exchanged with daemons and the manager.
//!
//! Daemon request: `op:u8 | handle:u64 | offset:u64 | length:u64 | payload`.
//! Response (daemon and manager): `status:u8 | length:u64 | payload`.
//! All integers are little-endian.

use thiserror::Error;

use crate::layout::{Distribution, StripeSpec};
use crate::metamgr::FileMeta;
use crate::transport::NodeId;

pub const IOD_HEADER_LEN: usize = 25;
pub const RESPONSE_HEADER_LEN: usize = 9;
/// Longest path accepted on the wire.
pub const MAX_PATH: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown opcode {0}")]
    BadOpcode(u8),
    #[error("unknown status {0}")]
    BadStatus(u8),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum IodOp {
    Create = 1,
    Write = 2,
    Read = 3,
    Flush = 4,
    Stat = 5,
    Remove = 6,
    Gather = 7,
}

impl TryFrom<u8> for IodOp {
    type Error = WireError;
    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            1 => IodOp::Create,
            2 => IodOp::Write,
            3 => IodOp::Read,
            4 => IodOp::Flush,
            5 => IodOp::Stat,
            6 => IodOp::Remove,
            7 => IodOp::Gather,
            b => return Err(WireError::BadOpcode(b)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MgrOp {
    Create = 10,
    Open = 11,
    Remove = 12,
    Size = 13,
    List = 14,
}

impl TryFrom<u8> for MgrOp {
    type Error = WireError;
    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            10 => MgrOp::Create,
            11 => MgrOp::Open,
            12 => MgrOp::Remove,
            13 => MgrOp::Size,
            14 => MgrOp::List,
            b => return Err(WireError::BadOpcode(b)),
        })
    }
}

/// Response status. Codes 0..=5 are shared with the daemons; the manager
/// adds 6..=8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NoFile = 1,
    Exists = 2,
    Range = 3,
    Storage = 4,
    Busy = 5,
    Capacity = 6,
    CreateFailed = 7,
    Invalid = 8,
}

impl TryFrom<u8> for Status {
    type Error = WireError;
    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0 => Status::Ok,
            1 => Status::NoFile,
            2 => Status::Exists,
            3 => Status::Range,
            4 => Status::Storage,
            5 => Status::Busy,
            6 => Status::Capacity,
            7 => Status::CreateFailed,
            8 => Status::Invalid,
            b => return Err(WireError::BadStatus(b)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IodRequest {
    pub op: IodOp,
    pub handle: u64,
    pub offset: u64,
    pub length: u64,
    pub payload: Vec<u8>,
}

impl IodRequest {
    pub fn new(op: IodOp, handle: u64, offset: u64, length: u64) -> Self {
        IodRequest { op, handle, offset, length, payload: Vec::new() }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_iod(self.op, self.handle, self.offset, self.length, &self.payload)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let op = IodOp::try_from(r.u8()?)?;
        let handle = r.u64()?;
        let offset = r.u64()?;
        let length = r.u64()?;
        Ok(IodRequest { op, handle, offset, length, payload: r.rest().to_vec() })
    }
}

/// Encodes a daemon request without building an [`IodRequest`] first.
pub fn encode_iod(op: IodOp, handle: u64, offset: u64, length: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(IOD_HEADER_LEN + payload.len());
    out.push(op as u8);
    out.extend_from_slice(&handle.to_le_bytes());
    out.extend_from_slice(&offset.to_le_bytes());
    out.extend_from_slice(&length.to_le_bytes());
    out.extend_from_slice(payload);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub length: u64,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn ok(length: u64, payload: Vec<u8>) -> Self {
        Response { status: Status::Ok, length, payload }
    }

    /// Error response carrying a human-readable message.
    pub fn error(status: Status, length: u64, msg: impl Into<String>) -> Self {
        Response { status, length, payload: msg.into().into_bytes() }
    }

    pub fn message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RESPONSE_HEADER_LEN + self.payload.len());
        out.push(self.status as u8);
        out.extend_from_slice(&self.length.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let status = Status::try_from(r.u8()?)?;
        let length = r.u64()?;
        Ok(Response { status, length, payload: r.rest().to_vec() })
    }
}

/// Direction of a gathered request list, carried in the offset field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Read = 0,
    Write = 1,
}

/// One requester's piece of a disk-directed pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatherEntry {
    pub requester: u32,
    pub sub_offset: u64,
    pub length: u64,
}

pub const GATHER_ENTRY_LEN: usize = 20;

/// GATHER request: the length field holds the entry count, the payload holds
/// the entries followed by the write data in entry order.
pub fn encode_gather(handle: u64, dir: Direction, entries: &[GatherEntry], data: &[u8]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(entries.len() * GATHER_ENTRY_LEN + data.len());
    for e in entries {
        payload.extend_from_slice(&e.requester.to_le_bytes());
        payload.extend_from_slice(&e.sub_offset.to_le_bytes());
        payload.extend_from_slice(&e.length.to_le_bytes());
    }
    payload.extend_from_slice(data);
    encode_iod(IodOp::Gather, handle, dir as u64, entries.len() as u64, &payload)
}

pub fn decode_gather(req: &IodRequest) -> Result<(Direction, Vec<GatherEntry>, &[u8]), WireError> {
    let dir = match req.offset {
        0 => Direction::Read,
        1 => Direction::Write,
        d => return Err(WireError::Malformed(format!("gather direction {d}"))),
    };
    let n = usize::try_from(req.length).map_err(|_| WireError::Truncated)?;
    let mut r = Reader::new(&req.payload);
    let mut entries = Vec::with_capacity(n.min(req.payload.len() / GATHER_ENTRY_LEN));
    for _ in 0..n {
        entries.push(GatherEntry { requester: r.u32()?, sub_offset: r.u64()?, length: r.u64()? });
    }
    Ok((dir, entries, r.rest()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MgrRequest {
    Create {
        path: String,
        dist: Distribution,
    },
    Open {
        path: String,
    },
    Remove {
        path: String,
    },
    Size {
        handle: u64,
        high_water: u64,
    },
    /// Lists files starting at index `start` of the sorted namespace.
    List {
        start: u64,
    },
}

impl MgrRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        match self {
            MgrRequest::Create { path, dist } => {
                w.push(MgrOp::Create as u8);
                put_str(&mut w, path);
                put_distribution(&mut w, dist);
            }
            MgrRequest::Open { path } => {
                w.push(MgrOp::Open as u8);
                put_str(&mut w, path);
            }
            MgrRequest::Remove { path } => {
                w.push(MgrOp::Remove as u8);
                put_str(&mut w, path);
            }
            MgrRequest::Size { handle, high_water } => {
                w.push(MgrOp::Size as u8);
                w.extend_from_slice(&handle.to_le_bytes());
                w.extend_from_slice(&high_water.to_le_bytes());
            }
            MgrRequest::List { start } => {
                w.push(MgrOp::List as u8);
                w.extend_from_slice(&start.to_le_bytes());
            }
        }
        w
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let req = match MgrOp::try_from(r.u8()?)? {
            MgrOp::Create => MgrRequest::Create { path: r.string()?, dist: r.distribution()? },
            MgrOp::Open => MgrRequest::Open { path: r.string()? },
            MgrOp::Remove => MgrRequest::Remove { path: r.string()? },
            MgrOp::Size => MgrRequest::Size { handle: r.u64()?, high_water: r.u64()? },
            MgrOp::List => MgrRequest::List { start: r.u64()? },
        };
        r.finish()?;
        Ok(req)
    }
}

pub fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

pub fn put_distribution(w: &mut Vec<u8>, dist: &Distribution) {
    match dist {
        Distribution::RoundRobin(s) => {
            w.push(0);
            w.extend_from_slice(&s.stripe_size.to_le_bytes());
            w.extend_from_slice(&s.n_iods.to_le_bytes());
            w.extend_from_slice(&s.base_iod.to_le_bytes());
        }
        Distribution::BlockCyclic { block, n_iods } => {
            w.push(1);
            w.extend_from_slice(&block.to_le_bytes());
            w.extend_from_slice(&n_iods.to_le_bytes());
        }
        Distribution::Irregular(l) => {
            w.push(2);
            w.extend_from_slice(&(l.extents().len() as u32).to_le_bytes());
            for &(iod, len) in l.extents() {
                w.extend_from_slice(&iod.to_le_bytes());
                w.extend_from_slice(&len.to_le_bytes());
            }
        }
    }
}

pub fn encode_distribution(dist: &Distribution) -> Vec<u8> {
    let mut w = Vec::new();
    put_distribution(&mut w, dist);
    w
}

pub fn put_meta(w: &mut Vec<u8>, m: &FileMeta) {
    w.extend_from_slice(&m.handle.to_le_bytes());
    put_str(w, &m.path);
    put_distribution(w, &m.dist);
    w.extend_from_slice(&(m.iod_list.len() as u32).to_le_bytes());
    for n in &m.iod_list {
        w.extend_from_slice(&n.0.to_le_bytes());
    }
    w.extend_from_slice(&m.logical_size.to_le_bytes());
}

pub fn encode_meta(m: &FileMeta) -> Vec<u8> {
    let mut w = Vec::new();
    put_meta(&mut w, m);
    w
}

pub fn decode_meta(buf: &[u8]) -> Result<FileMeta, WireError> {
    let mut r = Reader::new(buf);
    let m = r.meta()?;
    r.finish()?;
    Ok(m)
}

/// Cursor over a received message.
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        if n > MAX_PATH {
            return Err(WireError::Malformed(format!("string of {n} bytes")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Malformed("path is not UTF-8".into()))
    }

    pub fn distribution(&mut self) -> Result<Distribution, WireError> {
        let bad = |e: crate::layout::LayoutError| WireError::Malformed(e.to_string());
        match self.u8()? {
            0 => {
                let (stripe, n, base) = (self.u64()?, self.u32()?, self.u32()?);
                Ok(Distribution::RoundRobin(StripeSpec::with_base(stripe, n, base).map_err(bad)?))
            }
            1 => {
                let (block, n) = (self.u64()?, self.u32()?);
                Distribution::block_cyclic(block, n).map_err(bad)
            }
            2 => {
                let count = self.u32()? as usize;
                if count > self.buf.len() / 12 {
                    return Err(WireError::Truncated);
                }
                let mut extents = Vec::with_capacity(count);
                for _ in 0..count {
                    extents.push((self.u32()?, self.u64()?));
                }
                Distribution::irregular(extents).map_err(bad)
            }
            k => Err(WireError::Malformed(format!("distribution kind {k}"))),
        }
    }

    pub fn meta(&mut self) -> Result<FileMeta, WireError> {
        let handle = self.u64()?;
        let path = self.string()?;
        let dist = self.distribution()?;
        let n = self.u32()? as usize;
        if n > self.buf.len() / 4 {
            return Err(WireError::Truncated);
        }
        let iod_list = (0..n).map(|_| self.u32().map(NodeId)).collect::<Result<Vec<_>, _>>()?;
        let logical_size = self.u64()?;
        Ok(FileMeta { path, handle, dist, iod_list, logical_size })
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_write_request() {
        let bytes = encode_iod(IodOp::Write, 0x0102, 65536, 3, b"abc");
        let mut expect = vec![2u8];
        expect.extend_from_slice(&[0x02, 0x01, 0, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(&[0, 0, 1, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(b"abc");
        assert_eq!(bytes, expect);
        let req = IodRequest::decode(&bytes).unwrap();
        assert_eq!((req.op, req.handle, req.offset, req.length), (IodOp::Write, 0x0102, 65536, 3));
    }

    #[test]
    fn golden_response() {
        let r = Response { status: Status::Busy, length: 7, payload: vec![9] };
        assert_eq!(r.encode(), vec![5, 7, 0, 0, 0, 0, 0, 0, 0, 9]);
        assert_eq!(Response::decode(&r.encode()).unwrap(), r);
        assert_eq!(Response::decode(&[0, 1, 2]), Err(WireError::Truncated));
        assert_eq!(Response::decode(&[42, 0, 0, 0, 0, 0, 0, 0, 0]), Err(WireError::BadStatus(42)));
    }

    #[test]
    fn golden_distributions() {
        let rr = Distribution::RoundRobin(StripeSpec::with_base(65536, 4, 1).unwrap());
        assert_eq!(encode_distribution(&rr), vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 4, 0, 0, 0, 1, 0, 0, 0]);
        let bc = Distribution::block_cyclic(16, 2).unwrap();
        assert_eq!(encode_distribution(&bc), vec![1, 16, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0]);
        let irr = Distribution::irregular(vec![(1, 5)]).unwrap();
        assert_eq!(encode_distribution(&irr), vec![2, 1, 0, 0, 0, 1, 0, 0, 0, 5, 0, 0, 0, 0, 0, 0, 0]);
        for d in [rr, bc, irr] {
            assert_eq!(Reader::new(&encode_distribution(&d)).distribution().unwrap(), d);
        }
    }

    #[test]
    fn invalid_distribution_is_rejected() {
        // zero stripe size
        let bytes = [0u8, 0, 0, 0, 0, 0, 0, 0, 0, 4, 0, 0, 0, 0, 0, 0, 0];
        assert!(matches!(Reader::new(&bytes).distribution(), Err(WireError::Malformed(_))));
        // irregular count larger than the buffer
        assert_eq!(Reader::new(&[2, 0xff, 0xff, 0xff, 0xff]).distribution(), Err(WireError::Truncated));
    }

    #[test]
    fn gather_layout() {
        let entries = [
            GatherEntry { requester: 3, sub_offset: 10, length: 2 },
            GatherEntry { requester: 1, sub_offset: 0, length: 1 },
        ];
        let bytes = encode_gather(9, Direction::Write, &entries, b"xyz");
        assert_eq!(bytes.len(), IOD_HEADER_LEN + 2 * GATHER_ENTRY_LEN + 3);
        let req = IodRequest::decode(&bytes).unwrap();
        assert_eq!((req.offset, req.length), (1, 2));
        let (dir, got, data) = decode_gather(&req).unwrap();
        assert_eq!(dir, Direction::Write);
        assert_eq!(got, entries);
        assert_eq!(data, b"xyz");
    }

    #[test]
    fn manager_messages_decode_to_themselves() {
        let reqs = [
            MgrRequest::Create { path: "/pvfs1/a".into(), dist: Distribution::round_robin(65536, 4).unwrap() },
            MgrRequest::Open { path: "/pvfs2/ä".into() },
            MgrRequest::Remove { path: String::new() },
            MgrRequest::Size { handle: 5, high_water: u64::MAX },
            MgrRequest::List { start: 3 },
        ];
        for r in reqs {
            let bytes = r.encode();
            assert_eq!(MgrRequest::decode(&bytes).unwrap(), r);
            assert!(MgrRequest::decode(&bytes[..bytes.len() - 1]).is_err());
        }
        assert_eq!(MgrRequest::decode(&[3]), Err(WireError::BadOpcode(3)));
    }

    #[test]
    fn meta_encoding() {
        let m = FileMeta {
            path: "/pvfs1/f".into(),
            handle: 7,
            dist: Distribution::round_robin(4096, 2).unwrap(),
            iod_list: vec![NodeId(0), NodeId(1)],
            logical_size: 123,
        };
        let bytes = encode_meta(&m);
        assert_eq!(&bytes[..8], &7u64.to_le_bytes());
        assert_eq!(decode_meta(&bytes).unwrap(), m);
    }
}
