//! Socket framing: `magic | src | dst | len` as little-endian u32s, then the
//! payload.

use std::io::{self, Read, Write};

use super::{Datagram, NodeId};

/// "PSTF" read as a little-endian u32.
pub const MAGIC: u32 = 0x5053_5446;
pub const HEADER_LEN: usize = 16;

pub fn encode(src: NodeId, dst: NodeId, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&src.0.to_le_bytes());
    out.extend_from_slice(&dst.0.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn write_frame(w: &mut impl Write, src: NodeId, dst: NodeId, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode(src, dst, payload))?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read, max_payload: usize) -> io::Result<Option<Datagram>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
    if word(0) != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame magic {:#010x}", word(0))));
    }
    let len = word(3) as usize;
    if len > max_payload {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame payload {len} exceeds {max_payload}")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Datagram { src: NodeId(word(1)), dst: NodeId(word(2)), payload }))
}
