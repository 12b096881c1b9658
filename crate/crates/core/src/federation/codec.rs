//! Wire format.
//!
//! ```text
//! magic "FBNL" | version u8 | type u8 | round u32 | client u32 | payload_len u64 | payload
//! ```
//!
//! All integers little-endian. Matrices are two u32 dims followed by
//! row-major binary64 values.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::suffstats::MaskedShare;

pub const MAGIC: [u8; 4] = *b"FBNL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
/// Upper bound on a single payload; larger declared lengths are treated as
/// corrupt framing rather than allocated.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    ClientUpdate = 1,
    ServerBroadcast = 2,
    StatShare = 3,
    SetupCount = 4,
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            1 => Ok(Self::ClientUpdate),
            2 => Ok(Self::ServerBroadcast),
            3 => Ok(Self::StatShare),
            4 => Ok(Self::SetupCount),
            other => Err(Error::Protocol(format!("unknown message type {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: MessageType,
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<u8>,
}

/// Server-to-client broadcast contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub global: Matrix,
    /// Set on the last broadcast of a run; clients apply the dual update
    /// and stop.
    pub finished: bool,
}

impl Message {
    pub fn client_update(round: u32, client_id: u32, local: &Matrix) -> Self {
        let mut payload = Vec::new();
        put_matrix(&mut payload, local);
        Self {
            msg_type: MessageType::ClientUpdate,
            round,
            client_id,
            payload,
        }
    }

    pub fn server_broadcast(round: u32, client_id: u32, global: &Matrix, finished: bool) -> Self {
        let mut payload = Vec::new();
        put_matrix(&mut payload, global);
        payload.push(u8::from(finished));
        Self {
            msg_type: MessageType::ServerBroadcast,
            round,
            client_id,
            payload,
        }
    }

    pub fn setup_count(client_id: u32, count: u64) -> Self {
        Self {
            msg_type: MessageType::SetupCount,
            round: 0,
            client_id,
            payload: count.to_le_bytes().to_vec(),
        }
    }

    pub fn stat_share(share: &MaskedShare) -> Self {
        let mut payload = Vec::new();
        let sum_x =
            Matrix::from_vec(1, share.sum_x.len(), share.sum_x.clone()).expect("row vector shape");
        put_matrix(&mut payload, &sum_x);
        put_matrix(&mut payload, &share.sum_xxt);
        payload.extend_from_slice(&share.count.to_le_bytes());
        payload.extend_from_slice(&share.checksum.to_le_bytes());
        Self {
            msg_type: MessageType::StatShare,
            round: share.round,
            client_id: share.client_id,
            payload,
        }
    }

    fn expect(&self, ty: MessageType) -> Result<PayloadReader<'_>> {
        if self.msg_type != ty {
            return Err(Error::Protocol(format!(
                "expected {ty:?}, got {:?} from client {}",
                self.msg_type, self.client_id
            )));
        }
        Ok(PayloadReader {
            buf: &self.payload,
            pos: 0,
        })
    }

    pub fn client_update_matrix(&self) -> Result<Matrix> {
        let mut r = self.expect(MessageType::ClientUpdate)?;
        let m = r.matrix()?;
        r.finish()?;
        Ok(m)
    }

    pub fn broadcast(&self) -> Result<Broadcast> {
        let mut r = self.expect(MessageType::ServerBroadcast)?;
        let global = r.matrix()?;
        let finished = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Protocol(format!("bad broadcast status {other}"))),
        };
        r.finish()?;
        Ok(Broadcast { global, finished })
    }

    pub fn count(&self) -> Result<u64> {
        let mut r = self.expect(MessageType::SetupCount)?;
        let n = r.u64()?;
        r.finish()?;
        Ok(n)
    }

    pub fn masked_share(&self) -> Result<MaskedShare> {
        let mut r = self.expect(MessageType::StatShare)?;
        let sum_x = r.matrix()?;
        if sum_x.rows() != 1 {
            return Err(Error::Protocol("share sum must be a row vector".into()));
        }
        let sum_xxt = r.matrix()?;
        let count = r.u64()?;
        let checksum = r.u64()?;
        r.finish()?;
        Ok(MaskedShare {
            client_id: self.client_id,
            round: self.round,
            sum_x: sum_x.into_vec(),
            sum_xxt,
            count,
            checksum,
        })
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    let rows = u32::try_from(m.rows()).expect("matrix rows fit in u32");
    let cols = u32::try_from(m.cols()).expect("matrix cols fit in u32");
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.reserve(m.as_slice().len() * 8);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl PayloadReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Framing(format!(
                    "payload truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Framing(format!("matrix {rows}x{cols} too large")))?;
        let bytes = self.take(len)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Framing(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

struct Header {
    msg_type: MessageType,
    round: u32,
    client_id: u32,
    payload_len: usize,
}

/// Validates magic and version on a full header.
fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    if h[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &h[..4])));
    }
    if h[4] != VERSION {
        return Err(Error::Protocol(format!("unsupported version {}", h[4])));
    }
    let msg_type = MessageType::try_from(h[5])?;
    let round = u32::from_le_bytes(h[6..10].try_into().unwrap());
    let client_id = u32::from_le_bytes(h[10..14].try_into().unwrap());
    let payload_len = u64::from_le_bytes(h[14..22].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(Error::Framing(format!(
            "declared payload of {payload_len} bytes exceeds limit"
        )));
    }
    Ok(Header {
        msg_type,
        round,
        client_id,
        payload_len: payload_len as usize,
    })
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Framing(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    let header = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != header.payload_len {
        return Err(Error::Framing(format!(
            "payload_len {} but {} payload bytes present",
            header.payload_len,
            body.len()
        )));
    }
    Ok(Message {
        msg_type: header.msg_type,
        round: header.round,
        client_id: header.client_id,
        payload: body.to_vec(),
    })
}

/// Reads one message from a stream. Returns `None` on a clean end of
/// stream at a message boundary.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::Framing(format!(
                    "stream ended inside header after {filled} bytes"
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header)?;
    let mut payload = vec![0u8; h.payload_len];
    reader.read_exact(&mut payload).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Framing("stream ended inside payload".into())
        } else {
            e.into()
        }
    })?;
    Ok(Some(Message {
        msg_type: h.msg_type,
        round: h.round,
        client_id: h.client_id,
        payload,
    }))
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<()> {
    writer.write_all(&encode(msg))?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_matrix_layout() {
        let m = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let bytes = encode(&Message::client_update(3, 7, &m));
        assert_eq!(&bytes[..4], b"FBNL");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[7, 0, 0, 0]);
        assert_eq!(&bytes[14..22], &[16, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            &bytes[22..],
            &[1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x40]
        );
    }

    #[test]
    fn stray_bytes_are_a_framing_error() {
        assert!(matches!(decode(&[1, 2, 3]), Err(Error::Framing(_))));
        assert!(matches!(decode(b"FBN"), Err(Error::Framing(_))));
    }

    #[test]
    fn bad_magic_and_version_are_protocol_errors() {
        let m = Matrix::identity(2);
        let mut bytes = encode(&Message::client_update(1, 0, &m));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Protocol(_))));
        let mut bytes = encode(&Message::client_update(1, 0, &m));
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Protocol(_))));
        let mut bytes = encode(&Message::client_update(1, 0, &m));
        bytes[5] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Protocol(_))));
    }

    #[test]
    fn length_mismatch_is_a_framing_error() {
        let m = Matrix::identity(2);
        let mut bytes = encode(&Message::client_update(1, 0, &m));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Framing(_))));
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(decode(&bytes), Err(Error::Framing(_))));
    }

    #[test]
    fn typed_payload_accessors() {
        let g = Matrix::from_vec(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let b = decode(&encode(&Message::server_broadcast(4, 2, &g, true)))
            .unwrap()
            .broadcast()
            .unwrap();
        assert!(b.finished);
        assert_eq!(b.global.as_slice()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(b.global, g);
        let n = decode(&encode(&Message::setup_count(5, 1234)))
            .unwrap()
            .count()
            .unwrap();
        assert_eq!(n, 1234);
        let upd = Message::client_update(1, 0, &g);
        assert!(matches!(upd.count(), Err(Error::Protocol(_))));
    }

    #[test]
    fn stream_reading() {
        let m = Matrix::identity(3);
        let mut buf = encode(&Message::client_update(1, 0, &m));
        buf.extend(encode(&Message::setup_count(1, 9)));
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(
            read_message(&mut cursor).unwrap().unwrap().msg_type,
            MessageType::ClientUpdate
        );
        assert_eq!(
            read_message(&mut cursor).unwrap().unwrap().count().unwrap(),
            9
        );
        assert!(read_message(&mut cursor).unwrap().is_none());
        let mut short = std::io::Cursor::new(vec![b'F', b'B']);
        assert!(matches!(read_message(&mut short), Err(Error::Framing(_))));
    }
}
