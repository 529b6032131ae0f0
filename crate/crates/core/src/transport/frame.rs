//! Wire framing shared by every backend.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GFL1" | msg_type u8 | tag u32 | src_rank u32 | payload_len u64 | payload
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GFL1";
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8;
pub const MAX_PAYLOAD: u64 = i64::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Data = 0x01,
    Barrier = 0x02,
    Handshake = 0x03,
}

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0x01 => Ok(MsgType::Data),
            0x02 => Ok(MsgType::Barrier),
            0x03 => Ok(MsgType::Handshake),
            other => Err(Error::protocol(format!("unknown msg_type {other:#04x}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub tag: u32,
    pub src_rank: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, tag: u32, src_rank: u32, payload: Vec<u8>) -> Self {
        Frame {
            msg_type,
            tag,
            src_rank,
            payload,
        }
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = self.msg_type as u8;
        h[5..9].copy_from_slice(&self.tag.to_le_bytes());
        h[9..13].copy_from_slice(&self.src_rank.to_le_bytes());
        h[13..21].copy_from_slice(&(self.payload.len() as u64).to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        check_payload_len(self.payload.len())?;
        w.write_all(&self.header())?;
        w.write_all(&self.payload)?;
        Ok(())
    }

    /// Reads one frame. A bad magic is reported immediately; the stream is
    /// not resynchronised.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h)?;
        if h[0..4] != MAGIC {
            return Err(Error::protocol(format!(
                "bad frame magic {:02x?}",
                &h[0..4]
            )));
        }
        let msg_type = MsgType::try_from(h[4])?;
        let tag = u32::from_le_bytes(h[5..9].try_into().unwrap());
        let src_rank = u32::from_le_bytes(h[9..13].try_into().unwrap());
        let len = u64::from_le_bytes(h[13..21].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(Error::protocol(format!("payload length {len} too large")));
        }
        let mut payload = Vec::with_capacity(len.min(1 << 20) as usize);
        let got = r.take(len).read_to_end(&mut payload)?;
        if got as u64 != len {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("frame truncated: {got} of {len} payload bytes"),
            )));
        }
        Ok(Frame {
            msg_type,
            tag,
            src_rank,
            payload,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut cursor = bytes;
        let frame = Frame::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::protocol(format!(
                "{} trailing bytes after frame",
                cursor.len()
            )));
        }
        Ok(frame)
    }
}

pub(crate) fn check_payload_len(len: usize) -> Result<()> {
    if len as u64 > MAX_PAYLOAD {
        return Err(Error::protocol(format!("payload of {len} bytes exceeds limit")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let f = Frame::new(MsgType::Data, 0x0102_0304, 7, vec![0xAA, 0xBB]);
        let bytes = f.encode();
        assert_eq!(&bytes[0..4], b"GFL1");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(&bytes[5..9], &[0x04, 0x03, 0x02, 0x01]);
        assert_eq!(&bytes[9..13], &[7, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[21..], &[0xAA, 0xBB]);
    }

    #[test]
    fn empty_payload() {
        let f = Frame::new(MsgType::Barrier, 3, 1, vec![]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn bad_magic_fails_fast() {
        let mut bytes = Frame::new(MsgType::Data, 1, 0, vec![1, 2, 3]).encode();
        bytes[0] = b'X';
        assert!(matches!(Frame::decode(&bytes), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let bytes = Frame::new(MsgType::Data, 1, 0, vec![1, 2, 3]).encode();
        assert!(matches!(
            Frame::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn unknown_msg_type() {
        let mut bytes = Frame::new(MsgType::Data, 1, 0, vec![]).encode();
        bytes[4] = 0x09;
        assert!(matches!(Frame::decode(&bytes), Err(Error::Protocol(_))));
    }

    proptest! {
        #[test]
        fn round_trip(payload in proptest::collection::vec(any::<u8>(), 0..4096),
                      tag in any::<u32>(), src in any::<u32>(), kind in 1u8..=3) {
            let f = Frame::new(MsgType::try_from(kind).unwrap(), tag, src, payload);
            let decoded = Frame::decode(&f.encode()).unwrap();
            prop_assert_eq!(decoded, f);
        }
    }
}
