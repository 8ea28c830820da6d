//! Tagged little-endian container shared by the detector weights ("PLNW"),
//! the authentication model ("PLNA") and optimizer snapshots ("PLNO").
//!
//! ```text
//! magic [4] | version u32 | record count u32
//! per record: tag u32 | rank u32 | extents u32 x rank | buffer count u32
//!             | per buffer: length u32 | f32 x length
//! crc32 of every byte after the header, u32
//! ```

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub tag: u32,
    pub extents: Vec<u32>,
    pub buffers: Vec<Vec<f32>>,
}

impl Record {
    pub fn new(tag: u32, extents: Vec<u32>, buffers: Vec<Vec<f32>>) -> Self {
        Record {
            tag,
            extents,
            buffers,
        }
    }
}

pub fn encode(magic: &[u8; 4], records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.tag.to_le_bytes());
        out.extend_from_slice(&(r.extents.len() as u32).to_le_bytes());
        for e in &r.extents {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&(r.buffers.len() as u32).to_le_bytes());
        for b in &r.buffers {
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Corrupt {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            })?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let end = n
            .checked_mul(4)
            .and_then(|b| b.checked_add(self.pos))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt {
                offset: self.pos,
                reason: format!("truncated buffer of {n} floats"),
            })?;
        let vals = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        self.pos = end;
        Ok(vals)
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Corrupt {
            offset: bytes.len(),
            reason: "file shorter than header".into(),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::Corrupt {
            offset: 0,
            reason: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let mut rd = Reader { bytes, pos: 4 };
    let version = rd.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = rd.u32("record count")? as usize;

    let payload_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[HEADER_LEN..payload_end]);
    if stored != actual {
        return Err(Error::Corrupt {
            offset: payload_end,
            reason: format!("checksum mismatch (stored {stored:#010x}, computed {actual:#010x})"),
        });
    }
    let mut rd = Reader {
        bytes: &bytes[..payload_end],
        pos: HEADER_LEN,
    };
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let tag = rd.u32("record tag")?;
        let rank = rd.u32("rank")? as usize;
        let extents = (0..rank)
            .map(|_| rd.u32("extent"))
            .collect::<Result<Vec<_>>>()?;
        let nbuf = rd.u32("buffer count")? as usize;
        let mut buffers = Vec::with_capacity(nbuf.min(16));
        for _ in 0..nbuf {
            let len = rd.u32("buffer length")? as usize;
            buffers.push(rd.f32s(len)?);
        }
        records.push(Record {
            tag,
            extents,
            buffers,
        });
    }
    if rd.pos != payload_end {
        return Err(Error::Corrupt {
            offset: rd.pos,
            reason: "trailing bytes after last record".into(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<Record> {
        vec![
            Record::new(0, vec![416, 3, 10], vec![vec![1.0, 2.0]]),
            Record::new(2, vec![3, 3, 3, 32], vec![vec![0.5; 864], vec![0.0; 32]]),
        ]
    }

    #[test]
    fn truncation_is_reported_not_panicking() {
        let bytes = encode(b"PLNW", &sample());
        for cut in [0, 3, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(b"PLNW", &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode(b"PLNW", &sample());
        assert!(matches!(
            decode(b"PLNA", &bytes),
            Err(Error::Corrupt { offset: 0, .. })
        ));
        bytes[4] = 9;
        assert!(matches!(
            decode(b"PLNW", &bytes),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = encode(b"PLNW", &sample());
        bytes[40] ^= 0x10;
        let err = decode(b"PLNW", &bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    proptest! {
        #[test]
        fn round_trip(tag in 0u32..10, extents in prop::collection::vec(0u32..100, 0..5),
                      bufs in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 0..20), 0..4)) {
            let recs = vec![Record::new(tag, extents, bufs)];
            let back = decode(b"PLNO", &encode(b"PLNO", &recs)).unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
