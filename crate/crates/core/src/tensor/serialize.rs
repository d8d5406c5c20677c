//! Little-endian binary tensor codec.
//!
//! A tensor record is the magic `M2T1`, the rank as `u32`, one `u32` per
//! extent, then the `f32` values in row-major order. A named table (used
//! by checkpoints) is the magic `M2K1`, an entry count, then per entry a
//! `u32` name length, the UTF-8 name and a tensor record.

use std::io::{Read, Write};

use super::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"M2T1";
pub const TABLE_MAGIC: &[u8; 4] = b"M2K1";

/// Upper bound on rank accepted by the decoder.
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}: expected {expected:?}")]
    Magic { offset: usize, expected: String },
    #[error("truncated input at offset {offset}: need {need} more bytes")]
    Truncated { offset: usize, need: usize },
    #[error("invalid header at offset {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                need: n - rest,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), DecodeError> {
        let offset = self.pos;
        if self.take(4)? != want {
            return Err(DecodeError::Magic {
                offset,
                expected: String::from_utf8_lossy(want).into_owned(),
            });
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_tensor_at(c: &mut Cursor<'_>) -> Result<Tensor<f32>, DecodeError> {
    c.magic(TENSOR_MAGIC)?;
    let at = c.pos;
    let rank = c.u32()? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(DecodeError::Header {
            offset: at,
            reason: format!("rank {rank} outside 1..={MAX_RANK}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let at = c.pos;
        let d = c.u32()? as usize;
        count = count.checked_mul(d).filter(|_| d > 0).ok_or_else(|| DecodeError::Header {
            offset: at,
            reason: format!("invalid extent {d}"),
        })?;
        shape.push(d);
    }
    let bytes = count.checked_mul(4).ok_or_else(|| DecodeError::Header {
        offset: at,
        reason: "element count overflows".into(),
    })?;
    let raw = c.take(bytes)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(shape, data).expect("validated shape"))
}

/// Decodes one tensor record, returning it with the number of bytes consumed.
pub fn decode_tensor(buf: &[u8]) -> Result<(Tensor<f32>, usize), DecodeError> {
    let mut c = Cursor { buf, pos: 0 };
    let t = decode_tensor_at(&mut c)?;
    Ok((t, c.pos))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>, DecodeError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let (t, used) = decode_tensor(&buf)?;
    if used != buf.len() {
        return Err(DecodeError::Header {
            offset: used,
            reason: "trailing bytes".into(),
        });
    }
    Ok(t)
}

pub fn encode_table(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_table(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, DecodeError> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(TABLE_MAGIC)?;
    let n = c.u32()? as usize;
    // Each entry needs at least a name length and a tensor header.
    if n > buf.len() / 16 {
        return Err(DecodeError::Header {
            offset: 4,
            reason: format!("entry count {n} exceeds input size"),
        });
    }
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let at = c.pos;
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|e| DecodeError::Header {
            offset: at,
            reason: format!("name is not UTF-8: {e}"),
        })?;
        let name = name.to_owned();
        entries.push((name, decode_tensor_at(&mut c)?));
    }
    if c.pos != buf.len() {
        return Err(DecodeError::Header {
            offset: c.pos,
            reason: "trailing bytes".into(),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(&buf[..4], b"M2T1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        buf.truncate(buf.len() - 2);
        match decode_tensor(&buf) {
            Err(DecodeError::Truncated { offset, need }) => {
                assert_eq!(offset, 12);
                assert_eq!(need, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn huge_extent_is_rejected_without_allocating() {
        let mut buf = b"M2T1".to_vec();
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tensor(&buf).is_err());
    }

    proptest! {
        #[test]
        fn table_round_trip(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 1..4), 0..5),
            seed in any::<u32>(),
        ) {
            let entries: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|j| (seed as f32) * 1e-3 - j as f32 * 0.25).collect();
                    (format!("p{i}.weight"), Tensor::new(s.clone(), data).unwrap())
                })
                .collect();
            let decoded = decode_table(&encode_table(&entries)).unwrap();
            prop_assert_eq!(decoded, entries);
        }
    }
}
