//! Named-tensor file format shared by checkpoints and dataset images.
//!
//! Layout (all integers u32 little-endian): magic `MPAF`, version, entry
//! count, then per entry: name length, UTF-8 name, rank, dims, and the
//! row-major f32 little-endian payload.

use std::path::Path;

use mpaf_tensor::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MPAF";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} is too large")))?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry {name:?}: {e}")))?;
        entries.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Stores UTF-8 text losslessly as a rank-1 tensor of byte values.
pub fn text_tensor(text: &str) -> Tensor {
    let data: Vec<f32> = text.bytes().map(f32::from).collect();
    if data.is_empty() {
        return Tensor::new(&[1], vec![-1.0]).expect("one element");
    }
    Tensor::new(&[data.len()], data).expect("non-empty")
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    if t.data() == [-1.0] {
        return Ok(String::new());
    }
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Checkpoint(format!("{v} is not a byte value")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("text entry is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let entries = vec![
            ("a".to_string(), Tensor::new(&[2, 3], vec![0.1, -0.0, 1e-30, f32::MAX, 3.0, -7.5]).unwrap()),
            ("meta".to_string(), text_tensor("k = v\n")),
            ("s".to_string(), Tensor::scalar(2.5)),
        ];
        let bytes = encode(&entries);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(tensor_text(&back[1].1).unwrap(), "k = v\n");
        assert_eq!(back[2].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[("x".into(), Tensor::vector(vec![1.0]).unwrap())]);
        assert_eq!(&bytes[..4], b"MPAF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 4 + 4);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode(&[("x".into(), Tensor::vector(vec![1.0, 2.0]).unwrap())]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn empty_text_round_trips() {
        assert_eq!(tensor_text(&text_tensor("")).unwrap(), "");
    }
}
