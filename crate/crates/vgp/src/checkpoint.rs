//! Binary checkpoint of a parameter vector.
//!
//! ```text
//! "VGP1"
//! u32 segment count
//! per segment: u32 name length, name (UTF-8), u64 offset, u64 length
//! u64 value count
//! f64 values
//! ```
//!
//! All integers and floats are little-endian.

use thiserror::Error;
use vgp_core::autodiff::{ParameterVector, Segment};

pub const MAGIC: &[u8; 4] = b"VGP1";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (expected magic `VGP1`)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("segment name is not valid UTF-8")]
    BadName,
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error("checkpoint layout does not match the configured model ({0})")]
    Mismatch(String),
}

pub fn encode(params: &ParameterVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.layout.len() as u32).to_le_bytes());
    for s in &params.layout {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.len as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| CheckpointError::Layout(format!("{what} {v} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterVector, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let n_segments = r.u32("segment count")?;
    let mut layout = Vec::new();
    for _ in 0..n_segments {
        let len = r.u32("segment name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "segment name")?).map_err(|_| CheckpointError::BadName)?;
        let offset = r.u64("segment offset")?;
        let len = r.u64("segment length")?;
        layout.push(Segment {
            name: name.to_string(),
            offset,
            len,
        });
    }
    let count = r.u64("value count")?;
    if r.bytes.len() < count.saturating_mul(8) {
        return Err(CheckpointError::Truncated("values"));
    }
    let flat: Vec<f64> = (0..count)
        .map(|_| f64::from_le_bytes(r.take(8, "values").unwrap().try_into().unwrap()))
        .collect();
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Trailing(r.bytes.len()));
    }
    ParameterVector::new(layout, flat).map_err(|e| CheckpointError::Layout(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterVector {
        ParameterVector::pack(&[
            ("kernel.log_amplitude".into(), vec![0.25]),
            ("q.lambda".into(), vec![-1.0, f64::MIN_POSITIVE, 3.5]),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let p = sample();
        assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn header_bytes() {
        let b = encode(&sample());
        assert_eq!(&b[..4], b"VGP1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(b.len(), 4 + 4 + (4 + 20 + 16) + (4 + 8 + 16) + 8 + 4 * 8);
        assert_eq!(&b[b.len() - 8..], &3.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_damage() {
        let b = encode(&sample());
        assert_eq!(decode(b"VGP2"), Err(CheckpointError::BadMagic));
        assert!(matches!(decode(&b[..b.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut long = b.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(CheckpointError::Trailing(1)));
    }
}
