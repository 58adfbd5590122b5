//! DATC checkpoints:
//!
//! ```text
//! "DATC" | version u16 | flags u16 | layer count u32 | (rows u32, cols u32) per layer
//!        | head rows u32 | head cols u32 | header_crc u32
//!        | every tensor as f64, in `EncoderParams::tensors` order | payload crc u32
//! ```

use std::fs;
use std::path::Path;

use crate::encoder::{Dense, EncoderParams};
use crate::error::{DatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DATC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * params.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in params.layers.iter().chain(std::iter::once(&params.head)) {
        buf.extend_from_slice(&(l.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(l.cols as u32).to_le_bytes());
    }
    let header_crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&header_crc.to_le_bytes());
    let header_len = buf.len();
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[header_len..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn truncated(expected: usize, actual: usize) -> DatError {
    DatError::Truncated {
        what: "DATC file".into(),
        expected: expected as u64,
        actual: actual as u64,
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(at + 4, bytes.len()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    if bytes.len() < 12 {
        return Err(truncated(12, bytes.len()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DatError::Format(format!(
            "bad magic {:?}, expected \"DATC\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(DatError::Version {
            kind: "DATC",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n_layers = read_u32(bytes, 8)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(DatError::Format(format!("implausible layer count {n_layers}")));
    }
    let mut shapes = Vec::with_capacity(n_layers + 1);
    let mut pos = 12;
    for _ in 0..=n_layers {
        shapes.push((read_u32(bytes, pos)? as usize, read_u32(bytes, pos + 4)? as usize));
        pos += 8;
    }
    let stored = read_u32(bytes, pos)?;
    let computed = crc32fast::hash(&bytes[..pos]);
    if stored != computed {
        return Err(DatError::Format(format!("corrupt header: crc {stored:#010x} != {computed:#010x}")));
    }
    pos += 4;
    let header_len = pos;
    let count: usize = shapes.iter().map(|(r, c)| r * c + r).sum();
    let expected = header_len + 8 * count + 4;
    if bytes.len() < expected {
        return Err(truncated(expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(DatError::Format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let payload_end = expected - 4;
    let stored = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[header_len..payload_end]);
    if stored != computed {
        return Err(DatError::Checksum { stored, computed });
    }
    let mut values = bytes[header_len..payload_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut dense = |(rows, cols): (usize, usize)| Dense {
        rows,
        cols,
        weight: values.by_ref().take(rows * cols).collect(),
        bias: values.by_ref().take(rows).collect(),
    };
    let layers: Vec<Dense> = shapes[..n_layers].iter().map(|&s| dense(s)).collect();
    let head = dense(shapes[n_layers]);
    for w in layers.windows(2) {
        if w[0].rows != w[1].cols {
            return Err(DatError::Format("layer shapes do not chain".into()));
        }
    }
    if layers.last().unwrap().rows != head.cols {
        return Err(DatError::Format("head width does not match embedding".into()));
    }
    Ok(EncoderParams { layers, head })
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| DatError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| DatError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Save then load.
pub fn checkpoint_roundtrip(params: &EncoderParams, path: &Path) -> Result<EncoderParams> {
    save_checkpoint(params, path)?;
    load_checkpoint(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(0, 5, 4, 3, 2).unwrap();
        let back = checkpoint_roundtrip(&p, &dir.path().join("c.datc")).unwrap();
        assert_eq!(p.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), back.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(p, back);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let p = init_params(0, 5, 4, 3, 2).unwrap();
        let mut bytes = encode_checkpoint(&p);
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes), Err(DatError::Checksum { .. })));
    }

    #[test]
    fn version_mismatch() {
        let p = init_params(0, 5, 4, 3, 2).unwrap();
        let mut bytes = encode_checkpoint(&p);
        bytes[4] = 2;
        assert!(matches!(decode_checkpoint(&bytes), Err(DatError::Version { found: 2, .. })));
    }
}
