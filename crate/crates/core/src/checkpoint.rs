//! Binary named-tensor table used for training checkpoints and frozen-ViT
//! weight files.
//!
//! Layout: magic `SZCK`, u32 version, u32 entry count, then per entry:
//! u32 name length, UTF-8 name, u32 rank, rank×u32 dims, then the f32
//! payload. All integers and floats little-endian.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SZCK";

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    f.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint header field".into()))?;
    Ok(u32::from_le_bytes(buf))
}
pub const VERSION: u32 = 1;

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let count = read_u32(&mut f)? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)
            .map_err(|_| Error::Format(format!("truncated checkpoint at entry {i}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format(format!("non-utf8 tensor name at entry {i}")))?;
        let rank = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        f.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated payload for tensor {name:?}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Bit-exact round trip for non-float payloads smuggled through the f32
/// table (step counters, RNG words).
pub fn u32_to_f32_bits(v: u32) -> f32 {
    f32::from_bits(v)
}

pub fn f32_bits_to_u32(v: f32) -> u32 {
    v.to_bits()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = std::env::temp_dir().join("conceptseg_szck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.szck");
        let tensors = vec![
            ("a".to_string(), Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::from_bits(0xDEADBEEF), 3.25]).unwrap()),
            ("b.scalar".to_string(), Tensor::scalar(7.0)),
        ];
        write_tensors(&path, &tensors).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        for (x, y) in back[0].1.data().iter().zip(tensors[0].1.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = std::env::temp_dir().join("conceptseg_szck_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.szck");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
        let tensors = vec![("w".to_string(), Tensor::zeros(vec![8, 8]))];
        write_tensors(&path, &tensors).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(read_tensors(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_mismatch_reported() {
        let dir = std::env::temp_dir().join("conceptseg_szck_test3");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.szck");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Version { found: 99, .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
