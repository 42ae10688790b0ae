//! The LLTF tensor file format.
//!
//! Layout, all little-endian:
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `LLTF`                     |
//! | 1            | version, always 1                |
//! | 1            | dtype code (1 = f32, 2 = f64)    |
//! | 1            | rank                             |
//! | 1            | reserved, always 0               |
//! | 4 × rank     | extents as `u32`                 |
//! | rest         | row-major payload                |

use std::fs;
use std::path::Path;

use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LLTF";
pub const VERSION: u8 = 1;

/// Serializes a tensor into LLTF bytes.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Shape(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * t.dtype().size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, t.dtype().code(), rank, 0]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses LLTF bytes. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::Format {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing LLTF magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad("unknown dtype code"))?;
    let rank = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(bad("reserved byte must be 0"));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated extents"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.iter().any(|&d| d == 0) {
        return Err(bad("zero extent"));
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.size_of() {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * dtype.size_of()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(dtype, shape, data)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

/// Reads a tensor and checks its rank.
pub fn read_rank(path: impl AsRef<Path>, rank: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let t = read(path)?;
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{} has rank {}, expected {rank}",
            path.display(),
            t.rank()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::with_dtype(DType::F32, [2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(
            b,
            [
                b'L', b'L', b'T', b'F', 1, 1, 2, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0x80, 0x3f, 0,
                0, 0, 0xc0
            ]
        );
    }

    #[test]
    fn rejects_corrupt_files() {
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode(&t).unwrap();
        let p = Path::new("x.lltf");
        assert!(decode(&b[..b.len() - 1], p).is_err());
        b[7] = 1;
        assert!(decode(&b, p).is_err());
        b[7] = 0;
        b[5] = 9;
        assert!(decode(&b, p).is_err());
        assert!(decode(b"NOPE0000", p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            wide in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let dtype = if wide { DType::F64 } else { DType::F32 };
            let n: usize = shape.iter().product();
            let mut s = seed;
            let data = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 200.0 - 100.0
            }).collect();
            let t = Tensor::with_dtype(dtype, shape, data).unwrap();
            let back = decode(&encode(&t).unwrap(), Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
