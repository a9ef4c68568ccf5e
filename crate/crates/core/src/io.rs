//! Fixed little-endian array container.
//!
//! Layout: magic `SDMP`, `u32` version (1), `u32` ndims, `u64` dims[ndims],
//! then `f32` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARRAY_MAGIC: &[u8; 4] = b"SDMP";
pub const ARRAY_VERSION: u32 = 1;

pub fn encode_array(a: &ArrayViewD<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * a.ndim() + 4 * a.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_array(bytes: &[u8], origin: &Path) -> Result<ArrayD<f32>> {
    let err = |m: String| Error::format(origin, m);
    if bytes.len() < 12 {
        return Err(err("truncated header".into()));
    }
    if &bytes[..4] != ARRAY_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ARRAY_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let ndims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_len = 12 + 8 * ndims;
    if bytes.len() < header_len {
        return Err(err("truncated dimension list".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 12 + 8 * i;
            u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err("dimension product overflows".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() != count * 4 {
        return Err(err(format!(
            "payload holds {} bytes, header dims {:?} require {}",
            payload.len(),
            dims,
            count * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("checked length"))
}

pub fn write_array(path: impl AsRef<Path>, a: &ArrayViewD<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&encode_array(a))?;
    w.flush()?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_array(&bytes, path)
}

/// Stores an `f64` array at `f32` precision.
pub fn write_array_f64(path: impl AsRef<Path>, a: &ArrayViewD<f64>) -> Result<()> {
    write_array(path, &a.mapv(|v| v as f32).view())
}

pub fn read_array_f64(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    Ok(read_array(path)?.mapv(f64::from))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rounds every entry to the nearest `f32`, the precision arrays are stored at.
pub fn to_storage_precision<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
            let back = decode_array(&encode_array(&a.view()), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), a.shape());
            for (x, y) in a.iter().zip(back.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sdmp");
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 100 + i[1] * 10 + i[2]) as f32 * 0.37);
        write_array(&path, &a.view()).unwrap();
        assert_eq!(read_array(&path).unwrap(), a);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = ArrayD::from_elem(IxDyn(&[4, 4]), 1.5f32);
        let bytes = encode_array(&a.view());
        let err = decode_array(&bytes[..bytes.len() - 3], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(decode_array(&bytes[..7], Path::new("t")).is_err());
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let a = ArrayD::from_elem(IxDyn(&[4, 4]), 1.5f32);
        let mut bytes = encode_array(&a.view());
        // claim 5x4 while carrying 16 values
        bytes[12..20].copy_from_slice(&5u64.to_le_bytes());
        let err = decode_array(&bytes, Path::new("t")).unwrap_err().to_string();
        assert!(err.contains("require"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let a = ArrayD::from_elem(IxDyn(&[2]), 0.0f32);
        let mut bytes = encode_array(&a.view());
        bytes[0] = b'X';
        assert!(decode_array(&bytes, Path::new("t")).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode_array(&a.view());
        bytes[4] = 2;
        assert!(decode_array(&bytes, Path::new("t")).unwrap_err().to_string().contains("version"));
    }
}
