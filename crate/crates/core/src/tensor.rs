//! `PDET` tensor files: a tiny self-describing container for f64 arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PDET" | version: u8 = 1 | dtype: u8 = 0 (f64 LE) | ndim: u8 | dims: ndim x u64 | payload
//! ```
//!
//! The payload is the row-major element sequence, exactly `product(dims) * 8` bytes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::domain::SolutionField;

pub const MAGIC: &[u8; 4] = b"PDET";
pub const VERSION: u8 = 1;
pub const DTYPE_F64_LE: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("tensor dimensions overflow")]
    Overflow,
    #[error("tensor rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(array: &ArrayD<f64>) -> Result<Vec<u8>, TensorError> {
    let ndim = array.ndim();
    if ndim > u8::MAX as usize {
        return Err(TensorError::RankTooLarge(ndim));
    }
    let mut out = Vec::with_capacity(7 + 8 * ndim + 8 * array.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64_LE);
    out.push(ndim as u8);
    for &d in array.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    // `iter` walks logical row-major order regardless of memory layout.
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ArrayD<f64>, TensorError> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(TensorError::Truncated { expected, found: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    need(7)?;
    if bytes[4] != VERSION {
        return Err(TensorError::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F64_LE {
        return Err(TensorError::UnsupportedDtype(bytes[5]));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 8 * ndim;
    need(header)?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 7 + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("length checked"));
        dims.push(usize::try_from(d).map_err(|_| TensorError::Overflow)?);
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(TensorError::Overflow)?;
    let total = count.checked_mul(8).and_then(|p| p.checked_add(header)).ok_or(TensorError::Overflow)?;
    need(total)?;
    if bytes.len() > total {
        return Err(TensorError::TrailingBytes(bytes.len() - total));
    }
    let values = bytes[header..total]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), values).expect("element count matches dims"))
}

pub fn store(path: &Path, array: &ArrayD<f64>) -> Result<(), TensorError> {
    let bytes = encode(array)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ArrayD<f64>, TensorError> {
    decode(&fs::read(path)?)
}

/// Writes `field` to `path` and reads it back.
pub fn tensor_roundtrip(field: &SolutionField, path: &Path) -> Result<SolutionField, TensorError> {
    store(path, &field.data)?;
    Ok(SolutionField::new(load(path)?, field.components.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_batch_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let field = SolutionField::zeros(&[0, 2, 8], vec!["u".into()]);
        let back = tensor_roundtrip(&field, &dir.path().join("e.pdet")).unwrap();
        assert_eq!(back.shape(), &[0, 2, 8]);
    }

    #[test]
    fn random_tensor_is_byte_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..4 * 11 * 256).map(|_| rng.random_range(-1e3..1e3)).collect();
        let field = SolutionField::scalar(ArrayD::from_shape_vec(IxDyn(&[4, 11, 256]), values).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pdet");
        let back = tensor_roundtrip(&field, &path).unwrap();
        let original: Vec<u64> = field.data.iter().map(|v| v.to_bits()).collect();
        let loaded: Vec<u64> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(original, loaded);
        assert_eq!(fs::read(&path).unwrap().len(), 7 + 3 * 8 + 4 * 11 * 256 * 8);
    }

    #[test]
    fn header_layout_is_fixed() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -2.5]).unwrap();
        let bytes = encode(&a).unwrap();
        assert_eq!(&bytes[..4], b"PDET");
        assert_eq!(bytes[4..7], [1, 0, 1]);
        assert_eq!(bytes[7..15], 2u64.to_le_bytes());
        assert_eq!(bytes[15..23], 1.0f64.to_le_bytes());
    }

    #[test]
    fn distinct_decode_errors() {
        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode(&a).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad), Err(TensorError::BadMagic(m)) if &m == b"XXXX"));

        let mut bad = good.clone();
        bad[5] = 1;
        assert!(matches!(decode(&bad), Err(TensorError::UnsupportedDtype(1))));

        assert!(matches!(decode(&good[..good.len() - 3]), Err(TensorError::Truncated { .. })));
        assert!(matches!(decode(&good[..9]), Err(TensorError::Truncated { .. })));
    }

    #[test]
    fn non_standard_layout_is_written_row_major() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), (0..6).map(|v| v as f64).collect()).unwrap();
        let t = a.t().to_owned().into_dyn();
        let back = decode(&encode(&a.t().into_owned().into_dyn()).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn roundtrip_any_shape(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
            let count: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..count).map(|_| f64::from_bits(rng.random())).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&dims), values).unwrap();
            let back = decode(&encode(&a).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), a.shape());
            let eq = a.iter().zip(back.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(eq);
        }
    }
}
