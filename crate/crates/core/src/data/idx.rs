//! IDX container format: big-endian header, unsigned-byte payload.
//!
//! Header layout: two zero bytes, a type code (`0x08` for `u8`), the rank,
//! then one big-endian `u32` per dimension.

use thiserror::Error;

const TYPE_U8: u8 = 0x08;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("IDX header truncated: need {expected} bytes, got {actual}")]
    HeaderTruncated { expected: usize, actual: usize },

    #[error("bad IDX magic 0x{found:08x}")]
    BadMagic { found: u32 },

    #[error("unsupported IDX element type 0x{0:02x} (only unsigned bytes are supported)")]
    UnsupportedType(u8),

    #[error("IDX rank {found} does not match the expected rank {expected}")]
    Rank { expected: usize, found: usize },

    #[error("IDX dimensions {0:?} overflow the addressable size")]
    DimensionOverflow(Vec<u32>),

    #[error("IDX payload truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("IDX payload has {actual} bytes, {expected} expected; trailing data")]
    TrailingBytes { expected: usize, actual: usize },
}

/// A dense `u8` array with its dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "IDX dims and data disagree");
        IdxArray { dims, data }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Number of items along the leading dimension.
    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn magic(rank: usize) -> u32 {
    ((TYPE_U8 as u32) << 8) | rank as u32
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::HeaderTruncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if bytes[0] != 0 || bytes[1] != 0 || bytes[3] == 0 {
        return Err(IdxError::BadMagic { found });
    }
    if bytes[2] != TYPE_U8 {
        return Err(IdxError::UnsupportedType(bytes[2]));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::HeaderTruncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let raw: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    let expected = raw
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| IdxError::DimensionOverflow(raw.clone()))?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IdxError::TrailingBytes {
            expected,
            actual: payload.len(),
        });
    }
    Ok(IdxArray {
        dims: raw.into_iter().map(|d| d as usize).collect(),
        data: payload.to_vec(),
    })
}

/// Parses and checks the rank.
pub fn parse_idx_rank(bytes: &[u8], rank: usize) -> Result<IdxArray, IdxError> {
    let arr = parse_idx(bytes)?;
    if arr.rank() != rank {
        return Err(IdxError::Rank {
            expected: rank,
            found: arr.rank(),
        });
    }
    Ok(arr)
}

/// Serializes `arr` to IDX bytes. Panics if a dimension exceeds `u32` or the
/// rank exceeds 255.
pub fn to_idx(arr: &IdxArray) -> Vec<u8> {
    assert!((1..=255).contains(&arr.rank()), "IDX rank must be in 1..=255");
    let mut out = Vec::with_capacity(4 + 4 * arr.rank() + arr.data.len());
    out.extend_from_slice(&magic(arr.rank()).to_be_bytes());
    for &d in &arr.dims {
        out.extend_from_slice(&u32::try_from(d).expect("IDX dimension exceeds u32").to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn single_image() {
        let mut bytes = header(0x0000_0803, &[1, 28, 28]);
        bytes.extend((0..784).map(|i| (i % 256) as u8));
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![1, 28, 28]);
        assert_eq!(arr.data[783], (783 % 256) as u8);
        assert_eq!(to_idx(&arr), bytes);
    }

    #[test]
    fn labels_and_empty() {
        let mut bytes = header(0x0000_0801, &[3]);
        bytes.extend([7, 2, 9]);
        assert_eq!(parse_idx_rank(&bytes, 1).unwrap().data, vec![7, 2, 9]);
        assert!(matches!(
            parse_idx_rank(&bytes, 3),
            Err(IdxError::Rank { expected: 3, found: 1 })
        ));

        let empty = parse_idx(&header(0x0000_0803, &[0, 28, 28])).unwrap();
        assert!(empty.is_empty());
        assert!(empty.data.is_empty());
    }

    #[test]
    fn error_contract() {
        let mut bytes = header(0x0000_0803, &[1, 28, 28]);
        bytes.extend(vec![0u8; 783]);
        let err = parse_idx(&bytes).unwrap_err();
        assert_eq!(
            err,
            IdxError::Truncated {
                expected: 784,
                actual: 783
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("784") && msg.contains("783"), "{msg}");

        bytes.extend([0, 0]);
        assert!(matches!(parse_idx(&bytes), Err(IdxError::TrailingBytes { .. })));
        assert!(matches!(parse_idx(&header(0x0102_0803, &[1])), Err(IdxError::BadMagic { .. })));
        assert!(matches!(parse_idx(&header(0x0000_0d01, &[0])), Err(IdxError::UnsupportedType(0x0d))));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(IdxError::HeaderTruncated { .. })));
        assert!(matches!(
            parse_idx(&header(0x0000_0803, &[1, 28])),
            Err(IdxError::HeaderTruncated { expected: 16, actual: 12 })
        ));
        if usize::BITS == 64 {
            let huge = header(0x0000_0804, &[u32::MAX, u32::MAX, u32::MAX, u32::MAX]);
            assert!(matches!(parse_idx(&huge), Err(IdxError::DimensionOverflow(_))));
        }
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(0usize..6, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let arr = IdxArray::new(dims, data);
            prop_assert_eq!(parse_idx(&to_idx(&arr)).unwrap(), arr);
        }
    }
}
