//! Feature file layout (all little-endian):
//!
//! ```text
//! "EFEA" | u32 version = 1 | u32 dim | u64 frames | frames * dim f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::FeatureSeq;

pub const FEATURE_MAGIC: &[u8; 4] = b"EFEA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn encode_features(seq: &FeatureSeq) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.as_flat().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.len() as u64).to_le_bytes());
    for &v in seq.as_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSeq> {
    let err = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(err(0, "bad magic, expected \"EFEA\"".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(err(8, "zero feature dimension".into()));
    }
    let frames = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (frames as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
    if (bytes.len() as u128) < expected {
        let complete = (bytes.len() - HEADER_LEN) / (4 * dim);
        return Err(err(
            HEADER_LEN + complete * 4 * dim,
            format!("truncated after {complete} of {frames} frames"),
        ));
    }
    if (bytes.len() as u128) > expected {
        return Err(err(expected as usize, "trailing bytes after last frame".into()));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureSeq::from_flat(dim, data)
}

pub fn write_features(path: &Path, seq: &FeatureSeq) -> Result<()> {
    fs::write(path, encode_features(seq))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSeq> {
    decode_features(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSeq {
        let data = (0..33 * 4).map(|i| (i as f32 * 0.25 - 3.0) as f64).collect();
        FeatureSeq::from_flat(33, data).unwrap()
    }

    #[test]
    fn empty_sequence_round_trips() {
        let seq = FeatureSeq::new(33);
        let bytes = encode_features(&seq);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 33);
    }

    #[test]
    fn truncated_mid_frame_names_offset() {
        let bytes = encode_features(&sample());
        let cut = &bytes[..HEADER_LEN + 33 * 4 + 10];
        match decode_features(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, HEADER_LEN + 33 * 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_features(&sample());
        bytes[4] = 9;
        assert!(matches!(decode_features(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_features(&sample());
        assert_eq!(&bytes[..4], b"EFEA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 33);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 33 * 4);
    }
}
