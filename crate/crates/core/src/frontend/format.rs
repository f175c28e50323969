//! Binary feature files.
//!
//! Little-endian layout: magic `XCSF`, `u32` version (1), `u8` modality id,
//! `u32` frame count `T`, `u32` dimension `d`, then `T·d` `f32` values in
//! row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, Modality};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"XCSF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4;

/// Serializes `seq`; values are narrowed to `f32`.
pub fn write_features(seq: &FeatureSequence) -> Vec<u8> {
    let (frames, dim) = (seq.frames(), seq.dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames * dim);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(seq.modality.id());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in seq.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses a feature file image. `expected_dim`, when given, must match.
pub fn read_features(bytes: &[u8], expected_dim: Option<usize>) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::FeatureTruncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("four bytes");
    if magic != FEATURE_MAGIC {
        return Err(Error::FeatureMagic(magic));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::FeatureVersion(version));
    }
    let modality = Modality::from_id(bytes[8])?;
    let frames = u32_at(9) as usize;
    let dim = u32_at(13) as usize;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::FeatureDim {
                expected,
                found: dim,
            });
        }
    }
    let expected = HEADER_LEN + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(Error::FeatureTruncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    FeatureSequence::new(modality, Tensor::new([frames, dim], data)?)
}

pub fn save_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    std::fs::write(path, write_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes, expected_dim)
}
