//! `PKFT` feature files: also the ingestion path for externally computed
//! features such as bottleneck or MFCC+BN vectors.
//!
//! Layout (little-endian): magic `PKFT`, `u32` version = 1, `u32` frames,
//! `u32` dim, `f32` frame shift in seconds, then frames × dim `f32` row-major.

use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::real::Real;

pub const FEATURE_MAGIC: &[u8; 4] = b"PKFT";

pub fn encode_features<T: Real>(feat: &FeatureMatrix<T>) -> Result<Vec<u8>> {
    let mut w = Writer::new(FEATURE_MAGIC);
    w.len_u32(feat.num_frames())?;
    w.len_u32(feat.dim())?;
    w.f32(feat.frame_shift() as f32);
    for &v in feat.as_slice() {
        w.f32(v.f64() as f32);
    }
    Ok(w.into_bytes())
}

pub fn decode_features<T: Real>(bytes: &[u8]) -> Result<FeatureMatrix<T>> {
    let mut r = Reader::new(bytes, FEATURE_MAGIC, "PKFT")?;
    let frames = r.usize()?;
    let dim = r.usize()?;
    let shift = f64::from(r.f32()?);
    let count = frames
        .checked_mul(dim)
        .ok_or_else(|| Error::Corrupt("PKFT size overflow".into()))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(T::of(f64::from(r.f32()?)));
    }
    r.finish()?;
    FeatureMatrix::new(data, frames, dim, shift)
}

pub fn write_features<T: Real>(path: &Path, feat: &FeatureMatrix<T>) -> Result<()> {
    let bytes = encode_features(feat)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features<T: Real>(path: &Path) -> Result<FeatureMatrix<T>> {
    decode_features(&read_file(path)?)
}
