//! Binary checkpoint format (all integers u32 LE, all reals f64 LE):
//!
//! ```text
//! magic "PCKP" | version | n | T | time_freqs | layer count
//! per layer: in_dim | out_dim | activation code
//! per layer: weight (row-major), bias
//! schedule: alpha(0..=T)
//! content digest (8 bytes)
//! ```

use std::path::Path;

use super::{Activation, DenoiserParams, Layer, NoiseSchedule};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn to_bytes(params: &DenoiserParams) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(params.dim() as u32);
    w.u32(params.steps() as u32);
    w.u32(params.time_freqs() as u32);
    w.u32(params.layers().len() as u32);
    for l in params.layers() {
        w.u32(l.in_dim() as u32);
        w.u32(l.out_dim() as u32);
        w.u32(l.activation.code());
    }
    for l in params.layers() {
        w.f64s(l.weight.data());
        w.f64s(&l.bias);
    }
    w.f64s(params.schedule().alphas());
    w.finish()
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = ByteReader::new(bytes, "checkpoint")?;
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let dim = r.u32()? as usize;
    let steps = r.u32()? as usize;
    let freqs = r.u32()? as usize;
    let count = r.u32()? as usize;
    if count == 0 || count > 1024 {
        return Err(Error::Format(format!("implausible layer count {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let cols = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let act = Activation::from_code(r.u32()?)?;
        shapes.push((rows, cols, act));
    }
    let mut layers = Vec::with_capacity(count);
    for (rows, cols, act) in shapes {
        let w = r.f64s(rows * cols)?;
        let b = r.f64s(rows)?;
        let weight = Mat::from_vec(rows, cols, w).map_err(|e| Error::Format(e.to_string()))?;
        layers.push(Layer::new(weight, b, act)?);
    }
    let alpha = r.f64s(steps + 1)?;
    r.finish()?;
    let schedule = NoiseSchedule::new(alpha).map_err(|e| Error::Format(e.to_string()))?;
    DenoiserParams::new(dim, freqs, layers, schedule).map_err(|e| Error::Format(e.to_string()))
}

impl DenoiserParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        from_bytes(bytes)
    }
}

pub fn save_checkpoint(params: &DenoiserParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn net() -> DenoiserParams {
        DenoiserParams::init(
            2,
            &[8, 8],
            2,
            NoiseSchedule::cosine(12).unwrap(),
            &mut SeededRng::new(4),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = net();
        let bytes = p.to_bytes();
        let q = DenoiserParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, q.to_bytes());
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = net().to_bytes();
        bytes[0] = b'X';
        let err = DenoiserParams::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
        let err = DenoiserParams::from_bytes(&crate::codec::reseal(&bytes)).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_and_version_rejected() {
        let bytes = net().to_bytes();
        assert!(DenoiserParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 9;
        let err = DenoiserParams::from_bytes(&crate::codec::reseal(&v2)).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let mut weight = bytes.clone();
        weight[60] ^= 1;
        assert!(DenoiserParams::from_bytes(&weight).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(DenoiserParams::from_bytes(&extra).is_err());
    }
}
