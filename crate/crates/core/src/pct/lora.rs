//! Low-rank adapters over every dense layer of a [`DenoiserParams`].
//!
//! Adapter file (integers u32 LE, reals f64 LE):
//!
//! ```text
//! magic "PCLR" | version | base checksum (8 bytes) | layer count
//! per layer: rank | in_dim | out_dim
//! per layer: A (rank x in, row-major), B (out x rank, row-major)
//! content digest (8 bytes)
//! ```

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::denoiser::{DenoiserParams, Gradients};
use crate::error::{check_len, Error, Result};
use crate::optim::ParamSet;
use crate::tensor::{Mat, SeededRng};

pub const ADAPTER_MAGIC: &[u8; 4] = b"PCLR";
pub const ADAPTER_VERSION: u32 = 1;

/// `ΔW = B A` with `A: r x in` and `B: out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Mat,
    pub b: Mat,
}

impl LoraAdapter {
    /// Gaussian `A` with variance `1 / in`, zero `B`.
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || rank >= in_dim.min(out_dim) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must satisfy 1 <= r < min({in_dim}, {out_dim})"
            )));
        }
        Ok(Self {
            a: Mat::gaussian(rank, in_dim, (1.0 / in_dim as f64).sqrt(), rng),
            b: Mat::zeros(out_dim, rank),
        })
    }

    pub fn from_parts(a: Mat, b: Mat) -> Result<Self> {
        check_len("LoRA rank", a.rows(), b.cols())?;
        let rank = a.rows();
        if rank == 0 || rank >= a.cols().min(b.rows()) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} invalid for a {}x{} layer",
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// `ΔW = B A`.
    pub fn delta(&self) -> Mat {
        self.b.matmul(&self.a).expect("adapter factors chain")
    }

    /// `W0 + λ ΔW`; `λ = 0` returns `W0` untouched.
    pub fn merged(&self, w0: &Mat, lambda: f64) -> Result<Mat> {
        check_len("LoRA rows", w0.rows(), self.out_dim())?;
        check_len("LoRA cols", w0.cols(), self.in_dim())?;
        let mut w = w0.clone();
        if lambda != 0.0 {
            for (wi, di) in w.data_mut().iter_mut().zip(self.delta().data()) {
                *wi += lambda * di;
            }
        }
        Ok(w)
    }
}

/// `(W0 + λ B A) x`.
pub fn lora_forward(w0: &Mat, adapter: &LoraAdapter, x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    adapter.merged(w0, lambda)?.matvec(x)
}

/// One adapter per layer of a base model.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    /// Fresh adapters for every layer. A layer too narrow for `rank` gets
    /// rank `min(in, out) - 1`.
    pub fn init(base: &DenoiserParams, rank: usize, rng: &mut SeededRng) -> Result<Self> {
        let adapters = base
            .layers()
            .iter()
            .map(|l| {
                let r = rank.min(l.in_dim().min(l.out_dim()).saturating_sub(1));
                LoraAdapter::new(l.in_dim(), l.out_dim(), r, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { adapters })
    }

    fn check(&self, base: &DenoiserParams) -> Result<()> {
        check_len("adapter count", base.layers().len(), self.adapters.len())?;
        for (l, ad) in base.layers().iter().zip(&self.adapters) {
            check_len("adapter in_dim", l.in_dim(), ad.in_dim())?;
            check_len("adapter out_dim", l.out_dim(), ad.out_dim())?;
        }
        Ok(())
    }

    /// Base model with every weight replaced by `W0 + λ ΔW`. Biases are shared.
    pub fn merge(&self, base: &DenoiserParams, lambda: f64) -> Result<DenoiserParams> {
        self.check(base)?;
        let mut out = base.clone();
        if lambda == 0.0 {
            return Ok(out);
        }
        for (layer, ad) in out.layers_mut().iter_mut().zip(&self.adapters) {
            layer.weight = ad.merged(&layer.weight, lambda)?;
        }
        Ok(out)
    }

    /// Adapter gradients from the gradient of a model merged at `lambda`:
    /// `dB = λ G Aᵀ`, `dA = λ Bᵀ G`.
    pub fn project_gradients(&self, g: &Gradients, lambda: f64) -> Result<LoraSet> {
        check_len("gradient layers", self.adapters.len(), g.layers.len())?;
        let adapters = self
            .adapters
            .iter()
            .zip(&g.layers)
            .map(|(ad, lg)| {
                let gw = &lg.weight;
                let r = ad.rank();
                let mut da = Mat::zeros(r, ad.in_dim());
                let mut db = Mat::zeros(ad.out_dim(), r);
                for o in 0..ad.out_dim() {
                    let grow = gw.row(o);
                    for k in 0..r {
                        let arow = ad.a.row(k);
                        let mut s = 0.0;
                        for (gi, ai) in grow.iter().zip(arow) {
                            s += gi * ai;
                        }
                        db.set(o, k, lambda * s);
                        let bok = lambda * ad.b.get(o, k);
                        if bok != 0.0 {
                            let dst = &mut da.data_mut()[k * ad.in_dim()..(k + 1) * ad.in_dim()];
                            for (d, gi) in dst.iter_mut().zip(grow) {
                                *d += bok * gi;
                            }
                        }
                    }
                }
                LoraAdapter { a: da, b: db }
            })
            .collect();
        Ok(LoraSet { adapters })
    }

    pub fn to_bytes(&self, base_checksum: [u8; 8]) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(ADAPTER_MAGIC);
        w.u32(ADAPTER_VERSION);
        w.bytes(&base_checksum);
        w.u32(self.adapters.len() as u32);
        for ad in &self.adapters {
            w.u32(ad.rank() as u32);
            w.u32(ad.in_dim() as u32);
            w.u32(ad.out_dim() as u32);
        }
        for ad in &self.adapters {
            w.f64s(ad.a.data());
            w.f64s(ad.b.data());
        }
        w.finish()
    }

    /// Adapters and the checksum of the base model they were trained on.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, [u8; 8])> {
        let mut r = ByteReader::new(bytes, "adapter file")?;
        r.magic(ADAPTER_MAGIC)?;
        let version = r.u32()?;
        if version != ADAPTER_VERSION {
            return Err(Error::Format(format!(
                "adapter version {version} unsupported"
            )));
        }
        let mut checksum = [0u8; 8];
        checksum.copy_from_slice(r.take(8)?);
        let count = r.u32()? as usize;
        if count == 0 || count > 1024 {
            return Err(Error::Format(format!("implausible adapter count {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            shapes.push((r.u32()? as usize, r.u32()? as usize, r.u32()? as usize));
        }
        let mut adapters = Vec::with_capacity(count);
        for (rank, i, o) in shapes {
            let fmt = |e: Error| Error::Format(e.to_string());
            let a = Mat::from_vec(rank, i, r.f64s(rank * i)?).map_err(fmt)?;
            let b = Mat::from_vec(o, rank, r.f64s(o * rank)?).map_err(fmt)?;
            adapters.push(LoraAdapter::from_parts(a, b).map_err(fmt)?);
        }
        r.finish()?;
        Ok((Self { adapters }, checksum))
    }
}

pub fn save_adapters(set: &LoraSet, base_checksum: [u8; 8], path: &Path) -> Result<()> {
    std::fs::write(path, set.to_bytes(base_checksum))?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<(LoraSet, [u8; 8])> {
    LoraSet::from_bytes(&std::fs::read(path)?)
}

impl ParamSet for LoraSet {
    fn slices(&self) -> Vec<&[f64]> {
        self.adapters
            .iter()
            .flat_map(|a| [a.a.data(), a.b.data()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [a.a.data_mut(), a.b.data_mut()])
            .collect()
    }
}
