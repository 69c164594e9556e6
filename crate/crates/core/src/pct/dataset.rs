//! Picard-history datasets.
//!
//! File layout (integers u32 LE unless noted, reals f64 LE):
//!
//! ```text
//! magic "PCTD" | version | N | T | K | n | solver code | base checksum (8 bytes)
//! per record: seed (u64) | x_0 (n) | history X^0..X^K ((K+1)(T+1)n)
//! content digest (8 bytes)
//! ```

use std::path::Path;

use rayon::prelude::*;

use crate::codec::{ByteReader, ByteWriter};
use crate::denoiser::DenoiserParams;
use crate::error::{check_len, Error, Result};
use crate::solver::{phi_sweep, StepFn, StepKind, Trajectory};
use crate::tensor::{child_seed, gaussian, SeededRng};

pub const DATASET_MAGIC: &[u8; 4] = b"PCTD";
pub const DATASET_VERSION: u32 = 1;

/// Regeneration attempts per record before giving up.
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub records: usize,
    pub steps: usize,
    pub iters: usize,
    pub dim: usize,
    pub solver: StepKind,
    pub base_checksum: [u8; 8],
}

/// Picard history `X^0..X^K` started from `x_0`; `X^K` is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub x0: Vec<f64>,
    pub seed: u64,
    pub history: Vec<Trajectory>,
}

impl TrajectoryRecord {
    pub fn target(&self) -> &Trajectory {
        self.history.last().expect("history is never empty")
    }

    pub fn iters(&self) -> usize {
        self.history.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

/// Full history of `iters` plain sweeps from the constant trajectory.
pub fn picard_history(
    step: &StepFn,
    params: &DenoiserParams,
    x0: &[f64],
    iters: usize,
) -> Result<Vec<Trajectory>> {
    let mut history = Vec::with_capacity(iters + 1);
    history.push(Trajectory::constant(x0, step.steps()));
    for _ in 0..iters {
        let next = phi_sweep(step, params, history.last().unwrap())?;
        history.push(next);
    }
    Ok(history)
}

fn make_record(
    step: &StepFn,
    base: &DenoiserParams,
    iters: usize,
    seed: u64,
) -> Result<(TrajectoryRecord, usize)> {
    let mut rejected = 0;
    for attempt in 0..MAX_ATTEMPTS {
        let s = if attempt == 0 {
            seed
        } else {
            child_seed(seed, attempt)
        };
        let x0 = gaussian(&mut SeededRng::new(s), base.dim());
        let history = picard_history(step, base, &x0, iters)?;
        if history.iter().all(Trajectory::is_finite) {
            return Ok((
                TrajectoryRecord {
                    x0,
                    seed: s,
                    history,
                },
                rejected,
            ));
        }
        rejected += 1;
    }
    Err(Error::NonFinite {
        stage: "trajectory dataset generation",
        iteration: iters,
    })
}

/// `count` records with `x_0` drawn from child seeds of `seed`. Returns the
/// dataset and how many non-finite histories were regenerated.
pub fn generate_dataset(
    base: &DenoiserParams,
    step: &StepFn,
    count: usize,
    iters: usize,
    seed: u64,
) -> Result<(TrajectoryDataset, usize)> {
    check_len("solver steps vs model T", base.steps(), step.steps())?;
    if iters == 0 {
        return Err(Error::Config("dataset needs K >= 1".into()));
    }
    let built: Vec<(TrajectoryRecord, usize)> = (0..count as u64)
        .into_par_iter()
        .map(|i| make_record(step, base, iters, child_seed(seed, i)))
        .collect::<Result<_>>()?;
    let rejected = built.iter().map(|(_, r)| r).sum();
    if rejected > 0 {
        log::warn!("regenerated {rejected} non-finite trajectory records");
    }
    let header = DatasetHeader {
        records: count,
        steps: step.steps(),
        iters,
        dim: base.dim(),
        solver: step.kind(),
        base_checksum: base.checksum(),
    };
    let records = built.into_iter().map(|(r, _)| r).collect();
    Ok((TrajectoryDataset { header, records }, rejected))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl TrajectoryDataset {
    /// Checks that `base` is the model that produced the dataset.
    pub fn verify_base(&self, base: &DenoiserParams) -> Result<()> {
        let got = base.checksum();
        if got != self.header.base_checksum {
            return Err(Error::Checksum {
                expected: hex(&self.header.base_checksum),
                got: hex(&got),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        for v in [h.records, h.steps, h.iters, h.dim] {
            w.u32(v as u32);
        }
        w.u32(h.solver.code());
        w.bytes(&h.base_checksum);
        for r in &self.records {
            w.u64(r.seed);
            w.f64s(&r.x0);
            for traj in &r.history {
                w.f64s(traj.as_flat());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "trajectory dataset")?;
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset version {version} unsupported"
            )));
        }
        let records = r.u32()? as usize;
        let steps = r.u32()? as usize;
        let iters = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let solver = StepKind::from_code(r.u32()?)?;
        let mut base_checksum = [0u8; 8];
        base_checksum.copy_from_slice(r.take(8)?);
        if steps == 0 || dim == 0 || iters == 0 {
            return Err(Error::Format("dataset header has a zero dimension".into()));
        }
        let per_record = 8 + 8 * (dim + (iters + 1) * (steps + 1) * dim);
        if records.saturating_mul(per_record) != r.remaining() {
            return Err(Error::Format(format!(
                "dataset body is {} bytes, header implies {}",
                r.remaining(),
                records.saturating_mul(per_record)
            )));
        }
        let mut out = Vec::with_capacity(records);
        for _ in 0..records {
            let seed = r.u64()?;
            let x0 = r.f64s(dim)?;
            let history = (0..=iters)
                .map(|_| Trajectory::from_flat(dim, r.f64s((steps + 1) * dim)?))
                .collect::<Result<Vec<_>>>()?;
            out.push(TrajectoryRecord { x0, seed, history });
        }
        r.finish()?;
        Ok(Self {
            header: DatasetHeader {
                records,
                steps,
                iters,
                dim,
                solver,
                base_checksum,
            },
            records: out,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NoiseSchedule;

    fn base() -> DenoiserParams {
        DenoiserParams::init(
            2,
            &[8, 8],
            2,
            NoiseSchedule::cosine(10).unwrap(),
            &mut SeededRng::new(3),
        )
        .unwrap()
    }

    fn small() -> (DenoiserParams, StepFn, TrajectoryDataset) {
        let p = base();
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let (ds, rejected) = generate_dataset(&p, &step, 3, 5, 42).unwrap();
        assert_eq!(rejected, 0);
        (p, step, ds)
    }

    #[test]
    fn counts_and_header() {
        let (p, _, ds) = small();
        assert_eq!(ds.records.len(), 3);
        assert!(ds.records.iter().all(|r| r.history.len() == 6));
        let h = ds.header;
        assert_eq!((h.records, h.steps, h.iters, h.dim), (3, 10, 5, 2));
        assert_eq!(h.base_checksum, p.checksum());
        for r in &ds.records {
            assert_eq!(r.history[0], Trajectory::constant(&r.x0, 10));
            assert!(r.history.iter().all(|t| t.initial() == r.x0.as_slice()));
        }
    }

    #[test]
    fn stored_target_is_a_near_fixed_point() {
        let (p, step, ds) = small();
        for r in &ds.records {
            let k = r.iters();
            let last_residual = r.history[k].max_abs_diff(&r.history[k - 1]);
            let again = phi_sweep(&step, &p, r.target()).unwrap();
            assert!(again.max_abs_diff(r.target()) <= last_residual + 1e-15);
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (_, _, ds) = small();
        let bytes = ds.to_bytes();
        let back = TrajectoryDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_files_rejected() {
        let (_, _, ds) = small();
        let bytes = ds.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(TrajectoryDataset::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("digest"));
        let resealed = crate::codec::reseal(&bad);
        assert!(TrajectoryDataset::from_bytes(&resealed)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        assert!(TrajectoryDataset::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(TrajectoryDataset::from_bytes(&bytes[..20]).is_err());
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(TrajectoryDataset::from_bytes(&crate::codec::reseal(&v)).is_err());
        // A record count that disagrees with the body.
        let mut n = bytes.clone();
        n[8] = 2;
        let err = TrajectoryDataset::from_bytes(&crate::codec::reseal(&n)).unwrap_err();
        assert!(err.to_string().contains("header implies"), "{err}");
    }

    #[test]
    fn generation_is_deterministic() {
        let (p, step, ds) = small();
        let (again, _) = generate_dataset(&p, &step, 3, 5, 42).unwrap();
        assert_eq!(again.to_bytes(), ds.to_bytes());
        let (other, _) = generate_dataset(&p, &step, 3, 5, 43).unwrap();
        assert_ne!(other.to_bytes(), ds.to_bytes());
    }

    #[test]
    fn checksum_guard() {
        let (p, _, ds) = small();
        ds.verify_base(&p).unwrap();
        let err = ds.verify_base(&p.zeroed()).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }));
    }
}
