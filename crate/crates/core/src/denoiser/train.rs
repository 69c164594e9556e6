//! Base-model training: corrupt data with the forward process and regress the
//! injected noise.

use rayon::prelude::*;

use super::{DenoiserParams, Gradients, NoiseSchedule};
use crate::error::{check_len, Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{gaussian, SeededRng};

/// Per-chunk size for gradient fan-out. Fixed so the reduction order never
/// depends on the thread count.
const GRAD_CHUNK: usize = 16;

/// `x_t = sqrt(alpha(t)) * x_data + sqrt(1 - alpha(t)) * noise`.
pub fn corrupt(schedule: &NoiseSchedule, x_data: &[f64], t: usize, noise: &[f64]) -> Vec<f64> {
    let a = schedule.alpha(t).sqrt();
    let s = schedule.var(t).sqrt();
    x_data
        .iter()
        .zip(noise)
        .map(|(x, e)| a * x + s * e)
        .collect()
}

/// Clean points, their sampled steps and the noises used to corrupt them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: Vec<Vec<f64>>,
    pub times: Vec<usize>,
    pub noises: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(data: Vec<Vec<f64>>, times: Vec<usize>, noises: Vec<Vec<f64>>) -> Result<Self> {
        check_len("batch times", data.len(), times.len())?;
        check_len("batch noises", data.len(), noises.len())?;
        Ok(Self {
            data,
            times,
            noises,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Draws steps uniformly from `0..T` (the steps the sampler queries) and
    /// standard-normal noises.
    pub fn sample(data: Vec<Vec<f64>>, steps: usize, rng: &mut SeededRng) -> Self {
        let times = data.iter().map(|_| rng.below(steps)).collect();
        let noises = data.iter().map(|x| gaussian(rng, x.len())).collect();
        Self {
            data,
            times,
            noises,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `scale * mean((predict(x_t, t) - noise)^2)` over batch and coordinates.
    NoiseMse { scale: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        Self::NoiseMse { scale: 1.0 }
    }
}

/// Loss and exact reverse-mode gradient over a batch.
pub fn grad(params: &DenoiserParams, batch: &Batch, loss: LossKind) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("gradient of an empty batch".into()));
    }
    let n = params.dim();
    for (x, e) in batch.data.iter().zip(&batch.noises) {
        check_len("batch point", n, x.len())?;
        check_len("batch noise", n, e.len())?;
    }
    if let Some(&t) = batch.times.iter().find(|&&t| t > params.steps()) {
        return Err(Error::Config(format!(
            "batch step {t} exceeds T={}",
            params.steps()
        )));
    }
    let LossKind::NoiseMse { scale } = loss;
    let norm = scale / (batch.len() * n) as f64;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<(f64, Gradients)> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(params);
            let mut loss = 0.0;
            for &i in chunk {
                let t = batch.times[i];
                let xt = corrupt(params.schedule(), &batch.data[i], t, &batch.noises[i]);
                let trace = params.forward_trace(&xt, t);
                let d_out: Vec<f64> = trace
                    .output()
                    .iter()
                    .zip(&batch.noises[i])
                    .map(|(p, e)| {
                        loss += (p - e) * (p - e);
                        2.0 * norm * (p - e)
                    })
                    .collect();
                params.backward(&trace, &d_out, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss * norm, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            lr: 2e-3,
            cosine_decay: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DdpmLog {
    /// Mean noise-prediction loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl DdpmLog {
    /// Mean of the epoch losses in consecutive windows of `window` epochs.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.epoch_losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Trains `params` on `data` with Adam. Aborts on a non-finite loss.
pub fn ddpm_train(
    mut params: DenoiserParams,
    data: &[Vec<f64>],
    cfg: &DdpmConfig,
) -> Result<(DenoiserParams, DdpmLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut opt = Adam::new(&params);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut log = DdpmLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let points = chunk.iter().map(|&i| data[i].clone()).collect();
            let batch = Batch::sample(points, params.steps(), &mut rng);
            let (loss, g) = grad(&params, &batch, LossKind::default())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "base training loss",
                    iteration: step,
                });
            }
            let lr = if cfg.cosine_decay {
                cosine_lr(cfg.lr, step, total)
            } else {
                cfg.lr
            };
            opt.step(&mut params, &g, lr);
            epoch_loss += loss;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / per_epoch as f64);
        log::debug!("epoch {epoch}: loss {:.5}", log.epoch_losses[epoch]);
    }
    Ok((params, log))
}
