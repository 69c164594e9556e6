//! Picard consistency training: fine-tune a denoiser so that one sweep from
//! any stored Picard iterate lands on the stored fixed point.

mod dataset;
mod lora;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use dataset::{
    generate_dataset, picard_history, DatasetHeader, TrajectoryDataset, TrajectoryRecord,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use lora::{
    load_adapters, lora_forward, save_adapters, LoraAdapter, LoraSet, ADAPTER_MAGIC,
    ADAPTER_VERSION,
};

use crate::denoiser::{DenoiserParams, Gradients};
use crate::error::{check_len, Error, Result};
use crate::optim::{cosine_lr, ema_update, param_distance, param_norm, Adam, ParamSet};
use crate::solver::{prefix_sum, StepFn, Trajectory};
use crate::tensor::{child_seed, gaussian, SeededRng};

/// Lower clamp for a variance before it is turned into a weight.
pub const VAR_FLOOR: f64 = 1e-6;

/// Salt separating held-out selection seeds from training seeds.
const HOLDOUT_SALT: u64 = 0x5eed0f4e1d;

/// Increments per fan-out chunk in the sweep gradient.
const SWEEP_CHUNK: usize = 8;

/// How the per-iteration loss weight `alpha(k) = 1 / sqrt(Var(k))` gets its variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaMode {
    /// `Var(k) = 1 - alpha_bar(t_k)` with `t_k = round(T k / K)`: the first
    /// iterations map to the pure-noise end of the schedule.
    #[default]
    ScheduleMap,
    /// Mean squared deviation of `X^k` from `X^K` over the dataset.
    Empirical,
    Flat,
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schedule-map" => Ok(Self::ScheduleMap),
            "empirical" => Ok(Self::Empirical),
            "flat" => Ok(Self::Flat),
            other => Err(Error::UnknownTag {
                kind: "alpha mode",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ScheduleMap => "schedule-map",
            Self::Empirical => "empirical",
            Self::Flat => "flat",
        })
    }
}

pub fn alpha_from_var(var: f64) -> f64 {
    1.0 / var.max(VAR_FLOOR).sqrt()
}

/// Schedule step that iteration `k` of `iters` is mapped to.
pub fn schedule_map_time(k: usize, iters: usize, steps: usize) -> usize {
    ((steps * k) as f64 / iters as f64).round() as usize
}

/// Per-coordinate mean squared deviation of `X^k` from `X^K` over points `1..=T`.
pub fn empirical_variances(ds: &TrajectoryDataset) -> Vec<f64> {
    let h = &ds.header;
    let denom = (ds.records.len() * h.steps * h.dim).max(1) as f64;
    (0..h.iters)
        .map(|k| {
            ds.records
                .iter()
                .map(|r| {
                    let (x, y) = (&r.history[k], r.target());
                    (1..=h.steps)
                        .flat_map(|t| x.point(t).iter().zip(y.point(t)))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / denom
        })
        .collect()
}

/// `alpha(k)` for `k = 0..K-1`.
pub fn alpha_weights(mode: AlphaMode, base: &DenoiserParams, ds: &TrajectoryDataset) -> Vec<f64> {
    let (iters, steps) = (ds.header.iters, ds.header.steps);
    match mode {
        AlphaMode::Flat => vec![1.0; iters],
        AlphaMode::ScheduleMap => (0..iters)
            .map(|k| alpha_from_var(base.schedule().var(schedule_map_time(k, iters, steps))))
            .collect(),
        AlphaMode::Empirical => empirical_variances(ds)
            .into_iter()
            .map(alpha_from_var)
            .collect(),
    }
}

/// Mean over points `1..=T` of the squared L2 distance.
pub fn trajectory_mse(x: &Trajectory, target: &Trajectory) -> Result<f64> {
    check_len("trajectory steps", target.steps(), x.steps())?;
    check_len("trajectory dim", target.dim(), x.dim())?;
    let sum: f64 = (1..=x.steps())
        .flat_map(|t| x.point(t).iter().zip(target.point(t)))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.steps() as f64)
}

fn check_record(
    params: &DenoiserParams,
    step: &StepFn,
    rec: &TrajectoryRecord,
    k: usize,
) -> Result<()> {
    check_len("solver steps vs model T", params.steps(), step.steps())?;
    if k >= rec.iters() {
        return Err(Error::Config(format!(
            "k={k} must be below K={}",
            rec.iters()
        )));
    }
    check_len("record steps", step.steps(), rec.target().steps())?;
    check_len("record dim", params.dim(), rec.target().dim())
}

/// `alpha * D(X^K, Phi(X^k; params))`.
pub fn pct_loss(
    params: &DenoiserParams,
    step: &StepFn,
    rec: &TrajectoryRecord,
    k: usize,
    alpha: f64,
) -> Result<f64> {
    check_record(params, step, rec, k)?;
    let swept = crate::solver::phi_sweep(step, params, &rec.history[k])?;
    Ok(alpha * trajectory_mse(&swept, rec.target())?)
}

/// Loss and its gradient through the whole sweep, accumulated into `grads`.
///
/// `Phi_t = x_0 + sum_{i<t} inc_i`, so the increment at step `i` receives the
/// suffix sum of the output gradients at `t > i`.
pub fn pct_loss_grad(
    params: &DenoiserParams,
    step: &StepFn,
    rec: &TrajectoryRecord,
    k: usize,
    alpha: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    check_record(params, step, rec, k)?;
    let x = &rec.history[k];
    let steps = step.steps();
    let traces: Vec<_> = (0..steps)
        .into_par_iter()
        .map(|t| params.forward_trace(x.point(t), t))
        .collect();
    let incs: Vec<Vec<f64>> = traces
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let (a, b) = step.gains(t);
            x.point(t)
                .iter()
                .zip(tr.output())
                .map(|(xi, e)| {
                    if a == 1.0 {
                        b * e
                    } else {
                        (a - 1.0) * xi + b * e
                    }
                })
                .collect()
        })
        .collect();
    let swept = prefix_sum(x.initial(), &incs);
    let target = rec.target();
    let scale = 2.0 * alpha / steps as f64;
    let mut suffix = vec![vec![0.0; x.dim()]; steps];
    let mut acc = vec![0.0; x.dim()];
    for t in (1..=steps).rev() {
        for ((s, p), y) in acc.iter_mut().zip(swept.point(t)).zip(target.point(t)) {
            *s += scale * (p - y);
        }
        suffix[t - 1].clone_from(&acc);
    }
    let idx: Vec<usize> = (0..steps).collect();
    let partials: Vec<Gradients> = idx
        .par_chunks(SWEEP_CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(params);
            for &i in chunk {
                let (_, b) = step.gains(i);
                let d_eps: Vec<f64> = suffix[i].iter().map(|s| b * s).collect();
                params.backward(&traces[i], &d_eps, &mut g);
            }
            g
        })
        .collect();
    for g in &partials {
        grads.add_assign(g);
    }
    Ok(alpha * trajectory_mse(&swept, target)?)
}

/// Mean of `weights[k] * D` over every record and every `k < K`.
pub fn mean_pct_loss(
    params: &DenoiserParams,
    step: &StepFn,
    ds: &TrajectoryDataset,
    weights: &[f64],
) -> Result<f64> {
    check_len("alpha weights", ds.header.iters, weights.len())?;
    let mut total = 0.0;
    for rec in &ds.records {
        for (k, w) in weights.iter().enumerate() {
            total += pct_loss(params, step, rec, k, *w)?;
        }
    }
    Ok(total / (ds.records.len() * weights.len()).max(1) as f64)
}

/// Fine-tuned consistency weights: a full model or adapters over the base.
#[derive(Debug, Clone, PartialEq)]
pub enum PcmModel {
    Full(DenoiserParams),
    Lora(LoraSet),
}

impl PcmModel {
    /// Plain weights of the fine-tuned model (adapters merged at scale 1).
    pub fn resolve(&self, base: &DenoiserParams) -> Result<DenoiserParams> {
        match self {
            Self::Full(p) => {
                check_len("PCM dim", base.dim(), p.dim())?;
                check_len("PCM steps", base.steps(), p.steps())?;
                Ok(p.clone())
            }
            Self::Lora(set) => set.merge(base, 1.0),
        }
    }

    pub fn is_lora(&self) -> bool {
        matches!(self, Self::Lora(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PctConfig {
    pub iterations: usize,
    /// `(record, k)` pairs per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    pub ema_decay: f64,
    pub alpha_mode: AlphaMode,
    /// `Some(r)` trains rank-`r` adapters instead of the full model.
    pub lora_rank: Option<usize>,
    pub seed: u64,
    /// Score the EMA weights every this many iterations; 0 scores only the end.
    pub select_every: usize,
    pub holdout_seeds: usize,
}

impl Default for PctConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            lr: 1e-4,
            cosine_decay: true,
            ema_decay: 0.999,
            alpha_mode: AlphaMode::ScheduleMap,
            lora_rank: None,
            seed: 0,
            select_every: 250,
            holdout_seeds: 10,
        }
    }
}

impl PctConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay {} outside [0, 1]",
                self.ema_decay
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.lora_rank == Some(0) {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Movement of the EMA copy during one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaStep {
    /// `‖θ̂_{i+1} - θ̂_i‖`
    pub delta: f64,
    /// `‖θ_{i+1} - θ̂_i‖`, the gap the EMA absorbed.
    pub gap: f64,
    /// Worst-case rounding error of `delta`: `4u (‖θ̂_i‖ + ‖θ_{i+1}‖)`.
    pub rounding: f64,
}

/// Weights, EMA copy, optimizer moments and iteration counter.
#[derive(Debug, Clone)]
pub struct TrainState<P> {
    pub model: P,
    pub ema: P,
    pub iteration: usize,
    adam: Adam,
}

impl<P: ParamSet + Clone> TrainState<P> {
    pub fn new(init: P) -> Self {
        Self {
            adam: Adam::new(&init),
            ema: init.clone(),
            model: init,
            iteration: 0,
        }
    }

    /// Adam step then EMA update.
    pub fn step<G: ParamSet>(&mut self, grads: &G, lr: f64, mu: f64) -> Result<EmaStep> {
        self.adam.step(&mut self.model, grads, lr);
        let before = self.ema.clone();
        let gap = param_distance(&self.model, &before);
        ema_update(&mut self.ema, &self.model, mu)?;
        self.iteration += 1;
        Ok(EmaStep {
            delta: param_distance(&self.ema, &before),
            gap,
            rounding: 2.0 * f64::EPSILON * (param_norm(&before) + param_norm(&self.model)),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PctLog {
    /// Mean weighted batch loss per iteration.
    pub losses: Vec<f64>,
    /// `‖θ̂_{i+1} - θ̂_i‖` per iteration.
    pub ema_deltas: Vec<f64>,
    /// `(1 - mu) ‖θ_{i+1} - θ̂_i‖` per iteration.
    pub ema_bounds: Vec<f64>,
    /// Rounding allowance on each `ema_deltas` entry.
    pub ema_rounding: Vec<f64>,
    /// `(iteration, held-out score)` of each scored EMA snapshot.
    pub selection: Vec<(usize, f64)>,
    pub selected_iteration: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PctOutput {
    pub model: PcmModel,
    pub ema: PcmModel,
    /// Best-scoring EMA snapshot.
    pub selected: PcmModel,
    pub log: PctLog,
}

/// Held-out `x_0` draws used for model selection.
pub fn holdout_noises(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count as u64)
        .map(|j| gaussian(&mut SeededRng::new(child_seed(seed ^ HOLDOUT_SALT, j)), dim))
        .collect()
}

/// Base-model Picard histories for the held-out noises.
pub fn holdout_records(
    base: &DenoiserParams,
    step: &StepFn,
    seed: u64,
    count: usize,
    iters: usize,
) -> Result<Vec<TrajectoryRecord>> {
    holdout_noises(seed, count, base.dim())
        .into_iter()
        .enumerate()
        .map(|(j, x0)| {
            let history = picard_history(step, base, &x0, iters)?;
            Ok(TrajectoryRecord {
                x0,
                seed: j as u64,
                history,
            })
        })
        .collect()
}

/// Mean one-sweep distance `D(X^K, Phi(X^k; pcm))` over held-out records and
/// every `k < K`. Lower is better.
pub fn selection_score(
    model: &PcmModel,
    base: &DenoiserParams,
    step: &StepFn,
    holdout: &[TrajectoryRecord],
) -> Result<f64> {
    let params = model.resolve(base)?;
    let mut total = 0.0;
    let mut count = 0;
    for rec in holdout {
        for k in 0..rec.iters() {
            total += pct_loss(&params, step, rec, k, 1.0)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

fn sample_batch(
    rng: &mut SeededRng,
    records: usize,
    iters: usize,
    size: usize,
) -> Vec<(usize, usize)> {
    (0..size)
        .map(|_| (rng.below(records), rng.below(iters)))
        .collect()
}

fn batch_grad(
    params: &DenoiserParams,
    step: &StepFn,
    ds: &TrajectoryDataset,
    batch: &[(usize, usize)],
    alpha: &[f64],
) -> Result<(f64, Gradients)> {
    let mut g = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for &(r, k) in batch {
        loss += pct_loss_grad(params, step, &ds.records[r], k, alpha[k], &mut g)?;
    }
    let inv = 1.0 / batch.len() as f64;
    g.scale(inv);
    Ok((loss * inv, g))
}

struct Loop<'a> {
    base: &'a DenoiserParams,
    step: &'a StepFn,
    ds: &'a TrajectoryDataset,
    cfg: &'a PctConfig,
    alpha: Vec<f64>,
    holdout: Vec<TrajectoryRecord>,
}

impl Loop<'_> {
    fn run<P, G>(
        &self,
        init: P,
        grad: impl Fn(&P, &[(usize, usize)]) -> Result<(f64, G)>,
        wrap: impl Fn(&P) -> PcmModel,
    ) -> Result<PctOutput>
    where
        P: ParamSet + Clone,
        G: ParamSet,
    {
        let cfg = self.cfg;
        let mut state = TrainState::new(init);
        let mut rng = SeededRng::new(cfg.seed);
        let mut log = PctLog {
            alpha: self.alpha.clone(),
            ..PctLog::default()
        };
        let mut best: Option<(f64, PcmModel)> = None;
        let mut score = |it: usize, ema: &P, log: &mut PctLog| -> Result<()> {
            let m = wrap(ema);
            let s = selection_score(&m, self.base, self.step, &self.holdout)?;
            log.selection.push((it, s));
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, m));
                log.selected_iteration = it;
            }
            Ok(())
        };
        for it in 0..cfg.iterations {
            let batch = sample_batch(
                &mut rng,
                self.ds.records.len(),
                self.ds.header.iters,
                cfg.batch_size,
            );
            let (loss, g) = grad(&state.model, &batch)?;
            if !loss.is_finite() || !g.all_finite() {
                return Err(Error::NonFinite {
                    stage: "consistency training loss",
                    iteration: it,
                });
            }
            let lr = if cfg.cosine_decay {
                cosine_lr(cfg.lr, it, cfg.iterations)
            } else {
                cfg.lr
            };
            let ema = state.step(&g, lr, cfg.ema_decay)?;
            log.losses.push(loss);
            log.ema_deltas.push(ema.delta);
            log.ema_bounds.push((1.0 - cfg.ema_decay) * ema.gap);
            log.ema_rounding.push(ema.rounding);
            if cfg.select_every > 0 && (it + 1) % cfg.select_every == 0 && it + 1 < cfg.iterations {
                score(it + 1, &state.ema, &mut log)?;
            }
            if it % 100 == 0 {
                log::debug!("pct iteration {it}: loss {loss:.6}");
            }
        }
        score(cfg.iterations, &state.ema, &mut log)?;
        let selected = best.expect("scored at least once").1;
        Ok(PctOutput {
            model: wrap(&state.model),
            ema: wrap(&state.ema),
            selected,
            log,
        })
    }
}

/// Consistency fine-tuning of `base` on `ds`, starting from the base weights
/// (or from fresh adapters when `cfg.lora_rank` is set).
pub fn train_pcm(
    base: &DenoiserParams,
    step: &StepFn,
    ds: &TrajectoryDataset,
    cfg: &PctConfig,
) -> Result<PctOutput> {
    cfg.validate()?;
    ds.verify_base(base)?;
    check_len("dataset steps", step.steps(), ds.header.steps)?;
    if ds.header.solver != step.kind() {
        return Err(Error::Config(format!(
            "dataset was generated with {}, training uses {}",
            ds.header.solver,
            step.kind()
        )));
    }
    if ds.records.is_empty() {
        return Err(Error::Config("trajectory dataset is empty".into()));
    }
    let holdout = holdout_records(
        base,
        step,
        cfg.seed,
        cfg.holdout_seeds.max(1),
        ds.header.iters,
    )?;
    let lp = Loop {
        base,
        step,
        ds,
        cfg,
        alpha: alpha_weights(cfg.alpha_mode, base, ds),
        holdout,
    };
    match cfg.lora_rank {
        None => lp.run(
            base.clone(),
            |p: &DenoiserParams, b| batch_grad(p, step, ds, b, &lp.alpha),
            |p| PcmModel::Full(p.clone()),
        ),
        Some(rank) => {
            let mut rng = SeededRng::new(child_seed(cfg.seed, u64::MAX));
            let init = LoraSet::init(base, rank, &mut rng)?;
            lp.run(
                init,
                |set: &LoraSet, b| {
                    let merged = set.merge(base, 1.0)?;
                    let (loss, g) = batch_grad(&merged, step, ds, b, &lp.alpha)?;
                    Ok((loss, set.project_gradients(&g, 1.0)?))
                },
                |set| PcmModel::Lora(set.clone()),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NoiseSchedule;
    use crate::solver::{phi_sweep, StepKind};

    fn net(width: usize, steps: usize, seed: u64) -> DenoiserParams {
        DenoiserParams::init(
            2,
            &[width, width],
            2,
            NoiseSchedule::cosine(steps).unwrap(),
            &mut SeededRng::new(seed),
        )
        .unwrap()
    }

    fn setup() -> (DenoiserParams, StepFn, TrajectoryDataset) {
        let p = net(16, 8, 11);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let (ds, _) = generate_dataset(&p, &step, 4, 4, 7).unwrap();
        (p, step, ds)
    }

    #[test]
    fn mse_worked_example() {
        // X* = (x0, 1, 2), Phi = (x0, 0, 0): D = (1 + 4) / 2.
        let target = Trajectory::from_flat(1, vec![0.3, 1.0, 2.0]).unwrap();
        let swept = Trajectory::from_flat(1, vec![0.3, 0.0, 0.0]).unwrap();
        assert_eq!(trajectory_mse(&swept, &target).unwrap(), 2.5);
    }

    #[test]
    fn loss_is_zero_when_the_sweep_hits_the_target() {
        let (p, step, ds) = setup();
        // Replace the target with the sweep of X^k itself.
        let mut rec = ds.records[0].clone();
        let k = 1;
        let hit = phi_sweep(&step, &p, &rec.history[k]).unwrap();
        *rec.history.last_mut().unwrap() = hit;
        assert_eq!(pct_loss(&p, &step, &rec, k, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_is_linear_in_alpha() {
        let (p, step, ds) = setup();
        let rec = &ds.records[1];
        let l1 = pct_loss(&p, &step, rec, 0, 1.0).unwrap();
        let l2 = pct_loss(&p, &step, rec, 0, 2.0).unwrap();
        assert!(l1 > 0.0);
        assert_eq!(l2, 2.0 * l1);
        assert!(pct_loss(&p, &step, rec, 4, 1.0).is_err());
    }

    #[test]
    fn loss_grad_value_matches_loss() {
        let (p, step, ds) = setup();
        let mut g = Gradients::zeros_like(&p);
        let a = pct_loss_grad(&p, &step, &ds.records[2], 2, 1.7, &mut g).unwrap();
        let b = pct_loss(&p, &step, &ds.records[2], 2, 1.7).unwrap();
        assert!((a - b).abs() <= 1e-15 * b.abs());
    }

    #[test]
    fn sweep_gradient_matches_finite_differences() {
        for kind in [StepKind::Ddim, StepKind::EulerEq10] {
            let base = net(16, 8, 11);
            let step = StepFn::new(kind, base.schedule());
            let (ds, _) = generate_dataset(&base, &step, 2, 4, 3).unwrap();
            // Perturb away from the base so the loss is not at its data-generating point.
            let mut p = net(16, 8, 12);
            let rec = &ds.records[0];
            let k = 1;
            let mut g = Gradients::zeros_like(&p);
            pct_loss_grad(&p, &step, rec, k, 1.3, &mut g).unwrap();
            let analytic = g.flat();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let mut idx = 0;
            for si in 0..p.slices().len() {
                for j in 0..p.slices()[si].len() {
                    let orig = p.slices()[si][j];
                    p.slices_mut()[si][j] = orig + h;
                    let lp = pct_loss(&p, &step, rec, k, 1.3).unwrap();
                    p.slices_mut()[si][j] = orig - h;
                    let lm = pct_loss(&p, &step, rec, k, 1.3).unwrap();
                    p.slices_mut()[si][j] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = analytic[idx];
                    worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
                    idx += 1;
                }
            }
            assert!(worst <= 1e-4, "{kind}: worst relative error {worst}");
        }
    }

    #[test]
    fn alpha_weights_by_mode() {
        let (p, _, ds) = setup();
        assert_eq!(alpha_from_var(1.0), 1.0);
        assert_eq!(alpha_from_var(0.25), 2.0);
        assert!((alpha_from_var(0.0) - 1000.0).abs() < 1e-9);
        assert_eq!(alpha_weights(AlphaMode::Flat, &p, &ds), vec![1.0; 4]);
        let sm = alpha_weights(AlphaMode::ScheduleMap, &p, &ds);
        // k = 0 maps to pure noise (variance 1); later iterations weigh more.
        assert_eq!(sm[0], 1.0);
        assert!(sm.windows(2).all(|w| w[1] > w[0]));
        let emp = alpha_weights(AlphaMode::Empirical, &p, &ds);
        assert_eq!(emp.len(), 4);
        assert!(emp.iter().all(|a| a.is_finite() && *a > 0.0));
        assert_eq!(schedule_map_time(15, 30, 50), 25);
        assert_eq!(
            "empirical".parse::<AlphaMode>().unwrap(),
            AlphaMode::Empirical
        );
        assert!("sqrt".parse::<AlphaMode>().is_err());
    }

    fn quick_cfg() -> PctConfig {
        PctConfig {
            iterations: 20,
            batch_size: 2,
            select_every: 10,
            holdout_seeds: 2,
            ..PctConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_base_weights() {
        let (p, step, ds) = setup();
        let cfg = PctConfig {
            lr: 0.0,
            ..quick_cfg()
        };
        let out = train_pcm(&p, &step, &ds, &cfg).unwrap();
        assert_eq!(out.model, PcmModel::Full(p.clone()));
        assert_eq!(out.ema, PcmModel::Full(p.clone()));
        let lora = train_pcm(
            &p,
            &step,
            &ds,
            &PctConfig {
                lora_rank: Some(2),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(lora.model.resolve(&p).unwrap(), p);
    }

    #[test]
    fn ema_bound_holds_every_iteration() {
        let (p, step, ds) = setup();
        let cfg = PctConfig {
            lr: 1e-2,
            ema_decay: 0.9,
            ..quick_cfg()
        };
        let out = train_pcm(&p, &step, &ds, &cfg).unwrap();
        assert_eq!(out.log.ema_deltas.len(), 20);
        let log = &out.log;
        for ((d, b), r) in log
            .ema_deltas
            .iter()
            .zip(&log.ema_bounds)
            .zip(&log.ema_rounding)
        {
            assert!(*d <= b + r, "{d} > {b} + {r}");
        }
        assert_eq!(out.log.selection.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let (p, step, ds) = setup();
        let a = train_pcm(&p, &step, &ds, &quick_cfg()).unwrap();
        let b = train_pcm(&p, &step, &ds, &quick_cfg()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn foreign_dataset_rejected() {
        let (p, step, ds) = setup();
        let other = net(16, 8, 99);
        assert!(matches!(
            train_pcm(&other, &step, &ds, &quick_cfg()),
            Err(Error::Checksum { .. })
        ));
        let bad = PctConfig {
            ema_decay: 1.5,
            ..quick_cfg()
        };
        assert!(train_pcm(&p, &step, &ds, &bad).is_err());
    }

    #[test]
    fn full_training_reduces_held_out_loss() {
        let p = net(16, 8, 11);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let (ds, _) = generate_dataset(&p, &step, 16, 4, 7).unwrap();
        let (held, _) = generate_dataset(&p, &step, 6, 4, 1234).unwrap();
        let w = vec![1.0; 4];
        let before = mean_pct_loss(&p, &step, &held, &w).unwrap();
        let cfg = PctConfig {
            iterations: 1000,
            batch_size: 4,
            lr: 1e-2,
            ema_decay: 0.9,
            select_every: 0,
            ..quick_cfg()
        };
        let out = train_pcm(&p, &step, &ds, &cfg).unwrap();
        let trained = out.model.resolve(&p).unwrap();
        let after = mean_pct_loss(&trained, &step, &held, &w).unwrap();
        assert!(after < 0.5 * before, "before {before}, after {after}");
    }
}
