//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use pcm_core::denoiser::{
    ddpm_train, load_checkpoint, save_checkpoint, toy_dataset, DdpmConfig, DenoiserParams,
    NoiseSchedule,
};
use pcm_core::newton::run_newton;
use pcm_core::pct::{
    generate_dataset, load_adapters, save_adapters, train_pcm, PcmModel, PctConfig,
    TrajectoryDataset,
};
use pcm_core::picard::{run_picard, PicardConfig, PicardRunReport};
use pcm_core::solver::{ddim_strided_sample, sequential_sample, StepFn, StepKind, Trajectory};
use pcm_core::switching::{run_pcm_inference, SwitchConfig, SwitchMode};
use pcm_core::tensor::{child_seed, gaussian, l2, SeededRng};
use serde_json::json;

use crate::config::RunConfig;
use crate::exit::{ConfigError, MissingFile};
use crate::output::{line_chart_svg, num, write_json, write_text, Csv, Series};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

pub const BASE_CKPT: &str = "base.ckpt";
pub const DATASET: &str = "trajectories.pctd";
pub const PCM_CKPT: &str = "pcm.ckpt";
pub const PCM_EMA_CKPT: &str = "pcm-ema.ckpt";
pub const PCM_LORA: &str = "pcm.lora";
pub const PCM_EMA_LORA: &str = "pcm-ema.lora";

// Seed streams derived from the root seed.
const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_BASE: u64 = 3;
const STREAM_TRAJ: u64 = 4;
const STREAM_PCT: u64 = 5;
const STREAM_SAMPLE: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Sequential,
    Picard,
    Pcm,
    PcmLora,
    Newton,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Picard => "picard",
            Self::Pcm => "pcm",
            Self::PcmLora => "pcm-lora",
            Self::Newton => "newton",
        }
    }
}

fn stream(cfg: &RunConfig, s: u64) -> u64 {
    child_seed(cfg.seed, s)
}

/// Initial noise of sample seed `seed`.
pub fn sample_noise(cfg: &RunConfig, seed: u64, dim: usize) -> Vec<f64> {
    gaussian(
        &mut SeededRng::new(child_seed(stream(cfg, STREAM_SAMPLE), seed)),
        dim,
    )
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(MissingFile(path).into())
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))
}

fn load_base(cfg: &RunConfig) -> Result<DenoiserParams> {
    let path = require(cfg.path(BASE_CKPT))?;
    let base = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    check_model(cfg, &base, &path)?;
    Ok(base)
}

fn check_model(cfg: &RunConfig, p: &DenoiserParams, path: &Path) -> Result<()> {
    if p.steps() != cfg.model.steps {
        return Err(ConfigError(format!(
            "{} has T={}, config has model.steps={}",
            path.display(),
            p.steps(),
            cfg.model.steps
        ))
        .into());
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_pcm(cfg: &RunConfig, base: &DenoiserParams, lora: bool) -> Result<PcmModel> {
    if lora {
        let path = require(cfg.path(PCM_EMA_LORA))?;
        let (set, sum) =
            load_adapters(&path).with_context(|| format!("loading {}", path.display()))?;
        if sum != base.checksum() {
            return Err(anyhow::Error::new(pcm_core::Error::Checksum {
                expected: hex(&sum),
                got: hex(&base.checksum()),
            })
            .context(format!(
                "{} was trained on a different base",
                path.display()
            )));
        }
        Ok(PcmModel::Lora(set))
    } else {
        let path = require(cfg.path(PCM_EMA_CKPT))?;
        let p = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        check_model(cfg, &p, &path)?;
        let model = PcmModel::Full(p);
        model
            .resolve(base)
            .with_context(|| format!("{} does not fit the base model", path.display()))?;
        Ok(model)
    }
}

fn step_fn(cfg: &RunConfig, base: &DenoiserParams) -> Result<StepFn> {
    Ok(StepFn::new(cfg.step_kind()?, base.schedule()))
}

fn picard_config(cfg: &RunConfig) -> Result<PicardConfig> {
    Ok(PicardConfig {
        max_iters: cfg.sample.max_iters,
        tol: cfg.sample.tol,
        metric: cfg.metric()?,
        keep_iterates: false,
    })
}

fn switch_config(cfg: &RunConfig, stiffness: f64, mode: SwitchMode) -> SwitchConfig {
    SwitchConfig {
        stiffness,
        iters: cfg.pct.iters,
        mode,
    }
}

pub fn train_base(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let data = toy_dataset(
        cfg.toy()?,
        cfg.task.points,
        &mut SeededRng::new(stream(cfg, STREAM_DATA)),
    );
    let schedule = NoiseSchedule::build(cfg.schedule()?, cfg.model.steps)?;
    let init = DenoiserParams::init(
        2,
        &cfg.model.hidden,
        cfg.model.time_freqs,
        schedule,
        &mut SeededRng::new(stream(cfg, STREAM_INIT)),
    )?;
    let train = DdpmConfig {
        epochs: cfg.base.epochs,
        batch_size: cfg.base.batch_size,
        lr: cfg.base.lr,
        cosine_decay: cfg.base.cosine,
        seed: stream(cfg, STREAM_BASE),
    };
    let (params, log) = ddpm_train(init, &data, &train)?;
    save_checkpoint(&params, &cfg.path(BASE_CKPT))?;
    let mut csv = Csv::new(&cfg.resolved(), &["epoch", "loss"]);
    for (e, l) in log.epoch_losses.iter().enumerate() {
        csv.row([e.to_string(), num(*l)]);
    }
    csv.write(&cfg.path("train-base.csv"))?;
    log::info!(
        "base model trained: final epoch loss {:.5}",
        log.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn gen_traj(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let base = load_base(cfg)?;
    let step = step_fn(cfg, &base)?;
    let (ds, rejected) = generate_dataset(
        &base,
        &step,
        cfg.pct.records,
        cfg.pct.iters,
        stream(cfg, STREAM_TRAJ),
    )?;
    ds.save(&cfg.path(DATASET))?;
    write_json(
        &cfg.path("gen-traj.json"),
        &json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "config": cfg.resolved(),
            "records": ds.records.len(),
            "iters": ds.header.iters,
            "rejected": rejected,
            "base_checksum": hex(&ds.header.base_checksum),
        }),
    )?;
    log::info!(
        "generated {} trajectory records ({rejected} regenerated)",
        ds.records.len()
    );
    Ok(())
}

pub fn train_pcm_cmd(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let base = load_base(cfg)?;
    let ds_path = require(cfg.path(DATASET))?;
    let ds = TrajectoryDataset::load(&ds_path)
        .with_context(|| format!("loading {}", ds_path.display()))?;
    ds.verify_base(&base)
        .with_context(|| format!("{} was generated from a different base", ds_path.display()))?;
    let step = step_fn(cfg, &base)?;
    let pc = PctConfig {
        iterations: cfg.pct.iterations,
        batch_size: cfg.pct.batch_size,
        lr: cfg.pct.lr,
        cosine_decay: cfg.pct.cosine,
        ema_decay: cfg.pct.ema_decay,
        alpha_mode: cfg.alpha_mode()?,
        lora_rank: (cfg.pct.lora_rank > 0).then_some(cfg.pct.lora_rank),
        seed: stream(cfg, STREAM_PCT),
        select_every: cfg.pct.select_every,
        holdout_seeds: cfg.pct.holdout_seeds,
    };
    let out = train_pcm(&base, &step, &ds, &pc)?;
    save_checkpoint(&out.model.resolve(&base)?, &cfg.path(PCM_CKPT))?;
    save_checkpoint(&out.selected.resolve(&base)?, &cfg.path(PCM_EMA_CKPT))?;
    if let (PcmModel::Lora(raw), PcmModel::Lora(sel)) = (&out.model, &out.selected) {
        save_adapters(raw, base.checksum(), &cfg.path(PCM_LORA))?;
        save_adapters(sel, base.checksum(), &cfg.path(PCM_EMA_LORA))?;
    }
    let log = &out.log;
    let mut csv = Csv::new(
        &cfg.resolved(),
        &[
            "iteration",
            "loss",
            "ema_delta",
            "ema_bound",
            "ema_rounding",
        ],
    );
    for i in 0..log.losses.len() {
        csv.row([
            i.to_string(),
            num(log.losses[i]),
            num(log.ema_deltas[i]),
            num(log.ema_bounds[i]),
            num(log.ema_rounding[i]),
        ]);
    }
    csv.write(&cfg.path("train-pcm.csv"))?;
    write_json(
        &cfg.path("train-pcm.json"),
        &json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "config": cfg.resolved(),
            "alpha": log.alpha,
            "selection": log.selection.iter().map(|(i, s)| json!({"iteration": i, "score": s})).collect::<Vec<_>>(),
            "selected_iteration": log.selected_iteration,
            "lora": out.model.is_lora(),
        }),
    )?;
    log::info!(
        "consistency model trained; selected EMA snapshot at iteration {}",
        log.selected_iteration
    );
    Ok(())
}

/// One iterative run, reduced to what the reports need.
struct Run {
    residuals: Vec<f64>,
    errors: Vec<f64>,
    iterations: usize,
    sweeps: usize,
    converged: bool,
    diverged: bool,
    sample: Vec<f64>,
    seconds: f64,
}

impl Run {
    fn from_picard(r: PicardRunReport) -> Self {
        Self {
            iterations: r.iterations,
            sweeps: r.sweeps,
            converged: r.converged,
            diverged: false,
            sample: r.sample().to_vec(),
            seconds: r.elapsed.as_secs_f64(),
            residuals: r.residuals,
            errors: r.errors,
        }
    }

    fn final_error(&self) -> f64 {
        self.errors.last().copied().unwrap_or(0.0)
    }

    /// Sweeps spent up to and including iteration `k` (1-based).
    fn sweeps_to(&self, k: usize, per_iter: &[usize]) -> usize {
        per_iter[..k].iter().sum()
    }
}

struct Ctx {
    base: DenoiserParams,
    step: StepFn,
    picard: PicardConfig,
}

impl Ctx {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let base = load_base(cfg)?;
        let step = step_fn(cfg, &base)?;
        Ok(Self {
            base,
            step,
            picard: picard_config(cfg)?,
        })
    }

    fn reference(&self, x0: &[f64]) -> Result<Trajectory> {
        Ok(sequential_sample(&self.step, &self.base, x0)?)
    }

    fn run(
        &self,
        method: Method,
        pcm: Option<&PcmModel>,
        switch: &SwitchConfig,
        x0: &[f64],
        reference: &Trajectory,
    ) -> Result<Run> {
        let r = Some(reference);
        Ok(match method {
            Method::Sequential => {
                let started = Instant::now();
                let traj = self.reference(x0)?;
                Run {
                    residuals: vec![],
                    errors: vec![],
                    iterations: self.step.steps(),
                    sweeps: 0,
                    converged: true,
                    diverged: false,
                    sample: traj.last().to_vec(),
                    seconds: started.elapsed().as_secs_f64(),
                }
            }
            Method::Picard => {
                Run::from_picard(run_picard(&self.step, &self.base, x0, &self.picard, r)?)
            }
            Method::Pcm | Method::PcmLora => Run::from_picard(run_pcm_inference(
                pcm.expect("model loaded"),
                &self.base,
                &self.step,
                x0,
                switch,
                &self.picard,
                r,
            )?),
            Method::Newton => {
                let n = run_newton(&self.step, &self.base, x0, &self.picard, r)?;
                Run {
                    iterations: n.iterations,
                    sweeps: n.iterations,
                    converged: n.converged,
                    diverged: n.diverged,
                    sample: n.final_trajectory.last().to_vec(),
                    seconds: n.elapsed.as_secs_f64(),
                    residuals: n.residuals,
                    errors: n.errors,
                }
            }
        })
    }
}

fn method_model(
    cfg: &RunConfig,
    ctx: &Ctx,
    method: Method,
) -> Result<(Option<PcmModel>, SwitchConfig)> {
    let mode = cfg.switch_mode()?;
    Ok(match method {
        Method::Pcm => {
            let mode = if mode == SwitchMode::Lora {
                SwitchMode::Feature
            } else {
                mode
            };
            (
                Some(load_pcm(cfg, &ctx.base, false)?),
                switch_config(cfg, cfg.switch.stiffness, mode),
            )
        }
        Method::PcmLora => (
            Some(load_pcm(cfg, &ctx.base, true)?),
            switch_config(cfg, cfg.switch.stiffness, SwitchMode::Lora),
        ),
        _ => (None, switch_config(cfg, cfg.switch.stiffness, mode)),
    })
}

/// Per-iteration sweep cost of a switched run.
fn sweep_costs(method: Method, switch: &SwitchConfig, iterations: usize) -> Vec<usize> {
    (0..iterations)
        .map(|k| match method {
            Method::Pcm if switch.mode == SwitchMode::Feature => {
                let l = switch.lambda(k);
                if l == 0.0 || l == 1.0 {
                    1
                } else {
                    2
                }
            }
            _ => 1,
        })
        .collect()
}

pub fn sample(cfg: &RunConfig, method: Method) -> Result<()> {
    prepare_out(cfg)?;
    let ctx = Ctx::new(cfg)?;
    let (pcm, switch) = method_model(cfg, &ctx, method)?;
    let dim = ctx.base.dim();
    let mut cols: Vec<String> = vec!["seed".into()];
    cols.extend((0..dim).map(|i| format!("x0_{i}")));
    cols.extend((0..dim).map(|i| format!("sample_{i}")));
    cols.extend(
        [
            "iterations",
            "sweeps",
            "converged",
            "diverged",
            "final_error",
        ]
        .map(String::from),
    );
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut samples = Csv::new(&cfg.resolved(), &col_refs);
    let mut report = Csv::new(&cfg.resolved(), &["seed", "k", "residual", "error_to_ref"]);
    for &seed in &cfg.sample.seeds {
        let x0 = sample_noise(cfg, seed, dim);
        let reference = ctx.reference(&x0)?;
        let run = ctx.run(method, pcm.as_ref(), &switch, &x0, &reference)?;
        let final_error = l2(&run
            .sample
            .iter()
            .zip(reference.last())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>());
        let mut row = vec![seed.to_string()];
        row.extend(x0.iter().map(|v| num(*v)));
        row.extend(run.sample.iter().map(|v| num(*v)));
        row.extend([
            run.iterations.to_string(),
            run.sweeps.to_string(),
            run.converged.to_string(),
            run.diverged.to_string(),
            num(final_error),
        ]);
        samples.row(row);
        for k in 0..run.residuals.len() {
            report.row([
                seed.to_string(),
                (k + 1).to_string(),
                num(run.residuals[k]),
                num(run.errors[k]),
            ]);
        }
    }
    samples.write(&cfg.path(&format!("samples-{}.csv", method.name())))?;
    report.write(&cfg.path(&format!("report-{}.csv", method.name())))?;
    log::info!(
        "sampled {} seeds with {}",
        cfg.sample.seeds.len(),
        method.name()
    );
    Ok(())
}

/// Error curves extended with their last value to a common length, averaged.
fn mean_curve(curves: &[&[f64]]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            let sum: f64 = curves
                .iter()
                .map(|c| c.get(k).or(c.last()).copied().unwrap_or(0.0))
                .sum();
            sum / curves.len().max(1) as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let ctx = Ctx::new(cfg)?;
    let mut methods = vec![Method::Picard];
    if cfg.path(PCM_EMA_CKPT).is_file() {
        methods.push(Method::Pcm);
    }
    if cfg.path(PCM_EMA_LORA).is_file() {
        methods.push(Method::PcmLora);
    }
    methods.push(Method::Newton);

    let dim = ctx.base.dim();
    let steps = ctx.step.steps();
    let tol = cfg.sample.error_tol;
    let noises: Vec<Vec<f64>> = cfg
        .sample
        .seeds
        .iter()
        .map(|&s| sample_noise(cfg, s, dim))
        .collect();
    let started = Instant::now();
    let references = noises
        .iter()
        .map(|x0| ctx.reference(x0))
        .collect::<Result<Vec<_>>>()?;
    let sequential_seconds = started.elapsed().as_secs_f64() / noises.len() as f64;

    let resolved = cfg.resolved();
    let mut csv = Csv::new(
        &resolved,
        &["method", "seed", "k", "residual", "error_to_ref"],
    );
    let mut pareto = Csv::new(&resolved, &["method", "serial_evals", "mean_final_error"]);
    let mut summary = Vec::new();
    let mut timing = serde_json::Map::new();
    let mut series = Vec::new();
    for &method in &methods {
        let (pcm, switch) = method_model(cfg, &ctx, method)?;
        let mut runs = Vec::new();
        for ((x0, reference), &seed) in noises.iter().zip(&references).zip(&cfg.sample.seeds) {
            let run = ctx.run(method, pcm.as_ref(), &switch, x0, reference)?;
            for k in 0..run.residuals.len() {
                csv.row([
                    method.name().to_string(),
                    seed.to_string(),
                    (k + 1).to_string(),
                    num(run.residuals[k]),
                    num(run.errors[k]),
                ]);
            }
            runs.push(run);
        }
        let curves: Vec<&[f64]> = runs.iter().map(|r| r.errors.as_slice()).collect();
        let curve = mean_curve(&curves);
        // Each sweep is one parallel network evaluation deep.
        for (k, e) in curve.iter().enumerate() {
            pareto.row([method.name().to_string(), (k + 1).to_string(), num(*e)]);
        }
        series.push(Series {
            label: method.name().to_string(),
            points: curve
                .iter()
                .enumerate()
                .map(|(k, e)| ((k + 1) as f64, *e))
                .collect(),
        });
        let to_tol: Vec<Option<usize>> = runs
            .iter()
            .map(|r| pcm_core::picard::iterations_to(&r.errors, tol))
            .collect();
        let reached: Vec<f64> = to_tol.iter().flatten().map(|&k| k as f64).collect();
        let sweeps_to_tol: Vec<f64> = to_tol
            .iter()
            .zip(&runs)
            .filter_map(|(k, r)| {
                k.map(|k| r.sweeps_to(k, &sweep_costs(method, &switch, r.iterations)) as f64)
            })
            .collect();
        let mean_sweeps_to_tol = mean(&sweeps_to_tol);
        summary.push(json!({
            "method": method.name(),
            "seeds_reaching_tol": reached.len(),
            "mean_iterations_to_tol": mean(&reached),
            "mean_sweeps_to_tol": mean_sweeps_to_tol,
            "theoretical_speedup": mean_sweeps_to_tol.map(|s| steps as f64 / s.max(1.0)),
            "mean_iterations": mean(&runs.iter().map(|r| r.iterations as f64).collect::<Vec<_>>()),
            "mean_sweeps": mean(&runs.iter().map(|r| r.sweeps as f64).collect::<Vec<_>>()),
            "mean_final_error": mean(&runs.iter().map(Run::final_error).collect::<Vec<_>>()),
            "converged_seeds": runs.iter().filter(|r| r.converged).count(),
            "diverged_seeds": runs.iter().filter(|r| r.diverged).count(),
            "iterations_to_tol": to_tol,
        }));
        timing.insert(
            method.name().into(),
            json!({ "mean_seconds": mean(&runs.iter().map(|r| r.seconds).collect::<Vec<_>>()) }),
        );
    }
    let mut strided = Vec::new();
    if ctx.step.kind() == StepKind::Ddim {
        for &n in &cfg.sample.strided_steps {
            let errs = noises
                .iter()
                .zip(&references)
                .map(|(x0, r)| {
                    let x = ddim_strided_sample(&ctx.base, x0, n)?;
                    Ok(l2(&x
                        .iter()
                        .zip(r.last())
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>()))
                })
                .collect::<Result<Vec<f64>>>()?;
            let e = mean(&errs).unwrap_or(0.0);
            pareto.row(["ddim-strided".to_string(), n.to_string(), num(e)]);
            strided.push(json!({ "steps": n, "mean_final_error": e }));
        }
    }
    csv.write(&cfg.path("bench.csv"))?;
    pareto.write(&cfg.path("pareto.csv"))?;
    write_text(
        &cfg.path("bench.svg"),
        &line_chart_svg(
            &resolved,
            "Mean error to sequential reference",
            "iteration k",
            "error",
            &series,
        ),
    )?;
    write_json(
        &cfg.path("summary.json"),
        &json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "config": resolved,
            "steps": steps,
            "error_tol": tol,
            "seeds": cfg.sample.seeds,
            "newton_aux_floats": pcm_core::newton::newton_aux_floats(steps, dim),
            "methods": summary,
            "ddim_strided": strided,
        }),
    )?;
    timing.insert(
        "sequential".into(),
        json!({ "mean_seconds": sequential_seconds }),
    );
    write_json(
        &cfg.path("timing.json"),
        &json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "config": resolved,
            "methods": timing,
        }),
    )?;
    log::info!("bench done over {} seeds", noises.len());
    Ok(())
}

pub fn sweep_stiffness(cfg: &RunConfig, values: &[f64]) -> Result<()> {
    prepare_out(cfg)?;
    let values = if values.is_empty() {
        cfg.switch.sweep.clone()
    } else {
        values.to_vec()
    };
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(ConfigError(format!("stiffness {bad} must be >= 0")).into());
    }
    let ctx = Ctx::new(cfg)?;
    let mode = cfg.switch_mode()?;
    let lora = mode == SwitchMode::Lora;
    let method = if lora { Method::PcmLora } else { Method::Pcm };
    let pcm = load_pcm(cfg, &ctx.base, lora)?;
    let dim = ctx.base.dim();
    let tol = cfg.sample.error_tol;
    let resolved = cfg.resolved();
    let mut csv = Csv::new(
        &resolved,
        &["stiffness", "seed", "k", "residual", "error_to_ref"],
    );
    let mut series = Vec::new();
    let mut rows = Vec::new();
    let cases: Vec<(u64, Vec<f64>, Trajectory)> = cfg
        .sample
        .seeds
        .iter()
        .map(|&s| {
            let x0 = sample_noise(cfg, s, dim);
            let r = ctx.reference(&x0)?;
            Ok((s, x0, r))
        })
        .collect::<Result<_>>()?;
    for &s in &values {
        let switch = switch_config(cfg, s, mode);
        let mut runs = Vec::new();
        for (seed, x0, reference) in &cases {
            let run = ctx.run(method, Some(&pcm), &switch, x0, reference)?;
            for k in 0..run.residuals.len() {
                csv.row([
                    num(s),
                    seed.to_string(),
                    (k + 1).to_string(),
                    num(run.residuals[k]),
                    num(run.errors[k]),
                ]);
            }
            runs.push(run);
        }
        let curves: Vec<&[f64]> = runs.iter().map(|r| r.errors.as_slice()).collect();
        let curve = mean_curve(&curves);
        series.push(Series {
            label: format!("s = {s}"),
            points: curve
                .iter()
                .enumerate()
                .map(|(k, e)| ((k + 1) as f64, *e))
                .collect(),
        });
        let finals: Vec<f64> = runs.iter().map(Run::final_error).collect();
        let to_tol: Vec<Option<usize>> = runs
            .iter()
            .map(|r| pcm_core::picard::iterations_to(&r.errors, tol))
            .collect();
        rows.push(json!({
            "stiffness": s,
            "mean_final_error": mean(&finals),
            "seeds_below_tol": finals.iter().filter(|e| **e < tol).count(),
            "iterations_to_tol": to_tol,
            "mean_sweeps": mean(&runs.iter().map(|r| r.sweeps as f64).collect::<Vec<_>>()),
        }));
    }
    csv.write(&cfg.path("stiffness.csv"))?;
    write_text(
        &cfg.path("stiffness.svg"),
        &line_chart_svg(
            &resolved,
            "Error to sequential reference by stiffness",
            "iteration k",
            "error",
            &series,
        ),
    )?;
    write_json(
        &cfg.path("stiffness.json"),
        &json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "config": resolved,
            "error_tol": tol,
            "mode": mode.to_string(),
            "results": rows,
        }),
    )?;
    log::info!("stiffness sweep over {} values", values.len());
    Ok(())
}
