//! Run configuration: a TOML file with one table per stage.

use std::path::{Path, PathBuf};

use pcm_core::denoiser::{ScheduleKind, ToyKind};
use pcm_core::pct::AlphaMode;
use pcm_core::picard::ErrorMetric;
use pcm_core::solver::StepKind;
use pcm_core::switching::SwitchMode;
use serde::{Deserialize, Serialize};

use crate::exit::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Directory holding artifacts and reports.
    pub out: PathBuf,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub base: BaseConfig,
    pub solver: SolverConfig,
    pub pct: PctSection,
    pub switch: SwitchSection,
    pub sample: SampleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub dataset: String,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub steps: usize,
    pub schedule: String,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PctSection {
    pub records: usize,
    /// `K`: Picard iterations stored per record; also the switching horizon.
    pub iters: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine: bool,
    pub ema_decay: f64,
    pub alpha_mode: String,
    /// 0 trains the full model.
    pub lora_rank: usize,
    pub select_every: usize,
    pub holdout_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchSection {
    pub stiffness: f64,
    pub mode: String,
    /// Stiffness values for `sweep-stiffness`.
    pub sweep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seeds: Vec<u64>,
    pub max_iters: usize,
    /// Residual stop for `sample`.
    pub tol: f64,
    /// Error-to-reference threshold for iterations-to-tol in reports.
    pub error_tol: f64,
    pub metric: String,
    /// Strided DDIM step counts for the cost/error table.
    pub strided_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            base: BaseConfig::default(),
            solver: SolverConfig::default(),
            pct: PctSection::default(),
            switch: SwitchSection::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dataset: "gaussian-mixture-8".into(),
            points: 4000,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            schedule: "cosine".into(),
            hidden: vec![64, 64, 64],
            time_freqs: 4,
        }
    }
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: 2e-3,
            cosine: true,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: "ddim".into(),
        }
    }
}

impl Default for PctSection {
    fn default() -> Self {
        Self {
            records: 400,
            iters: 30,
            iterations: 3000,
            batch_size: 8,
            lr: 1e-4,
            cosine: true,
            ema_decay: 0.999,
            alpha_mode: "schedule-map".into(),
            lora_rank: 0,
            select_every: 500,
            holdout_seeds: 10,
        }
    }
}

impl Default for SwitchSection {
    fn default() -> Self {
        Self {
            stiffness: 2.0,
            mode: "feature".into(),
            sweep: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
        }
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            max_iters: 50,
            tol: 1e-4,
            error_tol: 1e-3,
            metric: "final-point-l2".into(),
            strided_steps: vec![5, 10, 25, 50],
        }
    }
}

fn parse<T: std::str::FromStr<Err = pcm_core::Error>>(
    field: &str,
    v: &str,
) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|e: pcm_core::Error| ConfigError(format!("{field}: {e}")))
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError(msg.into()))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.toy()?;
        self.schedule()?;
        self.step_kind()?;
        self.alpha_mode()?;
        self.switch_mode()?;
        self.metric()?;
        let m = &self.model;
        ensure(m.steps >= 2, "model.steps must be >= 2")?;
        ensure(
            !m.hidden.is_empty() && m.hidden.iter().all(|&h| h >= 2),
            "model.hidden needs widths >= 2",
        )?;
        ensure(self.task.points >= 1, "task.points must be >= 1")?;
        ensure(self.base.batch_size >= 1, "base.batch_size must be >= 1")?;
        ensure(
            self.base.lr >= 0.0 && self.base.lr.is_finite(),
            "base.lr must be >= 0",
        )?;
        let p = &self.pct;
        ensure(p.iters >= 1, "pct.iters must be >= 1")?;
        ensure(p.records >= 1, "pct.records must be >= 1")?;
        ensure(p.batch_size >= 1, "pct.batch_size must be >= 1")?;
        ensure(p.lr >= 0.0 && p.lr.is_finite(), "pct.lr must be >= 0")?;
        ensure(
            (0.0..=1.0).contains(&p.ema_decay),
            "pct.ema_decay must lie in [0, 1]",
        )?;
        let s = &self.switch;
        ensure(
            s.stiffness >= 0.0 && s.stiffness.is_finite(),
            "switch.stiffness must be >= 0",
        )?;
        ensure(
            s.sweep.iter().all(|v| *v >= 0.0 && v.is_finite()),
            "switch.sweep values must be >= 0",
        )?;
        let q = &self.sample;
        ensure(!q.seeds.is_empty(), "sample.seeds must not be empty")?;
        ensure(q.max_iters >= 1, "sample.max_iters must be >= 1")?;
        ensure(q.tol > 0.0, "sample.tol must be > 0")?;
        ensure(q.error_tol > 0.0, "sample.error_tol must be > 0")?;
        ensure(
            q.strided_steps.iter().all(|&n| n >= 1 && n <= m.steps),
            "sample.strided_steps must lie in 1..=model.steps",
        )?;
        Ok(())
    }

    pub fn toy(&self) -> Result<ToyKind, ConfigError> {
        parse("task.dataset", &self.task.dataset)
    }

    pub fn schedule(&self) -> Result<ScheduleKind, ConfigError> {
        parse("model.schedule", &self.model.schedule)
    }

    pub fn step_kind(&self) -> Result<StepKind, ConfigError> {
        parse("solver.kind", &self.solver.kind)
    }

    pub fn alpha_mode(&self) -> Result<AlphaMode, ConfigError> {
        parse("pct.alpha_mode", &self.pct.alpha_mode)
    }

    pub fn switch_mode(&self) -> Result<SwitchMode, ConfigError> {
        parse("switch.mode", &self.switch.mode)
    }

    pub fn metric(&self) -> Result<ErrorMetric, ConfigError> {
        parse("sample.metric", &self.sample.metric)
    }

    /// The configuration as TOML, used as the provenance header of outputs.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}
