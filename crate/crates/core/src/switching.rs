//! Model switching at inference: start from the consistency model and hand
//! over to the base model as the Picard iteration proceeds.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::DenoiserParams;
use crate::error::{check_len, Error, Result};
use crate::pct::{LoraSet, PcmModel};
use crate::picard::{iterate, PicardConfig, PicardRunReport};
use crate::solver::{phi_sweep, StepFn, Trajectory};

/// `clamp(1 - s k / K, 0, 1)`.
pub fn lambda_schedule(k: usize, iters: usize, stiffness: f64) -> f64 {
    (1.0 - stiffness * k as f64 / iters as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwitchMode {
    /// Convex combination of the outputs of a PCM sweep and a base sweep.
    #[default]
    Feature,
    /// One sweep with adapters merged at scale `lambda`.
    Lora,
    /// No switching: every iteration is a pure PCM sweep.
    None,
}

impl FromStr for SwitchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(Self::Feature),
            "lora" => Ok(Self::Lora),
            "none" => Ok(Self::None),
            other => Err(Error::UnknownTag {
                kind: "switch mode",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for SwitchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Feature => "feature",
            Self::Lora => "lora",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchConfig {
    pub stiffness: f64,
    /// `K` in the schedule denominator.
    pub iters: usize,
    pub mode: SwitchMode,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            stiffness: 2.0,
            iters: 30,
            mode: SwitchMode::Feature,
        }
    }
}

impl SwitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("switch K must be >= 1".into()));
        }
        if !(self.stiffness >= 0.0) || !self.stiffness.is_finite() {
            return Err(Error::Config(format!(
                "stiffness must be >= 0, got {}",
                self.stiffness
            )));
        }
        Ok(())
    }

    pub fn lambda(&self, k: usize) -> f64 {
        match self.mode {
            SwitchMode::None => 1.0,
            _ => lambda_schedule(k, self.iters, self.stiffness),
        }
    }
}

/// `lambda Phi(X; pcm) + (1 - lambda) Phi(X; base)`. The endpoints run a
/// single sweep and return it unchanged.
pub fn mixed_sweep_feature(
    pcm: &DenoiserParams,
    base: &DenoiserParams,
    step: &StepFn,
    x: &Trajectory,
    lambda: f64,
) -> Result<Trajectory> {
    check_len("PCM dim", base.dim(), pcm.dim())?;
    check_len("PCM steps", base.steps(), pcm.steps())?;
    if lambda == 1.0 {
        return phi_sweep(step, pcm, x);
    }
    if lambda == 0.0 {
        return phi_sweep(step, base, x);
    }
    let (p, b) = rayon::join(|| phi_sweep(step, pcm, x), || phi_sweep(step, base, x));
    Ok(p?.lerp(&b?, lambda))
}

/// One sweep of the base model with adapters merged at scale `lambda`.
pub fn mixed_sweep_lora(
    base: &DenoiserParams,
    adapters: &LoraSet,
    step: &StepFn,
    x: &Trajectory,
    lambda: f64,
) -> Result<Trajectory> {
    phi_sweep(step, &adapters.merge(base, lambda)?, x)
}

/// Picard iteration whose `k`-th sweep mixes the PCM and the base model with
/// weight `lambda(k)`. Stops on the residual tolerance or after
/// `picard.max_iters` iterations.
pub fn run_pcm_inference(
    pcm: &PcmModel,
    base: &DenoiserParams,
    step: &StepFn,
    x0: &[f64],
    switch: &SwitchConfig,
    picard: &PicardConfig,
    reference: Option<&Trajectory>,
) -> Result<PicardRunReport> {
    switch.validate()?;
    check_len("initial state", base.dim(), x0.len())?;
    check_len("solver steps vs model T", base.steps(), step.steps())?;
    match (switch.mode, pcm) {
        (SwitchMode::Lora, PcmModel::Lora(set)) => iterate(
            "pcm-lora inference",
            x0,
            step.steps(),
            picard,
            reference,
            |k, x| Ok((mixed_sweep_lora(base, set, step, x, switch.lambda(k))?, 1)),
        ),
        (SwitchMode::Lora, PcmModel::Full(_)) => Err(Error::Config(
            "lora switching needs an adapter model".into(),
        )),
        _ => {
            let full = pcm.resolve(base)?;
            iterate(
                "pcm inference",
                x0,
                step.steps(),
                picard,
                reference,
                |k, x| {
                    let lambda = switch.lambda(k);
                    let cost = if lambda == 0.0 || lambda == 1.0 { 1 } else { 2 };
                    Ok((mixed_sweep_feature(&full, base, step, x, lambda)?, cost))
                },
            )
        }
    }
}
