//! Discrete trajectories, the per-step update, the sweep operator and the
//! sequential ground-truth sampler.
//!
//! Every supported one-step update is affine in the state and the predicted
//! noise, `x_{t+1} = a_t x_t + b_t eps(x_t, t)`, so it is carried as the
//! additive increment `(a_t - 1) x + b_t eps`. A sweep evaluates all `T`
//! increments of a candidate trajectory independently and then takes one
//! ascending prefix sum from `x_0`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::denoiser::{DenoiserParams, NoiseSchedule};
use crate::error::{check_len, Error, Result};
use crate::tensor::linf;

/// At `t = 0` the schedule has `alpha = 0` and the DDIM data estimate is
/// undefined; the update uses `alpha(1) * DDIM_FIRST_STEP_FLOOR` instead.
pub const DDIM_FIRST_STEP_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// `x_{t+1} = x_t + eps(x_t, t) / T`.
    EulerEq10,
    /// Deterministic DDIM update under the model's schedule.
    Ddim,
}

impl StepKind {
    pub(crate) fn code(self) -> u32 {
        match self {
            Self::EulerEq10 => 0,
            Self::Ddim => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::EulerEq10),
            1 => Ok(Self::Ddim),
            other => Err(Error::Format(format!("unknown solver code {other}"))),
        }
    }
}

impl FromStr for StepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler-eq10" => Ok(Self::EulerEq10),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::UnknownTag {
                kind: "solver",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EulerEq10 => "euler-eq10",
            Self::Ddim => "ddim",
        })
    }
}

/// DDIM gains for a jump from `from` to `to` (`from < to`).
pub fn ddim_gains(schedule: &NoiseSchedule, from: usize, to: usize) -> (f64, f64) {
    let mut a_from = schedule.alpha(from);
    if from == 0 {
        a_from = schedule.alpha(1) * DDIM_FIRST_STEP_FLOOR;
    }
    let a_to = schedule.alpha(to);
    let state = (a_to / a_from).sqrt();
    let noise = (1.0 - a_to).sqrt() - state * (1.0 - a_from).sqrt();
    (state, noise)
}

/// One-step update rule `x_{t+1} = a_t x_t + b_t eps(x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFn {
    kind: StepKind,
    gains: Vec<(f64, f64)>,
}

impl StepFn {
    pub fn new(kind: StepKind, schedule: &NoiseSchedule) -> Self {
        let steps = schedule.steps();
        let gains = (0..steps)
            .map(|t| match kind {
                StepKind::EulerEq10 => (1.0, 1.0 / steps as f64),
                StepKind::Ddim => ddim_gains(schedule, t, t + 1),
            })
            .collect();
        Self { kind, gains }
    }

    pub fn kind(&self) -> StepKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.gains.len()
    }

    /// `(state gain a_t, noise gain b_t)`.
    pub fn gains(&self, t: usize) -> (f64, f64) {
        self.gains[t]
    }

    /// Amount added to `x` when advancing from step `t` to `t + 1`.
    pub fn increment(&self, params: &DenoiserParams, x: &[f64], t: usize) -> Vec<f64> {
        let eps = params.eval(x, t);
        self.combine(t, x, &eps)
    }

    /// Increment and its directional derivative along `v`.
    pub fn increment_with_jvp(
        &self,
        params: &DenoiserParams,
        x: &[f64],
        t: usize,
        v: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (eps, eps_dot) = params.eval_with_tangent(x, t, v);
        (self.combine(t, x, &eps), self.combine(t, v, &eps_dot))
    }

    #[inline]
    fn combine(&self, t: usize, x: &[f64], eps: &[f64]) -> Vec<f64> {
        let (a, b) = self.gains[t];
        if a == 1.0 {
            eps.iter().map(|e| b * e).collect()
        } else {
            x.iter()
                .zip(eps)
                .map(|(xi, e)| (a - 1.0) * xi + b * e)
                .collect()
        }
    }

    fn check(&self, params: &DenoiserParams) -> Result<()> {
        check_len("solver steps vs model T", params.steps(), self.steps())
    }
}

/// `T + 1` states `x_0..x_T` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() < 2 * dim || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                context: "trajectory",
                expected: dim.max(1) * 2,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    /// Every point set to `x0`.
    pub fn constant(x0: &[f64], steps: usize) -> Self {
        let mut data = Vec::with_capacity((steps + 1) * x0.len());
        for _ in 0..=steps {
            data.extend_from_slice(x0);
        }
        Self {
            dim: x0.len(),
            data,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.data.len() / self.dim - 1
    }

    #[inline]
    pub fn point(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    #[inline]
    pub fn point_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.point(0)
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.steps())
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Trajectory) -> bool {
        self.dim == other.dim && self.data.len() == other.data.len()
    }

    /// Largest absolute coordinate difference over all points.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest absolute difference over points `0..=upto`.
    pub fn prefix_max_abs_diff(&self, other: &Trajectory, upto: usize) -> f64 {
        let end = (upto + 1) * self.dim;
        linf(
            &self.data[..end]
                .iter()
                .zip(&other.data[..end])
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        )
    }

    /// Point-wise `lambda * self + (1 - lambda) * other`.
    pub fn lerp(&self, other: &Trajectory, lambda: f64) -> Trajectory {
        Trajectory {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        }
    }
}

/// Accumulates increments from `x0` in ascending order.
pub fn prefix_sum(x0: &[f64], increments: &[Vec<f64>]) -> Trajectory {
    let dim = x0.len();
    let mut data = Vec::with_capacity((increments.len() + 1) * dim);
    data.extend_from_slice(x0);
    let mut cur = x0.to_vec();
    for inc in increments {
        for (c, d) in cur.iter_mut().zip(inc) {
            *c += d;
        }
        data.extend_from_slice(&cur);
    }
    Trajectory { dim, data }
}

fn check_sweep_args(step: &StepFn, params: &DenoiserParams, traj: &Trajectory) -> Result<()> {
    step.check(params)?;
    check_len("trajectory steps", step.steps(), traj.steps())?;
    check_len("trajectory dim", params.dim(), traj.dim())
}

/// One application of the integral operator: `x'_t = x_0 + sum_{i<t} increment(x_i, i)`.
///
/// The `T` network evaluations run in parallel; the prefix sum is serial, so
/// the result is bit-identical to [`phi_sweep_serial`].
pub fn phi_sweep(step: &StepFn, params: &DenoiserParams, traj: &Trajectory) -> Result<Trajectory> {
    check_sweep_args(step, params, traj)?;
    let incs: Vec<Vec<f64>> = (0..traj.steps())
        .into_par_iter()
        .map(|t| step.increment(params, traj.point(t), t))
        .collect();
    Ok(prefix_sum(traj.initial(), &incs))
}

pub fn phi_sweep_serial(
    step: &StepFn,
    params: &DenoiserParams,
    traj: &Trajectory,
) -> Result<Trajectory> {
    check_sweep_args(step, params, traj)?;
    let incs: Vec<Vec<f64>> = (0..traj.steps())
        .map(|t| step.increment(params, traj.point(t), t))
        .collect();
    Ok(prefix_sum(traj.initial(), &incs))
}

/// Step-by-step sampling `x_{t+1} = x_t + increment(x_t, t)`.
pub fn sequential_sample(step: &StepFn, params: &DenoiserParams, x0: &[f64]) -> Result<Trajectory> {
    step.check(params)?;
    check_len("initial state", params.dim(), x0.len())?;
    let mut traj = Trajectory::constant(x0, step.steps());
    let mut cur = x0.to_vec();
    for t in 0..step.steps() {
        let inc = step.increment(params, &cur, t);
        for (c, d) in cur.iter_mut().zip(&inc) {
            *c += d;
        }
        traj.point_mut(t + 1).copy_from_slice(&cur);
    }
    Ok(traj)
}

/// DDIM with `num_steps` evenly strided jumps over the model's `T` grid.
/// Returns the final state.
pub fn ddim_strided_sample(
    params: &DenoiserParams,
    x0: &[f64],
    num_steps: usize,
) -> Result<Vec<f64>> {
    check_len("initial state", params.dim(), x0.len())?;
    let total = params.steps();
    if num_steps == 0 || num_steps > total {
        return Err(Error::Config(format!(
            "strided DDIM needs 1..={total} steps, got {num_steps}"
        )));
    }
    let grid: Vec<usize> = (0..=num_steps)
        .map(|j| ((j * total) as f64 / num_steps as f64).round() as usize)
        .collect();
    let mut x = x0.to_vec();
    for w in grid.windows(2) {
        let (a, b) = ddim_gains(params.schedule(), w[0], w[1]);
        let eps = params.eval(&x, w[0]);
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = a * *xi + b * e;
        }
    }
    Ok(x)
}
