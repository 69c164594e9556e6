//! Picard fixed-point iteration over whole trajectories, with per-iteration
//! convergence diagnostics.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::denoiser::DenoiserParams;
use crate::error::{check_len, Error, Result};
use crate::solver::{phi_sweep, sequential_sample, StepFn, Trajectory};
use crate::tensor::l2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMetric {
    /// L2 distance between the last points (the generated sample).
    #[default]
    FinalPointL2,
    /// Mean L2 distance over points `1..=T`.
    TrajectoryMeanL2,
}

impl FromStr for ErrorMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final-point-l2" => Ok(Self::FinalPointL2),
            "trajectory-mean-l2" => Ok(Self::TrajectoryMeanL2),
            other => Err(Error::UnknownTag {
                kind: "error metric",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for ErrorMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FinalPointL2 => "final-point-l2",
            Self::TrajectoryMeanL2 => "trajectory-mean-l2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardConfig {
    pub max_iters: usize,
    /// Stop once the largest per-coordinate change of a sweep drops below this.
    pub tol: f64,
    pub metric: ErrorMetric,
    pub keep_iterates: bool,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-4,
            metric: ErrorMetric::FinalPointL2,
            keep_iterates: false,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Diagnostics of one fixed-point run. Entry `j` of `residuals` and `errors`
/// describes iterate `X^{j+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardRunReport {
    pub residuals: Vec<f64>,
    /// Distance to the reference per iterate; empty without a reference.
    pub errors: Vec<f64>,
    /// Distance of the starting trajectory to the reference.
    pub initial_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Network sweeps spent (feature-space switching costs two per iteration).
    pub sweeps: usize,
    pub iterates: Vec<Trajectory>,
    pub final_trajectory: Trajectory,
    pub elapsed: Duration,
}

impl PicardRunReport {
    /// The generated sample, `x_T` of the last iterate.
    pub fn sample(&self) -> &[f64] {
        self.final_trajectory.last()
    }

    /// First iteration whose error to the reference is at most `eps`.
    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        iterations_to(&self.errors, eps)
    }
}

/// 1-based index of the first entry `<= eps`.
pub fn iterations_to(errors: &[f64], eps: f64) -> Option<usize> {
    errors.iter().position(|&e| e <= eps).map(|j| j + 1)
}

pub fn convergence_error(
    x: &Trajectory,
    reference: &Trajectory,
    metric: ErrorMetric,
) -> Result<f64> {
    check_len("trajectory dim", reference.dim(), x.dim())?;
    check_len("trajectory steps", reference.steps(), x.steps())?;
    let dist = |t: usize| {
        l2(&x
            .point(t)
            .iter()
            .zip(reference.point(t))
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>())
    };
    Ok(match metric {
        ErrorMetric::FinalPointL2 => dist(x.steps()),
        ErrorMetric::TrajectoryMeanL2 => (1..=x.steps()).map(dist).sum::<f64>() / x.steps() as f64,
    })
}

/// Drives `sweep` from the constant trajectory until the residual drops
/// below `cfg.tol` or `cfg.max_iters` is reached. `sweep` receives the
/// 0-based iteration index and the current iterate, and returns the next
/// iterate with the number of network sweeps it cost.
pub(crate) fn iterate<F>(
    stage: &'static str,
    x0: &[f64],
    steps: usize,
    cfg: &PicardConfig,
    reference: Option<&Trajectory>,
    mut sweep: F,
) -> Result<PicardRunReport>
where
    F: FnMut(usize, &Trajectory) -> Result<(Trajectory, usize)>,
{
    cfg.validate()?;
    let started = Instant::now();
    let mut current = Trajectory::constant(x0, steps);
    if let Some(r) = reference {
        check_len("reference steps", steps, r.steps())?;
        check_len("reference dim", x0.len(), r.dim())?;
    }
    let initial_error = reference
        .map(|r| convergence_error(&current, r, cfg.metric))
        .transpose()?;
    let mut residuals = Vec::new();
    let mut errors = Vec::new();
    let mut iterates = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    for k in 0..cfg.max_iters {
        let (next, used) = sweep(k, &current)?;
        sweeps += used;
        if !next.is_finite() {
            return Err(Error::NonFinite {
                stage,
                iteration: k + 1,
            });
        }
        let residual = next.max_abs_diff(&current);
        residuals.push(residual);
        if let Some(r) = reference {
            errors.push(convergence_error(&next, r, cfg.metric)?);
        }
        if cfg.keep_iterates {
            iterates.push(next.clone());
        }
        current = next;
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(PicardRunReport {
        iterations: residuals.len(),
        residuals,
        errors,
        initial_error,
        converged,
        sweeps,
        iterates,
        final_trajectory: current,
        elapsed: started.elapsed(),
    })
}

/// Plain Picard iteration `X^{k+1} = Phi(X^k)` from the constant trajectory.
pub fn run_picard(
    step: &StepFn,
    params: &DenoiserParams,
    x0: &[f64],
    cfg: &PicardConfig,
    reference: Option<&Trajectory>,
) -> Result<PicardRunReport> {
    check_len("initial state", params.dim(), x0.len())?;
    iterate("picard", x0, step.steps(), cfg, reference, |_, x| {
        Ok((phi_sweep(step, params, x)?, 1))
    })
}

/// True iff `k` sweeps reproduce the sequential points `0..=k` within 1e-10.
pub fn prefix_exactness(
    step: &StepFn,
    params: &DenoiserParams,
    x0: &[f64],
    k: usize,
) -> Result<bool> {
    if k > step.steps() {
        return Err(Error::Config(format!("k={k} exceeds T={}", step.steps())));
    }
    let truth = sequential_sample(step, params, x0)?;
    let mut x = Trajectory::constant(x0, step.steps());
    for _ in 0..k {
        x = phi_sweep(step, params, &x)?;
    }
    Ok(x.prefix_max_abs_diff(&truth, k) <= 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Activation, Layer, NoiseSchedule};
    use crate::solver::StepKind;
    use crate::tensor::{gaussian, Mat, SeededRng};
    use proptest::prelude::*;

    fn net(steps: usize, seed: u64) -> DenoiserParams {
        DenoiserParams::init(
            2,
            &[16, 16],
            2,
            NoiseSchedule::cosine(steps).unwrap(),
            &mut SeededRng::new(seed),
        )
        .unwrap()
    }

    fn exact_cfg(max_iters: usize) -> PicardConfig {
        PicardConfig {
            max_iters,
            tol: 1e-300,
            ..PicardConfig::default()
        }
    }

    #[test]
    fn t_sweeps_reach_the_sequential_trajectory() {
        for kind in [StepKind::EulerEq10, StepKind::Ddim] {
            let p = net(20, 1);
            let step = StepFn::new(kind, p.schedule());
            let x0 = [0.7, -0.2];
            let truth = sequential_sample(&step, &p, &x0).unwrap();
            let rep = run_picard(&step, &p, &x0, &exact_cfg(20), Some(&truth)).unwrap();
            assert!(rep.final_trajectory.max_abs_diff(&truth) <= 1e-10);
            assert_eq!(rep.residuals.len(), rep.iterations);
            assert_eq!(rep.errors.len(), rep.iterations);
        }
    }

    #[test]
    fn zero_network_converges_after_one_sweep() {
        // Euler with a zero network leaves the constant start unchanged.
        let p = net(10, 2).zeroed();
        let step = StepFn::new(StepKind::EulerEq10, p.schedule());
        let rep = run_picard(&step, &p, &[1.0, 1.0], &PicardConfig::default(), None).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert_eq!(rep.residuals, vec![0.0]);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = net(20, 3);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let cfg = PicardConfig {
            max_iters: 20,
            tol: 1e-6,
            ..PicardConfig::default()
        };
        let a = run_picard(&step, &p, &[0.1, 0.2], &cfg, None).unwrap();
        let b = run_picard(&step, &p, &[0.1, 0.2], &cfg, None).unwrap();
        assert_eq!(a.residuals, b.residuals);
        assert_eq!(a.final_trajectory, b.final_trajectory);
    }

    #[test]
    fn prefix_exactness_cases() {
        let p = net(20, 4);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let x0 = [-0.4, 1.1];
        for k in [0, 1, 5, 12, 20] {
            assert!(prefix_exactness(&step, &p, &x0, k).unwrap(), "k={k}");
        }
        assert!(prefix_exactness(&step, &p, &x0, 21).is_err());
    }

    #[test]
    fn contraction_on_scalar_linear_drift() {
        // eps = 0.5 x with the Euler step: small Lipschitz constant.
        let w = Mat::from_vec(1, 1, vec![0.5]).unwrap();
        let layer = Layer::new(w, vec![0.0], Activation::Identity).unwrap();
        let p = DenoiserParams::new(1, 0, vec![layer], NoiseSchedule::cosine(40).unwrap()).unwrap();
        let step = StepFn::new(StepKind::EulerEq10, p.schedule());
        let rep = run_picard(&step, &p, &[1.0], &exact_cfg(15), None).unwrap();
        for k in 1..rep.residuals.len() {
            let ratio = rep.residuals[k] / rep.residuals[k - 1];
            assert!(ratio < 1.0, "k={k} ratio={ratio}");
        }
    }

    #[test]
    fn error_metric_values() {
        let a = Trajectory::constant(&[0.0, 0.0], 3);
        let mut b = a.clone();
        assert_eq!(
            convergence_error(&a, &b, ErrorMetric::FinalPointL2).unwrap(),
            0.0
        );
        b.point_mut(3).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(
            convergence_error(&b, &a, ErrorMetric::FinalPointL2).unwrap(),
            5.0
        );
        assert_eq!(
            convergence_error(&b, &a, ErrorMetric::TrajectoryMeanL2).unwrap(),
            5.0 / 3.0
        );
        let c = Trajectory::constant(&[0.0, 0.0], 4);
        assert!(convergence_error(&a, &c, ErrorMetric::FinalPointL2).is_err());
    }

    #[test]
    fn config_validation() {
        let p = net(5, 0);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let bad = PicardConfig {
            max_iters: 0,
            ..PicardConfig::default()
        };
        assert!(run_picard(&step, &p, &[0.0, 0.0], &bad, None).is_err());
        let bad = PicardConfig {
            tol: 0.0,
            ..PicardConfig::default()
        };
        assert!(run_picard(&step, &p, &[0.0, 0.0], &bad, None).is_err());
    }

    #[test]
    fn non_finite_iterate_aborts_with_index() {
        let w = Mat::from_vec(1, 1, vec![1e308]).unwrap();
        let layer = Layer::new(w, vec![0.0], Activation::Identity).unwrap();
        let p = DenoiserParams::new(1, 0, vec![layer], NoiseSchedule::cosine(4).unwrap()).unwrap();
        let step = StepFn::new(StepKind::EulerEq10, p.schedule());
        let err = run_picard(&step, &p, &[10.0], &exact_cfg(4), None).unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { iteration: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn iterations_to_is_one_based() {
        assert_eq!(iterations_to(&[3.0, 2.0, 0.5, 0.1], 0.5), Some(3));
        assert_eq!(iterations_to(&[3.0], 0.5), None);
    }

    proptest! {
        #[test]
        fn metrics_nonnegative_and_zero_only_at_equality(seed in 0u64..10_000, same in any::<bool>()) {
            let mut rng = SeededRng::new(seed);
            let a = Trajectory::from_flat(2, gaussian(&mut rng, 12)).unwrap();
            let b = if same { a.clone() } else { Trajectory::from_flat(2, gaussian(&mut rng, 12)).unwrap() };
            for m in [ErrorMetric::FinalPointL2, ErrorMetric::TrajectoryMeanL2] {
                let e = convergence_error(&a, &b, m).unwrap();
                prop_assert!(e >= 0.0);
                prop_assert_eq!(e == 0.0, same);
            }
        }

        #[test]
        fn prefix_exactness_is_monotone(seed in 0u64..200, k in 1usize..10) {
            let p = net(10, seed);
            let step = StepFn::new(StepKind::Ddim, p.schedule());
            let x0 = gaussian(&mut SeededRng::new(seed + 1), 2);
            if prefix_exactness(&step, &p, &x0, k).unwrap() {
                prop_assert!(prefix_exactness(&step, &p, &x0, k - 1).unwrap());
            }
        }
    }
}
