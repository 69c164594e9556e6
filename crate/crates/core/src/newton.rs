//! Newton's method on `Phi(X) - X = 0`, emulated one timestep at a time with
//! Jacobian-vector products. A convergence comparator, not a fast sampler.

use std::time::{Duration, Instant};

use crate::denoiser::DenoiserParams;
use crate::error::{check_len, Error, Result};
use crate::picard::{convergence_error, PicardConfig};
use crate::solver::{StepFn, Trajectory};

/// Consecutive growing iterations (above the initial error) that flag divergence.
const DIVERGENCE_RUN: usize = 3;

/// One Newton update:
/// `x'_{t+1} = F(x_t) + J_F(x_t) (x'_t - x_t)` with `F(x) = x + increment(x, t)`
/// and `x'_0 = x_0`. The new trajectory is the only `O(T n)` buffer.
pub fn newton_sweep(step: &StepFn, params: &DenoiserParams, x: &Trajectory) -> Result<Trajectory> {
    check_len("solver steps vs model T", params.steps(), step.steps())?;
    check_len("trajectory steps", step.steps(), x.steps())?;
    check_len("trajectory dim", params.dim(), x.dim())?;
    let mut out = x.clone();
    let mut v = vec![0.0; x.dim()];
    for t in 0..step.steps() {
        let xt = x.point(t);
        for ((vi, new), old) in v.iter_mut().zip(out.point(t)).zip(xt) {
            *vi = new - old;
        }
        let (inc, jinc) = step.increment_with_jvp(params, xt, t, &v);
        let next = out.point_mut(t + 1);
        for i in 0..next.len() {
            next[i] = xt[i] + inc[i] + v[i] + jinc[i];
        }
        if !next.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite {
                stage: "newton sweep",
                iteration: t + 1,
            });
        }
    }
    Ok(out)
}

/// Auxiliary floats held by one [`newton_sweep`]: the output trajectory plus
/// the tangent, increment and its JVP.
pub fn newton_aux_floats(steps: usize, dim: usize) -> usize {
    (steps + 1) * dim + 3 * dim
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    pub residuals: Vec<f64>,
    pub errors: Vec<f64>,
    pub initial_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Error grew for several iterations past its initial value, or an
    /// iterate went non-finite. The run stops at that point.
    pub diverged: bool,
    pub aux_floats: usize,
    pub final_trajectory: Trajectory,
    pub elapsed: Duration,
}

impl NewtonReport {
    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        crate::picard::iterations_to(&self.errors, eps)
    }
}

/// Iterates [`newton_sweep`] from the constant trajectory.
pub fn run_newton(
    step: &StepFn,
    params: &DenoiserParams,
    x0: &[f64],
    cfg: &PicardConfig,
    reference: Option<&Trajectory>,
) -> Result<NewtonReport> {
    cfg.validate()?;
    check_len("initial state", params.dim(), x0.len())?;
    let started = Instant::now();
    let mut current = Trajectory::constant(x0, step.steps());
    let initial_error = reference
        .map(|r| convergence_error(&current, r, cfg.metric))
        .transpose()?;
    let mut residuals = Vec::new();
    let mut errors = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut growing = 0;
    for _ in 0..cfg.max_iters {
        let next = match newton_sweep(step, params, &current) {
            Ok(n) => n,
            Err(Error::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let residual = next.max_abs_diff(&current);
        residuals.push(residual);
        let (score, baseline) = match reference {
            Some(r) => {
                let e = convergence_error(&next, r, cfg.metric)?;
                errors.push(e);
                (e, initial_error.unwrap_or(f64::INFINITY))
            }
            None => (residual, residuals[0]),
        };
        let prev = if reference.is_some() {
            errors.len().checked_sub(2).map(|i| errors[i])
        } else {
            residuals.len().checked_sub(2).map(|i| residuals[i])
        };
        growing = match prev {
            Some(p) if score > p && score > baseline => growing + 1,
            _ => 0,
        };
        current = next;
        if residual < cfg.tol {
            converged = true;
            break;
        }
        if growing >= DIVERGENCE_RUN {
            diverged = true;
            break;
        }
    }
    Ok(NewtonReport {
        iterations: residuals.len(),
        residuals,
        errors,
        initial_error,
        converged,
        diverged,
        aux_floats: newton_aux_floats(step.steps(), params.dim()),
        final_trajectory: current,
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Activation, Layer, NoiseSchedule};
    use crate::picard::run_picard;
    use crate::solver::{phi_sweep, sequential_sample, StepKind};
    use crate::tensor::{Mat, SeededRng};

    fn net(seed: u64) -> DenoiserParams {
        DenoiserParams::init(
            2,
            &[16, 16],
            2,
            NoiseSchedule::cosine(20).unwrap(),
            &mut SeededRng::new(seed),
        )
        .unwrap()
    }

    /// `eps(x, t) = M [x, emb(t)] + c`: affine in `x` at every step.
    fn affine(seed: u64) -> DenoiserParams {
        let mut rng = SeededRng::new(seed);
        let w = Mat::gaussian(2, 2 + 4, 0.8, &mut rng);
        let c = vec![0.3, -0.2];
        let layer = Layer::new(w, c, Activation::Identity).unwrap();
        DenoiserParams::new(2, 2, vec![layer], NoiseSchedule::cosine(20).unwrap()).unwrap()
    }

    fn exact(max_iters: usize) -> PicardConfig {
        PicardConfig {
            max_iters,
            tol: 1e-300,
            ..PicardConfig::default()
        }
    }

    #[test]
    fn affine_system_is_solved_in_one_sweep() {
        for kind in [StepKind::Ddim, StepKind::EulerEq10] {
            let p = affine(3);
            let step = StepFn::new(kind, p.schedule());
            let x0 = [1.3, -0.6];
            let truth = sequential_sample(&step, &p, &x0).unwrap();
            // Start from an arbitrary trajectory, not only the constant one.
            let mut rng = SeededRng::new(4);
            let mut start =
                Trajectory::from_flat(2, crate::tensor::gaussian(&mut rng, 42)).unwrap();
            start.point_mut(0).copy_from_slice(&x0);
            let one = newton_sweep(&step, &p, &start).unwrap();
            assert!(
                one.max_abs_diff(&truth) <= 1e-10,
                "{kind}: {}",
                one.max_abs_diff(&truth)
            );
        }
    }

    #[test]
    fn fixed_point_is_preserved() {
        let p = net(1);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        let truth = sequential_sample(&step, &p, &[0.2, 0.9]).unwrap();
        let again = newton_sweep(&step, &p, &truth).unwrap();
        assert!(again.max_abs_diff(&truth) <= 1e-10);
    }

    #[test]
    fn zero_network_matches_picard_sweep() {
        // Under the Euler step a zero network has a zero increment and JVP.
        let p = net(2).zeroed();
        let step = StepFn::new(StepKind::EulerEq10, p.schedule());
        let mut rng = SeededRng::new(5);
        let x = Trajectory::from_flat(2, crate::tensor::gaussian(&mut rng, 42)).unwrap();
        let n = newton_sweep(&step, &p, &x).unwrap();
        let f = phi_sweep(&step, &p, &x).unwrap();
        assert!(n.max_abs_diff(&f) <= 1e-12);
        let rep = run_newton(&step, &p, &[1.0, 2.0], &PicardConfig::default(), None).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        // Under DDIM the zero network is affine, so one sweep is exact.
        let ddim = StepFn::new(StepKind::Ddim, p.schedule());
        let rep = run_newton(&ddim, &p, &[1.0, 2.0], &PicardConfig::default(), None).unwrap();
        assert!(rep.iterations <= 2 && rep.converged);
    }

    #[test]
    fn newton_needs_no_more_iterations_than_picard() {
        let p = net(6);
        let step = StepFn::new(StepKind::Ddim, p.schedule());
        for seed in 0..4u64 {
            let x0 = crate::tensor::gaussian(&mut SeededRng::new(seed), 2);
            let truth = sequential_sample(&step, &p, &x0).unwrap();
            let n = run_newton(&step, &p, &x0, &exact(20), Some(&truth)).unwrap();
            let q = run_picard(&step, &p, &x0, &exact(20), Some(&truth)).unwrap();
            let tol = 1e-6;
            assert!(!n.diverged);
            assert!(n.iterations_to(tol).unwrap() <= q.iterations_to(tol).unwrap());
        }
    }

    #[test]
    fn aux_storage_is_linear_in_t_and_n() {
        assert_eq!(newton_aux_floats(50, 2), 51 * 2 + 6);
        // Doubling T roughly doubles the footprint; a Jacobian would quadruple it.
        let a = newton_aux_floats(100, 2) as f64;
        let b = newton_aux_floats(200, 2) as f64;
        assert!(b / a < 2.1);
    }

    #[test]
    fn blow_up_is_flagged_not_fatal() {
        let w = Mat::from_vec(1, 1, vec![1e200]).unwrap();
        let layer = Layer::new(w, vec![0.0], Activation::Identity).unwrap();
        let p = DenoiserParams::new(1, 0, vec![layer], NoiseSchedule::cosine(6).unwrap()).unwrap();
        let step = StepFn::new(StepKind::EulerEq10, p.schedule());
        let rep = run_newton(&step, &p, &[1e150], &exact(5), None).unwrap();
        assert!(rep.diverged);
        assert!(!rep.converged);
    }
}
