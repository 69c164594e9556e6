//! Adam with cosine learning-rate decay, and the EMA weight update.

use crate::error::{check_len, Error, Result};

/// A set of parameter tensors viewed as flat slices in a fixed order.
///
/// Gradients implement it too, so optimizer state lines up slice by slice.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// L2 distance between two same-shaped parameter sets.
pub fn param_distance<P: ParamSet>(a: &P, b: &P) -> f64 {
    a.slices()
        .iter()
        .zip(b.slices())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        .sqrt()
}

pub fn param_norm<P: ParamSet>(a: &P) -> f64 {
    a.slices()
        .iter()
        .flat_map(|x| x.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Learning rate at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let shapes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. `lr == 0` leaves `params` bit-identical.
    pub fn step<P: ParamSet, G: ParamSet>(&mut self, params: &mut P, grads: &G, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let grads = grads.slices();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                if lr != 0.0 {
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// `ema <- mu * ema + (1 - mu) * current`, element-wise.
pub fn ema_update<P: ParamSet>(ema: &mut P, current: &P, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!(
            "EMA decay must lie in [0, 1], got {mu}"
        )));
    }
    let cur = current.slices();
    let mut dst = ema.slices_mut();
    check_len("ema_update", dst.len(), cur.len())?;
    for (e, c) in dst.iter_mut().zip(cur) {
        check_len("ema_update", e.len(), c.len())?;
        for (ei, ci) in e.iter_mut().zip(c) {
            *ei = mu * *ei + (1.0 - mu) * ci;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Flat(Vec<f64>);

    impl ParamSet for Flat {
        fn slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn ema_scalar_cases() {
        let mut e = Flat(vec![1.0]);
        ema_update(&mut e, &Flat(vec![0.0]), 0.999).unwrap();
        assert_eq!(e.0[0], 0.999);

        let mut e = Flat(vec![0.25]);
        ema_update(&mut e, &Flat(vec![7.0]), 1.0).unwrap();
        assert_eq!(e.0[0], 0.25);

        let mut e = Flat(vec![0.25]);
        ema_update(&mut e, &Flat(vec![7.0]), 0.0).unwrap();
        assert_eq!(e.0[0], 7.0);
    }

    #[test]
    fn ema_rejects_bad_decay() {
        let mut e = Flat(vec![1.0]);
        assert!(ema_update(&mut e, &Flat(vec![0.0]), 1.5).is_err());
        assert!(ema_update(&mut e, &Flat(vec![0.0]), -0.1).is_err());
    }

    #[test]
    fn adam_zero_lr_is_noop() {
        let mut p = Flat(vec![0.3, -1.2]);
        let before = p.clone();
        let mut opt = Adam::new(&p);
        for _ in 0..5 {
            opt.step(&mut p, &Flat(vec![1.0, -2.0]), 0.0);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Flat(vec![3.0]);
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = Flat(vec![2.0 * p.0[0]]);
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.0[0].abs() < 1e-2);
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
