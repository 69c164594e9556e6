use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Signal level reached at the data end of every built-in ramp.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::UnknownTag {
                kind: "schedule",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Signal levels `alpha(t)` for `t = 0..=T`.
///
/// Index 0 is pure noise (`alpha(0) = 0`) and `T` is the data end, so the
/// sampler walks `t` upward. `var(t) = 1 - alpha(t)` is the corruption
/// variance at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Schedule("need at least two levels (T >= 1)".into()));
        }
        if alpha[0] != 0.0 {
            return Err(Error::Schedule(format!(
                "alpha(0) must be 0, got {}",
                alpha[0]
            )));
        }
        if let Some(t) = alpha.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Schedule(format!(
                "alpha must be strictly increasing, violated at t={}",
                t + 1
            )));
        }
        let last = alpha[alpha.len() - 1];
        if !(last <= 1.0) {
            return Err(Error::Schedule(format!(
                "alpha(T) must be <= 1, got {last}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be >= 1".into()));
        }
        let alpha = (0..=steps)
            .map(|t| {
                let tau = t as f64 / steps as f64;
                match kind {
                    ScheduleKind::Linear => ALPHA_MAX * tau,
                    ScheduleKind::Cosine => {
                        ALPHA_MAX * 0.5 * (1.0 - (std::f64::consts::PI * tau).cos())
                    }
                }
            })
            .collect::<Vec<_>>();
        // cos(0) rounds to exactly 1, but pin it anyway.
        let mut alpha = alpha;
        alpha[0] = 0.0;
        Self::new(alpha)
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Cosine, steps)
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Linear, steps)
    }

    /// Number of sampling steps `T`.
    #[inline]
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    #[inline]
    pub fn var(&self, t: usize) -> f64 {
        1.0 - self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_schedules_are_valid() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 50).unwrap();
            assert_eq!(s.steps(), 50);
            assert_eq!(s.alpha(0), 0.0);
            assert_eq!(s.var(0), 1.0);
            assert!((s.alpha(50) - ALPHA_MAX).abs() < 1e-15);
            assert!((0..=50).all(|t| s.var(t) >= 0.0));
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::new(vec![0.1, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![0.0, 1.5]).is_err());
        assert!(NoiseSchedule::new(vec![0.0]).is_err());
        assert!(NoiseSchedule::new(vec![0.0, f64::NAN]).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn kind_round_trips_through_str() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            assert_eq!(kind.to_string().parse::<ScheduleKind>().unwrap(), kind);
        }
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }
}
