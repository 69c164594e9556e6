//! Toy 2-D data sets.
//!
//! * `gaussian-mixture-8`: eight isotropic Gaussians with std
//!   [`MIXTURE_STD`], centered on a circle of radius [`MIXTURE_RADIUS`] at
//!   angles `2πj/8`; the component is drawn uniformly.
//! * `two-moons`: `θ ~ U[0, π]`; the upper moon is `(cos θ, sin θ)`, the
//!   lower one `(1 - cos θ, 0.5 - sin θ)`, shifted by `(-0.5, -0.25)`,
//!   scaled by 1.5, plus `N(0, 0.05²)` jitter.
//! * `swiss-roll-2d`: `θ = 1.5π (1 + 2u)`, `u ~ U[0, 1)`; the point is
//!   `(θ cos θ, θ sin θ) / 5` plus `N(0, 0.05²)` jitter.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub const MIXTURE_RADIUS: f64 = 2.0;
pub const MIXTURE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    GaussianMixture8,
    TwoMoons,
    SwissRoll2d,
}

impl ToyKind {
    /// Centers of the eight mixture components.
    pub fn mixture_means() -> Vec<[f64; 2]> {
        (0..8)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / 8.0;
                [MIXTURE_RADIUS * a.cos(), MIXTURE_RADIUS * a.sin()]
            })
            .collect()
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture-8" => Ok(Self::GaussianMixture8),
            "two-moons" => Ok(Self::TwoMoons),
            "swiss-roll-2d" => Ok(Self::SwissRoll2d),
            other => Err(Error::UnknownTag {
                kind: "dataset kind",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianMixture8 => "gaussian-mixture-8",
            Self::TwoMoons => "two-moons",
            Self::SwissRoll2d => "swiss-roll-2d",
        })
    }
}

pub fn toy_dataset(kind: ToyKind, count: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let means = ToyKind::mixture_means();
    (0..count)
        .map(|_| match kind {
            ToyKind::GaussianMixture8 => {
                let m = means[rng.below(8)];
                vec![
                    m[0] + MIXTURE_STD * rng.normal(),
                    m[1] + MIXTURE_STD * rng.normal(),
                ]
            }
            ToyKind::TwoMoons => {
                let theta = PI * rng.uniform();
                let (x, y) = if rng.uniform() < 0.5 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                vec![
                    1.5 * (x - 0.5) + 0.05 * rng.normal(),
                    1.5 * (y - 0.25) + 0.05 * rng.normal(),
                ]
            }
            ToyKind::SwissRoll2d => {
                let theta = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
                vec![
                    theta * theta.cos() / 5.0 + 0.05 * rng.normal(),
                    theta * theta.sin() / 5.0 + 0.05 * rng.normal(),
                ]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kmeans(points: &[Vec<f64>], init: &[[f64; 2]], iters: usize) -> Vec<[f64; 2]> {
        let mut centers = init.to_vec();
        for _ in 0..iters {
            let mut sums = vec![[0.0, 0.0]; centers.len()];
            let mut counts = vec![0usize; centers.len()];
            for p in points {
                let (best, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                sums[best][0] += p[0];
                sums[best][1] += p[1];
                counts[best] += 1;
            }
            for (c, (s, n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
                if *n > 0 {
                    *c = [s[0] / *n as f64, s[1] / *n as f64];
                }
            }
        }
        centers
    }

    #[test]
    fn mixture_modes_recovered_by_kmeans() {
        let pts = toy_dataset(ToyKind::GaussianMixture8, 8000, &mut SeededRng::new(1));
        // Start k-means from a rotated, shrunken ring so it has to move.
        let init: Vec<[f64; 2]> = (0..8)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / 8.0 + 0.2;
                [1.5 * a.cos(), 1.5 * a.sin()]
            })
            .collect();
        let centers = kmeans(&pts, &init, 30);
        for m in ToyKind::mixture_means() {
            let d = centers
                .iter()
                .map(|c| ((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 0.1, "mode {m:?} nearest center at {d}");
        }
    }

    #[test]
    fn empty_and_seed_dependence() {
        assert!(toy_dataset(ToyKind::TwoMoons, 0, &mut SeededRng::new(0)).is_empty());
        for kind in [
            ToyKind::GaussianMixture8,
            ToyKind::TwoMoons,
            ToyKind::SwissRoll2d,
        ] {
            let a = toy_dataset(kind, 50, &mut SeededRng::new(1));
            let b = toy_dataset(kind, 50, &mut SeededRng::new(2));
            let a2 = toy_dataset(kind, 50, &mut SeededRng::new(1));
            assert_ne!(a, b);
            assert_eq!(a, a2);
            assert!(a
                .iter()
                .all(|p| p.len() == 2 && p.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("checkerboard".parse::<ToyKind>().is_err());
        assert_eq!("two-moons".parse::<ToyKind>().unwrap(), ToyKind::TwoMoons);
    }
}
