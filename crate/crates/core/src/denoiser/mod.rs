//! Time-conditioned MLP noise predictor.
//!
//! The network sees `[x, emb(t/T)]` where `emb` is a sinusoidal embedding
//! with `time_freqs` octave-spaced frequencies (`2 * time_freqs` features).
//! Hidden layers use a smooth activation so the input Jacobian exists
//! everywhere.

mod checkpoint;
mod data;
mod dual;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{toy_dataset, ToyKind, MIXTURE_RADIUS, MIXTURE_STD};
pub use dual::Dual;
pub use schedule::{NoiseSchedule, ScheduleKind, ALPHA_MAX};
pub use train::{corrupt, ddpm_train, grad, Batch, DdpmConfig, DdpmLog, LossKind};

use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::optim::ParamSet;
use crate::tensor::{Mat, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::Silu => z * dual::sigmoid(z),
            Self::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Silu => {
                let s = dual::sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Self::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }

    #[inline]
    pub fn apply_dual(self, z: Dual) -> Dual {
        match self {
            Self::Identity => z,
            Self::Silu => z * z.sigmoid(),
            Self::Tanh => z.tanh(),
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Self::Identity => 0,
            Self::Silu => 1,
            Self::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::Identity),
            1 => Ok(Self::Silu),
            2 => Ok(Self::Tanh),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

/// Dense layer `activation(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("layer bias", weight.rows(), bias.len())?;
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Sinusoidal features of `t / steps`: `[sin(w_j τ), cos(w_j τ)]`, `w_j = π 2^j`.
pub fn time_embedding(t: usize, steps: usize, freqs: usize) -> Vec<f64> {
    let tau = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(2 * freqs);
    for j in 0..freqs {
        let w = std::f64::consts::PI * (1u64 << j) as f64;
        out.push((w * tau).sin());
        out.push((w * tau).cos());
    }
    out
}

/// Weights of the noise predictor plus the schedule it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    dim: usize,
    time_freqs: usize,
    layers: Vec<Layer>,
    schedule: NoiseSchedule,
}

/// Layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl DenoiserParams {
    pub fn new(
        dim: usize,
        time_freqs: usize,
        layers: Vec<Layer>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("state dimension must be >= 1".into()));
        }
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut width = dim + 2 * time_freqs;
        for layer in &layers {
            check_len("layer input", width, layer.in_dim())?;
            check_len("layer bias", layer.out_dim(), layer.bias.len())?;
            width = layer.out_dim();
        }
        check_len("network output", dim, width)?;
        let params = Self {
            dim,
            time_freqs,
            layers,
            schedule,
        };
        if !params.all_finite() {
            return Err(Error::Config("network weights must be finite".into()));
        }
        Ok(params)
    }

    /// Random initialization: SiLU hidden layers, linear output layer.
    ///
    /// Weights are `N(0, 1/fan_in)`, biases zero.
    pub fn init(
        dim: usize,
        hidden: &[usize],
        time_freqs: usize,
        schedule: NoiseSchedule,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = dim + 2 * time_freqs;
        for &h in hidden.iter().chain(std::iter::once(&dim)) {
            if h == 0 {
                return Err(Error::Config("hidden widths must be >= 1".into()));
            }
            let act = if layers.len() == hidden.len() {
                Activation::Identity
            } else {
                Activation::Silu
            };
            let w = Mat::gaussian(h, width, 1.0 / (width as f64).sqrt(), rng);
            layers.push(Layer::new(w, vec![0.0; h], act)?);
            width = h;
        }
        Self::new(dim, time_freqs, layers, schedule)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn time_freqs(&self) -> usize {
        self.time_freqs
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 2 * self.time_freqs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Same weights, every entry multiplied by zero (keeps shapes and schedule).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.fill(0.0);
        }
        out
    }

    fn network_input(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        input.extend(time_embedding(t, self.steps(), self.time_freqs));
        input
    }

    fn check_args(&self, x: &[f64], t: usize) -> Result<()> {
        check_len("predict input", self.dim, x.len())?;
        if t > self.steps() {
            return Err(Error::Config(format!(
                "time index {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Predicted noise at state `x`, step `t`.
    pub fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_args(x, t)?;
        Ok(self.eval(x, t))
    }

    /// Unchecked forward pass for hot loops; callers guarantee shapes.
    pub(crate) fn eval(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut h = self.network_input(x, t);
        for layer in &self.layers {
            let mut z = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(&h, &mut z);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi = layer.activation.apply(*zi + bi);
            }
            h = z;
        }
        h
    }

    /// Forward pass that keeps what [`DenoiserParams::backward`] needs.
    pub fn forward_trace(&self, x: &[f64], t: usize) -> ForwardTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = self.network_input(x, t);
        for layer in &self.layers {
            let mut z = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(&h, &mut z);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let a = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        ForwardTrace {
            inputs,
            pre,
            output: h,
        }
    }

    /// Accumulates `d_output`-weighted parameter gradients into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, d_output: &[f64], grads: &mut Gradients) {
        let mut upstream = d_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let dz: Vec<f64> = upstream
                .iter()
                .zip(&trace.pre[l])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let lg = &mut grads.layers[l];
            let input = &trace.inputs[l];
            let cols = layer.in_dim();
            let wdata = lg.weight.data_mut();
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                let row = &mut wdata[r * cols..(r + 1) * cols];
                for (w, &xi) in row.iter_mut().zip(input) {
                    *w += dzr * xi;
                }
            }
            for (b, &dzr) in lg.bias.iter_mut().zip(&dz) {
                *b += dzr;
            }
            if l > 0 {
                let mut down = vec![0.0; cols];
                layer.weight.matvec_transposed_into(&dz, &mut down);
                upstream = down;
            }
        }
    }

    /// Jacobian of the prediction w.r.t. `x`, applied to `v`.
    pub fn jvp(&self, x: &[f64], t: usize, v: &[f64]) -> Result<Vec<f64>> {
        check_len("jvp tangent", self.dim, v.len())?;
        self.check_args(x, t)?;
        Ok(self.eval_with_tangent(x, t, v).1)
    }

    /// Prediction and JVP from a single dual-number pass.
    pub(crate) fn eval_with_tangent(&self, x: &[f64], t: usize, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let input = self.network_input(x, t);
        let mut h: Vec<Dual> = input
            .iter()
            .enumerate()
            .map(|(i, &re)| Dual::new(re, if i < self.dim { v[i] } else { 0.0 }))
            .collect();
        for layer in &self.layers {
            let next = (0..layer.out_dim())
                .map(|r| {
                    let acc = layer
                        .weight
                        .row(r)
                        .iter()
                        .zip(&h)
                        .fold(Dual::constant(0.0), |acc, (&w, &hi)| acc + hi.scale(w));
                    layer
                        .activation
                        .apply_dual(acc + Dual::constant(layer.bias[r]))
                })
                .collect();
            h = next;
        }
        h.into_iter().map(|d| (d.re, d.du)).unzip()
    }

    /// First 8 bytes of the SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> [u8; 8] {
        let digest = Sha256::digest(checkpoint::to_bytes(self));
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }
}

impl ParamSet for DenoiserParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// Gradient with the same layout as [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Mat::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x *= k;
            }
        }
    }
}

impl ParamSet for Gradients {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}
