//! Poisson rate coding of images into binary spike trains.
//!
//! Each time-step every pixel fires independently with probability
//! `rate_factor * intensity` (Bernoulli approximation of a Poisson process,
//! at most one spike per step).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Binary tensor `[T, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    data: Tensor,
}

impl SpikeTrain {
    /// Wraps a `[T, ...]` tensor; every element must be 0 or 1.
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() < 2 {
            return Err(Error::Input(format!(
                "spike train needs a leading time dimension, got {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("spike train values must be 0 or 1".into()));
        }
        Ok(SpikeTrain { data })
    }

    pub fn from_steps(steps: &[Tensor]) -> Result<Self> {
        SpikeTrain::new(Tensor::stack(steps)?)
    }

    pub fn timesteps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn step_shape(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn step(&self, t: usize) -> Tensor {
        self.data.index_first(t)
    }

    pub fn step_slice(&self, t: usize) -> &[f32] {
        let inner: usize = self.step_shape().iter().product();
        &self.data.data()[t * inner..(t + 1) * inner]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.data
    }

    /// Spike count per neuron (sum over the time dimension).
    pub fn counts(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.step_shape());
        let inner = acc.len();
        for t in 0..self.timesteps() {
            let s = &self.data.data()[t * inner..(t + 1) * inner];
            for (a, &v) in acc.data_mut().iter_mut().zip(s) {
                *a += v;
            }
        }
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonEncoder {
    /// Per-step firing probability of a pixel at full intensity.
    pub rate_factor: f32,
}

impl Default for PoissonEncoder {
    fn default() -> Self {
        PoissonEncoder { rate_factor: 1.0 }
    }
}

impl PoissonEncoder {
    pub fn new(rate_factor: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate_factor) {
            return Err(Error::Input(format!(
                "rate factor must be in [0, 1], got {rate_factor}"
            )));
        }
        Ok(PoissonEncoder { rate_factor })
    }

    pub(crate) fn check(image: &Tensor) -> Result<()> {
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!(
                "pixel value {v} outside [0, 1]; normalize before encoding"
            )));
        }
        Ok(())
    }

    /// One time-step of spikes for `image`.
    pub fn encode_step(&self, image: &Tensor, rng: &mut Rng) -> Tensor {
        let data = image
            .data()
            .iter()
            .map(|&p| if rng.bernoulli(p * self.rate_factor) { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(image.shape(), data).expect("same shape")
    }

    /// `timesteps` independent Bernoulli draws per pixel.
    pub fn encode(&self, image: &Tensor, timesteps: usize, rng: &mut Rng) -> Result<SpikeTrain> {
        if timesteps == 0 {
            return Err(Error::Input("timesteps must be >= 1".into()));
        }
        Self::check(image)?;
        let steps: Vec<Tensor> = (0..timesteps).map(|_| self.encode_step(image, rng)).collect();
        SpikeTrain::from_steps(&steps)
    }
}

/// Rate coding with the default rate factor of 1.
pub fn poisson_encode(image: &Tensor, timesteps: usize, rng: &mut Rng) -> Result<SpikeTrain> {
    PoissonEncoder::default().encode(image, timesteps, rng)
}

/// Per-image stream derived from a master seed (`seed XOR index`).
pub fn image_rng(master_seed: u64, index: usize) -> Rng {
    Rng::new(master_seed ^ index as u64)
}
