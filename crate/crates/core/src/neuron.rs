//! Discrete-time LIF / IF neurons.
//!
//! One step: `v <- alpha * v + I`; a neuron fires when `v >= threshold` and it
//! is not refractory, after which the threshold is subtracted from `v` (or `v`
//! is zeroed, see [`ResetMode`]). `alpha == 1` gives an IF neuron. While
//! refractory, a neuron's membrane potential is held and its input ignored.
//!
//! BackRes layers carry one threshold per unroll step; the caller selects the
//! active one through the 1-based `unroll_index`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Surrogate damping factor used by default in BPTT.
pub const DEFAULT_GAMMA: f32 = 0.3;
/// Default leak for LIF layers.
pub const DEFAULT_ALPHA: f32 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    Subtract,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub v_mem: Tensor,
    pub alpha: f32,
    pub thresholds: Vec<f32>,
    pub refractory_remaining: Vec<u32>,
    pub refractory_period: u32,
    pub reset: ResetMode,
}

impl NeuronState {
    pub fn new(shape: &[usize], alpha: f32, thresholds: Vec<f32>) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(config_err!("leak alpha must be in (0, 1], got {alpha}"));
        }
        if thresholds.is_empty() || thresholds.iter().any(|&t| t.is_nan() || t <= 0.0) {
            return Err(config_err!("thresholds must be positive, got {:?}", thresholds));
        }
        let v_mem = Tensor::zeros(shape);
        let n = v_mem.len();
        Ok(NeuronState {
            v_mem,
            alpha,
            thresholds,
            refractory_remaining: vec![0; n],
            refractory_period: 0,
            reset: ResetMode::Subtract,
        })
    }

    pub fn with_refractory(mut self, period: u32) -> Self {
        self.refractory_period = period;
        self
    }

    pub fn with_reset(mut self, reset: ResetMode) -> Self {
        self.reset = reset;
        self
    }

    pub fn threshold(&self, unroll_index: usize) -> Result<f32> {
        if unroll_index == 0 || unroll_index > self.thresholds.len() {
            return Err(config_err!(
                "unroll index {} out of range 1..={}",
                unroll_index,
                self.thresholds.len()
            ));
        }
        Ok(self.thresholds[unroll_index - 1])
    }

    pub fn reset_state(&mut self) {
        self.v_mem.fill(0.0);
        self.refractory_remaining.fill(0);
    }
}

/// Advances `state` by one time-step and returns the binary spike map.
pub fn lif_step(state: &mut NeuronState, input_current: &Tensor, unroll_index: usize) -> Result<Tensor> {
    state.v_mem.check_same_shape(input_current)?;
    let threshold = state.threshold(unroll_index)?;
    let mut spikes = Tensor::zeros(input_current.shape());
    let alpha = state.alpha;
    let period = state.refractory_period;
    let reset = state.reset;
    let v = state.v_mem.data_mut();
    let out = spikes.data_mut();
    for (i, (&cur, r)) in input_current
        .data()
        .iter()
        .zip(state.refractory_remaining.iter_mut())
        .enumerate()
    {
        if *r > 0 {
            *r -= 1;
            continue;
        }
        let u = alpha * v[i] + cur;
        if u >= threshold {
            out[i] = 1.0;
            v[i] = match reset {
                ResetMode::Subtract => u - threshold,
                ResetMode::Zero => 0.0,
            };
            *r = period;
        } else {
            v[i] = u;
        }
    }
    Ok(spikes)
}

/// Refractory-free LIF update over a whole layer. Returns the spike map and
/// the membrane potential before reset (needed by the surrogate backward).
pub fn lif_integrate(
    v_mem: &mut Tensor,
    current: &Tensor,
    alpha: f32,
    threshold: f32,
    reset: ResetMode,
) -> (Tensor, Tensor) {
    let mut spikes = Tensor::zeros(current.shape());
    let mut pre = Tensor::zeros(current.shape());
    for (((v, &i), s), u_out) in v_mem
        .data_mut()
        .iter_mut()
        .zip(current.data())
        .zip(spikes.data_mut())
        .zip(pre.data_mut())
    {
        let u = alpha * *v + i;
        *u_out = u;
        if u >= threshold {
            *s = 1.0;
            *v = match reset {
                ResetMode::Subtract => u - threshold,
                ResetMode::Zero => 0.0,
            };
        } else {
            *v = u;
        }
    }
    (spikes, pre)
}

/// Piecewise-linear surrogate `gamma * max(0, 1 - |(v - th) / th|)`.
pub fn surrogate_grad(v_mem: &Tensor, threshold: f32, gamma: f32) -> Tensor {
    v_mem.map(|v| surrogate_scalar(v, threshold, gamma))
}

#[inline]
pub fn surrogate_scalar(v: f32, threshold: f32, gamma: f32) -> f32 {
    gamma * (1.0 - ((v - threshold) / threshold).abs()).max(0.0)
}

/// `1` where `v_mem >= threshold`, else `0`.
pub fn heaviside_forward(v_mem: &Tensor, threshold: f32) -> Tensor {
    v_mem.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: f32) -> Tensor {
        Tensor::full(&[1], v)
    }

    #[test]
    fn leak_without_input() {
        let mut s = NeuronState::new(&[1], 0.95, vec![2.0]).unwrap();
        s.v_mem = one(1.0);
        let spk = lif_step(&mut s, &one(0.0), 1).unwrap();
        assert_eq!(spk.data(), &[0.0]);
        assert!((s.v_mem.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn integrate_and_fire_hand_iteration() {
        let mut s = NeuronState::new(&[1], 1.0, vec![1.0]).unwrap();
        let mut fired = Vec::new();
        for _ in 0..3 {
            fired.push(lif_step(&mut s, &one(0.4), 1).unwrap().data()[0]);
        }
        assert_eq!(fired, [0.0, 0.0, 1.0]);
        assert!((s.v_mem.data()[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn reset_to_zero_mode() {
        let mut s = NeuronState::new(&[1], 1.0, vec![1.0])
            .unwrap()
            .with_reset(ResetMode::Zero);
        for _ in 0..3 {
            lif_step(&mut s, &one(0.4), 1).unwrap();
        }
        assert_eq!(s.v_mem.data()[0], 0.0);
    }

    #[test]
    fn refractory_blocks_two_steps() {
        let mut s = NeuronState::new(&[1], 1.0, vec![1.0]).unwrap().with_refractory(2);
        let trace: Vec<f32> = (0..5)
            .map(|_| lif_step(&mut s, &one(5.0), 1).unwrap().data()[0])
            .collect();
        assert_eq!(trace, [1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn unroll_index_selects_threshold() {
        let mut s = NeuronState::new(&[1], 1.0, vec![1.0, 3.0]).unwrap();
        assert_eq!(lif_step(&mut s, &one(2.0), 2).unwrap().data(), &[0.0]);
        s.reset_state();
        assert_eq!(lif_step(&mut s, &one(2.0), 1).unwrap().data(), &[1.0]);
        assert!(lif_step(&mut s, &one(2.0), 3).is_err());
        assert!(lif_step(&mut s, &one(2.0), 0).is_err());
    }

    #[test]
    fn rejects_bad_state() {
        assert!(NeuronState::new(&[1], 0.0, vec![1.0]).is_err());
        assert!(NeuronState::new(&[1], 0.9, vec![0.0]).is_err());
        assert!(NeuronState::new(&[1], 0.9, vec![]).is_err());
    }

    #[test]
    fn surrogate_values() {
        assert!((surrogate_scalar(1.0, 1.0, DEFAULT_GAMMA) - 0.3).abs() < 1e-7);
        assert_eq!(surrogate_scalar(0.0, 1.0, 0.3), 0.0);
        assert_eq!(surrogate_scalar(2.0, 1.0, 0.3), 0.0);
        assert!((surrogate_scalar(1.5, 1.0, 0.3) - 0.15).abs() < 1e-7);
        let t = surrogate_grad(&Tensor::from_vec(&[2], vec![1.0, 1.5]).unwrap(), 1.0, 0.3);
        assert!((t.data()[1] - 0.15).abs() < 1e-7);
    }

    #[test]
    fn heaviside_tie_breaks_to_one() {
        let v = Tensor::from_vec(&[2], vec![1.0 - 1e-6, 1.0]).unwrap();
        assert_eq!(heaviside_forward(&v, 1.0).data(), &[0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn heaviside_is_binary(vals in proptest::collection::vec(-10.0f32..10.0, 1..64), th in 0.01f32..5.0) {
            let t = Tensor::from_vec(&[vals.len()], vals).unwrap();
            prop_assert!(heaviside_forward(&t, th).data().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn subtraction_reset_conserves_charge(inputs in proptest::collection::vec(0.0f32..2.0, 1..200), th in 0.1f32..3.0) {
            // IF neuron: integrated input == final potential + threshold * spikes
            let mut s = NeuronState::new(&[1], 1.0, vec![th]).unwrap();
            let mut spikes = 0.0f64;
            let mut total = 0.0f64;
            for &i in &inputs {
                spikes += lif_step(&mut s, &Tensor::full(&[1], i), 1).unwrap().data()[0] as f64;
                total += i as f64;
            }
            let lhs = total - s.v_mem.data()[0] as f64;
            prop_assert!((lhs - th as f64 * spikes).abs() < 1e-3 * (1.0 + total));
        }

        #[test]
        fn leak_decays_toward_zero(v0 in -5.0f32..5.0, alpha in 0.5f32..0.99) {
            let mut s = NeuronState::new(&[1], alpha, vec![100.0]).unwrap();
            s.v_mem = Tensor::full(&[1], v0);
            let mut prev = v0.abs();
            for _ in 0..20 {
                lif_step(&mut s, &Tensor::full(&[1], 0.0), 1).unwrap();
                let cur = s.v_mem.data()[0].abs();
                prop_assert!(cur <= prev);
                prev = cur;
            }
        }

        #[test]
        fn spikes_invariant_to_common_scaling(inputs in proptest::collection::vec(-1.0f32..2.0, 1..50), th in 0.2f32..2.0, k in prop::sample::select(vec![0.5f32, 2.0, 4.0, 8.0])) {
            // power-of-two factors keep every float operation exact
            let mut a = NeuronState::new(&[1], 1.0, vec![th]).unwrap();
            let mut b = NeuronState::new(&[1], 1.0, vec![th * k]).unwrap();
            for &i in &inputs {
                let sa = lif_step(&mut a, &Tensor::full(&[1], i), 1).unwrap();
                let sb = lif_step(&mut b, &Tensor::full(&[1], i * k), 1).unwrap();
                prop_assert_eq!(sa, sb);
            }
        }
    }
}
