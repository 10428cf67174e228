//! Scalar STDP fixtures: one 1x1 synapse driven by hand-placed spikes.

use snn_workbench::stdp::{ConvLayer, LayerTrains, StdpConfig};
use snn_workbench::Tensor;

/// No leak, no adaptation, no dropout, wide bounds, flat timing window.
pub fn quiet(timesteps: usize) -> StdpConfig {
    StdpConfig {
        dropout_p: 0.0,
        adapt_delta: 0.0,
        alpha: 1.0,
        weight_bounds: [-10.0, 10.0],
        tau: 1e6,
        ..StdpConfig::with_timesteps(timesteps)
    }
}

/// Single 1x1 synapse; `pre` and `drive` list the time-steps with a pre
/// spike and with an extra unit current into the post neuron.
pub fn scalar_trains(t: usize, pre: &[usize], drive: &[usize]) -> LayerTrains {
    let spike = |set: &[usize], i: usize| Tensor::full(&[1, 1, 1], if set.contains(&i) { 1.0 } else { 0.0 });
    LayerTrains {
        pre: (0..t).map(|i| spike(pre, i)).collect(),
        residual: Some(vec![(0..t).map(|i| spike(drive, i)).collect()]),
    }
}

pub fn scalar_layer(w: f32) -> ConvLayer {
    ConvLayer {
        weights: Tensor::full(&[1, 1, 1, 1], w),
        stride: 1,
        padding: 0,
        thresholds: vec![1.0],
    }
}
