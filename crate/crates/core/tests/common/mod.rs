//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod backres;
pub mod grad;
pub mod stdp;

use snn_workbench::network::Network;
use snn_workbench::topology::{LayerKind, NeuronKind, SkipMode, SourceRef};

/// Naive f64 evaluation of an all-analog network (ReLU / linear layers only).
pub fn ann_forward_f64(net: &Network, input: &[f64], weights: &[Option<Vec<f64>>]) -> Vec<f64> {
    let spec = net.spec();
    let plan = net.plan();
    let mut vals: Vec<Vec<f64>> = Vec::new();
    for (i, step) in plan.steps.iter().enumerate() {
        let layer = &spec.layers[step.layer];
        let main: &[f64] = if i == 0 { input } else { &vals[i - 1] };
        let src = |s: SourceRef| -> Vec<f64> {
            match s {
                SourceRef::Input => input.to_vec(),
                SourceRef::Step(j) => vals[j].clone(),
            }
        };
        let ish = &step.input_shape;
        let mut out = match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let w = weights[step.layer].as_ref().unwrap();
                let (h, wd) = (ish[1], ish[2]);
                let (ho, wo) = (step.output_shape[1], step.output_shape[2]);
                let mut o = vec![0.0; out_channels * ho * wo];
                for m in 0..out_channels {
                    for y in 0..ho {
                        for x in 0..wo {
                            let mut acc = 0.0;
                            for c in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (y * stride + ky) as isize - padding as isize;
                                        let ix = (x * stride + kx) as isize - padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += w[((m * in_channels + c) * kernel + ky) * kernel + kx]
                                            * main[(c * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                            o[(m * ho + y) * wo + x] = acc;
                        }
                    }
                }
                o
            }
            LayerKind::Pool { window, stride } => pool_f64(main, ish, window, stride),
            LayerKind::Fc { inputs, outputs } => {
                let mut x = main.to_vec();
                for s in step.skips.iter().filter(|s| s.mode == SkipMode::ConcatToFc) {
                    let mut v = src(s.source);
                    let mut shape = s.source_shape.clone();
                    for &p in &s.pools {
                        let LayerKind::Pool { window, stride } = spec.layers[plan.steps[p].layer].kind else {
                            unreachable!()
                        };
                        v = pool_f64(&v, &shape, window, stride);
                        shape = vec![
                            shape[0],
                            (shape[1] - window) / stride + 1,
                            (shape[2] - window) / stride + 1,
                        ];
                    }
                    x.extend(v);
                }
                assert_eq!(x.len(), inputs);
                let w = weights[step.layer].as_ref().unwrap();
                (0..outputs)
                    .map(|j| (0..inputs).map(|k| w[j * inputs + k] * x[k]).sum())
                    .collect()
            }
        };
        for s in step.skips.iter().filter(|s| s.mode == SkipMode::AddZeroPad) {
            for (o, v) in out.iter_mut().zip(src(s.source)) {
                *o += v;
            }
        }
        match layer.neuron {
            NeuronKind::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
            NeuronKind::None => {}
            k => panic!("oracle handles analog layers only, got {k:?}"),
        }
        vals.push(out);
    }
    vals.pop().unwrap()
}

pub fn pool_f64(x: &[f64], shape: &[usize], p: usize, s: usize) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = ((h - p) / s + 1, (w - p) / s + 1);
    let mut o = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        acc += x[(ch * h + y * s + dy) * w + xx * s + dx];
                    }
                }
                o[(ch * ho + y) * wo + xx] = acc / (p * p) as f64;
            }
        }
    }
    o
}

/// Cross-entropy of softmax(logits) in f64.
pub fn cross_entropy_f64(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    lse - logits[target]
}

pub fn weights_f64(net: &Network) -> Vec<Option<Vec<f64>>> {
    net.weights
        .iter()
        .map(|w| w.as_ref().map(|w| w.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
