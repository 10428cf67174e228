//! ANN to SNN conversion by threshold balancing.
//!
//! Every ReLU layer becomes an IF layer with the ANN weights unchanged. The
//! thresholds are then set one layer invocation at a time, in execution
//! order: calibration images are presented as Poisson trains, propagated as
//! spikes through the already-balanced layers, and the layer's threshold is
//! set to the largest weighted input it receives. Each BackRes invocation is a
//! separate (layer, unroll index) pair with its own threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::metrics::{evaluate, layer_activity, LayerActivity};
use crate::network::{Activity, Network, RunOptions, SimConfig, StepEvent};
use crate::neuron::ResetMode;
use crate::rng::Rng;
use crate::topology::NeuronKind;

/// Stream offset for calibration draws.
const CALIBRATION_STREAM: u64 = 0xCA1B;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    /// Simulation length used while balancing.
    pub calibration_timesteps: usize,
    pub calibration_samples: usize,
    /// 100 = plain maximum.
    pub percentile: f64,
    pub seed: u64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            calibration_timesteps: 2000,
            calibration_samples: 512,
            percentile: 100.0,
            seed: 0,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.calibration_timesteps == 0 {
            return Err(config_err!("calibration timesteps must be >= 1"));
        }
        if self.calibration_samples == 0 {
            return Err(config_err!("calibration needs at least one sample"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(config_err!("percentile must be in (0, 100], got {}", self.percentile));
        }
        Ok(())
    }
}

/// IF simulation used for converted networks: no leak, reset by subtraction.
pub fn if_config(timesteps: usize) -> SimConfig {
    SimConfig {
        timesteps,
        alpha: 1.0,
        reset: ResetMode::Subtract,
        rate_factor: 1.0,
        ..SimConfig::default()
    }
}

/// The ANN with every ReLU layer turned into an IF layer.
pub fn to_spiking(ann: &Network) -> Result<Network> {
    let mut spec = ann.spec().clone();
    if spec.layers.iter().any(|l| l.neuron.is_spiking()) {
        return Err(Error::Conversion(
            "source network already contains spiking layers".into(),
        ));
    }
    for l in spec.layers.iter_mut() {
        if l.neuron == NeuronKind::Relu {
            l.neuron = NeuronKind::If;
        }
    }
    let mut snn =
        Network::zeroed(spec).map_err(|e| Error::Conversion(format!("cannot build the spiking network: {e}")))?;
    snn.weights = ann.weights.clone();
    snn.stochmax = ann.stochmax.clone();
    Ok(snn)
}

fn percentile(values: &mut [f32], p: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Sets the thresholds of every spiking step of `snn` in execution order.
/// With `percentile < 100` the threshold is that percentile of the per
/// (sample, time-step) maxima rather than their overall maximum.
pub fn balance_thresholds(snn: &mut Network, calibration: &Dataset, cfg: &ConversionConfig) -> Result<()> {
    cfg.validate()?;
    if calibration.is_empty() {
        return Err(Error::Conversion("calibration set is empty".into()));
    }
    let samples = calibration.len().min(cfg.calibration_samples);
    let sim = if_config(cfg.calibration_timesteps);
    let master = Rng::new(cfg.seed ^ CALIBRATION_STREAM);
    let spiking: Vec<usize> = (0..snn.plan().steps.len())
        .filter(|&i| snn.spec().layers[snn.plan().steps[i].layer].neuron.is_spiking())
        .collect();
    // later thresholds never influence earlier layers; park them out of the way
    for &i in &spiking {
        let s = &snn.plan().steps[i];
        let (l, u) = (s.layer, s.unroll_index);
        snn.thresholds[l][u - 1] = f32::INFINITY;
    }
    for &j in &spiking {
        let net = &*snn;
        let per_sample: Vec<Result<Vec<f32>>> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut maxima = vec![f32::NEG_INFINITY; sim.timesteps];
                let mut obs = |e: &StepEvent<'_>| {
                    if e.step == j {
                        maxima[e.time] = e.current.max();
                    }
                };
                net.run(
                    &calibration.image(i),
                    &sim,
                    &mut master.fork(i as u64),
                    RunOptions {
                        stop_after: Some(j),
                        observer: Some(&mut obs),
                        ..Default::default()
                    },
                )?;
                Ok(maxima)
            })
            .collect();
        let mut all = Vec::with_capacity(samples * sim.timesteps);
        for r in per_sample {
            all.extend(r?);
        }
        let th = if cfg.percentile >= 100.0 {
            all.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
        } else {
            percentile(&mut all, cfg.percentile)
        };
        let step = &snn.plan().steps[j];
        let name = &snn.spec().layers[step.layer].name;
        if !(th > 0.0) || !th.is_finite() {
            return Err(Error::Conversion(format!(
                "layer {name} (unroll {}) received no positive input during calibration",
                step.unroll_index
            )));
        }
        let (l, u) = (step.layer, step.unroll_index);
        snn.thresholds[l][u - 1] = th;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerThresholds {
    pub layer: String,
    /// One per unroll index.
    pub thresholds: Vec<f32>,
    /// `v_1 < v_2 < ...` across unroll indices (recorded, not enforced).
    pub increasing: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub timesteps: usize,
    pub accuracy: f64,
    /// Fraction of samples where the SNN predicts what the ANN predicts.
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub topology: String,
    pub config: ConversionConfig,
    pub thresholds: Vec<LayerThresholds>,
    pub ann_accuracy: f64,
    pub sweep: Vec<SweepPoint>,
    pub layers: Vec<LayerActivity>,
}

pub fn threshold_table(snn: &Network) -> Vec<LayerThresholds> {
    snn.spec()
        .layers
        .iter()
        .zip(&snn.thresholds)
        .filter(|(l, _)| l.neuron.is_spiking())
        .map(|(l, th)| LayerThresholds {
            layer: l.name.clone(),
            thresholds: th.clone(),
            increasing: (th.len() > 1).then(|| th.windows(2).all(|w| w[0] < w[1])),
        })
        .collect()
}

pub struct ConvertedRun {
    /// Per requested T, in ascending order.
    pub timesteps: Vec<usize>,
    pub predictions: Vec<Vec<usize>>,
    /// Activity of the longest run.
    pub activity: Activity,
}

/// Simulates each sample once for `max(ts)` steps and reads out predictions
/// at every requested T (a run of T steps is a prefix of a longer run with
/// the same stream).
pub fn run_converted(snn: &Network, inputs: &Dataset, ts: &[usize], seed: u64) -> Result<ConvertedRun> {
    let mut ts = ts.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if ts.is_empty() || ts[0] == 0 {
        return Err(Error::Input(
            "T must be >= 1: no evidence accumulates in zero steps".into(),
        ));
    }
    let sim = if_config(*ts.last().unwrap());
    let master = Rng::new(seed);
    let per: Vec<Result<(Vec<usize>, Activity)>> = (0..inputs.len())
        .into_par_iter()
        .map(|i| {
            let r = snn.run(
                &inputs.image(i),
                &sim,
                &mut master.fork(i as u64),
                RunOptions {
                    checkpoints: ts.clone(),
                    ..Default::default()
                },
            )?;
            let preds = r
                .logits
                .into_iter()
                .zip(r.head_inputs)
                .map(|(logits, head_input)| {
                    snn.predict_from(&crate::network::ForwardOutput {
                        logits,
                        head_input,
                        activity: Activity::default(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((preds, r.activity))
        })
        .collect();
    let mut predictions = vec![Vec::with_capacity(inputs.len()); ts.len()];
    let mut activity = Activity::new(snn.plan().steps.len());
    for r in per {
        let (p, a) = r?;
        for (k, v) in p.into_iter().enumerate() {
            predictions[k].push(v);
        }
        activity.merge(&a);
    }
    Ok(ConvertedRun {
        timesteps: ts,
        predictions,
        activity,
    })
}

/// Converts, balances and sweeps; returns the spiking network and its report.
pub fn convert(
    ann: &Network,
    calibration: &Dataset,
    eval: &Dataset,
    sweep: &[usize],
    cfg: &ConversionConfig,
) -> Result<(Network, ConversionReport)> {
    let mut snn = to_spiking(ann)?;
    balance_thresholds(&mut snn, calibration, cfg)?;
    let ann_eval = evaluate(ann, eval, &SimConfig::default(), cfg.seed)?;
    let run = run_converted(&snn, eval, sweep, cfg.seed)?;
    let n = eval.len().max(1) as f64;
    let sweep = run
        .timesteps
        .iter()
        .zip(&run.predictions)
        .map(|(&t, p)| SweepPoint {
            timesteps: t,
            accuracy: p.iter().zip(&eval.labels).filter(|(a, b)| a == b).count() as f64 / n,
            agreement: p.iter().zip(&ann_eval.predictions).filter(|(a, b)| a == b).count() as f64 / n,
        })
        .collect();
    let report = ConversionReport {
        topology: snn.spec().name.clone(),
        config: cfg.clone(),
        thresholds: threshold_table(&snn),
        ann_accuracy: ann_eval.accuracy,
        sweep,
        layers: layer_activity(&snn, &run.activity),
    };
    Ok((snn, report))
}
