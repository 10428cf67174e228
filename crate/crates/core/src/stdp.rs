//! Layerwise unsupervised STDP for spiking convolutions, plus a classifier
//! fitted by backprop on the frozen features.
//!
//! Each trained layer is simulated on its own: the frozen upstream network
//! streams its spikes in through a run observer, while the layer under
//! training runs LIF dynamics with adaptive thresholds and feature-map
//! dropout. Every post spike is paired with the most recent pre spike at or
//! before it; acausal and unpaired post spikes contribute nothing. For each
//! kernel weight the contributions are averaged over the output positions
//! that share it, then over the batch, and applied once per update point.
//!
//! A weight-shared (BackRes) layer is simulated at every unroll step: step
//! one sees the block input, step m sees step m-1's own output, and each
//! step applies its own update to the same weights, so a presentation makes
//! `k * n` updates where `k` is the per-step update count.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agd::{self, AgdConfig, EpochMetrics};
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::kernels::conv2d_forward;
use crate::network::{Network, RunOptions, Segment, SimConfig, StepEvent};
use crate::neuron::{ResetMode, DEFAULT_ALPHA};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::topology::{LayerKind, LayerSpec, SkipMode, TopologySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdpConfig {
    pub eta: f64,
    /// Time constant in time-steps.
    pub tau: f64,
    pub offset: f64,
    pub timesteps: usize,
    pub batch_size: usize,
    /// Threshold increment per post spike.
    pub adapt_delta: f32,
    /// Per-step relaxation of the threshold toward its base value.
    pub adapt_decay: f32,
    /// Probability of silencing a whole output map for one presentation.
    pub dropout_p: f64,
    pub weight_bounds: [f32; 2],
    /// Update points per unroll step per presentation (`k`).
    pub updates_per_presentation: usize,
    /// At most one map fires per output position and time-step.
    pub lateral_inhibition: bool,
    /// After a layer is trained, its inference thresholds are rescaled so the
    /// layer fires at this mean rate without adaptation; `None` keeps the
    /// mean adapted threshold.
    pub inference_rate: Option<f64>,
    pub epochs: usize,
    pub alpha: f32,
    pub rate_factor: f32,
    pub seed: u64,
}

impl Default for StdpConfig {
    fn default() -> Self {
        Self::with_timesteps(100)
    }
}

impl StdpConfig {
    /// Defaults for a window of `timesteps`: tau = T/5, adaptation step 5%
    /// of the unit base threshold.
    pub fn with_timesteps(timesteps: usize) -> Self {
        StdpConfig {
            eta: 0.01,
            tau: timesteps as f64 / 5.0,
            offset: 0.4,
            timesteps,
            batch_size: 16,
            adapt_delta: 0.05,
            adapt_decay: 0.02,
            dropout_p: 0.5,
            weight_bounds: [0.0, 1.0],
            updates_per_presentation: 1,
            lateral_inhibition: true,
            inference_rate: Some(0.2),
            epochs: 1,
            alpha: DEFAULT_ALPHA,
            rate_factor: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(config_err!("STDP learning rate must be > 0, got {}", self.eta));
        }
        if !(self.offset > 0.0 && self.offset < 1.0) {
            return Err(config_err!("STDP offset must lie in (0, 1), got {}", self.offset));
        }
        if !(self.tau > 0.0) {
            return Err(config_err!("STDP time constant must be > 0, got {}", self.tau));
        }
        if self.timesteps == 0 {
            return Err(config_err!("timesteps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if !(self.adapt_delta >= 0.0) || !(0.0..=1.0).contains(&self.adapt_decay) {
            return Err(config_err!("threshold adaptation needs delta >= 0 and decay in [0, 1]"));
        }
        if let Some(r) = self.inference_rate {
            if !(r > 0.0 && r < 1.0) {
                return Err(config_err!("inference firing rate must lie in (0, 1), got {r}"));
            }
        }
        let [lo, hi] = self.weight_bounds;
        if !(lo < hi) {
            return Err(config_err!("weight bounds must satisfy min < max, got [{lo}, {hi}]"));
        }
        if self.updates_per_presentation == 0 || self.updates_per_presentation > self.timesteps {
            return Err(config_err!(
                "updates per presentation must lie in 1..={}",
                self.timesteps
            ));
        }
        self.sim().validate()
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            timesteps: self.timesteps,
            alpha: self.alpha,
            reset: ResetMode::Subtract,
            rate_factor: self.rate_factor,
            ..SimConfig::default()
        }
    }

    /// Lag at which potentiation turns into depression.
    pub fn zero_crossing(&self) -> f64 {
        self.tau * (1.0 / self.offset).ln()
    }
}

/// `eta * (exp(-(t_post - t_pre) / tau) - offset)`; zero for acausal pairs.
pub fn stdp_delta(t_post: usize, t_pre: usize, cfg: &StdpConfig) -> f64 {
    if t_post < t_pre {
        return 0.0;
    }
    let lag = (t_post - t_pre) as f64;
    cfg.eta * ((-lag / cfg.tau).exp() - cfg.offset)
}

/// Last spike times of the pre and post populations of one unroll step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeTimingRecord {
    pub last_pre: Vec<Option<u32>>,
    pub last_post: Vec<Option<u32>>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn of(net: &Network, step: usize) -> Result<Self> {
        let s = &net.plan().steps[step];
        let LayerKind::Conv {
            kernel,
            stride,
            padding,
            ..
        } = net.spec().layers[s.layer].kind
        else {
            return Err(config_err!("STDP trains convolutions only"));
        };
        Ok(Geometry {
            c: s.input_shape[0],
            h: s.input_shape[1],
            w: s.input_shape[2],
            o: s.output_shape[0],
            ho: s.output_shape[1],
            wo: s.output_shape[2],
            k: kernel,
            stride,
            pad: padding,
        })
    }

    fn weight_len(&self) -> usize {
        self.o * self.c * self.k * self.k
    }
}

/// Dynamics and accumulated update of one unroll step for one sample.
#[derive(Clone, Debug)]
struct UnitState {
    v: Vec<f32>,
    theta: Vec<f32>,
    base: f32,
    timing: SpikeTimingRecord,
    dropped: Vec<bool>,
    delta: Vec<f64>,
    post_spikes: u64,
    output: Tensor,
}

impl UnitState {
    fn new(g: &Geometry, base: f32, dropped: Vec<bool>) -> Self {
        let n_out = g.o * g.ho * g.wo;
        Self::starting_at(g, base, vec![base; n_out], dropped)
    }

    fn starting_at(g: &Geometry, base: f32, theta: Vec<f32>, dropped: Vec<bool>) -> Self {
        let n_out = g.o * g.ho * g.wo;
        UnitState {
            v: vec![0.0; n_out],
            theta,
            base,
            timing: SpikeTimingRecord {
                last_pre: vec![None; g.c * g.h * g.w],
                last_post: vec![None; n_out],
            },
            dropped,
            delta: vec![0.0; g.weight_len()],
            post_spikes: 0,
            output: Tensor::zeros(&[g.o, g.ho, g.wo]),
        }
    }

    fn step(&mut self, t: usize, pre: &Tensor, current: &Tensor, g: &Geometry, cfg: &StdpConfig, lut: &[f64]) {
        for (slot, &x) in self.timing.last_pre.iter_mut().zip(pre.data()) {
            if x > 0.0 {
                *slot = Some(t as u32);
            }
        }
        let per_map = g.ho * g.wo;
        for (i, &cur) in current.data().iter().enumerate() {
            let th = &mut self.theta[i];
            *th = self.base + (*th - self.base) * (1.0 - cfg.adapt_decay);
            self.v[i] = if self.dropped[i / per_map] {
                0.0
            } else {
                cfg.alpha * self.v[i] + cur
            };
        }
        let above = |i: usize| !self.dropped[i / per_map] && self.v[i] >= self.theta[i];
        let winners: Vec<usize> = if cfg.lateral_inhibition {
            // one winner per position: the map furthest above its threshold
            (0..per_map)
                .filter_map(|p| {
                    (0..g.o)
                        .map(|o| o * per_map + p)
                        .filter(|&i| above(i))
                        .max_by(|&a, &b| (self.v[a] - self.theta[a]).total_cmp(&(self.v[b] - self.theta[b])))
                })
                .collect()
        } else {
            (0..self.v.len()).filter(|&i| above(i)).collect()
        };
        let out = self.output.data_mut();
        out.iter_mut().for_each(|s| *s = 0.0);
        for &i in &winners {
            out[i] = 1.0;
            self.v[i] -= self.theta[i];
            self.theta[i] += cfg.adapt_delta;
            self.timing.last_post[i] = Some(t as u32);
        }
        self.post_spikes += winners.len() as u64;
        let (k, c) = (g.k, g.c);
        for (i, &s) in out.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let o = i / per_map;
            let y = (i % per_map) / g.wo;
            let x = i % g.wo;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = (y * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (x * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let pre_idx = (ci * g.h + iy as usize) * g.w + ix as usize;
                        if let Some(tp) = self.timing.last_pre[pre_idx] {
                            self.delta[((o * c + ci) * k + ky) * k + kx] += lut[t - tp as usize];
                        }
                    }
                }
            }
        }
    }

    /// Accumulated update averaged over sharing positions; clears the accumulator.
    fn take_delta(&mut self, g: &Geometry) -> Vec<f64> {
        let positions = (g.ho * g.wo) as f64;
        let d = self.delta.iter().map(|v| v / positions).collect();
        self.delta.iter_mut().for_each(|v| *v = 0.0);
        d
    }
}

struct SampleState {
    index: usize,
    units: Vec<UnitState>,
    error: Option<Error>,
}

/// The trainable layer: its plan steps (one per unroll) and geometry.
struct Target {
    layer: usize,
    steps: Vec<usize>,
    geometry: Geometry,
    has_skip: Vec<bool>,
}

impl Target {
    fn new(net: &Network, layer: usize) -> Result<Self> {
        let spec = net.spec();
        let l = &spec.layers[layer];
        if !l.neuron.is_spiking() {
            return Err(config_err!(
                "layer {} is not spiking and cannot be STDP-trained",
                l.name
            ));
        }
        if let Some(g) = spec.backres_groups.iter().find(|g| g.members.contains(&l.name)) {
            if g.members.len() > 1 {
                return Err(config_err!(
                    "STDP supports single-layer BackRes groups only; {} shares a group with {:?}",
                    l.name,
                    g.members
                ));
            }
        }
        let steps: Vec<usize> = (0..net.plan().steps.len())
            .filter(|&i| net.plan().steps[i].layer == layer)
            .collect();
        let geometry = Geometry::of(net, steps[0])?;
        let has_skip = steps
            .iter()
            .map(|&s| net.plan().steps[s].skips.iter().any(|k| k.mode == SkipMode::AddZeroPad))
            .collect();
        Ok(Target {
            layer,
            steps,
            geometry,
            has_skip,
        })
    }
}

/// Per-layer statistics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdpLayerReport {
    pub layer: String,
    pub epoch: usize,
    pub presentations: usize,
    pub updates: usize,
    pub post_spikes: u64,
    pub firing_rate: f64,
    /// Adapted threshold at the end of each presentation, averaged.
    pub mean_threshold: f64,
    pub dead: bool,
}

impl StdpLayerReport {
    pub fn updates_per_presentation(&self) -> f64 {
        self.updates as f64 / self.presentations.max(1) as f64
    }
}

struct BatchOutcome {
    updates: Vec<Vec<f64>>,
    post_spikes: u64,
    threshold_sum: f64,
    neurons: usize,
}

fn lag_table(cfg: &StdpConfig) -> Vec<f64> {
    (0..cfg.timesteps).map(|lag| stdp_delta(lag, 0, cfg)).collect()
}

fn sample_rng(cfg: &StdpConfig, epoch: usize, index: usize) -> Rng {
    Rng::new(cfg.seed).fork2(epoch as u64 + 1, index as u64)
}

/// One update per unroll step, in order, each the batch mean of the
/// per-sample position-averaged deltas. Returns the applied means.
fn apply_updates(units: &mut [&mut Vec<UnitState>], w: &mut Tensor, g: &Geometry, cfg: &StdpConfig) -> Vec<Vec<f64>> {
    let [lo, hi] = cfg.weight_bounds;
    let n_units = units.first().map_or(0, |u| u.len());
    let n = units.len() as f64;
    let mut applied = Vec::with_capacity(n_units);
    for m in 0..n_units {
        let mut mean = vec![0.0f64; g.weight_len()];
        for st in units.iter_mut() {
            for (a, d) in mean.iter_mut().zip(st[m].take_delta(g)) {
                *a += d;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        for (wv, d) in w.data_mut().iter_mut().zip(&mean) {
            *wv = (*wv as f64 + d).clamp(lo as f64, hi as f64) as f32;
        }
        applied.push(mean);
    }
    applied
}

fn draw_masks(rng: &mut Rng, units: usize, maps: usize, p: f64) -> Vec<Vec<bool>> {
    (0..units)
        .map(|_| (0..maps).map(|_| rng.bernoulli(p as f32)).collect())
        .collect()
}

/// Spike trains presented to one layer for one sample.
#[derive(Clone, Debug, Default)]
pub struct LayerTrains {
    /// Input spikes per time-step, shape `[C, H, W]`.
    pub pre: Vec<Tensor>,
    /// Extra input current per unroll step and time-step (e.g. skip
    /// contributions), shape of the layer output.
    pub residual: Option<Vec<Vec<Tensor>>>,
}

/// What one presentation did, per unroll step.
#[derive(Clone, Debug)]
pub struct Presentation {
    /// Position-averaged delta accumulated over the whole window.
    pub delta: Vec<Tensor>,
    /// Output spikes per unroll step and time-step.
    pub outputs: Vec<Vec<Tensor>>,
    pub post_spikes: Vec<u64>,
    /// Adapted thresholds at the end of the window.
    pub thresholds: Vec<Vec<f32>>,
}

/// A standalone spiking convolution driven by explicit spike trains. There
/// is one base threshold per unroll step; step m > 1 is fed by step m-1.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub thresholds: Vec<f32>,
}

impl ConvLayer {
    fn geometry(&self, input: &[usize]) -> Result<Geometry> {
        let ws = self.weights.shape();
        if ws.len() != 4 || input.len() != 3 || ws[1] != input[0] || ws[2] != ws[3] {
            return Err(config_err!("weights {:?} do not fit input {:?}", ws, input));
        }
        if self.thresholds.is_empty() {
            return Err(config_err!("a layer needs at least one threshold"));
        }
        let out = |n: usize| crate::kernels::window_out(n, ws[2], self.stride, self.padding);
        let (Some(ho), Some(wo)) = (out(input[1]), out(input[2])) else {
            return Err(config_err!("kernel {} does not fit input {:?}", ws[2], input));
        };
        Ok(Geometry {
            c: input[0],
            h: input[1],
            w: input[2],
            o: ws[0],
            ho,
            wo,
            k: ws[2],
            stride: self.stride,
            pad: self.padding,
        })
    }

    fn units(&self, g: &Geometry, masks: Vec<Vec<bool>>) -> Vec<UnitState> {
        self.thresholds
            .iter()
            .zip(masks)
            .map(|(&th, d)| UnitState::new(g, th, d))
            .collect()
    }

    fn advance(
        &self,
        units: &mut [UnitState],
        trains: &LayerTrains,
        t: usize,
        g: &Geometry,
        cfg: &StdpConfig,
        lut: &[f64],
    ) -> Result<()> {
        for m in 0..units.len() {
            let pre = if m == 0 {
                trains.pre[t].clone()
            } else {
                units[m - 1].output.clone()
            };
            let mut cur = conv2d_forward(&pre, &self.weights, self.stride, self.padding)?;
            if let Some(r) = trains.residual.as_ref() {
                cur.add_assign(&r[m][t])?;
            }
            units[m].step(t, &pre, &cur, g, cfg, lut);
        }
        Ok(())
    }

    fn check(&self, trains: &LayerTrains, cfg: &StdpConfig) -> Result<Geometry> {
        if trains.pre.len() != cfg.timesteps {
            return Err(config_err!(
                "expected {} time-steps of input, got {}",
                cfg.timesteps,
                trains.pre.len()
            ));
        }
        let g = self.geometry(trains.pre[0].shape())?;
        if let Some(r) = &trains.residual {
            if r.len() != self.thresholds.len() || r.iter().any(|x| x.len() != cfg.timesteps) {
                return Err(config_err!(
                    "residual currents must cover every unroll step and time-step"
                ));
            }
        }
        Ok(g)
    }

    /// Simulates one window without touching the weights.
    pub fn present(&self, trains: &LayerTrains, cfg: &StdpConfig, rng: &mut Rng) -> Result<Presentation> {
        cfg.validate()?;
        let g = self.check(trains, cfg)?;
        let lut = lag_table(cfg);
        let mut units = self.units(&g, draw_masks(rng, self.thresholds.len(), g.o, cfg.dropout_p));
        let mut outputs = vec![Vec::with_capacity(cfg.timesteps); units.len()];
        for t in 0..cfg.timesteps {
            self.advance(&mut units, trains, t, &g, cfg, &lut)?;
            for (o, u) in outputs.iter_mut().zip(&units) {
                o.push(u.output.clone());
            }
        }
        let ws = self.weights.shape().to_vec();
        Ok(Presentation {
            delta: units
                .iter_mut()
                .map(|u| Tensor::from_vec(&ws, u.take_delta(&g).into_iter().map(|v| v as f32).collect()))
                .collect::<Result<_>>()?,
            outputs,
            post_spikes: units.iter().map(|u| u.post_spikes).collect(),
            thresholds: units.into_iter().map(|u| u.theta).collect(),
        })
    }

    /// Trains on one batch (one train per sample); returns the `k * n`
    /// updates applied, in order. `rngs` supplies one dropout stream per sample.
    pub fn train_batch(&mut self, batch: &[LayerTrains], cfg: &StdpConfig, rngs: &mut [Rng]) -> Result<Vec<Tensor>> {
        cfg.validate()?;
        if batch.is_empty() || rngs.len() != batch.len() {
            return Err(config_err!("need a non-empty batch with one rng per sample"));
        }
        let g = self.check(&batch[0], cfg)?;
        for b in batch {
            self.check(b, cfg)?;
        }
        let lut = lag_table(cfg);
        let mut states: Vec<Vec<UnitState>> = rngs
            .iter_mut()
            .map(|r| self.units(&g, draw_masks(r, self.thresholds.len(), g.o, cfg.dropout_p)))
            .collect();
        let k = cfg.updates_per_presentation;
        let mut applied = Vec::new();
        let ws = self.weights.shape().to_vec();
        for seg in 0..k {
            for t in seg * cfg.timesteps / k..(seg + 1) * cfg.timesteps / k {
                for (units, trains) in states.iter_mut().zip(batch) {
                    self.advance(units, trains, t, &g, cfg, &lut)?;
                }
            }
            let mut refs: Vec<&mut Vec<UnitState>> = states.iter_mut().collect();
            for u in apply_updates(&mut refs, &mut self.weights, &g, cfg) {
                applied.push(Tensor::from_vec(&ws, u.into_iter().map(|v| v as f32).collect())?);
            }
        }
        Ok(applied)
    }
}

fn run_batch(
    net: &mut Network,
    target: &Target,
    ds: &Dataset,
    batch: &[usize],
    cfg: &StdpConfig,
    epoch: usize,
    lut: &[f64],
    theta: &mut [Vec<f32>],
) -> Result<BatchOutcome> {
    let g = target.geometry;
    let sim = cfg.sim();
    let th = &net.thresholds[target.layer];
    let mut states: Vec<SampleState> = batch
        .iter()
        .map(|&index| {
            let masks = draw_masks(&mut sample_rng(cfg, epoch, index).fork(1), th.len(), g.o, cfg.dropout_p);
            let units = th
                .iter()
                .zip(theta.iter())
                .zip(masks)
                .map(|((&base, start), d)| UnitState::starting_at(&g, base, start.clone(), d))
                .collect();
            SampleState {
                index,
                units,
                error: None,
            }
        })
        .collect();
    let k = cfg.updates_per_presentation;
    let mut outcome = BatchOutcome {
        updates: Vec::new(),
        post_spikes: 0,
        threshold_sum: 0.0,
        neurons: 0,
    };
    let last = *target.steps.last().expect("layer has a plan step");
    for seg in 0..k {
        let (t0, t1) = (seg * cfg.timesteps / k, (seg + 1) * cfg.timesteps / k);
        let net_ref = &*net;
        let w = net_ref.weights[target.layer].as_ref().expect("conv has weights");
        states.par_iter_mut().try_for_each(|st| -> Result<()> {
            let image = ds.image(st.index);
            let mut engine_rng = sample_rng(cfg, epoch, st.index).fork(0);
            let units = &mut st.units;
            let error = &mut st.error;
            let mut obs = |e: &StepEvent<'_>| {
                if error.is_some() || e.time < t0 || e.time >= t1 {
                    return;
                }
                let Some(m) = target.steps.iter().position(|&s| s == e.step) else {
                    return;
                };
                let (lo, hi) = units.split_at_mut(m);
                let unit = &mut hi[0];
                if m == 0 {
                    unit.step(e.time, e.input, e.current, &g, cfg, lut);
                    return;
                }
                let pre = lo[m - 1].output.clone();
                let stride = g.stride;
                let r = (|| -> Result<Tensor> {
                    let mut cur = conv2d_forward(&pre, w, stride, g.pad)?;
                    if target.has_skip[m] {
                        let own = conv2d_forward(e.input, w, stride, g.pad)?;
                        for ((c, &full), &o) in cur.data_mut().iter_mut().zip(e.current.data()).zip(own.data()) {
                            *c += full - o;
                        }
                    }
                    Ok(cur)
                })();
                match r {
                    Ok(cur) => unit.step(e.time, &pre, &cur, &g, cfg, lut),
                    Err(err) => *error = Some(err),
                }
            };
            net_ref.run(
                &image,
                &sim,
                &mut engine_rng,
                RunOptions {
                    stop_after: Some(last),
                    observer: Some(&mut obs),
                    ..Default::default()
                },
            )?;
            match st.error.take() {
                Some(e) => Err(e),
                None => Ok(()),
            }
        })?;
        let w = net.weights[target.layer].as_mut().expect("conv has weights");
        let mut units: Vec<&mut Vec<UnitState>> = states.iter_mut().map(|s| &mut s.units).collect();
        outcome.updates.extend(apply_updates(&mut units, w, &g, cfg));
    }
    // thresholds carry over to the next batch as the batch mean
    for (m, th) in theta.iter_mut().enumerate() {
        th.iter_mut().for_each(|v| *v = 0.0);
        for st in &states {
            for (a, &v) in th.iter_mut().zip(&st.units[m].theta) {
                *a += v / states.len() as f32;
            }
        }
    }
    for st in &states {
        for u in &st.units {
            outcome.post_spikes += u.post_spikes;
            outcome.threshold_sum += u.theta.iter().map(|&v| v as f64).sum::<f64>();
            outcome.neurons += u.theta.len();
        }
    }
    Ok(outcome)
}

/// Spiking convolutions in execution order: the layers STDP trains.
pub fn trainable_layers(net: &Network) -> Vec<String> {
    let spec = net.spec();
    let mut seen = Vec::new();
    for s in &net.plan().steps {
        let l = &spec.layers[s.layer];
        if l.neuron.is_spiking() && matches!(l.kind, LayerKind::Conv { .. }) && !seen.contains(&l.name) {
            seen.push(l.name.clone());
        }
    }
    seen
}

/// Trains one layer for one batch; returns the per-unroll updates applied,
/// `k * n` of them, in order.
pub fn train_batch(
    net: &mut Network,
    layer: &str,
    ds: &Dataset,
    batch: &[usize],
    cfg: &StdpConfig,
    epoch: usize,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let idx = net
        .spec()
        .layer_index(layer)
        .ok_or_else(|| config_err!("unknown layer {layer}"))?;
    let target = Target::new(net, idx)?;
    let shape = net.weights[idx].as_ref().expect("conv has weights").shape().to_vec();
    let mut theta = fresh_thresholds(net, &target);
    let out = run_batch(net, &target, ds, batch, cfg, epoch, &lag_table(cfg), &mut theta)?;
    out.updates
        .into_iter()
        .map(|u| Tensor::from_vec(&shape, u.into_iter().map(|v| v as f32).collect()))
        .collect()
}

/// Folds every weight of the trained layers into the bounds (by magnitude),
/// so a signed initialisation becomes a valid excitatory one.
pub fn init_weights(net: &mut Network, cfg: &StdpConfig) {
    let [lo, hi] = cfg.weight_bounds;
    for name in trainable_layers(net) {
        let i = net.spec().layer_index(&name).expect("layer exists");
        if let Some(w) = net.weights[i].as_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = v.abs().clamp(lo, hi));
        }
    }
}

/// Layerwise STDP over every spiking convolution, upstream layers frozen.
/// Adapted thresholds persist across presentations; when a layer is done,
/// its thresholds become the mean adapted value per unroll step.
pub fn train(net: &mut Network, ds: &Dataset, cfg: &StdpConfig) -> Result<Vec<StdpLayerReport>> {
    train_with(net, ds, cfg, |_| Ok(()))
}

pub fn train_with(
    net: &mut Network,
    ds: &Dataset,
    cfg: &StdpConfig,
    mut on_epoch: impl FnMut(&StdpLayerReport) -> Result<()>,
) -> Result<Vec<StdpLayerReport>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let lut = lag_table(cfg);
    let mut reports = Vec::new();
    for name in trainable_layers(net) {
        let idx = net.spec().layer_index(&name).expect("layer exists");
        let target = Target::new(net, idx)?;
        let mut theta = fresh_thresholds(net, &target);
        for epoch in 0..cfg.epochs {
            let order = Rng::new(cfg.seed).fork(epoch as u64).permutation(ds.len());
            let mut rep = StdpLayerReport {
                layer: name.clone(),
                epoch,
                presentations: 0,
                updates: 0,
                post_spikes: 0,
                firing_rate: 0.0,
                mean_threshold: 0.0,
                dead: false,
            };
            let mut neurons = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let out = run_batch(net, &target, ds, batch, cfg, epoch, &lut, &mut theta)?;
                rep.presentations += 1;
                rep.updates += out.updates.len();
                rep.post_spikes += out.post_spikes;
                rep.mean_threshold += out.threshold_sum;
                neurons += out.neurons;
            }
            rep.mean_threshold /= neurons.max(1) as f64;
            rep.firing_rate = rep.post_spikes as f64 / (neurons.max(1) * cfg.timesteps) as f64;
            rep.dead = rep.post_spikes == 0;
            if rep.dead {
                warn!("layer {name} emitted no spikes during STDP epoch {epoch}; its weights only drift");
            }
            on_epoch(&rep)?;
            reports.push(rep);
        }
        // inference uses the layer-mean adapted threshold of each unroll step
        for (slot, th) in net.thresholds[idx].iter_mut().zip(&theta) {
            *slot = th.iter().sum::<f32>() / th.len() as f32;
        }
        if let Some(rate) = cfg.inference_rate {
            calibrate_rate(net, idx, ds, cfg, rate)?;
        }
    }
    Ok(reports)
}

const RATE_SAMPLES: usize = 64;

fn layer_rate(net: &Network, step: usize, ds: &Dataset, sim: &SimConfig, seed: u64) -> Result<f64> {
    let master = Rng::new(seed ^ 0x5A7E);
    let n = ds.len().min(RATE_SAMPLES);
    let counts: Vec<Result<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut spikes, mut size) = (0.0f64, 0usize);
            let mut obs = |e: &StepEvent<'_>| {
                if e.step == step {
                    spikes += e.output.sum() as f64;
                    size = e.output.len();
                }
            };
            net.run(
                &ds.image(i),
                sim,
                &mut master.fork(i as u64),
                RunOptions {
                    stop_after: Some(step),
                    observer: Some(&mut obs),
                    ..Default::default()
                },
            )?;
            Ok((spikes, size))
        })
        .collect();
    let (mut spikes, mut slots) = (0.0, 0usize);
    for c in counts {
        let (s, z) = c?;
        spikes += s;
        slots += z * sim.timesteps;
    }
    Ok(spikes / slots.max(1) as f64)
}

/// Geometric bisection on each unroll threshold of layer `idx` until the
/// layer's mean firing rate is close to `rate`.
fn calibrate_rate(net: &mut Network, idx: usize, ds: &Dataset, cfg: &StdpConfig, rate: f64) -> Result<()> {
    let sim = cfg.sim();
    let steps: Vec<(usize, usize)> = (0..net.plan().steps.len())
        .filter(|&j| net.plan().steps[j].layer == idx)
        .map(|j| (j, net.plan().steps[j].unroll_index - 1))
        .collect();
    for (j, u) in steps {
        let eval = |net: &mut Network, th: f32| -> Result<f64> {
            net.thresholds[idx][u] = th;
            layer_rate(net, j, ds, &sim, cfg.seed)
        };
        let start = net.thresholds[idx][u];
        let (mut lo, mut hi) = (start, start);
        let mut tries = 0;
        while eval(net, hi)? > rate && tries < 40 {
            lo = hi;
            hi *= 2.0;
            tries += 1;
        }
        while eval(net, lo)? < rate && tries < 40 {
            hi = lo;
            lo *= 0.5;
            tries += 1;
        }
        for _ in 0..12 {
            let mid = (lo * hi).sqrt();
            if eval(net, mid)? > rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        net.thresholds[idx][u] = (lo * hi).sqrt();
    }
    Ok(())
}

fn fresh_thresholds(net: &Network, target: &Target) -> Vec<Vec<f32>> {
    let g = &target.geometry;
    net.thresholds[target.layer]
        .iter()
        .map(|&b| vec![b; g.o * g.ho * g.wo])
        .collect()
}

// ---- classifier --------------------------------------------------------------

fn first_suffix_step(net: &Network) -> Result<usize> {
    (0..net.plan().steps.len())
        .find(|&i| net.segment(i) == Segment::Suffix)
        .ok_or_else(|| config_err!("network {} has no layers after its spiking stage", net.spec().name))
}

/// Spike-rate features (accumulated counts / T) fed to the first layer after
/// the spiking stage, one flat tensor per sample.
pub fn spike_features(net: &Network, ds: &Dataset, sim: &SimConfig, seed: u64) -> Result<Vec<Tensor>> {
    let first = first_suffix_step(net)?;
    let master = Rng::new(seed);
    let t = sim.timesteps as f32;
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut feat = None;
            let mut obs = |e: &StepEvent<'_>| {
                if e.step == first {
                    feat = Some(e.input.clone());
                }
            };
            net.run(
                &ds.image(i),
                sim,
                &mut master.fork(i as u64),
                RunOptions {
                    stop_after: Some(first),
                    observer: Some(&mut obs),
                    ..Default::default()
                },
            )?;
            let mut f = feat.ok_or_else(|| Error::Internal("feature step was not evaluated".into()))?;
            f.scale(1.0 / t);
            let len = f.len();
            f.reshape(&[len])
        })
        .collect()
}

/// The layers after the spiking stage as a standalone topology over the flat
/// feature vector. Only plain fully-connected stacks qualify.
pub fn suffix_classifier_spec(net: &Network) -> Result<TopologySpec> {
    let first = first_suffix_step(net)?;
    let spec = net.spec();
    let plan = net.plan();
    let mut layers: Vec<LayerSpec> = Vec::new();
    for (i, s) in plan.steps.iter().enumerate().skip(first) {
        let l = &spec.layers[s.layer];
        if !matches!(l.kind, LayerKind::Fc { .. }) || (i > first && !s.skips.is_empty()) {
            return Err(config_err!(
                "layers after the spiking stage of {} are not a plain FC stack; supply a classifier topology",
                spec.name
            ));
        }
        layers.push(l.clone());
    }
    // the first FC's declared width already includes concatenated skips
    let LayerKind::Fc { inputs, .. } = layers[0].kind else {
        unreachable!()
    };
    Ok(TopologySpec {
        name: format!("{}-classifier", spec.name),
        input_shape: [inputs, 1, 1],
        layers,
        backres_groups: Vec::new(),
        skips: Vec::new(),
        classifier: spec.classifier,
    })
}

/// Backprop training of `classifier` on the frozen features of `features`.
/// The classifier input shape must hold exactly the feature vector.
pub fn fit_classifier(
    features: &Network,
    classifier: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    sim: &SimConfig,
    cfg: &AgdConfig,
) -> Result<Vec<EpochMetrics>> {
    if classifier.has_spiking() {
        return Err(config_err!("the classifier must be non-spiking"));
    }
    let shape = classifier.spec().input_shape;
    let to_ds = |ds: &Dataset, seed: u64| -> Result<Dataset> {
        let f = spike_features(features, ds, sim, seed)?;
        let want: usize = shape.iter().product();
        if let Some(x) = f.first() {
            if x.len() != want {
                return Err(config_err!(
                    "classifier {} expects {} inputs {:?} but the features have {}",
                    classifier.spec().name,
                    want,
                    shape,
                    x.len()
                ));
            }
        }
        let imgs: Vec<Tensor> = f.into_iter().map(|t| t.reshape(&shape)).collect::<Result<_>>()?;
        Dataset::new(Tensor::stack(&imgs)?, ds.labels.clone(), ds.classes)
    };
    let tr = to_ds(train, cfg.seed)?;
    let te = test.map(|t| to_ds(t, cfg.seed ^ 0x7E57)).transpose()?;
    agd::train(classifier, &tr, te.as_ref(), cfg)
}

/// Copies a classifier built by [`suffix_classifier_spec`] back into the
/// network. It was trained on rates, the network feeds counts, so the first
/// layer is scaled by 1/T (exact: no biases, ReLU is positively homogeneous).
pub fn install_classifier(net: &mut Network, classifier: &Network, timesteps: usize) -> Result<()> {
    let first = first_suffix_step(net)?;
    let layers: Vec<usize> = net.plan().steps[first..].iter().map(|s| s.layer).collect();
    if layers.len() != classifier.spec().layers.len() {
        return Err(config_err!("classifier does not match the network's FC stack"));
    }
    for (k, &l) in layers.iter().enumerate() {
        let mut w = classifier.weights[k]
            .clone()
            .ok_or_else(|| config_err!("classifier layer {k} has no weights"))?;
        let want = net.weights[l].as_ref().map(|t| t.shape().to_vec());
        if want.as_deref() != Some(w.shape()) {
            return Err(config_err!(
                "classifier layer {} shape mismatch",
                classifier.spec().layers[k].name
            ));
        }
        if k == 0 {
            w.scale(1.0 / timesteps as f32);
        }
        net.weights[l] = Some(w);
    }
    net.stochmax = classifier.stochmax.clone();
    if layers.len() == 1 {
        if let Some(p) = net.stochmax.as_mut() {
            // the head input is now counts rather than rates
            p.w_psi.scale(1.0 / timesteps as f32);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_limits() {
        let c = StdpConfig {
            eta: 0.01,
            tau: 5.0,
            offset: 0.4,
            ..StdpConfig::default()
        };
        assert!((stdp_delta(3, 3, &c) - 0.006).abs() < 1e-15);
        assert!((stdp_delta(5, 0, &c) - 0.01 * ((-1.0f64).exp() - 0.4)).abs() < 1e-15);
        assert!((stdp_delta(10_000, 0, &c) + 0.004).abs() < 1e-12);
        assert_eq!(stdp_delta(0, 4, &c), 0.0);
    }

    #[test]
    fn config_checks() {
        assert!(StdpConfig::default().validate().is_ok());
        let bad = |f: fn(&mut StdpConfig)| {
            let mut c = StdpConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.eta = 0.0));
        assert!(bad(|c| c.offset = 1.0));
        assert!(bad(|c| c.tau = 0.0));
        assert!(bad(|c| c.weight_bounds = [1.0, 1.0]));
        assert!(bad(|c| c.updates_per_presentation = 0));
    }
}
