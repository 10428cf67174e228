//! Network state and the time-stepped simulator.
//!
//! The unrolled plan is split into three segments:
//!
//! * prefix — analog (ReLU / linear / pool) steps before the first spiking
//!   layer, evaluated once per sample;
//! * middle — first to last spiking step (plus trailing pools), simulated for
//!   `T` time-steps;
//! * suffix — analog steps after the middle, evaluated once on the spike
//!   counts the middle accumulated. The classifier head lives here.
//!
//! A network without spiking layers is all prefix. The network input belongs to
//! the middle (Poisson-encoded every step) when the prefix is empty and to the
//! prefix (raw values) otherwise.

use crate::encoding::PoissonEncoder;
use crate::error::{config_err, Error, Result};
use crate::heads::{stochmax_predict, StochmaxGrads, StochmaxParams};
use crate::kernels::{
    avgpool_backward, avgpool_forward, conv2d_backward_input, conv2d_backward_weights, conv2d_forward, fc_backward,
    fc_forward, relu, relu_backward,
};
use crate::neuron::{lif_integrate, surrogate_scalar, ResetMode, DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::topology::{
    ClassifierKind, ExecutionPlan, LayerKind, NeuronKind, PlanStep, SkipMode, SourceRef, TopologySpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Prefix,
    Middle,
    Suffix,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub timesteps: usize,
    /// Leak of LIF layers (IF layers always use 1).
    pub alpha: f32,
    /// Surrogate damping; only read by the backward pass.
    pub gamma: f32,
    pub reset: ResetMode,
    /// Per-step firing probability of a full-intensity input pixel.
    pub rate_factor: f32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            timesteps: 25,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            reset: ResetMode::Subtract,
            rate_factor: 1.0,
        }
    }
}

impl SimConfig {
    pub fn with_timesteps(mut self, t: usize) -> Self {
        self.timesteps = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(config_err!("timesteps must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config_err!("leak alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(self.gamma >= 0.0) {
            return Err(config_err!("surrogate gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.rate_factor) {
            return Err(config_err!("rate factor must be in [0, 1], got {}", self.rate_factor));
        }
        Ok(())
    }
}

/// Values saved by the forward pass for one step invocation.
#[derive(Clone, Debug)]
pub struct TapeNode {
    pub step: usize,
    pub layer: usize,
    pub unroll_index: usize,
    /// `None` for steps evaluated once (prefix / suffix).
    pub time: Option<usize>,
    /// Operand of the weighted op (fully-connected inputs include concatenated skips).
    pub input: Tensor,
    /// ReLU pre-activation, or the membrane potential before reset for spiking steps.
    pub pre_activation: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Tape {
    timesteps: usize,
    once: Vec<Option<TapeNode>>,
    middle: Vec<Vec<Option<TapeNode>>>,
}

impl Tape {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TapeNode> {
        self.once
            .iter()
            .chain(self.middle.iter().flatten())
            .filter_map(|n| n.as_ref())
    }
}

/// Input / output activity of one plan step, summed over evaluations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepActivity {
    /// Sum over evaluations of the fraction of nonzero input elements.
    pub input_active: f64,
    pub input_active_peak: f64,
    pub output_spikes: f64,
    pub output_len: usize,
    pub evaluations: usize,
}

impl StepActivity {
    /// Mean fraction of active inputs per evaluation (S_A).
    pub fn spiking_activity(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.input_active / self.evaluations as f64
        }
    }

    /// Mean spikes per output neuron per evaluation.
    pub fn firing_rate(&self) -> f64 {
        if self.evaluations == 0 || self.output_len == 0 {
            0.0
        } else {
            self.output_spikes / (self.evaluations * self.output_len) as f64
        }
    }

    fn record(&mut self, input: &Tensor, output: Option<&Tensor>) {
        let frac = if input.is_empty() {
            0.0
        } else {
            input.count_nonzero() as f64 / input.len() as f64
        };
        self.input_active += frac;
        self.input_active_peak = self.input_active_peak.max(frac);
        if let Some(o) = output {
            self.output_spikes += o.sum() as f64;
            self.output_len = o.len();
        }
        self.evaluations += 1;
    }

    pub fn merge(&mut self, other: &StepActivity) {
        self.input_active += other.input_active;
        self.input_active_peak = self.input_active_peak.max(other.input_active_peak);
        self.output_spikes += other.output_spikes;
        self.output_len = self.output_len.max(other.output_len);
        self.evaluations += other.evaluations;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Activity {
    pub steps: Vec<StepActivity>,
}

impl Activity {
    pub fn new(steps: usize) -> Self {
        Activity {
            steps: vec![StepActivity::default(); steps],
        }
    }

    pub fn merge(&mut self, other: &Activity) {
        if self.steps.len() < other.steps.len() {
            self.steps.resize(other.steps.len(), StepActivity::default());
        }
        for (a, b) in self.steps.iter_mut().zip(&other.steps) {
            a.merge(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Operand of the head layer: time-summed counts (plus concatenated skips).
    pub head_input: Tensor,
    pub activity: Activity,
}

/// What the simulator reports to an observer after every step evaluation.
pub struct StepEvent<'a> {
    pub step: usize,
    /// Time index; 0 for once-evaluated steps.
    pub time: usize,
    pub input: &'a Tensor,
    /// Weighted input current (pre-activation) before the neuron model.
    pub current: &'a Tensor,
    pub output: &'a Tensor,
}

pub type Observer<'a> = &'a mut dyn FnMut(&StepEvent<'_>);

#[derive(Default)]
pub struct RunOptions<'a> {
    pub record_tape: bool,
    /// Time-steps at which to evaluate the suffix; defaults to `[T]`.
    pub checkpoints: Vec<usize>,
    /// Stop after this plan step (no logits are produced).
    pub stop_after: Option<usize>,
    pub observer: Option<Observer<'a>>,
}

pub struct RunResult {
    /// One entry per checkpoint.
    pub logits: Vec<Tensor>,
    pub head_inputs: Vec<Tensor>,
    pub activity: Activity,
    pub tape: Option<Tape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Option<Tensor>>,
    pub stochmax: Option<StochmaxGrads>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Gradients {
            weights: net
                .weights
                .iter()
                .map(|w| w.as_ref().map(|w| Tensor::zeros(w.shape())))
                .collect(),
            stochmax: net.stochmax.as_ref().map(|p| StochmaxGrads {
                w_psi: Tensor::zeros(p.w_psi.shape()),
                b_psi: Tensor::zeros(p.b_psi.shape()),
            }),
        }
    }

    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, None) => {}
                _ => return Err(Error::Internal("gradient layout mismatch".into())),
            }
        }
        match (self.stochmax.as_mut(), &other.stochmax) {
            (Some(a), Some(b)) => {
                a.w_psi.add_assign(&b.w_psi)?;
                a.b_psi.add_assign(&b.b_psi)?;
            }
            (None, None) => {}
            _ => return Err(Error::Internal("gradient layout mismatch".into())),
        }
        Ok(())
    }

    pub fn scale(&mut self, f: f32) {
        for w in self.weights.iter_mut().flatten() {
            w.scale(f);
        }
        if let Some(s) = self.stochmax.as_mut() {
            s.w_psi.scale(f);
            s.b_psi.scale(f);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.all_finite())
            && self
                .stochmax
                .as_ref()
                .is_none_or(|s| s.w_psi.all_finite() && s.b_psi.all_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: TopologySpec,
    plan: ExecutionPlan,
    segments: Vec<Segment>,
    input_segment: Segment,
    spike_fed: Vec<bool>,
    /// Per topology layer; `None` for pooling layers. BackRes copies share one entry.
    pub weights: Vec<Option<Tensor>>,
    /// Per topology layer, one threshold per unroll index (empty for pools).
    pub thresholds: Vec<Vec<f32>>,
    pub stochmax: Option<StochmaxParams>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Once,
    Middle,
}

enum Target {
    Input,
    Step(usize),
}

impl Network {
    /// Uniform `±sqrt(1 / fan_in)` weights, thresholds 1.
    pub fn new(spec: TopologySpec, rng: &mut Rng) -> Result<Self> {
        let mut net = Network::zeroed(spec)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            if let Some(w) = w {
                let bound = (1.0 / net.spec.layers[l].kind.fan_in() as f32).sqrt();
                for v in w.data_mut() {
                    *v = rng.uniform_range(-bound, bound);
                }
            }
        }
        if let Some(p) = net.stochmax.as_mut() {
            *p = StochmaxParams::init(p.classes(), p.w_psi.shape()[1], rng);
        }
        Ok(net)
    }

    /// All-zero weights, thresholds 1.
    pub fn zeroed(spec: TopologySpec) -> Result<Self> {
        spec.validate()?;
        let plan = spec.unroll()?;
        let (segments, input_segment) = analyse_segments(&spec, &plan)?;
        let spike_fed = (0..plan.steps.len())
            .map(|i| segments[i] == Segment::Suffix && i > 0 && segments[i - 1] == Segment::Middle)
            .collect();
        let weights = spec
            .layers
            .iter()
            .map(|l| l.kind.weight_shape().map(|s| Tensor::zeros(&s)))
            .collect();
        let thresholds = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.kind.is_weighted() {
                    vec![1.0; spec.unroll_count(i)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let stochmax = match spec.classifier {
            ClassifierKind::Softmax => None,
            ClassifierKind::Stochmax => {
                let last = plan.steps.last().ok_or_else(|| config_err!("empty topology"))?;
                let LayerKind::Fc { inputs, outputs } = spec.layers[last.layer].kind else {
                    return Err(config_err!("the last layer must be fully connected"));
                };
                Some(StochmaxParams::new(outputs, inputs, 0.0))
            }
        };
        Ok(Network {
            spec,
            plan,
            segments,
            input_segment,
            spike_fed,
            weights,
            thresholds,
            stochmax,
        })
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn plan(&self) -> &ExecutionPlan {
        &self.plan
    }

    pub fn segment(&self, step: usize) -> Segment {
        self.segments[step]
    }

    pub fn input_segment(&self) -> Segment {
        self.input_segment
    }

    /// Analog step whose operand is the spiking block's output. Its activity
    /// is recorded per time-step on the spikes rather than once on the counts.
    pub fn is_spike_fed(&self, step: usize) -> bool {
        self.spike_fed[step]
    }

    pub fn has_spiking(&self) -> bool {
        self.segments.contains(&Segment::Middle)
    }

    pub fn classes(&self) -> usize {
        *self
            .plan
            .steps
            .last()
            .expect("validated")
            .output_shape
            .first()
            .unwrap_or(&0)
    }

    fn steps_in(&self, seg: Segment) -> impl DoubleEndedIterator<Item = usize> + '_ {
        (0..self.plan.steps.len()).filter(move |&i| self.segments[i] == seg)
    }

    fn step_neuron(&self, i: usize) -> NeuronKind {
        self.spec.layers[self.plan.steps[i].layer].neuron
    }

    fn step_threshold(&self, i: usize) -> f32 {
        let s = &self.plan.steps[i];
        self.thresholds[s.layer][s.unroll_index - 1]
    }

    fn step_alpha(&self, i: usize, cfg: &SimConfig) -> f32 {
        if self.step_neuron(i) == NeuronKind::If {
            1.0
        } else {
            cfg.alpha
        }
    }

    fn describe(&self, i: usize) -> String {
        let s = &self.plan.steps[i];
        let name = &self.spec.layers[s.layer].name;
        if self.spec.unroll_count(s.layer) > 1 {
            format!("{name} (unroll {})", s.unroll_index)
        } else {
            name.clone()
        }
    }

    pub fn check_thresholds(&self) -> Result<()> {
        for (l, th) in self.thresholds.iter().enumerate() {
            if th.len()
                != if self.spec.layers[l].kind.is_weighted() {
                    self.spec.unroll_count(l)
                } else {
                    0
                }
            {
                return Err(config_err!(
                    "layer {}: wrong number of thresholds",
                    self.spec.layers[l].name
                ));
            }
            if th.iter().any(|&t| t.is_nan() || t <= 0.0) {
                return Err(config_err!(
                    "layer {}: thresholds must be positive",
                    self.spec.layers[l].name
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, cfg: &SimConfig, rng: &mut Rng) -> Result<ForwardOutput> {
        let mut r = self.run(input, cfg, rng, RunOptions::default())?;
        Ok(ForwardOutput {
            logits: r.logits.pop().expect("one checkpoint"),
            head_input: r.head_inputs.pop().expect("one checkpoint"),
            activity: r.activity,
        })
    }

    pub fn forward_with_tape(&self, input: &Tensor, cfg: &SimConfig, rng: &mut Rng) -> Result<(ForwardOutput, Tape)> {
        let mut r = self.run(
            input,
            cfg,
            rng,
            RunOptions {
                record_tape: true,
                ..Default::default()
            },
        )?;
        Ok((
            ForwardOutput {
                logits: r.logits.pop().expect("one checkpoint"),
                head_input: r.head_inputs.pop().expect("one checkpoint"),
                activity: r.activity,
            },
            r.tape.expect("recorded"),
        ))
    }

    /// Predicted class; stochmax heads use the inference-mode rule.
    pub fn predict_from(&self, out: &ForwardOutput) -> Result<usize> {
        match &self.stochmax {
            Some(p) => stochmax_predict(&out.logits, &out.head_input, p),
            None => Ok(out.logits.argmax()),
        }
    }

    pub fn predict(&self, input: &Tensor, cfg: &SimConfig, rng: &mut Rng) -> Result<usize> {
        let out = self.forward(input, cfg, rng)?;
        self.predict_from(&out)
    }

    pub fn run(&self, input: &Tensor, cfg: &SimConfig, rng: &mut Rng, mut opts: RunOptions<'_>) -> Result<RunResult> {
        cfg.validate()?;
        self.check_thresholds()?;
        if input.shape() != self.spec.input_shape {
            return Err(Error::Input(format!(
                "input shape {:?} does not match topology input {:?}",
                input.shape(),
                self.spec.input_shape
            )));
        }
        let n = self.plan.steps.len();
        let timesteps = if self.has_spiking() { cfg.timesteps } else { 1 };
        let mut checkpoints = if opts.checkpoints.is_empty() {
            vec![timesteps]
        } else {
            opts.checkpoints.clone()
        };
        checkpoints.sort_unstable();
        checkpoints.dedup();
        if !self.has_spiking() {
            checkpoints = vec![1; opts.checkpoints.len().max(1)];
        } else if checkpoints[0] == 0 || *checkpoints.last().unwrap() > timesteps {
            return Err(config_err!("checkpoints must lie in 1..={}", timesteps));
        }
        if opts.record_tape && checkpoints != [timesteps] {
            return Err(config_err!("a tape can only be recorded for a single full-length run"));
        }

        let mut activity = Activity::new(n);
        let mut tape = opts.record_tape.then(|| Tape {
            timesteps,
            once: vec![None; n],
            middle: Vec::new(),
        });
        let mut vals: Vec<Option<Tensor>> = vec![None; n];
        let mut out = RunResult {
            logits: Vec::new(),
            head_inputs: Vec::new(),
            activity: Activity::default(),
            tape: None,
        };
        let stop = opts.stop_after;

        // prefix
        for i in self.steps_in(Segment::Prefix) {
            let node = self.eval_step(
                i,
                None,
                &vals,
                input,
                cfg,
                None,
                &mut activity.steps[i],
                &mut opts.observer,
            )?;
            vals[i] = Some(node.0);
            if let (Some(t), Some(n)) = (tape.as_mut(), node.1) {
                t.once[i] = Some(n);
            }
            if stop == Some(i) {
                out.activity = activity;
                return Ok(out);
            }
        }

        if !self.has_spiking() {
            let logits = vals[n - 1].clone().expect("head evaluated");
            let head_input = self.gather_input(n - 1, &vals, input)?;
            for _ in &checkpoints {
                out.logits.push(logits.clone());
                out.head_inputs.push(head_input.clone());
            }
            out.activity = activity;
            out.tape = tape;
            return Ok(out);
        }

        // middle
        let middle: Vec<usize> = self.steps_in(Segment::Middle).collect();
        let encoder = PoissonEncoder::new(cfg.rate_factor)?;
        if self.input_segment == Segment::Middle {
            PoissonEncoder::check(input)?;
        }
        let mut v_mem: Vec<Option<Tensor>> = (0..n)
            .map(|i| {
                (self.segments[i] == Segment::Middle && self.step_neuron(i).is_spiking())
                    .then(|| Tensor::zeros(&self.plan.steps[i].output_shape))
            })
            .collect();
        let needed = self.accumulated_steps();
        let mut acc: Vec<Option<Tensor>> = (0..n)
            .map(|i| needed[i].then(|| Tensor::zeros(&self.plan.steps[i].output_shape)))
            .collect();
        let mut acc_input = (self.input_segment == Segment::Middle).then(|| Tensor::zeros(input.shape()));
        let mut next_ck = 0;

        for t in 0..timesteps {
            let step_input = if self.input_segment == Segment::Middle {
                let s = encoder.encode_step(input, rng);
                if let Some(a) = acc_input.as_mut() {
                    a.add_assign(&s)?;
                }
                s
            } else {
                input.clone()
            };
            let mut row = tape.as_ref().map(|_| vec![None; n]);
            for &i in &middle {
                let (val, node) = self.eval_step(
                    i,
                    Some(t),
                    &vals,
                    &step_input,
                    cfg,
                    v_mem[i].as_mut(),
                    &mut activity.steps[i],
                    &mut opts.observer,
                )?;
                if let Some(a) = acc[i].as_mut() {
                    a.add_assign(&val)?;
                }
                vals[i] = Some(val);
                if let (Some(r), Some(nd)) = (row.as_mut(), node) {
                    r[i] = Some(nd);
                }
                if stop == Some(i) {
                    break;
                }
            }
            if let (Some(tp), Some(r)) = (tape.as_mut(), row) {
                tp.middle.push(r);
            }
            if stop.is_some_and(|s| middle.contains(&s)) {
                continue;
            }
            for i in (0..n).filter(|&i| self.spike_fed[i]) {
                let x = self.gather_input(i, &vals, &step_input)?;
                activity.steps[i].record(&x, None);
            }
            if next_ck < checkpoints.len() && checkpoints[next_ck] == t + 1 {
                next_ck += 1;
                // suffix on the accumulated counts
                let mut sv = vals.clone();
                for &j in &middle {
                    sv[j] = acc[j].clone();
                }
                let sin = acc_input.clone().unwrap_or_else(|| input.clone());
                for i in self.steps_in(Segment::Suffix) {
                    let (val, node) = self.eval_step(
                        i,
                        None,
                        &sv,
                        &sin,
                        cfg,
                        None,
                        &mut activity.steps[i],
                        &mut opts.observer,
                    )?;
                    sv[i] = Some(val);
                    if let (Some(tp), Some(nd)) = (tape.as_mut(), node) {
                        tp.once[i] = Some(nd);
                    }
                    if stop == Some(i) {
                        out.activity = activity;
                        return Ok(out);
                    }
                }
                out.head_inputs.push(self.gather_input(n - 1, &sv, &sin)?);
                out.logits.push(sv[n - 1].take().expect("head evaluated"));
            }
        }
        out.activity = activity;
        out.tape = tape;
        Ok(out)
    }

    /// Middle steps (and their values) read by the suffix.
    fn accumulated_steps(&self) -> Vec<bool> {
        let mut need = vec![false; self.plan.steps.len()];
        for i in self.steps_in(Segment::Suffix) {
            if i > 0 && self.segments[i - 1] == Segment::Middle {
                need[i - 1] = true;
            }
            for s in &self.plan.steps[i].skips {
                if let SourceRef::Step(j) = s.source {
                    if self.segments[j] == Segment::Middle {
                        need[j] = true;
                    }
                }
            }
        }
        need
    }

    fn value<'v>(&self, src: SourceRef, vals: &'v [Option<Tensor>], input: &'v Tensor) -> Result<&'v Tensor> {
        match src {
            SourceRef::Input => Ok(input),
            SourceRef::Step(j) => vals[j]
                .as_ref()
                .ok_or_else(|| Error::Internal(format!("value of step {j} not available"))),
        }
    }

    fn main_source(i: usize) -> SourceRef {
        if i == 0 {
            SourceRef::Input
        } else {
            SourceRef::Step(i - 1)
        }
    }

    fn pool_params(&self, step: usize) -> (usize, usize) {
        match self.spec.layers[self.plan.steps[step].layer].kind {
            LayerKind::Pool { window, stride } => (window, stride),
            _ => unreachable!("pool chain holds only pools"),
        }
    }

    /// Operand of step `i`: the main input, plus pooled concat skips for FC layers.
    fn gather_input(&self, i: usize, vals: &[Option<Tensor>], input: &Tensor) -> Result<Tensor> {
        let main = self.value(Self::main_source(i), vals, input)?;
        let step = &self.plan.steps[i];
        if !matches!(self.spec.layers[step.layer].kind, LayerKind::Fc { .. }) {
            return Ok(main.clone());
        }
        let mut data = main.data().to_vec();
        for s in step.skips.iter().filter(|s| s.mode == SkipMode::ConcatToFc) {
            let mut v = self.value(s.source, vals, input)?.clone();
            for &p in &s.pools {
                let (w, st) = self.pool_params(p);
                v = avgpool_forward(&v, w, st)?;
            }
            data.extend_from_slice(v.data());
        }
        let len = data.len();
        Tensor::from_vec(&[len], data)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_step(
        &self,
        i: usize,
        time: Option<usize>,
        vals: &[Option<Tensor>],
        input: &Tensor,
        cfg: &SimConfig,
        v_mem: Option<&mut Tensor>,
        stats: &mut StepActivity,
        observer: &mut Option<Observer<'_>>,
    ) -> Result<(Tensor, Option<TapeNode>)> {
        let step: &PlanStep = &self.plan.steps[i];
        let layer = &self.spec.layers[step.layer];
        let x = self.gather_input(i, vals, input)?;
        let mut current = match layer.kind {
            LayerKind::Conv { stride, padding, .. } => conv2d_forward(
                &x,
                self.weights[step.layer].as_ref().expect("weighted"),
                stride,
                padding,
            )?,
            LayerKind::Fc { .. } => fc_forward(&x, self.weights[step.layer].as_ref().expect("weighted"))?,
            LayerKind::Pool { window, stride } => avgpool_forward(&x, window, stride)?,
        };
        for s in step.skips.iter().filter(|s| s.mode == SkipMode::AddZeroPad) {
            let src = self.value(s.source, vals, input)?;
            for (c, &v) in current.data_mut().iter_mut().zip(src.data()) {
                *c += v;
            }
        }
        if layer.kind.is_weighted() && !current.all_finite() {
            return Err(Error::Training(match time {
                Some(t) => format!("non-finite activation in layer {} at time step {}", self.describe(i), t),
                None => format!("non-finite activation in layer {}", self.describe(i)),
            }));
        }
        let (output, pre) = match layer.neuron {
            NeuronKind::Relu => (relu(&current), Some(current.clone())),
            NeuronKind::Lif | NeuronKind::If => {
                let v = v_mem.ok_or_else(|| {
                    Error::Internal(format!("spiking layer {} evaluated outside the time loop", layer.name))
                })?;
                let (s, u) = lif_integrate(v, &current, self.step_alpha(i, cfg), self.step_threshold(i), cfg.reset);
                (s, Some(u))
            }
            NeuronKind::None => (current.clone(), None),
        };
        if layer.kind.is_weighted() && !self.spike_fed[i] {
            stats.record(&x, layer.neuron.is_spiking().then_some(&output));
        }
        if let Some(obs) = observer.as_mut() {
            obs(&StepEvent {
                step: i,
                time: time.unwrap_or(0),
                input: &x,
                current: &current,
                output: &output,
            });
        }
        let node = layer.kind.is_weighted().then(|| TapeNode {
            step: i,
            layer: step.layer,
            unroll_index: step.unroll_index,
            time,
            input: x,
            pre_activation: pre,
        });
        Ok((output, node))
    }

    /// BPTT through the recorded tape. `grad_logits` is dL/d(head output);
    /// `grad_head_input` an optional extra gradient on the head operand.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_logits: &Tensor,
        grad_head_input: Option<&Tensor>,
        cfg: &SimConfig,
    ) -> Result<Gradients> {
        let n = self.plan.steps.len();
        if tape.once.len() != n || (self.has_spiking() && tape.middle.len() != tape.timesteps) {
            return Err(Error::Internal("tape does not match the network graph".into()));
        }
        let head = n - 1;
        if grad_logits.shape() != self.plan.steps[head].output_shape.as_slice() {
            return Err(Error::Internal("loss gradient does not match the head output".into()));
        }
        let mut grads = Gradients::zeros(self);
        grads.stochmax = None;
        let mut g_once: Vec<Option<Tensor>> = vec![None; n];
        let mut g_acc: Vec<Option<Tensor>> = vec![None; n];
        g_once[head] = Some(grad_logits.clone());

        let once_seg = if self.has_spiking() {
            Segment::Suffix
        } else {
            Segment::Prefix
        };
        let order: Vec<usize> = self.steps_in(once_seg).rev().collect();
        for i in order {
            let Some(g) = g_once[i].take() else { continue };
            let node = tape.once[i].as_ref();
            let extra = if i == head { grad_head_input } else { None };
            self.backprop_step(i, g, node, extra, None, cfg, &mut grads, &mut |tgt, g| {
                route(self, Phase::Once, tgt, g, &mut g_once, &mut g_acc, None)
            })?;
        }
        if !self.has_spiking() {
            return Ok(grads);
        }

        let middle: Vec<usize> = self.steps_in(Segment::Middle).collect();
        let mut carry: Vec<Option<Tensor>> = vec![None; n];
        for t in (0..tape.timesteps).rev() {
            let mut g_t: Vec<Option<Tensor>> = g_acc.clone();
            for &i in middle.iter().rev() {
                let g = g_t[i].take();
                let spiking = self.step_neuron(i).is_spiking();
                let g = match (g, spiking.then(|| carry[i].as_ref()).flatten()) {
                    (Some(g), _) => g,
                    (None, Some(c)) => Tensor::zeros(c.shape()),
                    (None, None) => continue,
                };
                let node = tape.middle[t][i].as_ref();
                let c = carry[i].take();
                let new_carry = self.backprop_step(i, g, node, None, c.as_ref(), cfg, &mut grads, &mut |tgt, g| {
                    route(self, Phase::Middle, tgt, g, &mut g_once, &mut g_acc, Some(&mut g_t))
                })?;
                carry[i] = new_carry;
            }
        }

        let prefix: Vec<usize> = self.steps_in(Segment::Prefix).rev().collect();
        for i in prefix {
            let Some(g) = g_once[i].take() else { continue };
            let node = tape.once[i].as_ref();
            self.backprop_step(i, g, node, None, None, cfg, &mut grads, &mut |tgt, g| {
                route(self, Phase::Once, tgt, g, &mut g_once, &mut g_acc, None)
            })?;
        }
        Ok(grads)
    }

    /// Backward through one step invocation. Returns the membrane carry for
    /// the previous time-step of spiking steps.
    #[allow(clippy::too_many_arguments)]
    fn backprop_step(
        &self,
        i: usize,
        g_out: Tensor,
        node: Option<&TapeNode>,
        extra_input_grad: Option<&Tensor>,
        carry: Option<&Tensor>,
        cfg: &SimConfig,
        grads: &mut Gradients,
        sink: &mut dyn FnMut(Target, Tensor) -> Result<()>,
    ) -> Result<Option<Tensor>> {
        let step = &self.plan.steps[i];
        let layer = &self.spec.layers[step.layer];
        let missing = || Error::Internal(format!("tape has no record for {}", self.describe(i)));
        let mut new_carry = None;
        let g_pre = match layer.neuron {
            NeuronKind::Relu => relu_backward(
                &g_out,
                node.and_then(|n| n.pre_activation.as_ref()).ok_or_else(missing)?,
            )?,
            NeuronKind::None => g_out,
            NeuronKind::Lif | NeuronKind::If => {
                let u = node.and_then(|n| n.pre_activation.as_ref()).ok_or_else(missing)?;
                let th = self.step_threshold(i);
                let mut g_u = g_out;
                for (g, &uv) in g_u.data_mut().iter_mut().zip(u.data()) {
                    *g *= surrogate_scalar(uv, th, cfg.gamma);
                }
                if let Some(c) = carry {
                    g_u.add_assign(c)?;
                }
                let mut c = g_u.clone();
                c.scale(self.step_alpha(i, cfg));
                new_carry = Some(c);
                g_u
            }
        };

        for s in step.skips.iter().filter(|s| s.mode == SkipMode::AddZeroPad) {
            let len: usize = s.source_shape.iter().product();
            let g = Tensor::from_vec(&s.source_shape, g_pre.data()[..len].to_vec())?;
            sink(source_target(s.source), g)?;
        }

        let mut g_x = match layer.kind {
            LayerKind::Conv { stride, padding, .. } => {
                let x = &node.ok_or_else(missing)?.input;
                let w = self.weights[step.layer].as_ref().expect("weighted");
                let gw = conv2d_backward_weights(&g_pre, x, w.shape(), stride, padding)?;
                grads.weights[step.layer].as_mut().expect("weighted").add_assign(&gw)?;
                if i == 0 {
                    return Ok(new_carry);
                }
                conv2d_backward_input(&g_pre, x.shape(), w, stride, padding)?
            }
            LayerKind::Fc { .. } => {
                let x = &node.ok_or_else(missing)?.input;
                let w = self.weights[step.layer].as_ref().expect("weighted");
                let (gi, gw) = fc_backward(&g_pre, x, w)?;
                grads.weights[step.layer].as_mut().expect("weighted").add_assign(&gw)?;
                gi
            }
            LayerKind::Pool { window, stride } => avgpool_backward(&g_pre, &step.input_shape, window, stride)?,
        };
        if let Some(e) = extra_input_grad {
            g_x.add_assign(e)?;
        }

        if matches!(layer.kind, LayerKind::Fc { .. }) {
            let main_len: usize = step.input_shape.iter().product();
            let data = g_x.into_vec();
            sink(
                Target::from(Self::main_source(i)),
                Tensor::from_vec(&step.input_shape, data[..main_len].to_vec())?,
            )?;
            let mut off = main_len;
            for s in step.skips.iter().filter(|s| s.mode == SkipMode::ConcatToFc) {
                let mut shapes = vec![s.source_shape.clone()];
                for &p in &s.pools {
                    let (w, st) = self.pool_params(p);
                    let last = shapes.last().unwrap();
                    let ho = (last[1] - w) / st + 1;
                    let wo = (last[2] - w) / st + 1;
                    shapes.push(vec![last[0], ho, wo]);
                }
                let pooled = shapes.last().unwrap().clone();
                let len: usize = pooled.iter().product();
                let mut g = Tensor::from_vec(&pooled, data[off..off + len].to_vec())?;
                off += len;
                for (k, &p) in s.pools.iter().enumerate().rev() {
                    let (w, st) = self.pool_params(p);
                    g = avgpool_backward(&g, &shapes[k], w, st)?;
                }
                sink(source_target(s.source), g)?;
            }
        } else {
            sink(Target::from(Self::main_source(i)), g_x)?;
        }
        Ok(new_carry)
    }

    /// `psi_lr` is the step for the stochmax encoder.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f32, psi_lr: f32) -> Result<()> {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            if let (Some(w), Some(g)) = (w.as_mut(), g) {
                w.axpy(-lr, g)?;
            }
        }
        if let (Some(p), Some(g)) = (self.stochmax.as_mut(), &grads.stochmax) {
            p.w_psi.axpy(-psi_lr, &g.w_psi)?;
            p.b_psi.axpy(-psi_lr, &g.b_psi)?;
        }
        Ok(())
    }
}

impl From<SourceRef> for Target {
    fn from(s: SourceRef) -> Self {
        match s {
            SourceRef::Input => Target::Input,
            SourceRef::Step(j) => Target::Step(j),
        }
    }
}

fn source_target(s: SourceRef) -> Target {
    Target::from(s)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(s) => s.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn route(
    net: &Network,
    phase: Phase,
    tgt: Target,
    g: Tensor,
    g_once: &mut [Option<Tensor>],
    g_acc: &mut [Option<Tensor>],
    g_t: Option<&mut Vec<Option<Tensor>>>,
) -> Result<()> {
    let Target::Step(j) = tgt else { return Ok(()) };
    match (phase, net.segments[j]) {
        (Phase::Once, Segment::Middle) => accumulate(&mut g_acc[j], g),
        (Phase::Middle, Segment::Middle) => {
            accumulate(&mut g_t.ok_or_else(|| Error::Internal("no time buffer".into()))?[j], g)
        }
        _ => accumulate(&mut g_once[j], g),
    }
}

fn analyse_segments(spec: &TopologySpec, plan: &ExecutionPlan) -> Result<(Vec<Segment>, Segment)> {
    let n = plan.steps.len();
    let spiking: Vec<usize> = (0..n)
        .filter(|&i| spec.layers[plan.steps[i].layer].neuron.is_spiking())
        .collect();
    let (Some(&first), Some(&last)) = (spiking.first(), spiking.last()) else {
        return Ok((vec![Segment::Prefix; n], Segment::Prefix));
    };
    let mut end = last + 1;
    while end < n && matches!(spec.layers[plan.steps[end].layer].kind, LayerKind::Pool { .. }) {
        end += 1;
    }
    let segments: Vec<Segment> = (0..n)
        .map(|i| {
            if i < first {
                Segment::Prefix
            } else if i < end {
                Segment::Middle
            } else {
                Segment::Suffix
            }
        })
        .collect();
    for i in first..end {
        let l = &spec.layers[plan.steps[i].layer];
        if l.kind.is_weighted() && !l.neuron.is_spiking() {
            return Err(config_err!(
                "layer {} ({:?}) sits between spiking layers; analog layers must precede or follow the spiking block",
                l.name,
                l.neuron
            ));
        }
    }
    let input_segment = if first == 0 { Segment::Middle } else { Segment::Prefix };
    for (i, step) in plan.steps.iter().enumerate() {
        for s in &step.skips {
            let src_seg = match s.source {
                SourceRef::Input => input_segment,
                SourceRef::Step(j) => segments[j],
            };
            if src_seg == Segment::Prefix && segments[i] == Segment::Suffix {
                return Err(config_err!(
                    "skip into {} bypasses the spiking block; not supported",
                    spec.layers[step.layer].name
                ));
            }
        }
    }
    Ok((segments, input_segment))
}
