//! Surrogate-gradient training through time (BPTT) of spiking and hybrid
//! networks, including weight-shared BackRes unrolling.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::heads::{softmax_loss, stochmax_loss};
use crate::metrics::{evaluate, layer_activity, LayerActivity, MetricRecord};
use crate::network::{Activity, Gradients, Network, SimConfig};
use crate::neuron::{ResetMode, DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgdConfig {
    pub timesteps: usize,
    pub lr: f32,
    pub gamma: f32,
    pub alpha: f32,
    /// Base threshold given to every spiking layer; constant during training.
    pub threshold: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub rate_factor: f32,
    pub reset: ResetMode,
    /// Step size of the stochmax retain encoder relative to `lr`. Its input
    /// is spike counts (scale ~T), so at the full rate it saturates within an
    /// epoch and the head stops discriminating.
    #[serde(default = "default_psi_lr_scale")]
    pub psi_lr_scale: f32,
}

fn default_psi_lr_scale() -> f32 {
    0.01
}

impl Default for AgdConfig {
    fn default() -> Self {
        AgdConfig {
            timesteps: 25,
            lr: 0.01,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            threshold: 1.0,
            batch_size: 16,
            epochs: 10,
            optimizer: Optimizer::Sgd,
            seed: 0,
            rate_factor: 1.0,
            reset: ResetMode::Subtract,
            psi_lr_scale: default_psi_lr_scale(),
        }
    }
}

impl AgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(config_err!("timesteps must be >= 1"));
        }
        // lr == 0 is allowed as a frozen-weights run
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_err!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(self.gamma > 0.0) {
            return Err(config_err!("surrogate gamma must be > 0, got {}", self.gamma));
        }
        if !(self.threshold > 0.0) {
            return Err(config_err!("threshold must be > 0, got {}", self.threshold));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be >= 1"));
        }
        if !(self.psi_lr_scale >= 0.0) || !self.psi_lr_scale.is_finite() {
            return Err(config_err!(
                "stochmax encoder step scale must be finite and non-negative, got {}",
                self.psi_lr_scale
            ));
        }
        self.sim().validate()
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            timesteps: self.timesteps,
            alpha: self.alpha,
            gamma: self.gamma,
            reset: self.reset,
            rate_factor: self.rate_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub layers: Vec<LayerActivity>,
}

impl EpochMetrics {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut r = vec![MetricRecord::new(
            self.epoch,
            "train",
            self.train_accuracy,
            self.train_loss,
            &self.layers,
        )];
        if let (Some(a), Some(l)) = (self.test_accuracy, self.test_loss) {
            r.push(MetricRecord::new(self.epoch, "test", a, l, &self.layers));
        }
        r
    }
}

pub struct SampleResult {
    pub loss: f64,
    pub correct: bool,
    pub grads: Gradients,
    pub activity: Activity,
}

/// Forward, loss and backward for one sample.
pub fn sample_gradients(
    net: &Network,
    image: &Tensor,
    label: usize,
    cfg: &SimConfig,
    rng: &mut Rng,
) -> Result<SampleResult> {
    let (out, tape) = net.forward_with_tape(image, cfg, rng)?;
    let correct = net.predict_from(&out)? == label;
    let (loss, grads) = match &net.stochmax {
        Some(p) => {
            let s = stochmax_loss(&out.logits, &out.head_input, p, label, rng, true)?;
            let mut g = net.backward(&tape, &s.grad_logits, Some(&s.grad_features), cfg)?;
            g.stochmax = Some(s.grad_psi);
            (s.loss, g)
        }
        None => {
            let (l, gl) = softmax_loss(&out.logits, label)?;
            (l, net.backward(&tape, &gl, None, cfg)?)
        }
    };
    Ok(SampleResult {
        loss,
        correct,
        grads,
        activity: out.activity,
    })
}

/// Sets every weighted layer's thresholds to `threshold`.
pub fn set_uniform_thresholds(net: &mut Network, threshold: f32) {
    for th in net.thresholds.iter_mut() {
        th.fill(threshold);
    }
}

pub struct Trainer {
    pub cfg: AgdConfig,
    velocity: Option<Gradients>,
}

impl Trainer {
    pub fn new(cfg: AgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg, velocity: None })
    }

    /// One minibatch step; returns (summed loss, correct count, activity).
    pub fn step(
        &mut self,
        net: &mut Network,
        ds: &Dataset,
        batch: &[usize],
        epoch: usize,
        index: usize,
    ) -> Result<(f64, usize, Activity)> {
        let sim = self.cfg.sim();
        let master = Rng::new(self.cfg.seed);
        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = master.fork2(epoch as u64 + 1, i as u64);
                sample_gradients(net, &ds.image(i), ds.labels[i], &sim, &mut rng)
            })
            .collect();
        // fixed-order reduction keeps the sum independent of thread timing
        let mut total = Gradients::zeros(net);
        let mut loss = 0.0;
        let mut correct = 0;
        let mut activity = Activity::new(net.plan().steps.len());
        for r in results {
            let r = r.map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}, batch {index}: {m}")),
                other => other,
            })?;
            if !r.loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged (NaN) at epoch {epoch}, batch {index}"
                )));
            }
            loss += r.loss;
            correct += r.correct as usize;
            total.add(&r.grads)?;
            activity.merge(&r.activity);
        }
        total.scale(1.0 / batch.len() as f32);
        if !total.all_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient at epoch {epoch}, batch {index}"
            )));
        }
        let update = match self.cfg.optimizer {
            Optimizer::Sgd => total,
            Optimizer::SgdMomentum => {
                let v = match self.velocity.take() {
                    Some(mut v) => {
                        v.scale(MOMENTUM);
                        v.add(&total)?;
                        v
                    }
                    None => total,
                };
                self.velocity = Some(v.clone());
                v
            }
        };
        if self.cfg.lr != 0.0 {
            net.apply_gradients(&update, self.cfg.lr, self.cfg.lr * self.cfg.psi_lr_scale)?;
        }
        Ok((loss, correct, activity))
    }
}

/// Minibatch SGD over `train`; evaluates on `test` after every epoch.
pub fn train(net: &mut Network, train: &Dataset, test: Option<&Dataset>, cfg: &AgdConfig) -> Result<Vec<EpochMetrics>> {
    train_with(net, train, test, cfg, |_| Ok(()))
}

pub fn train_with(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &AgdConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if train.classes != net.classes() {
        return Err(config_err!(
            "dataset has {} classes but the network head has {} outputs",
            train.classes,
            net.classes()
        ));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    set_uniform_thresholds(net, cfg.threshold);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = Rng::new(cfg.seed).fork(epoch as u64).permutation(train.len());
        let mut loss = 0.0;
        let mut correct = 0;
        let mut activity = Activity::new(net.plan().steps.len());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (l, c, a) = trainer.step(net, train, batch, epoch, b)?;
            loss += l;
            correct += c;
            activity.merge(&a);
        }
        let (test_loss, test_accuracy, layers) = match test {
            Some(t) if !t.is_empty() => {
                let r = evaluate(net, t, &cfg.sim(), cfg.seed)?;
                let layers = r.layers(net);
                (Some(r.loss), Some(r.accuracy), layers)
            }
            _ => (None, None, layer_activity(net, &activity)),
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_loss,
            test_accuracy,
            layers,
        };
        info!(
            "epoch {}: train loss {:.4} acc {:.3}{}",
            epoch,
            m.train_loss,
            m.train_accuracy,
            m.test_accuracy
                .map(|a| format!(", test acc {a:.3}"))
                .unwrap_or_default()
        );
        on_epoch(&m)?;
        history.push(m);
    }
    Ok(history)
}
