//! Classifier heads: softmax cross-entropy and stochastic softmax (stochmax).
//!
//! Stochmax learns per-class retain probabilities `rho = sigmoid(W_psi h + b_psi)`
//! from the head input `h`. During training each non-target class `k` is kept
//! with probability `rho_k` (the target is always kept) and the loss is the
//! masked softmax
//!
//! ```text
//! p(t) = (z_t + eps) exp(o_t) / sum_k (z_k + eps) exp(o_k)
//! ```
//!
//! Gradients reach `psi` through a straight-through estimator (`dz/drho = 1`).
//! At inference `z` is replaced by `rho`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

fn check_target(logits: &Tensor, target: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {}", logits.len())));
    }
    if target >= logits.len() {
        return Err(Error::Input(format!(
            "target {} out of range for {} classes",
            target,
            logits.len()
        )));
    }
    Ok(())
}

/// Class probabilities with max-subtraction, computed in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&o| (o as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-log p(target)` and its gradient `p - onehot(target)`.
pub fn softmax_loss(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    check_target(logits, target)?;
    let p = softmax(logits.data());
    let max = logits.max() as f64;
    let lse: f64 = max + logits.data().iter().map(|&o| (o as f64 - max).exp()).sum::<f64>().ln();
    let loss = lse - logits.data()[target] as f64;
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| (pk - if k == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// Learned parameters of the retain-probability encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochmaxParams {
    /// `[K, H]`
    pub w_psi: Tensor,
    /// `[K]`
    pub b_psi: Tensor,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochmaxGrads {
    pub w_psi: Tensor,
    pub b_psi: Tensor,
}

#[derive(Clone, Debug)]
pub struct StochmaxOutput {
    pub loss: f64,
    pub grad_logits: Tensor,
    pub grad_psi: StochmaxGrads,
    /// Gradient reaching the head input through the `rho` encoder.
    pub grad_features: Tensor,
    pub mask: Vec<f64>,
}

impl StochmaxParams {
    /// Zero weights and bias `b0`, i.e. `rho = sigmoid(b0)` for every class.
    pub fn new(classes: usize, features: usize, b0: f32) -> Self {
        StochmaxParams {
            w_psi: Tensor::zeros(&[classes, features]),
            b_psi: Tensor::full(&[classes], b0),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn init(classes: usize, features: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / features as f32).sqrt();
        let w = (0..classes * features)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        StochmaxParams {
            w_psi: Tensor::from_vec(&[classes, features], w).unwrap(),
            // start out retaining most classes
            b_psi: Tensor::full(&[classes], 2.0),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn classes(&self) -> usize {
        self.b_psi.len()
    }

    fn preact(&self, features: &Tensor) -> Result<Vec<f64>> {
        let k = self.classes();
        let h = features.len();
        if self.w_psi.shape() != [k, h] {
            return Err(Error::Input(format!(
                "stochmax encoder expects {} features, got {}",
                self.w_psi.shape().get(1).copied().unwrap_or(0),
                h
            )));
        }
        let w = self.w_psi.data();
        Ok((0..k)
            .map(|c| {
                let row = &w[c * h..(c + 1) * h];
                let dot: f64 = row
                    .iter()
                    .zip(features.data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                dot + self.b_psi.data()[c] as f64
            })
            .collect())
    }

    /// Retain probabilities `rho`.
    pub fn retain_probs(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.preact(features)?.into_iter().map(sigmoid).collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked softmax loss for a fixed mask `z`, with gradients w.r.t. the logits
/// and w.r.t. each `z_k`.
pub fn masked_softmax_loss(
    logits: &Tensor,
    mask: &[f64],
    epsilon: f64,
    target: usize,
) -> Result<(f64, Tensor, Vec<f64>)> {
    check_target(logits, target)?;
    if mask.len() != logits.len() {
        return Err(Error::Input("mask length must equal class count".into()));
    }
    let max = logits.max() as f64;
    let weighted: Vec<f64> = logits
        .data()
        .iter()
        .zip(mask)
        .map(|(&o, &z)| (z + epsilon) * (o as f64 - max).exp())
        .collect();
    let sum: f64 = weighted.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Input("stochmax mask removed every class".into()));
    }
    let loss = -(weighted[target] / sum).ln();
    let q: Vec<f64> = weighted.iter().map(|w| w / sum).collect();
    let grad_logits = q
        .iter()
        .enumerate()
        .map(|(k, &qk)| (qk - if k == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    // d loss / d z_k = exp(o_k)/sum - [k == t]/(z_t + eps)
    let grad_mask = (0..mask.len())
        .map(|k| {
            let e = (logits.data()[k] as f64 - max).exp() / sum;
            e - if k == target {
                1.0 / (mask[target] + epsilon)
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, Tensor::from_vec(logits.shape(), grad_logits)?, grad_mask))
}

/// Stochmax loss with an explicit mask (training: `z_t` forced to 1 by the
/// caller; `mask_from_rho` marks which entries are functions of `rho`).
pub fn stochmax_loss_with_mask(
    logits: &Tensor,
    features: &Tensor,
    params: &StochmaxParams,
    target: usize,
    mask: &[f64],
    mask_from_rho: &[bool],
) -> Result<StochmaxOutput> {
    let rho = params.retain_probs(features)?;
    let (loss, grad_logits, grad_mask) = masked_softmax_loss(logits, mask, params.epsilon, target)?;
    let k = params.classes();
    let h = features.len();
    let mut gw = Tensor::zeros(&[k, h]);
    let mut gb = Tensor::zeros(&[k]);
    let mut gh = vec![0.0f64; h];
    for c in 0..k {
        if !mask_from_rho[c] {
            continue;
        }
        // straight-through: d z / d rho = 1, then through the sigmoid
        let da = grad_mask[c] * rho[c] * (1.0 - rho[c]);
        gb.data_mut()[c] = da as f32;
        let row = &mut gw.data_mut()[c * h..(c + 1) * h];
        let wrow = &params.w_psi.data()[c * h..(c + 1) * h];
        for j in 0..h {
            row[j] = (da * features.data()[j] as f64) as f32;
            gh[j] += da * wrow[j] as f64;
        }
    }
    Ok(StochmaxOutput {
        loss,
        grad_logits,
        grad_psi: StochmaxGrads { w_psi: gw, b_psi: gb },
        grad_features: Tensor::from_vec(features.shape(), gh.into_iter().map(|v| v as f32).collect())?,
        mask: mask.to_vec(),
    })
}

/// Stochmax loss. In training mode non-target classes are dropped by
/// Bernoulli(`rho_k`) draws from `rng`; in inference mode `z = rho`.
///
/// The forced-in target still sits on the straight-through path. Without
/// that, every update lowers some `rho` and none raises one, and the
/// encoder collapses to near-zero retain probabilities.
pub fn stochmax_loss(
    logits: &Tensor,
    features: &Tensor,
    params: &StochmaxParams,
    target: usize,
    rng: &mut Rng,
    training: bool,
) -> Result<StochmaxOutput> {
    check_target(logits, target)?;
    let rho = params.retain_probs(features)?;
    let (mask, from_rho): (Vec<f64>, Vec<bool>) = if training {
        rho.iter()
            .enumerate()
            .map(|(k, &r)| {
                // draw for every class so the stream doesn't depend on the target
                let keep = rng.bernoulli(r as f32);
                if k == target {
                    (1.0, true)
                } else {
                    (if keep { 1.0 } else { 0.0 }, true)
                }
            })
            .unzip()
    } else {
        (rho.clone(), vec![true; rho.len()])
    };
    stochmax_loss_with_mask(logits, features, params, target, &mask, &from_rho)
}

/// Inference-mode class scores `(rho_k + eps) * exp(o_k)` (unnormalised, log domain).
pub fn stochmax_scores(logits: &Tensor, features: &Tensor, params: &StochmaxParams) -> Result<Vec<f64>> {
    let rho = params.retain_probs(features)?;
    Ok(logits
        .data()
        .iter()
        .zip(rho)
        .map(|(&o, r)| (r + params.epsilon).ln() + o as f64)
        .collect())
}

pub fn stochmax_predict(logits: &Tensor, features: &Tensor, params: &StochmaxParams) -> Result<usize> {
    let s = stochmax_scores(logits, features, params)?;
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Sum over the time dimension of a spike train: the head input.
pub fn accumulate_head_input(train: &crate::encoding::SpikeTrain) -> Tensor {
    train.counts()
}
