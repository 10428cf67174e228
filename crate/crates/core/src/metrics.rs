//! Evaluation and line-delimited metric records.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{softmax_loss, stochmax_loss};
use crate::network::{Activity, Network, SimConfig};
use crate::rng::Rng;

/// Stream offset for evaluation draws, keeping them apart from training draws.
const EVAL_STREAM: u64 = 0x5EED_E7A1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    /// Layer name, suffixed with `#k` for the k-th BackRes invocation.
    pub layer: String,
    pub spiking_activity: f64,
    pub peak_activity: f64,
    pub firing_rate: f64,
}

/// One JSONL record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub s_a: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub activity: Activity,
    pub samples: usize,
}

impl EvalResult {
    pub fn layers(&self, net: &Network) -> Vec<LayerActivity> {
        layer_activity(net, &self.activity)
    }
}

/// Per weighted step: S_A, peak S_A and output firing rate.
pub fn layer_activity(net: &Network, activity: &Activity) -> Vec<LayerActivity> {
    let spec = net.spec();
    net.plan()
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| spec.layers[s.layer].kind.is_weighted())
        .filter_map(|(i, s)| {
            let a = activity.steps.get(i)?;
            let name = &spec.layers[s.layer].name;
            let layer = if spec.unroll_count(s.layer) > 1 {
                format!("{name}#{}", s.unroll_index)
            } else {
                name.clone()
            };
            Some(LayerActivity {
                layer,
                spiking_activity: a.spiking_activity(),
                peak_activity: a.input_active_peak,
                firing_rate: a.firing_rate(),
            })
        })
        .collect()
}

/// Inference over a dataset; stochastic draws come from `seed` per sample.
pub fn evaluate(net: &Network, ds: &Dataset, cfg: &SimConfig, seed: u64) -> Result<EvalResult> {
    let master = Rng::new(seed ^ EVAL_STREAM);
    let per: Vec<Result<(usize, f64, Activity)>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = master.fork(i as u64);
            let out = net.forward(&ds.image(i), cfg, &mut rng)?;
            let pred = net.predict_from(&out)?;
            let loss = match &net.stochmax {
                Some(p) => stochmax_loss(&out.logits, &out.head_input, p, ds.labels[i], &mut rng, false)?.loss,
                None => softmax_loss(&out.logits, ds.labels[i])?.0,
            };
            Ok((pred, loss, out.activity))
        })
        .collect();
    let mut predictions = Vec::with_capacity(ds.len());
    let mut activity = Activity::new(net.plan().steps.len());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, r) in per.into_iter().enumerate() {
        let (p, l, a) = r?;
        correct += (p == ds.labels[i]) as usize;
        loss += l;
        activity.merge(&a);
        predictions.push(p);
    }
    let n = ds.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        loss: loss / n,
        predictions,
        activity,
        samples: ds.len(),
    })
}

impl MetricRecord {
    pub fn new(epoch: usize, split: &str, accuracy: f64, loss: f64, layers: &[LayerActivity]) -> Self {
        MetricRecord {
            epoch,
            split: split.to_string(),
            accuracy,
            loss,
            s_a: layers.iter().map(|l| (l.layer.clone(), l.spiking_activity)).collect(),
        }
    }
}

pub fn append_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
