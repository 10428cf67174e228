//! Operation counts, spiking activity and modeled inference energy.
//!
//! An ANN layer performs `flops` multiply-accumulates once. A spiking layer
//! performs `flops * S_A` accumulates per time-step, where `S_A` is the
//! fraction of its input neurons that fire. Analog layers of a hybrid network
//! run once and keep their MAC cost.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activity, Network};
use crate::topology::{LayerKind, PlanStep, TopologySpec};

/// Per-operation energies in picojoules (45 nm CMOS, 32-bit).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mult32: f64,
    pub e_add32: f64,
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            e_mult32: 3.1,
            e_add32: 0.1,
            e_mac: 3.2,
            e_ac: 0.1,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.e_mult32, self.e_add32, self.e_mac, self.e_ac];
        if all.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Input(format!("energy constants must be positive: {self:?}")));
        }
        if (self.e_mac - (self.e_mult32 + self.e_add32)).abs() > 1e-12 * self.e_mac {
            return Err(Error::Input(format!(
                "e_mac ({}) must equal e_mult32 + e_add32 ({})",
                self.e_mac,
                self.e_mult32 + self.e_add32
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, f: f64) -> Self {
        EnergyConstants {
            e_mult32: self.e_mult32 * f,
            e_add32: self.e_add32 * f,
            e_mac: self.e_mac * f,
            e_ac: self.e_ac * f,
        }
    }
}

/// MAC count of one layer invocation: `Ho*Wo*N*k^2*M` for a convolution,
/// `X*Y` for a fully-connected layer, 0 for pooling.
pub fn flops_ann(kind: &LayerKind, output_shape: &[usize]) -> u64 {
    match *kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let spatial: usize = output_shape.iter().skip(1).product();
            (spatial * in_channels * kernel * kernel * out_channels) as u64
        }
        LayerKind::Fc { inputs, outputs } => (inputs * outputs) as u64,
        LayerKind::Pool { .. } => 0,
    }
}

/// Per-time-step accumulate count of a spiking layer.
pub fn flops_snn(flops_ann: u64, s_a: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s_a) {
        return Err(Error::Input(format!("spiking activity must be in [0, 1], got {s_a}")));
    }
    Ok(flops_ann as f64 * s_a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// Multiply-accumulate, evaluated once per inference.
    Mac,
    /// Accumulate, evaluated every time-step on spiking input.
    Ac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub is_conv: bool,
    pub flops_ann: u64,
    pub cost: CostKind,
    /// Time-averaged input activity; required for AC layers.
    pub s_a: Option<f64>,
    pub s_a_peak: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: String,
    pub is_conv: bool,
    pub cost: CostKind,
    pub flops_ann: u64,
    /// Per time-step; equal to `flops_ann` for MAC layers.
    pub flops_snn: f64,
    pub s_a: Option<f64>,
    pub s_a_peak: Option<f64>,
    pub e_ann: f64,
    pub e_snn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub constants: EnergyConstants,
    pub layers: Vec<LayerEnergy>,
    pub e_ann: f64,
    pub e_snn: f64,
    pub ee: f64,
    /// Convolution (and pooling) layers only.
    pub ee_conv: f64,
    pub ee_full: f64,
}

/// `E_ANN = sum flops * e_mac`; `E_SNN = sum_AC flops_snn * e_ac * T + sum_MAC flops * e_mac`.
pub fn total_energy(layers: &[LayerCost], timesteps: usize, constants: &EnergyConstants) -> Result<EnergyReport> {
    constants.validate()?;
    let t = timesteps as f64;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let e_ann = l.flops_ann as f64 * constants.e_mac;
        let (flops_snn, e_snn) = match l.cost {
            CostKind::Mac => (l.flops_ann as f64, e_ann),
            CostKind::Ac => {
                let s_a = l
                    .s_a
                    .ok_or_else(|| Error::Input(format!("layer {}: spiking activity missing", l.layer)))?;
                let f = flops_snn(l.flops_ann, s_a)?;
                (f, f * constants.e_ac * t)
            }
        };
        out.push(LayerEnergy {
            layer: l.layer.clone(),
            is_conv: l.is_conv,
            cost: l.cost,
            flops_ann: l.flops_ann,
            flops_snn,
            s_a: l.s_a,
            s_a_peak: l.s_a_peak,
            e_ann,
            e_snn,
        });
    }
    let sum = |f: &dyn Fn(&LayerEnergy) -> bool| -> (f64, f64) {
        out.iter()
            .filter(|l| f(l))
            .fold((0.0, 0.0), |(a, s), l| (a + l.e_ann, s + l.e_snn))
    };
    let (e_ann, e_snn) = sum(&|_| true);
    let (c_ann, c_snn) = sum(&|l| l.is_conv);
    let ratio = |a: f64, s: f64| if s > 0.0 { a / s } else { f64::INFINITY };
    Ok(EnergyReport {
        timesteps,
        constants: *constants,
        layers: out,
        e_ann,
        e_snn,
        ee: ratio(e_ann, e_snn),
        ee_conv: ratio(c_ann, c_snn),
        ee_full: ratio(e_ann, e_snn),
    })
}

fn step_name(spec: &TopologySpec, step: &PlanStep) -> String {
    let name = &spec.layers[step.layer].name;
    if spec.unroll_count(step.layer) > 1 {
        format!("{name}#{}", step.unroll_index)
    } else {
        name.clone()
    }
}

/// Cost map of a simulated network: spiking layers and analog layers fed
/// directly by spikes are AC-costed with their recorded activity; every
/// other analog layer is MAC-costed once.
pub fn layer_costs(net: &Network, activity: &Activity) -> Vec<LayerCost> {
    let spec = net.spec();
    net.plan()
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| spec.layers[s.layer].kind.is_weighted())
        .map(|(i, s)| {
            let layer = &spec.layers[s.layer];
            let ac =
                layer.neuron.is_spiking() || (net.is_spike_fed(i) && layer.neuron == crate::topology::NeuronKind::None);
            let a = activity.steps.get(i);
            LayerCost {
                layer: step_name(spec, s),
                is_conv: matches!(layer.kind, LayerKind::Conv { .. }),
                flops_ann: flops_ann(&layer.kind, &s.output_shape),
                cost: if ac { CostKind::Ac } else { CostKind::Mac },
                s_a: a.filter(|a| a.evaluations > 0).map(|a| a.spiking_activity()),
                s_a_peak: a.filter(|a| a.evaluations > 0).map(|a| a.input_active_peak),
            }
        })
        .collect()
}

pub fn profile(
    net: &Network,
    activity: &Activity,
    timesteps: usize,
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    total_energy(&layer_costs(net, activity), timesteps, constants)
}

/// `E_SNN(a) / E_SNN(b)`: how much cheaper `b` is than `a`.
pub fn relative_efficiency(a: &EnergyReport, b: &EnergyReport) -> f64 {
    if b.e_snn > 0.0 {
        a.e_snn / b.e_snn
    } else {
        f64::INFINITY
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>4} {:>14} {:>16} {:>8} {:>8} {:>14} {:>14}",
            "layer", "cost", "flops_ann", "flops_snn/step", "S_A", "peak", "E_ANN (pJ)", "E_SNN (pJ)"
        )?;
        for l in &self.layers {
            let sa = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                f,
                "{:<14} {:>4} {:>14} {:>16.1} {:>8} {:>8} {:>14.1} {:>14.1}",
                l.layer,
                match l.cost {
                    CostKind::Mac => "MAC",
                    CostKind::Ac => "AC",
                },
                l.flops_ann,
                l.flops_snn,
                sa(l.s_a),
                sa(l.s_a_peak),
                l.e_ann,
                l.e_snn
            )?;
        }
        writeln!(f, "T = {}", self.timesteps)?;
        writeln!(f, "E_ANN = {:.4e} pJ, E_SNN = {:.4e} pJ", self.e_ann, self.e_snn)?;
        writeln!(f, "EE = {:.3} (conv only {:.3})", self.ee, self.ee_conv)
    }
}
