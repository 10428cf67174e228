//! Finite-difference check of the analog backward pass against the f64 oracle.

use super::{ann_forward_f64, cross_entropy_f64, rel_err, weights_f64};
use snn_workbench::heads::softmax_loss;
use snn_workbench::network::{Network, SimConfig};
use snn_workbench::topology::parse_topology;
use snn_workbench::{Rng, Tensor};

// conv -> pool -> conv (+ zero-padded add skip) -> fc (+ pooled concat skip) -> fc
pub const ANN: &str = r#"{
  "name": "ann",
  "input_shape": [2, 6, 6],
  "layers": [
    {"name": "C1", "kind": "conv", "params": {"in": 2, "out": 3, "k": 3}, "neuron": "relu"},
    {"name": "P1", "kind": "pool", "params": {"p": 2}},
    {"name": "C2", "kind": "conv", "params": {"in": 3, "out": 4, "k": 3, "stride": 1, "padding": 1}, "neuron": "relu"},
    {"name": "F1", "kind": "fc", "params": {"in": 63, "out": 5}, "neuron": "relu"},
    {"name": "F2", "kind": "fc", "params": {"in": 5, "out": 3}, "neuron": "none"}
  ],
  "skips": [
    {"source": "P1", "dest": "C2", "mode": "add_zero_pad"},
    {"source": "C1", "dest": "F1", "mode": "concat_to_fc"}
  ]
}"#;

pub fn random_input(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

pub struct FdSummary {
    pub instances: usize,
    pub checked: usize,
    pub worst: f64,
    /// First entry over tolerance, if any.
    pub failure: Option<String>,
}

/// Three random weight entries per layer per instance; entries where both
/// sides vanish (dead ReLU path) must agree absolutely instead.
pub fn analog_fd(instances: u64, tol: f64) -> FdSummary {
    let spec = parse_topology(ANN).unwrap();
    let cfg = SimConfig::default();
    let mut s = FdSummary {
        instances: instances as usize,
        checked: 0,
        worst: 0.0,
        failure: None,
    };
    for instance in 0..instances {
        let mut rng = Rng::new(1000 + instance);
        let net = Network::new(spec.clone(), &mut rng).unwrap();
        let x = random_input(&[2, 6, 6], &mut rng);
        let target = rng.below(3);
        let (out, tape) = net.forward_with_tape(&x, &cfg, &mut Rng::new(0)).unwrap();
        let (_, gl) = softmax_loss(&out.logits, target).unwrap();
        let grads = net.backward(&tape, &gl, None, &cfg).unwrap();

        let xf: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let base = weights_f64(&net);
        for (l, w) in base.iter().enumerate() {
            let Some(w) = w else { continue };
            for _ in 0..3 {
                let k = rng.below(w.len());
                let h = 1e-6;
                let mut plus = base.clone();
                plus[l].as_mut().unwrap()[k] += h;
                let mut minus = base.clone();
                minus[l].as_mut().unwrap()[k] -= h;
                let fd = (cross_entropy_f64(&ann_forward_f64(&net, &xf, &plus), target)
                    - cross_entropy_f64(&ann_forward_f64(&net, &xf, &minus), target))
                    / (2.0 * h);
                let an = grads.weights[l].as_ref().unwrap().data()[k] as f64;
                if fd.abs() < 1e-4 && an.abs() < 1e-4 {
                    if (fd - an).abs() >= 1e-6 && s.failure.is_none() {
                        s.failure = Some(format!("instance {instance} layer {l} idx {k}: {an} vs {fd}"));
                    }
                    continue;
                }
                let e = rel_err(an, fd);
                s.worst = s.worst.max(e);
                if e >= tol && s.failure.is_none() {
                    s.failure = Some(format!("instance {instance} layer {l} idx {k}: analytic {an} fd {fd}"));
                }
                s.checked += 1;
            }
        }
    }
    s
}
