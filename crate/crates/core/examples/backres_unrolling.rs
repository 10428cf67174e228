//! Backward-residual unrolling: a block of layers is executed n times with
//! the same weights, so logical depth grows while the parameter count stays
//! fixed. Each unroll step keeps its own firing threshold.

use snn_workbench::network::{Network, SimConfig};
use snn_workbench::topology::{fixtures, parse_topology};
use snn_workbench::{Rng, Tensor};

const NET: &str = r#"{
  "name": "unrolled",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "C1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "C2", "kind": "conv", "params": {"in": 8, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "C3", "kind": "conv", "params": {"in": 8, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "P", "kind": "pool", "params": {"p": 2}},
    {"name": "F", "kind": "fc", "params": {"in": 128, "out": 4}}
  ],
  "backres": [{"members": ["C2", "C3"], "n": 1}]
}"#;

fn main() -> snn_workbench::Result<()> {
    let base = parse_topology(NET)?;
    println!(
        "{:>2} {:>7} {:>6} {:>6}  execution order",
        "n", "params", "depth", "unique"
    );
    for n in 1..=4 {
        let spec = base.with_unroll(0, n)?;
        let plan = spec.unroll()?;
        println!(
            "{n:>2} {:>7} {:>6} {:>6}  {}",
            spec.count_parameters(),
            spec.logical_depth(),
            spec.real_depth(),
            plan.layer_sequence(&spec).join(" ")
        );
    }

    let mut net = Network::new(base.with_unroll(0, 3)?, &mut Rng::new(0))?;
    // untrained weights: activity thins out with every pass through the block
    net.thresholds[1] = vec![1.0, 0.8, 0.6];
    net.thresholds[2] = vec![1.0, 0.8, 0.6];
    let out = net.forward(
        &Tensor::full(&[1, 8, 8], 0.6),
        &SimConfig::default().with_timesteps(20),
        &mut Rng::new(1),
    )?;
    for l in snn_workbench::metrics::layer_activity(&net, &out.activity) {
        println!("{:<5} firing rate {:.3}", l.layer, l.firing_rate);
    }

    println!("\nbundled BackRes topologies:");
    for name in ["agd_vgg3x2", "agd_vgg3x4"] {
        let s = fixtures::load(name).expect("bundled");
        println!(
            "  {name}: {} parameters, logical depth {}",
            s.count_parameters(),
            s.logical_depth()
        );
    }
    Ok(())
}
