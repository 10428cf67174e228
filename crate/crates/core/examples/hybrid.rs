//! A ReLU prefix feeding a LIF suffix, trained end to end. The analog block
//! runs once per image; its output is injected into the spiking block at
//! every time-step, and it is costed as MAC work only once.

use snn_workbench::agd::{train, AgdConfig, Optimizer};
use snn_workbench::data::synth_rate_patterns;
use snn_workbench::energy;
use snn_workbench::metrics::evaluate;
use snn_workbench::network::Network;
use snn_workbench::topology::parse_topology;
use snn_workbench::Rng;

const HYBRID: &str = r#"{
  "name": "hybrid",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "A1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "relu"},
    {"name": "S1", "kind": "conv", "params": {"in": 8, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "P", "kind": "pool", "params": {"p": 2}},
    {"name": "F", "kind": "fc", "params": {"in": 128, "out": 4}}
  ]
}"#;

fn main() -> snn_workbench::Result<()> {
    let (train_set, test_set) = synth_rate_patterns(4, 400, [1, 8, 8], 2)?.split(0.25, 3)?;
    let mut net = Network::new(parse_topology(HYBRID)?, &mut Rng::new(4))?;
    let cfg = AgdConfig {
        timesteps: 15,
        lr: 0.005,
        epochs: 6,
        optimizer: Optimizer::Sgd,
        seed: 4,
        ..AgdConfig::default()
    };
    for m in train(&mut net, &train_set, Some(&test_set), &cfg)? {
        println!(
            "epoch {} loss {:.3} test {:.3}",
            m.epoch,
            m.train_loss,
            m.test_accuracy.unwrap_or(0.0)
        );
    }

    let sim = cfg.sim();
    let ev = evaluate(&net, &test_set, &sim, 0)?;
    for l in ev.layers(&net) {
        println!(
            "{:<3} input activity {:.3}  firing rate {:.3}",
            l.layer, l.spiking_activity, l.firing_rate
        );
    }
    // A1 is MAC-costed once; S1 and F are accumulate-costed for every step
    print!(
        "{}",
        energy::profile(&net, &ev.activity, sim.timesteps, &Default::default())?
    );
    Ok(())
}
