//! Surrogate-gradient (BPTT) training of a small spiking net on synthetic
//! rate patterns, with and without a weight-shared BackRes block.

use snn_workbench::agd::{train, AgdConfig, Optimizer};
use snn_workbench::data::synth_rate_patterns;
use snn_workbench::network::Network;
use snn_workbench::topology::parse_topology;
use snn_workbench::Rng;

const PLAIN: &str = r#"{
  "name": "spiking3",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "Conv1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "Conv2", "kind": "conv", "params": {"in": 8, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "Pool", "kind": "pool", "params": {"p": 2}},
    {"name": "FC", "kind": "fc", "params": {"in": 128, "out": 4}, "neuron": "none"}
  ]
}"#;

fn main() -> snn_workbench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let data = synth_rate_patterns(4, 600, [1, 8, 8], 1)?;
    let (train_set, test_set) = data.split(0.25, 2)?;

    let spec = parse_topology(PLAIN)?;
    let mut plain = spec.clone();
    plain.backres_groups.clear();
    let mut shared = spec;
    shared.backres_groups = vec![snn_workbench::topology::BackResGroup {
        members: vec!["Conv2".into()],
        n: 2,
    }];

    let cfg = AgdConfig {
        timesteps: 25,
        lr: 0.005,
        epochs: 10,
        batch_size: 16,
        optimizer: Optimizer::Sgd,
        seed: 3,
        ..AgdConfig::default()
    };
    for (label, spec) in [("plain", plain), ("backres n=2", shared)] {
        let t0 = std::time::Instant::now();
        let mut net = Network::new(spec, &mut Rng::new(cfg.seed))?;
        let hist = train(&mut net, &train_set, Some(&test_set), &cfg)?;
        let last = hist.last().unwrap();
        println!(
            "{label:>12}: test accuracy {:.3}  ({:.1}s)",
            last.test_accuracy.unwrap_or(0.0),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
