//! Unsupervised layerwise STDP on the conv layers, then a small backprop
//! classifier on the frozen spike counts.

use snn_workbench::agd::AgdConfig;
use snn_workbench::data::synth_rate_patterns;
use snn_workbench::metrics::evaluate;
use snn_workbench::network::Network;
use snn_workbench::stdp::{self, StdpConfig};
use snn_workbench::topology::parse_topology;
use snn_workbench::Rng;

const NET: &str = r#"{
  "name": "stdp_small",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "C1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "P", "kind": "pool", "params": {"p": 2}},
    {"name": "FC1", "kind": "fc", "params": {"in": 128, "out": 32}, "neuron": "relu"},
    {"name": "FC2", "kind": "fc", "params": {"in": 32, "out": 4}}
  ]
}"#;

fn main() -> snn_workbench::Result<()> {
    let (train_set, test_set) = synth_rate_patterns(4, 400, [1, 8, 8], 3)?.split(0.25, 4)?;
    let cfg = StdpConfig {
        batch_size: 16,
        seed: 5,
        ..StdpConfig::with_timesteps(40)
    };
    let mut net = Network::new(parse_topology(NET)?, &mut Rng::new(cfg.seed))?;
    stdp::init_weights(&mut net, &cfg);

    println!("STDP-trainable layers: {:?}", stdp::trainable_layers(&net));
    for r in stdp::train(&mut net, &train_set, &cfg)? {
        println!(
            "{} epoch {}: {} updates, training firing rate {:.3}, mean adapted threshold {:.3}",
            r.layer, r.epoch, r.updates, r.firing_rate, r.mean_threshold
        );
    }

    let sim = cfg.sim();
    let mut clf = Network::new(stdp::suffix_classifier_spec(&net)?, &mut Rng::new(6))?;
    let agd = AgdConfig {
        lr: 0.05,
        epochs: 30,
        seed: 6,
        ..AgdConfig::default()
    };
    let hist = stdp::fit_classifier(&net, &mut clf, &train_set, Some(&test_set), &sim, &agd)?;
    println!(
        "classifier on STDP features: test accuracy {:.3}",
        hist.last().unwrap().test_accuracy.unwrap()
    );

    // fold the classifier back in and run the whole thing as one network
    stdp::install_classifier(&mut net, &clf, sim.timesteps)?;
    let ev = evaluate(&net, &test_set, &sim, 0)?;
    println!("end-to-end test accuracy {:.3}", ev.accuracy);
    for l in ev.layers(&net) {
        println!("  {:<4} input activity {:.3}", l.layer, l.spiking_activity);
    }
    Ok(())
}
