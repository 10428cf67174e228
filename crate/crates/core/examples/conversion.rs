//! Train a small ReLU net, convert it to integrate-and-fire by threshold
//! balancing, and watch SNN/ANN agreement improve with simulation length.

use snn_workbench::agd::{train, AgdConfig, Optimizer};
use snn_workbench::convert::{convert, run_converted, ConversionConfig};
use snn_workbench::data::synth_blobs;
use snn_workbench::energy;
use snn_workbench::network::Network;
use snn_workbench::topology::parse_topology;
use snn_workbench::Rng;

const ANN: &str = r#"{
  "name": "relu_backres",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "C1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "relu"},
    {"name": "C2", "kind": "conv", "params": {"in": 8, "out": 8, "k": 3}, "neuron": "relu"},
    {"name": "P", "kind": "pool", "params": {"p": 2}},
    {"name": "F", "kind": "fc", "params": {"in": 128, "out": 4}}
  ],
  "backres": [{"members": ["C2"], "n": 2}]
}"#;

fn main() -> snn_workbench::Result<()> {
    let (train_set, test_set) = synth_blobs(4, 300, [1, 8, 8], 5)?.split(0.33, 6)?;
    let mut ann = Network::new(parse_topology(ANN)?, &mut Rng::new(1))?;
    let cfg = AgdConfig {
        lr: 0.01,
        epochs: 20,
        optimizer: Optimizer::SgdMomentum,
        seed: 1,
        ..AgdConfig::default()
    };
    let hist = train(&mut ann, &train_set, Some(&test_set), &cfg)?;
    println!("ANN test accuracy {:.3}", hist.last().unwrap().test_accuracy.unwrap());

    let conv = ConversionConfig {
        calibration_timesteps: 1000,
        calibration_samples: 32,
        ..ConversionConfig::default()
    };
    let sweep = [25, 100, 400, 1000];
    let (snn, report) = convert(&ann, &train_set, &test_set, &sweep, &conv)?;
    for t in &report.thresholds {
        println!("threshold {:<3} {:?}", t.layer, t.thresholds);
    }
    println!("{:>6} {:>9} {:>10}", "T", "accuracy", "agreement");
    for p in &report.sweep {
        println!("{:>6} {:>9.3} {:>10.3}", p.timesteps, p.accuracy, p.agreement);
    }

    let run = run_converted(&snn, &test_set, &[100], 0)?;
    print!("{}", energy::profile(&snn, &run.activity, 100, &Default::default())?);
    Ok(())
}
