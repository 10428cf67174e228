//! Stochastic softmax: during training each wrong class is kept in the
//! normaliser with a learned, input-dependent probability, so confusable
//! classes get pushed apart harder. Compared here against a plain softmax.

use snn_workbench::agd::{train, AgdConfig};
use snn_workbench::data::synth_rate_patterns;
use snn_workbench::heads::{softmax, stochmax_loss, StochmaxParams};
use snn_workbench::network::{Network, SimConfig};
use snn_workbench::topology::{parse_topology, ClassifierKind};
use snn_workbench::{Rng, Tensor};

const NET: &str = r#"{
  "name": "head_demo",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "C1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "P", "kind": "pool", "params": {"p": 2}},
    {"name": "F", "kind": "fc", "params": {"in": 128, "out": 4}}
  ]
}"#;

fn main() -> snn_workbench::Result<()> {
    // the head in isolation
    let logits = Tensor::from_vec(&[3], vec![2.0, 1.5, -1.0])?;
    let features = Tensor::from_vec(&[2], vec![1.0, 0.5])?;
    let params = StochmaxParams::new(3, 2, 3.0);
    let out = stochmax_loss(&logits, &features, &params, 0, &mut Rng::new(0), false)?;
    println!("softmax probs {:?}", softmax(logits.data()));
    println!("retain probs  {:?}", params.retain_probs(&features)?);
    println!("inference loss {:.4}", out.loss);
    for seed in 0..4 {
        let o = stochmax_loss(
            &logits,
            &features,
            &StochmaxParams::new(3, 2, 0.0),
            0,
            &mut Rng::new(seed),
            true,
        )?;
        println!("training draw {seed}: mask {:?} loss {:.4}", o.mask, o.loss);
    }

    // the head inside a trained network
    let (train_set, test_set) = synth_rate_patterns(4, 400, [1, 8, 8], 8)?.split(0.25, 9)?;
    let cfg = AgdConfig {
        timesteps: 15,
        lr: 0.005,
        epochs: 6,
        seed: 2,
        ..AgdConfig::default()
    };
    for kind in [ClassifierKind::Softmax, ClassifierKind::Stochmax] {
        let mut spec = parse_topology(NET)?;
        spec.classifier = kind;
        let mut net = Network::new(spec, &mut Rng::new(2))?;
        let hist = train(&mut net, &train_set, Some(&test_set), &cfg)?;
        let last = hist.last().unwrap();
        println!(
            "{kind:?}: train loss {:.3}, test accuracy {:.3}",
            last.train_loss,
            last.test_accuracy.unwrap()
        );
        if let Some(p) = &net.stochmax {
            let fwd = net.forward(
                &test_set.image(0),
                &SimConfig::default().with_timesteps(15),
                &mut Rng::new(1),
            )?;
            let rho: Vec<String> = p
                .retain_probs(&fwd.head_input)?
                .iter()
                .map(|r| format!("{r:.2}"))
                .collect();
            println!("  retain probs on a test image (label {}): {rho:?}", test_set.labels[0]);
        }
    }
    Ok(())
}
