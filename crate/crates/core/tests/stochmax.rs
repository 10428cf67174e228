use snn_workbench::agd::{train, AgdConfig};
use snn_workbench::data::synth_rate_patterns;
use snn_workbench::heads::{stochmax_loss, StochmaxParams};
use snn_workbench::network::Network;
use snn_workbench::topology::{parse_topology, ClassifierKind};
use snn_workbench::{Rng, Tensor};

#[test]
fn training_step_raises_target_retain_probability() {
    let logits = Tensor::from_vec(&[3], vec![0.2, 0.5, -0.1]).unwrap();
    let h = Tensor::from_vec(&[2], vec![1.0, 0.3]).unwrap();
    let params = StochmaxParams::new(3, 2, 0.0);
    for seed in 0..20 {
        let out = stochmax_loss(&logits, &h, &params, 1, &mut Rng::new(seed), true).unwrap();
        // descent direction on b_psi[target] is upward
        assert!(
            out.grad_psi.b_psi.data()[1] < 0.0,
            "seed {seed}: {:?}",
            out.grad_psi.b_psi.data()
        );
    }
}

#[test]
fn stochmax_network_learns_instead_of_collapsing() {
    let doc = r#"{"name":"sm","input_shape":[1,8,8],
      "layers":[{"name":"C1","kind":"conv","params":{"in":1,"out":8,"k":3},"neuron":"lif"},
                {"name":"P","kind":"pool","params":{"p":2}},
                {"name":"F","kind":"fc","params":{"in":128,"out":4}}]}"#;
    let (tr, te) = synth_rate_patterns(4, 400, [1, 8, 8], 8)
        .unwrap()
        .split(0.25, 9)
        .unwrap();
    let mut spec = parse_topology(doc).unwrap();
    spec.classifier = ClassifierKind::Stochmax;
    let mut net = Network::new(spec, &mut Rng::new(2)).unwrap();
    let cfg = AgdConfig {
        timesteps: 15,
        lr: 0.005,
        epochs: 6,
        seed: 2,
        ..AgdConfig::default()
    };
    let hist = train(&mut net, &tr, Some(&te), &cfg).unwrap();
    let acc = hist.last().unwrap().test_accuracy.unwrap();
    assert!(acc >= 0.85, "test accuracy {acc}");
    // a collapsed encoder drives every retain probability towards zero
    let sim = cfg.sim();
    let p = net.stochmax.as_ref().unwrap();
    for i in 0..8 {
        let out = net.forward(&te.image(i), &sim, &mut Rng::new(i as u64)).unwrap();
        let rho = p.retain_probs(&out.head_input).unwrap();
        assert!(rho[te.labels[i]] > 0.1, "image {i}: {rho:?}");
    }
}
