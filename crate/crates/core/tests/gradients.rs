mod common;

use common::grad::{analog_fd, random_input, ANN};
use common::{ann_forward_f64, weights_f64};
use snn_workbench::heads::softmax_loss;
use snn_workbench::network::{Network, SimConfig};
use snn_workbench::topology::parse_topology;
use snn_workbench::Rng;

#[test]
fn f64_oracle_agrees_with_engine_forward() {
    let spec = parse_topology(ANN).unwrap();
    let net = Network::new(spec, &mut Rng::new(1)).unwrap();
    let x = random_input(&[2, 6, 6], &mut Rng::new(2));
    let xf: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let ours = net.forward(&x, &SimConfig::default(), &mut Rng::new(0)).unwrap().logits;
    let oracle = ann_forward_f64(&net, &xf, &weights_f64(&net));
    for (a, b) in ours.data().iter().zip(&oracle) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn analog_gradients_match_central_differences() {
    let s = analog_fd(100, 1e-3);
    assert!(s.failure.is_none(), "{}", s.failure.unwrap());
    assert!(s.checked >= 100, "only {} non-degenerate checks", s.checked);
    eprintln!("checked {} entries, worst relative error {:.2e}", s.checked, s.worst);
}

#[test]
fn zero_surrogate_blocks_gradients_upstream_of_spiking_layers() {
    let spec = parse_topology(
        r#"{"name":"h","input_shape":[1,4,4],
            "layers":[{"name":"A","kind":"conv","params":{"in":1,"out":2,"k":3},"neuron":"relu"},
                      {"name":"S","kind":"conv","params":{"in":2,"out":2,"k":3},"neuron":"lif"},
                      {"name":"F","kind":"fc","params":{"in":32,"out":2},"neuron":"none"}]}"#,
    )
    .unwrap();
    let mut net = Network::new(spec, &mut Rng::new(4)).unwrap();
    net.thresholds[1] = vec![0.05];
    let cfg = SimConfig {
        gamma: 0.0,
        ..SimConfig::default().with_timesteps(6)
    };
    let x = random_input(&[1, 4, 4], &mut Rng::new(5));
    let (out, tape) = net.forward_with_tape(&x, &cfg, &mut Rng::new(6)).unwrap();
    assert!(out.head_input.sum() > 0.0, "fixture should spike");
    let (_, gl) = softmax_loss(&out.logits, 0).unwrap();
    let g = net.backward(&tape, &gl, None, &cfg).unwrap();
    assert!(g.weights[0].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.weights[1].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.weights[2].as_ref().unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn prefix_output_does_not_depend_on_timesteps() {
    let spec = snn_workbench::topology::fixtures::load("hybrid_vgg9").unwrap();
    let small = spec.input_shape;
    let net = Network::new(spec, &mut Rng::new(1)).unwrap();
    let x = random_input(&small, &mut Rng::new(2));
    let mut seen = Vec::new();
    for t in [1usize, 3] {
        let mut first = None;
        let mut obs = |e: &snn_workbench::network::StepEvent<'_>| {
            if e.step == 0 {
                first = Some(e.output.clone());
            }
        };
        net.run(
            &x,
            &SimConfig::default().with_timesteps(t),
            &mut Rng::new(0),
            snn_workbench::network::RunOptions {
                observer: Some(&mut obs),
                stop_after: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        seen.push(first.unwrap());
    }
    assert_eq!(seen[0], seen[1]);
}
