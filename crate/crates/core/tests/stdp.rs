mod common;

use common::stdp::{quiet, scalar_layer, scalar_trains};
use proptest::prelude::*;
use snn_workbench::agd::AgdConfig;
use snn_workbench::data::synth_blobs;
use snn_workbench::network::{Network, RunOptions};
use snn_workbench::stdp::{self, stdp_delta, ConvLayer, LayerTrains, StdpConfig};
use snn_workbench::topology::{parse_topology, TopologySpec};
use snn_workbench::{Error, Rng, Tensor};

#[test]
fn delta_matches_hand_evaluation() {
    let cfg = StdpConfig {
        eta: 0.01,
        tau: 5.0,
        offset: 0.4,
        ..StdpConfig::default()
    };
    // 0.01 * (exp(-lag/5) - 0.4) evaluated by hand
    let cases = [
        (0usize, 0.006),
        (5, -3.212_055_882_855_767_7e-4),
        (10, -2.646_647_167_633_873e-3),
    ];
    for (lag, want) in cases {
        let got = stdp_delta(7 + lag, 7, &cfg);
        assert!((got - want).abs() < 1e-12, "lag {lag}: {got} vs {want}");
    }
}

#[test]
fn zero_crossing_at_log_ratio() {
    // offset = e^-2, tau = 5 puts the crossing exactly at lag 10
    let cfg = StdpConfig {
        eta: 1.0,
        tau: 5.0,
        offset: (-2.0f64).exp(),
        ..StdpConfig::default()
    };
    assert!((cfg.zero_crossing() - 10.0).abs() < 1e-12);
    assert!(stdp_delta(10, 0, &cfg).abs() < 1e-15);
    assert!(stdp_delta(9, 0, &cfg) > 0.0);
    assert!(stdp_delta(11, 0, &cfg) < 0.0);
}

proptest! {
    #[test]
    fn delta_decreases_and_changes_sign_at_crossing(
        tau in 0.5f64..50.0, offset in 0.01f64..0.99, lag in 0usize..300,
    ) {
        let cfg = StdpConfig { eta: 0.1, tau, offset, ..StdpConfig::default() };
        let d0 = stdp_delta(lag, 0, &cfg);
        let d1 = stdp_delta(lag + 1, 0, &cfg);
        prop_assert!(d1 < d0 || (d0 - d1).abs() < 1e-15);
        let x = cfg.zero_crossing();
        if (lag as f64) < x - 1e-9 { prop_assert!(d0 > 0.0); }
        if (lag as f64) > x + 1e-9 { prop_assert!(d0 < 0.0); }
    }

    #[test]
    fn weights_stay_in_bounds(seed in 0u64..1000, eta in 0.01f64..5.0) {
        let mut rng = Rng::new(seed);
        let cfg = StdpConfig {
            eta,
            weight_bounds: [0.0, 1.0],
            updates_per_presentation: 2,
            ..StdpConfig::with_timesteps(12)
        };
        let mut layer = ConvLayer {
            weights: Tensor::from_vec(&[2, 2, 3, 3], (0..36).map(|_| rng.uniform()).collect()).unwrap(),
            stride: 1,
            padding: 1,
            thresholds: vec![0.5, 0.8],
        };
        let batch: Vec<LayerTrains> = (0..3)
            .map(|_| LayerTrains {
                pre: (0..12)
                    .map(|_| Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.bernoulli(0.4) as u8 as f32).collect()).unwrap())
                    .collect(),
                residual: None,
            })
            .collect();
        let mut rngs: Vec<Rng> = (0..3).map(|i| Rng::new(seed).fork(i)).collect();
        for _ in 0..3 {
            layer.train_batch(&batch, &cfg, &mut rngs).unwrap();
        }
        prop_assert!(layer.weights.data().iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
}

#[test]
fn causal_short_lag_potentiates() {
    // pre at t=0, the post neuron crosses at t=1
    let cfg = quiet(5);
    let mut layer = scalar_layer(0.6);
    let p = layer
        .present(&scalar_trains(5, &[0], &[1]), &cfg, &mut Rng::new(0))
        .unwrap();
    assert_eq!(p.post_spikes, vec![1]);
    assert_eq!(p.outputs[0][1].data(), &[1.0]);
    let applied = layer
        .train_batch(&[scalar_trains(5, &[0], &[1])], &cfg, &mut [Rng::new(0)])
        .unwrap();
    assert!(applied[0].data()[0] > 0.0);
    assert!(layer.weights.data()[0] > 0.6);
}

#[test]
fn causal_long_lag_depresses() {
    let cfg = StdpConfig { tau: 5.0, ..quiet(40) };
    let mut layer = scalar_layer(0.1);
    layer
        .train_batch(&[scalar_trains(40, &[0], &[30])], &cfg, &mut [Rng::new(0)])
        .unwrap();
    assert!(layer.weights.data()[0] < 0.1);
}

#[test]
fn pre_after_post_does_not_potentiate() {
    // post fires at t=0 with no earlier pre spike; pre only afterwards
    let cfg = quiet(10);
    let mut layer = scalar_layer(0.01);
    let late: Vec<usize> = (1..10).collect();
    let p = layer
        .present(&scalar_trains(10, &late, &[0]), &cfg, &mut Rng::new(0))
        .unwrap();
    assert_eq!(p.post_spikes, vec![1]);
    layer
        .train_batch(&[scalar_trains(10, &late, &[0])], &cfg, &mut [Rng::new(0)])
        .unwrap();
    assert!(layer.weights.data()[0] <= 0.01);
}

#[test]
fn batch_update_is_mean_of_sample_deltas() {
    let cfg = StdpConfig { tau: 4.0, ..quiet(16) };
    let mut rng = Rng::new(9);
    let layer = ConvLayer {
        weights: Tensor::from_vec(&[2, 2, 3, 3], (0..36).map(|_| rng.uniform_range(0.1, 0.6)).collect()).unwrap(),
        stride: 1,
        padding: 1,
        thresholds: vec![1.0],
    };
    let sample = |rng: &mut Rng, p: f32| LayerTrains {
        pre: (0..16)
            .map(|_| Tensor::from_vec(&[2, 5, 5], (0..50).map(|_| rng.bernoulli(p) as u8 as f32).collect()).unwrap())
            .collect(),
        residual: None,
    };
    let batch = [sample(&mut rng, 0.3), sample(&mut rng, 0.6)];
    let d1 = layer
        .present(&batch[0], &cfg, &mut Rng::new(1))
        .unwrap()
        .delta
        .remove(0);
    let d2 = layer
        .present(&batch[1], &cfg, &mut Rng::new(2))
        .unwrap()
        .delta
        .remove(0);
    assert!(d1.data().iter().any(|&v| v != 0.0) && d2.data().iter().any(|&v| v != 0.0));
    let mut trained = layer.clone();
    let applied = trained
        .train_batch(&batch, &cfg, &mut [Rng::new(1), Rng::new(2)])
        .unwrap();
    assert_eq!(applied.len(), 1);
    for i in 0..36 {
        let hand = (d1.data()[i] + d2.data()[i]) / 2.0;
        assert!((applied[0].data()[i] - hand).abs() < 1e-7);
        assert!((trained.weights.data()[i] - (layer.weights.data()[i] + hand)).abs() < 1e-6);
    }
}

#[test]
fn unrolled_layer_makes_k_times_n_updates() {
    for k in [1, 3] {
        for n in [1usize, 2] {
            let cfg = StdpConfig {
                updates_per_presentation: k,
                ..quiet(12)
            };
            let mut layer = ConvLayer {
                weights: Tensor::full(&[2, 2, 3, 3], 0.2),
                stride: 1,
                padding: 1,
                thresholds: vec![1.0; n],
            };
            let trains = LayerTrains {
                pre: (0..12).map(|_| Tensor::full(&[2, 4, 4], 1.0)).collect(),
                residual: None,
            };
            let applied = layer.train_batch(&[trains], &cfg, &mut [Rng::new(0)]).unwrap();
            assert_eq!(applied.len(), k * n, "k={k} n={n}");
        }
    }
}

#[test]
fn silent_second_step_contributes_nothing() {
    // step 1 never fires, so step 2 sees no pre spikes even when driven
    let cfg = quiet(8);
    let layer = ConvLayer {
        weights: Tensor::full(&[1, 1, 1, 1], 0.5),
        stride: 1,
        padding: 0,
        thresholds: vec![1e9, 1.0],
    };
    let drive: Vec<Tensor> = (0..8).map(|_| Tensor::full(&[1, 1, 1], 1.0)).collect();
    let trains = LayerTrains {
        pre: drive.clone(),
        residual: Some(vec![(0..8).map(|_| Tensor::zeros(&[1, 1, 1])).collect(), drive]),
    };
    let p = layer.present(&trains, &cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(p.post_spikes[0], 0);
    assert!(p.post_spikes[1] > 0);
    assert!(p.delta.iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn single_step_group_equals_plain_layer() {
    let cfg = StdpConfig {
        dropout_p: 0.3,
        ..StdpConfig::with_timesteps(10)
    };
    let trains = LayerTrains {
        pre: (0..10).map(|i| Tensor::full(&[2, 4, 4], (i % 2) as f32)).collect(),
        residual: None,
    };
    let mk = || ConvLayer {
        weights: Tensor::full(&[3, 2, 3, 3], 0.15),
        stride: 1,
        padding: 1,
        thresholds: vec![1.0],
    };
    let (mut a, mut b) = (mk(), mk());
    a.train_batch(std::slice::from_ref(&trains), &cfg, &mut [Rng::new(4)]).unwrap();
    b.train_batch(&[trains], &cfg, &mut [Rng::new(4)]).unwrap();
    assert_eq!(a.weights, b.weights);
}

#[test]
fn thresholds_adapt_homeostatically() {
    let cfg = StdpConfig {
        adapt_delta: 0.2,
        adapt_decay: 0.1,
        ..quiet(30)
    };
    let layer = scalar_layer(2.0);
    // one spike at t=0, then silence: threshold rises, then relaxes toward 1
    let p = layer
        .present(&scalar_trains(1, &[0], &[]), &cfg_with(&cfg, 1), &mut Rng::new(0))
        .unwrap();
    assert_eq!(p.post_spikes, vec![1]);
    assert!(p.thresholds[0][0] > 1.0);
    let long = layer
        .present(&scalar_trains(30, &[0], &[]), &cfg, &mut Rng::new(0))
        .unwrap();
    let after = long.thresholds[0][0];
    assert!(after > 1.0 && after < p.thresholds[0][0]);
    assert!((after - (1.0 + 0.2 * 0.9f32.powi(29))).abs() < 1e-5);
}

fn cfg_with(c: &StdpConfig, t: usize) -> StdpConfig {
    StdpConfig {
        timesteps: t,
        ..c.clone()
    }
}

fn tiny_net(n: usize, classes: usize) -> TopologySpec {
    parse_topology(&format!(
        r#"{{"name":"tiny-stdp","input_shape":[1,8,8],
            "layers":[
              {{"name":"Conv1","kind":"conv","params":{{"in":1,"out":4,"k":3}},"neuron":"lif"}},
              {{"name":"Conv2","kind":"conv","params":{{"in":4,"out":4,"k":3}},"neuron":"lif"}},
              {{"name":"Pool1","kind":"pool","params":{{"p":2}}}},
              {{"name":"FC1","kind":"fc","params":{{"in":64,"out":16}},"neuron":"relu"}},
              {{"name":"FC2","kind":"fc","params":{{"in":16,"out":{classes}}}}}],
            "backres":[{{"members":["Conv2"],"n":{n}}}],
            "skips":[{{"source":"Input","dest":"Conv2","mode":"add_zero_pad"}}]}}"#
    ))
    .unwrap()
}

fn stdp_cfg() -> StdpConfig {
    StdpConfig {
        batch_size: 8,
        ..StdpConfig::with_timesteps(20)
    }
}

#[test]
fn network_counters_report_k_times_n() {
    let ds = synth_blobs(3, 16, [1, 8, 8], 1).unwrap();
    for (n, k) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
        let mut net = Network::new(tiny_net(n, 3), &mut Rng::new(0)).unwrap();
        let cfg = StdpConfig {
            updates_per_presentation: k,
            ..stdp_cfg()
        };
        stdp::init_weights(&mut net, &cfg);
        let rep = stdp::train(&mut net, &ds, &cfg).unwrap();
        let conv2 = rep.iter().find(|r| r.layer == "Conv2").unwrap();
        assert_eq!(conv2.updates_per_presentation(), (k * n) as f64);
        let conv1 = rep.iter().find(|r| r.layer == "Conv1").unwrap();
        assert_eq!(conv1.updates_per_presentation(), k as f64);
    }
}

#[test]
fn network_training_is_deterministic_and_bounded() {
    let ds = synth_blobs(3, 16, [1, 8, 8], 2).unwrap();
    let run = |dropout: f64| {
        let mut net = Network::new(tiny_net(2, 3), &mut Rng::new(3)).unwrap();
        let cfg = StdpConfig {
            dropout_p: dropout,
            ..stdp_cfg()
        };
        stdp::init_weights(&mut net, &cfg);
        let before = net.weights.clone();
        stdp::train(&mut net, &ds, &cfg).unwrap();
        assert_ne!(before[0], net.weights[0], "Conv1 was not trained");
        assert_eq!(before[3], net.weights[3], "FC1 must stay frozen");
        net.weights
    };
    let a = run(0.0);
    assert_eq!(a, run(0.0));
    assert_eq!(run(0.5), run(0.5));
    for w in a[..2].iter().flatten() {
        assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn classifier_fits_frozen_features_and_installs_exactly() {
    let ds = synth_blobs(3, 48, [1, 8, 8], 5).unwrap();
    // frozen random (untrained) excitatory features
    let mut net = Network::new(tiny_net(1, 3), &mut Rng::new(7)).unwrap();
    let cfg = stdp_cfg();
    stdp::init_weights(&mut net, &cfg);
    let frozen = net.weights[..2].to_vec();

    let mut clf = Network::new(stdp::suffix_classifier_spec(&net).unwrap(), &mut Rng::new(8)).unwrap();
    let agd = AgdConfig {
        lr: 0.05,
        epochs: 40,
        batch_size: 8,
        ..AgdConfig::default()
    };
    let sim = cfg.sim();
    let hist = stdp::fit_classifier(&net, &mut clf, &ds, None, &sim, &agd).unwrap();
    assert_eq!(hist.last().unwrap().train_accuracy, 1.0);
    assert_eq!(net.weights[..2], frozen[..]);

    // installing into the count-fed network reproduces the rate-fed logits
    let feats = stdp::spike_features(&net, &ds, &sim, 11).unwrap();
    stdp::install_classifier(&mut net, &clf, sim.timesteps).unwrap();
    for (i, f) in feats.iter().enumerate().take(10) {
        let direct = clf
            .forward(
                &f.clone().reshape(&clf.spec().input_shape).unwrap(),
                &sim,
                &mut Rng::new(0),
            )
            .unwrap()
            .logits;
        let full = net
            .run(
                &ds.image(i),
                &sim,
                &mut Rng::new(11).fork(i as u64),
                RunOptions::default(),
            )
            .unwrap()
            .logits
            .remove(0);
        assert!(
            direct.max_abs_diff(&full) < 1e-4 * (1.0 + direct.max().abs()),
            "sample {i}"
        );
    }
}

#[test]
fn classifier_shape_mismatch_is_a_config_error() {
    let ds = synth_blobs(3, 6, [1, 8, 8], 5).unwrap();
    let net = Network::new(tiny_net(1, 3), &mut Rng::new(7)).unwrap();
    let wrong = parse_topology(
        r#"{"name":"wrong","input_shape":[32,1,1],
            "layers":[{"name":"F","kind":"fc","params":{"in":32,"out":3}}]}"#,
    )
    .unwrap();
    let mut clf = Network::new(wrong, &mut Rng::new(0)).unwrap();
    let err = stdp::fit_classifier(&net, &mut clf, &ds, None, &stdp_cfg().sim(), &AgdConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn convnn_classifier_takes_2304_features() {
    let spec = snn_workbench::topology::fixtures::load("convnn_resnet2").unwrap();
    let net = Network::zeroed(spec).unwrap();
    let fc1 = net
        .plan()
        .steps
        .iter()
        .find(|s| net.spec().layers[s.layer].name == "FC1")
        .unwrap();
    assert_eq!(fc1.input_shape.iter().product::<usize>(), 2304);
    // it consumes exactly the pooled two-branch ResNet2 feature map
    let resnet = Network::zeroed(snn_workbench::topology::fixtures::load("stdp_resnet2").unwrap()).unwrap();
    let clf = stdp::suffix_classifier_spec(&resnet).unwrap();
    assert_eq!(clf.input_shape.iter().product::<usize>(), 72 * 16 * 16);
}
