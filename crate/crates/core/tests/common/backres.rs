//! A conv BackRes block next to the same graph written out layer by layer.

use snn_workbench::network::Network;
use snn_workbench::topology::{parse_topology, BackResGroup, TopologySpec};
use snn_workbench::Rng;

fn base_doc(middle: &str, fc_in: usize) -> String {
    format!(
        r#"{{"name":"br","input_shape":[1,6,6],
            "layers":[{{"name":"C1","kind":"conv","params":{{"in":1,"out":4,"k":3}},"neuron":"lif"}},
                      {middle},
                      {{"name":"P","kind":"pool","params":{{"p":2}}}},
                      {{"name":"F","kind":"fc","params":{{"in":{fc_in},"out":3}},"neuron":"none"}}]}}"#
    )
}

/// BackRes group of one conv repeated `n` times.
pub fn tied(n: usize) -> TopologySpec {
    let middle = r#"{"name":"C2","kind":"conv","params":{"in":4,"out":4,"k":3},"neuron":"lif"}"#;
    let mut s = parse_topology(&base_doc(middle, 36)).unwrap();
    s.backres_groups = vec![BackResGroup {
        members: vec!["C2".into()],
        n,
    }];
    s.validate().unwrap();
    s
}

/// The same graph written out as `n` separate layers.
pub fn untied(n: usize) -> TopologySpec {
    let middle: Vec<String> = (1..=n)
        .map(|k| format!(r#"{{"name":"C2_{k}","kind":"conv","params":{{"in":4,"out":4,"k":3}},"neuron":"lif"}}"#))
        .collect();
    parse_topology(&base_doc(&middle.join(","), 36)).unwrap()
}

pub fn pair(n: usize, seed: u64) -> (Network, Network) {
    let mut a = Network::new(tied(n), &mut Rng::new(seed)).unwrap();
    let mut b = Network::zeroed(untied(n)).unwrap();
    // amplify the shared conv so spikes reach the head
    a.weights[1].as_mut().unwrap().scale(3.0);
    b.weights[0] = a.weights[0].clone();
    b.weights[n + 2] = a.weights[3].clone();
    let th: Vec<f32> = (0..n).map(|k| 0.6 + 0.2 * k as f32).collect();
    a.thresholds[1] = th.clone();
    a.thresholds[0] = vec![0.7];
    b.thresholds[0] = vec![0.7];
    for k in 0..n {
        b.weights[1 + k] = a.weights[1].clone();
        b.thresholds[1 + k] = vec![th[k]];
    }
    (a, b)
}
