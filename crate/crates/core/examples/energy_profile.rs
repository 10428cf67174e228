//! Energy accounting: ANN layers pay one MAC per operation, spiking layers
//! pay one accumulate per *active input* per time-step.

use snn_workbench::data::synth_rate_patterns;
use snn_workbench::energy::{self, total_energy, CostKind, EnergyConstants, LayerCost};
use snn_workbench::metrics::evaluate;
use snn_workbench::network::{Network, SimConfig};
use snn_workbench::topology::parse_topology;
use snn_workbench::Rng;

const NET: &str = r#"{
  "name": "profiled",
  "input_shape": [1, 8, 8],
  "layers": [
    {"name": "C1", "kind": "conv", "params": {"in": 1, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "C2", "kind": "conv", "params": {"in": 8, "out": 8, "k": 3}, "neuron": "lif"},
    {"name": "P", "kind": "pool", "params": {"p": 2}},
    {"name": "F", "kind": "fc", "params": {"in": 128, "out": 4}}
  ]
}"#;

fn main() -> snn_workbench::Result<()> {
    let k = EnergyConstants::default();
    println!("E_MAC = {} pJ, E_AC = {} pJ", k.e_mac, k.e_ac);

    // a hand-written cost table: one sparse spiking conv and an analog head
    let table = vec![
        LayerCost {
            layer: "conv".into(),
            is_conv: true,
            flops_ann: 10_000,
            cost: CostKind::Ac,
            s_a: Some(0.1),
            s_a_peak: None,
        },
        LayerCost {
            layer: "head".into(),
            is_conv: false,
            flops_ann: 500,
            cost: CostKind::Mac,
            s_a: None,
            s_a_peak: None,
        },
    ];
    for t in [1, 10, 50, 100] {
        let r = total_energy(&table, t, &k)?;
        println!(
            "T={t:>3}: E_ANN {:>8.1}  E_SNN {:>8.1}  EE {:>6.2}",
            r.e_ann, r.e_snn, r.ee
        );
    }

    // measured activity of a real (untrained) network, then a dimmer copy
    let data = synth_rate_patterns(4, 40, [1, 8, 8], 1)?;
    let net = Network::new(parse_topology(NET)?, &mut Rng::new(1))?;
    let sim = SimConfig::default().with_timesteps(20);
    let ev = evaluate(&net, &data, &sim, 0)?;
    let bright = energy::profile(&net, &ev.activity, 20, &k)?;
    print!("{bright}");

    let dim_sim = SimConfig {
        rate_factor: 0.3,
        ..sim
    };
    let dim = energy::profile(&net, &evaluate(&net, &data, &dim_sim, 0)?.activity, 20, &k)?;
    println!("input rate x0.3: EE {:.2} -> {:.2}", bright.ee, dim.ee);
    println!(
        "relative efficiency (dim vs bright) {:.2}",
        energy::relative_efficiency(&dim, &bright)
    );
    Ok(())
}
