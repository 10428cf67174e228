//! Checkpoints are a directory of raw little-endian f32 blobs plus a JSON
//! manifest with the topology, thresholds, provenance and sha256 of every
//! blob. Loading verifies all of it.

use std::fs;

use snn_workbench::checkpoint::{self, Provenance};
use snn_workbench::network::Network;
use snn_workbench::topology::fixtures;
use snn_workbench::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("snnwb-example-{}", std::process::id()));
    let spec = fixtures::load("agd_vgg3x2").expect("bundled");
    let net = Network::new(spec.clone(), &mut Rng::new(11))?;
    let prov = Provenance {
        trainer: "example".into(),
        seed: 11,
        config: serde_json::json!({"note": "untrained"}),
    };
    let manifest = checkpoint::save(&net, &dir, prov)?;
    println!("saved {} to {}", spec.name, dir.display());
    for (name, entry) in &manifest.layers {
        println!("  {name:<6} {:?} {}", entry.shape, &entry.sha256[..12]);
    }

    let (back, _) = checkpoint::load(&dir)?;
    assert_eq!(back.weights, net.weights);
    println!("reload: weights identical");

    // a different unroll count is a different network
    match checkpoint::load_into(&dir, &spec.with_unroll(0, 4)?) {
        Err(e) => println!("load into n=4: {e}"),
        Ok(_) => unreachable!(),
    }

    // corrupt one byte of one blob
    let blob = dir.join(&manifest.layers.values().next().unwrap().file);
    let mut bytes = fs::read(&blob)?;
    bytes[0] ^= 1;
    fs::write(&blob, bytes)?;
    println!("after corruption: {}", checkpoint::load(&dir).unwrap_err());

    fs::remove_dir_all(&dir).ok();
    Ok(())
}
