//! Rate coding: each pixel intensity becomes the per-step firing
//! probability of an independent Bernoulli (Poisson) train.

use snn_workbench::encoding::{poisson_encode, PoissonEncoder};
use snn_workbench::{Rng, Tensor};

fn main() -> snn_workbench::Result<()> {
    let img = Tensor::from_vec(&[1, 1, 5], vec![0.0, 0.1, 0.5, 0.9, 1.0])?;
    let train = poisson_encode(&img, 40, &mut Rng::new(7))?;
    for (i, p) in img.data().iter().enumerate() {
        let row: String = (0..train.timesteps())
            .map(|t| if train.step_slice(t)[i] > 0.0 { '|' } else { '.' })
            .collect();
        println!("p={p:.1} {row}");
    }

    println!("\nmeasured rate vs intensity, T = 2000");
    let long = poisson_encode(&img, 2000, &mut Rng::new(8))?;
    for (p, c) in img.data().iter().zip(long.counts().data()) {
        println!("  {p:.1} -> {:.3}", c / 2000.0);
    }

    // a rate factor below 1 dims the whole input
    let dim = PoissonEncoder::new(0.25)?.encode(&img, 2000, &mut Rng::new(8))?;
    println!(
        "rate factor 0.25, brightest pixel -> {:.3}",
        dim.counts().data()[4] / 2000.0
    );

    // same seed, same train
    let again = poisson_encode(&img, 40, &mut Rng::new(7))?;
    assert_eq!(again.as_tensor(), train.as_tensor());
    Ok(())
}
