//! Guided sampling in the latent space of an autoencoder, decoded at the end.

use mpgd::guidance::mpgd_ldm_sample;
use mpgd::prelude::*;
use mpgd::rng;

fn main() -> Result<()> {
    let manifold = LinearManifold::random(40, 5, 12)?;
    let prior = MixturePrior::random_mixture(manifold.clone(), 2, 1.5, 0.3, 13)?;
    let pair = AutoencoderPair::perfect_linear(manifold.clone());
    let target = rng::standard_normal(&mut rng::seeded(14), 40);
    let loss = QuadraticLoss::isotropic(target.clone(), 1.0);
    let schedule = NoiseSchedule::linear_beta(50, 0.0)?;
    let best = manifold.project(&target);
    for rho in [0.01_f64, 0.05, 0.2] {
        let samples = mpgd_ldm_sample(&prior, &schedule, &pair, &loss, StepSizeSchedule::constant(rho), 8, 15)?;
        let dist = samples.iter().map(|x| (x - &best).norm()).sum::<f64>() / samples.len() as f64;
        println!("rho {rho:<5} mean distance to the closest on-manifold point {dist:.4}");
    }
    Ok(())
}
