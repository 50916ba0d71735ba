//! Unguided DDIM sampling from the exact mixture denoiser.

use mpgd::prelude::*;

fn main() -> Result<()> {
    let manifold = LinearManifold::random(16, 2, 4)?;
    let prior = MixturePrior::random_mixture(manifold.clone(), 3, 2.0, 0.1, 5)?;
    for eta in [0.0, 1.0] {
        let schedule = NoiseSchedule::linear_beta(100, eta)?;
        let chains = sample_unconditional(&prior, &schedule, 6, 11)?;
        println!("eta = {eta}");
        for c in &chains {
            let x = c.terminal();
            let z = manifold.coordinates(&x);
            println!("  chain {}: latent ({:+.3}, {:+.3}), off-manifold {:.1e}", c.chain, z[0], z[1], manifold.orthogonal(&x).norm());
        }
    }
    Ok(())
}
