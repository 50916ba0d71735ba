//! Autoencoder projection of a gradient onto the data subspace, for a
//! perfect and a slightly perturbed linear autoencoder.

use mpgd::prelude::*;
use mpgd::rng;

fn main() -> Result<()> {
    let manifold = LinearManifold::random(24, 3, 8)?;
    let mut r = rng::seeded(9);
    let x = manifold.embed(&rng::standard_normal(&mut r, 3));
    let loss = QuadraticLoss::isotropic(rng::standard_normal(&mut r, 24), 1.0);
    for (name, pair) in [("perfect", AutoencoderPair::perfect_linear(manifold.clone())), ("perturbed", AutoencoderPair::perturbed(manifold.clone(), 0.05, 10)?)] {
        let (gap, angle) = pair.jacobian_identity_report(&x)?;
        let raw = loss.gradient(&x);
        let g = pair.projected_gradient(&x, &loss)?;
        println!("{name}: identity gap {gap:.2e}, principal angle gap {angle:.2e}");
        println!("  raw gradient normal part {:.3}, projected {:.2e}", manifold.orthogonal(&raw).norm(), manifold.orthogonal(&g).norm());
        println!("  reconstruction residual {:.2e}", (pair.reconstruct(&x) - &x).norm());
    }
    Ok(())
}
