//! Noisy samples of subspace data sit in a thin shell around the subspace.
//!
//! Prints the band width and the empirical pass rate for a few noise levels.

use mpgd::prelude::*;
use mpgd::rng;
use mpgd::sampler::forward_sample;

fn main() -> Result<()> {
    let manifold = LinearManifold::random(64, 8, 1)?;
    let prior = MixturePrior::random_mixture(manifold.clone(), 3, 1.5, 0.5, 2)?;
    let mut r = rng::seeded(3);
    let delta = 0.05;
    let eps = concentration_epsilon(delta, manifold.codim())?;
    println!("band half-width {eps:.4} for delta {delta}, {} normal dims", manifold.codim());
    for ab in [0.1, 0.5, 0.9, 0.99] {
        let n = 5000;
        let hits = prior
            .sample(n, &mut r)
            .iter()
            .filter(|x0| shell_band_test(&forward_sample(x0, ab, &mut r), &manifold, ab, eps).unwrap_or(false))
            .count();
        println!("alpha_bar {ab:>5}: radius {:.3}, in band {:.4}", manifold.shell_radius(ab), hits as f64 / n as f64);
    }
    Ok(())
}
