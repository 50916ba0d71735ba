//! One DPS step against one MPGD step from the same state and noise, with
//! the analytic distance bound.

use nalgebra::DMatrix;

use mpgd::prelude::*;
use mpgd::rng;

fn main() -> Result<()> {
    let manifold = LinearManifold::random(32, 4, 3)?;
    let prior = MixturePrior::random_mixture(manifold, 3, 1.5, 0.5, 4)?;
    let schedule = NoiseSchedule::linear_beta(100, 0.5)?;
    let mut r = rng::seeded(5);
    let q = DMatrix::from_fn(32, 32, |_, _| rng::normal_scalar(&mut r));
    let loss = QuadraticLoss::new(q.tr_mul(&q) / 32.0, rng::standard_normal(&mut r, 32))?;
    println!("{:>4} {:>12} {:>12} {:>10}", "t", "distance", "bound", "kappa");
    for t in [100, 75, 50, 25, 10, 1] {
        let x = rng::standard_normal(&mut r, 32);
        let noise = rng::standard_normal(&mut r, 32);
        let a = bound_audit(&prior, &schedule, t, &x, &loss, 0.05, &noise)?;
        println!("{t:>4} {:>12.4e} {:>12.4e} {:>10.3}", a.distance, a.bound, a.kappa);
    }
    Ok(())
}
