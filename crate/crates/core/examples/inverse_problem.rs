//! A noisy linear inverse problem solved by each guided method, compared
//! against the exact Gaussian posterior.

use nalgebra::DMatrix;

use mpgd::prelude::*;
use mpgd::rng;

fn main() -> Result<()> {
    let (d, k) = (32, 4);
    let manifold = LinearManifold::random(d, k, 1)?;
    let mut r = rng::seeded(2);
    let mean = rng::standard_normal(&mut r, k);
    let prior = MixturePrior::single_gaussian(manifold.clone(), mean, DMatrix::identity(k, k))?;
    let a = DMatrix::from_fn(3, d, |_, _| rng::normal_scalar(&mut r) / 2.0);
    let truth = prior.sample(1, &mut r).remove(0);
    let noise_var = 0.0025;
    let loss = LinearInverseLoss::simulate(a.clone(), &truth, noise_var, 1.0, &mut r)?;
    let posterior = prior.exact_linear_posterior(&a, &loss.measurement, noise_var)?;

    let schedule = NoiseSchedule::linear_beta(50, 0.0)?;
    let pair = AutoencoderPair::perfect_linear(manifold.clone());
    println!("{:<10} {:>12} {:>16} {:>14}", "method", "mean loss", "dist to post.", "off-manifold");
    for method in Method::ALL {
        let mut settings = GuidanceSettings::new(method, 0.3);
        settings.window = ActiveWindow::full();
        let chains = GuidedSampler::new(&prior, &schedule, &loss, Some(&pair), settings)?.run(32, 7)?;
        let n = chains.len() as f64;
        let mean_loss = chains.iter().map(|c| c.terminal_loss).sum::<f64>() / n;
        let dist = chains.iter().map(|c| (c.trajectory.terminal() - &posterior.mean).norm()).sum::<f64>() / n;
        let off = chains.iter().map(|c| manifold.orthogonal(&c.trajectory.terminal()).norm()).fold(0.0, f64::max);
        println!("{:<10} {mean_loss:>12.4e} {dist:>16.4} {off:>14.2e}", method.to_string());
    }
    Ok(())
}
