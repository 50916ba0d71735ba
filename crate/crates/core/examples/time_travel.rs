//! Multi-step inner optimization and time travel on a target far from the data.

use mpgd::harness::LossConfig;
use mpgd::prelude::*;

fn main() -> Result<()> {
    let mut base = ExperimentConfig::linear_inverse(32, 4, Method::MpgdAe, 50, 16);
    base.loss = LossConfig::QuadraticTarget { weight: 1.0, distance: 10.0, normal_offset: 0.0, seed: 3 };
    base.window = [1.0, 0.0];
    base.step_size = StepSizeSchedule::constant(0.05);
    for (inner, optimizer, travel) in [(1, OptimizerKind::GradientDescent, 0), (5, OptimizerKind::GradientDescent, 0), (5, OptimizerKind::ConjugateGradient, 0), (1, OptimizerKind::GradientDescent, 3)] {
        let mut cfg = base.clone();
        cfg.inner = InnerOptimizer { steps: inner, optimizer };
        cfg.travel = travel;
        let rec = run_experiment(&cfg, None)?.record;
        println!("inner {inner} {optimizer:?}, travel {travel}: mean loss {:.4}, loss gradients {}", rec.mean_loss(), rec.telemetry.counters.loss_gradients);
    }
    Ok(())
}
