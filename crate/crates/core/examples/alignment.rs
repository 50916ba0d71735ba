//! Off-manifold deviation and score alignment along DPS and MPGD trajectories.

use mpgd::harness::run_experiment;
use mpgd::prelude::*;

fn main() -> Result<()> {
    for method in [Method::Dps, Method::Mpgd, Method::MpgdAe] {
        let cfg = ExperimentConfig::linear_inverse(64, 8, method, 20, 4);
        let exp = cfg.build()?;
        let out = run_experiment(&cfg, None)?;
        println!("{method}");
        let traj = &out.trajectories[0];
        let align = alignment_curve(traj, &exp.schedule)?;
        for p in out.curves[0].points.iter().step_by(4) {
            let cos = align.iter().find(|(t, _)| *t == p.t).and_then(|(_, c)| *c);
            println!(
                "  t {:>3}: shell residual {:>8}, x0 off-manifold {:.1e}, cosine {}",
                p.t,
                p.shell_residual.map_or("-".into(), |v| format!("{v:.4}")),
                p.off_manifold_norm,
                cos.map_or("-".into(), |v| format!("{v:+.3}"))
            );
        }
    }
    Ok(())
}
