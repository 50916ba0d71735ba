//! Guided runs through the experiment harness.

use nalgebra::DVector;

use mpgd::geometry::concentration_epsilon;
use mpgd::guidance::{GuidanceSettings, GuidedSampler, Method, StepSizeMode, StepSizeSchedule, ZeroLoss};
use mpgd::harness::{run_experiment, AeConfig, ExperimentConfig, LossConfig};
use mpgd::prior::MixturePrior;
use mpgd::geometry::LinearManifold;
use mpgd::rng;
use mpgd::sampler::{forward_sample, sample_unconditional, NoiseSchedule};

#[test]
fn unguided_clean_estimates_stay_on_manifold() {
    let m = LinearManifold::random(20, 4, 3).unwrap();
    let prior = MixturePrior::random_mixture(m.clone(), 3, 1.5, 0.3, 4).unwrap();
    let s = NoiseSchedule::linear_beta(30, 0.3).unwrap();
    for c in sample_unconditional(&prior, &s, 5, 1).unwrap() {
        for step in &c.steps {
            assert!(m.orthogonal(&DVector::from_column_slice(&step.x0)).norm() < 1e-8);
        }
    }
}

#[test]
fn forward_process_respects_band() {
    let m = LinearManifold::random(40, 6, 5).unwrap();
    let prior = MixturePrior::random_mixture(m.clone(), 2, 1.0, 0.5, 6).unwrap();
    let delta = 0.05;
    let eps = concentration_epsilon(delta, m.codim()).unwrap();
    let mut r = rng::seeded(7);
    let n = 2000;
    let ab = 0.4;
    let hits = prior.sample(n, &mut r).iter().filter(|x0| mpgd::geometry::shell_band_test(&forward_sample(x0, ab, &mut r), &m, ab, eps).unwrap()).count();
    let floor = 1.0 - delta - 3.0 * (delta * (1.0 - delta) / n as f64).sqrt();
    assert!(hits as f64 / n as f64 >= floor);
}

#[test]
fn zero_loss_guidance_reproduces_ddim() {
    let m = LinearManifold::random(10, 2, 1).unwrap();
    let prior = MixturePrior::random_mixture(m.clone(), 2, 1.0, 0.5, 2).unwrap();
    let s = NoiseSchedule::linear_beta(15, 0.0).unwrap();
    let pair = mpgd::autoencoder::AutoencoderPair::perfect_linear(m);
    let loss = ZeroLoss(10);
    let base = GuidedSampler::new(&prior, &s, &loss, Some(&pair), GuidanceSettings::new(Method::Ddim, 1.0)).unwrap().run(3, 9).unwrap();
    for method in [Method::Dps, Method::Mpgd, Method::MpgdAe, Method::MpgdZ] {
        let out = GuidedSampler::new(&prior, &s, &loss, Some(&pair), GuidanceSettings::new(method, 0.3)).unwrap().run(3, 9).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert_eq!(a.trajectory.terminal, b.trajectory.terminal, "{method}");
        }
    }
}

#[test]
fn guided_terminal_loss_beats_unguided() {
    let mut cfg = ExperimentConfig::linear_inverse(32, 4, Method::MpgdAe, 30, 40);
    cfg.window = [1.0, 0.0];
    cfg.step_size = StepSizeSchedule::constant(0.2);
    let guided = run_experiment(&cfg, None).unwrap().record;
    cfg.method = Method::Ddim;
    let plain = run_experiment(&cfg, None).unwrap().record;
    assert!(guided.mean_loss() < plain.mean_loss());
}

#[test]
fn perturbed_autoencoder_and_step_modes_run() {
    for mode in [StepSizeMode::LossNormalized, StepSizeMode::LinearDecay] {
        let mut cfg = ExperimentConfig::linear_inverse(16, 3, Method::MpgdZ, 10, 3);
        cfg.ae = AeConfig::Perturbed { scale: 0.05, seed: 4 };
        cfg.step_size = StepSizeSchedule { mode, rho: 0.05, match_dps: false };
        let rec = run_experiment(&cfg, None).unwrap().record;
        assert!(!rec.failed);
        assert!(rec.chains.iter().all(|c| c.loss.is_finite()));
    }
}

#[test]
fn quadratic_target_and_latent_diffusion() {
    let mut cfg = ExperimentConfig::linear_inverse(16, 3, Method::MpgdLdm, 20, 4);
    cfg.loss = LossConfig::QuadraticTarget { weight: 1.0, distance: 3.0, normal_offset: 1.0, seed: 2 };
    let out = run_experiment(&cfg, None).unwrap();
    let exp = cfg.build().unwrap();
    for c in &out.record.chains {
        assert!(exp.manifold.orthogonal(&DVector::from_column_slice(&c.terminal)).norm() < 1e-10);
    }
    assert!(out.curves.is_empty());
}

#[test]
fn shipped_configs_load_and_build() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") && !path.to_string_lossy().ends_with("schema.json") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            cfg.validate().unwrap();
            cfg.build().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
