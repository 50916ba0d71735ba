//! Configuration, orchestration, output files and self-checks.

mod config;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{AeConfig, AlphaBarMode, Experiment, ExperimentConfig, LossConfig, ManifoldConfig, OperatorMode, OutputConfig, PriorConfig, ScheduleConfig, DEFAULT_NOISE_VAR};
pub use verify::{verify, Check, Suite, VerifyReport};

use crate::diagnostics::{deviation_curve, write_diagnostics_csv, DeviationCurve};
use crate::error::{Error, Result};
use crate::guidance::{ChainResult, GuidedSampler, StepCounters};
use crate::rng::RNG_ALGORITHM;
use crate::sampler::{write_trajectories_csv, StateSpace, TrajectoryRecord};

/// Version of the `run.json` layout.
pub const RECORD_SCHEMA_VERSION: u32 = 1;

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const RECORD_FILE: &str = "run.json";

/// Process exit codes used by the command-line tool.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const NUMERICAL: i32 = 2;
    pub const VERIFICATION: i32 = 3;
}

/// Maps an error to the exit code it should produce.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Json(_) | Error::Io(_) | Error::Csv(_) => exit_code::CONFIG,
        _ => exit_code::NUMERICAL,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub terminal: Vec<f64>,
    pub loss: f64,
    pub counters: StepCounters,
    pub line_search_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub chain: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputFiles {
    pub trajectories: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub wall_clock_seconds: f64,
    pub workers: usize,
    pub counters: StepCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub library_version: String,
    pub rng_algorithm: String,
    pub method: String,
    pub master_seed: u64,
    pub chains: Vec<ChainSummary>,
    pub failures: Vec<ChainFailure>,
    pub failed: bool,
    pub files: OutputFiles,
    pub telemetry: Telemetry,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn mean_loss(&self) -> f64 {
        self.chains.iter().map(|c| c.loss).sum::<f64>() / self.chains.len().max(1) as f64
    }
}

/// A finished run: the record plus the in-memory trajectories and curves.
pub struct RunOutput {
    pub record: RunRecord,
    pub trajectories: Vec<TrajectoryRecord>,
    pub curves: Vec<DeviationCurve>,
}

/// Runs every chain of `config`. `workers = None` uses the global pool.
///
/// Chains failing with a numerical error are listed in `failures` and the
/// record is flagged; the remaining chains are still reported.
pub fn run_experiment(config: &ExperimentConfig, workers: Option<usize>) -> Result<RunOutput> {
    let exp = config.build()?;
    let sampler = GuidedSampler::new(&exp.prior, &exp.schedule, exp.loss.as_ref(), Some(&exp.pair), exp.settings)?;
    let start = Instant::now();
    let run = || -> Vec<Result<ChainResult>> { (0..config.chains).into_par_iter().map(|i| sampler.run_chain(i, config.master_seed)).collect() };
    let (results, used) = match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::config("workers", e.to_string()))?;
            (pool.install(run), n)
        }
        None => (run(), rayon::current_num_threads()),
    };
    let elapsed = start.elapsed().as_secs_f64();

    let mut chains = Vec::new();
    let mut failures = Vec::new();
    let mut trajectories = Vec::new();
    let mut total = StepCounters::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => {
                total.merge(&c.counters);
                chains.push(ChainSummary {
                    chain: i,
                    terminal: c.trajectory.terminal.clone(),
                    loss: c.terminal_loss,
                    counters: c.counters,
                    line_search_failures: c.line_search_failures,
                });
                trajectories.push(c.trajectory);
            }
            Err(e @ Error::Config { .. }) => return Err(e),
            Err(e) => failures.push(ChainFailure { chain: i, error: e.to_string() }),
        }
    }
    let curves = trajectories
        .iter()
        .filter(|t| t.space == StateSpace::Ambient)
        .map(|t| deviation_curve(t, &exp.manifold, &exp.schedule))
        .collect::<Result<Vec<_>>>()?;

    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        config_hash: config.hash()?,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        method: config.method.to_string(),
        master_seed: config.master_seed,
        failed: !failures.is_empty(),
        chains,
        failures,
        files: OutputFiles::default(),
        telemetry: Telemetry { wall_clock_seconds: elapsed, workers: used, counters: total },
    };
    Ok(RunOutput { record, trajectories, curves })
}

/// Output switches for [`emit_outputs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitOptions {
    pub trajectories: bool,
    pub force: bool,
}

/// Writes `trajectories.csv`, `diagnostics.csv` and `run.json` under `dir`.
/// Existing files are only replaced when `force` is set.
pub fn emit_outputs(output: &mut RunOutput, config: &ExperimentConfig, dir: &Path, options: EmitOptions) -> Result<()> {
    let exp = config.build()?;
    fs::create_dir_all(dir)?;
    let targets: Vec<&str> = if options.trajectories { vec![TRAJECTORIES_FILE, DIAGNOSTICS_FILE, RECORD_FILE] } else { vec![DIAGNOSTICS_FILE, RECORD_FILE] };
    if !options.force {
        if let Some(existing) = targets.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(Error::config("out", format!("{} exists; pass --force to overwrite", existing.display())));
        }
    }
    let mut files = OutputFiles::default();
    if options.trajectories {
        let path = dir.join(TRAJECTORIES_FILE);
        write_trajectories_csv(fs::File::create(&path)?, &output.trajectories, &exp.manifold, &exp.schedule)?;
        files.trajectories = Some(PathBuf::from(TRAJECTORIES_FILE));
    }
    let path = dir.join(DIAGNOSTICS_FILE);
    write_diagnostics_csv(fs::File::create(&path)?, config.method.name(), &output.curves)?;
    files.diagnostics = Some(PathBuf::from(DIAGNOSTICS_FILE));
    output.record.files = files;
    fs::write(dir.join(RECORD_FILE), output.record.to_json()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::Method;

    fn small(method: Method) -> ExperimentConfig {
        ExperimentConfig::linear_inverse(12, 3, method, 10, 4)
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let c = small(Method::Ddim);
        let a = run_experiment(&c, Some(1)).unwrap().record;
        let b = run_experiment(&c, Some(3)).unwrap().record;
        assert_eq!(a.chains, b.chains);
    }

    #[test]
    fn dps_counts_jacobians_and_mpgd_does_not() {
        let dps = run_experiment(&small(Method::Dps), None).unwrap().record;
        assert!(dps.chains.iter().all(|c| c.counters.jacobian_products == 10));
        let mpgd = run_experiment(&small(Method::Mpgd), None).unwrap().record;
        assert!(mpgd.chains.iter().all(|c| c.counters.jacobian_products == 0));
    }

    #[test]
    fn emits_three_files_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(Method::MpgdAe);
        let mut out = run_experiment(&c, None).unwrap();
        let opts = EmitOptions { trajectories: true, force: false };
        emit_outputs(&mut out, &c, dir.path(), opts).unwrap();
        for f in [TRAJECTORIES_FILE, DIAGNOSTICS_FILE, RECORD_FILE] {
            assert!(dir.path().join(f).exists());
        }
        assert!(matches!(emit_outputs(&mut out, &c, dir.path(), opts), Err(Error::Config { .. })));
        emit_outputs(&mut out, &c, dir.path(), EmitOptions { force: true, ..opts }).unwrap();
        let text = fs::read_to_string(dir.path().join(RECORD_FILE)).unwrap();
        assert_eq!(RunRecord::from_json(&text).unwrap(), out.record);
    }

    #[test]
    fn no_trajectories_flag() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(Method::Mpgd);
        let mut out = run_experiment(&c, None).unwrap();
        emit_outputs(&mut out, &c, dir.path(), EmitOptions { trajectories: false, force: false }).unwrap();
        assert!(!dir.path().join(TRAJECTORIES_FILE).exists());
        assert!(dir.path().join(DIAGNOSTICS_FILE).exists());
        assert!(out.record.files.trajectories.is_none());
    }
}
