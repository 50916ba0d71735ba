//! Runs an experiment described by a JSON config and writes its output files.
//!
//! `cargo run --example from_config -- configs/inpainting.json out/`

use std::path::PathBuf;

use mpgd::harness::{emit_outputs, EmitOptions};
use mpgd::prelude::*;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let path: String = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/subsample.json").into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| std::env::temp_dir().join("mpgd-from-config").display().to_string()));
    let config = ExperimentConfig::load(path.as_ref())?;
    println!("config hash {}", config.hash()?);
    let mut output = run_experiment(&config, None)?;
    emit_outputs(&mut output, &config, &out, EmitOptions { trajectories: true, force: true })?;
    println!("{} chains, mean loss {:.4e}, written to {}", output.record.chains.len(), output.record.mean_loss(), out.display());
    Ok(())
}
