//! CSV writers. Column orders are part of the CLI contract (see README).
//!
//! Floats are written with Rust's shortest round-trip formatting.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sumo::diagnostics::SpectralTrace;
use sumo::harness::{ExperimentSpec, RunResult};

pub const RESULTS_HEADER: [&str; 9] = [
    "spec",
    "seed",
    "method",
    "orthogonalizer",
    "rank",
    "final_loss",
    "steps_to_grad_tol",
    "diverged",
    "diverged_at",
];

pub const TRACE_HEADER: [&str; 8] = [
    "step",
    "loss",
    "loss_finite",
    "grad_norm",
    "kappa_m",
    "condition_number",
    "ns_error",
    "ns_bound",
];

pub const BOUNDS_HEADER: [&str; 6] = ["kappa", "r", "iterations", "measured", "bound", "pass"];

pub const ACCOUNTING_HEADER: [&str; 13] = [
    "m",
    "n",
    "rank",
    "sumo",
    "adam",
    "shampoo",
    "soap",
    "galore",
    "flop_n",
    "flop_m",
    "svd_pseudoinverse_flops",
    "svd_decomposition_flops",
    "newton_schulz_flops",
];

pub fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

/// File-system-safe stem for a (spec, seed) pair.
pub fn run_stem(spec_name: &str, seed: u64) -> String {
    let safe: String = spec_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}__seed{seed}")
}

pub fn trace_path(dir: &Path, spec_name: &str, seed: u64) -> PathBuf {
    dir.join("traces").join(format!("{}.csv", run_stem(spec_name, seed)))
}

pub fn write_results(path: &Path, rows: &[(&ExperimentSpec, &RunResult)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RESULTS_HEADER)?;
    for (spec, r) in rows {
        let rank = if spec.method.uses_rank() {
            spec.optimizer.rank.to_string()
        } else {
            String::new()
        };
        w.write_record([
            spec.name.clone(),
            r.seed.to_string(),
            spec.method.to_string(),
            spec.optimizer.orthogonalizer.to_string(),
            rank,
            num(r.final_loss),
            opt(r.steps_to_grad_tol),
            r.diverged().to_string(),
            opt(r.diverged_at),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings(path: &Path, rows: &[(&ExperimentSpec, &RunResult)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["spec", "seed", "wall_time_ms"])?;
    for (spec, r) in rows {
        w.write_record([spec.name.clone(), r.seed.to_string(), r.wall_time_ms.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &SpectralTrace) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRACE_HEADER)?;
    for i in 0..trace.len() {
        w.write_record([
            trace.steps[i].to_string(),
            num(trace.losses[i]),
            trace.loss_finite[i].to_string(),
            num(trace.grad_norms[i]),
            num(trace.kappa_m[i]),
            num(trace.condition_numbers[i]),
            trace.ns_errors[i].map(num).unwrap_or_default(),
            trace.ns_bounds[i].map(num).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
