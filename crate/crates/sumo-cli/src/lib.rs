//! `sumo` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 divergence
//! (`run`) or bound violation (`verify-bounds`).

pub mod output;
pub mod spec_file;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sumo::adapter::{extract_adapter, AdapterMetadata};
use sumo::diagnostics::{bound_test_matrix, ns_error_vs_bound};
use sumo::harness::{run_experiment, ExperimentSpec, RunResult};
use sumo::linalg::{self, NewtonSchulzVariant};
use sumo::optimizer::{optimizer_state_memory, MemoryMethod};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Tolerance on `measured ≤ bound` in bounds.csv.
pub const BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "sumo", version, about = "Subspace-moment optimizer experiments")]
pub struct Cli {
    /// Directory for CSV and checkpoint output (overrides the spec's output_dir).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// `run`: replaces the spec's seed list. `verify-bounds`: matrix seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Spec patch `key.path=value`; the value is a TOML literal or a bare string.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Write the final optimizer state of every run as JSON.
    #[arg(long, global = true)]
    pub checkpoint: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub m: usize,
    pub n: usize,
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (m, n) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("shape `{s}` is not of the form MxN"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| format!("shape `{s}`: `{v}` is not a positive integer"))
        };
        Ok(Shape { m: parse(m)?, n: parse(n)? })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every (spec, seed) pair and write results.csv plus per-run traces.
    Run {
        spec: PathBuf,
    },
    /// Compare measured Newton-Schulz error with its bound over a grid.
    VerifyBounds {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 10.0, 100.0, 1000.0])]
        kappas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5, 6, 7, 8])]
        iterations: Vec<usize>,
        /// Columns of each test matrix.
        #[arg(long, default_value_t = 64)]
        cols: usize,
    },
    /// Optimizer-state memory and orthogonalization FLOPs per layer shape.
    Accounting {
        #[arg(long, value_delimiter = ',', default_values_t = vec![
            Shape { m: 1024, n: 512 },
            Shape { m: 1024, n: 1024 },
            Shape { m: 4096, n: 1024 },
        ])]
        shapes: Vec<Shape>,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 5)]
        ns_iterations: usize,
    },
    /// Factor finetuned − pretrained into a low-rank A·B pair.
    ExtractAdapter {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Output directory (defaults to --output-dir, then `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.m, self.n)
    }
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: anyhow::Error,
}

fn config_err(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_CONFIG, error }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        config_err(error.into())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn execute(cli: &Cli) -> std::result::Result<i32, Failure> {
    match &cli.command {
        Command::Run { spec } => cmd_run(cli, spec),
        Command::VerifyBounds {
            kappas,
            ranks,
            iterations,
            cols,
        } => cmd_verify_bounds(cli, kappas, ranks, iterations, *cols),
        Command::Accounting {
            shapes,
            rank,
            ns_iterations,
        } => cmd_accounting(cli, shapes, *rank, *ns_iterations),
        Command::ExtractAdapter {
            pretrained,
            finetuned,
            tolerance,
            out,
        } => cmd_extract_adapter(cli, pretrained, finetuned, *tolerance, out.as_deref()),
    }
}

fn output_dir(cli: &Cli, fallback: &str) -> PathBuf {
    cli.output_dir.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be >= 1");
        }
        builder = builder.num_threads(w);
    }
    builder.build().context("cannot start worker pool")
}

/// Loads, overrides, expands and validates the specs named by a `run` invocation.
pub fn resolve_specs(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Vec<ExperimentSpec>> {
    let (mut base, sweep) = spec_file::load_spec(path, overrides)?;
    if let Some(s) = seed {
        base.seeds = vec![s];
    }
    let specs = spec_file::expand(&base, &sweep);
    for spec in &specs {
        spec.validate().map_err(|e| anyhow!("spec `{}`: {e}", spec.name))?;
    }
    Ok(specs)
}

fn cmd_run(cli: &Cli, path: &Path) -> std::result::Result<i32, Failure> {
    let specs = resolve_specs(path, &cli.overrides, cli.seed)?;
    let out = output_dir(cli, &specs[0].output_dir);
    let pool = thread_pool(cli.workers)?;

    let jobs: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.seeds.iter().map(move |&seed| (i, seed)))
        .collect();
    log::info!("running {} job(s) over {} spec(s)", jobs.len(), specs.len());
    let results: Vec<(usize, Result<RunResult>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let r = run_experiment(&specs[i], seed)
                    .with_context(|| format!("spec `{}`, seed {seed}", specs[i].name));
                (i, r)
            })
            .collect()
    });

    let mut rows: Vec<(&ExperimentSpec, RunResult)> = Vec::with_capacity(results.len());
    for (i, r) in results {
        rows.push((&specs[i], r.map_err(|e| Failure { code: EXIT_FAILURE, error: e })?));
    }
    rows.sort_by(|a, b| (&a.0.name, a.1.seed).cmp(&(&b.0.name, b.1.seed)));

    let refs: Vec<(&ExperimentSpec, &RunResult)> = rows.iter().map(|(s, r)| (*s, r)).collect();
    output::write_results(&out.join("results.csv"), &refs)?;
    output::write_timings(&out.join("timings.csv"), &refs)?;
    for (spec, r) in &refs {
        output::write_trace(&output::trace_path(&out, &spec.name, r.seed), &r.trace)?;
        if cli.checkpoint {
            let path = out
                .join("checkpoints")
                .join(format!("{}.json", output::run_stem(&spec.name, r.seed)));
            fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))
                .context("cannot create checkpoint directory")?;
            sumo::io::write_json(&path, &r.checkpoint)?;
        }
    }

    let diverged = refs.iter().filter(|(_, r)| r.diverged()).count();
    println!("wrote {} result row(s) to {}", refs.len(), out.join("results.csv").display());
    if diverged > 0 {
        eprintln!("{diverged} run(s) diverged");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

/// One bounds.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub kappa: f64,
    pub r: usize,
    pub iterations: usize,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn bound_grid(kappas: &[f64], ranks: &[usize], iterations: &[usize], cols: usize, seed: u64) -> Result<Vec<BoundRow>> {
    for &k in kappas {
        if !(k >= 1.0 && k.is_finite()) {
            bail!("kappas: every kappa must be a finite value >= 1, got {k}");
        }
    }
    for &r in ranks {
        if r == 0 || r + 1 > cols {
            bail!("ranks: need 1 <= r < cols = {cols}, got {r}");
        }
    }
    if iterations.contains(&0) {
        bail!("iterations: must be >= 1");
    }
    let mut rows = Vec::new();
    for (ki, &kappa) in kappas.iter().enumerate() {
        for (ri, &r) in ranks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sumo::derive_seed(seed, ki as u64, ri as u64));
            let m = bound_test_matrix(kappa, r, cols, &mut rng);
            for &i in iterations {
                let report = ns_error_vs_bound(&m, NewtonSchulzVariant::classic(i))?;
                let bound = linalg::newton_schulz_error_bound(kappa, r, i)?;
                rows.push(BoundRow {
                    kappa,
                    r,
                    iterations: i,
                    measured: report.measured,
                    bound,
                    pass: report.measured <= bound + BOUND_SLACK,
                });
            }
        }
    }
    Ok(rows)
}

fn cmd_verify_bounds(
    cli: &Cli,
    kappas: &[f64],
    ranks: &[usize],
    iterations: &[usize],
    cols: usize,
) -> std::result::Result<i32, Failure> {
    let rows = bound_grid(kappas, ranks, iterations, cols, cli.seed.unwrap_or(0))?;
    let path = output_dir(cli, "out").join("bounds.csv");
    let mut w = output::writer(&path)?;
    w.write_record(output::BOUNDS_HEADER)?;
    for row in &rows {
        w.write_record([
            output::num(row.kappa),
            row.r.to_string(),
            row.iterations.to_string(),
            output::num(row.measured),
            output::num(row.bound),
            row.pass.to_string(),
        ])?;
    }
    w.flush()?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!("wrote {} bound row(s) to {}", rows.len(), path.display());
    if failed > 0 {
        eprintln!("{failed} row(s) exceed the bound");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

/// One accounting.csv row; FLOPs are for orthogonalizing the r × min(m, n) moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingRow {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub memory: [u64; 5],
    pub flop_n: u64,
    pub flop_m: u64,
    pub svd_pseudoinverse: u128,
    pub svd_decomposition: u128,
    pub newton_schulz: u128,
}

pub fn accounting_rows(shapes: &[Shape], rank: usize, ns_iterations: usize) -> Result<Vec<AccountingRow>> {
    if rank == 0 {
        bail!("rank: must be >= 1");
    }
    if ns_iterations == 0 {
        bail!("ns_iterations: must be >= 1");
    }
    shapes
        .iter()
        .map(|s| {
            let small = s.m.min(s.n);
            if rank > small {
                bail!("rank {rank} exceeds min(m, n) = {small} for a {s} layer");
            }
            let (m, n, r) = (s.m as u64, s.n as u64, rank as u64);
            let (flop_n, flop_m) = (small as u64, r);
            Ok(AccountingRow {
                m: s.m,
                n: s.n,
                rank,
                memory: MemoryMethod::ALL.map(|k| optimizer_state_memory(m, n, r, k)),
                flop_n,
                flop_m,
                svd_pseudoinverse: linalg::flops_svd_pseudoinverse(flop_n, flop_m),
                svd_decomposition: linalg::flops_svd_decomposition(flop_n, flop_m),
                newton_schulz: linalg::flops_newton_schulz(flop_n, flop_m, ns_iterations as u64),
            })
        })
        .collect()
}

fn cmd_accounting(cli: &Cli, shapes: &[Shape], rank: usize, ns_iterations: usize) -> std::result::Result<i32, Failure> {
    let rows = accounting_rows(shapes, rank, ns_iterations)?;
    let path = output_dir(cli, "out").join("accounting.csv");
    let mut w = output::writer(&path)?;
    w.write_record(output::ACCOUNTING_HEADER)?;
    for row in &rows {
        let mut rec = vec![row.m.to_string(), row.n.to_string(), row.rank.to_string()];
        rec.extend(row.memory.iter().map(u64::to_string));
        rec.extend([
            row.flop_n.to_string(),
            row.flop_m.to_string(),
            row.svd_pseudoinverse.to_string(),
            row.svd_decomposition.to_string(),
            row.newton_schulz.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("wrote {} accounting row(s) to {}", rows.len(), path.display());
    Ok(EXIT_OK)
}

fn cmd_extract_adapter(
    cli: &Cli,
    pretrained: &Path,
    finetuned: &Path,
    tolerance: f64,
    out: Option<&Path>,
) -> std::result::Result<i32, Failure> {
    let pre = sumo::io::read_matrix(pretrained).with_context(|| format!("cannot read {}", pretrained.display()))?;
    let ft = sumo::io::read_matrix(finetuned).with_context(|| format!("cannot read {}", finetuned.display()))?;
    let bundle = extract_adapter(&ft, &pre, tolerance)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| output_dir(cli, "out"));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    sumo::io::write_matrix(&dir.join("a.json"), &bundle.a)?;
    sumo::io::write_matrix(&dir.join("b.json"), &bundle.b)?;
    let meta = AdapterMetadata {
        rank: bundle.rank,
        residual_norm: bundle.residual_norm,
        rows: pre.nrows(),
        cols: pre.ncols(),
        tolerance,
    };
    sumo::io::write_json(&dir.join("adapter.json"), &meta)?;
    println!(
        "adapter rank {} (residual {:e}) written to {}",
        bundle.rank,
        bundle.residual_norm,
        dir.display()
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!("1024x8".parse::<Shape>().unwrap(), Shape { m: 1024, n: 8 });
        assert!("1024".parse::<Shape>().is_err());
        assert!("0x3".parse::<Shape>().is_err());
    }

    #[test]
    fn bad_arguments_exit_with_config_code() {
        assert_eq!(run_cli(["sumo", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run_cli(["sumo", "accounting", "--rank", "x"]), EXIT_CONFIG);
    }

    #[test]
    fn accounting_rejects_oversized_rank() {
        let err = accounting_rows(&[Shape { m: 4, n: 2 }], 3, 5).unwrap_err();
        assert!(err.to_string().contains("exceeds min(m, n)"));
    }
}
