use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stokes_nc::control::{coefficient_rows, write_control_csv};
use stokes_nc::eigen::{normalize_and_gram, trace_report, write_eigen_csv};
use stokes_nc::harness::{
    run_experiment, spectra_and_bases, write_artifacts, write_json, ExperimentConfig,
    ExperimentReport,
};
use stokes_nc::observability::{uniformity_scan, write_observability_csv};
use stokes_nc::quadrature::uniform_grid;
use stokes_nc::spectral::{write_spectrum_csv, ROOT_TOLERANCE};
use stokes_nc::verify::{parse_checks, run_verify, RootFault};
use stokes_nc::SCHEMA_VERSION;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "stokes-nc",
    version,
    about = "Spectral toolkit for boundary null control of the channel Stokes system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certified roots of every mode, written to spectrum.csv
    Spectrum(Common),
    /// Normalized eigenfunctions, traces and Gram matrices
    Eigen(Common),
    /// Per-mode observability ratios
    Observability(Common),
    /// Synthesize the boundary control for the configured initial data
    Control(RunArgs),
    /// Full experiment with controlled and free evolution
    Simulate(RunArgs),
    /// Run the named numerical checks
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    nu: Option<f64>,
    /// Channel period
    #[arg(long)]
    length: Option<f64>,
    /// Final time
    #[arg(long)]
    t: Option<f64>,
    /// Control horizon
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Switch the control off (controlled equals uncontrolled)
    #[arg(long)]
    psi_off: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated subset of checks
    #[arg(long)]
    checks: Option<String>,
    /// Shift root M:L by DELTA before the checks run
    #[arg(long, hide = true, value_name = "M:L:DELTA")]
    corrupt_root: Option<String>,
}

/// Error classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

fn classify(e: anyhow::Error) -> Failure {
    match e.downcast_ref::<stokes_nc::error::Error>() {
        Some(inner) if inner.is_numerical() => Failure::Numerical(e),
        _ => Failure::Config(e),
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = c.m_max {
        cfg.m_max = v;
    }
    if let Some(v) = c.l_max {
        cfg.l_max = v;
        cfg.synthesis_branches = cfg.synthesis_branches.min(v);
    }
    if let Some(v) = c.nu {
        cfg.nu = v;
    }
    if let Some(v) = c.length {
        cfg.length = v;
    }
    if let Some(v) = c.t {
        cfg.t_final = v;
    }
    if let Some(v) = c.t0 {
        cfg.t_control = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    cfg.x_points = cfg.x_points.max(2 * cfg.m_max + 1);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out)
        .with_context(|| format!("creating output directory {}", c.out.display()))?;
    Ok(&c.out)
}

fn file(dir: &Path, name: &str) -> Result<fs::File> {
    let p = dir.join(name);
    fs::File::create(&p).with_context(|| format!("creating {}", p.display()))
}

fn cmd_spectrum(c: &Common) -> Result<Result<(), String>> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let (spectra, _) = spectra_and_bases(&cfg)?;
    write_spectrum_csv(&spectra, file(dir, "spectrum.csv")?)?;
    let rows: usize = spectra.iter().map(|s| s.roots.len()).sum();
    let worst = spectra
        .iter()
        .flat_map(|s| &s.roots)
        .map(|r| r.char_residual.abs())
        .fold(0.0, f64::max);
    println!(
        "{rows} roots over {} modes, max residual {worst:.2e}",
        spectra.len()
    );
    if worst > ROOT_TOLERANCE || spectra.iter().any(|s| s.roots.len() != cfg.l_max) {
        return Ok(Err(format!("uncertified roots (max residual {worst:.2e})")));
    }
    Ok(Ok(()))
}

fn cmd_eigen(c: &Common) -> Result<Result<(), String>> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let (_, bases) = spectra_and_bases(&cfg)?;
    let y = uniform_grid(0.0, 1.0, 101);
    let mut w = file(dir, "eigenfunctions.csv")?;
    for b in bases.iter().filter(|b| b.mode.m > 0) {
        write_eigen_csv(&b.eigs, &y, &mut w)?;
    }
    let modes: Vec<_> = bases.iter().map(|b| b.eigs.clone()).collect();
    let traces = trace_report(&modes);
    write_json(&traces, dir, "trace.json")?;
    let grams = bases
        .iter()
        .map(|b| normalize_and_gram(&b.eigs, cfg.y_points))
        .collect::<stokes_nc::error::Result<Vec<_>>>()?;
    write_json(
        &json!({ "schema_version": SCHEMA_VERSION, "modes": grams }),
        dir,
        "gram.json",
    )?;
    let off = grams.iter().map(|g| g.max_offdiag).fold(0.0, f64::max);
    println!(
        "trace bound inf {:.3e}, trace ratio deviation {:.2e}, max Gram off-diagonal {off:.2e}",
        traces.empirical_m, traces.max_ratio_deviation
    );
    Ok(Ok(()))
}

fn cmd_observability(c: &Common) -> Result<Result<(), String>> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let (_, bases) = spectra_and_bases(&cfg)?;
    let rep = uniformity_scan(&bases, cfg.synthesis_branches, cfg.t_final, cfg.t_control)?;
    write_observability_csv(&rep, file(dir, "observability.csv")?)?;
    write_json(&rep, dir, "observability.json")?;
    println!("{:>4} {:>4} {:>14}", "m", "L", "ratio");
    for r in &rep.modes {
        println!(
            "{:>4} {:>4} {:>14.6e}",
            r.m, r.effective_branches, r.smallest_ratio
        );
    }
    println!("min ratio {:.6e} at m={}", rep.min_ratio, rep.min_mode);
    if !rep.all_positive {
        return Ok(Err("observability ratio not positive".into()));
    }
    Ok(Ok(()))
}

fn print_table(report: &ExperimentReport) {
    println!(
        "{:>4} {:>14} {:>14} {:>14}",
        "m", "initial", "controlled", "uncontrolled"
    );
    for r in &report.modes {
        println!(
            "{:>4} {:>14.6e} {:>14.6e} {:>14.6e}",
            r.m, r.initial_norm, r.controlled_terminal, r.uncontrolled_terminal
        );
    }
    let t = &report.totals;
    println!(
        "{:>4} {:>14.6e} {:>14.6e} {:>14.6e}",
        "all", t.initial_norm, t.controlled_terminal, t.uncontrolled_terminal
    );
    println!(
        "control energy {:.6e}, max moment residual {:.2e}",
        t.control_energy, t.max_moment_residual
    );
}

fn cmd_run(args: &RunArgs, full: bool) -> Result<Result<(), String>> {
    let mut cfg = load_config(&args.common)?;
    if args.psi_off {
        cfg.control_enabled = false;
    }
    if !full {
        cfg.oracle_points = 0;
    }
    let dir = out_dir(&args.common)?;
    let out = run_experiment(&cfg)?;
    if full {
        write_artifacts(&out, dir)?;
    } else {
        write_json(&out.report, dir, "report.json")?;
        write_control_csv(&out.field, file(dir, "control.csv")?)?;
        write_json(
            &json!({ "schema_version": SCHEMA_VERSION, "coefficients": coefficient_rows(&out.controls) }),
            dir,
            "coefficients.json",
        )?;
    }
    print_table(&out.report);
    Ok(Ok(()))
}

fn parse_fault(s: &str) -> Result<RootFault> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("expected M:L:DELTA, got '{s}'");
    }
    Ok(RootFault {
        m: parts[0].parse()?,
        l: parts[1].parse()?,
        delta: parts[2].parse()?,
    })
}

fn cmd_verify(args: &VerifyArgs) -> Result<Result<(), String>> {
    let cfg = load_config(&args.common)?;
    let checks = args.checks.as_deref().map(parse_checks).transpose()?;
    let fault = args.corrupt_root.as_deref().map(parse_fault).transpose()?;
    let dir = out_dir(&args.common)?;
    let rep = run_verify(&cfg, checks.as_deref(), fault)?;
    write_json(&rep, dir, "verify.json")?;
    for c in &rep.checks {
        println!("{:<16} {}", c.name, if c.passed { "PASS" } else { "FAIL" });
    }
    if rep.passed {
        Ok(Ok(()))
    } else {
        Ok(Err(format!("failed checks: {}", rep.failed.join(", "))))
    }
}

/// The error chain without causes already spelled out by the message above them.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STOKES_NC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("STOKES_NC_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("STOKES_NC_THREADS must be a positive integer, got '{v}'");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {}", render(&e));
        return ExitCode::from(EXIT_CONFIG);
    }
    let outcome = match &cli.command {
        Command::Spectrum(c) => cmd_spectrum(c),
        Command::Eigen(c) => cmd_eigen(c),
        Command::Observability(c) => cmd_observability(c),
        Command::Control(a) => cmd_run(a, false),
        Command::Simulate(a) => cmd_run(a, true),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => match classify(e) {
            Failure::Config(e) => {
                eprintln!("error: {}", render(&e));
                ExitCode::from(EXIT_CONFIG)
            }
            Failure::Numerical(e) => {
                eprintln!("error: {}", render(&e));
                ExitCode::from(EXIT_NUMERICAL)
            }
        },
    }
}
