use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddfluor::averaging::Method;
use ddfluor::couplings::all_couplings;
use ddfluor::io::{dump_ensemble, load_config_schema, run, RunConfig};
use ddfluor::model::{validate_params, Geometry, PhysParams, SEPARATION_FLOOR};

#[derive(Parser)]
#[command(name = "ddfluor", version, about = "Fluorescence of two dipole-coupled Λ atoms in moving geometries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides threads).
    #[arg(long)]
    threads: Option<usize>,
    /// Cross-check couplings and rerun single/ap with fixed-step RK4.
    #[arg(long)]
    verify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one fixed geometry.
    Single(RunArgs),
    /// Average intensity trajectories over the scenario ensemble.
    Ac(RunArgs),
    /// Average couplings over the ensemble, then integrate once.
    Ap(RunArgs),
    /// Scan one parameter; method from the config (ac or ap).
    Sweep(RunArgs),
    /// Print the dipole-dipole constants of one geometry.
    Couplings {
        /// Separation in wavelengths.
        #[arg(long)]
        r12: f64,
        /// Polar angle, e.g. 1.57, 0.5pi or pi/2.
        #[arg(long, value_parser = parse_angle)]
        theta: f64,
        /// Azimuthal angle, same syntax as --theta.
        #[arg(long, value_parser = parse_angle)]
        phi: f64,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        verify: bool,
    },
    /// Ensemble utilities.
    Ensemble {
        #[command(subcommand)]
        action: EnsembleAction,
    },
}

#[derive(Subcommand)]
enum EnsembleAction {
    /// Write the sampled (r, theta, phi, normalized weight) table as CSV.
    Dump {
        #[arg(long)]
        config: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Accepts plain radians or multiples of π: `0.25pi`, `pi/4`, `0.5*pi`, `pi`.
fn parse_angle(s: &str) -> Result<f64, String> {
    let t = s.trim().to_ascii_lowercase().replace('π', "pi");
    let bad = || format!("cannot read angle '{s}'");
    if let Some(rest) = t.strip_prefix("pi") {
        let rest = rest.trim();
        if rest.is_empty() {
            return Ok(PI);
        }
        let d: f64 = rest.strip_prefix('/').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        return Ok(PI / d);
    }
    if let Some(coef) = t.strip_suffix("pi") {
        let coef = coef.trim().trim_end_matches('*').trim();
        let c: f64 = if coef == "-" { -1.0 } else { coef.parse().map_err(|_| bad())? };
        return Ok(c * PI);
    }
    t.parse().map_err(|_| bad())
}

fn prepare(args: &RunArgs, method: Option<Method>) -> Result<RunConfig> {
    let mut cfg = load_config_schema(&args.config)?;
    if let Some(m) = method {
        if cfg.sweep.is_some() {
            bail!("config has a sweep block; use the sweep subcommand");
        }
        cfg.method = m;
    } else if cfg.sweep.is_none() {
        bail!("sweep needs a [sweep] block in the config");
    }
    if let Some(dir) = &args.out {
        cfg.output.dir = dir.clone();
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(args: &RunArgs, method: Option<Method>) -> Result<ExitCode> {
    let cfg = prepare(args, method)?;
    let outcome = run(&cfg, args.verify)?;
    let m = &outcome.manifest;
    for d in &m.diagnostics {
        eprintln!("warning: {d}");
    }
    if let Some(metrics) = &m.metrics {
        println!(
            "delta_i = {:.6e}  mean = {:.6e}  stationary = {}{}",
            metrics.delta_i,
            metrics.mean,
            metrics.stationary,
            if metrics.settled { "" } else { "  (transient not settled)" }
        );
    }
    if let Some(e) = &m.metrics_error {
        eprintln!("warning: no long-time metrics: {e}");
    }
    if let Some(s) = &m.sweep {
        for (row, v) in s.rows.iter().zip(s.metric_values()) {
            match &row.error {
                Some(e) => println!("{} = {}: error: {e}", s.axis, row.value),
                None => println!("{} = {}: {:?} = {v:.6e}", s.axis, row.value, s.metric),
            }
        }
    }
    if let Some(v) = &m.verify {
        if let Some(d) = v.rk4_max_abs_diff {
            println!("fixed-step check: max |ΔI_y| = {d:.3e}");
        }
    }
    println!("manifest: {}", outcome.manifest_path.display());
    if outcome.valid() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "validity monitor failed: trace drift {:.3e}, hermiticity {:.3e}, min eigenvalue {:.3e}, {} positivity violations",
            m.monitor.max_trace_drift,
            m.monitor.max_hermiticity_defect,
            m.monitor.min_eigenvalue,
            m.monitor.positivity_violations
        );
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Single(a) => execute(a, Some(Method::Single)),
        Command::Ac(a) => execute(a, Some(Method::Ac)),
        Command::Ap(a) => execute(a, Some(Method::Ap)),
        Command::Sweep(a) => execute(a, None),
        Command::Couplings { r12, theta, phi, json, verify } => couplings(*r12, *theta, *phi, *json, *verify),
        Command::Ensemble { action: EnsembleAction::Dump { config, out } } => dump(config, out.as_ref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn couplings(r12: f64, theta: f64, phi: f64, json: bool, verify: bool) -> Result<ExitCode> {
    let p = PhysParams::default();
    let g = Geometry::new(r12, theta, phi)?;
    for d in validate_params(&p, Some(r12), SEPARATION_FLOOR)? {
        eprintln!("warning: {d}");
    }
    let c = all_couplings(&g, &p, verify)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&c)?);
    } else {
        for (name, v) in ddfluor::couplings::CouplingSet::NAMES.iter().zip(c.as_array()) {
            println!("{name:>10} = {v:+.12e}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dump(config: &Path, out: Option<&PathBuf>) -> Result<ExitCode> {
    let cfg = load_config_schema(config)?;
    let csv = dump_ensemble(&cfg)?;
    match out {
        Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::parse_angle;
    use std::f64::consts::PI;

    #[test]
    fn angles() {
        assert_eq!(parse_angle("0.25pi").unwrap(), 0.25 * PI);
        assert_eq!(parse_angle("pi/4").unwrap(), PI / 4.0);
        assert_eq!(parse_angle("0.5*pi").unwrap(), 0.5 * PI);
        assert_eq!(parse_angle("pi").unwrap(), PI);
        assert_eq!(parse_angle("1.25").unwrap(), 1.25);
        assert!(parse_angle("quarter").is_err());
    }
}
