//! Run configuration, orchestration and on-disk artifacts.
//!
//! Configs are TOML:
//!
//! ```toml
//! method = "ac"            # single | ac | ap
//! threads = 4              # optional, default: all cores
//!
//! [params]                 # optional; omitted keys keep the defaults
//! rabi1 = 3.0
//!
//! [initial_state]          # optional, default both_excited
//! kind = "product"
//! a = 3
//! b = 1
//!
//! [scenario.distance_oscillation]   # exactly one scenario table
//! r_m = 0.25
//! r_a = 0.14
//! theta = 1.5707963267948966
//! phi = 0.7853981633974483
//! n = 64
//!
//! [integrator]             # optional
//! t_end = 50.0
//! dt_out = 0.01
//! rtol = 1e-8
//! atol = 1e-10
//!
//! [sweep]                  # optional, ac / ap only
//! axis = "r_a"             # ensemble parameter or params.<name>
//! values = [0.02, 0.05, 0.1]
//! metric = "delta_i"
//!
//! [analysis]
//! window_fraction = 0.2
//!
//! [output]
//! dir = "out"
//! prefix = "run"
//! write_rho = false
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::{
    ac_average, ap_run, single_run, sweep, AveragedCouplingSet, AveragingError, Method, Metric,
    RunOptions, SweepResult, SweepSpec,
};
use crate::couplings::CouplingSet;
use crate::dynamics::{
    build_superoperators_with_drive_phase, integrate_fixed_step, DensityMatrix, InitialState,
    IntegrateOptions, MonitorSummary, TimeGrid, Trajectory,
};
use crate::ensembles::{EnsembleDescriptor, WeightedEnsemble};
use crate::integrator::{IntegratorStats, Tolerances};
use crate::model::{validate_params, PhysParams, DIM, SEPARATION_FLOOR};
use crate::observables::{long_time_metrics, LongTimeMetrics, DEFAULT_WINDOW_FRACTION};

/// Fixed step of the RK4 cross-check enabled by `verify`.
pub const VERIFY_RK4_DT: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("{0}")]
    Rule(String),
}

fn rule(msg: impl Into<String>) -> ConfigError {
    ConfigError::Rule(msg.into())
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub t_end: f64,
    pub dt_out: f64,
    pub rtol: f64,
    pub atol: f64,
    pub positivity_stride: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let tol = Tolerances::default();
        let grid = TimeGrid::default();
        Self {
            t_end: grid.t_end,
            dt_out: grid.dt,
            rtol: tol.rtol,
            atol: tol.atol,
            positivity_stride: IntegrateOptions::default().positivity_stride,
        }
    }
}

impl IntegratorConfig {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid { t_start: 0.0, t_end: self.t_end, dt: self.dt_out }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub metric: Metric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub window_fraction: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { window_fraction: DEFAULT_WINDOW_FRACTION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub prefix: String,
    /// Also write every ρ(t) (single and ap only).
    pub write_rho: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), prefix: "run".into(), write_rho: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub params: PhysParams,
    pub initial_state: InitialState,
    pub scenario: EnsembleDescriptor,
    pub integrator: IntegratorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

/// Document shape before the scenario table is resolved.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    method: Method,
    #[serde(default)]
    threads: Option<usize>,
    #[serde(default)]
    params: PhysParams,
    #[serde(default)]
    initial_state: InitialState,
    #[serde(default)]
    scenario: Option<toml::Table>,
    #[serde(default)]
    integrator: IntegratorConfig,
    #[serde(default)]
    sweep: Option<SweepConfig>,
    #[serde(default)]
    analysis: AnalysisConfig,
    #[serde(default)]
    output: OutputConfig,
}

fn typed<T: for<'de> Deserialize<'de>>(value: toml::Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner.as_str()) {
            (true, _) => inner.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{inner}"),
        };
        ConfigError::Schema { path, message: e.into_inner().to_string() }
    })
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg = parse_config_schema(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Schema-level parse only; the cross-field rules of
/// [`RunConfig::validate`] are left to the caller (for instance after
/// command-line overrides).
pub fn parse_config_schema(text: &str) -> Result<RunConfig, ConfigError> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let raw: RawConfig = typed(toml::Value::Table(doc), "")?;
    let table = raw.scenario.unwrap_or_default();
    if table.len() != 1 {
        return Err(rule(format!(
            "exactly one scenario required (found {})",
            if table.is_empty() { "none".to_string() } else { table.keys().cloned().collect::<Vec<_>>().join(", ") }
        )));
    }
    let scenario: EnsembleDescriptor = typed(toml::Value::Table(table), "scenario")?;
    Ok(RunConfig {
        method: raw.method,
        threads: raw.threads,
        params: raw.params,
        initial_state: raw.initial_state,
        scenario,
        integrator: raw.integrator,
        sweep: raw.sweep,
        analysis: raw.analysis,
        output: raw.output,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, RunError> {
    let cfg = load_config_schema(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_schema(path: &Path) -> Result<RunConfig, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_config_schema(&text)?)
}

/// TOML text that parses back to the same config.
pub fn serialize_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}

impl RunConfig {
    /// Config with defaults everywhere except the scenario.
    pub fn new(scenario: EnsembleDescriptor) -> Self {
        Self {
            method: Method::Single,
            threads: None,
            params: PhysParams::default(),
            initial_state: InitialState::default(),
            scenario,
            integrator: IntegratorConfig::default(),
            sweep: None,
            analysis: AnalysisConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_params(&self.params, None, SEPARATION_FLOOR).map_err(|e| rule(format!("params: {e}")))?;
        self.initial_state.density_matrix().map_err(|e| rule(format!("initial_state: {e}")))?;
        let ens = self.scenario.build().map_err(|e| rule(format!("scenario.{}: {e}", self.scenario.kind())))?;
        if self.method == Method::Single && ens.len() != 1 {
            return Err(rule(format!(
                "method single needs a single-geometry scenario, scenario.{} has {} members",
                self.scenario.kind(),
                ens.len()
            )));
        }
        let it = &self.integrator;
        self.integrator.grid().validate().map_err(|e| rule(format!("integrator: {e}")))?;
        for (name, v) in [("rtol", it.rtol), ("atol", it.atol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(rule(format!("integrator.{name} must be positive, got {v}")));
            }
        }
        if it.positivity_stride == 0 {
            return Err(rule("integrator.positivity_stride must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(rule("threads must be at least 1"));
        }
        let w = self.analysis.window_fraction;
        if !(w > 0.0 && w <= 1.0) {
            return Err(rule(format!("analysis.window_fraction must lie in (0, 1], got {w}")));
        }
        if let Some(s) = &self.sweep {
            if self.method == Method::Single {
                return Err(rule("sweep requires method ac or ap"));
            }
            if s.values.is_empty() {
                return Err(rule("sweep.values is empty"));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(rule("sweep.values must be finite"));
            }
            if !s.axis.starts_with("params.") {
                self.scenario
                    .with_param(&s.axis, s.values[0])
                    .map_err(|e| rule(format!("sweep.axis: {e}")))?;
            } else if !PARAM_NAMES.contains(&&s.axis["params.".len()..]) {
                return Err(rule(format!("sweep.axis: unknown parameter '{}'", s.axis)));
            }
        }
        if self.output.write_rho && self.method == Method::Ac {
            return Err(rule("output.write_rho is unavailable for ac (no single state)"));
        }
        if self.output.prefix.is_empty() || self.output.prefix.contains(['/', '\\']) {
            return Err(rule("output.prefix must be a non-empty file name stem"));
        }
        Ok(())
    }

    pub fn run_options(&self, verify: bool) -> RunOptions {
        RunOptions {
            integrate: IntegrateOptions {
                tol: Tolerances { rtol: self.integrator.rtol, atol: self.integrator.atol },
                store_snapshots: self.output.write_rho,
                positivity_stride: self.integrator.positivity_stride,
            },
            verify,
            threads: self.threads,
        }
    }
}

const PARAM_NAMES: [&str; 8] = ["rabi1", "rabi2", "det1", "det2", "delta_lower", "gamma1", "gamma2", "k0"];

/// 17 significant digits, enough to round-trip an f64.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut s = String::with_capacity(t.len() * 48);
    s.push_str("t,I_y\n");
    for (time, i) in t.times.iter().zip(&t.intensity) {
        let _ = writeln!(s, "{},{}", num(*time), num(*i));
    }
    s
}

/// One row per output time: t, then Re and Im of ρ_(i,j) in row-major order
/// of the flat A-major index.
pub fn rho_csv(times: &[f64], states: &[DensityMatrix]) -> String {
    let mut s = String::from("t");
    for i in 0..DIM {
        for j in 0..DIM {
            let _ = write!(s, ",re_{i}_{j},im_{i}_{j}");
        }
    }
    s.push('\n');
    for (t, rho) in times.iter().zip(states) {
        s.push_str(&num(*t));
        let m = rho.matrix();
        for i in 0..DIM {
            for j in 0..DIM {
                let z: C64 = m[(i, j)];
                let _ = write!(s, ",{},{}", num(z.re), num(z.im));
            }
        }
        s.push('\n');
    }
    s
}

pub fn sweep_csv(r: &SweepResult) -> String {
    let mut s = String::from("value,delta_i,i_mean,stationary\n");
    for row in &r.rows {
        match &row.metrics {
            Some(m) => {
                let _ = writeln!(s, "{},{},{},{}", num(row.value), num(m.delta_i), num(m.mean), m.stationary);
            }
            None => {
                let _ = writeln!(s, "{},NaN,NaN,", num(row.value));
            }
        }
    }
    s
}

/// Member table with weights normalized to sum to one.
pub fn ensemble_csv(ens: &WeightedEnsemble) -> String {
    let mut s = String::from("r,theta,phi,weight\n");
    for (m, w) in ens.members().iter().zip(ens.normalized_weights()) {
        let g = m.geometry;
        let _ = writeln!(s, "{},{},{},{}", num(g.r12()), num(g.theta()), num(g.phi()), num(w));
    }
    s
}

pub fn dump_ensemble(cfg: &RunConfig) -> Result<String, RunError> {
    let ens = cfg
        .scenario
        .build()
        .map_err(|e| rule(format!("scenario.{}: {e}", cfg.scenario.kind())))?;
    Ok(ensemble_csv(&ens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub kind: String,
    pub members: usize,
    pub hash: String,
    pub q: f64,
    pub min_r12: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Closed-form cross couplings were checked against the contraction.
    pub couplings_checked: bool,
    /// max |I_adaptive − I_rk4| over the grid, when a fixed-step rerun applies.
    pub rk4_max_abs_diff: Option<f64>,
    pub rk4_dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub ensemble: EnsembleSummary,
    pub diagnostics: Vec<String>,
    pub stats: IntegratorStats,
    pub monitor: MonitorSummary,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<LongTimeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub couplings: Option<CouplingSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub averaged: Option<AveragedCouplingSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub integrations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_stats: Option<Vec<IntegratorStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyReport>,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub trajectory: Option<Trajectory>,
}

impl RunOutcome {
    pub fn valid(&self) -> bool {
        self.manifest.valid
    }
}

fn rk4_check(
    cfg: &RunConfig,
    drive: C64,
    couplings: &CouplingSet,
    detector: C64,
    rho0: &DensityMatrix,
    reference: &Trajectory,
) -> Result<f64, RunError> {
    let p = &cfg.params;
    let sup = build_superoperators_with_drive_phase(p, couplings, drive);
    let opts = IntegrateOptions { store_snapshots: false, ..cfg.run_options(false).integrate };
    let ev = integrate_fixed_step(rho0, &sup, p.big_delta(), &cfg.integrator.grid(), VERIFY_RK4_DT, &opts)
        .map_err(AveragingError::from)?;
    let fixed = ev.intensity(detector);
    Ok(fixed.iter().zip(&reference.intensity).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Executes the configured run and writes its artifacts under
/// `output.dir`. `verify` enables the coupling cross-check and, for single
/// and ap runs, the fixed-step rerun.
pub fn run(cfg: &RunConfig, verify: bool) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let p = &cfg.params;
    let ens = cfg.scenario.build().map_err(|e| rule(e.to_string()))?;
    let diagnostics = validate_params(p, Some(ens.min_r12()), SEPARATION_FLOOR)
        .map_err(|e| rule(e.to_string()))?
        .iter()
        .map(|d| d.to_string())
        .collect();
    let rho0 = cfg.initial_state.density_matrix().map_err(AveragingError::from)?;
    let grid = cfg.integrator.grid();
    let opts = cfg.run_options(verify);
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let prefix = &cfg.output.prefix;
    let mut outputs = Vec::new();
    let mut write = |name: String, body: &str| -> Result<(), RunError> {
        let path = dir.join(&name);
        fs::write(&path, body).map_err(io_err(&path))?;
        outputs.push(name);
        Ok(())
    };

    let mut manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        ensemble: EnsembleSummary {
            kind: cfg.scenario.kind().into(),
            members: ens.len(),
            hash: ens.hash(),
            q: ens.q(),
            min_r12: ens.min_r12(),
        },
        diagnostics,
        stats: IntegratorStats::default(),
        monitor: MonitorSummary::default(),
        valid: true,
        metrics: None,
        metrics_error: None,
        couplings: None,
        averaged: None,
        integrations: None,
        member_stats: None,
        sweep: None,
        verify: verify.then_some(VerifyReport { couplings_checked: true, rk4_max_abs_diff: None, rk4_dt: None }),
        wall_time_s: 0.0,
        outputs: Vec::new(),
    };

    let mut trajectory = None;
    if let Some(s) = &cfg.sweep {
        let spec = SweepSpec {
            method: cfg.method,
            descriptor: &cfg.scenario,
            axis: &s.axis,
            values: &s.values,
            metric: s.metric,
            window_fraction: cfg.analysis.window_fraction,
        };
        let result = sweep(&spec, p, &rho0, &grid, &opts)?;
        for row in &result.rows {
            if let Some(st) = &row.stats {
                manifest.stats.merge(st);
            }
            match &row.monitor {
                Some(m) => manifest.monitor.merge(m),
                None => manifest.valid = false,
            }
        }
        write(format!("{prefix}_sweep.csv"), &sweep_csv(&result))?;
        manifest.sweep = Some(result);
    } else {
        let t = match cfg.method {
            Method::Single => {
                let g = ens.members()[0].geometry;
                let t = single_run(&g, p, &rho0, &grid, &opts)?;
                let c = crate::couplings::all_couplings(&g, p, false).expect("checked by single_run");
                manifest.couplings = Some(c);
                if verify {
                    let d = rk4_check(cfg, g.drive_phase(p.k0), &c, g.detector_phase(p.k0), &rho0, &t)?;
                    manifest.verify = Some(VerifyReport {
                        couplings_checked: true,
                        rk4_max_abs_diff: Some(d),
                        rk4_dt: Some(VERIFY_RK4_DT),
                    });
                }
                t
            }
            Method::Ac => {
                let r = ac_average(&ens, p, &rho0, &grid, &opts)?;
                manifest.integrations = Some(r.integrations);
                manifest.member_stats = Some(r.member_stats);
                r.trajectory
            }
            Method::Ap => {
                let r = ap_run(&ens, p, &rho0, &grid, &opts)?;
                if verify {
                    let a = &r.averaged;
                    let d = rk4_check(cfg, a.drive_phase, &a.couplings, a.detector_phase, &rho0, &r.trajectory)?;
                    manifest.verify = Some(VerifyReport {
                        couplings_checked: true,
                        rk4_max_abs_diff: Some(d),
                        rk4_dt: Some(VERIFY_RK4_DT),
                    });
                }
                manifest.averaged = Some(r.averaged);
                r.trajectory
            }
        };
        manifest.stats = t.meta.stats;
        manifest.monitor = t.meta.monitor;
        match long_time_metrics(&t, cfg.analysis.window_fraction) {
            Ok(m) => manifest.metrics = Some(m),
            Err(e) => manifest.metrics_error = Some(e.to_string()),
        }
        write(format!("{prefix}_trajectory.csv"), &trajectory_csv(&t))?;
        if let Some(states) = &t.snapshots {
            write(format!("{prefix}_rho.csv"), &rho_csv(&t.times, states))?;
        }
        trajectory = Some(t);
    }
    manifest.valid &= manifest.monitor.is_valid();
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.outputs = outputs;
    let manifest_path = dir.join(format!("{prefix}_manifest.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    Ok(RunOutcome { manifest, manifest_path, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    const SINGLE: &str = "[scenario.single]\nr12 = 0.25\ntheta = 1.5707963267948966\nphi = 0.7853981633974483\n";

    #[test]
    fn defaults_fill_in() {
        let c = parse_config(SINGLE).unwrap();
        assert_eq!(c.params, PhysParams::default());
        assert_eq!(c.method, Method::Single);
        assert_eq!(c.integrator.grid().len(), 5001);
        assert_eq!(c.initial_state, InitialState::BothExcited);
    }

    #[test]
    fn scenario_count_rule() {
        for text in ["method = \"ac\"\n", "[scenario]\n"] {
            let e = parse_config(text).unwrap_err().to_string();
            assert!(e.contains("exactly one scenario required"), "{e}");
        }
        let two = format!("{SINGLE}[scenario.sphere]\nr12 = 0.2\n");
        assert!(parse_config(&two).unwrap_err().to_string().contains("exactly one scenario required"));
    }

    #[test]
    fn schema_errors_name_the_path() {
        let e = parse_config(&format!("[params]\nrabi1 = \"x\"\n{SINGLE}")).unwrap_err().to_string();
        assert!(e.starts_with("params.rabi1"), "{e}");
        let e = parse_config("[scenario.sphere]\nr12 = 0.2\nn_thta = 3\n").unwrap_err().to_string();
        assert!(e.starts_with("scenario"), "{e}");
        assert!(e.contains("n_thta"), "{e}");
        let e = parse_config(&format!("[integratr]\n{SINGLE}")).unwrap_err().to_string();
        assert!(e.contains("integratr"), "{e}");
    }

    #[test]
    fn sweep_rules() {
        let s = format!("[sweep]\naxis = \"r12\"\nvalues = [0.1]\n{SINGLE}");
        assert!(parse_config(&s).unwrap_err().to_string().contains("sweep requires method ac or ap"));
        let ok = format!("method = \"ac\"\n{s}");
        assert!(parse_config(&ok).is_ok());
        let bad = ok.replace("\"r12\"", "\"z_max\"");
        assert!(parse_config(&bad).is_err());
        let p = ok.replace("\"r12\"", "\"params.rabi2\"");
        assert!(parse_config(&p).is_ok());
        let p = ok.replace("\"r12\"", "\"params.nope\"");
        assert!(parse_config(&p).is_err());
    }

    #[test]
    fn method_single_needs_singleton() {
        let t = "[scenario.phi_circle]\nr12 = 0.1\ntheta = 1.0\nn = 4\n";
        assert!(parse_config(t).is_err());
        assert!(parse_config(&format!("method = \"ap\"\n{t}")).is_ok());
    }

    #[test]
    fn round_trip_full_config() {
        let mut c = RunConfig::new(EnsembleDescriptor::Flyby {
            r_min: 0.05,
            phi: 0.3,
            z_max: 1.5,
            n: 33,
            measure: crate::ensembles::FlybyMeasure::SphericalVolume,
        });
        c.method = Method::Ap;
        c.threads = Some(3);
        c.initial_state = InitialState::Product { a: 3, b: 1 };
        c.sweep = Some(SweepConfig { axis: "z_max".into(), values: vec![0.0, 0.5, 1.0], metric: Metric::IMean });
        c.output.write_rho = true;
        let text = serialize_config(&c);
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn ensemble_dump_rows() {
        let c = parse_config(SINGLE).unwrap();
        let csv = dump_ensemble(&c).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "r,theta,phi,weight");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].ends_with(",1.0000000000000000e0"));
        let mut c = RunConfig::new(EnsembleDescriptor::PhiCircle { r12: 0.1, theta: FRAC_PI_2, n: 4 });
        c.method = Method::Ac;
        let csv = dump_ensemble(&c).unwrap();
        let w: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(w, vec!["2.5000000000000000e-1"; 4]);
    }

    #[test]
    fn number_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, 6.02e23, -1e-300, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }
}
