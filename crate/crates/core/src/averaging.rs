//! The two averaging methods over a weighted ensemble.
//!
//! AC integrates every member and averages the intensity trajectories. AP
//! averages the coupling constants (and the geometric phase factors) first
//! and integrates once.

use std::collections::HashMap;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::couplings::{all_couplings, CouplingError, CouplingSet};
use crate::dynamics::{
    build_superoperators_with_drive_phase, integrate, DensityMatrix, DynamicsError, Evolution,
    IntegrateOptions, MonitorSummary, TimeGrid, Trajectory, TrajectoryMeta,
};
use crate::ensembles::{EnsembleDescriptor, EnsembleError, WeightedEnsemble};
use crate::integrator::IntegratorStats;
use crate::model::{Geometry, PhysParams};
use crate::observables::{long_time_metrics, LongTimeMetrics, ObservableError};

#[derive(Debug, Error)]
pub enum AveragingError {
    #[error("member {index}: {source}")]
    Coupling { index: usize, source: CouplingError },
    #[error("member {index}: {source}")]
    Member { index: usize, source: DynamicsError },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error("unknown sweep axis '{0}'")]
    UnknownAxis(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Single,
    Ac,
    Ap,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Ac => "ac",
            Method::Ap => "ap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub integrate: IntegrateOptions,
    /// Cross-check closed-form cross couplings against the tensor contraction.
    pub verify: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// Runs `f` on a pool of the requested size.
pub fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, AveragingError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| AveragingError::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn couplings_of(
    ens: &WeightedEnsemble,
    p: &PhysParams,
    verify: bool,
) -> Result<Vec<CouplingSet>, AveragingError> {
    ens.members()
        .par_iter()
        .enumerate()
        .map(|(index, m)| {
            all_couplings(&m.geometry, p, verify).map_err(|source| AveragingError::Coupling { index, source })
        })
        .collect()
}

fn meta(label: &str, p: &PhysParams, members: usize, evs: &[&Evolution]) -> TrajectoryMeta {
    let mut stats = IntegratorStats::default();
    let mut monitor = MonitorSummary::default();
    for e in evs {
        stats.merge(&e.stats);
        monitor.merge(&e.monitor);
    }
    TrajectoryMeta { label: label.to_string(), big_delta: p.big_delta(), members, stats, monitor }
}

/// One geometry, one integration.
pub fn single_run(
    g: &Geometry,
    p: &PhysParams,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &RunOptions,
) -> Result<Trajectory, AveragingError> {
    let c = all_couplings(g, p, opts.verify).map_err(|source| AveragingError::Coupling { index: 0, source })?;
    let sup = build_superoperators_with_drive_phase(p, &c, g.drive_phase(p.k0));
    let ev = integrate(rho0, &sup, p.big_delta(), grid, &opts.integrate)?;
    let mut t = ev.to_trajectory(g.detector_phase(p.k0), "single");
    t.meta = meta("single", p, 1, &[&ev]);
    Ok(t)
}

/// Members whose generators coincide (same couplings and laser phase up to
/// rounding) share one integration; only their detector phases differ.
fn dynamics_key(c: &CouplingSet, drive: C64) -> [i64; 8] {
    let q = |x: f64| (x * 1e11).round() as i64;
    let a = c.as_array();
    [q(a[0]), q(a[1]), q(a[2]), q(a[3]), q(a[4]), q(a[5]), q(drive.re), q(drive.im)]
}

#[derive(Debug, Clone)]
pub struct AcResult {
    pub trajectory: Trajectory,
    /// Integrator statistics of each member, in member order. Members that
    /// share dynamics report the statistics of their shared integration.
    pub member_stats: Vec<IntegratorStats>,
    /// Number of distinct integrations performed.
    pub integrations: usize,
}

/// Weighted average of the member intensity trajectories on a common grid.
pub fn ac_average(
    ens: &WeightedEnsemble,
    p: &PhysParams,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &RunOptions,
) -> Result<AcResult, AveragingError> {
    with_threads(opts.threads, || ac_inner(ens, p, rho0, grid, opts))?
}

fn ac_inner(
    ens: &WeightedEnsemble,
    p: &PhysParams,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &RunOptions,
) -> Result<AcResult, AveragingError> {
    grid.validate()?;
    let couplings = couplings_of(ens, p, opts.verify)?;
    let members = ens.members();

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<[i64; 8], usize> = HashMap::new();
    for (k, m) in members.iter().enumerate() {
        let key = dynamics_key(&couplings[k], m.geometry.drive_phase(p.k0));
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(k);
    }

    let evolutions: Vec<Evolution> = groups
        .par_iter()
        .map(|g| {
            let lead = g[0];
            let drive = members[lead].geometry.drive_phase(p.k0);
            let sup = build_superoperators_with_drive_phase(p, &couplings[lead], drive);
            integrate(rho0, &sup, p.big_delta(), grid, &opts.integrate)
                .map_err(|source| AveragingError::Member { index: lead, source })
        })
        .collect::<Result<_, _>>()?;

    // Fixed-order reduction: groups in order of their first member.
    let n = grid.len();
    let mut acc = vec![0.0; n];
    let mut member_stats = vec![IntegratorStats::default(); members.len()];
    for (g, ev) in groups.iter().zip(&evolutions) {
        let mut w_sum = 0.0;
        let mut phase = C64::new(0.0, 0.0);
        for &k in g {
            let m = &members[k];
            w_sum += m.weight;
            phase += m.geometry.detector_phase(p.k0) * m.weight;
            member_stats[k] = ev.stats;
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += w_sum * (ev.population_a[i] + ev.population_b[i]) + 2.0 * (ev.coherence[i] * phase).re;
        }
    }
    let q = ens.q();
    let intensity = acc.into_iter().map(|v| v / q).collect();
    let refs: Vec<&Evolution> = evolutions.iter().collect();
    let trajectory = Trajectory::new(
        evolutions[0].times.clone(),
        intensity,
        meta("ac", p, members.len(), &refs),
    );
    Ok(AcResult { trajectory, member_stats, integrations: groups.len() })
}

/// Ensemble-averaged coupling constants and geometric phase factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedCouplingSet {
    pub couplings: CouplingSet,
    /// ⟨e^{−i k₀ r₁₂ sinθ sinφ}⟩.
    pub detector_phase: C64,
    /// Laser phase on atom B, e^{i k₀ ⟨z_B⟩}.
    pub drive_phase: C64,
    /// Weight of the population part of the intensity; always one.
    pub upper_population_weight: f64,
}

pub fn ap_average_couplings(
    ens: &WeightedEnsemble,
    p: &PhysParams,
    verify: bool,
) -> Result<AveragedCouplingSet, AveragingError> {
    let couplings = couplings_of(ens, p, verify)?;
    let q = ens.q();
    let mut sums = [0.0; 6];
    let mut detector = C64::new(0.0, 0.0);
    let mut kz = 0.0;
    for (m, c) in ens.members().iter().zip(&couplings) {
        for (s, v) in sums.iter_mut().zip(c.as_array()) {
            *s += m.weight * v;
        }
        let g = m.geometry;
        detector += g.detector_phase(p.k0) * m.weight;
        kz += m.weight * (p.k0 * g.r12() * g.theta().cos());
    }
    Ok(AveragedCouplingSet {
        couplings: CouplingSet::from_array(sums.map(|s| s / q)),
        detector_phase: detector / q,
        drive_phase: C64::from_polar(1.0, kz / q),
        upper_population_weight: 1.0,
    })
}

#[derive(Debug, Clone)]
pub struct ApResult {
    pub trajectory: Trajectory,
    pub averaged: AveragedCouplingSet,
}

pub fn ap_run(
    ens: &WeightedEnsemble,
    p: &PhysParams,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &RunOptions,
) -> Result<ApResult, AveragingError> {
    let averaged = with_threads(opts.threads, || ap_average_couplings(ens, p, opts.verify))??;
    let sup = build_superoperators_with_drive_phase(p, &averaged.couplings, averaged.drive_phase);
    let ev = integrate(rho0, &sup, p.big_delta(), grid, &opts.integrate)?;
    let mut trajectory = ev.to_trajectory(averaged.detector_phase, "ap");
    trajectory.meta = meta("ap", p, ens.len(), &[&ev]);
    Ok(ApResult { trajectory, averaged })
}

/// Trajectory for one scenario under the given method. `Single` requires a
/// singleton ensemble.
pub fn run_method(
    method: Method,
    ens: &WeightedEnsemble,
    p: &PhysParams,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &RunOptions,
) -> Result<Trajectory, AveragingError> {
    match method {
        Method::Single => {
            if ens.len() != 1 {
                return Err(EnsembleError::Invalid(format!(
                    "method single needs a single geometry, scenario has {} members",
                    ens.len()
                ))
                .into());
            }
            single_run(&ens.members()[0].geometry, p, rho0, grid, opts)
        }
        Method::Ac => Ok(ac_average(ens, p, rho0, grid, opts)?.trajectory),
        Method::Ap => Ok(ap_run(ens, p, rho0, grid, opts)?.trajectory),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    DeltaI,
    IMean,
    Stationary,
}

impl Metric {
    pub fn value(&self, m: &LongTimeMetrics) -> f64 {
        match self {
            Metric::DeltaI => m.delta_i,
            Metric::IMean => m.mean,
            Metric::Stationary => f64::from(u8::from(m.stationary)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Option<LongTimeMetrics>,
    pub stats: Option<IntegratorStats>,
    pub monitor: Option<MonitorSummary>,
    pub ensemble_hash: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: Method,
    pub axis: String,
    pub metric: Metric,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// The chosen metric per row; NaN for failed rows.
    pub fn metric_values(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.metrics.as_ref().map_or(f64::NAN, |m| self.metric.value(m)))
            .collect()
    }
}

/// Scenario inputs for one sweep row after applying the axis value.
fn apply_axis(
    descriptor: &EnsembleDescriptor,
    p: &PhysParams,
    axis: &str,
    value: f64,
) -> Result<(EnsembleDescriptor, PhysParams), AveragingError> {
    if let Some(name) = axis.strip_prefix("params.") {
        let mut v = serde_json::to_value(p).expect("params serialize");
        let slot = v
            .get_mut(name)
            .ok_or_else(|| AveragingError::UnknownAxis(axis.to_string()))?;
        *slot = serde_json::json!(value);
        let p = serde_json::from_value(v).map_err(|_| AveragingError::UnknownAxis(axis.to_string()))?;
        Ok((*descriptor, p))
    } else {
        match descriptor.with_param(axis, value) {
            Err(EnsembleError::UnknownParameter(_)) => Err(AveragingError::UnknownAxis(axis.to_string())),
            other => Ok((other?, *p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec<'a> {
    pub method: Method,
    pub descriptor: &'a EnsembleDescriptor,
    /// An ensemble parameter name (`r_a`, `z_max`, ...) or `params.<field>`.
    pub axis: &'a str,
    pub values: &'a [f64],
    pub metric: Metric,
    pub window_fraction: f64,
}

/// Runs one scenario per axis value. Row failures are recorded, not fatal;
/// an unknown axis fails the whole sweep.
pub fn sweep(
    spec: &SweepSpec<'_>,
    p: &PhysParams,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: &RunOptions,
) -> Result<SweepResult, AveragingError> {
    if let Some(&v) = spec.values.first() {
        apply_axis(spec.descriptor, p, spec.axis, v)?;
    }
    let inner = RunOptions { threads: None, ..*opts };
    let rows = with_threads(opts.threads, || {
        spec.values
            .par_iter()
            .map(|&value| {
                let row = || -> Result<SweepRow, AveragingError> {
                    let (d, p) = apply_axis(spec.descriptor, p, spec.axis, value)?;
                    let ens = d.build()?;
                    let t = run_method(spec.method, &ens, &p, rho0, grid, &inner)?;
                    let m = long_time_metrics(&t, spec.window_fraction)?;
                    Ok(SweepRow {
                        value,
                        metrics: Some(m),
                        stats: Some(t.meta.stats),
                        monitor: Some(t.meta.monitor),
                        ensemble_hash: Some(ens.hash()),
                        error: None,
                    })
                };
                row().unwrap_or_else(|e| SweepRow {
                    value,
                    metrics: None,
                    stats: None,
                    monitor: None,
                    ensemble_hash: None,
                    error: Some(e.to_string()),
                })
            })
            .collect::<Vec<_>>()
    })?;
    Ok(SweepResult { method: spec.method, axis: spec.axis.to_string(), metric: spec.metric, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InitialState;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn short() -> TimeGrid {
        TimeGrid::new(4.0, 0.01).unwrap()
    }

    fn rho0() -> DensityMatrix {
        InitialState::BothExcited.density_matrix().unwrap()
    }

    #[test]
    fn singleton_pipelines_agree() {
        let p = PhysParams::default();
        let d = EnsembleDescriptor::Single { r12: 0.12, theta: 1.1, phi: 0.6 };
        let ens = d.build().unwrap();
        let opts = RunOptions::default();
        let s = single_run(&ens.members()[0].geometry, &p, &rho0(), &short(), &opts).unwrap();
        let ac = ac_average(&ens, &p, &rho0(), &short(), &opts).unwrap().trajectory;
        let ap = ap_run(&ens, &p, &rho0(), &short(), &opts).unwrap().trajectory;
        assert_eq!(s.intensity, ac.intensity);
        assert_eq!(s.intensity, ap.intensity);
    }

    #[test]
    fn two_members_give_the_mean() {
        let p = PhysParams::default();
        let d = EnsembleDescriptor::DistanceOscillation { r_m: 0.2, r_a: 0.05, theta: 1.0, phi: 0.3, n: 2 };
        let ens = d.build().unwrap();
        let opts = RunOptions::default();
        let ac = ac_average(&ens, &p, &rho0(), &short(), &opts).unwrap();
        assert_eq!(ac.integrations, 2);
        let a = single_run(&ens.members()[0].geometry, &p, &rho0(), &short(), &opts).unwrap();
        let b = single_run(&ens.members()[1].geometry, &p, &rho0(), &short(), &opts).unwrap();
        for k in 0..a.len() {
            let want = 0.5 * (a.intensity[k] + b.intensity[k]);
            assert!((ac.trajectory.intensity[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn mirror_members_share_an_integration() {
        let p = PhysParams::default();
        let ens = EnsembleDescriptor::ThetaCircle { r12: 0.1, phi: 0.2 * std::f64::consts::PI, n: 8 }
            .build()
            .unwrap();
        let ac = ac_average(&ens, &p, &rho0(), &short(), &RunOptions::default()).unwrap();
        assert_eq!(ac.integrations, 4);
        // Same value computed member by member.
        let mut want = vec![0.0; short().len()];
        for m in ens.members() {
            let t = single_run(&m.geometry, &p, &rho0(), &short(), &RunOptions::default()).unwrap();
            for (w, v) in want.iter_mut().zip(&t.intensity) {
                *w += m.weight * v / ens.q();
            }
        }
        for (a, b) in ac.trajectory.intensity.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn phi_circle_cross_terms_average_out() {
        let p = PhysParams::default();
        let ens = EnsembleDescriptor::PhiCircle { r12: 0.1, theta: 0.3 * std::f64::consts::PI, n: 16 }
            .build()
            .unwrap();
        let a = ap_average_couplings(&ens, &p, true).unwrap();
        assert!(a.couplings.gamma_vc.abs() < 1e-15 && a.couplings.omega_vc.abs() < 1e-13);
        assert!(a.detector_phase.norm() <= 1.0);
    }

    #[test]
    fn averaged_constants_stay_in_range() {
        let p = PhysParams::default();
        let ens = EnsembleDescriptor::Flyby {
            r_min: 0.05,
            phi: FRAC_PI_4,
            z_max: 0.5,
            n: 9,
            measure: Default::default(),
        }
        .build()
        .unwrap();
        let a = ap_average_couplings(&ens, &p, false).unwrap().couplings.as_array();
        let cs: Vec<[f64; 6]> = ens
            .members()
            .iter()
            .map(|m| all_couplings(&m.geometry, &p, false).unwrap().as_array())
            .collect();
        for j in 0..6 {
            let lo = cs.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
            let hi = cs.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(a[j] >= lo - 1e-12 && a[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn sweep_rows_and_errors() {
        let p = PhysParams::default();
        let d = EnsembleDescriptor::Single { r12: 0.25, theta: FRAC_PI_2, phi: FRAC_PI_4 };
        let grid = TimeGrid::new(20.0, 0.01).unwrap();
        let spec = SweepSpec {
            method: Method::Single,
            descriptor: &d,
            axis: "r12",
            values: &[0.25, 0.0],
            metric: Metric::DeltaI,
            window_fraction: 0.5,
        };
        let r = sweep(&spec, &p, &rho0(), &grid, &RunOptions::default()).unwrap();
        assert_eq!(r.rows.len(), 2);
        let direct = single_run(&Geometry::new(0.25, FRAC_PI_2, FRAC_PI_4).unwrap(), &p, &rho0(), &grid, &RunOptions::default())
            .unwrap();
        let m = long_time_metrics(&direct, 0.5).unwrap();
        assert_eq!(r.rows[0].metrics.unwrap(), m);
        assert!(r.rows[1].error.is_some());
        let bad = SweepSpec { axis: "nope", ..spec.clone() };
        assert!(matches!(sweep(&bad, &p, &rho0(), &grid, &RunOptions::default()), Err(AveragingError::UnknownAxis(_))));
        let pspec = SweepSpec { axis: "params.rabi1", values: &[3.0], ..spec };
        let r = sweep(&pspec, &p, &rho0(), &grid, &RunOptions::default()).unwrap();
        assert_eq!(r.rows[0].metrics.unwrap(), m);
    }
}
