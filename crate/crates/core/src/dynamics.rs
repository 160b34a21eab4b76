//! Master equation of the driven pair and its time integration.
//!
//! The density matrix is evolved as the column-stacked 81-vector vec(ρ).
//! In the chosen interaction picture the generator has the form
//!
//! ```text
//! dρ/dt = (L₀ + e^{iΔt} L₊ + e^{−iΔt} L₋) vec(ρ)
//! ```
//!
//! where L₀ collects detunings, laser driving, single-atom decay and the
//! parallel-dipole couplings, L₊ collects the orthogonal-dipole (cross)
//! damping and shift, and L₋ is the Hermitian-conjugate partner of L₊. The
//! three matrices are built once per geometry; only the two scalar phases
//! change inside the right-hand side.

use std::collections::BTreeMap;

use nalgebra::SMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::couplings::CouplingSet;
use crate::integrator::{self, Dopri5Options, IntegrationError, IntegratorStats, Tolerances};
use crate::model::{flat, s, Atom, Geometry, ModelError, Op9, PhysParams, DIM};

/// Length of vec(ρ).
pub const VEC_DIM: usize = DIM * DIM;

/// Hermiticity tolerance at construction.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Unit-trace tolerance at construction.
pub const TRACE_TOL: f64 = 1e-8;
/// Hermiticity defect ‖ρ − ρ†‖∞ tolerated at output points.
pub const HERMITIAN_MONITOR_TOL: f64 = 1e-8;
/// Trace drift that aborts an integration.
pub const TRACE_HARD_LIMIT: f64 = 1e-6;
/// Most negative eigenvalue tolerated before a positivity violation is
/// recorded.
pub const POSITIVITY_TOL: f64 = -1e-6;

/// Flat indices entering the detector observable.
const COHERENCE_ROW: usize = flat(1, 3);
const COHERENCE_COL: usize = flat(3, 1);

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("density matrix is not Hermitian (defect {0:e})")]
    NotHermitian(f64),
    #[error("density matrix trace {0} differs from one")]
    BadTrace(C64),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("integration failed: {0}")]
    Integration(#[from] IntegrationError),
}

/// Two-atom density matrix in the A-major product basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Op9);

impl DensityMatrix {
    /// Validates Hermiticity and unit trace.
    pub fn new(m: Op9) -> Result<Self, DynamicsError> {
        let defect = hermiticity_defect(&m);
        if defect > HERMITIAN_TOL {
            return Err(DynamicsError::NotHermitian(defect));
        }
        let tr = m.trace();
        if (tr - C64::new(1.0, 0.0)).norm() > TRACE_TOL {
            return Err(DynamicsError::BadTrace(tr));
        }
        Ok(Self(m))
    }

    /// Pure product state |a, b⟩⟨a, b|.
    pub fn product(a: usize, b: usize) -> Result<Self, DynamicsError> {
        let k = crate::model::ket(a, b)?;
        Ok(Self(k * k.adjoint()))
    }

    /// |ψ⟩⟨ψ| for a normalized ket.
    pub fn pure(psi: &SMatrix<C64, DIM, 1>) -> Result<Self, DynamicsError> {
        Self::new(psi * psi.adjoint())
    }

    pub fn matrix(&self) -> &Op9 {
        &self.0
    }

    /// Column-stacked vec(ρ); nalgebra storage is already column-major.
    pub fn to_vec(&self) -> [C64; VEC_DIM] {
        let mut out = [C64::new(0.0, 0.0); VEC_DIM];
        out.copy_from_slice(self.0.as_slice());
        out
    }

    /// Rebuilds a matrix from vec(ρ) without validation.
    pub fn from_vec_unchecked(v: &[C64]) -> Self {
        Self(Op9::from_column_slice(v))
    }

    /// ⟨S₃₃⟩ of one atom.
    pub fn upper_population(&self, atom: Atom) -> f64 {
        upper_population(self.0.as_slice(), atom)
    }

    /// ⟨S₃₁^(A) S₁₃^(B)⟩ = ρ_{(1,3),(3,1)}.
    pub fn interatomic_coherence(&self) -> C64 {
        self.0[(COHERENCE_ROW, COHERENCE_COL)]
    }

    /// Convex combination w·self + (1 − w)·other.
    pub fn mix(&self, other: &DensityMatrix, w: f64) -> DensityMatrix {
        Self(self.0 * C64::new(w, 0.0) + other.0 * C64::new(1.0 - w, 0.0))
    }
}

fn upper_population(v: &[C64], atom: Atom) -> f64 {
    (1..=3)
        .map(|o| {
            let k = match atom {
                Atom::A => flat(3, o),
                Atom::B => flat(o, 3),
            };
            v[k * DIM + k].re
        })
        .sum()
}

fn hermiticity_defect(m: &Op9) -> f64 {
    // Induced ∞-norm (max row sum) of ρ − ρ†.
    let d = m - m.adjoint();
    (0..DIM)
        .map(|i| (0..DIM).map(|j| d[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn hermiticity_defect_vec(v: &[C64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..DIM {
        let mut row = 0.0;
        for j in 0..DIM {
            row += (v[j * DIM + i] - v[i * DIM + j].conj()).norm();
        }
        worst = worst.max(row);
    }
    worst
}

fn trace_vec(v: &[C64]) -> C64 {
    (0..DIM).map(|k| v[k * DIM + k]).sum()
}

/// Sparse 81×81 matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Superoperator {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Superoperator {
    fn from_entries(entries: &BTreeMap<(usize, usize), C64>) -> Self {
        let mut row_ptr = vec![0; VEC_DIM + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (&(r, c), &v) in entries {
            if v.norm() == 0.0 {
                continue;
            }
            row_ptr[r + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for r in 0..VEC_DIM {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_zero(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[range.clone()]
            .iter()
            .position(|&c| c == col)
            .map(|k| self.vals[range.start + k])
            .unwrap_or_default()
    }

    /// y ← M x.
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        for r in 0..VEC_DIM {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    /// Row vector ⟨vec(1)| M, i.e. the trace functional applied after M.
    pub fn trace_form(&self) -> [C64; VEC_DIM] {
        let mut out = [C64::new(0.0, 0.0); VEC_DIM];
        for k in 0..DIM {
            let r = k * DIM + k;
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[e]] += self.vals[e];
            }
        }
        out
    }
}

/// Constant part, e^{+iΔt} part and e^{−iΔt} part of the generator.
#[derive(Debug, Clone)]
pub struct SuperoperatorTriple {
    pub constant: Superoperator,
    pub plus: Superoperator,
    pub minus: Superoperator,
    fused: Fused,
}

/// Union sparsity pattern of the triple with one value array per part.
#[derive(Debug, Clone)]
struct Fused {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    v0: Vec<C64>,
    vp: Vec<C64>,
    vm: Vec<C64>,
    time_dependent: bool,
}

impl Fused {
    fn new(l0: &Superoperator, lp: &Superoperator, lm: &Superoperator) -> Self {
        let mut map: BTreeMap<(usize, usize), [C64; 3]> = BTreeMap::new();
        for (slot, m) in [l0, lp, lm].into_iter().enumerate() {
            for r in 0..VEC_DIM {
                for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                    map.entry((r, m.cols[k])).or_default()[slot] += m.vals[k];
                }
            }
        }
        let mut row_ptr = vec![0; VEC_DIM + 1];
        let (mut cols, mut v0, mut vp, mut vm) = (vec![], vec![], vec![], vec![]);
        for ((r, c), v) in map {
            row_ptr[r + 1] += 1;
            cols.push(c);
            v0.push(v[0]);
            vp.push(v[1]);
            vm.push(v[2]);
        }
        for r in 0..VEC_DIM {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { row_ptr, cols, v0, vp, vm, time_dependent: !(lp.is_zero() && lm.is_zero()) }
    }

    #[inline]
    fn apply(&self, t: f64, big_delta: f64, x: &[C64], y: &mut [C64]) {
        if self.time_dependent {
            let ep = C64::from_polar(1.0, big_delta * t);
            let em = ep.conj();
            for r in 0..VEC_DIM {
                let mut acc = C64::new(0.0, 0.0);
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += (self.v0[k] + ep * self.vp[k] + em * self.vm[k]) * x[self.cols[k]];
                }
                y[r] = acc;
            }
        } else {
            for r in 0..VEC_DIM {
                let mut acc = C64::new(0.0, 0.0);
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += self.v0[k] * x[self.cols[k]];
                }
                y[r] = acc;
            }
        }
    }
}

impl SuperoperatorTriple {
    pub fn is_time_dependent(&self) -> bool {
        self.fused.time_dependent
    }

    /// d vec(ρ)/dt at time t.
    pub fn apply(&self, t: f64, big_delta: f64, x: &[C64], y: &mut [C64]) {
        self.fused.apply(t, big_delta, x, y)
    }
}

/// Accumulates terms c·A ρ B into sparse vectorized form:
/// vec(AρB) = (Bᵀ ⊗ A) vec(ρ).
#[derive(Default)]
struct Accumulator(BTreeMap<(usize, usize), C64>);

impl Accumulator {
    fn sandwich(&mut self, c: C64, a: &Op9, b: &Op9) {
        if c.norm() == 0.0 {
            return;
        }
        let an = nonzeros(a);
        let bn = nonzeros(b);
        for &(i, k, av) in &an {
            for &(l, j, bv) in &bn {
                *self.0.entry((j * DIM + i, l * DIM + k)).or_default() += c * av * bv;
            }
        }
    }

    fn left(&mut self, c: C64, a: &Op9) {
        self.sandwich(c, a, &Op9::identity());
    }

    fn right(&mut self, c: C64, b: &Op9) {
        self.sandwich(c, &Op9::identity(), b);
    }

    /// c·[H, ρ]. Its Hermitian-conjugate image is −c̄·[H†, ρ].
    fn commutator(&mut self, c: C64, h: &Op9) {
        self.left(c, h);
        self.right(-c, h);
    }

    /// c·(Xρ − 2 Y ρ Z + ρX): the damping pattern shared by all decay terms.
    fn damping(&mut self, c: C64, x: &Op9, y: &Op9, z: &Op9) {
        self.left(c, x);
        self.sandwich(-2.0 * c, y, z);
        self.right(c, x);
    }

    fn finish(&self) -> Superoperator {
        Superoperator::from_entries(&self.0)
    }
}

fn nonzeros(m: &Op9) -> Vec<(usize, usize, C64)> {
    let mut out = Vec::new();
    for j in 0..DIM {
        for i in 0..DIM {
            let v = m[(i, j)];
            if v.norm() != 0.0 {
                out.push((i, j, v));
            }
        }
    }
    out
}

/// Generator for one geometry, with laser phase on atom B taken from `g`.
pub fn build_superoperators(p: &PhysParams, c: &CouplingSet, g: &Geometry) -> SuperoperatorTriple {
    build_superoperators_with_drive_phase(p, c, g.drive_phase(p.k0))
}

/// Generator with an explicit laser phase factor on atom B (atom A sits at
/// the origin and sees phase one).
pub fn build_superoperators_with_drive_phase(
    p: &PhysParams,
    c: &CouplingSet,
    drive_phase_b: C64,
) -> SuperoperatorTriple {
    let i = C64::new(0.0, 1.0);
    let re = |x: f64| C64::new(x, 0.0);
    let mut l0 = Accumulator::default();
    let mut lp = Accumulator::default();
    let mut lm = Accumulator::default();
    let detunings = [p.det1, p.det2];
    let rabis = [p.rabi1, p.rabi2];
    let gammas = [p.gamma1, p.gamma2];
    let gammas_dd = [c.gamma1_dd, c.gamma2_dd];
    let omegas_dd = [c.omega1_dd, c.omega2_dd];

    for mu in Atom::BOTH {
        let nu = mu.other();
        let phase = match mu {
            Atom::A => C64::new(1.0, 0.0),
            Atom::B => drive_phase_b,
        };
        for j in 1..=2 {
            // −i[Δ_j S_jj, ρ]
            l0.commutator(-i * detunings[j - 1], &s(mu, j, j));

            // +i[S_3j Ω_j(r_μ) + H.c., ρ]
            let omega = rabis[j - 1] * phase;
            let v = s(mu, 3, j) * omega + s(mu, j, 3) * omega.conj();
            l0.commutator(i, &v);

            // −γ_j (S₃₃ρ − 2 S_j3 ρ S_3j + ρS₃₃)
            l0.damping(re(-gammas[j - 1]), &s(mu, 3, 3), &s(mu, j, 3), &s(mu, 3, j));

            // −Γ_j (S_3j^μ S_j3^ν ρ − 2 S_j3^ν ρ S_3j^μ + ρ S_3j^μ S_j3^ν)
            let x = s(mu, 3, j) * s(nu, j, 3);
            l0.damping(re(-gammas_dd[j - 1]), &x, &s(nu, j, 3), &s(mu, 3, j));
        }

        // Cross terms with X = S₃₂^μ S₁₃^ν; the L₋ entries are the
        // Hermitian-conjugate images, c·AρB ↦ c̄·B†ρA†.
        let x = s(mu, 3, 2) * s(nu, 1, 3);
        let xd = x.adjoint();
        let y = s(nu, 1, 3);
        let z = s(mu, 3, 2);
        let g = re(-c.gamma_vc);
        lp.damping(g, &x, &y, &z);
        lm.damping(g.conj(), &xd, &z.adjoint(), &y.adjoint());
        let w = i * c.omega_vc;
        lp.commutator(w, &x);
        lm.commutator(-w.conj(), &xd);
    }

    // Σ_j (iΩ_j^dd [S_3j^(A) S_j3^(B), ρ] + H.c.)
    for j in 1..=2 {
        let a = s(Atom::A, 3, j) * s(Atom::B, j, 3);
        let w = i * omegas_dd[j - 1];
        l0.commutator(w, &a);
        l0.commutator(-w.conj(), &a.adjoint());
    }

    let constant = l0.finish();
    let plus = lp.finish();
    let minus = lm.finish();
    let fused = Fused::new(&constant, &plus, &minus);
    SuperoperatorTriple { constant, plus, minus, fused }
}

/// dρ/dt at time `t`.
pub fn rhs(t: f64, rho: &DensityMatrix, sup: &SuperoperatorTriple, big_delta: f64) -> Op9 {
    let x = rho.to_vec();
    let mut y = [C64::new(0.0, 0.0); VEC_DIM];
    sup.apply(t, big_delta, &x, &mut y);
    Op9::from_column_slice(&y)
}

/// Uniform output grid in units of 1/γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { t_start: 0.0, t_end: 50.0, dt: 0.01 }
    }
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self, DynamicsError> {
        let g = Self { t_start: 0.0, t_end, dt };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DynamicsError::Grid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_end > self.t_start) {
            return Err(DynamicsError::Grid(format!(
                "need t_end > t_start (got {} .. {})",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.t_end - self.t_start) / self.dt + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t_start + k as f64 * self.dt).collect()
    }
}

/// Integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub tol: Tolerances,
    /// Keep the full ρ at every output time.
    pub store_snapshots: bool,
    /// Positivity (minimum eigenvalue) is checked every this many outputs,
    /// plus the final one. Trace and Hermiticity are checked at all outputs.
    pub positivity_stride: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { tol: Tolerances::default(), store_snapshots: false, positivity_stride: 10 }
    }
}

/// What the validity monitor saw during one integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub max_trace_drift: f64,
    pub max_hermiticity_defect: f64,
    pub min_eigenvalue: f64,
    pub positivity_violations: usize,
}

impl Default for MonitorSummary {
    fn default() -> Self {
        Self {
            max_trace_drift: 0.0,
            max_hermiticity_defect: 0.0,
            min_eigenvalue: f64::INFINITY,
            positivity_violations: 0,
        }
    }
}

impl MonitorSummary {
    pub fn merge(&mut self, o: &MonitorSummary) {
        self.max_trace_drift = self.max_trace_drift.max(o.max_trace_drift);
        self.max_hermiticity_defect = self.max_hermiticity_defect.max(o.max_hermiticity_defect);
        self.min_eigenvalue = self.min_eigenvalue.min(o.min_eigenvalue);
        self.positivity_violations += o.positivity_violations;
    }

    pub fn is_valid(&self) -> bool {
        self.positivity_violations == 0
            && self.max_trace_drift <= TRACE_TOL
            && self.max_hermiticity_defect <= HERMITIAN_MONITOR_TOL
    }
}

/// Time series of the quantities the detector observable needs, plus the
/// optional full states.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub times: Vec<f64>,
    pub population_a: Vec<f64>,
    pub population_b: Vec<f64>,
    pub coherence: Vec<C64>,
    pub snapshots: Option<Vec<DensityMatrix>>,
    pub stats: IntegratorStats,
    pub monitor: MonitorSummary,
    pub big_delta: f64,
}

impl Evolution {
    /// Detector intensity ⟨S₃₃^A⟩ + ⟨S₃₃^B⟩ + 2 Re[⟨S₃₁^A S₁₃^B⟩ · f] for a
    /// detector phase factor f.
    pub fn intensity(&self, detector_phase: C64) -> Vec<f64> {
        self.population_a
            .iter()
            .zip(&self.population_b)
            .zip(&self.coherence)
            .map(|((a, b), c)| a + b + 2.0 * (c * detector_phase).re)
            .collect()
    }

    pub fn to_trajectory(&self, detector_phase: C64, label: impl Into<String>) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            intensity: self.intensity(detector_phase),
            snapshots: self.snapshots.clone(),
            meta: TrajectoryMeta {
                label: label.into(),
                big_delta: self.big_delta,
                members: 1,
                stats: self.stats,
                monitor: self.monitor,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub label: String,
    pub big_delta: f64,
    /// Number of geometries that contributed (1 for a single run).
    pub members: usize,
    pub stats: IntegratorStats,
    pub monitor: MonitorSummary,
}

/// Detector intensity on a uniform grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub intensity: Vec<f64>,
    pub snapshots: Option<Vec<DensityMatrix>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, intensity: Vec<f64>, meta: TrajectoryMeta) -> Self {
        Self { times, intensity, snapshots: None, meta }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }
}

/// Smallest eigenvalue of a Hermitian 9×9 matrix given as vec(ρ).
pub fn min_eigenvalue(v: &[C64]) -> f64 {
    let m = Op9::from_column_slice(v);
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Integrates from ρ₀ with the adaptive Dormand-Prince pair, sampling the
/// observables on `grid` and monitoring trace, Hermiticity and positivity.
pub fn integrate(
    rho0: &DensityMatrix,
    sup: &SuperoperatorTriple,
    big_delta: f64,
    grid: &TimeGrid,
    opts: &IntegrateOptions,
) -> Result<Evolution, DynamicsError> {
    grid.validate()?;
    let times = grid.times();
    let mut rec = Recorder::new(times.len(), opts, big_delta);
    let stats = integrator::dopri5(
        |t, x, y| sup.apply(t, big_delta, x, y),
        grid.t_start,
        &rho0.to_vec(),
        &times,
        &Dopri5Options { tol: opts.tol, ..Default::default() },
        |idx, _, v| rec.observe(idx, v),
    )?;
    Ok(rec.finish(times, stats))
}

/// Same observables from fixed-step RK4; `dt` must divide the output step.
pub fn integrate_fixed_step(
    rho0: &DensityMatrix,
    sup: &SuperoperatorTriple,
    big_delta: f64,
    grid: &TimeGrid,
    dt: f64,
    opts: &IntegrateOptions,
) -> Result<Evolution, DynamicsError> {
    grid.validate()?;
    let times = grid.times();
    let mut rec = Recorder::new(times.len(), opts, big_delta);
    let stats = integrator::rk4(
        |t, x, y| sup.apply(t, big_delta, x, y),
        grid.t_start,
        &rho0.to_vec(),
        dt,
        &times,
        |idx, _, v| rec.observe(idx, v),
    )?;
    Ok(rec.finish(times, stats))
}

struct Recorder {
    n: usize,
    stride: usize,
    store: bool,
    big_delta: f64,
    pop_a: Vec<f64>,
    pop_b: Vec<f64>,
    coh: Vec<C64>,
    snaps: Vec<DensityMatrix>,
    monitor: MonitorSummary,
}

impl Recorder {
    fn new(n: usize, opts: &IntegrateOptions, big_delta: f64) -> Self {
        Self {
            n,
            stride: opts.positivity_stride.max(1),
            store: opts.store_snapshots,
            big_delta,
            pop_a: Vec::with_capacity(n),
            pop_b: Vec::with_capacity(n),
            coh: Vec::with_capacity(n),
            snaps: Vec::new(),
            monitor: MonitorSummary::default(),
        }
    }

    fn observe(&mut self, idx: usize, v: &[C64]) -> Result<(), String> {
        let drift = (trace_vec(v) - C64::new(1.0, 0.0)).norm();
        self.monitor.max_trace_drift = self.monitor.max_trace_drift.max(drift);
        if drift > TRACE_HARD_LIMIT {
            return Err(format!("trace drift {drift:e} exceeds {TRACE_HARD_LIMIT:e}"));
        }
        let herm = hermiticity_defect_vec(v);
        self.monitor.max_hermiticity_defect = self.monitor.max_hermiticity_defect.max(herm);
        if idx.is_multiple_of(self.stride) || idx + 1 == self.n {
            let ev = min_eigenvalue(v);
            self.monitor.min_eigenvalue = self.monitor.min_eigenvalue.min(ev);
            if ev < POSITIVITY_TOL {
                self.monitor.positivity_violations += 1;
            }
        }
        self.pop_a.push(upper_population(v, Atom::A));
        self.pop_b.push(upper_population(v, Atom::B));
        self.coh.push(v[COHERENCE_COL * DIM + COHERENCE_ROW]);
        if self.store {
            self.snaps.push(DensityMatrix::from_vec_unchecked(v));
        }
        Ok(())
    }

    fn finish(self, times: Vec<f64>, stats: IntegratorStats) -> Evolution {
        Evolution {
            times,
            population_a: self.pop_a,
            population_b: self.pop_b,
            coherence: self.coh,
            snapshots: self.store.then_some(self.snaps),
            stats,
            monitor: self.monitor,
            big_delta: self.big_delta,
        }
    }
}

/// Initial state selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum InitialState {
    /// Both atoms in |3⟩.
    #[default]
    BothExcited,
    /// Both atoms in |1⟩.
    Ground,
    /// |a, b⟩ for arbitrary levels.
    Product { a: usize, b: usize },
}

impl InitialState {
    pub fn density_matrix(&self) -> Result<DensityMatrix, DynamicsError> {
        match *self {
            InitialState::BothExcited => DensityMatrix::product(3, 3),
            InitialState::Ground => DensityMatrix::product(1, 1),
            InitialState::Product { a, b } => DensityMatrix::product(a, b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::couplings::all_couplings;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn reference_case() -> (PhysParams, Geometry, CouplingSet) {
        let p = PhysParams::default();
        let g = Geometry::new(0.25, FRAC_PI_2, FRAC_PI_4).unwrap();
        let c = all_couplings(&g, &p, true).unwrap();
        (p, g, c)
    }

    fn quiet() -> PhysParams {
        PhysParams {
            rabi1: 0.0,
            rabi2: 0.0,
            det1: 0.0,
            det2: 0.0,
            delta_lower: 0.0,
            gamma1: 0.0,
            gamma2: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_generator() {
        let g = Geometry::new(0.3, 1.0, 1.0).unwrap();
        let sup = build_superoperators(&quiet(), &CouplingSet::zero(), &g);
        assert!(sup.constant.is_zero() && sup.plus.is_zero() && sup.minus.is_zero());
    }

    #[test]
    fn no_cross_terms_no_time_dependence() {
        let p = PhysParams::default();
        let g = Geometry::new(0.1, FRAC_PI_2, FRAC_PI_2).unwrap();
        let c = all_couplings(&g, &p, false).unwrap();
        let sup = build_superoperators(&p, &c, &g);
        assert!(sup.plus.is_zero() && sup.minus.is_zero());
        assert!(!sup.is_time_dependent());
        assert!(!sup.constant.is_zero());
    }

    #[test]
    fn generator_is_trace_free() {
        let (p, g, c) = reference_case();
        let sup = build_superoperators(&p, &c, &g);
        for m in [&sup.constant, &sup.plus, &sup.minus] {
            assert!(m.trace_form().iter().all(|z| z.norm() < 1e-12));
        }
        // At any t the combined generator maps Hermitian to Hermitian.
        let rho = DensityMatrix::product(3, 3).unwrap();
        for t in [0.0, 0.37, 2.9] {
            let d = rhs(t, &rho, &sup, p.big_delta());
            assert!((d - d.adjoint()).norm() < 1e-12);
            assert!(d.trace().norm() < 1e-12);
        }
    }

    #[test]
    fn plus_and_minus_are_hc_partners() {
        let (p, g, c) = reference_case();
        let sup = build_superoperators(&p, &c, &g);
        // L₋(ρ) = (L₊(ρ))† for Hermitian ρ.
        let mut m = Op9::zeros();
        for i in 0..DIM {
            for j in 0..DIM {
                m[(i, j)] = C64::new((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.05);
            }
        }
        let h = m + m.adjoint();
        let x: Vec<C64> = h.as_slice().to_vec();
        let mut yp = vec![C64::new(0.0, 0.0); VEC_DIM];
        let mut ym = yp.clone();
        sup.plus.apply(&x, &mut yp);
        sup.minus.apply(&x, &mut ym);
        let lp = Op9::from_column_slice(&yp);
        let lm = Op9::from_column_slice(&ym);
        assert!((lm - lp.adjoint()).norm() < 1e-12);
        assert!(lp.norm() > 1e-3);
    }

    #[test]
    fn ground_state_is_dark_without_drive() {
        let p = PhysParams::default().without_drive();
        let (_, g, c) = reference_case();
        let sup = build_superoperators(&p, &c, &g);
        let d = rhs(1.3, &DensityMatrix::product(1, 1).unwrap(), &sup, p.big_delta());
        assert!(d.norm() < 1e-14);
    }

    #[test]
    fn zero_beat_is_autonomous() {
        let (mut p, g, c) = reference_case();
        p.det2 = 0.0;
        assert_eq!(p.big_delta(), 0.0);
        let sup = build_superoperators(&p, &c, &g);
        let rho = DensityMatrix::product(3, 3).unwrap();
        let d0 = rhs(0.0, &rho, &sup, 0.0);
        let d1 = rhs(7.7, &rho, &sup, 0.0);
        assert!((d0 - d1).norm() < 1e-14);
    }

    #[test]
    fn excited_pair_decay_rate() {
        // −2(γ₁ + γ₂) for the population of atom A.
        let p = PhysParams::default().without_drive();
        let g = Geometry::new(0.3, 1.0, 1.0).unwrap();
        let sup = build_superoperators(&p, &CouplingSet::zero(), &g);
        let rho = DensityMatrix::product(3, 3).unwrap();
        let d = DensityMatrix::from_vec_unchecked(rhs(0.0, &rho, &sup, 2.0).as_slice());
        assert!((d.upper_population(Atom::A) + 4.0).abs() < 1e-14);
        let p2 = PhysParams { gamma1: 0.5, gamma2: 2.0, ..p };
        let sup = build_superoperators(&p2, &CouplingSet::zero(), &g);
        let d = DensityMatrix::from_vec_unchecked(rhs(0.0, &rho, &sup, 2.0).as_slice());
        assert!((d.upper_population(Atom::B) + 5.0).abs() < 1e-14);
    }

    #[test]
    fn density_matrix_validation() {
        let mut m = Op9::zeros();
        m[(0, 0)] = C64::new(0.5, 0.0);
        assert!(matches!(DensityMatrix::new(m), Err(DynamicsError::BadTrace(_))));
        m[(1, 1)] = C64::new(0.5, 0.0);
        m[(0, 1)] = C64::new(0.1, 0.0);
        assert!(matches!(DensityMatrix::new(m), Err(DynamicsError::NotHermitian(_))));
        m[(1, 0)] = C64::new(0.1, 0.0);
        assert!(DensityMatrix::new(m).is_ok());
    }

    #[test]
    fn free_decay_matches_exponential() {
        let p = PhysParams::default().without_drive();
        let g = Geometry::new(0.3, 1.0, 1.0).unwrap();
        let sup = build_superoperators(&p, &CouplingSet::zero(), &g);
        let grid = TimeGrid::new(5.0, 0.01).unwrap();
        let ev = integrate(
            &DensityMatrix::product(3, 3).unwrap(),
            &sup,
            p.big_delta(),
            &grid,
            &IntegrateOptions::default(),
        )
        .unwrap();
        for (t, pa) in ev.times.iter().zip(&ev.population_a) {
            assert!((pa - (-4.0 * t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn dark_state_stays_put() {
        let p = PhysParams::default().without_drive();
        let (_, g, c) = reference_case();
        let sup = build_superoperators(&p, &c, &g);
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let ev = integrate(
            &DensityMatrix::product(1, 1).unwrap(),
            &sup,
            p.big_delta(),
            &grid,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let i = ev.intensity(g.detector_phase(p.k0));
        assert!(i.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn grid_arithmetic() {
        let g = TimeGrid::default();
        assert_eq!(g.len(), 5001);
        let t = g.times();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!((t[5000] - 50.0).abs() < 1e-9);
        assert!(TimeGrid::new(-1.0, 0.1).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
    }
}
