//! Units, physical parameters, geometry and the two-atom operator basis.
//!
//! Everything runs in natural units: rates and frequencies in units of a
//! reference half decay rate γ, lengths in units of the transition
//! wavelength λ, times in 1/γ. The wavenumber is therefore k₀ = 2π and the
//! single-atom decay rates enter only as the dimensionless inputs γ₁, γ₂
//! (the full rate on transition 3 ↔ j is 2γⱼ). Nothing here needs ħ, ε₀,
//! c or dipole magnitudes.
//!
//! Each atom is a Λ system with lower states |1⟩, |2⟩ and upper state |3⟩.
//! The pair lives in a 9-dimensional product space ordered atom-A-major:
//! `flat = 3·(a − 1) + (b − 1)`. This ordering is frozen; persisted state
//! dumps use it.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::SMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dimension of the two-atom Hilbert space.
pub const DIM: usize = 9;

/// 9×9 complex operator on the two-atom space.
pub type Op9 = SMatrix<C64, DIM, DIM>;

/// Default soft separation floor in λ. Below it the near-field 1/η³ terms
/// exceed ~10⁵γ; runs are allowed but flagged.
pub const SEPARATION_FLOOR: f64 = 0.01;

/// Hard floor in λ. Coupling evaluation refuses separations below this.
pub const HARD_SEPARATION_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` is not finite ({value})")]
    NonFinite { name: &'static str, value: f64 },
    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("atomic level index {0} out of range 1..=3")]
    LevelOutOfRange(usize),
    #[error("flat basis index {0} out of range 0..=8")]
    FlatIndexOutOfRange(usize),
}

/// Laser, detuning and decay parameters of the driven pair, in units of γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysParams {
    /// Rabi frequency Ω₁ of the laser on 1 ↔ 3.
    pub rabi1: f64,
    /// Rabi frequency Ω₂ of the laser on 2 ↔ 3.
    pub rabi2: f64,
    /// Detuning Δ₁.
    pub det1: f64,
    /// Detuning Δ₂.
    pub det2: f64,
    /// Lower-state splitting δ.
    pub delta_lower: f64,
    /// Half decay rate γ₁ of 3 → 1.
    pub gamma1: f64,
    /// Half decay rate γ₂ of 3 → 2.
    pub gamma2: f64,
    /// Wavenumber in units of 1/λ.
    pub k0: f64,
}

impl Default for PhysParams {
    /// Ω₁ = 3γ, Ω₂ = 5γ, Δ₁ = 0, Δ₂ = 2γ, degenerate lower states.
    fn default() -> Self {
        Self {
            rabi1: 3.0,
            rabi2: 5.0,
            det1: 0.0,
            det2: 2.0,
            delta_lower: 0.0,
            gamma1: 1.0,
            gamma2: 1.0,
            k0: TAU,
        }
    }
}

impl PhysParams {
    /// Residual drive beat frequency Δ = δ + Δ₂ − Δ₁.
    pub fn big_delta(&self) -> f64 {
        self.delta_lower + self.det2 - self.det1
    }

    /// Undriven copy, used by decay checks.
    pub fn without_drive(mut self) -> Self {
        self.rabi1 = 0.0;
        self.rabi2 = 0.0;
        self
    }

    pub fn eta(&self, r12: f64) -> f64 {
        self.k0 * r12
    }

    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("rabi1", self.rabi1),
            ("rabi2", self.rabi2),
            ("det1", self.det1),
            ("det2", self.det2),
            ("delta_lower", self.delta_lower),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("k0", self.k0),
        ]
    }
}

/// Free-function form of [`PhysParams::big_delta`].
pub fn big_delta(p: &PhysParams) -> f64 {
    p.big_delta()
}

/// Non-fatal findings from [`validate_params`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Diagnostic {
    /// Smallest separation of the run lies below the soft floor.
    NearFieldSingular { min_r12: f64, floor: f64 },
    /// A Rabi frequency is negative; only its sign (a π phase) differs.
    NegativeRabi { name: &'static str, value: f64 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NearFieldSingular { min_r12, floor } => write!(
                f,
                "near-field singular regime: min r12 = {min_r12} λ is below the floor {floor} λ"
            ),
            Diagnostic::NegativeRabi { name, value } => {
                write!(f, "negative rate `{name}` = {value} (acts as a π phase)")
            }
        }
    }
}

/// Checks a parameter set, optionally together with the smallest separation
/// the run will visit.
///
/// Non-finite values and non-positive γ₁, γ₂, k₀ are fatal. Separations
/// below `floor` and negative Rabi frequencies are reported as diagnostics.
pub fn validate_params(
    p: &PhysParams,
    min_r12: Option<f64>,
    floor: f64,
) -> Result<Vec<Diagnostic>, ModelError> {
    for (name, value) in p.fields() {
        if !value.is_finite() {
            return Err(ModelError::NonFinite { name, value });
        }
    }
    for (name, value) in [("gamma1", p.gamma1), ("gamma2", p.gamma2), ("k0", p.k0)] {
        if value <= 0.0 {
            return Err(ModelError::NonPositive { name, value });
        }
    }
    let mut out = Vec::new();
    for (name, value) in [("rabi1", p.rabi1), ("rabi2", p.rabi2)] {
        if value < 0.0 {
            out.push(Diagnostic::NegativeRabi { name, value });
        }
    }
    if let Some(r) = min_r12 {
        if !r.is_finite() {
            return Err(ModelError::NonFinite { name: "min_r12", value: r });
        }
        if r < floor {
            out.push(Diagnostic::NearFieldSingular { min_r12: r, floor });
        }
    }
    Ok(out)
}

/// Position of atom B relative to atom A (at the origin), in spherical
/// coordinates: separation in λ, polar and azimuthal angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    r12: f64,
    theta: f64,
    phi: f64,
}

impl Geometry {
    /// Builds a geometry; φ is wrapped into [0, 2π).
    pub fn new(r12: f64, theta: f64, phi: f64) -> Result<Self, ModelError> {
        if !(r12.is_finite() && theta.is_finite() && phi.is_finite()) {
            return Err(ModelError::Geometry(format!(
                "non-finite component (r12={r12}, theta={theta}, phi={phi})"
            )));
        }
        if r12 <= 0.0 {
            return Err(ModelError::Geometry(format!("r12 must be positive, got {r12}")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(ModelError::Geometry(format!("theta {theta} outside [0, π]")));
        }
        let mut phi = phi.rem_euclid(TAU);
        if phi >= TAU {
            phi = 0.0;
        }
        Ok(Self { r12, theta, phi })
    }

    pub fn r12(&self) -> f64 {
        self.r12
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Unit vector along r₁₂.
    pub fn unit(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Cartesian position of atom B in λ.
    pub fn position(&self) -> [f64; 3] {
        self.unit().map(|u| u * self.r12)
    }

    /// Laser phase factor e^{i k₀ z_B} on atom B; both lasers run along z.
    pub fn drive_phase(&self, k0: f64) -> C64 {
        C64::from_polar(1.0, k0 * self.r12 * self.theta.cos())
    }

    /// Detector phase factor e^{i k₀ ŷ·(r₁ − r₂)} = e^{−i k₀ r₁₂ sinθ sinφ}
    /// for a detector on the y axis.
    pub fn detector_phase(&self, k0: f64) -> C64 {
        C64::from_polar(1.0, -k0 * self.r12 * self.theta.sin() * self.phi.sin())
    }
}

/// Which atom an operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Atom {
    A,
    B,
}

impl Atom {
    pub fn other(self) -> Self {
        match self {
            Atom::A => Atom::B,
            Atom::B => Atom::A,
        }
    }

    pub const BOTH: [Atom; 2] = [Atom::A, Atom::B];
}

/// Product basis state |a, b⟩ with a, b ∈ {1, 2, 3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisIndex {
    a: u8,
    b: u8,
}

impl BasisIndex {
    pub fn new(a: usize, b: usize) -> Result<Self, ModelError> {
        check_level(a)?;
        check_level(b)?;
        Ok(Self { a: a as u8, b: b as u8 })
    }

    pub fn from_flat(flat: usize) -> Result<Self, ModelError> {
        if flat >= DIM {
            return Err(ModelError::FlatIndexOutOfRange(flat));
        }
        Ok(Self { a: (flat / 3 + 1) as u8, b: (flat % 3 + 1) as u8 })
    }

    pub fn flat(self) -> usize {
        3 * (self.a as usize - 1) + (self.b as usize - 1)
    }

    pub fn atom_a(self) -> usize {
        self.a as usize
    }

    pub fn atom_b(self) -> usize {
        self.b as usize
    }

    pub fn all() -> impl Iterator<Item = BasisIndex> {
        (0..DIM).map(|k| BasisIndex::from_flat(k).expect("in range"))
    }
}

/// Flat index of |a, b⟩ for levels already known to be valid.
pub(crate) const fn flat(a: usize, b: usize) -> usize {
    3 * (a - 1) + (b - 1)
}

fn check_level(i: usize) -> Result<(), ModelError> {
    if (1..=3).contains(&i) {
        Ok(())
    } else {
        Err(ModelError::LevelOutOfRange(i))
    }
}

/// Transition operator S_ij = |i⟩⟨j| of one atom, embedded in the pair space
/// (E_ij ⊗ 1 for atom A, 1 ⊗ E_ij for atom B).
pub fn atomic_operator(atom: Atom, i: usize, j: usize) -> Result<Op9, ModelError> {
    check_level(i)?;
    check_level(j)?;
    let mut m = Op9::zeros();
    for other in 1..=3 {
        let (row, col) = match atom {
            Atom::A => (flat(i, other), flat(j, other)),
            Atom::B => (flat(other, i), flat(other, j)),
        };
        m[(row, col)] = C64::new(1.0, 0.0);
    }
    Ok(m)
}

/// Panicking shorthand for internal use with literal indices.
pub(crate) fn s(atom: Atom, i: usize, j: usize) -> Op9 {
    atomic_operator(atom, i, j).expect("literal level indices")
}

/// Ket |a, b⟩ as a column vector.
pub fn ket(a: usize, b: usize) -> Result<SMatrix<C64, DIM, 1>, ModelError> {
    let idx = BasisIndex::new(a, b)?;
    let mut v = SMatrix::<C64, DIM, 1>::zeros();
    v[idx.flat()] = C64::new(1.0, 0.0);
    Ok(v)
}
