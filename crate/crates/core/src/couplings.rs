//! Field susceptibility tensor and the dipole-dipole coupling constants.
//!
//! The tensor is stored in γ-normalized form
//!
//! ```text
//! χ̃_μν = 3/2 · [ δ_μν (1/η + i/η² − 1/η³) − r̂_μ r̂_ν (1/η + 3i/η² − 3/η³) ] · e^{iη}
//! ```
//!
//! with η = k₀r₁₂, so that for dipoles along axes `a`, `b` the collective
//! damping is Γ = √(γ_a γ_b) · Im(ê_a·χ̃·ê_b) and the coherent shift is
//! Ω = √(γ_a γ_b) · Re(ê_a·χ̃·ê_b). The 1/(4πε₀), |d|² and ħ factors are all
//! absorbed by the decay-rate normalization.
//!
//! The transition 1 ↔ 3 has its dipole along x, 2 ↔ 3 along y. Parallel
//! constants (x·x, y·y) come from the contraction. The cross constants
//! (y·x) have a closed form, which is what production code uses; the
//! contraction is kept as an independent route for verification.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Geometry, PhysParams, HARD_SEPARATION_FLOOR};

/// Below this η the imaginary parts of the radial functions are taken from
/// their Taylor series instead of the cancelling closed expressions.
pub const SERIES_ETA: f64 = 1e-3;

/// Relative tolerance of the closed-form vs contraction self-check.
pub const VERIFY_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("separation {r12} λ is below the hard floor {floor} λ")]
    BelowFloor { r12: f64, floor: f64 },
    #[error(
        "cross coupling `{which}` mismatch: closed form {closed:e} vs contraction {contraction:e}"
    )]
    Inconsistent { which: &'static str, closed: f64, contraction: f64 },
}

/// Dipole orientation; x carries transition 1 ↔ 3, y carries 2 ↔ 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }

    fn rate(self, p: &PhysParams) -> f64 {
        match self {
            Axis::X => p.gamma1,
            Axis::Y => p.gamma2,
        }
    }
}

/// γ-normalized 3×3 susceptibility tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiTensor(pub [[C64; 3]; 3]);

impl ChiTensor {
    pub fn get(&self, mu: usize, nu: usize) -> C64 {
        self.0[mu][nu]
    }

    /// Returns (Γ, Ω) for dipoles along `a` and `b`.
    pub fn coupling_pair(&self, a: Axis, b: Axis, p: &PhysParams) -> (f64, f64) {
        let scale = (a.rate(p) * b.rate(p)).sqrt();
        let z = self.0[a.index()][b.index()];
        (scale * z.im, scale * z.re)
    }
}

/// Free-function form of [`ChiTensor::coupling_pair`].
pub fn coupling_pair(a: Axis, b: Axis, chi: &ChiTensor, p: &PhysParams) -> (f64, f64) {
    chi.coupling_pair(a, b, p)
}

/// Radial functions f_δ(η) = (1/η + i/η² − 1/η³)e^{iη} and
/// f_r(η) = (1/η + 3i/η² − 3/η³)e^{iη}.
fn radial(eta: f64) -> (C64, C64) {
    let (s, c) = eta.sin_cos();
    let e1 = 1.0 / eta;
    let e2 = e1 * e1;
    let e3 = e2 * e1;
    let re_d = c * e1 - s * e2 - c * e3;
    let re_r = c * e1 - 3.0 * s * e2 - 3.0 * c * e3;
    let (im_d, im_r) = if eta < SERIES_ETA {
        let x = eta * eta;
        (
            2.0 / 3.0 - x * 2.0 / 15.0 + x * x / 140.0,
            -x / 15.0 + x * x / 210.0,
        )
    } else {
        (s * e1 + c * e2 - s * e3, s * e1 + 3.0 * c * e2 - 3.0 * s * e3)
    };
    (C64::new(re_d, im_d), C64::new(re_r, im_r))
}

fn check_floor(r12: f64) -> Result<(), CouplingError> {
    if r12 < HARD_SEPARATION_FLOOR {
        Err(CouplingError::BelowFloor { r12, floor: HARD_SEPARATION_FLOOR })
    } else {
        Ok(())
    }
}

pub fn chi_tensor(g: &Geometry, k0: f64) -> Result<ChiTensor, CouplingError> {
    check_floor(g.r12())?;
    let (fd, fr) = radial(k0 * g.r12());
    let u = g.unit();
    let mut t = [[C64::new(0.0, 0.0); 3]; 3];
    for mu in 0..3 {
        for nu in mu..3 {
            let diag = if mu == nu { fd } else { C64::new(0.0, 0.0) };
            let v = 1.5 * (diag - fr * (u[mu] * u[nu]));
            t[mu][nu] = v;
            t[nu][mu] = v;
        }
    }
    Ok(ChiTensor(t))
}

/// Closed-form cross constants (Γ_vc, Ω_vc) between the x dipole of one atom
/// and the y dipole of the other.
pub fn cross_couplings_closed(
    g: &Geometry,
    p: &PhysParams,
) -> Result<(f64, f64), CouplingError> {
    check_floor(g.r12())?;
    let eta = p.eta(g.r12());
    let angular = (2.0 * g.phi()).sin() * g.theta().sin().powi(2);
    // sin 2φ at φ = π/2 evaluates to ~1e-16; treat rounding noise as exact zero.
    if angular.abs() < 4.0 * f64::EPSILON {
        return Ok((0.0, 0.0));
    }
    let pre = -0.75 * (p.gamma1 * p.gamma2).sqrt() * angular;
    let (s, c) = eta.sin_cos();
    let gamma_bracket = s / eta + 3.0 * (c / (eta * eta) - s / eta.powi(3));
    let omega_bracket = c / eta - 3.0 * (s / (eta * eta) + c / eta.powi(3));
    Ok((pre * gamma_bracket, pre * omega_bracket))
}

/// The six dipole-dipole constants of one geometry, in units of γ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CouplingSet {
    pub gamma1_dd: f64,
    pub omega1_dd: f64,
    pub gamma2_dd: f64,
    pub omega2_dd: f64,
    pub gamma_vc: f64,
    pub omega_vc: f64,
}

impl CouplingSet {
    pub const NAMES: [&'static str; 6] =
        ["gamma1_dd", "omega1_dd", "gamma2_dd", "omega2_dd", "gamma_vc", "omega_vc"];

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.gamma1_dd,
            self.omega1_dd,
            self.gamma2_dd,
            self.omega2_dd,
            self.gamma_vc,
            self.omega_vc,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            gamma1_dd: a[0],
            omega1_dd: a[1],
            gamma2_dd: a[2],
            omega2_dd: a[3],
            gamma_vc: a[4],
            omega_vc: a[5],
        }
    }

    /// No dipole-dipole coupling at all.
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn has_cross(&self) -> bool {
        self.gamma_vc != 0.0 || self.omega_vc != 0.0
    }
}

/// All six constants for `g`. With `verify` set, the closed-form cross
/// constants are checked against the contraction route.
pub fn all_couplings(
    g: &Geometry,
    p: &PhysParams,
    verify: bool,
) -> Result<CouplingSet, CouplingError> {
    let chi = chi_tensor(g, p.k0)?;
    let (gamma1_dd, omega1_dd) = chi.coupling_pair(Axis::X, Axis::X, p);
    let (gamma2_dd, omega2_dd) = chi.coupling_pair(Axis::Y, Axis::Y, p);
    let (gamma_vc, omega_vc) = cross_couplings_closed(g, p)?;
    if verify {
        let (gc, oc) = chi.coupling_pair(Axis::Y, Axis::X, p);
        for (which, closed, contraction) in
            [("gamma_vc", gamma_vc, gc), ("omega_vc", omega_vc, oc)]
        {
            if !agree(closed, contraction, VERIFY_REL_TOL) {
                return Err(CouplingError::Inconsistent { which, closed, contraction });
            }
        }
    }
    Ok(CouplingSet { gamma1_dd, omega1_dd, gamma2_dd, omega2_dd, gamma_vc, omega_vc })
}

/// Relative agreement with an absolute fallback scaled by √(γ₁γ₂)-sized
/// numbers; values that are both tiny compare absolutely.
pub(crate) fn agree(a: f64, b: f64, rel: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1e-3);
    (a - b).abs() <= rel * scale
}
