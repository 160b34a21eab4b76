//! Weighted geometry ensembles: midpoint quadratures over the motion of
//! atom B relative to atom A.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Geometry, ModelError, HARD_SEPARATION_FLOOR};

pub const DEFAULT_N_1D: usize = 64;
pub const DEFAULT_N_SPHERE: usize = 32;
pub const DEFAULT_N_3D: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{what} = {value} is below the separation floor {floor}")]
    BelowFloor { what: &'static str, value: f64, floor: f64 },
    #[error("degenerate circle: theta = {0} gives zero weight everywhere")]
    DegenerateCircle(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown ensemble parameter '{0}'")]
    UnknownParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlybyMeasure {
    /// Constant velocity: equal dwell time per dz.
    #[default]
    UniformZ,
    /// Arc-length element r·|dθ| of the spherical measure along the line.
    SphericalVolume,
}

fn n1() -> usize {
    DEFAULT_N_1D
}
fn ns() -> usize {
    DEFAULT_N_SPHERE
}
fn n3() -> usize {
    DEFAULT_N_3D
}

/// Ensemble kind and parameters. Distances in λ, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleDescriptor {
    Single {
        r12: f64,
        theta: f64,
        phi: f64,
    },
    /// r₁₂ = r_m + r_a sin α, α uniform on [0, 2π).
    DistanceOscillation {
        r_m: f64,
        r_a: f64,
        theta: f64,
        phi: f64,
        #[serde(default = "n1")]
        n: usize,
    },
    /// Full circle through the z axis: θ ∈ [0, π] on the branches φ and φ + π,
    /// n/2 samples each.
    ThetaCircle {
        r12: f64,
        phi: f64,
        #[serde(default = "n1")]
        n: usize,
    },
    /// Circle at fixed θ, φ uniform on [0, 2π).
    PhiCircle {
        r12: f64,
        theta: f64,
        #[serde(default = "n1")]
        n: usize,
    },
    Sphere {
        r12: f64,
        #[serde(default = "ns")]
        n_theta: usize,
        #[serde(default = "ns")]
        n_phi: usize,
    },
    SphereWithBreathing {
        r_m: f64,
        r_a: f64,
        #[serde(default = "n3")]
        n_r: usize,
        #[serde(default = "n3")]
        n_theta: usize,
        #[serde(default = "n3")]
        n_phi: usize,
    },
    /// Straight line x = r_min cos φ, y = r_min sin φ, z ∈ [−z_max, z_max].
    Flyby {
        r_min: f64,
        phi: f64,
        z_max: f64,
        #[serde(default = "n1")]
        n: usize,
        #[serde(default)]
        measure: FlybyMeasure,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub geometry: Geometry,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    members: Vec<Member>,
    descriptor: EnsembleDescriptor,
    q: f64,
}

impl WeightedEnsemble {
    fn from_members(
        descriptor: EnsembleDescriptor,
        members: Vec<Member>,
    ) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::Invalid("ensemble has no members".into()));
        }
        for (k, m) in members.iter().enumerate() {
            if !(m.weight.is_finite() && m.weight > 0.0) {
                return Err(EnsembleError::Invalid(format!(
                    "member {k} has non-positive weight {}",
                    m.weight
                )));
            }
            if m.geometry.r12() < HARD_SEPARATION_FLOOR {
                return Err(EnsembleError::BelowFloor {
                    what: "r12",
                    value: m.geometry.r12(),
                    floor: HARD_SEPARATION_FLOOR,
                });
            }
        }
        let q = members.iter().map(|m| m.weight).sum();
        Ok(Self { members, descriptor, q })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn descriptor(&self) -> &EnsembleDescriptor {
        &self.descriptor
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Normalization constant Σ weights.
    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn min_r12(&self) -> f64 {
        self.members.iter().map(|m| m.geometry.r12()).fold(f64::INFINITY, f64::min)
    }

    /// Weights divided by Q.
    pub fn normalized_weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight / self.q).collect()
    }

    /// SHA-256 of the member table (r, θ, φ, weight as little-endian f64).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.members {
            let g = m.geometry;
            for v in [g.r12(), g.theta(), g.phi(), m.weight] {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Midpoints of n equal cells on [a, b] and the cell width.
fn midpoints(a: f64, b: f64, n: usize) -> (Vec<f64>, f64) {
    let h = (b - a) / n as f64;
    ((0..n).map(|k| a + (k as f64 + 0.5) * h).collect(), h)
}

fn need(cond: bool, msg: impl FnOnce() -> String) -> Result<(), EnsembleError> {
    if cond {
        Ok(())
    } else {
        Err(EnsembleError::Invalid(msg()))
    }
}

fn positive_count(name: &str, n: usize, min: usize) -> Result<(), EnsembleError> {
    need(n >= min, || format!("{name} must be at least {min}, got {n}"))
}

fn floor_check(what: &'static str, value: f64) -> Result<(), EnsembleError> {
    if !value.is_finite() {
        return Err(EnsembleError::Invalid(format!("{what} is not finite")));
    }
    if value < HARD_SEPARATION_FLOOR {
        return Err(EnsembleError::BelowFloor { what, value, floor: HARD_SEPARATION_FLOOR });
    }
    Ok(())
}

/// θ = arccos(z / r) kept inside [0, π] against rounding.
fn polar(z: f64, r: f64) -> f64 {
    (z / r).clamp(-1.0, 1.0).acos()
}

impl EnsembleDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Single { .. } => "single",
            Self::DistanceOscillation { .. } => "distance_oscillation",
            Self::ThetaCircle { .. } => "theta_circle",
            Self::PhiCircle { .. } => "phi_circle",
            Self::Sphere { .. } => "sphere",
            Self::SphereWithBreathing { .. } => "sphere_with_breathing",
            Self::Flyby { .. } => "flyby",
        }
    }

    pub fn build(&self) -> Result<WeightedEnsemble, EnsembleError> {
        let d = *self;
        let members = match d {
            Self::Single { r12, theta, phi } => {
                floor_check("r12", r12)?;
                vec![Member { geometry: Geometry::new(r12, theta, phi)?, weight: 1.0 }]
            }
            Self::DistanceOscillation { r_m, r_a, theta, phi, n } => {
                positive_count("n", n, 1)?;
                need(r_a >= 0.0, || format!("r_a must be nonnegative, got {r_a}"))?;
                floor_check("r_m - r_a", r_m - r_a)?;
                let (alphas, h) = midpoints(0.0, TAU, n);
                alphas
                    .into_iter()
                    .map(|a| {
                        Ok(Member {
                            geometry: Geometry::new(r_m + r_a * a.sin(), theta, phi)?,
                            weight: h,
                        })
                    })
                    .collect::<Result<_, EnsembleError>>()?
            }
            Self::ThetaCircle { r12, phi, n } => {
                floor_check("r12", r12)?;
                need(n >= 2 && n % 2 == 0, || format!("n must be even and ≥ 2, got {n}"))?;
                let (thetas, h) = midpoints(0.0, PI, n / 2);
                let mut out = Vec::with_capacity(n);
                for branch in [phi, phi + PI] {
                    for &t in &thetas {
                        out.push(Member { geometry: Geometry::new(r12, t, branch)?, weight: r12 * h });
                    }
                }
                out
            }
            Self::PhiCircle { r12, theta, n } => {
                floor_check("r12", r12)?;
                positive_count("n", n, 1)?;
                let st = theta.sin();
                if !(0.0..=PI).contains(&theta) {
                    return Err(ModelError::Geometry(format!("theta {theta} outside [0, π]")).into());
                }
                if st.abs() < 1e-12 {
                    return Err(EnsembleError::DegenerateCircle(theta));
                }
                let (phis, h) = midpoints(0.0, TAU, n);
                phis.into_iter()
                    .map(|p| Ok(Member { geometry: Geometry::new(r12, theta, p)?, weight: r12 * st * h }))
                    .collect::<Result<_, EnsembleError>>()?
            }
            Self::Sphere { r12, n_theta, n_phi } => {
                floor_check("r12", r12)?;
                positive_count("n_theta", n_theta, 2)?;
                positive_count("n_phi", n_phi, 2)?;
                sphere_shell(r12, n_theta, n_phi, 1.0)?
            }
            Self::SphereWithBreathing { r_m, r_a, n_r, n_theta, n_phi } => {
                positive_count("n_r", n_r, 1)?;
                positive_count("n_theta", n_theta, 2)?;
                positive_count("n_phi", n_phi, 2)?;
                need(r_a >= 0.0, || format!("r_a must be nonnegative, got {r_a}"))?;
                floor_check("r_m - r_a", r_m - r_a)?;
                let (alphas, h) = midpoints(0.0, TAU, n_r);
                let mut out = Vec::with_capacity(n_r * n_theta * n_phi);
                for a in alphas {
                    out.extend(sphere_shell(r_m + r_a * a.sin(), n_theta, n_phi, h)?);
                }
                out
            }
            Self::Flyby { r_min, phi, z_max, n, measure } => {
                floor_check("r_min", r_min)?;
                positive_count("n", n, 1)?;
                need(z_max.is_finite() && z_max >= 0.0, || {
                    format!("z_max must be finite and nonnegative, got {z_max}")
                })?;
                if z_max == 0.0 {
                    vec![Member { geometry: Geometry::new(r_min, PI / 2.0, phi)?, weight: 1.0 }]
                } else {
                    let (zs, h) = midpoints(-z_max, z_max, n);
                    zs.into_iter()
                        .map(|z| {
                            let r = r_min.hypot(z);
                            let weight = match measure {
                                FlybyMeasure::UniformZ => h,
                                FlybyMeasure::SphericalVolume => h * r_min / r,
                            };
                            Ok(Member { geometry: Geometry::new(r, polar(z, r), phi)?, weight })
                        })
                        .collect::<Result<_, EnsembleError>>()?
                }
            }
        };
        WeightedEnsemble::from_members(d, members)
    }

    /// Copy with the named numeric parameter replaced; used by sweeps.
    /// Integer parameters accept integral values only.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Self, EnsembleError> {
        let mut v = serde_json::to_value(self).expect("descriptor serializes");
        let inner = v
            .as_object_mut()
            .and_then(|o| o.values_mut().next())
            .and_then(|x| x.as_object_mut())
            .expect("externally tagged descriptor");
        let slot = inner
            .get_mut(name)
            .filter(|x| x.is_number())
            .ok_or_else(|| EnsembleError::UnknownParameter(name.to_string()))?;
        *slot = if slot.is_u64() {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(EnsembleError::Invalid(format!(
                    "parameter '{name}' needs a nonnegative integer, got {value}"
                )));
            }
            serde_json::json!(value as u64)
        } else {
            serde_json::json!(value)
        };
        serde_json::from_value(v).map_err(|e| EnsembleError::Invalid(e.to_string()))
    }

    /// Same descriptor with every resolution count doubled.
    pub fn refined(&self) -> Self {
        let mut d = *self;
        match &mut d {
            Self::Single { .. } => {}
            Self::DistanceOscillation { n, .. }
            | Self::ThetaCircle { n, .. }
            | Self::PhiCircle { n, .. }
            | Self::Flyby { n, .. } => *n *= 2,
            Self::Sphere { n_theta, n_phi, .. } => {
                *n_theta *= 2;
                *n_phi *= 2;
            }
            Self::SphereWithBreathing { n_r, n_theta, n_phi, .. } => {
                *n_r *= 2;
                *n_theta *= 2;
                *n_phi *= 2;
            }
        }
        d
    }
}

/// Product midpoint grid on a sphere of radius r, weight r Δθ · r sinθ Δφ
/// times `scale`.
fn sphere_shell(r: f64, n_theta: usize, n_phi: usize, scale: f64) -> Result<Vec<Member>, EnsembleError> {
    let (thetas, ht) = midpoints(0.0, PI, n_theta);
    let (phis, hp) = midpoints(0.0, TAU, n_phi);
    let mut out = Vec::with_capacity(n_theta * n_phi);
    for &t in &thetas {
        let w = scale * r * ht * r * t.sin() * hp;
        for &p in &phis {
            out.push(Member { geometry: Geometry::new(r, t, p)?, weight: w });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn distance_oscillation_examples() {
        let e = EnsembleDescriptor::DistanceOscillation { r_m: 0.25, r_a: 0.0, theta: 1.0, phi: 0.5, n: 8 }
            .build()
            .unwrap();
        assert_eq!(e.len(), 8);
        assert!(e.members().iter().all(|m| m.geometry == Geometry::new(0.25, 1.0, 0.5).unwrap()));
        let e = EnsembleDescriptor::DistanceOscillation { r_m: 0.25, r_a: 0.1, theta: 1.0, phi: 0.5, n: 2 }
            .build()
            .unwrap();
        assert!(close(e.members()[0].geometry.r12(), 0.35));
        assert!(close(e.members()[1].geometry.r12(), 0.15));
        assert_eq!(e.members()[0].weight, e.members()[1].weight);
        assert!(matches!(
            EnsembleDescriptor::DistanceOscillation { r_m: 0.25, r_a: 0.2495, theta: 1.0, phi: 0.5, n: 4 }
                .build(),
            Err(EnsembleError::BelowFloor { .. })
        ));
    }

    #[test]
    fn theta_circle_branches() {
        let e = EnsembleDescriptor::ThetaCircle { r12: 0.1, phi: FRAC_PI_4, n: 16 }.build().unwrap();
        assert_eq!(e.len(), 16);
        assert!(e.members().iter().all(|m| m.geometry.r12() == 0.1));
        let a = e.members().iter().filter(|m| close(m.geometry.phi(), FRAC_PI_4)).count();
        let b = e.members().iter().filter(|m| close(m.geometry.phi(), FRAC_PI_4 + PI)).count();
        assert_eq!((a, b), (8, 8));
        assert!(EnsembleDescriptor::ThetaCircle { r12: 0.1, phi: 0.0, n: 7 }.build().is_err());
    }

    #[test]
    fn phi_circle_examples() {
        let e = EnsembleDescriptor::PhiCircle { r12: 0.1, theta: FRAC_PI_2, n: 4 }.build().unwrap();
        let phis: Vec<f64> = e.members().iter().map(|m| m.geometry.phi()).collect();
        for (p, want) in phis.iter().zip([1.0, 3.0, 5.0, 7.0]) {
            assert!(close(*p, want * FRAC_PI_4));
        }
        assert!(e.members().iter().all(|m| m.weight == e.members()[0].weight));
        for n in [4, 6, 10, 64] {
            let e = EnsembleDescriptor::PhiCircle { r12: 0.1, theta: 1.0, n }.build().unwrap();
            let s: f64 = e.members().iter().map(|m| (2.0 * m.geometry.phi()).sin()).sum();
            assert!(s.abs() < 1e-13, "n={n} sum={s}");
        }
        for th in [0.0, PI] {
            assert_eq!(
                EnsembleDescriptor::PhiCircle { r12: 0.1, theta: th, n: 4 }.build(),
                Err(EnsembleError::DegenerateCircle(th))
            );
        }
    }

    #[test]
    fn sphere_area() {
        let e = EnsembleDescriptor::Sphere { r12: 0.2, n_theta: 64, n_phi: 64 }.build().unwrap();
        let area = 4.0 * PI * 0.04;
        assert!((e.q() / area - 1.0).abs() < 1e-3);
        assert!(e.members().iter().all(|m| m.weight > 0.0));
    }

    #[test]
    fn breathing_reduces_to_sphere() {
        let b = EnsembleDescriptor::SphereWithBreathing { r_m: 0.2, r_a: 0.0, n_r: 3, n_theta: 4, n_phi: 5 }
            .build()
            .unwrap();
        let s = EnsembleDescriptor::Sphere { r12: 0.2, n_theta: 4, n_phi: 5 }.build().unwrap();
        assert_eq!(b.len(), 60);
        for (k, m) in b.members().iter().enumerate() {
            let t = s.members()[k % 20];
            assert_eq!(m.geometry, t.geometry);
            assert!((m.weight / t.weight - TAU / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flyby_shape() {
        let d = |z_max, n| EnsembleDescriptor::Flyby {
            r_min: 0.05,
            phi: FRAC_PI_4,
            z_max,
            n,
            measure: FlybyMeasure::UniformZ,
        };
        let e = d(0.0, 64).build().unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.members()[0].geometry, Geometry::new(0.05, FRAC_PI_2, FRAC_PI_4).unwrap());
        let e = d(1.0, 101).build().unwrap();
        assert_eq!(e.len(), 101);
        let m = e.members();
        for k in 0..101 {
            let (a, b) = (m[k].geometry, m[100 - k].geometry);
            assert!(close(a.r12(), b.r12()));
            assert!(close(a.theta(), PI - b.theta()));
        }
        assert!(close(m[50].geometry.theta(), FRAC_PI_2));
        assert!(close(m[50].geometry.r12(), 0.05));

        let spherical = |n| EnsembleDescriptor::Flyby {
            r_min: 0.05,
            phi: FRAC_PI_4,
            z_max: 1.0,
            n,
            measure: FlybyMeasure::SphericalVolume,
        };
        // ∫ r_min / r dz over [−z, z] = 2 r_min asinh(z / r_min).
        let sv = spherical(2001).build().unwrap();
        assert!((sv.q() / (2.0 * 0.05 * (1.0f64 / 0.05).asinh()) - 1.0).abs() < 1e-4);
        let sv = spherical(11).build().unwrap();
        let peak = sv.members().iter().map(|m| m.weight).fold(0.0, f64::max);
        assert_eq!(peak, sv.members()[5].weight);
    }

    #[test]
    fn hashing_and_determinism() {
        let d = EnsembleDescriptor::Sphere { r12: 0.2, n_theta: 8, n_phi: 8 };
        assert_eq!(d.build().unwrap().hash(), d.build().unwrap().hash());
        assert_eq!(d.build().unwrap().hash().len(), 64);
        let d2 = d.with_param("r12", 0.21).unwrap();
        assert_ne!(d.build().unwrap().hash(), d2.build().unwrap().hash());
    }

    #[test]
    fn with_param_and_refine() {
        let d = EnsembleDescriptor::DistanceOscillation { r_m: 0.25, r_a: 0.1, theta: 1.0, phi: 0.5, n: 8 };
        let EnsembleDescriptor::DistanceOscillation { r_a, n, .. } = d.with_param("r_a", 0.14).unwrap() else {
            unreachable!()
        };
        assert_eq!((r_a, n), (0.14, 8));
        assert!(d.with_param("n", 16.0).is_ok());
        assert!(d.with_param("n", 2.5).is_err());
        assert!(matches!(d.with_param("z_max", 1.0), Err(EnsembleError::UnknownParameter(_))));
        assert_eq!(d.refined().build().unwrap().len(), 16);
    }

    #[test]
    fn config_shape() {
        let d: EnsembleDescriptor = toml::from_str("[flyby]\nr_min = 0.05\nphi = 0.7\nz_max = 1.0\n").unwrap();
        assert_eq!(
            d,
            EnsembleDescriptor::Flyby { r_min: 0.05, phi: 0.7, z_max: 1.0, n: 64, measure: FlybyMeasure::UniformZ }
        );
    }
}
