//! Collective fluorescence of two dipole-dipole coupled three-level Λ atoms
//! in time-dependent geometries.
//!
//! The crate evolves the two-atom master equation for a fixed geometry,
//! evaluates the fluorescence seen by a detector on the y axis, and averages
//! over ensembles of geometries in two ways: averaging the per-geometry
//! intensity trajectories ([`averaging::ac_average`]), or averaging the
//! coupling constants first and integrating once ([`averaging::ap_run`]).

pub mod averaging;
pub mod couplings;
pub mod dynamics;
pub mod ensembles;
pub mod integrator;
pub mod io;
pub mod model;
pub mod observables;
