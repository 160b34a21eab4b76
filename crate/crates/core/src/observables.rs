//! Detector intensity and long-time analysis of intensity trajectories.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DensityMatrix, Trajectory};
use crate::model::{Atom, Geometry};

/// Default trailing fraction of the trajectory used for long-time metrics.
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.2;

/// Relative stationarity threshold on ΔI.
pub const STATIONARY_REL: f64 = 1e-3;

/// The analysis window must span at least this many beat periods 2π/Δ.
pub const MIN_WINDOW_PERIODS: f64 = 3.0;

/// Allowed ΔI mismatch between the two halves of a settled window.
pub const SETTLED_REL: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error("analysis window too short: {reason}")]
    WindowTooShort { reason: String },
    #[error("window fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("trajectories do not share a time grid")]
    GridMismatch,
    #[error("signal is not oscillatory in the analysis window")]
    NotOscillatory,
}

/// I_y = ⟨S₃₃^A⟩ + ⟨S₃₃^B⟩ + 2 Re[⟨S₃₁^A S₁₃^B⟩ e^{−i k₀ r₁₂ sinθ sinφ}],
/// detector on the y axis, overall prefactor dropped.
pub fn intensity_y(rho: &DensityMatrix, g: &Geometry, k0: f64) -> f64 {
    intensity_with_phase(rho, g.detector_phase(k0))
}

/// Same observable with an explicit (possibly averaged) detector phase factor.
pub fn intensity_with_phase(rho: &DensityMatrix, detector_phase: C64) -> f64 {
    rho.upper_population(Atom::A)
        + rho.upper_population(Atom::B)
        + 2.0 * (rho.interatomic_coherence() * detector_phase).re
}

/// Threshold below which ΔI counts as stationary.
pub fn stationarity_threshold(mean_intensity: f64) -> f64 {
    STATIONARY_REL * mean_intensity.max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTimeMetrics {
    pub i_max: f64,
    pub i_min: f64,
    pub delta_i: f64,
    pub mean: f64,
    pub stationary: bool,
    /// Both halves of the window agree in ΔI within 5 % (or are both
    /// stationary). `false` flags a transient that has not settled.
    pub settled: bool,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl LongTimeMetrics {
    pub fn threshold(&self) -> f64 {
        stationarity_threshold(self.mean)
    }
}

fn window_start(n: usize, fraction: f64) -> Result<usize, ObservableError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ObservableError::BadFraction(fraction));
    }
    let len = ((n - 1) as f64 * fraction).round() as usize;
    if len < 4 {
        return Err(ObservableError::WindowTooShort {
            reason: format!("{} samples", len + 1),
        });
    }
    Ok(n - 1 - len)
}

/// Extremum over a slice with a parabolic refinement through the
/// neighbouring samples when the extremum is interior.
fn refined_extremum(y: &[f64], want_max: bool) -> f64 {
    let (k, &v) = y
        .iter()
        .enumerate()
        .max_by(|a, b| {
            let o = a.1.total_cmp(b.1);
            if want_max {
                o
            } else {
                o.reverse()
            }
        })
        .expect("non-empty window");
    if k == 0 || k + 1 == y.len() {
        return v;
    }
    let (ym, yp) = (y[k - 1], y[k + 1]);
    let curv = ym - 2.0 * v + yp;
    if curv == 0.0 {
        return v;
    }
    let offset = 0.5 * (ym - yp) / curv;
    if offset.abs() > 1.0 {
        return v;
    }
    let refined = v - 0.25 * (ym - yp) * offset;
    if want_max {
        refined.max(v)
    } else {
        refined.min(v)
    }
}

fn extrema(y: &[f64]) -> (f64, f64) {
    (refined_extremum(y, true), refined_extremum(y, false))
}

/// ΔI, mean and stationarity over the trailing `window_fraction` of the
/// trajectory.
pub fn long_time_metrics(
    traj: &Trajectory,
    window_fraction: f64,
) -> Result<LongTimeMetrics, ObservableError> {
    let n = traj.len();
    if n < 5 {
        return Err(ObservableError::WindowTooShort { reason: format!("{n} samples") });
    }
    let start = window_start(n, window_fraction)?;
    let (t_lo, t_hi) = (traj.times[start], traj.times[n - 1]);
    let beat = traj.meta.big_delta.abs();
    if beat > 0.0 {
        let needed = MIN_WINDOW_PERIODS * TAU / beat;
        if t_hi - t_lo < needed * (1.0 - 1e-9) {
            return Err(ObservableError::WindowTooShort {
                reason: format!(
                    "window {:.3} < {MIN_WINDOW_PERIODS} beat periods ({needed:.3})",
                    t_hi - t_lo
                ),
            });
        }
    }
    let y = &traj.intensity[start..];
    let (i_max, i_min) = extrema(y);
    let delta_i = (i_max - i_min).max(0.0);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let threshold = stationarity_threshold(mean);
    let stationary = delta_i < threshold;

    let half = y.len() / 2;
    let (a, b) = (extrema(&y[..=half]), extrema(&y[half..]));
    let (da, db) = (a.0 - a.1, b.0 - b.1);
    let settled = (da < threshold && db < threshold)
        || (da - db).abs() <= SETTLED_REL * da.max(db);

    Ok(LongTimeMetrics { i_max, i_min, delta_i, mean, stationary, settled, t_lo, t_hi })
}

fn hann(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![1.0; n];
    }
    (0..n).map(|k| 0.5 - 0.5 * (TAU * k as f64 / (n - 1) as f64).cos()).collect()
}

/// Windowed discrete-time Fourier transform at angular frequency `w`.
fn dtft(y: &[f64], win: &[f64], t: &[f64], w: f64) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for ((v, h), &tk) in y.iter().zip(win).zip(t) {
        acc += C64::from_polar(v * h, -w * tk);
    }
    acc
}

/// Phase of `b` relative to `a` at their dominant common frequency, in
/// (−π, π]. A positive value means `b` lags `a`.
///
/// The dominant frequency maximizes |Â(ω) B̂*(ω)| for the Hann-windowed,
/// mean-removed signals over the trailing window; the phase is
/// arg(Â B̂*) there.
pub fn relative_phase(
    a: &Trajectory,
    b: &Trajectory,
    window_fraction: f64,
) -> Result<f64, ObservableError> {
    if a.len() != b.len()
        || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-9 * x.abs().max(1.0))
    {
        return Err(ObservableError::GridMismatch);
    }
    let n = a.len();
    if n < 5 {
        return Err(ObservableError::WindowTooShort { reason: format!("{n} samples") });
    }
    let start = window_start(n, window_fraction)?;
    let t = &a.times[start..];
    let prep = |y: &[f64]| -> Result<Vec<f64>, ObservableError> {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (hi, lo) = extrema(y);
        if hi - lo < stationarity_threshold(mean) {
            return Err(ObservableError::NotOscillatory);
        }
        Ok(y.iter().map(|v| v - mean).collect())
    };
    let ya = prep(&a.intensity[start..])?;
    let yb = prep(&b.intensity[start..])?;
    let win = hann(ya.len());
    let span = t[t.len() - 1] - t[0];
    let dt = t[1] - t[0];

    // Coarse scan from about one cycle per window up to Nyquist, then a
    // golden-section refinement of the cross-spectrum peak.
    let w_lo = TAU / span;
    let w_hi = PI / dt;
    let step = 0.25 * TAU / span;
    let score = |w: f64| (dtft(&ya, &win, t, w) * dtft(&yb, &win, t, w).conj()).norm();
    let mut best = (w_lo, score(w_lo));
    let mut w = w_lo + step;
    while w <= w_hi {
        let s = score(w);
        if s > best.1 {
            best = (w, s);
        }
        w += step;
    }
    let (mut lo, mut hi) = ((best.0 - step).max(w_lo * 0.5), best.0 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (score(x1), score(x2));
    for _ in 0..60 {
        if f1 > f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = score(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = score(x2);
        }
    }
    let w_peak = 0.5 * (lo + hi);
    let cross = dtft(&ya, &win, t, w_peak) * dtft(&yb, &win, t, w_peak).conj();
    let mut phase = cross.arg();
    if phase <= -PI {
        phase += TAU;
    }
    Ok(phase)
}
