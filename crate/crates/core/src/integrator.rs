//! Explicit Runge-Kutta integrators for complex state vectors.
//!
//! [`dopri5`] is the Dormand-Prince 5(4) embedded pair with step-size
//! control and the usual fourth-order continuous extension, so outputs on an
//! arbitrary time grid come from interpolation rather than forced steps.
//! [`rk4`] is the classical fixed-step scheme, used as a brute-force
//! reference.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("step limit {0} exceeded")]
    TooManySteps(usize),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("output times must be non-decreasing and start at or after t0")]
    BadOutputGrid,
    #[error("fixed step {dt} does not divide the output spacing")]
    IncommensurateStep { dt: f64 },
    #[error("observer aborted at t = {t}: {reason}")]
    Observer { t: f64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub min_step: f64,
    pub max_step: f64,
}

impl IntegratorStats {
    fn record_step(&mut self, h: f64) {
        if self.accepted == 0 {
            self.min_step = h;
            self.max_step = h;
        } else {
            self.min_step = self.min_step.min(h);
            self.max_step = self.max_step.max(h);
        }
        self.accepted += 1;
    }

    /// Combines statistics of independent runs.
    pub fn merge(&mut self, other: &IntegratorStats) {
        if other.accepted == 0 {
            return;
        }
        if self.accepted == 0 {
            *self = *other;
            return;
        }
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.rhs_evals += other.rhs_evals;
        self.min_step = self.min_step.min(other.min_step);
        self.max_step = self.max_step.max(other.max_step);
    }
}

/// Observer callback: receives the output index, time and state.
pub type ObserverResult = Result<(), String>;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Adaptive step controller settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dopri5Options {
    pub tol: Tolerances,
    pub max_steps: usize,
    /// Upper bound on the step, `None` for unbounded.
    pub max_step: Option<f64>,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Self { tol: Tolerances::default(), max_steps: 50_000_000, max_step: None }
    }
}

fn axpy_into(out: &mut [C64], y: &[C64], h: f64, terms: &[(f64, &[C64])]) {
    for i in 0..out.len() {
        let mut acc = C64::new(0.0, 0.0);
        for (c, k) in terms {
            acc += k[i] * *c;
        }
        out[i] = y[i] + acc * h;
    }
}

fn weighted_rms(err: &[C64], y0: &[C64], y1: &[C64], tol: &Tolerances) -> f64 {
    let mut sum = 0.0;
    for i in 0..err.len() {
        let sk = tol.atol + tol.rtol * y0[i].norm().max(y1[i].norm());
        sum += err[i].norm_sqr() / (sk * sk);
    }
    (sum / err.len() as f64).sqrt()
}

/// Integrates y' = f(t, y) from `t0` with Dormand-Prince 5(4), calling
/// `observe(index, t, y)` at each entry of `t_out`.
pub fn dopri5<F, O>(
    mut f: F,
    t0: f64,
    y0: &[C64],
    t_out: &[f64],
    opts: &Dopri5Options,
    mut observe: O,
) -> Result<IntegratorStats, IntegrationError>
where
    F: FnMut(f64, &[C64], &mut [C64]),
    O: FnMut(usize, f64, &[C64]) -> ObserverResult,
{
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().is_some_and(|&t| t < t0) {
        return Err(IntegrationError::BadOutputGrid);
    }
    let n = y0.len();
    let mut stats = IntegratorStats::default();
    let mut next_out = 0;
    let mut y = y0.to_vec();
    let mut t = t0;

    while next_out < t_out.len() && t_out[next_out] <= t0 {
        observe(next_out, t_out[next_out], &y)
            .map_err(|reason| IntegrationError::Observer { t: t_out[next_out], reason })?;
        next_out += 1;
    }
    let Some(&t_end) = t_out.last() else {
        return Ok(stats);
    };
    if next_out == t_out.len() {
        return Ok(stats);
    }

    let mut k1 = vec![C64::new(0.0, 0.0); n];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut k5 = k1.clone();
    let mut k6 = k1.clone();
    let mut k7 = k1.clone();
    let mut ytmp = k1.clone();
    let mut ynew = k1.clone();
    let mut err = k1.clone();
    let mut rcont = [k1.clone(), k1.clone(), k1.clone(), k1.clone(), k1.clone()];
    let mut yout = k1.clone();

    f(t, &y, &mut k1);
    stats.rhs_evals += 1;
    let max_step = opts.max_step.unwrap_or(f64::INFINITY).min(t_end - t0);
    let mut h = initial_step(&mut f, t, &y, &k1, &opts.tol, max_step, &mut stats);

    let safe = 0.9;
    let beta = 0.04;
    let expo1 = 0.2 - beta * 0.75;
    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(IntegrationError::TooManySteps(opts.max_steps));
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(IntegrationError::StepUnderflow { t, h });
        }
        let last = t + 1.01 * h >= t_end;
        if last {
            h = t_end - t;
        }

        axpy_into(&mut ytmp, &y, h, &[(A21, &k1)]);
        f(t + C2 * h, &ytmp, &mut k2);
        axpy_into(&mut ytmp, &y, h, &[(A31, &k1), (A32, &k2)]);
        f(t + C3 * h, &ytmp, &mut k3);
        axpy_into(&mut ytmp, &y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        f(t + C4 * h, &ytmp, &mut k4);
        axpy_into(&mut ytmp, &y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        f(t + C5 * h, &ytmp, &mut k5);
        axpy_into(
            &mut ytmp,
            &y,
            h,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        );
        f(t + h, &ytmp, &mut k6);
        axpy_into(
            &mut ynew,
            &y,
            h,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        f(t + h, &ynew, &mut k7);
        stats.rhs_evals += 6;

        for i in 0..n {
            err[i] = (k1[i] * E1
                + k3[i] * E3
                + k4[i] * E4
                + k5[i] * E5
                + k6[i] * E6
                + k7[i] * E7)
                * h;
        }
        let e = weighted_rms(&err, &y, &ynew, &opts.tol);
        if !e.is_finite() {
            if ynew.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) && h < 1e-10 {
                return Err(IntegrationError::NonFinite(t));
            }
            h *= 0.1;
            stats.rejected += 1;
            last_rejected = true;
            continue;
        }
        let fac11 = e.powf(expo1);
        let fac = (fac11 / facold.powf(beta) / safe).clamp(0.2, 10.0);
        let mut hnew = h / fac;

        if e <= 1.0 {
            facold = e.max(1e-4);
            stats.record_step(h);

            let has_output = next_out < t_out.len() && t_out[next_out] <= t + h;
            if has_output {
                for i in 0..n {
                    let ydiff = ynew[i] - y[i];
                    let bspl = k1[i] * h - ydiff;
                    rcont[0][i] = y[i];
                    rcont[1][i] = ydiff;
                    rcont[2][i] = bspl;
                    rcont[3][i] = ydiff - k7[i] * h - bspl;
                    rcont[4][i] = (k1[i] * D1
                        + k3[i] * D3
                        + k4[i] * D4
                        + k5[i] * D5
                        + k6[i] * D6
                        + k7[i] * D7)
                        * h;
                }
            }
            let t_new = if last { t_end } else { t + h };
            while next_out < t_out.len() && t_out[next_out] <= t_new {
                let to = t_out[next_out];
                if to == t_new {
                    yout.copy_from_slice(&ynew);
                } else {
                    let th = (to - t) / h;
                    let th1 = 1.0 - th;
                    for i in 0..n {
                        yout[i] = rcont[0][i]
                            + (rcont[1][i]
                                + (rcont[2][i] + (rcont[3][i] + rcont[4][i] * th1) * th)
                                    * th1)
                                * th;
                    }
                }
                observe(next_out, to, &yout)
                    .map_err(|reason| IntegrationError::Observer { t: to, reason })?;
                next_out += 1;
            }

            std::mem::swap(&mut k1, &mut k7);
            std::mem::swap(&mut y, &mut ynew);
            t = t_new;
            if last || next_out >= t_out.len() {
                return Ok(stats);
            }
            hnew = hnew.min(max_step);
            if last_rejected {
                hnew = hnew.min(h);
            }
            last_rejected = false;
            h = hnew;
        } else {
            hnew = h / (fac11 / safe).min(5.0);
            stats.rejected += 1;
            last_rejected = true;
            h = hnew;
        }
    }
}

/// Starting step from the local derivative scale, after Hairer, Nørsett &
/// Wanner (order 5).
fn initial_step<F>(
    f: &mut F,
    t: f64,
    y: &[C64],
    f0: &[C64],
    tol: &Tolerances,
    max_step: f64,
    stats: &mut IntegratorStats,
) -> f64
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let n = y.len() as f64;
    let sk = |z: C64| tol.atol + tol.rtol * z.norm();
    let dnf = (f0.iter().zip(y).map(|(d, z)| d.norm_sqr() / sk(*z).powi(2)).sum::<f64>() / n).sqrt();
    let dny = (y.iter().map(|z| z.norm_sqr() / sk(*z).powi(2)).sum::<f64>() / n).sqrt();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { 0.01 * dny / dnf };
    h = h.min(max_step);
    let y1: Vec<C64> = y.iter().zip(f0).map(|(z, d)| z + d * h).collect();
    let mut f1 = vec![C64::new(0.0, 0.0); y.len()];
    f(t + h, &y1, &mut f1);
    stats.rhs_evals += 1;
    let der2 = (f1
        .iter()
        .zip(f0)
        .zip(y)
        .map(|((a, b), z)| (a - b).norm_sqr() / sk(*z).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h;
    let der12 = der2.max(dnf);
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    (100.0 * h).min(h1).min(max_step)
}

/// Classical fixed-step RK4. Every output spacing must be an integer
/// multiple of `dt` (to 1e-9 relative).
pub fn rk4<F, O>(
    mut f: F,
    t0: f64,
    y0: &[C64],
    dt: f64,
    t_out: &[f64],
    mut observe: O,
) -> Result<IntegratorStats, IntegrationError>
where
    F: FnMut(f64, &[C64], &mut [C64]),
    O: FnMut(usize, f64, &[C64]) -> ObserverResult,
{
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().is_some_and(|&t| t < t0) {
        return Err(IntegrationError::BadOutputGrid);
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut k1 = vec![C64::new(0.0, 0.0); n];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    let mut stats = IntegratorStats::default();
    let mut t_prev = t0;
    let mut steps_done: usize = 0;
    for (idx, &to) in t_out.iter().enumerate() {
        let span = (to - t0) / dt;
        let target = span.round() as usize;
        if (span - target as f64).abs() > 1e-9 * span.max(1.0) {
            return Err(IntegrationError::IncommensurateStep { dt });
        }
        while steps_done < target {
            let t = t0 + steps_done as f64 * dt;
            f(t, &y, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + k1[i] * (0.5 * dt);
            }
            f(t + 0.5 * dt, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + k2[i] * (0.5 * dt);
            }
            f(t + 0.5 * dt, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + k3[i] * dt;
            }
            f(t + dt, &tmp, &mut k4);
            for i in 0..n {
                y[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
            }
            stats.rhs_evals += 4;
            stats.record_step(dt);
            steps_done += 1;
        }
        t_prev = t_prev.max(to);
        observe(idx, to, &y).map_err(|reason| IntegrationError::Observer { t: to, reason })?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn exponential_decay_and_rotation() {
        // y' = (-1 + 3i) y, y(0) = 1.
        let lam = C64::new(-1.0, 3.0);
        let ts: Vec<f64> = (0..=200).map(|k| k as f64 * 0.05).collect();
        let mut worst: f64 = 0.0;
        let stats = dopri5(
            |_, y, dy| dy[0] = lam * y[0],
            0.0,
            &[c(1.0)],
            &ts,
            &Dopri5Options::default(),
            |_, t, y| {
                worst = worst.max((y[0] - (lam * t).exp()).norm());
                Ok(())
            },
        )
        .unwrap();
        assert!(worst < 1e-8, "worst {worst}");
        assert!(stats.accepted > 0);
    }

    #[test]
    fn non_autonomous_forcing() {
        // y' = cos t, y(0) = 0 → y = sin t; checks time handling of stages
        // and the dense output between steps.
        let ts: Vec<f64> = (0..=1000).map(|k| k as f64 * 0.01).collect();
        let mut worst: f64 = 0.0;
        dopri5(
            |t, _, dy| dy[0] = c(t.cos()),
            0.0,
            &[c(0.0)],
            &ts,
            &Dopri5Options {
                tol: Tolerances { rtol: 1e-11, atol: 1e-12 },
                ..Default::default()
            },
            |_, t, y| {
                worst = worst.max((y[0].re - t.sin()).abs());
                Ok(())
            },
        )
        .unwrap();
        assert!(worst < 1e-8, "worst {worst}");
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let lam = C64::new(-0.5, 2.0);
        let err = |dt: f64| {
            let mut e = 0.0;
            rk4(|_, y, dy| dy[0] = lam * y[0], 0.0, &[c(1.0)], dt, &[2.0], |_, t, y| {
                e = (y[0] - (lam * t).exp()).norm();
                Ok(())
            })
            .unwrap();
            e
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_rejects_incommensurate_grid() {
        let r = rk4(|_, _, dy| dy[0] = c(0.0), 0.0, &[c(0.0)], 0.03, &[0.1], |_, _, _| Ok(()));
        assert!(matches!(r, Err(IntegrationError::IncommensurateStep { .. })));
    }

    #[test]
    fn observer_abort_propagates() {
        let r = dopri5(
            |_, y, dy| dy[0] = -y[0],
            0.0,
            &[c(1.0)],
            &[0.0, 0.5, 1.0],
            &Dopri5Options::default(),
            |i, _, _| if i == 1 { Err("stop".into()) } else { Ok(()) },
        );
        assert!(matches!(r, Err(IntegrationError::Observer { .. })));
    }

    #[test]
    fn rejects_decreasing_grid() {
        let r = dopri5(
            |_, y, dy| dy[0] = -y[0],
            0.0,
            &[c(1.0)],
            &[0.0, 1.0, 0.5],
            &Dopri5Options::default(),
            |_, _, _| Ok(()),
        );
        assert_eq!(r, Err(IntegrationError::BadOutputGrid));
    }
}
