//! Adaptive Dormand–Prince 5(4) integrator with dense output.
//!
//! This is the classic explicit embedded Runge–Kutta pair with the FSAL
//! (first-same-as-last) property and a quartic interpolant for sampling the
//! solution between accepted steps. The right-hand side may fail (e.g. an
//! overflowing transmission rate); failures first trigger step-size
//! reductions and only become hard errors when shrinking the step cannot
//! help any more.

use thiserror::Error;

/// Error raised by a right-hand-side evaluation.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct RhsError(pub String);

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("right-hand side failed at t = {t}: {source}")]
    Rhs { t: f64, source: RhsError },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("exceeded {max_steps} steps at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("output grid must be non-empty, increasing, and start at or after t0 = {0}")]
    BadGrid(f64),
    #[error("tolerances must be positive: rtol = {rtol}, atol = {atol}")]
    BadTolerances { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub rtol: f64,
    /// Absolute tolerance, applied uniformly to every component. For the
    /// epidemic systems this is scaled by the population before calling in.
    pub atol: f64,
    /// Initial step; when `None` a standard heuristic picks one.
    pub h_init: Option<f64>,
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-8,
            h_init: None,
            h_max: None,
            max_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub n_steps: usize,
    pub n_rejected: usize,
    pub n_rhs_evals: usize,
}

/// Solution values at the requested output points, in order.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    pub states: Vec<Vec<f64>>,
    pub stats: SolveStats,
}

// Butcher tableau (Dormand & Prince 1980).
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

// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense-output coefficients for the quartic interpolant.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
/// Consecutive RHS failures before the current step gives up.
const MAX_RHS_RETRIES: usize = 40;
/// RHS failures over the whole solve: a budget against creeping toward a
/// failure wall forever (accepted micro-steps keep resetting the retry count).
const MAX_RHS_FAILURES_TOTAL: usize = 300;

/// Integrate `dy/dt = f(t, y)` from `t0` and report the state at every point
/// of `t_out` (which must be increasing and start at or after `t0`; points
/// equal to `t0` receive `y0`).
pub fn integrate_dense<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_out: &[f64],
    opts: &SolverOptions,
) -> Result<DenseOutput, SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), RhsError>,
{
    if !(opts.rtol > 0.0) || !(opts.atol > 0.0) {
        return Err(SolverError::BadTolerances {
            rtol: opts.rtol,
            atol: opts.atol,
        });
    }
    if t_out.is_empty()
        || t_out[0] < t0 - 1e-12
        || t_out.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(SolverError::BadGrid(t0));
    }
    let t_end = *t_out.last().expect("non-empty grid");
    let n = y0.len();
    let mut stats = SolveStats::default();
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(t_out.len());
    let mut out_idx = 0;
    while out_idx < t_out.len() && t_out[out_idx] <= t0 {
        states.push(y0.to_vec());
        out_idx += 1;
    }
    if out_idx == t_out.len() {
        return Ok(DenseOutput { states, stats });
    }

    let span = t_end - t0;
    let h_max = opts.h_max.unwrap_or(span).min(span);
    let h_floor = (span * 1e-14).max(f64::MIN_POSITIVE * 1e4);

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t, &y, &mut k1).map_err(|source| SolverError::Rhs { t, source })?;
    stats.n_rhs_evals += 1;

    let mut h = match opts.h_init {
        Some(h) => h.min(h_max),
        None => initial_step(&mut f, t, &y, &k1, opts, h_max, &mut stats),
    };

    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut rhs_retries = 0usize;
    let mut rhs_failures_total = 0usize;
    // Last RHS failure seen: when the integration cannot continue because the
    // right-hand side keeps failing just ahead (a hard wall like an
    // overflowing rate), report that failure rather than a bare underflow.
    let mut last_rhs_fail: Option<(f64, RhsError)> = None;
    let mut fac_max = FAC_MAX;

    'outer: while out_idx < t_out.len() {
        if stats.n_steps + stats.n_rejected >= opts.max_steps {
            return Err(SolverError::TooManySteps {
                t,
                max_steps: opts.max_steps,
            });
        }
        h = h.min(t_end - t).min(h_max);
        if h < h_floor {
            return Err(match last_rhs_fail {
                Some((t, source)) => SolverError::Rhs { t, source },
                None => SolverError::StepUnderflow { t, h },
            });
        }

        // Stage evaluations; a failing RHS rejects the step and retries
        // smaller, because the failure is usually an artifact of an
        // over-ambitious step into an extreme state.
        macro_rules! stage {
            ($c:expr, $k:ident, $($a:expr => $src:ident),+) => {{
                for i in 0..n {
                    let mut acc = 0.0;
                    $(acc += $a * $src[i];)+
                    y_stage[i] = y[i] + h * acc;
                }
                stats.n_rhs_evals += 1;
                if let Err(e) = f(t + $c * h, &y_stage, &mut $k) {
                    rhs_retries += 1;
                    rhs_failures_total += 1;
                    if rhs_retries > MAX_RHS_RETRIES
                        || rhs_failures_total > MAX_RHS_FAILURES_TOTAL
                    {
                        return Err(SolverError::Rhs { t: t + $c * h, source: e });
                    }
                    last_rhs_fail = Some((t + $c * h, e));
                    h *= 0.5;
                    stats.n_rejected += 1;
                    continue 'outer;
                }
            }};
        }

        stage!(C2, k2, A21 => k1);
        stage!(C3, k3, A31 => k1, A32 => k2);
        stage!(C4, k4, A41 => k1, A42 => k2, A43 => k3);
        stage!(C5, k5, A51 => k1, A52 => k2, A53 => k3, A54 => k4);
        stage!(1.0, k6, A61 => k1, A62 => k2, A63 => k3, A64 => k4, A65 => k5);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        stats.n_rhs_evals += 1;
        if let Err(e) = f(t + h, &y_new, &mut k7) {
            rhs_retries += 1;
            rhs_failures_total += 1;
            if rhs_retries > MAX_RHS_RETRIES || rhs_failures_total > MAX_RHS_FAILURES_TOTAL {
                return Err(SolverError::Rhs { t: t + h, source: e });
            }
            last_rhs_fail = Some((t + h, e));
            h *= 0.5;
            stats.n_rejected += 1;
            continue;
        }

        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n as f64).sqrt();

        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            rhs_retries += 1;
            if rhs_retries > MAX_RHS_RETRIES {
                return Err(SolverError::NonFinite { t: t + h });
            }
            h *= 0.5;
            stats.n_rejected += 1;
            continue;
        }

        if err <= 1.0 {
            // Accepted: interpolate any output points inside (t, t + h].
            rhs_retries = 0;
            while out_idx < t_out.len() && t_out[out_idx] <= t + h + 1e-12 * span {
                let theta = ((t_out[out_idx] - t) / h).clamp(0.0, 1.0);
                states.push(interpolate(&y, &y_new, &k1, &k3, &k4, &k5, &k6, &k7, h, theta));
                out_idx += 1;
            }
            t += h;
            y.copy_from_slice(&y_new);
            k1.copy_from_slice(&k7); // FSAL
            stats.n_steps += 1;
            let fac = if err == 0.0 {
                fac_max
            } else {
                (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, fac_max)
            };
            h *= fac;
            fac_max = FAC_MAX;
        } else {
            stats.n_rejected += 1;
            let fac = (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
            h *= fac;
            // After a rejection, do not let the next acceptance grow the step.
            fac_max = 1.0;
        }
    }

    Ok(DenseOutput { states, stats })
}

/// Quartic dense-output interpolant evaluated at fraction `theta` of the step.
#[allow(clippy::too_many_arguments)]
fn interpolate(
    y: &[f64],
    y_new: &[f64],
    k1: &[f64],
    k3: &[f64],
    k4: &[f64],
    k5: &[f64],
    k6: &[f64],
    k7: &[f64],
    h: f64,
    theta: f64,
) -> Vec<f64> {
    let th1 = 1.0 - theta;
    let n = y.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let ydiff = y_new[i] - y[i];
        let bspl = h * k1[i] - ydiff;
        let r1 = y[i];
        let r2 = ydiff;
        let r3 = bspl;
        let r4 = ydiff - h * k7[i] - bspl;
        let r5 = h
            * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        out[i] = r1 + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
    }
    out
}

/// Standard starting-step heuristic based on the scaled sizes of `y0`, `f0`,
/// and an Euler probe of the second derivative.
fn initial_step<F>(
    f: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    opts: &SolverOptions,
    h_max: f64,
    stats: &mut SolveStats,
) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), RhsError>,
{
    let n = y0.len();
    let sc: Vec<f64> = y0
        .iter()
        .map(|&yi| opts.atol + opts.rtol * yi.abs())
        .collect();
    let rms = |v: &[f64]| -> f64 {
        (v.iter()
            .zip(&sc)
            .map(|(x, s)| (x / s) * (x / s))
            .sum::<f64>()
            / n as f64)
            .sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(h_max);

    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, k)| y + h0 * k).collect();
    let mut f1 = vec![0.0; n];
    stats.n_rhs_evals += 1;
    if f(t0 + h0, &y1, &mut f1).is_err() {
        return (h0 * 1e-2).max(1e-10);
    }
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;

    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(h_max)
}

/// Fixed-step classical RK4, kept as an independent reference integrator for
/// validating the adaptive solver (it shares no code with `integrate_dense`).
pub fn rk4_fixed<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    h: f64,
) -> Result<Vec<f64>, SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), RhsError>,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let steps = ((t_end - t0) / h).round() as usize;
    let h = (t_end - t0) / steps as f64;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for _ in 0..steps {
        let fail = |source, t| SolverError::Rhs { t, source };
        f(t, &y, &mut k1).map_err(|e| fail(e, t))?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(t + 0.5 * h, &tmp, &mut k2).map_err(|e| fail(e, t))?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(t + 0.5 * h, &tmp, &mut k3).map_err(|e| fail(e, t))?;
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        f(t + h, &tmp, &mut k4).map_err(|e| fail(e, t))?;
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { t });
        }
    }
    Ok(y)
}
