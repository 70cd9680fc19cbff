//! Epidemic right-hand sides, trajectory integration on the daily grid, and
//! daily-incidence extraction.
//!
//! The infection flux `beta(t) * S * I / N` leaves `S` and enters the first
//! chain compartment and the cumulative counter `C`; the exposed/infectious
//! chain advances at per-stage rates `M * alpha` and `K * gamma`, which makes
//! the total dwell times Erlang-distributed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelSpec, ParamVector};
use crate::solver::{integrate_dense, rk4_fixed, RhsError, SolveStats, SolverError, SolverOptions};
use crate::spline::{Basis, SplineError};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("state vector has length {got}, model expects {want}")]
    StateLength { got: usize, want: usize },
    #[error("erlang oracle needs stages >= 1, rate > 0, t >= 0 (got {stages}, {rate}, {t})")]
    BadErlangArgs { stages: usize, rate: f64, t: f64 },
}

/// Relative/absolute error control for the ODE solves. The absolute
/// tolerance is `atol_scale * N` so that it is meaningful in persons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol_scale: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol_scale: 1e-8,
        }
    }
}

impl Tolerances {
    pub fn solver_options(&self, population: f64) -> SolverOptions {
        SolverOptions {
            rtol: self.rtol,
            atol: self.atol_scale * population,
            // Output is on a daily grid; capping the step at one day keeps
            // every reported value within one step of an accepted endpoint,
            // so interpolation error never exceeds local step error. In the
            // flat tails the error controller would otherwise take multi-week
            // steps whose interior interpolant visibly wiggles.
            h_max: Some(1.0),
            ..Default::default()
        }
    }
}

/// Reusable right-hand-side evaluator for one (spec, parameter) pair.
pub(crate) struct EpidemicRhs<'a> {
    spec: &'a ModelSpec,
    basis: &'a Basis,
    alpha: f64,
    gamma: f64,
    beta_coeffs: &'a [f64],
    basis_buf: Vec<f64>,
}

impl<'a> EpidemicRhs<'a> {
    pub fn new(spec: &'a ModelSpec, basis: &'a Basis, p: &'a ParamVector) -> Self {
        Self {
            spec,
            basis,
            alpha: p.alpha().unwrap_or(0.0),
            gamma: p.gamma(),
            beta_coeffs: p.beta(),
            basis_buf: vec![0.0; basis.len()],
        }
    }

    /// `beta(t)`, with the basis row left in `basis_buf` for reuse.
    pub fn beta_at(&mut self, t: f64) -> Result<f64, RhsError> {
        // The basis is a partition of unity, so log beta is bounded by the
        // largest coefficient; one absurd coefficient makes the system so
        // stiff that the solver would grind to a halt long before sampling
        // the region where the pointwise check below fires. Reject up front.
        if let Some((i, &c)) = self
            .beta_coeffs
            .iter()
            .enumerate()
            .find(|(_, &c)| !c.is_finite() || c > 500.0)
        {
            return Err(RhsError(format!(
                "transmission rate overflow: spline coefficient {} = {c} exceeds \
                 the log-rate cap of 500",
                i + 1
            )));
        }
        self.basis
            .eval_into(t, &mut self.basis_buf)
            .map_err(|e| RhsError(e.to_string()))?;
        let mut log_beta = 0.0;
        for (c, b) in self.beta_coeffs.iter().zip(&self.basis_buf) {
            log_beta += c * b;
        }
        // exp() overflows near 709; fail early and name the coefficients that
        // drive the value so the caller can see which region misbehaves.
        if !log_beta.is_finite() || log_beta > 500.0 {
            let active: Vec<usize> = self
                .basis_buf
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, _)| i + 1)
                .collect();
            return Err(RhsError(format!(
                "transmission rate overflow at t = {t}: log beta = {log_beta}, \
                 driven by spline coefficients {active:?}"
            )));
        }
        Ok(log_beta.exp())
    }

    pub fn basis_buf(&self) -> &[f64] {
        &self.basis_buf
    }

    pub fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), RhsError> {
        self.eval_returning_beta(t, y, dy).map(|_| ())
    }

    /// Same as `eval` but hands back `beta(t)` so augmented systems can build
    /// Jacobian terms without re-evaluating the spline.
    pub fn eval_returning_beta(
        &mut self,
        t: f64,
        y: &[f64],
        dy: &mut [f64],
    ) -> Result<f64, RhsError> {
        let beta = self.beta_at(t)?;
        let spec = self.spec;
        let n = spec.population;
        let i_start = spec.idx_i_start();
        let i_total: f64 = y[i_start..i_start + spec.n_infectious].iter().sum();
        let flux = beta * y[spec.idx_s()] * i_total / n;

        dy.fill(0.0);
        dy[spec.idx_s()] -= flux;
        dy[spec.idx_chain_start()] += flux;
        dy[spec.idx_counter()] += flux;
        for j in 0..spec.n_stages() {
            let out = spec.stage_rate(j, self.alpha, self.gamma) * y[1 + j];
            dy[1 + j] -= out;
            dy[2 + j] += out; // the last stage drains into R
        }
        Ok(beta)
    }
}

/// One-off right-hand-side evaluation (diagnostic convenience; the solver
/// uses a reusable evaluator internally).
pub fn rhs(spec: &ModelSpec, t: f64, y: &[f64], p: &ParamVector) -> Result<Vec<f64>, OdeError> {
    spec.validate()?;
    p.validate_feasible(spec)?;
    if y.len() != spec.state_dim() {
        return Err(OdeError::StateLength {
            got: y.len(),
            want: spec.state_dim(),
        });
    }
    let basis = Basis::new(spec.spline)?;
    let mut f = EpidemicRhs::new(spec, &basis, p);
    let mut dy = vec![0.0; y.len()];
    f.eval(t, y, &mut dy)
        .map_err(|source| SolverError::Rhs { t, source })?;
    Ok(dy)
}

/// Initial state: `seed0` individuals in the first chain compartment (and
/// already counted in `C`), everyone else susceptible.
pub fn initial_state(spec: &ModelSpec, seed0: f64) -> Result<Vec<f64>, ModelError> {
    if !(seed0 > 0.0 && seed0 < spec.population) {
        return Err(ModelError::BadSeed(seed0, spec.population));
    }
    let mut y = vec![0.0; spec.state_dim()];
    y[spec.idx_s()] = spec.population - seed0;
    y[spec.idx_chain_start()] = seed0;
    y[spec.idx_counter()] = seed0;
    Ok(y)
}

/// Model solution sampled on a time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub counter_idx: usize,
    pub population: f64,
    pub stats: SolveStats,
}

impl Trajectory {
    /// The cumulative-infection series C(t) over the grid.
    pub fn counter_series(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[self.counter_idx]).collect()
    }
}

/// Daily incidence with a count of clamped (slightly negative) differences.
#[derive(Debug, Clone)]
pub struct Incidence {
    pub values: Vec<f64>,
    pub n_clamped: usize,
}

/// Integrate from the model's standard initial state over the daily grid
/// `t0, t0 + 1, ..., t0 + horizon`.
pub fn integrate(
    spec: &ModelSpec,
    p: &ParamVector,
    tol: &Tolerances,
) -> Result<Trajectory, OdeError> {
    let y0 = initial_state(spec, p.seed0())?;
    let t0 = spec.spline.t0;
    let grid: Vec<f64> = (0..=spec.horizon).map(|j| t0 + j as f64).collect();
    integrate_from(spec, p, &y0, &grid, tol)
}

/// Integrate from an arbitrary initial state over an arbitrary grid (used by
/// dwell-time checks and tests that need sub-daily resolution).
pub fn integrate_from(
    spec: &ModelSpec,
    p: &ParamVector,
    y0: &[f64],
    grid: &[f64],
    tol: &Tolerances,
) -> Result<Trajectory, OdeError> {
    spec.validate()?;
    p.validate_feasible(spec)?;
    if y0.len() != spec.state_dim() {
        return Err(OdeError::StateLength {
            got: y0.len(),
            want: spec.state_dim(),
        });
    }
    let basis = Basis::new(spec.spline)?;
    let mut f = EpidemicRhs::new(spec, &basis, p);
    let out = integrate_dense(
        |t, y, dy| f.eval(t, y, dy),
        grid[0],
        y0,
        grid,
        &tol.solver_options(spec.population),
    )?;
    Ok(Trajectory {
        grid: grid.to_vec(),
        states: out.states,
        counter_idx: spec.idx_counter(),
        population: spec.population,
        stats: out.stats,
    })
}

/// First differences of the cumulative counter. Differences more negative
/// than `-1e-9 * N` never come from the model (C is non-decreasing), so they
/// are left to the caller via errors upstream; tiny negative values are
/// solver noise and are clamped to zero.
pub fn daily_incidence(traj: &Trajectory) -> Incidence {
    let c = traj.counter_series();
    let clamp_below = -1e-9 * traj.population;
    let mut values = Vec::with_capacity(c.len().saturating_sub(1));
    let mut n_clamped = 0;
    for w in c.windows(2) {
        let d = w[1] - w[0];
        if d < 0.0 {
            n_clamped += 1;
            values.push(0.0);
            if d < clamp_below {
                log::warn!(
                    "incidence difference {d} below the noise floor {clamp_below}; clamped"
                );
            }
        } else {
            values.push(d);
        }
    }
    if n_clamped > 0 {
        log::debug!("clamped {n_clamped} negative incidence differences to zero");
    }
    Incidence { values, n_clamped }
}

/// Erlang(stages, stages * rate) probability density — the distribution of a
/// chain dwell time — used as an independent oracle in the dwell-time tests.
pub fn erlang_exit_flux(stages: usize, rate: f64, t: f64) -> Result<f64, OdeError> {
    if stages < 1 || !(rate > 0.0) || !(t >= 0.0) {
        return Err(OdeError::BadErlangArgs { stages, rate, t });
    }
    let k = stages as f64;
    let lambda = k * rate;
    if t == 0.0 {
        return Ok(if stages == 1 { lambda } else { 0.0 });
    }
    let log_pdf = k * lambda.ln() + (k - 1.0) * t.ln()
        - lambda * t
        - statrs::function::gamma::ln_gamma(k);
    Ok(log_pdf.exp())
}

/// Independent fixed-step RK4 solve of the same model, for cross-checking
/// the adaptive integration path end to end.
pub fn integrate_reference(
    spec: &ModelSpec,
    p: &ParamVector,
    t_end: f64,
    h: f64,
) -> Result<Vec<f64>, OdeError> {
    spec.validate()?;
    p.validate_feasible(spec)?;
    let y0 = initial_state(spec, p.seed0())?;
    let basis = Basis::new(spec.spline)?;
    let mut f = EpidemicRhs::new(spec, &basis, p);
    Ok(rk4_fixed(
        |t, y, dy| f.eval(t, y, dy),
        spec.spline.t0,
        &y0,
        t_end,
        h,
    )?)
}
