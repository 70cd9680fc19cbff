//! Forward sensitivities: Jacobians of the right-hand side and joint
//! integration of the state with `ds_i/dt = (df/dy) s_i + df/dp_i`.
//!
//! Only parameters the ODE actually depends on get a sensitivity column —
//! `(alpha,) gamma, seed0, beta_1 .. beta_m`. The dispersion and smoothness
//! parameters never enter the dynamics, so their columns would be
//! identically zero and are not carried.

use nalgebra::DMatrix;

use crate::model::{ModelFamily, ModelSpec, ParamVector};
use crate::ode::{initial_state, EpidemicRhs, OdeError, Tolerances};
use crate::solver::{integrate_dense, RhsError, SolveStats, SolverError};
use crate::spline::Basis;

/// Options for the extended solve. `param_jacobian_fuzz` deliberately scales
/// the parameter-Jacobian columns by `1 + fuzz`; it exists purely as a
/// negative control so gradient checks can prove they would catch a broken
/// Jacobian. Leave it at 0 for real work.
#[derive(Debug, Clone, Copy, Default)]
pub struct SensitivityOptions {
    pub tol: Tolerances,
    pub param_jacobian_fuzz: f64,
}

/// State plus sensitivity columns on the daily grid.
#[derive(Debug, Clone)]
pub struct ExtendedTrajectory {
    pub grid: Vec<f64>,
    /// Plain state at each grid point.
    pub states: Vec<Vec<f64>>,
    /// Sensitivities at each grid point, column-major: entry
    /// `[col * state_dim + row]` is `d y_row / d p_col`.
    pub sens: Vec<Vec<f64>>,
    pub state_dim: usize,
    pub n_dynamic: usize,
    pub counter_idx: usize,
    pub stats: SolveStats,
}

impl ExtendedTrajectory {
    /// Sensitivity column for dynamic parameter `col` at grid index `j`.
    pub fn column(&self, j: usize, col: usize) -> &[f64] {
        let start = col * self.state_dim;
        &self.sens[j][start..start + self.state_dim]
    }

    /// `d C(t_j) / d p_col` — the piece the likelihood gradient needs.
    pub fn counter_sensitivity(&self, j: usize, col: usize) -> f64 {
        self.sens[j][col * self.state_dim + self.counter_idx]
    }
}

struct ExtendedRhs<'a> {
    inner: EpidemicRhs<'a>,
    spec: &'a ModelSpec,
    alpha: f64,
    gamma: f64,
    fuzz: f64,
}

impl<'a> ExtendedRhs<'a> {
    fn new(spec: &'a ModelSpec, basis: &'a Basis, p: &'a ParamVector, fuzz: f64) -> Self {
        Self {
            inner: EpidemicRhs::new(spec, basis, p),
            spec,
            alpha: p.alpha().unwrap_or(0.0),
            gamma: p.gamma(),
            fuzz: 1.0 + fuzz,
        }
    }

    fn eval(&mut self, t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), RhsError> {
        let spec = self.spec;
        let dim = spec.state_dim();
        let n_dyn = spec.n_dynamic();
        let (y, sens) = z.split_at(dim);
        let (dy, dsens) = dz.split_at_mut(dim);

        let beta = self.inner.eval_returning_beta(t, y, dy)?;

        let n = spec.population;
        let i_start = spec.idx_i_start();
        let i_total: f64 = y[i_start..i_start + spec.n_infectious].iter().sum();
        let s = y[spec.idx_s()];
        // d(flux)/dS and d(flux)/dI_j.
        let w = beta * i_total / n;
        let v = beta * s / n;
        let ci = spec.idx_counter();
        let chain0 = spec.idx_chain_start();
        let n_exposed = spec.n_exposed as f64;
        let n_infectious = spec.n_infectious as f64;

        let (dyn_gamma, dyn_seed, beta_cols) = match spec.family {
            ModelFamily::Semikr => (1, 2, 3),
            ModelFamily::Sikr => (0, 1, 2),
        };

        for col in 0..n_dyn {
            let sc = &sens[col * dim..(col + 1) * dim];
            let out = &mut dsens[col * dim..(col + 1) * dim];
            out.fill(0.0);

            // (df/dy) s: flux perturbation plus chain transport.
            let si_total: f64 = sc[i_start..i_start + spec.n_infectious].iter().sum();
            let flux_pert = w * sc[spec.idx_s()] + v * si_total;
            out[spec.idx_s()] -= flux_pert;
            out[chain0] += flux_pert;
            out[ci] += flux_pert;
            for j in 0..spec.n_stages() {
                let rate = spec.stage_rate(j, self.alpha, self.gamma);
                out[1 + j] -= rate * sc[1 + j];
                out[2 + j] += rate * sc[1 + j];
            }

            // df/dp for this column.
            if spec.family == ModelFamily::Semikr && col == 0 {
                // alpha: each exposed stage rate is M * alpha.
                for j in 0..spec.n_exposed {
                    let flow = self.fuzz * n_exposed * y[1 + j];
                    out[1 + j] -= flow;
                    out[2 + j] += flow;
                }
            } else if col == dyn_gamma {
                for j in spec.n_exposed..spec.n_stages() {
                    let flow = self.fuzz * n_infectious * y[1 + j];
                    out[1 + j] -= flow;
                    out[2 + j] += flow;
                }
            } else if col == dyn_seed {
                // Initial-condition parameter: df/dp = 0.
            } else {
                let b_i = self.inner.basis_buf()[col - beta_cols];
                if b_i != 0.0 {
                    let g = self.fuzz * b_i * beta * s * i_total / n;
                    out[spec.idx_s()] -= g;
                    out[chain0] += g;
                    out[ci] += g;
                }
            }
        }
        Ok(())
    }
}

/// Integrate state and sensitivities jointly over the daily grid.
pub fn integrate_extended(
    spec: &ModelSpec,
    p: &ParamVector,
    opts: &SensitivityOptions,
) -> Result<ExtendedTrajectory, OdeError> {
    spec.validate()?;
    p.validate_feasible(spec)?;
    let dim = spec.state_dim();
    let n_dyn = spec.n_dynamic();
    let basis = Basis::new(spec.spline)?;

    let mut z0 = vec![0.0; dim * (1 + n_dyn)];
    z0[..dim].copy_from_slice(&initial_state(spec, p.seed0())?);
    // The seed column starts as d y(t0) / d seed0: one person moved from S
    // into the first chain compartment, and counted.
    let dyn_seed = match spec.family {
        ModelFamily::Semikr => 2,
        ModelFamily::Sikr => 1,
    };
    let seed_block = dim * (1 + dyn_seed);
    z0[seed_block + spec.idx_s()] = -1.0;
    z0[seed_block + spec.idx_chain_start()] = 1.0;
    z0[seed_block + spec.idx_counter()] = 1.0;

    let t0 = spec.spline.t0;
    let grid: Vec<f64> = (0..=spec.horizon).map(|j| t0 + j as f64).collect();
    let mut f = ExtendedRhs::new(spec, &basis, p, opts.param_jacobian_fuzz);
    let out = integrate_dense(
        |t, z, dz| f.eval(t, z, dz),
        t0,
        &z0,
        &grid,
        &opts.tol.solver_options(spec.population),
    )?;

    let mut states = Vec::with_capacity(out.states.len());
    let mut sens = Vec::with_capacity(out.states.len());
    for z in out.states {
        states.push(z[..dim].to_vec());
        sens.push(z[dim..].to_vec());
    }
    Ok(ExtendedTrajectory {
        grid,
        states,
        sens,
        state_dim: dim,
        n_dynamic: n_dyn,
        counter_idx: spec.idx_counter(),
        stats: out.stats,
    })
}

/// Materialized Jacobian of the right-hand side with respect to the state.
///
/// Built by applying the same sparse action used inside the extended system
/// to unit vectors, so tests exercise exactly the code that integrates.
pub fn jacobian_state(
    spec: &ModelSpec,
    t: f64,
    y: &[f64],
    p: &ParamVector,
) -> Result<DMatrix<f64>, OdeError> {
    spec.validate()?;
    p.validate_feasible(spec)?;
    let dim = spec.state_dim();
    if y.len() != dim {
        return Err(OdeError::StateLength {
            got: y.len(),
            want: dim,
        });
    }
    let basis = Basis::new(spec.spline)?;
    let mut rhs = EpidemicRhs::new(spec, &basis, p);
    let mut scratch = vec![0.0; dim];
    let beta = {
        // Evaluate once to fill the spline buffer and fail on overflow here
        // rather than mid-assembly.
        rhs.eval_returning_beta(t, y, &mut scratch)
            .map_err(|source| SolverError::Rhs { t, source })?
    };

    let n = spec.population;
    let i_start = spec.idx_i_start();
    let i_total: f64 = y[i_start..i_start + spec.n_infectious].iter().sum();
    let w = beta * i_total / n;
    let v = beta * y[spec.idx_s()] / n;
    let alpha = p.alpha().unwrap_or(0.0);

    let mut jac = DMatrix::zeros(dim, dim);
    // Susceptible column.
    jac[(spec.idx_s(), spec.idx_s())] -= w;
    jac[(spec.idx_chain_start(), spec.idx_s())] += w;
    jac[(spec.idx_counter(), spec.idx_s())] += w;
    // Chain columns: transport, plus infection terms for infectious stages.
    for j in 0..spec.n_stages() {
        let col = 1 + j;
        let rate = spec.stage_rate(j, alpha, p.gamma());
        jac[(col, col)] -= rate;
        jac[(col + 1, col)] += rate;
        if j >= spec.n_exposed {
            jac[(spec.idx_s(), col)] -= v;
            jac[(spec.idx_chain_start(), col)] += v;
            jac[(spec.idx_counter(), col)] += v;
        }
    }
    // R and C columns stay zero.
    Ok(jac)
}

/// Materialized Jacobian of the right-hand side with respect to the dynamic
/// parameters `(alpha,) gamma, seed0, beta_1 .. beta_m`.
pub fn jacobian_params(
    spec: &ModelSpec,
    t: f64,
    y: &[f64],
    p: &ParamVector,
) -> Result<DMatrix<f64>, OdeError> {
    spec.validate()?;
    p.validate_feasible(spec)?;
    let dim = spec.state_dim();
    if y.len() != dim {
        return Err(OdeError::StateLength {
            got: y.len(),
            want: dim,
        });
    }
    let basis = Basis::new(spec.spline)?;
    let mut rhs = EpidemicRhs::new(spec, &basis, p);
    let beta = rhs
        .beta_at(t)
        .map_err(|source| SolverError::Rhs { t, source })?;

    let n = spec.population;
    let i_start = spec.idx_i_start();
    let i_total: f64 = y[i_start..i_start + spec.n_infectious].iter().sum();
    let s = y[spec.idx_s()];
    let n_dyn = spec.n_dynamic();

    let mut jac = DMatrix::zeros(dim, n_dyn);
    let mut col = 0;
    if spec.family == ModelFamily::Semikr {
        for j in 0..spec.n_exposed {
            let flow = spec.n_exposed as f64 * y[1 + j];
            jac[(1 + j, col)] -= flow;
            jac[(2 + j, col)] += flow;
        }
        col += 1;
    }
    for j in spec.n_exposed..spec.n_stages() {
        let flow = spec.n_infectious as f64 * y[1 + j];
        jac[(1 + j, col)] -= flow;
        jac[(2 + j, col)] += flow;
    }
    col += 1;
    // seed0 column: zero.
    col += 1;
    for (i, &b_i) in rhs.basis_buf().iter().enumerate() {
        if b_i != 0.0 {
            let g = b_i * beta * s * i_total / n;
            jac[(spec.idx_s(), col + i)] -= g;
            jac[(spec.idx_chain_start(), col + i)] += g;
            jac[(spec.idx_counter(), col + i)] += g;
        }
    }
    Ok(jac)
}
