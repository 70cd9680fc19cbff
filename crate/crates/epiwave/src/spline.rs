//! Clamped B-spline bases on uniform knots, plus the difference penalty that
//! backs the smoothness prior on the spline coefficients.
//!
//! The log transmission rate is modelled as `log beta(t) = sum_i beta_i B_i(t)`
//! where `B_i` are B-splines of degree `d` over `q_knots` equidistant grid
//! points spanning `[t0, t1]`. Boundary knots are repeated (clamped), so the
//! basis size is `m = q_knots + d - 1` and the endpoint values of the spline
//! equal the first/last coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("need at least two grid knots, got {0}")]
    TooFewKnots(usize),
    #[error("spline degree must be at least 1, got {0}")]
    BadDegree(usize),
    #[error("empty time window: t0 = {t0}, t1 = {t1}")]
    EmptyWindow { t0: f64, t1: f64 },
    #[error("t = {t} lies outside the spline domain [{t0}, {t1}]")]
    OutOfDomain { t: f64, t0: f64, t1: f64 },
    #[error("coefficient vector has length {got} but the basis has {want} functions")]
    DimensionMismatch { got: usize, want: usize },
    #[error("penalty order q = {q} must satisfy 1 <= q < m = {m}")]
    BadPenaltyOrder { q: usize, m: usize },
}

/// Knot-grid layout for the transmission-rate spline.
///
/// `q_knots` counts the equidistant grid points *including* both endpoints of
/// `[t0, t1]`; `degree` extra copies of each boundary knot are added so the
/// spline is clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub t0: f64,
    pub t1: f64,
    pub q_knots: usize,
    pub degree: usize,
}

impl SplineConfig {
    /// Number of basis functions, `m = q_knots + degree - 1`.
    pub fn n_basis(&self) -> usize {
        self.q_knots + self.degree - 1
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        if self.q_knots < 2 {
            return Err(SplineError::TooFewKnots(self.q_knots));
        }
        if self.degree < 1 {
            return Err(SplineError::BadDegree(self.degree));
        }
        if !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(SplineError::EmptyWindow {
                t0: self.t0,
                t1: self.t1,
            });
        }
        Ok(())
    }
}

/// A clamped B-spline basis: the full (repeated) knot vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    config: SplineConfig,
    /// Full knot vector of length `q_knots + 2 * degree`; the boundary values
    /// each appear `degree + 1` times.
    knots: Vec<f64>,
}

impl Basis {
    /// Build the clamped knot vector for `config`.
    pub fn new(config: SplineConfig) -> Result<Self, SplineError> {
        config.validate()?;
        let d = config.degree;
        let q = config.q_knots;
        let mut knots = Vec::with_capacity(q + 2 * d);
        knots.extend(std::iter::repeat_n(config.t0, d));
        let step = (config.t1 - config.t0) / (q - 1) as f64;
        for i in 0..q {
            // Last grid point is forced to t1 exactly so clamping is exact.
            let t = if i + 1 == q {
                config.t1
            } else {
                config.t0 + step * i as f64
            };
            knots.push(t);
        }
        knots.extend(std::iter::repeat_n(config.t1, d));
        Ok(Self { config, knots })
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.config.n_basis()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_domain(&self, t: f64) -> Result<f64, SplineError> {
        let (t0, t1) = (self.config.t0, self.config.t1);
        // Adaptive steppers can land a hair outside the window through
        // round-off; snap those back instead of failing the whole solve.
        let slack = 1e-9 * (t1 - t0);
        if t < t0 - slack || t > t1 + slack || !t.is_finite() {
            return Err(SplineError::OutOfDomain { t, t0, t1 });
        }
        Ok(t.clamp(t0, t1))
    }

    /// Index of the knot span containing `t`: the largest `i` with
    /// `knots[i] <= t`, clamped so the span is non-empty.
    fn find_span(&self, t: f64) -> usize {
        let d = self.config.degree;
        let m = self.len();
        // Valid spans run from knot index d to m - 1 (the last non-empty one).
        if t >= self.config.t1 {
            return m - 1;
        }
        let mut lo = d;
        let mut hi = m; // exclusive
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Evaluate all `m` basis functions at `t` into `out` (zero-filled first).
    ///
    /// At most `degree + 1` entries are nonzero; the values are computed with
    /// the triangular Cox–de Boor scheme, so no division by a zero knot
    /// interval can occur.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), SplineError> {
        let m = self.len();
        if out.len() != m {
            return Err(SplineError::DimensionMismatch {
                got: out.len(),
                want: m,
            });
        }
        let t = self.check_domain(t)?;
        out.fill(0.0);
        let d = self.config.degree;
        let span = self.find_span(t);

        // Local nonzero values N[0..=d] = B_{span-d..=span}(t).
        let mut vals = [0.0f64; 8];
        let mut left = [0.0f64; 8];
        let mut right = [0.0f64; 8];
        let (vals, left, right) = if d < 8 {
            (&mut vals[..=d], &mut left[..=d], &mut right[..=d])
        } else {
            // Degrees this high are never used in practice but keep it correct.
            unreachable!("degree {d} too large; validated configs use small degrees")
        };
        vals[0] = 1.0;
        for j in 1..=d {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        for (r, &v) in vals.iter().enumerate() {
            out[span - d + r] = v;
        }
        Ok(())
    }

    /// Evaluate all basis functions at `t` into a fresh vector.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, SplineError> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// `log beta(t) = sum_i coeffs[i] * B_i(t)` without materializing the full
    /// basis row.
    pub fn eval_log_beta_at(&self, t: f64, coeffs: &[f64]) -> Result<f64, SplineError> {
        let m = self.len();
        if coeffs.len() != m {
            return Err(SplineError::DimensionMismatch {
                got: coeffs.len(),
                want: m,
            });
        }
        let mut row = vec![0.0; m];
        self.eval_into(t, &mut row)?;
        Ok(eval_log_beta(coeffs, &row).expect("lengths checked above"))
    }

    /// Dense design matrix with one basis row per grid point.
    pub fn design_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        let m = self.len();
        let mut mat = DMatrix::zeros(grid.len(), m);
        let mut row = vec![0.0; m];
        for (gi, &t) in grid.iter().enumerate() {
            self.eval_into(t, &mut row)?;
            for (ci, &v) in row.iter().enumerate() {
                mat[(gi, ci)] = v;
            }
        }
        Ok(mat)
    }
}

/// Dot product of spline coefficients with precomputed basis values.
pub fn eval_log_beta(coeffs: &[f64], basis_at_t: &[f64]) -> Result<f64, SplineError> {
    if coeffs.len() != basis_at_t.len() {
        return Err(SplineError::DimensionMismatch {
            got: coeffs.len(),
            want: basis_at_t.len(),
        });
    }
    Ok(coeffs
        .iter()
        .zip(basis_at_t)
        .map(|(c, b)| c * b)
        .sum())
}

/// The q-th order difference penalty `K = D_q' D_q`.
///
/// `beta' K beta` equals the sum of squared q-th differences of the
/// coefficient sequence, so coefficient vectors that are polynomials of
/// degree < q in the index are unpenalized (K has rank `m - q`).
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    matrix: DMatrix<f64>,
    order: usize,
}

impl PenaltyMatrix {
    pub fn new(m: usize, q: usize) -> Result<Self, SplineError> {
        if q < 1 || q >= m {
            return Err(SplineError::BadPenaltyOrder { q, m });
        }
        let d = difference_matrix(m, q);
        Ok(Self {
            matrix: d.transpose() * &d,
            order: q,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Rank of the penalty, `m - q`.
    pub fn rank(&self) -> usize {
        self.dim() - self.order
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `beta' K beta`.
    pub fn quad_form(&self, beta: &[f64]) -> f64 {
        assert_eq!(beta.len(), self.dim(), "coefficient length mismatch");
        let mut total = 0.0;
        for i in 0..self.dim() {
            let mut row = 0.0;
            for (j, &bj) in beta.iter().enumerate() {
                row += self.matrix[(i, j)] * bj;
            }
            total += beta[i] * row;
        }
        total
    }

    /// `K beta`, as needed by the prior gradient.
    pub fn mat_vec(&self, beta: &[f64], out: &mut [f64]) {
        assert_eq!(beta.len(), self.dim(), "coefficient length mismatch");
        assert_eq!(out.len(), self.dim(), "output length mismatch");
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &bj) in beta.iter().enumerate() {
                acc += self.matrix[(i, j)] * bj;
            }
            *slot = acc;
        }
    }
}

/// The `(m - q) x m` matrix of q-th order forward differences.
fn difference_matrix(m: usize, q: usize) -> DMatrix<f64> {
    let mut d = DMatrix::identity(m, m);
    for _ in 0..q {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, m);
        for i in 0..rows {
            for j in 0..m {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    d
}
