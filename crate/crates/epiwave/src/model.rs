//! Model structure: compartment families, state-vector layout, and the
//! sampled parameter vector.
//!
//! Both families share one state layout: `(S, stage_1 .. stage_{M+K}, R, C)`
//! where the first `M` stages are exposed (rate `M * alpha` each), the last
//! `K` stages are infectious (rate `K * gamma` each), and `C` is the
//! cumulative-infection counter. The SI_K R family is simply `M = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spline::SplineConfig;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("SEMIKR requires at least one exposed stage")]
    MissingExposedStages,
    #[error("SIKR has no exposed stages but M = {0} was given")]
    UnexpectedExposedStages(usize),
    #[error("need at least one infectious stage")]
    MissingInfectiousStages,
    #[error("population must be positive and finite, got {0}")]
    BadPopulation(f64),
    #[error("time horizon must cover at least one day")]
    EmptyHorizon,
    #[error("spline window [{t0}, {t1}] does not cover the {horizon}-day horizon")]
    SplineTooShort { t0: f64, t1: f64, horizon: usize },
    #[error(transparent)]
    Spline(#[from] crate::spline::SplineError),
    #[error("initial seed {0} must lie strictly between 0 and the population {1}")]
    BadSeed(f64, f64),
    #[error("parameter vector has length {got}, model expects {want}")]
    ParamLength { got: usize, want: usize },
    #[error("parameter {name} = {value} must be positive")]
    NonPositiveParam { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    /// S -> I_1 .. I_K -> R.
    Sikr,
    /// S -> E_1 .. E_M -> I_1 .. I_K -> R.
    Semikr,
}

/// Structural description of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Exposed stages M (0 for SIKR).
    pub n_exposed: usize,
    /// Infectious stages K.
    pub n_infectious: usize,
    /// Population size N.
    pub population: f64,
    pub spline: SplineConfig,
    /// Observation horizon in days; the daily grid is `t0 .. t0 + horizon`.
    pub horizon: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self.family {
            ModelFamily::Semikr if self.n_exposed == 0 => {
                return Err(ModelError::MissingExposedStages)
            }
            ModelFamily::Sikr if self.n_exposed != 0 => {
                return Err(ModelError::UnexpectedExposedStages(self.n_exposed))
            }
            _ => {}
        }
        if self.n_infectious == 0 {
            return Err(ModelError::MissingInfectiousStages);
        }
        if !(self.population > 0.0) || !self.population.is_finite() {
            return Err(ModelError::BadPopulation(self.population));
        }
        if self.horizon == 0 {
            return Err(ModelError::EmptyHorizon);
        }
        self.spline.validate()?;
        let needed = self.spline.t0 + self.horizon as f64;
        if self.spline.t1 + 1e-9 < needed {
            return Err(ModelError::SplineTooShort {
                t0: self.spline.t0,
                t1: self.spline.t1,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Total chain length M + K.
    pub fn n_stages(&self) -> usize {
        self.n_exposed + self.n_infectious
    }

    /// State dimension: S + stages + R + C.
    pub fn state_dim(&self) -> usize {
        self.n_stages() + 3
    }

    pub fn idx_s(&self) -> usize {
        0
    }

    /// First chain compartment (E_1, or I_1 when there are no exposed stages).
    pub fn idx_chain_start(&self) -> usize {
        1
    }

    /// First infectious compartment.
    pub fn idx_i_start(&self) -> usize {
        1 + self.n_exposed
    }

    pub fn idx_r(&self) -> usize {
        1 + self.n_stages()
    }

    /// Cumulative-infection counter (always the last slot).
    pub fn idx_counter(&self) -> usize {
        2 + self.n_stages()
    }

    /// Per-stage exit rate of chain stage `j` (0-based over the whole chain).
    pub fn stage_rate(&self, j: usize, alpha: f64, gamma: f64) -> f64 {
        if j < self.n_exposed {
            self.n_exposed as f64 * alpha
        } else {
            self.n_infectious as f64 * gamma
        }
    }

    /// Number of spline coefficients m.
    pub fn n_coeffs(&self) -> usize {
        self.spline.n_basis()
    }

    /// Full parameter-vector length: m + 5 with an exposed stage, m + 4 without.
    pub fn n_params(&self) -> usize {
        self.layout().beta_start + self.n_coeffs()
    }

    /// Parameters the ODE solution actually depends on (everything except the
    /// dispersion and the smoothness scale).
    pub fn n_dynamic(&self) -> usize {
        match self.family {
            ModelFamily::Semikr => 3 + self.n_coeffs(),
            ModelFamily::Sikr => 2 + self.n_coeffs(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        match self.family {
            ModelFamily::Semikr => ParamLayout {
                alpha: Some(0),
                gamma: 1,
                seed0: 2,
                phi_inv: 3,
                tau: 4,
                beta_start: 5,
            },
            ModelFamily::Sikr => ParamLayout {
                alpha: None,
                gamma: 0,
                seed0: 1,
                phi_inv: 2,
                tau: 3,
                beta_start: 4,
            },
        }
    }

    /// Flat parameter index of the i-th dynamic parameter.
    pub fn dynamic_to_flat(&self, i: usize) -> usize {
        let l = self.layout();
        let head = if l.alpha.is_some() { 3 } else { 2 };
        if i < head {
            i
        } else {
            l.beta_start + (i - head)
        }
    }

    /// Column names for the flat parameter vector, used in CSV headers.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_params());
        if self.layout().alpha.is_some() {
            names.push("alpha".to_string());
        }
        names.push("gamma".to_string());
        names.push("seed0".to_string());
        names.push("phi_inv".to_string());
        names.push("tau".to_string());
        for i in 1..=self.n_coeffs() {
            names.push(format!("beta_{i}"));
        }
        names
    }
}

/// Positions of the named parameters inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub alpha: Option<usize>,
    pub gamma: usize,
    pub seed0: usize,
    pub phi_inv: usize,
    pub tau: usize,
    pub beta_start: usize,
}

/// One point in parameter space, stored flat in the natural (constrained)
/// parameterization: `(alpha,) gamma, seed0, phi_inv, tau, beta_1 .. beta_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn from_flat(spec: &ModelSpec, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != spec.n_params() {
            return Err(ModelError::ParamLength {
                got: values.len(),
                want: spec.n_params(),
            });
        }
        Ok(Self {
            values,
            layout: spec.layout(),
        })
    }

    /// Assemble from named parts; `alpha` must be `None` exactly for SIKR.
    pub fn from_parts(
        spec: &ModelSpec,
        alpha: Option<f64>,
        gamma: f64,
        seed0: f64,
        phi_inv: f64,
        tau: f64,
        beta: &[f64],
    ) -> Result<Self, ModelError> {
        let mut values = Vec::with_capacity(spec.n_params());
        match (spec.family, alpha) {
            (ModelFamily::Semikr, Some(a)) => values.push(a),
            (ModelFamily::Semikr, None) => return Err(ModelError::MissingExposedStages),
            (ModelFamily::Sikr, None) => {}
            (ModelFamily::Sikr, Some(_)) => {
                return Err(ModelError::UnexpectedExposedStages(1));
            }
        }
        values.extend_from_slice(&[gamma, seed0, phi_inv, tau]);
        values.extend_from_slice(beta);
        Self::from_flat(spec, values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Latency-rate parameter; `None` for models without an exposed stage.
    pub fn alpha(&self) -> Option<f64> {
        self.layout.alpha.map(|i| self.values[i])
    }

    pub fn gamma(&self) -> f64 {
        self.values[self.layout.gamma]
    }

    /// Initial seeded individuals (E_0 or I_0).
    pub fn seed0(&self) -> f64 {
        self.values[self.layout.seed0]
    }

    pub fn phi_inv(&self) -> f64 {
        self.values[self.layout.phi_inv]
    }

    /// Overdispersion parameter phi = 1 / phi_inv.
    pub fn phi(&self) -> f64 {
        1.0 / self.phi_inv()
    }

    pub fn tau(&self) -> f64 {
        self.values[self.layout.tau]
    }

    pub fn beta(&self) -> &[f64] {
        &self.values[self.layout.beta_start..]
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    /// Check positivity of the parameters the ODE and likelihood require.
    pub fn validate_feasible(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        if let Some(a) = self.alpha() {
            if !(a > 0.0) {
                return Err(ModelError::NonPositiveParam {
                    name: "alpha",
                    value: a,
                });
            }
        }
        if !(self.gamma() > 0.0) {
            return Err(ModelError::NonPositiveParam {
                name: "gamma",
                value: self.gamma(),
            });
        }
        if !(self.phi_inv() > 0.0) {
            return Err(ModelError::NonPositiveParam {
                name: "phi_inv",
                value: self.phi_inv(),
            });
        }
        if !(self.tau() > 0.0) {
            return Err(ModelError::NonPositiveParam {
                name: "tau",
                value: self.tau(),
            });
        }
        let s = self.seed0();
        if !(s > 0.0 && s < spec.population) {
            return Err(ModelError::BadSeed(s, spec.population));
        }
        if self.beta().iter().any(|b| !b.is_finite()) {
            return Err(ModelError::NonPositiveParam {
                name: "beta (non-finite)",
                value: f64::NAN,
            });
        }
        Ok(())
    }
}
