//! Reparameterization between the natural (constrained) parameter space and
//! the unconstrained space the sampler works in.
//!
//! Positive scalars move through `log`, scalars with a bounded prior support
//! move through a scaled logit, and spline coefficients stay as they are.
//! The Jacobian of the map is added to the log-target so the sampler sees
//! the correctly transformed density.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, ParamVector};
use crate::posterior::{Posterior, PosteriorError, Prior, PriorConfig};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("vector has length {got}, transform expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("value {value} is outside the transform range ({lo}, {hi})")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
}

/// Map applied to one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    /// x = exp(z), for parameters constrained to (0, inf).
    Log,
    /// x = lo + (hi - lo) * sigmoid(z), for parameters confined to (lo, hi).
    Logit { lo: f64, hi: f64 },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl TransformKind {
    pub fn to_natural(&self, z: f64) -> f64 {
        match *self {
            TransformKind::Identity => z,
            TransformKind::Log => z.exp(),
            TransformKind::Logit { lo, hi } => lo + (hi - lo) * sigmoid(z),
        }
    }

    pub fn to_unconstrained(&self, x: f64) -> Result<f64, TransformError> {
        match *self {
            TransformKind::Identity => Ok(x),
            TransformKind::Log => {
                if x > 0.0 {
                    Ok(x.ln())
                } else {
                    Err(TransformError::OutOfRange {
                        value: x,
                        lo: 0.0,
                        hi: f64::INFINITY,
                    })
                }
            }
            TransformKind::Logit { lo, hi } => {
                if x > lo && x < hi {
                    let u = (x - lo) / (hi - lo);
                    Ok((u / (1.0 - u)).ln())
                } else {
                    Err(TransformError::OutOfRange {
                        value: x,
                        lo,
                        hi,
                    })
                }
            }
        }
    }

    /// log |dx/dz| evaluated at z.
    pub fn log_jacobian(&self, z: f64) -> f64 {
        match *self {
            TransformKind::Identity => 0.0,
            TransformKind::Log => z,
            TransformKind::Logit { lo, hi } => {
                let s = sigmoid(z);
                (hi - lo).ln() + s.ln() + (1.0 - s).ln()
            }
        }
    }

    /// dx/dz evaluated at z.
    pub fn jacobian(&self, z: f64) -> f64 {
        match *self {
            TransformKind::Identity => 1.0,
            TransformKind::Log => z.exp(),
            TransformKind::Logit { lo, hi } => {
                let s = sigmoid(z);
                (hi - lo) * s * (1.0 - s)
            }
        }
    }

    /// d/dz of `log_jacobian`.
    pub fn grad_log_jacobian(&self, z: f64) -> f64 {
        match *self {
            TransformKind::Identity => 0.0,
            TransformKind::Log => 1.0,
            TransformKind::Logit { .. } => 1.0 - 2.0 * sigmoid(z),
        }
    }
}

/// Per-coordinate transforms for a full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTransform {
    kinds: Vec<TransformKind>,
}

fn kind_for_prior(prior: &Prior) -> TransformKind {
    // Bounded prior support confines the parameter to an interval; anything
    // else on these positive-rate parameters gets a log map.
    match *prior {
        Prior::Uniform { lo, hi } | Prior::TruncatedNormal { lo, hi, .. } => {
            TransformKind::Logit { lo, hi }
        }
        _ => TransformKind::Log,
    }
}

impl ParamTransform {
    /// Choose transforms from the prior supports: logit where the prior
    /// bounds the parameter, log for the remaining positive scalars,
    /// identity for every spline coefficient.
    pub fn for_model(spec: &ModelSpec, priors: &PriorConfig) -> Self {
        let mut kinds = Vec::with_capacity(spec.n_params());
        if let Some(alpha_prior) = &priors.alpha {
            kinds.push(kind_for_prior(alpha_prior));
        }
        kinds.push(kind_for_prior(&priors.gamma));
        kinds.push(kind_for_prior(&priors.seed0));
        kinds.push(kind_for_prior(&priors.phi_inv));
        kinds.push(kind_for_prior(&priors.tau));
        kinds.extend(std::iter::repeat_n(
            TransformKind::Identity,
            spec.n_coeffs(),
        ));
        Self { kinds }
    }

    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[TransformKind] {
        &self.kinds
    }

    fn check_len(&self, len: usize) -> Result<(), TransformError> {
        if len == self.kinds.len() {
            Ok(())
        } else {
            Err(TransformError::DimensionMismatch {
                got: len,
                want: self.kinds.len(),
            })
        }
    }

    pub fn to_natural(&self, z: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.check_len(z.len())?;
        Ok(z.iter()
            .zip(&self.kinds)
            .map(|(&zi, k)| k.to_natural(zi))
            .collect())
    }

    pub fn to_unconstrained(&self, x: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.check_len(x.len())?;
        x.iter()
            .zip(&self.kinds)
            .map(|(&xi, k)| k.to_unconstrained(xi))
            .collect()
    }

    /// Sum of per-coordinate log-Jacobians at z.
    pub fn log_jacobian(&self, z: &[f64]) -> Result<f64, TransformError> {
        self.check_len(z.len())?;
        Ok(z.iter()
            .zip(&self.kinds)
            .map(|(&zi, k)| k.log_jacobian(zi))
            .sum())
    }

    /// Chain a natural-space gradient back to z-space, including the
    /// gradient of the log-Jacobian correction.
    pub fn pullback_gradient(
        &self,
        z: &[f64],
        natural_grad: &[f64],
    ) -> Result<Vec<f64>, TransformError> {
        self.check_len(z.len())?;
        self.check_len(natural_grad.len())?;
        Ok(z.iter()
            .zip(natural_grad)
            .zip(&self.kinds)
            .map(|((&zi, &gi), k)| gi * k.jacobian(zi) + k.grad_log_jacobian(zi))
            .collect())
    }
}

/// The posterior pulled back to unconstrained space: this is the density the
/// sampler actually explores.
#[derive(Debug, Clone)]
pub struct UnconstrainedPosterior<'a> {
    pub posterior: Posterior<'a>,
    pub transform: ParamTransform,
}

impl<'a> UnconstrainedPosterior<'a> {
    pub fn new(posterior: Posterior<'a>) -> Self {
        let transform = ParamTransform::for_model(posterior.spec, posterior.priors);
        Self {
            posterior,
            transform,
        }
    }

    pub fn dim(&self) -> usize {
        self.transform.dim()
    }

    fn natural_point(&self, z: &[f64]) -> Option<ParamVector> {
        let x = self.transform.to_natural(z).ok()?;
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        ParamVector::from_flat(self.posterior.spec, x).ok()
    }

    /// Log density in z-space; `Ok(None)` marks a zero-density point the
    /// sampler should reject, `Err` a genuine failure.
    pub fn log_density(&self, z: &[f64]) -> Result<Option<f64>, PosteriorError> {
        let Some(p) = self.natural_point(z) else {
            return Ok(None);
        };
        match self.posterior.log_posterior(&p) {
            Ok(v) => Ok(Some(v + self.transform.log_jacobian(z).expect("dim checked"))),
            Err(e) if e.is_rejection() => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Log density and gradient in z-space.
    #[allow(clippy::type_complexity)]
    pub fn log_density_and_gradient(
        &self,
        z: &[f64],
    ) -> Result<Option<(f64, Vec<f64>)>, PosteriorError> {
        let Some(p) = self.natural_point(z) else {
            return Ok(None);
        };
        match self.posterior.log_posterior_and_gradient(&p) {
            Ok((v, g)) => {
                let value = v + self.transform.log_jacobian(z).expect("dim checked");
                let grad = self
                    .transform
                    .pullback_gradient(z, &g)
                    .expect("dim checked");
                Ok(Some((value, grad)))
            }
            Err(e) if e.is_rejection() => Ok(None),
            Err(e) => Err(e),
        }
    }
}
