//! Priors, the Negative Binomial observation model, and the log-posterior
//! with its analytic gradient.
//!
//! The likelihood treats each day's effective count (observed count divided
//! by the reporting fraction) as Negative Binomial around the model's daily
//! incidence, with overdispersion `phi = 1 / phi_inv`. The spline
//! coefficients get a partially improper Gaussian smoothness prior
//! `-beta' K beta / (2 tau^2)` built from the difference penalty; everything
//! else gets a scalar prior from [`Prior`].

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::data::IncidenceSeries;
use crate::model::{ModelError, ModelFamily, ModelSpec, ParamVector};
use crate::ode::{daily_incidence, integrate, OdeError, Tolerances};
use crate::sensitivity::{integrate_extended, SensitivityOptions};
use crate::spline::PenaltyMatrix;

/// Additive floor keeping the Negative Binomial mean positive on days the
/// model produces (numerically) zero incidence. Additive rather than a clamp
/// so the gradient stays exact.
pub const MEAN_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("parameter {param} is outside its prior support")]
    OutOfSupport { param: String },
    #[error("proposal invalid: {reason}")]
    ProposalInvalid { reason: String },
    #[error("negative binomial mean must be positive, got {0}")]
    BadMean(f64),
    #[error("negative binomial dispersion must be positive, got {0}")]
    BadDispersion(f64),
    #[error("negative binomial count must be non-negative and finite, got {0}")]
    BadCount(f64),
    #[error("likelihood failed on day {day}: {source}")]
    LikelihoodDay {
        day: usize,
        source: Box<PosteriorError>,
    },
    #[error("incidence has {got} days but the data has {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("invalid prior hyperparameters: {0}")]
    BadPrior(String),
    #[error("model family and prior configuration disagree about alpha")]
    AlphaMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spline(#[from] crate::spline::SplineError),
}

impl PosteriorError {
    /// Whether a sampler should treat this as a plain rejection (out of
    /// support, or the ODE refused the parameter point) rather than a bug.
    pub fn is_rejection(&self) -> bool {
        matches!(
            self,
            PosteriorError::OutOfSupport { .. } | PosteriorError::ProposalInvalid { .. }
        )
    }
}

fn invalid(err: OdeError) -> PosteriorError {
    PosteriorError::ProposalInvalid {
        reason: err.to_string(),
    }
}

/// Scalar prior families available in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    TruncatedNormal { mean: f64, sd: f64, lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
    InverseGamma { shape: f64, scale: f64 },
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

impl Prior {
    pub fn validate(&self) -> Result<(), PosteriorError> {
        let bad = |msg: String| Err(PosteriorError::BadPrior(msg));
        match *self {
            Prior::Normal { sd, .. } if !(sd > 0.0) => bad(format!("normal sd {sd}")),
            Prior::TruncatedNormal { sd, lo, hi, .. } if !(sd > 0.0) || !(lo < hi) => {
                bad(format!("truncated normal sd {sd}, bounds [{lo}, {hi}]"))
            }
            Prior::Uniform { lo, hi } if !(lo < hi) => bad(format!("uniform bounds [{lo}, {hi}]")),
            Prior::Exponential { rate } if !(rate > 0.0) => bad(format!("exponential rate {rate}")),
            Prior::InverseGamma { shape, scale } if !(shape > 0.0) || !(scale > 0.0) => {
                bad(format!("inverse gamma shape {shape}, scale {scale}"))
            }
            _ => Ok(()),
        }
    }

    /// Interval outside which the density is zero.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Prior::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Prior::TruncatedNormal { lo, hi, .. } | Prior::Uniform { lo, hi } => (lo, hi),
            Prior::Exponential { .. } | Prior::InverseGamma { .. } => (0.0, f64::INFINITY),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        let (lo, hi) = self.support();
        x.is_finite() && x >= lo && x <= hi && !(matches!(self, Prior::InverseGamma { .. }) && x == 0.0)
    }

    /// Log density, `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        if !self.in_support(x) {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            Prior::TruncatedNormal { mean, sd, lo, hi } => {
                let z = (x - mean) / sd;
                let mass = normal_cdf((hi - mean) / sd) - normal_cdf((lo - mean) / sd);
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI - mass.ln()
            }
            Prior::Uniform { lo, hi } => -(hi - lo).ln(),
            Prior::Exponential { rate } => rate.ln() - rate * x,
            Prior::InverseGamma { shape, scale } => {
                shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
            }
        }
    }

    /// d/dx log density (defined only inside the support).
    pub fn grad_log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } | Prior::TruncatedNormal { mean, sd, .. } => {
                -(x - mean) / (sd * sd)
            }
            Prior::Uniform { .. } => 0.0,
            Prior::Exponential { rate } => -rate,
            Prior::InverseGamma { shape, scale } => -(shape + 1.0) / x + scale / (x * x),
        }
    }

    /// Draw one value (used for chain initialization and synthetic truths).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => {
                rand_distr::Normal::new(mean, sd).expect("validated").sample(rng)
            }
            Prior::TruncatedNormal { mean, sd, lo, hi } => {
                let d = rand_distr::Normal::new(mean, sd).expect("validated");
                for _ in 0..10_000 {
                    let x = d.sample(rng);
                    if x >= lo && x <= hi {
                        return x;
                    }
                }
                // Pathologically narrow truncation: fall back to the midpoint.
                0.5 * (lo + hi)
            }
            Prior::Uniform { lo, hi } => rng.random_range(lo..hi),
            Prior::Exponential { rate } => {
                rand_distr::Exp::new(rate).expect("validated").sample(rng)
            }
            Prior::InverseGamma { shape, scale } => {
                let g = rand_distr::Gamma::new(shape, 1.0 / scale).expect("validated");
                1.0 / g.sample(rng)
            }
        }
    }
}

/// Whether the configured tau prior density applies to tau itself or to
/// tau^2 (the variance of the random-walk increments).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauScale {
    #[default]
    TauSquared,
    Tau,
}

/// One prior per sampled parameter, plus the smoothness-penalty order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub alpha: Option<Prior>,
    pub gamma: Prior,
    pub seed0: Prior,
    pub phi_inv: Prior,
    pub tau: Prior,
    #[serde(default)]
    pub tau_scale: TauScale,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

fn default_penalty_order() -> usize {
    2
}

impl PriorConfig {
    /// Priors tuned for the bundled two-wave synthetic benchmark.
    pub fn synthetic_benchmark(family: ModelFamily) -> Self {
        Self {
            alpha: match family {
                ModelFamily::Semikr => Some(Prior::Normal {
                    mean: 0.5,
                    sd: 0.05,
                }),
                ModelFamily::Sikr => None,
            },
            gamma: Prior::Uniform {
                lo: 0.095,
                hi: 0.105,
            },
            seed0: Prior::Normal { mean: 10.0, sd: 1.0 },
            phi_inv: Prior::Exponential { rate: 10.0 },
            tau: Prior::InverseGamma {
                shape: 1.0,
                scale: 0.005,
            },
            tau_scale: TauScale::default(),
            penalty_order: 2,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<(), PosteriorError> {
        match (spec.family, &self.alpha) {
            (ModelFamily::Semikr, Some(p)) => p.validate()?,
            (ModelFamily::Sikr, None) => {}
            _ => return Err(PosteriorError::AlphaMismatch),
        }
        self.gamma.validate()?;
        self.seed0.validate()?;
        self.phi_inv.validate()?;
        self.tau.validate()?;
        if self.penalty_order == 0 || self.penalty_order >= spec.n_coeffs() {
            return Err(PosteriorError::BadPrior(format!(
                "penalty order {} out of range for {} coefficients",
                self.penalty_order,
                spec.n_coeffs()
            )));
        }
        Ok(())
    }

    /// Log prior density of tau in tau-space, honoring `tau_scale`.
    pub fn log_density_tau(&self, tau: f64) -> f64 {
        match self.tau_scale {
            TauScale::Tau => self.tau.log_density(tau),
            // Change of variables: p(tau) = p_prior(tau^2) * 2 tau.
            TauScale::TauSquared => {
                if !(tau > 0.0) {
                    return f64::NEG_INFINITY;
                }
                self.tau.log_density(tau * tau) + (2.0 * tau).ln()
            }
        }
    }

    /// d/d tau of `log_density_tau`.
    pub fn grad_log_density_tau(&self, tau: f64) -> f64 {
        match self.tau_scale {
            TauScale::Tau => self.tau.grad_log_density(tau),
            TauScale::TauSquared => self.tau.grad_log_density(tau * tau) * 2.0 * tau + 1.0 / tau,
        }
    }
}

/// `log P(k | mean, phi)` for the Negative Binomial with mean `mean`,
/// variance `mean + mean^2 / phi`, generalized to real-valued `k` through
/// the gamma function (effective counts are rarely integers).
pub fn neg_binom_logpmf(k: f64, mean: f64, phi: f64) -> Result<f64, PosteriorError> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(PosteriorError::BadMean(mean));
    }
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(PosteriorError::BadDispersion(phi));
    }
    if !(k >= 0.0) || !k.is_finite() {
        return Err(PosteriorError::BadCount(k));
    }
    Ok(ln_gamma(k + phi) - ln_gamma(phi) - ln_gamma(k + 1.0)
        + k * (mean / (mean + phi)).ln()
        + phi * (phi / (mean + phi)).ln())
}

/// One Negative Binomial draw via the gamma–Poisson mixture.
pub fn neg_binom_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64, phi: f64) -> u64 {
    debug_assert!(mean > 0.0 && phi > 0.0);
    let lambda = rand_distr::Gamma::new(phi, mean / phi)
        .expect("positive parameters")
        .sample(rng);
    if !(lambda > 0.0) || !lambda.is_finite() {
        return 0;
    }
    rand_distr::Poisson::new(lambda)
        .expect("positive rate")
        .sample(rng) as u64
}

/// Sum of daily Negative Binomial log-probabilities of the observed counts
/// given model incidence.
pub fn log_likelihood(
    data: &IncidenceSeries,
    incidence: &[f64],
    phi: f64,
) -> Result<f64, PosteriorError> {
    if incidence.len() != data.len() {
        return Err(PosteriorError::LengthMismatch {
            got: incidence.len(),
            want: data.len(),
        });
    }
    let mut total = 0.0;
    for (j, &inc) in incidence.iter().enumerate() {
        let term = neg_binom_logpmf(data.effective_count(j), inc + MEAN_FLOOR, phi).map_err(
            |source| PosteriorError::LikelihoodDay {
                day: j + 1,
                source: Box::new(source),
            },
        )?;
        total += term;
    }
    Ok(total)
}

/// Scalar priors plus the spline smoothness term.
pub fn log_prior(
    p: &ParamVector,
    priors: &PriorConfig,
    penalty: &PenaltyMatrix,
) -> Result<f64, PosteriorError> {
    let out_of = |param: &str| PosteriorError::OutOfSupport {
        param: param.to_string(),
    };
    let mut total = 0.0;
    if let Some(alpha_prior) = &priors.alpha {
        let v = alpha_prior.log_density(p.alpha().expect("layout checked at construction"));
        if v == f64::NEG_INFINITY {
            return Err(out_of("alpha"));
        }
        total += v;
    }
    for (name, prior, value) in [
        ("gamma", &priors.gamma, p.gamma()),
        ("seed0", &priors.seed0, p.seed0()),
        ("phi_inv", &priors.phi_inv, p.phi_inv()),
    ] {
        let v = prior.log_density(value);
        if v == f64::NEG_INFINITY {
            return Err(out_of(name));
        }
        total += v;
    }
    let tau = p.tau();
    let v = priors.log_density_tau(tau);
    if v == f64::NEG_INFINITY || !(tau > 0.0) {
        return Err(out_of("tau"));
    }
    total += v;

    // Partially improper Gaussian on the spline coefficients: only the
    // rank-(m - q) part carries normalization in tau.
    let quad = penalty.quad_form(p.beta());
    let rank = penalty.rank() as f64;
    total += -quad / (2.0 * tau * tau) - rank * tau.ln();
    Ok(total)
}

/// A fully-wired posterior: data, priors, penalty, and solver tolerances.
///
/// Evaluation is pure, so one `Posterior` can serve many chains at once.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a IncidenceSeries,
    pub priors: &'a PriorConfig,
    penalty: PenaltyMatrix,
    tol: Tolerances,
    /// Negative-control hook forwarded to the sensitivity system.
    pub jacobian_fuzz: f64,
}

impl<'a> Posterior<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        data: &'a IncidenceSeries,
        priors: &'a PriorConfig,
        tol: Tolerances,
    ) -> Result<Self, PosteriorError> {
        spec.validate()?;
        priors.validate(spec)?;
        if data.len() != spec.horizon {
            return Err(PosteriorError::LengthMismatch {
                got: spec.horizon,
                want: data.len(),
            });
        }
        let penalty = PenaltyMatrix::new(spec.n_coeffs(), priors.penalty_order)?;
        Ok(Self {
            spec,
            data,
            priors,
            penalty,
            tol,
            jacobian_fuzz: 0.0,
        })
    }

    pub fn penalty(&self) -> &PenaltyMatrix {
        &self.penalty
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    fn check_support(&self, p: &ParamVector) -> Result<(), PosteriorError> {
        p.validate_feasible(self.spec).map_err(|e| {
            // Infeasible points (seed outside (0, N), non-positive rates) are
            // zero-density, not crashes.
            PosteriorError::OutOfSupport {
                param: e.to_string(),
            }
        })?;
        // A subnormal phi_inv passes the positivity check but its reciprocal
        // overflows, so the dispersion cannot be represented; the density
        // there is far below working precision and the point is rejected.
        if !p.phi().is_finite() {
            return Err(PosteriorError::OutOfSupport {
                param: format!("phi_inv {} has non-finite reciprocal", p.phi_inv()),
            });
        }
        Ok(())
    }

    /// Log-posterior value only (one plain ODE solve).
    pub fn log_posterior(&self, p: &ParamVector) -> Result<f64, PosteriorError> {
        self.check_support(p)?;
        let prior = log_prior(p, self.priors, &self.penalty)?;
        let traj = integrate(self.spec, p, &self.tol).map_err(invalid)?;
        let inc = daily_incidence(&traj);
        let like = log_likelihood(self.data, &inc.values, p.phi())?;
        Ok(like + prior)
    }

    /// Log-posterior and its gradient in the natural parameterization (one
    /// extended ODE solve carrying all sensitivity columns).
    pub fn log_posterior_and_gradient(
        &self,
        p: &ParamVector,
    ) -> Result<(f64, Vec<f64>), PosteriorError> {
        self.check_support(p)?;
        let prior = log_prior(p, self.priors, &self.penalty)?;

        let opts = SensitivityOptions {
            tol: self.tol,
            param_jacobian_fuzz: self.jacobian_fuzz,
        };
        let ext = integrate_extended(self.spec, p, &opts).map_err(invalid)?;

        let spec = self.spec;
        let n = self.data.len();
        let phi = p.phi();
        let counter = spec.idx_counter();

        let mut like = 0.0;
        let mut dl_dphi = 0.0;
        let mut grad = vec![0.0; spec.n_params()];

        for j in 0..n {
            let raw = ext.states[j + 1][counter] - ext.states[j][counter];
            let mean = raw.max(0.0) + MEAN_FLOOR;
            let k = self.data.effective_count(j);
            like += neg_binom_logpmf(k, mean, phi).map_err(|source| {
                PosteriorError::LikelihoodDay {
                    day: j + 1,
                    source: Box::new(source),
                }
            })?;

            // d log pmf / d mean and d log pmf / d phi for this day.
            let dl_dc = k / mean - (k + phi) / (mean + phi);
            dl_dphi += digamma(k + phi) - digamma(phi) + (mean - k) / (mean + phi) + phi.ln()
                - (mean + phi).ln();

            for col in 0..ext.n_dynamic {
                let ds = ext.counter_sensitivity(j + 1, col) - ext.counter_sensitivity(j, col);
                grad[spec.dynamic_to_flat(col)] += dl_dc * ds;
            }
        }

        let layout = spec.layout();
        // Dispersion is sampled as phi_inv: chain through phi = 1 / phi_inv.
        let phi_inv = p.phi_inv();
        grad[layout.phi_inv] = -dl_dphi * phi * phi;
        grad[layout.phi_inv] += self.priors.phi_inv.grad_log_density(phi_inv);

        // Scalar prior gradients for the dynamic parameters.
        if let (Some(idx), Some(prior)) = (layout.alpha, &self.priors.alpha) {
            grad[idx] += prior.grad_log_density(p.alpha().expect("semikr"));
        }
        grad[layout.gamma] += self.priors.gamma.grad_log_density(p.gamma());
        grad[layout.seed0] += self.priors.seed0.grad_log_density(p.seed0());

        // Smoothness block: d/d beta of -beta' K beta / (2 tau^2) and the
        // tau gradient of the same term plus its normalization and prior.
        let tau = p.tau();
        let quad = self.penalty.quad_form(p.beta());
        let mut kb = vec![0.0; spec.n_coeffs()];
        self.penalty.mat_vec(p.beta(), &mut kb);
        for (i, &kbi) in kb.iter().enumerate() {
            grad[layout.beta_start + i] -= kbi / (tau * tau);
        }
        grad[layout.tau] = quad / (tau * tau * tau) - self.penalty.rank() as f64 / tau
            + self.priors.grad_log_density_tau(tau);

        Ok((like + prior, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnderReporting;
    use crate::model::ModelFamily;
    use crate::ode::tests::{sei3r_spec, synth_params, SYNTH_BETA};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digamma_backing_matches_reference_values() {
        // Frozen high-precision values for the special-function dependency.
        assert_abs_diff_eq!(digamma(1.0), -0.577_215_664_901_532_9, epsilon = 1e-12);
        assert_abs_diff_eq!(digamma(0.5), -1.963_510_026_021_423_5, epsilon = 1e-12);
        assert_abs_diff_eq!(digamma(10.0), 2.251_752_589_066_721, epsilon = 1e-12);
        assert_abs_diff_eq!(ln_gamma(5.0), 24.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn neg_binom_geometric_special_cases() {
        assert_abs_diff_eq!(
            neg_binom_logpmf(0.0, 1.0, 1.0).unwrap(),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            neg_binom_logpmf(2.0, 1.0, 1.0).unwrap(),
            0.125f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn neg_binom_pmf_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..5 {
            let mean: f64 = rng.random_range(0.5..40.0);
            let phi: f64 = rng.random_range(0.3..20.0);
            let sd = (mean + mean * mean / phi).sqrt();
            let k_max = (mean + 40.0 * sd).ceil() as u64 + 300;
            let total: f64 = (0..=k_max)
                .map(|k| neg_binom_logpmf(k as f64, mean, phi).unwrap().exp())
                .sum();
            assert!(
                (total - 1.0).abs() < 1e-8,
                "pmf total {total} for mean {mean}, phi {phi}"
            );
        }
    }

    #[test]
    fn neg_binom_rejects_bad_arguments() {
        assert!(matches!(
            neg_binom_logpmf(1.0, 0.0, 1.0),
            Err(PosteriorError::BadMean(_))
        ));
        assert!(matches!(
            neg_binom_logpmf(1.0, 1.0, -2.0),
            Err(PosteriorError::BadDispersion(_))
        ));
        assert!(matches!(
            neg_binom_logpmf(-1.0, 1.0, 1.0),
            Err(PosteriorError::BadCount(_))
        ));
    }

    #[test]
    fn neg_binom_sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mean, phi) = (50.0, 10.0);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = neg_binom_sample(&mut rng, mean, phi) as f64;
            sum += x;
            sum_sq += x * x;
        }
        let emp_mean = sum / n as f64;
        let emp_var = sum_sq / n as f64 - emp_mean * emp_mean;
        let want_var = mean + mean * mean / phi; // 300
        let se_mean = want_var.sqrt() / (n as f64).sqrt();
        assert!(
            (emp_mean - mean).abs() < 3.0 * se_mean,
            "mean {emp_mean} vs {mean}"
        );
        assert!(
            (emp_var - want_var).abs() < 0.02 * want_var,
            "variance {emp_var} vs {want_var}"
        );
    }

    #[test]
    fn prior_densities_match_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for _ in 0..100 {
            let x: f64 = rng.random_range(0.01..5.0);

            let n = Prior::Normal { mean: 1.0, sd: 0.7 };
            let want = (-0.5 * ((x - 1.0) / 0.7_f64).powi(2)).exp()
                / (0.7 * (2.0 * std::f64::consts::PI).sqrt());
            assert_abs_diff_eq!(n.log_density(x), want.ln(), epsilon = 1e-10);

            let e = Prior::Exponential { rate: 1.3 };
            assert_abs_diff_eq!(e.log_density(x), (1.3 * (-1.3 * x).exp()).ln(), epsilon = 1e-10);

            let ig = Prior::InverseGamma {
                shape: 2.0,
                scale: 0.5,
            };
            // b^a / Gamma(a) x^(-a-1) e^(-b/x) with Gamma(2) = 1.
            let want = 0.25 * x.powf(-3.0) * (-0.5 / x).exp();
            assert_abs_diff_eq!(ig.log_density(x), want.ln(), epsilon = 1e-10);

            let u = Prior::Uniform { lo: 0.0, hi: 5.0 };
            assert_abs_diff_eq!(u.log_density(x), (0.2f64).ln(), epsilon = 1e-12);

            let tn = Prior::TruncatedNormal {
                mean: 1.0,
                sd: 2.0,
                lo: 0.0,
                hi: 5.0,
            };
            let mass = normal_cdf(2.0) - normal_cdf(-0.5);
            let dens = (-0.5 * ((x - 1.0) / 2.0_f64).powi(2)).exp()
                / (2.0 * (2.0 * std::f64::consts::PI).sqrt())
                / mass;
            assert_abs_diff_eq!(tn.log_density(x), dens.ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        let priors = [
            Prior::Normal { mean: 0.5, sd: 0.05 },
            Prior::TruncatedNormal {
                mean: 0.1,
                sd: 0.015,
                lo: 1.0 / 30.0,
                hi: 1.0,
            },
            Prior::Uniform { lo: 0.05, hi: 0.2 },
            Prior::Exponential { rate: 10.0 },
            Prior::InverseGamma {
                shape: 1.0,
                scale: 0.005,
            },
        ];
        for prior in priors {
            for x in [0.06, 0.09, 0.12, 0.15] {
                let h = 1e-7;
                let fd = (prior.log_density(x + h) - prior.log_density(x - h)) / (2.0 * h);
                assert_abs_diff_eq!(prior.grad_log_density(x), fd, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn out_of_support_is_classified_not_nan() {
        let tn = Prior::TruncatedNormal {
            mean: 0.1,
            sd: 0.015,
            lo: 1.0 / 30.0,
            hi: 1.0,
        };
        assert_eq!(tn.log_density(0.02), f64::NEG_INFINITY);

        let spec = sei3r_spec();
        let priors = PriorConfig {
            gamma: tn,
            ..PriorConfig::synthetic_benchmark(ModelFamily::Semikr)
        };
        let penalty = PenaltyMatrix::new(12, 2).unwrap();
        let p =
            ParamVector::from_parts(&spec, Some(0.5), 0.02, 10.0, 0.1, 0.05, &SYNTH_BETA).unwrap();
        match log_prior(&p, &priors, &penalty) {
            Err(PosteriorError::OutOfSupport { param }) => assert_eq!(param, "gamma"),
            other => panic!("expected out-of-support, got {other:?}"),
        }
    }

    #[test]
    fn tau_scale_switch_changes_the_density() {
        let base = PriorConfig::synthetic_benchmark(ModelFamily::Semikr);
        let on_tau = PriorConfig {
            tau_scale: TauScale::Tau,
            ..base.clone()
        };
        let tau = 0.07;
        // tau^2 placement: density of tau^2 times the Jacobian 2 tau.
        assert_abs_diff_eq!(
            base.log_density_tau(tau),
            base.tau.log_density(tau * tau) + (2.0 * tau).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            on_tau.log_density_tau(tau),
            base.tau.log_density(tau),
            epsilon = 1e-12
        );
        // And both gradients agree with finite differences.
        for cfg in [&base, &on_tau] {
            let h = 1e-7;
            let fd = (cfg.log_density_tau(tau + h) - cfg.log_density_tau(tau - h)) / (2.0 * h);
            assert_abs_diff_eq!(cfg.grad_log_density_tau(tau), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn constant_coefficients_leave_only_the_normalization() {
        let spec = sei3r_spec();
        let priors = PriorConfig::synthetic_benchmark(ModelFamily::Semikr);
        let penalty = PenaltyMatrix::new(12, 2).unwrap();
        let flat = ParamVector::from_parts(&spec, Some(0.5), 0.1, 10.0, 0.1, 0.05, &[-1.6; 12])
            .unwrap();
        let bumpy =
            ParamVector::from_parts(&spec, Some(0.5), 0.1, 10.0, 0.1, 0.05, &SYNTH_BETA).unwrap();
        let lp_flat = log_prior(&flat, &priors, &penalty).unwrap();
        let lp_bumpy = log_prior(&bumpy, &priors, &penalty).unwrap();
        // The flat curve pays no quadratic penalty, so it scores higher.
        assert!(lp_flat > lp_bumpy);

        // Shifting all coefficients by a constant changes nothing in the prior.
        let shifted: Vec<f64> = SYNTH_BETA.iter().map(|b| b + 0.9).collect();
        let p_shift =
            ParamVector::from_parts(&spec, Some(0.5), 0.1, 10.0, 0.1, 0.05, &shifted).unwrap();
        assert_abs_diff_eq!(
            log_prior(&p_shift, &priors, &penalty).unwrap(),
            lp_bumpy,
            epsilon = 1e-9
        );
    }

    fn synthetic_series(spec: &ModelSpec) -> IncidenceSeries {
        // Deterministic pseudo-data: rounded model incidence at the
        // generator parameters.
        let p = synth_params(spec);
        let traj = integrate(spec, &p, &Tolerances::default()).unwrap();
        let counts = daily_incidence(&traj)
            .values
            .iter()
            .map(|v| v.round() as u64)
            .collect();
        IncidenceSeries::new(None, counts, UnderReporting::full()).unwrap()
    }

    #[test]
    fn log_likelihood_is_deterministic_and_finite() {
        let spec = sei3r_spec();
        let data = synthetic_series(&spec);
        let p = synth_params(&spec);
        let traj = integrate(&spec, &p, &Tolerances::default()).unwrap();
        let inc = daily_incidence(&traj);
        let a = log_likelihood(&data, &inc.values, p.phi()).unwrap();
        let b = log_likelihood(&data, &inc.values, p.phi()).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b, "same inputs must give bit-identical likelihoods");
        // Counts near the model's own incidence score better than shifted ones.
        let shifted: Vec<f64> = inc.values.iter().map(|v| v * 1.5 + 3.0).collect();
        assert!(a > log_likelihood(&data, &shifted, p.phi()).unwrap());
    }

    #[test]
    fn halving_eta_doubles_effective_counts() {
        let half = IncidenceSeries::new(
            None,
            vec![10, 20],
            UnderReporting::constant(0.5).unwrap(),
        )
        .unwrap();
        let full = IncidenceSeries::new(None, vec![20, 40], UnderReporting::full()).unwrap();
        let inc = [25.0, 37.0];
        assert_abs_diff_eq!(
            log_likelihood(&half, &inc, 10.0).unwrap(),
            log_likelihood(&full, &inc, 10.0).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gradient_matches_finite_differences_of_the_value() {
        let spec = sei3r_spec();
        let data = synthetic_series(&spec);
        let priors = PriorConfig::synthetic_benchmark(ModelFamily::Semikr);
        // atol is population-scaled, so it must go well below the default to
        // keep the absolute error floor under the comparison threshold.
        let tight = Tolerances {
            rtol: 1e-10,
            atol_scale: 1e-12,
        };
        let post = Posterior::new(&spec, &data, &priors, tight).unwrap();
        let p = synth_params(&spec);
        let (value, grad) = post.log_posterior_and_gradient(&p).unwrap();
        assert!(value.is_finite());

        for fi in 0..spec.n_params() {
            let base = p.as_slice()[fi];
            let h = 1e-5 * base.abs().max(1.0);
            let mut up = p.as_slice().to_vec();
            up[fi] += h;
            let mut dn = p.as_slice().to_vec();
            dn[fi] -= h;
            let vp = post
                .log_posterior(&ParamVector::from_flat(&spec, up).unwrap())
                .unwrap();
            let vm = post
                .log_posterior(&ParamVector::from_flat(&spec, dn).unwrap())
                .unwrap();
            let fd = (vp - vm) / (2.0 * h);
            let err = (grad[fi] - fd).abs() / (1.0 + grad[fi].abs().max(fd.abs()));
            assert!(
                err <= 1e-4,
                "component {fi}: analytic {} vs fd {fd} (rel {err:e})",
                grad[fi]
            );
        }
    }

    #[test]
    fn tau_gradient_is_prior_only() {
        // tau never touches the ODE or the likelihood: its gradient must be
        // independent of the data.
        let spec = sei3r_spec();
        let data = synthetic_series(&spec);
        let mut other_counts = data.counts.clone();
        for c in other_counts.iter_mut() {
            *c = *c * 2 + 7;
        }
        let other = IncidenceSeries::new(None, other_counts, UnderReporting::full()).unwrap();
        let priors = PriorConfig::synthetic_benchmark(ModelFamily::Semikr);
        let tol = Tolerances::default();
        let post_a = Posterior::new(&spec, &data, &priors, tol).unwrap();
        let post_b = Posterior::new(&spec, &other, &priors, tol).unwrap();
        let p = synth_params(&spec);
        let (_, grad_a) = post_a.log_posterior_and_gradient(&p).unwrap();
        let (_, grad_b) = post_b.log_posterior_and_gradient(&p).unwrap();
        let tau_idx = spec.layout().tau;
        assert_abs_diff_eq!(grad_a[tau_idx], grad_b[tau_idx], epsilon = 1e-9);
    }

    #[test]
    fn infeasible_points_are_rejections_not_errors() {
        let spec = sei3r_spec();
        let data = synthetic_series(&spec);
        let priors = PriorConfig::synthetic_benchmark(ModelFamily::Semikr);
        let post = Posterior::new(&spec, &data, &priors, Tolerances::default()).unwrap();
        let p = ParamVector::from_parts(
            &spec,
            Some(0.5),
            0.1,
            spec.population * 2.0, // seed beyond the population
            0.1,
            0.05,
            &SYNTH_BETA,
        )
        .unwrap();
        let err = post.log_posterior(&p).unwrap_err();
        assert!(err.is_rejection(), "got non-rejection error {err:?}");
    }

    #[test]
    fn posterior_requires_matching_data_length() {
        let spec = sei3r_spec();
        let short = IncidenceSeries::new(None, vec![5; 40], UnderReporting::full()).unwrap();
        let priors = PriorConfig::synthetic_benchmark(ModelFamily::Semikr);
        assert!(matches!(
            Posterior::new(&spec, &short, &priors, Tolerances::default()),
            Err(PosteriorError::LengthMismatch { .. })
        ));
    }
}
