//! Posterior sampling: warm start, settings adaptation, and multi-chain
//! generalized HMC.
//!
//! Chains are fully independent — one master seed spawns one RNG stream per
//! chain — and run in parallel when the `parallel` feature is on. Results
//! are bit-identical either way.

pub mod adapt;
pub mod ascent;
pub mod ghmc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adapt::{
    adapt_settings, regularized_inverse_variances, settings_from_pilot, AdaptOptions,
    AdaptReport, DualAveraging, PilotStats,
};
pub use ascent::{gradient_ascent, AscentResult};
pub use ghmc::{
    ghmc_step, leapfrog, AcceptMomentum, DiagGaussian, GhmcState, HmcSettings, StepInfo, Target,
    TargetEval,
};

use crate::data::IncidenceSeries;
use crate::model::{ModelSpec, ParamVector};
use crate::ode::Tolerances;
use crate::par::par_map;
use crate::posterior::{Posterior, PriorConfig};
use crate::transform::UnconstrainedPosterior;
use serde::{Deserialize, Serialize};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("target evaluation failed: {0}")]
    Target(String),
    #[error("invalid starting point: {0}")]
    InitInvalid(String),
    #[error("bad sampler settings: {0}")]
    BadSettings(String),
    #[error("pilot run degenerated to all rejections")]
    DegeneratePilot,
    #[error("adaptation failed after {attempts} attempts (last step size {last_step_size:.3e})")]
    AdaptationFailed { attempts: usize, last_step_size: f64 },
    #[error("gradient ascent found no valid step after 30 straight halvings near {at:?}")]
    AscentStuck { at: Vec<f64> },
    #[error("all {0} chains failed")]
    AllChainsFailed(usize),
}

impl Target for UnconstrainedPosterior<'_> {
    fn dim(&self) -> usize {
        self.transform.dim()
    }

    fn eval(&self, z: &[f64]) -> Result<TargetEval, SamplerError> {
        match self.log_density_and_gradient(z) {
            Ok(Some((logp, grad))) => Ok(TargetEval::Value { logp, grad }),
            Ok(None) => Ok(TargetEval::Invalid),
            Err(e) => Err(SamplerError::Target(e.to_string())),
        }
    }
}

/// Warm-start configuration: plain gradient ascent before adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStart {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            learning_rate: 1e-7,
            steps: 300,
        }
    }
}

/// Everything one finished chain produced.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub chain_index: usize,
    /// Production draws, in the natural parameterization.
    pub draws: Vec<ParamVector>,
    /// Unconstrained-space log density (with Jacobian) per draw.
    pub log_density: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Energy change per production step.
    pub delta_h: Vec<f64>,
    /// Invalid trajectories across burn-in and production.
    pub n_integration_failures: usize,
    /// The tuned settings the chain ran with.
    pub settings: HmcSettings,
    pub adapt_report: AdaptReport,
}

impl ChainOutput {
    pub fn accept_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return f64::NAN;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }
}

/// A chain that aborted, with enough context to reproduce it.
#[derive(Debug, Clone)]
pub struct ChainFailure {
    pub chain_index: usize,
    pub rng_seed: u64,
    pub stream: u64,
    pub phase: &'static str,
    pub message: String,
}

/// All chains of one run; aborted chains are reported, finished ones kept.
#[derive(Debug, Clone)]
pub struct ChainSet {
    pub chains: Vec<ChainOutput>,
    pub failures: Vec<ChainFailure>,
}

impl ChainSet {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// The series of one flat parameter, per chain.
    pub fn parameter_series(&self, flat_index: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d.as_slice()[flat_index]).collect())
            .collect()
    }

    /// All chains' draws of one flat parameter concatenated.
    pub fn pooled(&self, flat_index: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(|d| d.as_slice()[flat_index]))
            .collect()
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }
}

///// Draw a chain's starting point: rate and seed parameters from their
/// priors, dispersion started near the data (phi_inv = 0.005), a moderate
/// smoothness scale, and a flat log-transmission curve.
pub fn initial_point<R: Rng + ?Sized>(
    spec: &ModelSpec,
    priors: &PriorConfig,
    rng: &mut R,
) -> ParamVector {
    fn positive_draw<R: Rng + ?Sized>(
        prior: &crate::posterior::Prior,
        hi: f64,
        fallback: f64,
        rng: &mut R,
    ) -> f64 {
        for _ in 0..1000 {
            let x = prior.sample(rng);
            if x.is_finite() && x > 0.0 && x < hi {
                return x;
            }
        }
        fallback
    }
    let alpha = priors
        .alpha
        .as_ref()
        .map(|pr| positive_draw(pr, f64::INFINITY, 0.5, rng));
    let gamma = positive_draw(&priors.gamma, f64::INFINITY, 0.1, rng);
    let seed0 = positive_draw(&priors.seed0, spec.population, 1.0, rng);
    let beta = vec![-1.6; spec.n_coeffs()];
    ParamVector::from_parts(spec, alpha, gamma, seed0, 0.005, 0.1, &beta)
        .expect("layout matches the spec by construction")
}

fn run_single_chain(
    target: &UnconstrainedPosterior<'_>,
    chain_index: usize,
    settings: &HmcSettings,
    warm: &WarmStart,
    adapt_opts: &AdaptOptions,
) -> Result<ChainOutput, ChainFailure> {
    let stream = chain_index as u64 + 1;
    let fail = |phase: &'static str, message: String| ChainFailure {
        chain_index,
        rng_seed: settings.rng_seed,
        stream,
        phase,
        message,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.rng_seed);
    rng.set_stream(stream);

    let p0 = initial_point(target.posterior.spec, target.posterior.priors, &mut rng);
    let z0 = target
        .transform
        .to_unconstrained(p0.as_slice())
        .map_err(|e| fail("init", e.to_string()))?;

    let asc = gradient_ascent(target, &z0, warm.learning_rate, warm.steps)
        .map_err(|e| fail("warm start", e.to_string()))?;
    log::info!(
        "chain {chain_index} warm start: logp {:.3} after {} kept steps",
        asc.logp,
        asc.kept_steps
    );

    let (tuned, mut state, report) =
        adapt_settings(target, &asc.z, settings, adapt_opts, &mut rng)
            .map_err(|e| fail("adaptation", e.to_string()))?;
    let mass = tuned
        .mass_for_dim(target.transform.dim())
        .map_err(|e| fail("adaptation", e.to_string()))?;
    log::info!(
        "chain {chain_index} adapted: h {:.4e}, L {}, pilot acceptance {:.3}, fallbacks {}",
        tuned.step_size,
        tuned.leaps_per_proposal,
        report.pilot_accept_rate,
        report.fallbacks
    );

    let mut n_failures = 0usize;
    for step in 0..tuned.n_burnin {
        let info = ghmc_step(target, &mut state, &tuned, &mass, &mut rng)
            .map_err(|e| fail("burn-in", e.to_string()))?;
        if info.divergent {
            n_failures += 1;
        }
        if (step + 1) % 200 == 0 {
            log::info!(
                "chain {chain_index} burn-in step {} logp {:.3}",
                step + 1,
                state.logp
            );
        }
    }

    let n = tuned.n_production;
    let mut draws = Vec::with_capacity(n);
    let mut log_density = Vec::with_capacity(n);
    let mut accepted = Vec::with_capacity(n);
    let mut delta_h = Vec::with_capacity(n);
    let mut running_accept = 0.0;
    for step in 0..n {
        let info = ghmc_step(target, &mut state, &tuned, &mass, &mut rng)
            .map_err(|e| fail("production", e.to_string()))?;
        if info.divergent {
            n_failures += 1;
        }
        running_accept += info.accepted as u8 as f64;
        let natural = target
            .transform
            .to_natural(&state.z)
            .map_err(|e| fail("production", e.to_string()))?;
        let p = ParamVector::from_flat(target.posterior.spec, natural)
            .map_err(|e| fail("production", e.to_string()))?;
        draws.push(p);
        log_density.push(state.logp);
        accepted.push(info.accepted);
        delta_h.push(info.delta_h);
        if (step + 1) % 200 == 0 {
            log::info!(
                "chain {chain_index} production step {} logp {:.3} acceptance {:.3}",
                step + 1,
                state.logp,
                running_accept / (step + 1) as f64
            );
        }
    }

    Ok(ChainOutput {
        chain_index,
        draws,
        log_density,
        accepted,
        delta_h,
        n_integration_failures: n_failures,
        settings: tuned,
        adapt_report: report,
    })
}

/// Fit the posterior with `settings.n_chains` independent chains: prior draw
/// -> gradient-ascent warm start -> adaptation -> burn-in -> production.
///
/// Aborting chains are reported in `failures` while the remaining chains are
/// returned; only a full wipe-out is an error. Deterministic for fixed
/// (seed, settings, tolerances), with or without the `parallel` feature.
pub fn run_chains(
    spec: &ModelSpec,
    data: &IncidenceSeries,
    priors: &PriorConfig,
    settings: &HmcSettings,
    warm: &WarmStart,
    tol: Tolerances,
) -> Result<ChainSet, SamplerError> {
    settings.validate()?;
    let posterior = Posterior::new(spec, data, priors, tol)
        .map_err(|e| SamplerError::BadSettings(e.to_string()))?;
    let target = UnconstrainedPosterior::new(posterior);
    let adapt_opts = AdaptOptions::default();

    let results = par_map((0..settings.n_chains).collect(), |chain_index| {
        run_single_chain(&target, chain_index, settings, warm, &adapt_opts)
    });

    let mut chains = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => chains.push(c),
            Err(f) => {
                log::error!(
                    "chain {} failed during {} (seed {}, stream {}): {}",
                    f.chain_index,
                    f.phase,
                    f.rng_seed,
                    f.stream,
                    f.message
                );
                failures.push(f);
            }
        }
    }
    if chains.is_empty() {
        return Err(SamplerError::AllChainsFailed(settings.n_chains));
    }
    Ok(ChainSet { chains, failures })
}
