//! Convergence diagnostics, posterior summaries of the transmission-rate and
//! reproduction-number curves, and posterior predictive simulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::IncidenceSeries;
use crate::model::ModelSpec;
use crate::ode::{daily_incidence, integrate, Tolerances};
use crate::par::par_map;
use crate::posterior::{neg_binom_sample, MEAN_FLOOR};
use crate::sampler::ChainSet;
use crate::spline::Basis;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {want} chains, got {got}")]
    TooFewChains { got: usize, want: usize },
    #[error("need at least {want} draws per chain, got {got}")]
    TooFewDraws { got: usize, want: usize },
    #[error("chains have unequal lengths")]
    UnequalLengths,
    #[error("no draws to summarize")]
    EmptyDraws,
    #[error(transparent)]
    Spline(#[from] crate::spline::SplineError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Potential scale reduction of one parameter; degenerate marks chains whose
/// within-chain variance vanishes (the formula would divide by zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rhat {
    Value(f64),
    Degenerate,
}

impl Rhat {
    pub fn value(&self) -> Option<f64> {
        match self {
            Rhat::Value(v) => Some(*v),
            Rhat::Degenerate => None,
        }
    }

    /// Degenerate chains are trivially "converged" only when truly constant;
    /// we treat them as not passing a threshold check.
    pub fn below(&self, threshold: f64) -> bool {
        matches!(self, Rhat::Value(v) if *v < threshold)
    }
}

impl std::fmt::Display for Rhat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rhat::Value(v) => write!(f, "{v:.6}"),
            Rhat::Degenerate => write!(f, "degenerate"),
        }
    }
}

fn check_chains(chains: &[Vec<f64>], min_len: usize) -> Result<usize, DiagnosticsError> {
    if chains.len() < 2 {
        return Err(DiagnosticsError::TooFewChains {
            got: chains.len(),
            want: 2,
        });
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticsError::UnequalLengths);
    }
    if n < min_len {
        return Err(DiagnosticsError::TooFewDraws {
            got: n,
            want: min_len,
        });
    }
    Ok(n)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// The raw (unsplit) potential scale reduction
/// `sqrt(((n-1)/n * W + B/n) / W)`.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> Result<Rhat, DiagnosticsError> {
    let n = check_chains(chains, 4)? as f64;
    let m = chains.len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| sample_variance(c, mu))
        .sum::<f64>()
        / m;
    let grand = mean(&means);
    let b = n * sample_variance(&means, grand);
    if !(w > 0.0) || !w.is_finite() {
        return Ok(Rhat::Degenerate);
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok(Rhat::Value((var_plus / w).sqrt()))
}

/// Split potential scale reduction: every chain is halved and the raw
/// statistic computed over the half-chains. Detects within-chain trends the
/// raw statistic is blind to, at the price of being strictly more
/// conservative.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<Rhat, DiagnosticsError> {
    let n = check_chains(chains, 8)?;
    let half = n / 2;
    let mut split: Vec<Vec<f64>> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        // Equal halves; with odd n the middle draw is dropped.
        split.push(c[..half].to_vec());
        split.push(c[n - half..].to_vec());
    }
    potential_scale_reduction(&split)
}

/// Effective sample size of one series from its autocorrelation function,
/// truncated by Geyer's initial positive-sequence rule (sum adjacent
/// autocorrelation pairs while the pair sums stay positive).
pub fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return f64::NAN;
    }
    let mu = mean(x);
    let c0: f64 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) || !c0.is_finite() {
        return f64::NAN;
    }
    let autocorr = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (x[i] - mu) * (x[i + lag] - mu);
        }
        s / (n as f64) / c0
    };
    let mut sum_rho = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = autocorr(lag) + autocorr(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum_rho += pair;
        lag += 2;
    }
    (n as f64 / (1.0 + 2.0 * sum_rho)).min(n as f64)
}

/// Type-7 (linear interpolation) quantile of a sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&p));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Convenience: 2.5%, 50%, 97.5% of an unsorted sample.
pub fn central_interval(values: &mut [f64]) -> (f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in summaries"));
    (
        quantile_sorted(values, 0.025),
        quantile_sorted(values, 0.5),
        quantile_sorted(values, 0.975),
    )
}

/// Pointwise daily posterior summary of one curve: median and central 95%
/// interval per day.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub days: Vec<f64>,
    pub q025: Vec<f64>,
    pub median: Vec<f64>,
    pub q975: Vec<f64>,
}

impl SummaryTable {
    fn from_curves(days: Vec<f64>, curves: &[Vec<f64>]) -> Self {
        let n_days = days.len();
        let mut q025 = Vec::with_capacity(n_days);
        let mut median = Vec::with_capacity(n_days);
        let mut q975 = Vec::with_capacity(n_days);
        let mut column = vec![0.0; curves.len()];
        for j in 0..n_days {
            for (i, c) in curves.iter().enumerate() {
                column[i] = c[j];
            }
            let (lo, med, hi) = central_interval(&mut column);
            q025.push(lo);
            median.push(med);
            q975.push(hi);
        }
        Self {
            days,
            q025,
            median,
            q975,
        }
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

/// Posterior summaries of the transmission rate and of the reproduction
/// number, both on the daily grid.
#[derive(Debug, Clone)]
pub struct BetaR0Summary {
    pub beta: SummaryTable,
    pub r0: SummaryTable,
}

/// Pointwise summaries of `beta(t) = exp(sum_i beta_i B_i(t))` and
/// `R0(t) = beta(t) / gamma` across all pooled draws. The ratio is taken
/// per draw (each draw's own gamma) before quantiles.
pub fn summarize_beta_r0(
    chains: &ChainSet,
    spec: &ModelSpec,
) -> Result<BetaR0Summary, DiagnosticsError> {
    if chains.total_draws() == 0 {
        return Err(DiagnosticsError::EmptyDraws);
    }
    let basis = Basis::new(spec.spline)?;
    let days: Vec<f64> = (0..=spec.horizon)
        .map(|j| spec.spline.t0 + j as f64)
        .collect();
    let design = basis.design_matrix(&days)?;

    let mut beta_curves = Vec::with_capacity(chains.total_draws());
    let mut r0_curves = Vec::with_capacity(chains.total_draws());
    for chain in &chains.chains {
        for draw in &chain.draws {
            let coeffs = draw.beta();
            let gamma = draw.gamma();
            let mut beta_t = Vec::with_capacity(days.len());
            let mut r0_t = Vec::with_capacity(days.len());
            for r in 0..days.len() {
                let mut log_beta = 0.0;
                for (c, &b) in coeffs.iter().enumerate() {
                    log_beta += design[(r, c)] * b;
                }
                let beta = log_beta.exp();
                beta_t.push(beta);
                r0_t.push(beta / gamma);
            }
            beta_curves.push(beta_t);
            r0_curves.push(r0_t);
        }
    }
    Ok(BetaR0Summary {
        beta: SummaryTable::from_curves(days.clone(), &beta_curves),
        r0: SummaryTable::from_curves(days, &r0_curves),
    })
}

/// Posterior predictive summary plus the number of draws whose integration
/// failed and were skipped.
#[derive(Debug, Clone)]
pub struct PredictiveResult {
    pub table: SummaryTable,
    pub n_failed: usize,
    pub n_used: usize,
}

/// Simulate one observed-incidence series per posterior draw — integrate the
/// model, then draw `eta(t) * NegBinom(C(t), phi)` per day — and summarize
/// pointwise. Draw integration failures are skipped and counted.
pub fn posterior_predictive(
    chains: &ChainSet,
    spec: &ModelSpec,
    data: &IncidenceSeries,
    tol: &Tolerances,
    seed: u64,
) -> Result<PredictiveResult, DiagnosticsError> {
    let draws: Vec<_> = chains
        .chains
        .iter()
        .flat_map(|c| c.draws.iter().cloned())
        .collect();
    if draws.is_empty() {
        return Err(DiagnosticsError::EmptyDraws);
    }

    let indexed: Vec<(usize, crate::model::ParamVector)> =
        draws.into_iter().enumerate().collect();
    let simulated: Vec<Option<Vec<f64>>> = par_map(indexed, |(i, p)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let traj = match integrate(spec, &p, tol) {
            Ok(t) => t,
            Err(_) => return None,
        };
        let inc = daily_incidence(&traj);
        let phi = p.phi();
        let mut sim = Vec::with_capacity(inc.values.len());
        for (j, &c) in inc.values.iter().enumerate() {
            let mean = c.max(0.0) + MEAN_FLOOR;
            let k = neg_binom_sample(&mut rng, mean, phi);
            let eta = data.eta.eval((j + 1) as f64);
            sim.push(eta * k as f64);
        }
        Some(sim)
    });

    let mut curves = Vec::new();
    let mut n_failed = 0usize;
    for s in simulated {
        match s {
            Some(c) => curves.push(c),
            None => n_failed += 1,
        }
    }
    if curves.is_empty() {
        return Err(DiagnosticsError::EmptyDraws);
    }
    let days: Vec<f64> = (1..=curves[0].len()).map(|j| j as f64).collect();
    Ok(PredictiveResult {
        table: SummaryTable::from_curves(days, &curves),
        n_failed,
        n_used: curves.len(),
    })
}
