//! Step-size and mass adaptation: dual-averaging on pilot acceptance
//! statistics, iterated inverse-variance diagonal mass, and trajectory
//! length chosen so one proposal spans roughly a unit of time in the scaled
//! space.
//!
//! The mass matrix is re-estimated over several pilot rounds because a
//! single pass bootstraps badly: under a poorly scaled mass the slow
//! coordinates barely move, their sample variance is underestimated, and an
//! inverse-variance mass would freeze them further. Each round mixes faster
//! than the last, so the variance estimates converge geometrically.

use rand::Rng;

use super::ghmc::{ghmc_step, GhmcState, HmcSettings, Target};
use super::SamplerError;

/// Nesterov-style dual averaging of log step size toward a target
/// acceptance statistic.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    log_h: f64,
    log_h_bar: f64,
    s_bar: f64,
    t: f64,
    pub target_accept: f64,
    gamma: f64,
    kappa: f64,
    t0: f64,
}

impl DualAveraging {
    pub fn new(h0: f64, target_accept: f64) -> Self {
        Self {
            mu: (10.0 * h0).ln(),
            log_h: h0.ln(),
            log_h_bar: h0.ln(),
            s_bar: 0.0,
            t: 0.0,
            target_accept,
            gamma: 0.05,
            kappa: 0.75,
            t0: 10.0,
        }
    }

    /// Feed one acceptance probability; returns the step size to use next.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + self.t0);
        self.s_bar = (1.0 - w) * self.s_bar + w * (self.target_accept - accept_prob);
        self.log_h = self.mu - self.t.sqrt() / self.gamma * self.s_bar;
        let eta = self.t.powf(-self.kappa);
        self.log_h_bar = eta * self.log_h + (1.0 - eta) * self.log_h_bar;
        self.log_h.exp()
    }

    /// The averaged (final) step size.
    pub fn adapted(&self) -> f64 {
        self.log_h_bar.exp()
    }
}

/// Acceptance statistics and sample variances from a pilot run.
#[derive(Debug, Clone)]
pub struct PilotStats {
    /// Step size the pilot started from.
    pub step_size: f64,
    /// Per-step Metropolis acceptance probabilities.
    pub accept_probs: Vec<f64>,
    /// Per-coordinate sample variances of the pilot draws.
    pub variances: Vec<f64>,
}

impl PilotStats {
    pub fn n_accepting(&self) -> usize {
        self.accept_probs.iter().filter(|a| **a > 0.0).count()
    }
}

/// Knobs of the adaptation procedure itself.
#[derive(Debug, Clone)]
pub struct AdaptOptions {
    pub target_accept: f64,
    /// Steps per mass-estimation round.
    pub n_pilot: usize,
    /// Mass-estimation rounds; each refreshes the mass from the round's
    /// sample variances, and a final half-length round then re-tunes the
    /// step size only.
    pub n_rounds: usize,
    pub l_max: usize,
    pub mass_floor: f64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            target_accept: 0.9,
            n_pilot: 300,
            n_rounds: 3,
            l_max: 64,
            mass_floor: 1e-8,
        }
    }
}

/// Floored inverse of shrunken sample variances. The variances are shrunk
/// toward a small baseline (more strongly for short pilots) so that a
/// coordinate the pilot under-explored cannot acquire an explosive mass;
/// non-finite or zero variances leave the coordinate at unit mass.
pub fn regularized_inverse_variances(
    variances: &[f64],
    n: usize,
    opts: &AdaptOptions,
) -> Vec<f64> {
    let n = n as f64;
    variances
        .iter()
        .map(|&v| {
            if v.is_finite() && v > 0.0 {
                let shrunk = (n / (n + 5.0)) * v + (5.0 / (n + 5.0)) * 1e-3;
                (1.0 / shrunk).max(opts.mass_floor)
            } else {
                1.0
            }
        })
        .collect()
}

/// Turn pilot statistics into production settings: replay dual averaging
/// over the recorded acceptance probabilities, set the diagonal mass to the
/// floored inverse of the regularized sample variances, and size the
/// trajectory so that `h * L` is about one unit.
pub fn settings_from_pilot(
    stats: &PilotStats,
    base: &HmcSettings,
    opts: &AdaptOptions,
) -> Result<HmcSettings, SamplerError> {
    if stats.n_accepting() == 0 {
        return Err(SamplerError::DegeneratePilot);
    }
    let mut da = DualAveraging::new(stats.step_size, opts.target_accept);
    for &a in &stats.accept_probs {
        da.update(a);
    }
    let h = da.adapted();
    if !h.is_finite() || !(h > 0.0) {
        return Err(SamplerError::DegeneratePilot);
    }
    let mass = regularized_inverse_variances(&stats.variances, stats.accept_probs.len(), opts);
    Ok(HmcSettings {
        step_size: h,
        leaps_per_proposal: ((1.0 / h).round() as usize).clamp(1, opts.l_max),
        mass,
        ..base.clone()
    })
}

/// Outcome report of `adapt_settings`.
#[derive(Debug, Clone)]
pub struct AdaptReport {
    /// Step-size fallbacks (divisions by 10) that were needed.
    pub fallbacks: usize,
    /// Acceptance rate over the final pilot round.
    pub pilot_accept_rate: f64,
    pub n_steps_used: usize,
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for (i, &xi) in x.iter().enumerate() {
            let d = xi - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (xi - self.mean[i]);
        }
    }

    fn variances(&self) -> Vec<f64> {
        if self.n < 2.0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m| m / (self.n - 1.0)).collect()
    }
}

/// One pilot round with live dual averaging; returns the stats, the final
/// chain state, and the live-averaged step size.
fn pilot_round<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    state: &mut GhmcState,
    settings: &mut HmcSettings,
    mass: &[f64],
    opts: &AdaptOptions,
    rng: &mut R,
) -> Result<PilotStats, SamplerError> {
    let h0 = settings.step_size;
    let mut da = DualAveraging::new(h0, opts.target_accept);
    let mut welford = Welford::new(state.z.len());
    let mut accept_probs = Vec::with_capacity(opts.n_pilot);
    for _ in 0..opts.n_pilot {
        let info = ghmc_step(target, state, settings, mass, rng)?;
        accept_probs.push(info.accept_prob);
        settings.step_size = da.update(info.accept_prob);
        welford.push(&state.z);
    }
    settings.step_size = da.adapted();
    Ok(PilotStats {
        step_size: h0,
        accept_probs,
        variances: welford.variances(),
    })
}

/// Full adaptation: `n_rounds` pilot rounds that each tune the step size by
/// live dual averaging and then refresh the diagonal mass from the round's
/// sample variances, followed by a half-length round that re-tunes the step
/// size under the final mass. The whole procedure is retried at a tenth of
/// the step size — at most five times — when a pilot degenerates into
/// all-rejections.
pub fn adapt_settings<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    z0: &[f64],
    base: &HmcSettings,
    opts: &AdaptOptions,
    rng: &mut R,
) -> Result<(HmcSettings, GhmcState, AdaptReport), SamplerError> {
    base.validate()?;
    let mut h0 = base.step_size;
    let mut fallbacks = 0usize;
    loop {
        match adapt_once(target, z0, base, h0, opts, rng) {
            Ok((settings, state, mut report)) => {
                report.fallbacks = fallbacks;
                return Ok((settings, state, report));
            }
            Err(SamplerError::DegeneratePilot) if fallbacks < 5 => {
                fallbacks += 1;
                h0 /= 10.0;
                log::warn!(
                    "pilot degenerated (all rejections); retrying with step size {h0:.3e} \
                     (fallback {fallbacks}/5)"
                );
            }
            Err(SamplerError::DegeneratePilot) => {
                return Err(SamplerError::AdaptationFailed {
                    attempts: fallbacks + 1,
                    last_step_size: h0,
                })
            }
            Err(e) => return Err(e),
        }
    }
}

fn adapt_once<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    z0: &[f64],
    base: &HmcSettings,
    h0: f64,
    opts: &AdaptOptions,
    rng: &mut R,
) -> Result<(HmcSettings, GhmcState, AdaptReport), SamplerError> {
    let dim = target.dim();
    let mut mass = vec![1.0; dim];
    let mut state = GhmcState::init(target, z0.to_vec(), &mass, rng)?;
    let mut settings = HmcSettings {
        step_size: h0,
        leaps_per_proposal: 1,
        jitter: 0.0,
        mass: Vec::new(),
        ..base.clone()
    };
    let mut steps_used = 0usize;

    // Mass rounds: tune the step size by live dual averaging, then refresh
    // the mass from the round's sample variances and redraw the momentum
    // (it was drawn under the previous mass).
    for _ in 0..opts.n_rounds.max(1) {
        let stats = pilot_round(target, &mut state, &mut settings, &mass, opts, rng)?;
        steps_used += stats.accept_probs.len();
        if stats.n_accepting() == 0 {
            return Err(SamplerError::DegeneratePilot);
        }
        let h = settings.step_size; // live-averaged result of the round
        if !h.is_finite() || !(h > 0.0) {
            return Err(SamplerError::DegeneratePilot);
        }
        settings.leaps_per_proposal = ((1.0 / h).round() as usize).clamp(1, opts.l_max);
        mass = regularized_inverse_variances(&stats.variances, stats.accept_probs.len(), opts);
        state = GhmcState::init(target, state.z, &mass, rng)?;
    }

    // Final half-length round: the last mass refresh invalidated the step
    // size, so re-tune it (and only it) under the final mass.
    let final_opts = AdaptOptions {
        n_pilot: (opts.n_pilot / 2).max(1),
        ..opts.clone()
    };
    let stats = pilot_round(target, &mut state, &mut settings, &mass, &final_opts, rng)?;
    steps_used += stats.accept_probs.len();
    if stats.n_accepting() == 0 {
        return Err(SamplerError::DegeneratePilot);
    }
    let h = settings.step_size;
    if !h.is_finite() || !(h > 0.0) {
        return Err(SamplerError::DegeneratePilot);
    }
    let final_settings = HmcSettings {
        step_size: h,
        leaps_per_proposal: ((1.0 / h).round() as usize).clamp(1, opts.l_max),
        jitter: base.jitter,
        mass,
        ..base.clone()
    };
    let accept_rate =
        stats.accept_probs.iter().sum::<f64>() / stats.accept_probs.len().max(1) as f64;
    Ok((
        final_settings,
        state,
        AdaptReport {
            fallbacks: 0,
            pilot_accept_rate: accept_rate,
            n_steps_used: steps_used,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ghmc::{DiagGaussian, TargetEval};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dual_averaging_grows_h_when_everything_is_accepted() {
        // Pilot acceptance 1.0 at a tiny step: the adapted step must be
        // strictly larger.
        let stats = PilotStats {
            step_size: 1e-6,
            accept_probs: vec![1.0; 300],
            variances: vec![1.0; 3],
        };
        let out = settings_from_pilot(&stats, &HmcSettings::default(), &AdaptOptions::default())
            .unwrap();
        assert!(out.step_size > 1e-6, "step {} did not grow", out.step_size);
    }

    #[test]
    fn dual_averaging_shrinks_h_when_everything_is_rejected() {
        let stats = PilotStats {
            step_size: 0.5,
            accept_probs: {
                let mut v = vec![0.01; 300];
                v[0] = 0.2; // not fully degenerate
                v
            },
            variances: vec![1.0; 3],
        };
        let out = settings_from_pilot(&stats, &HmcSettings::default(), &AdaptOptions::default())
            .unwrap();
        assert!(out.step_size < 0.5, "step {} did not shrink", out.step_size);
    }

    #[test]
    fn mass_is_floored_inverse_of_shrunken_variance() {
        let stats = PilotStats {
            step_size: 0.1,
            accept_probs: vec![0.9; 200],
            variances: vec![4.0, 0.25, 1e20, 0.0],
        };
        let out = settings_from_pilot(&stats, &HmcSettings::default(), &AdaptOptions::default())
            .unwrap();
        let shrunk = |v: f64| 200.0 / 205.0 * v + 5.0 / 205.0 * 1e-3;
        assert_eq!(out.mass[0], 1.0 / shrunk(4.0));
        assert_eq!(out.mass[1], 1.0 / shrunk(0.25));
        assert_eq!(out.mass[2], 1e-8); // floor engaged
        assert_eq!(out.mass[3], 1.0); // degenerate coordinate left at unity
    }

    #[test]
    fn short_pilots_shrink_small_variances_toward_the_baseline() {
        // A coordinate that barely moved in a short pilot must not acquire
        // an explosive mass: the shrinkage bounds it near (n+5)/(5e-3).
        let opts = AdaptOptions::default();
        let mass = regularized_inverse_variances(&[1e-12], 20, &opts);
        assert!(mass[0] < 5100.0, "mass {} not bounded", mass[0]);
        // A well-measured O(1) variance is barely affected.
        let mass = regularized_inverse_variances(&[1.0], 300, &opts);
        assert!((mass[0] - 1.0).abs() < 2e-2, "mass {} moved too far", mass[0]);
    }

    #[test]
    fn trajectory_length_targets_unit_time() {
        let stats = PilotStats {
            step_size: 0.1,
            accept_probs: vec![0.9; 200],
            variances: vec![1.0],
        };
        let opts = AdaptOptions::default();
        let out = settings_from_pilot(&stats, &HmcSettings::default(), &opts).unwrap();
        let expect = ((1.0 / out.step_size).round() as usize).clamp(1, opts.l_max);
        assert_eq!(out.leaps_per_proposal, expect);
        // And the cap engages for tiny steps.
        let tiny = PilotStats {
            step_size: 1e-4,
            accept_probs: vec![0.0; 150].into_iter().chain(vec![1e-9; 50]).collect(),
            variances: vec![1.0],
        };
        let out = settings_from_pilot(&tiny, &HmcSettings::default(), &opts).unwrap();
        assert_eq!(out.leaps_per_proposal, opts.l_max);
    }

    #[test]
    fn adapted_settings_hit_the_acceptance_window_on_a_gaussian() {
        let target = DiagGaussian {
            sd: vec![1.0, 0.5, 2.0, 0.1, 1.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let base = HmcSettings {
            step_size: 0.05,
            psi: 0.5,
            ..HmcSettings::default()
        };
        let (settings, mut state, report) =
            adapt_settings(&target, &[0.1; 5], &base, &AdaptOptions::default(), &mut rng).unwrap();
        assert_eq!(report.fallbacks, 0);
        // Fresh run at the adapted settings: acceptance within [0.8, 0.98].
        let mass = settings.mass_for_dim(5).unwrap();
        let mut accepted = 0usize;
        let n = 2000;
        for _ in 0..n {
            let info = ghmc_step(&target, &mut state, &settings, &mass, &mut rng).unwrap();
            if info.accepted {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / n as f64;
        assert!(
            (0.8..=0.98).contains(&rate),
            "fresh-run acceptance {rate} with h = {}",
            settings.step_size
        );
        // The mass should roughly undo the scale differences.
        assert!(settings.mass[3] > settings.mass[2]);
    }

    /// A target that is invalid everywhere except the exact start point:
    /// every pilot round rejects everything, so adaptation must walk the
    /// step size down and ultimately give up.
    struct NeedleTarget;

    impl Target for NeedleTarget {
        fn dim(&self) -> usize {
            2
        }

        fn eval(&self, z: &[f64]) -> Result<TargetEval, SamplerError> {
            if z.iter().all(|v| *v == 0.0) {
                Ok(TargetEval::Value {
                    logp: 0.0,
                    grad: vec![0.0; 2],
                })
            } else {
                Ok(TargetEval::Invalid)
            }
        }
    }

    #[test]
    fn degenerate_pilot_falls_back_five_times_then_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = HmcSettings {
            step_size: 1.0,
            ..HmcSettings::default()
        };
        let opts = AdaptOptions {
            n_pilot: 20,
            ..AdaptOptions::default()
        };
        match adapt_settings(&NeedleTarget, &[0.0, 0.0], &base, &opts, &mut rng) {
            Err(SamplerError::AdaptationFailed {
                attempts,
                last_step_size,
            }) => {
                assert_eq!(attempts, 6); // initial try + 5 fallbacks
                assert!((last_step_size - 1e-5).abs() < 1e-12);
            }
            other => panic!("expected adaptation failure, got {other:?}"),
        }
    }

    #[test]
    fn all_rejections_is_flagged_degenerate() {
        let stats = PilotStats {
            step_size: 0.5,
            accept_probs: vec![0.0; 300],
            variances: vec![1.0; 2],
        };
        assert!(matches!(
            settings_from_pilot(&stats, &HmcSettings::default(), &AdaptOptions::default()),
            Err(SamplerError::DegeneratePilot)
        ));
    }
}
