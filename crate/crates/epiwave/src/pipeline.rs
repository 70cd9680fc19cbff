//! End-to-end commands behind the CLI: generate synthetic data, fit a model,
//! check gradients, and recompute diagnostics from saved draws. Each command
//! takes a [`RunConfig`], works entirely through the filesystem, and returns
//! a small report the CLI prints.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::IncidenceSeries;
use crate::diagnostics::{
    ess, posterior_predictive, potential_scale_reduction, split_rhat, summarize_beta_r0, Rhat,
    SummaryTable,
};
use crate::io::{
    read_draws_csv, read_incidence_csv, write_chain_stats_csv, write_diagnostics_csv,
    write_draws_csv, write_incidence_csv, write_summary_csv, write_truth_sidecar, ChainStatsRow,
    DiagnosticsRow, IoError, TruthSidecar,
};
use crate::model::{ModelFamily, ModelSpec, ParamVector};
use crate::ode::Tolerances;
use crate::posterior::{Posterior, PriorConfig};
use crate::sampler::{run_chains, ChainSet};
use crate::synth::{beta_wave, fit_spline_to_curve, generate_dataset, SyntheticRecipe};

/// Threshold above which a split potential-scale-reduction factor is flagged
/// as non-converged in fit reports.
pub const RHAT_WARN: f64 = 1.1;

/// Componentwise relative-error tolerance for the gradient check.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration or arguments (exit code 1).
    #[error("{0}")]
    Usage(String),
    /// Unreadable or malformed data files (exit code 2).
    #[error("{0}")]
    Data(String),
    /// The computation itself failed (exit code 3).
    #[error("{0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Usage(e.to_string())
    }
}

impl From<IoError> for PipelineError {
    fn from(e: IoError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

fn numerical(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Numerical(e.to_string())
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| {
        PipelineError::Data(format!(
            "cannot create output directory {}: {e}",
            cfg.output.display()
        ))
    })?;
    Ok(cfg.output.clone())
}

/// Build the synthetic-data recipe a config describes: benchmark scalar
/// parameters, with the transmission curve's spline coefficients fitted to
/// the configured wave shape.
pub fn build_recipe(cfg: &RunConfig) -> Result<SyntheticRecipe, PipelineError> {
    let horizon = cfg.synth_horizon();
    let model = cfg.model_spec(horizon)?;
    let (a, b) = (cfg.synth.a, cfg.synth.b);
    let fit = fit_spline_to_curve(|t| beta_wave(t, a, b), &model.spline).map_err(numerical)?;
    let alpha = match model.family {
        ModelFamily::Semikr => Some(0.5),
        ModelFamily::Sikr => None,
    };
    let p_syn = ParamVector::from_parts(&model, alpha, 0.1, 10.0, 0.1, 0.05, &fit.coeffs)
        .map_err(|e| PipelineError::Usage(e.to_string()))?;
    Ok(SyntheticRecipe {
        a,
        b,
        population: model.population,
        model,
        p_syn,
        seed: cfg.seed,
        dispersion: cfg.synth.dispersion,
    })
}

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub dataset_csv: PathBuf,
    pub truth_sidecar: PathBuf,
    pub n_days: usize,
}

/// Generate a synthetic dataset and write `dataset.csv` + `truth.toml` into
/// the output directory.
pub fn run_synth(cfg: &RunConfig) -> Result<SynthOutputs, PipelineError> {
    let recipe = build_recipe(cfg)?;
    let dataset = generate_dataset(&recipe).map_err(numerical)?;
    let dir = ensure_output_dir(cfg)?;

    let dataset_csv = dir.join("dataset.csv");
    write_incidence_csv(&dataset_csv, &dataset.series.counts, None)?;

    let truth_sidecar = dir.join("truth.toml");
    write_truth_sidecar(
        &truth_sidecar,
        &TruthSidecar {
            seed: recipe.seed,
            a: recipe.a,
            b: recipe.b,
            generator_phi: recipe.generator_phi(),
            alpha: dataset.truth.alpha(),
            gamma: dataset.truth.gamma(),
            seed0: dataset.truth.seed0(),
            phi_inv: dataset.truth.phi_inv(),
            tau: dataset.truth.tau(),
            beta: dataset.truth.beta().to_vec(),
            daily_means: dataset.daily_means.clone(),
        },
    )?;

    Ok(SynthOutputs {
        dataset_csv,
        truth_sidecar,
        n_days: dataset.series.len(),
    })
}

#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub draw_files: Vec<PathBuf>,
    pub diagnostics_csv: PathBuf,
    pub chain_stats_csv: PathBuf,
    pub beta_csv: PathBuf,
    pub r0_csv: PathBuf,
    pub predictive_csv: PathBuf,
    pub n_chains_ok: usize,
    pub n_chains_failed: usize,
    pub total_draws: usize,
    /// Parameters whose split R-hat exceeded [`RHAT_WARN`] (or was
    /// degenerate). Non-empty output is a warning, not an error.
    pub nonconverged: Vec<String>,
}

/// Convergence rows for every flat parameter of a chain set. Rows are only
/// produced when at least two chains each carry at least eight draws.
pub fn convergence_rows(chains: &ChainSet, names: &[String]) -> Vec<DiagnosticsRow> {
    if chains.n_chains() < 2 {
        return Vec::new();
    }
    let min_len = chains.chains.iter().map(|c| c.draws.len()).min().unwrap_or(0);
    if min_len < 8 {
        return Vec::new();
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let series = chains.parameter_series(i);
            let rhat = potential_scale_reduction(&series).unwrap_or(Rhat::Degenerate);
            let split = split_rhat(&series).unwrap_or(Rhat::Degenerate);
            let total_ess = series.iter().map(|c| ess(c)).sum::<f64>();
            DiagnosticsRow {
                parameter: name.clone(),
                rhat,
                split_rhat: split,
                ess: total_ess,
            }
        })
        .collect()
}

fn empty_table() -> SummaryTable {
    SummaryTable {
        days: Vec::new(),
        q025: Vec::new(),
        median: Vec::new(),
        q975: Vec::new(),
    }
}

/// Fit the configured model to the data file and write draws, diagnostics,
/// and summary tables into the output directory.
pub fn run_fit(cfg: &RunConfig) -> Result<FitOutputs, PipelineError> {
    let data_path = cfg.data_path()?;
    let eta = cfg.reporting_schedule()?;
    let series = read_incidence_csv(data_path, eta)?;
    let spec = cfg.model_spec(series.len())?;
    let settings = cfg.sampler_settings();
    let tol = Tolerances::default();

    let chains = run_chains(&spec, &series, &cfg.priors, &settings, &cfg.warm_start, tol)
        .map_err(numerical)?;

    let dir = ensure_output_dir(cfg)?;
    let names = spec.param_names();

    let mut draw_files = Vec::new();
    for chain in &chains.chains {
        let path = dir.join(format!("draws_chain_{:02}.csv", chain.chain_index));
        write_draws_csv(&path, &names, &chain.draws)?;
        draw_files.push(path);
    }

    let rows = convergence_rows(&chains, &names);
    let nonconverged: Vec<String> = rows
        .iter()
        .filter(|r| !r.split_rhat.below(RHAT_WARN))
        .map(|r| r.parameter.clone())
        .collect();
    for name in &nonconverged {
        log::warn!("parameter {name} has split R-hat above {RHAT_WARN}: chains may not have converged");
    }
    let diagnostics_csv = dir.join("diagnostics.csv");
    write_diagnostics_csv(&diagnostics_csv, &rows)?;

    let chain_stats_csv = dir.join("chains.csv");
    let stats: Vec<ChainStatsRow> = chains
        .chains
        .iter()
        .map(|c| ChainStatsRow {
            chain: c.chain_index,
            draws: c.draws.len(),
            accept_rate: c.accept_rate(),
            integration_failures: c.n_integration_failures,
        })
        .collect();
    write_chain_stats_csv(&chain_stats_csv, &stats)?;

    let beta_csv = dir.join("beta.csv");
    let r0_csv = dir.join("r0.csv");
    let predictive_csv = dir.join("predictive.csv");
    if chains.total_draws() == 0 {
        write_summary_csv(&beta_csv, &empty_table())?;
        write_summary_csv(&r0_csv, &empty_table())?;
        write_summary_csv(&predictive_csv, &empty_table())?;
    } else {
        let summary = summarize_beta_r0(&chains, &spec).map_err(numerical)?;
        write_summary_csv(&beta_csv, &summary.beta)?;
        write_summary_csv(&r0_csv, &summary.r0)?;
        // A distinct seed keeps predictive noise independent of the chains'
        // RNG streams.
        let predictive =
            posterior_predictive(&chains, &spec, &series, &tol, cfg.seed.wrapping_add(1))
                .map_err(numerical)?;
        if predictive.n_failed > 0 {
            log::warn!(
                "posterior predictive skipped {} of {} draws (integration failures)",
                predictive.n_failed,
                predictive.n_failed + predictive.n_used
            );
        }
        write_summary_csv(&predictive_csv, &predictive.table)?;
    }

    Ok(FitOutputs {
        draw_files,
        diagnostics_csv,
        chain_stats_csv,
        beta_csv,
        r0_csv,
        predictive_csv,
        n_chains_ok: chains.n_chains(),
        n_chains_failed: chains.failures.len(),
        total_draws: chains.total_draws(),
        nonconverged,
    })
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst componentwise relative error seen across all points and models.
    pub max_rel_err: f64,
    pub n_points: usize,
    /// (model label, worst error for that model).
    pub per_model: Vec<(String, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Draw a random in-support parameter vector for the gradient check.
fn random_point<R: Rng + ?Sized>(
    spec: &ModelSpec,
    priors: &PriorConfig,
    rng: &mut R,
) -> Result<ParamVector, PipelineError> {
    let alpha = priors.alpha.as_ref().map(|p| p.sample(rng));
    let gamma = priors.gamma.sample(rng);
    let seed0 = priors.seed0.sample(rng).abs().max(1.0).min(spec.population * 0.5);
    let phi_inv = priors.phi_inv.sample(rng).max(1e-4);
    let tau = priors.tau.sample(rng).clamp(5e-3, 1.0);
    let beta: Vec<f64> = (0..spec.n_coeffs())
        .map(|_| -1.6 + 0.4 * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    ParamVector::from_parts(spec, alpha, gamma, seed0, phi_inv, tau, &beta)
        .map_err(|e| PipelineError::Usage(e.to_string()))
}

/// Relative error between analytic and finite-difference gradients of the
/// log posterior at `n_points` random in-support points.
fn gradcheck_model(
    spec: &ModelSpec,
    priors: &PriorConfig,
    data: &IncidenceSeries,
    n_points: usize,
    jacobian_fuzz: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, PipelineError> {
    // Verification wants the error floor of the solves well under the
    // comparison threshold; the population-scaled default atol is too coarse.
    let tight = Tolerances {
        rtol: 1e-10,
        atol_scale: 1e-12,
    };
    let mut posterior = Posterior::new(spec, data, priors, tight)
        .map_err(|e| PipelineError::Usage(e.to_string()))?;
    posterior.jacobian_fuzz = jacobian_fuzz;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < n_points {
        attempts += 1;
        if attempts > 50 * n_points {
            return Err(PipelineError::Numerical(format!(
                "could not find {n_points} usable gradient-check points (integration keeps failing)"
            )));
        }
        let p = random_point(spec, priors, rng)?;
        let (_, grad) = match posterior.log_posterior_and_gradient(&p) {
            Ok(v) => v,
            Err(e) if e.is_rejection() => continue,
            Err(e) => return Err(numerical(e)),
        };

        let flat = p.as_slice().to_vec();
        let mut point_ok = true;
        let mut point_worst: f64 = 0.0;
        for i in 0..flat.len() {
            let h = 1e-5 * flat[i].abs().max(1.0);
            let eval = |x: f64| -> Result<Option<f64>, PipelineError> {
                let mut v = flat.clone();
                v[i] = x;
                let q = ParamVector::from_flat(spec, v)
                    .map_err(|e| PipelineError::Usage(e.to_string()))?;
                match posterior.log_posterior(&q) {
                    Ok(l) => Ok(Some(l)),
                    Err(e) if e.is_rejection() => Ok(None),
                    Err(e) => Err(numerical(e)),
                }
            };
            let (hi, lo) = match (eval(flat[i] + h)?, eval(flat[i] - h)?) {
                (Some(a), Some(b)) => (a, b),
                // The stencil stepped over a support boundary; try another
                // point instead of comparing a one-sided difference.
                _ => {
                    point_ok = false;
                    break;
                }
            };
            let fd = (hi - lo) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            point_worst = point_worst.max((grad[i] - fd).abs() / denom);
        }
        if point_ok {
            worst = worst.max(point_worst);
            checked += 1;
        }
    }
    Ok(worst)
}

/// Check analytic gradients against central finite differences on synthetic
/// data, for both model families. `jacobian_fuzz` deliberately corrupts the
/// sensitivity right-hand side and must make the check fail (negative
/// control); pass 0 for a real check.
pub fn run_gradcheck(cfg: &RunConfig, jacobian_fuzz: f64) -> Result<GradcheckReport, PipelineError> {
    let n_points = 10;
    let mut per_model = Vec::new();
    let mut max_rel_err: f64 = 0.0;

    for family in [ModelFamily::Semikr, ModelFamily::Sikr] {
        let mut model_cfg = cfg.clone();
        model_cfg.model.family = family;
        match family {
            ModelFamily::Semikr => {
                model_cfg.model.n_exposed = cfg.model.n_exposed.max(1);
            }
            ModelFamily::Sikr => {
                model_cfg.model.n_exposed = 0;
            }
        }
        if model_cfg.model.family != cfg.model.family {
            model_cfg.priors = PriorConfig::synthetic_benchmark(family);
        }

        let recipe = build_recipe(&model_cfg)?;
        let dataset = generate_dataset(&recipe).map_err(numerical)?;
        let spec = recipe.model.clone();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0xEC0);
        let worst = gradcheck_model(
            &spec,
            &model_cfg.priors,
            &dataset.series,
            n_points,
            jacobian_fuzz,
            &mut rng,
        )?;
        max_rel_err = max_rel_err.max(worst);
        let label = match family {
            ModelFamily::Semikr => format!("SE{}I{}R", spec.n_exposed, spec.n_infectious),
            ModelFamily::Sikr => format!("SI{}R", spec.n_infectious),
        };
        per_model.push((label, worst));
    }

    Ok(GradcheckReport {
        max_rel_err,
        n_points,
        per_model,
        tolerance: GRADCHECK_TOL,
        passed: max_rel_err <= GRADCHECK_TOL,
    })
}

#[derive(Debug, Clone)]
pub struct DiagnoseReport {
    pub rows: Vec<DiagnosticsRow>,
    pub n_chains: usize,
    pub min_draws: usize,
    pub diagnostics_csv: PathBuf,
}

/// Recompute convergence diagnostics from saved draw files
/// (`draws_chain_*.csv` in `dir`) and rewrite `diagnostics.csv` there.
pub fn run_diagnose(dir: &Path) -> Result<DiagnoseReport, PipelineError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PipelineError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("draws_chain_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::Data(format!(
            "no draws_chain_*.csv files found in {}",
            dir.display()
        )));
    }

    let mut names: Vec<String> = Vec::new();
    let mut per_chain_rows: Vec<Vec<Vec<f64>>> = Vec::new();
    for path in &paths {
        let file = read_draws_csv(path)?;
        if names.is_empty() {
            names = file.names;
        } else if names != file.names {
            return Err(PipelineError::Data(format!(
                "{} has different columns than the first draw file",
                path.display()
            )));
        }
        per_chain_rows.push(file.rows);
    }

    let n_chains = per_chain_rows.len();
    let min_draws = per_chain_rows.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    if n_chains >= 2 && min_draws >= 8 {
        for (i, name) in names.iter().enumerate() {
            let series: Vec<Vec<f64>> = per_chain_rows
                .iter()
                .map(|rows| rows.iter().map(|r| r[i]).collect())
                .collect();
            let rhat = potential_scale_reduction(&series).unwrap_or(Rhat::Degenerate);
            let split = split_rhat(&series).unwrap_or(Rhat::Degenerate);
            let total_ess = series.iter().map(|c| ess(c)).sum::<f64>();
            rows.push(DiagnosticsRow {
                parameter: name.clone(),
                rhat,
                split_rhat: split,
                ess: total_ess,
            });
        }
    }

    let diagnostics_csv = dir.join("diagnostics.csv");
    write_diagnostics_csv(&diagnostics_csv, &rows)?;
    Ok(DiagnoseReport {
        rows,
        n_chains,
        min_draws,
        diagnostics_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::HmcSettings;

    fn desk_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::two_wave_benchmark();
        cfg.output = dir.join("out");
        cfg.model.horizon = Some(40);
        cfg.seed = 4242;
        cfg.sampler = HmcSettings {
            n_chains: 2,
            n_burnin: 15,
            n_production: 25,
            ..HmcSettings::default()
        };
        cfg.warm_start.steps = 20;
        cfg
    }

    #[test]
    fn synth_writes_dataset_and_truth_that_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = desk_config(tmp.path());
        let out = run_synth(&cfg).unwrap();
        assert_eq!(out.n_days, 40);

        let series =
            read_incidence_csv(&out.dataset_csv, crate::data::UnderReporting::full()).unwrap();
        assert_eq!(series.len(), 40);

        let truth = crate::io::read_truth_sidecar(&out.truth_sidecar).unwrap();
        assert_eq!(truth.seed, cfg.seed);
        assert_eq!(truth.daily_means.len(), 40);
        assert_eq!(truth.generator_phi, 10.0);
        assert_eq!(truth.beta.len(), 12);

        // Re-running with the same config reproduces the same file.
        let text_1 = std::fs::read_to_string(&out.dataset_csv).unwrap();
        run_synth(&cfg).unwrap();
        let text_2 = std::fs::read_to_string(&out.dataset_csv).unwrap();
        assert_eq!(text_1, text_2);
    }

    #[test]
    fn fit_writes_all_tables_and_diagnose_reproduces_them() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(tmp.path());
        let synth = run_synth(&cfg).unwrap();
        cfg.data = Some(synth.dataset_csv.clone());

        let fit = run_fit(&cfg).unwrap();
        assert_eq!(fit.n_chains_ok, 2);
        assert_eq!(fit.n_chains_failed, 0);
        assert_eq!(fit.total_draws, 50);
        assert_eq!(fit.draw_files.len(), 2);
        for path in [&fit.diagnostics_csv, &fit.beta_csv, &fit.r0_csv, &fit.predictive_csv] {
            assert!(path.is_file(), "{} missing", path.display());
        }

        let beta_text = std::fs::read_to_string(&fit.beta_csv).unwrap();
        assert_eq!(beta_text.lines().count(), 42); // header + horizon + 1 days

        let diag_before = std::fs::read_to_string(&fit.diagnostics_csv).unwrap();
        let report = run_diagnose(&cfg.output).unwrap();
        assert_eq!(report.n_chains, 2);
        assert_eq!(report.min_draws, 25);
        assert_eq!(report.rows.len(), crate::synth::two_wave_spec().n_params());
        let diag_after = std::fs::read_to_string(&fit.diagnostics_csv).unwrap();
        assert_eq!(diag_before, diag_after);
    }

    #[test]
    fn fit_with_zero_production_steps_writes_valid_empty_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(tmp.path());
        let synth = run_synth(&cfg).unwrap();
        cfg.data = Some(synth.dataset_csv.clone());
        cfg.sampler.n_production = 0;

        let fit = run_fit(&cfg).unwrap();
        assert_eq!(fit.total_draws, 0);
        let draws = read_draws_csv(&fit.draw_files[0]).unwrap();
        assert!(draws.rows.is_empty());
        assert!(!draws.names.is_empty());
        let beta_text = std::fs::read_to_string(&fit.beta_csv).unwrap();
        assert_eq!(beta_text.trim(), "day,q025,median,q975");
        let diag_text = std::fs::read_to_string(&fit.diagnostics_csv).unwrap();
        assert_eq!(diag_text.trim(), "parameter,rhat,split_rhat,ess");
    }

    #[test]
    fn fit_without_data_path_is_a_usage_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = desk_config(tmp.path());
        let err = run_fit(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn diagnose_on_an_empty_directory_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = run_diagnose(tmp.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn gradcheck_passes_clean_and_fails_the_negative_control() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(tmp.path());
        cfg.model.horizon = Some(25);
        cfg.spline.q_knots = 5;

        let clean = run_gradcheck(&cfg, 0.0).unwrap();
        assert!(
            clean.passed,
            "gradient check failed: max rel err {}",
            clean.max_rel_err
        );
        assert_eq!(clean.per_model.len(), 2);

        let fuzzed = run_gradcheck(&cfg, 0.05).unwrap();
        assert!(
            !fuzzed.passed,
            "corrupted Jacobian still passed: max rel err {}",
            fuzzed.max_rel_err
        );
    }
}
