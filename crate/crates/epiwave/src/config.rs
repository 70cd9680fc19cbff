//! Run configuration: one structured TOML file describing the model, priors,
//! reporting schedule, sampler settings, and file locations. Command-line
//! flags may override individual fields after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, UnderReporting};
use crate::model::{ModelError, ModelFamily, ModelSpec};
use crate::posterior::{PosteriorError, PriorConfig};
use crate::sampler::{HmcSettings, WarmStart};
use crate::spline::SplineConfig;
use crate::synth::DispersionConvention;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("model.population is required (no default)")]
    MissingPopulation,
    #[error("data path is required for this command (no default)")]
    MissingDataPath,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Priors(#[from] PosteriorError),
    #[error(transparent)]
    Reporting(#[from] DataError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// `[model]` section: compartmental structure and population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub family: ModelFamily,
    /// Exposed stages M (0 for the S-I-R family).
    pub n_exposed: usize,
    /// Infectious stages K.
    pub n_infectious: usize,
    /// Population size N. The only model field without a default.
    pub population: Option<f64>,
    /// Observation horizon in days. When absent it is inferred from the
    /// number of rows in the data file (fit) or defaults to 100 (synth).
    pub horizon: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: ModelFamily::Semikr,
            n_exposed: 1,
            n_infectious: 3,
            population: None,
            horizon: None,
        }
    }
}

/// `[spline]` section: size of the transmission-rate basis. The domain is
/// always `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineSection {
    pub q_knots: usize,
    pub degree: usize,
}

impl Default for SplineSection {
    fn default() -> Self {
        Self {
            q_knots: 10,
            degree: 3,
        }
    }
}

/// One reporting breakpoint: from `day` onward a fraction `fraction` of new
/// infections is observed (piecewise-linear interpolation between points).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportingPoint {
    pub day: f64,
    pub fraction: f64,
}

/// `[synth]` section: shape of the generated benchmark dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    /// Wave period/decay scale (days) of the generating transmission curve.
    pub a: f64,
    /// Inverse amplitude of the generating transmission curve.
    pub b: f64,
    /// How the stored dispersion entry is interpreted when drawing counts.
    pub dispersion: DispersionConvention,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            a: 50.0,
            b: 4.0,
            dispersion: DispersionConvention::default(),
        }
    }
}

fn default_priors() -> PriorConfig {
    PriorConfig::synthetic_benchmark(ModelFamily::Semikr)
}

fn default_reporting() -> Vec<ReportingPoint> {
    vec![ReportingPoint {
        day: 0.0,
        fraction: 1.0,
    }]
}

fn default_output() -> PathBuf {
    PathBuf::from("epiwave-out")
}

fn default_seed() -> u64 {
    20_230_814
}

/// Complete description of one run. Parsed from a TOML file; every field has
/// a documented default except `data` and `model.population`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master RNG seed for sampling and synthetic generation. Supersedes
    /// `sampler.rng_seed` from the file.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Incidence CSV to fit. Required by `fit`; has no default.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Directory all outputs are written into (created if missing).
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub spline: SplineSection,
    /// Default: the two-wave benchmark priors (requires the default SEMIKR
    /// family; set explicit priors without `alpha` for SIKR models).
    #[serde(default = "default_priors")]
    pub priors: PriorConfig,
    /// Reporting schedule; default is full reporting from day 0.
    #[serde(default = "default_reporting")]
    pub reporting: Vec<ReportingPoint>,
    #[serde(default)]
    pub sampler: HmcSettings,
    #[serde(default)]
    pub warm_start: WarmStart,
    #[serde(default)]
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            data: None,
            output: default_output(),
            model: ModelSection::default(),
            spline: SplineSection::default(),
            priors: default_priors(),
            reporting: default_reporting(),
            sampler: HmcSettings::default(),
            warm_start: WarmStart::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    /// The built-in two-wave benchmark configuration (population filled in).
    pub fn two_wave_benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.model.population = Some(crate::synth::TWO_WAVE_POPULATION);
        cfg.model.horizon = Some(100);
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate_shallow()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Checks that do not need to know the data length.
    fn validate_shallow(&self) -> Result<(), ConfigError> {
        self.sampler
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.synth.a > 0.0) || !(self.synth.b > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "synth wave parameters must be positive: a = {}, b = {}",
                self.synth.a, self.synth.b
            )));
        }
        // Surfaces malformed breakpoint lists early.
        self.reporting_schedule()?;
        Ok(())
    }

    /// Build the validated model for a given observation length.
    pub fn model_spec(&self, n_days: usize) -> Result<ModelSpec, ConfigError> {
        let population = self.model.population.ok_or(ConfigError::MissingPopulation)?;
        let spec = ModelSpec {
            family: self.model.family,
            n_exposed: self.model.n_exposed,
            n_infectious: self.model.n_infectious,
            population,
            spline: SplineConfig {
                t0: 0.0,
                t1: n_days as f64,
                q_knots: self.spline.q_knots,
                degree: self.spline.degree,
            },
            horizon: n_days,
        };
        spec.validate()?;
        self.priors.validate(&spec)?;
        Ok(spec)
    }

    /// Horizon for synthetic generation (explicit value or 100 days).
    pub fn synth_horizon(&self) -> usize {
        self.model.horizon.unwrap_or(100)
    }

    pub fn reporting_schedule(&self) -> Result<UnderReporting, ConfigError> {
        let pts = self.reporting.iter().map(|p| (p.day, p.fraction)).collect();
        Ok(UnderReporting::new(pts)?)
    }

    /// Sampler settings with the master seed applied.
    pub fn sampler_settings(&self) -> HmcSettings {
        let mut s = self.sampler.clone();
        s.rng_seed = self.seed;
        s
    }

    pub fn data_path(&self) -> Result<&Path, ConfigError> {
        self.data.as_deref().ok_or(ConfigError::MissingDataPath)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::Prior;

    #[test]
    fn defaults_describe_the_benchmark_model() {
        let cfg = RunConfig::two_wave_benchmark();
        let spec = cfg.model_spec(100).unwrap();
        assert_eq!(spec, crate::synth::two_wave_spec());
        assert_eq!(cfg.seed, 20_230_814);
        assert_eq!(cfg.sampler_settings().rng_seed, cfg.seed);
        assert!(cfg.data.is_none());
    }

    #[test]
    fn population_has_no_default() {
        let cfg = RunConfig::default();
        assert!(matches!(
            cfg.model_spec(100),
            Err(ConfigError::MissingPopulation)
        ));
    }

    #[test]
    fn parses_a_minimal_file_and_applies_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            data = "cases.csv"

            [model]
            population = 50000.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.as_deref(), Some(Path::new("cases.csv")));
        assert_eq!(cfg.model.population, Some(50_000.0));
        assert_eq!(cfg.spline.q_knots, 10);
        assert_eq!(cfg.reporting.len(), 1);
        assert_eq!(cfg.sampler.n_chains, HmcSettings::default().n_chains);
        cfg.model_spec(60).unwrap();
    }

    #[test]
    fn parses_nested_priors_and_reporting_breakpoints() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 7

            [model]
            family = "sikr"
            n_exposed = 0
            n_infectious = 3
            population = 2189138.0

            [priors]
            gamma = { kind = "truncated-normal", mean = 0.1, sd = 0.015, lo = 0.033333333333333333, hi = 1.0 }
            seed0 = { kind = "normal", mean = 21.88, sd = 7.29 }
            phi_inv = { kind = "exponential", rate = 10.0 }
            tau = { kind = "inverse-gamma", shape = 1.0, scale = 0.005 }

            [[reporting]]
            day = 92.0
            fraction = 0.15

            [[reporting]]
            day = 231.0
            fraction = 0.54
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.priors.alpha.is_none());
        assert!(matches!(
            cfg.priors.gamma,
            Prior::TruncatedNormal { mean, .. } if mean == 0.1
        ));
        let eta = cfg.reporting_schedule().unwrap();
        assert!((eta.eval(92.0) - 0.15).abs() < 1e-12);
        cfg.model_spec(300).unwrap();
    }

    #[test]
    fn default_priors_reject_a_sikr_model() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [model]
            family = "sikr"
            n_exposed = 0
            population = 1000.0
            "#,
        )
        .unwrap();
        assert!(matches!(cfg.model_spec(50), Err(ConfigError::Priors(_))));
    }

    #[test]
    fn serialization_round_trip_is_idempotent() {
        let cfg = RunConfig::two_wave_benchmark();
        let once = cfg.to_toml_string().unwrap();
        let reparsed = RunConfig::from_toml_str(&once).unwrap();
        assert_eq!(reparsed, cfg);
        let twice = reparsed.to_toml_string().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn hand_written_text_round_trips_through_parse_and_serialize() {
        let text = r#"
            seed = 99
            data = "d.csv"

            [model]
            population = 123.0

            [sampler]
            n_chains = 3
            step_size = 0.5
            "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.sampler.n_chains, 3);
        let rendered = cfg.to_toml_string().unwrap();
        let cfg2 = RunConfig::from_toml_str(&rendered).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(rendered, cfg2.to_toml_string().unwrap());
    }

    #[test]
    fn invalid_sampler_settings_are_rejected_at_parse_time() {
        let err = RunConfig::from_toml_str(
            r#"
            [sampler]
            step_size = 0.0
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn malformed_toml_reports_a_parse_error() {
        let err = RunConfig::from_toml_str("seed = ").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }
}
