//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{quantile_breakpoints, BSplineBasis, BasisSpec, FourierBasis, IndicatorBasis, PolynomialBasis, TauGrid};
use crate::dataio::{Dataset, ModelSpec};
use crate::inference::{BandwidthRule, InferenceConfig, Process, SeMode};
use crate::rearrange::RearrangeSpec;
use crate::synth::Dgp;

use super::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; relative paths are resolved against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BasisConfig {
    Bspline {
        #[serde(default = "cubic")]
        degree: usize,
        /// Explicit breakpoints; overrides `breaks_probs`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        breakpoints: Option<Vec<f64>>,
        /// Probabilities whose treatment quantiles become breakpoints.
        #[serde(default = "default_probs")]
        breaks_probs: Vec<f64>,
    },
    Polynomial {
        degree: usize,
    },
    Fourier {
        nbasis: usize,
        /// Defaults to the observed treatment range.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        period: Option<f64>,
    },
    Indicator,
}

fn cubic() -> usize {
    3
}

fn default_probs() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig::Bspline {
            degree: 3,
            breakpoints: None,
            breaks_probs: default_probs(),
        }
    }
}

impl BasisConfig {
    /// Builds the basis from the observed treatment values.
    pub fn build(&self, treatment: &[f64]) -> Result<BasisSpec, CliError> {
        Ok(match self {
            BasisConfig::Bspline {
                degree,
                breakpoints,
                breaks_probs,
            } => {
                let bp = match breakpoints {
                    Some(b) => b.clone(),
                    None => quantile_breakpoints(treatment, breaks_probs)?,
                };
                BasisSpec::BSpline(BSplineBasis::new(*degree, bp)?)
            }
            BasisConfig::Polynomial { degree } => BasisSpec::Polynomial(PolynomialBasis::fit(treatment, *degree)?),
            BasisConfig::Fourier { nbasis, period } => {
                let lo = treatment.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = treatment.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let p = period.unwrap_or(hi - lo);
                BasisSpec::Fourier(FourierBasis::new(*nbasis, p, (lo, hi))?)
            }
            BasisConfig::Indicator => BasisSpec::Indicator(IndicatorBasis::new(treatment.to_vec())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauConfig {
    /// Explicit grid; overrides `count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Evenly spaced grid `k / (count + 1)`.
    #[serde(default = "default_tau_count")]
    pub count: usize,
    /// Quantile indices shown in the printed table (all when empty).
    #[serde(default)]
    pub print: Vec<f64>,
}

fn default_tau_count() -> usize {
    9
}

impl Default for TauConfig {
    fn default() -> Self {
        TauConfig {
            values: None,
            count: default_tau_count(),
            print: Vec::new(),
        }
    }
}

impl TauConfig {
    pub fn grid(&self) -> Result<TauGrid, CliError> {
        let taus = match &self.values {
            Some(v) => v.clone(),
            None => (1..=self.count).map(|k| k as f64 / (self.count + 1) as f64).collect(),
        };
        Ok(TauGrid::new(taus, &self.print)?)
    }
}

/// How an averaged functional weights observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureConfig {
    /// Each observation counts once.
    #[default]
    Observations,
    /// Each distinct treatment value counts once.
    Distinct,
}

impl MeasureConfig {
    pub fn weights(self, dataset: &Dataset) -> Option<Vec<f64>> {
        match self {
            MeasureConfig::Observations => None,
            MeasureConfig::Distinct => {
                let uniq = dataset.unique_treatment();
                let mut mult = vec![0usize; uniq.len()];
                let idx: Vec<usize> = dataset
                    .treatment
                    .iter()
                    .map(|w| uniq.partition_point(|u| u < w))
                    .collect();
                for &k in &idx {
                    mult[k] += 1;
                }
                let d = uniq.len() as f64;
                Some(idx.iter().map(|&k| 1.0 / (d * mult[k] as f64)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    #[serde(default)]
    pub nderivs: usize,
    #[serde(default)]
    pub average: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_points: Option<Vec<f64>>,
    #[serde(default)]
    pub measure: MeasureConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default)]
    pub process: Process,
    #[serde(rename = "B", alias = "draws", default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "yes")]
    pub uniform: bool,
    #[serde(default)]
    pub se: SeMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    #[serde(default)]
    pub closed_form_se: bool,
}

fn default_draws() -> usize {
    500
}

fn default_alpha() -> f64 {
    0.05
}

fn default_seed() -> u64 {
    1
}

fn yes() -> bool {
    true
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            process: Process::Pivotal,
            draws: default_draws(),
            alpha: default_alpha(),
            uniform: true,
            se: SeMode::Unconditional,
            seed: default_seed(),
            bandwidth: BandwidthRule::HallSheather,
            closed_form_se: false,
        }
    }
}

impl InferenceSection {
    pub fn to_config(&self) -> InferenceConfig {
        InferenceConfig {
            process: self.process,
            draws: self.draws,
            alpha: self.alpha,
            uniform: self.uniform,
            se_mode: self.se,
            seed: self.seed,
            bandwidth: self.bandwidth,
            closed_form_se: self.closed_form_se,
            ..InferenceConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Result JSON (or the coverage report for `simulate`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
    /// Human-readable table; printed to stdout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    /// Estimate surface CSV written by `surface`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<PathBuf>,
    /// Load matrix CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: Dgp,
    pub n: usize,
    pub replications: usize,
    /// Processes compared in every replication.
    pub methods: Vec<Process>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            dgp: Dgp::Location,
            n: 500,
            replications: 200,
            methods: vec![Process::Pivotal],
            seed: default_seed(),
        }
    }
}

fn default_model() -> ModelSpec {
    Dgp::model_spec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub taus: TauConfig,
    #[serde(default)]
    pub functional: FunctionalConfig,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub rearrange: RearrangeSpec,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: default_model(),
            basis: BasisConfig::default(),
            taus: TauConfig::default(),
            functional: FunctionalConfig::default(),
            inference: InferenceSection::default(),
            rearrange: RearrangeSpec::default(),
            output: OutputConfig::default(),
            simulate: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Reads a config file and resolves relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        resolve(&mut cfg.data.path);
        resolve(&mut cfg.output.json);
        resolve(&mut cfg.output.table);
        resolve(&mut cfg.output.surface);
        resolve(&mut cfg.output.load);
        Ok(cfg)
    }

    /// Consistency checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        let f = &self.functional;
        if f.nderivs > crate::basis::MAX_DERIV {
            return Err(CliError::Config(format!("nderivs must be 0, 1 or 2, got {}", f.nderivs)));
        }
        if f.nderivs > 0 && matches!(self.basis, BasisConfig::Indicator) {
            return Err(CliError::Config("indicator basis has no derivatives; use nderivs = 0".into()));
        }
        if f.average && f.eval_points.is_some() {
            return Err(CliError::Config("eval_points cannot be combined with average = true".into()));
        }
        self.taus.grid()?;
        self.inference.to_config().validate()?;
        if let Some(sim) = &self.simulate {
            if sim.replications == 0 {
                return Err(CliError::Config("simulate.replications must be at least 1".into()));
            }
            if sim.methods.is_empty() || sim.methods.contains(&Process::None) {
                return Err(CliError::Config("simulate.methods must list inference processes".into()));
            }
        }
        Ok(())
    }
}
