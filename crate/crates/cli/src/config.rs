use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smswap::generator::{RecurrenceGrid, Stepper};
use smswap::model::{CorrelationCurve, SemiMarkovModel, SojournLaw, ValidationReport, VolatilityField};
use smswap::pricing::{PricingMethod, SwapContract};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

/// Model file: kernel, sojourn laws and the volatility inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(default)]
    pub states: Vec<String>,
    pub transition_matrix: Vec<Vec<f64>>,
    pub sojourn_laws: Vec<SojournLaw>,
    pub volatility: VolatilityField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volatility_2: Option<VolatilityField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationCurve>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Failure::io(format!("parsing {}: {e}", path.display())))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Failure::validation(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn kernel(&self) -> SemiMarkovModel {
        SemiMarkovModel::unchecked(self.transition_matrix.clone(), self.sojourn_laws.clone())
    }

    /// Kernel validation plus consistency of names, fields and correlation.
    pub fn validate(&self) -> (ValidationReport, Vec<String>) {
        let report = self.kernel().validate();
        let m = self.transition_matrix.len();
        let mut extra = Vec::new();
        if !self.states.is_empty() && self.states.len() != m {
            extra.push(format!("{} state names for {m} states", self.states.len()));
        }
        for p in self.volatility.problems(m) {
            extra.push(format!("volatility: {p}"));
        }
        if let Some(v) = &self.volatility_2 {
            for p in v.problems(m) {
                extra.push(format!("volatility_2: {p}"));
            }
        }
        if let Some(c) = &self.correlation {
            for p in c.problems() {
                extra.push(format!("correlation: {p}"));
            }
        }
        (report, extra)
    }

    pub fn checked_kernel(&self) -> Result<SemiMarkovModel, Failure> {
        let (report, extra) = self.validate();
        if !report.is_valid() || !extra.is_empty() {
            let mut msg = report.to_string();
            for e in extra {
                msg.push_str(&format!("\n  violation: {e}"));
            }
            return Err(Failure::validation(msg));
        }
        Ok(self.kernel())
    }

    pub fn state_index(&self, state: &StateRef) -> Result<usize, Failure> {
        let m = self.transition_matrix.len();
        let idx = match state {
            StateRef::Index(i) => *i,
            StateRef::Name(name) => self
                .states
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| Failure::validation(format!("unknown state {name:?}")))?,
        };
        if idx >= m {
            return Err(Failure::validation(format!("initial state {idx} out of range for {m} states")));
        }
        Ok(idx)
    }
}

/// A state given by 0-based index or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateRef {
    Index(usize),
    Name(String),
}

impl Default for StateRef {
    fn default() -> Self {
        StateRef::Index(0)
    }
}

impl std::str::FromStr for StateRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => StateRef::Index(i),
            Err(_) => StateRef::Name(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationOrder {
    #[default]
    Zero,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    /// Recurrence-time step used when `gamma_max`/`n_gamma` are not both given.
    #[serde(default = "default_gamma_step")]
    pub gamma_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_gamma: Option<usize>,
    #[serde(default = "default_n_t")]
    pub n_t: usize,
    #[serde(default)]
    pub method: PricingMethod,
    #[serde(default)]
    pub stepper: Stepper,
    #[serde(default)]
    pub correlation_order: CorrelationOrder,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_gamma_step() -> f64 {
    0.01
}

fn default_n_t() -> usize {
    64
}

fn default_n_paths() -> usize {
    100_000
}

fn default_seed() -> u64 {
    1
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            gamma_step: default_gamma_step(),
            gamma_max: None,
            n_gamma: None,
            n_t: default_n_t(),
            method: PricingMethod::default(),
            stepper: Stepper::default(),
            correlation_order: CorrelationOrder::default(),
            n_paths: default_n_paths(),
            seed: default_seed(),
        }
    }
}

impl Numerics {
    pub fn check(&self) -> Result<(), Failure> {
        if !(self.gamma_step.is_finite() && self.gamma_step > 0.0) {
            return Err(Failure::validation(format!("gamma_step must be positive, got {}", self.gamma_step)));
        }
        if self.gamma_max.is_some() != self.n_gamma.is_some() {
            return Err(Failure::validation("gamma_max and n_gamma must be given together"));
        }
        if self.n_t < 8 {
            return Err(Failure::validation(format!("n_t must be at least 8, got {}", self.n_t)));
        }
        if self.n_paths < 1000 {
            return Err(Failure::validation(format!("n_paths must be at least 1000, got {}", self.n_paths)));
        }
        Ok(())
    }

    pub fn grid(&self, model: &SemiMarkovModel) -> smswap::error::Result<RecurrenceGrid> {
        match (self.gamma_max, self.n_gamma) {
            (Some(g), Some(n)) => RecurrenceGrid::new(g, n),
            _ => RecurrenceGrid::covering(model, self.gamma_step),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    /// CSV file for the moment curves behind the price.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<PathBuf>,
    /// CSV file for the dense generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<PathBuf>,
}

/// One job: model, contract, numerics and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub schema_version: u32,
    /// Model file, relative to the config file.
    pub model: PathBuf,
    #[serde(default)]
    pub initial_state: StateRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract: Option<SwapContract>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub output: Output,
}

impl JobConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        let mut cfg: JobConfig =
            serde_json::from_str(&text).map_err(|e| Failure::io(format!("parsing {}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Failure::validation(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                cfg.schema_version
            )));
        }
        if cfg.model.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.model = dir.join(&cfg.model);
            }
        }
        Ok(cfg)
    }

    pub fn bare(model: PathBuf) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model,
            initial_state: StateRef::default(),
            contract: None,
            numerics: Numerics::default(),
            output: Output::default(),
        }
    }
}
