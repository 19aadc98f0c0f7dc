//! TOML run configuration shared by the command-line front end and tests.
//!
//! ```toml
//! n = 7
//! t = 2
//! alphabet_size = 2
//! inputs = "uniform:1"        # or a list such as [0, 1, "bot", 1, 0, 0, 1], or "random"
//! corrupt = [5, 6]            # omitted: the last t ids when the adversary is not honest
//! adversary = "random"        # strategy name, or a path to a script file
//! seed = 1
//! runs = 10
//! budget_polynomial = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::adversary::{AdversaryError, AdversarySpec};
use crate::agreement::ConfigError;
use crate::eig::{ProcessId, Value};
use crate::report::Budget;
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

/// Input assignment: an explicit list, `"uniform:v"`, or `"random"` (drawn
/// from the alphabet per run seed).
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    List(Vec<Value>),
    Uniform(Value),
    Random,
}

impl<'de> Deserialize<'de> for Inputs {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List(Vec<Value>),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::List(v) => Ok(Inputs::List(v)),
            Raw::Text(s) if s == "random" => Ok(Inputs::Random),
            Raw::Text(s) => {
                let v = s
                    .strip_prefix("uniform:")
                    .ok_or_else(|| serde::de::Error::custom(format!("inputs `{s}`: expected a list, \"uniform:v\" or \"random\"")))?;
                v.trim().parse().map(Inputs::Uniform).map_err(serde::de::Error::custom)
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    n: usize,
    t: usize,
    #[serde(default = "default_alphabet")]
    alphabet_size: u32,
    inputs: Inputs,
    corrupt: Option<Vec<ProcessId>>,
    #[serde(default = "default_adversary")]
    adversary: String,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_runs")]
    runs: u32,
    budget_polynomial: Option<Vec<f64>>,
    #[serde(default)]
    enforce_budget: bool,
    #[serde(default)]
    remask_prior_rounds: bool,
    max_rounds: Option<u32>,
}

fn default_alphabet() -> u32 {
    2
}
fn default_adversary() -> String {
    "honest".into()
}
fn default_runs() -> u32 {
    1
}

/// A validated batch description. Run `i` uses seed `seed + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub t: usize,
    pub alphabet_size: u32,
    pub inputs: Inputs,
    /// `None` picks the last `t` ids for a non-honest adversary.
    pub corrupt: Option<Vec<ProcessId>>,
    pub adversary: AdversarySpec,
    pub seed: u64,
    pub runs: u32,
    pub budget: Budget,
    pub remask_prior_rounds: bool,
    pub max_rounds: Option<u32>,
}

impl RunConfig {
    /// Parses TOML text. Relative script paths resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, RunConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        let adversary = resolve_adversary(&raw.adversary, raw.alphabet_size, base)?;
        let budget = match raw.budget_polynomial {
            Some(coefficients) => Budget { coefficients, enforce: raw.enforce_budget },
            None => Budget { enforce: raw.enforce_budget, ..Budget::default() },
        };
        let cfg = RunConfig {
            n: raw.n,
            t: raw.t,
            alphabet_size: raw.alphabet_size,
            inputs: raw.inputs,
            corrupt: raw.corrupt,
            adversary,
            seed: raw.seed,
            runs: raw.runs,
            budget,
            remask_prior_rounds: raw.remask_prior_rounds,
            max_rounds: raw.max_rounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| RunConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path.parent())
    }

    /// Checks everything a run needs, using the first run's seed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.runs == 0 {
            return Err(ConfigError::Invalid("runs must be positive".into()));
        }
        if self.budget.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(ConfigError::Invalid("budget coefficients must be finite".into()));
        }
        self.sim_config(0).validate()
    }

    pub fn corrupt_ids(&self) -> Vec<ProcessId> {
        match &self.corrupt {
            Some(c) => c.clone(),
            None if self.adversary == AdversarySpec::Honest => Vec::new(),
            None => (self.n.saturating_sub(self.t)..self.n).map(|i| i as ProcessId).collect(),
        }
    }

    /// Simulator configuration for run `index` of the batch.
    pub fn sim_config(&self, index: u32) -> SimConfig {
        let seed = self.seed.wrapping_add(index as u64);
        let inputs = match &self.inputs {
            Inputs::List(v) => v.clone(),
            Inputs::Uniform(v) => vec![*v; self.n],
            Inputs::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d1a9u64);
                (0..self.n).map(|_| Value::Val(rng.gen_range(0..self.alphabet_size.max(1)))).collect()
            }
        };
        let mut cfg = SimConfig::new(self.n, self.t, inputs).with_adversary(self.corrupt_ids(), self.adversary.clone()).with_seed(seed);
        cfg.alphabet_size = self.alphabet_size;
        cfg.remask_prior_rounds = self.remask_prior_rounds;
        cfg.max_rounds = self.max_rounds;
        cfg
    }
}

/// Like [`AdversarySpec::resolve`], with relative script paths taken from
/// `base` when they exist there.
pub fn resolve_adversary(name: &str, alphabet_size: u32, base: Option<&Path>) -> Result<AdversarySpec, AdversaryError> {
    if let Some(base) = base {
        let candidate = base.join(name);
        if Path::new(name).is_relative() && candidate.is_file() {
            return AdversarySpec::resolve(&candidate.to_string_lossy(), alphabet_size);
        }
    }
    AdversarySpec::resolve(name, alphabet_size)
}
