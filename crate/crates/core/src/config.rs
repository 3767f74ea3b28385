//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! law = 0.25, 0.25, 0.5
//! kernel = strict
//! n = 3
//! pairs = 1,0 : 1,1 ; 0,1 : 2,1
//! ```
//!
//! Unknown keys are errors. Later assignments (including command-line
//! overrides) replace earlier ones.

use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::coupling::CouplingKind;
use crate::lattice::{KernelKind, Site};
use crate::offspring::{LawError, OffspringLaw};
use crate::simulator::{Sampling, DEFAULT_CAP};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("invalid offspring law: {0}")]
    Law(#[from] LawError),
    #[error("cannot read config file {path}: {source}")]
    Read { path: String, source: std::io::Error },
}

/// Every knob of every command, with defaults. Serialized verbatim into
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replicas: u64,
    pub law: Vec<f64>,
    pub survival: f64,
    pub kernel: KernelKind,
    pub dim: usize,
    pub n: i32,
    /// 0 resolves to `10 n^2`.
    pub horizon: u64,
    pub cap: u64,
    pub sampling: Sampling,
    pub kind: CouplingKind,
    /// Free-evolution generations (couple) or count time (verify-counts).
    pub steps: u64,
    /// 0 disables invariant checks; k checks every k-th generation.
    pub check_every: u64,
    pub alpha: f64,
    pub eps: f64,
    pub max_iter: u64,
    pub t_max: u64,
    pub start: Site,
    pub times: Vec<u64>,
    pub lambda: f64,
    pub t: f64,
    pub ladder: Vec<u64>,
    /// Parent survival on every ladder rung; `None` uses `sqrt(1 - 1/N)`.
    pub ladder_survival: Option<f64>,
    pub gamma_replicas: u64,
    pub radius: i32,
    pub probes: Vec<Site>,
    pub pairs: Vec<(Site, Site)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            replicas: 1000,
            law: vec![0.5, 0.0, 0.5],
            survival: 0.0,
            kernel: KernelKind::Strict,
            dim: 2,
            n: 3,
            horizon: 0,
            cap: DEFAULT_CAP,
            sampling: Sampling::Aggregated,
            kind: CouplingKind::AxisShift1,
            steps: 0,
            check_every: 1,
            alpha: 0.01,
            eps: crate::oracle::DEFAULT_EPS,
            max_iter: crate::oracle::DEFAULT_MAX_ITER,
            t_max: 200,
            start: Site::xy(0, 0),
            times: vec![1, 5, 20],
            lambda: 0.2,
            t: 1.0,
            ladder: vec![20, 40, 80],
            ladder_survival: None,
            gamma_replicas: 0,
            radius: 12,
            probes: vec![Site::xy(0, 0)],
            pairs: vec![
                (Site::xy(1, 0), Site::xy(1, 1)),
                (Site::xy(0, 1), Site::xy(2, 1)),
            ],
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.trim().parse().map_err(|e: T::Err| bad(key, value, e))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: ToString,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

/// `"x,y"` or `"(x, y)"`, any dimension.
pub fn parse_site(key: &str, value: &str) -> Result<Site, ConfigError> {
    let inner = value.trim().trim_start_matches('(').trim_end_matches(')');
    let coords: Vec<i32> = parse_list(key, inner)?;
    Site::new(&coords).map_err(|e| bad(key, value, e))
}

fn parse_sites(key: &str, value: &str) -> Result<Vec<Site>, ConfigError> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_site(key, s))
        .collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(Site, Site)>, ConfigError> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| bad(key, p, "pairs are written `x,y : x,y`"))?;
            Ok((parse_site(key, a)?, parse_site(key, b)?))
        })
        .collect()
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed", "replicas", "law", "survival", "kernel", "dim", "n", "horizon", "cap",
        "sampling", "kind", "steps", "check_every", "alpha", "eps", "max_iter", "t_max",
        "start", "times", "lambda", "t", "ladder", "ladder_survival", "gamma_replicas", "radius", "probes",
        "pairs",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "replicas" => self.replicas = parse_num(key, v)?,
            "law" => self.law = parse_list(key, v)?,
            "survival" => self.survival = parse_num(key, v)?,
            "kernel" => {
                self.kernel = match v.to_ascii_lowercase().as_str() {
                    "lazy" => KernelKind::Lazy,
                    "strict" => KernelKind::Strict,
                    "generalized" => KernelKind::Generalized,
                    _ => return Err(bad(key, v, "expected lazy, strict or generalized")),
                }
            }
            "dim" => self.dim = parse_num(key, v)?,
            "n" => self.n = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "cap" => self.cap = parse_num(key, v)?,
            "sampling" => {
                self.sampling = match v.to_ascii_lowercase().as_str() {
                    "per-particle" | "per_particle" => Sampling::PerParticle,
                    "aggregated" => Sampling::Aggregated,
                    _ => return Err(bad(key, v, "expected per-particle or aggregated")),
                }
            }
            "kind" => self.kind = v.parse().map_err(|e: String| bad(key, v, e))?,
            "steps" => self.steps = parse_num(key, v)?,
            "check_every" => self.check_every = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "max_iter" => self.max_iter = parse_num(key, v)?,
            "t_max" => self.t_max = parse_num(key, v)?,
            "start" => self.start = parse_site(key, v)?,
            "times" => self.times = parse_list(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "t" => self.t = parse_num(key, v)?,
            "ladder" => self.ladder = parse_list(key, v)?,
            "ladder_survival" => {
                self.ladder_survival = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "gamma_replicas" => self.gamma_replicas = parse_num(key, v)?,
            "radius" => self.radius = parse_num(key, v)?,
            "probes" => self.probes = parse_sites(key, v)?,
            "pairs" => self.pairs = parse_pairs(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every assignment of a config text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        self.set(k, v)
    }

    pub fn offspring_law(&self) -> Result<OffspringLaw, ConfigError> {
        Ok(OffspringLaw::new(self.law.clone(), self.survival)?)
    }

    /// Checks cross-field consistency and fills derived defaults.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.replicas == 0 {
            return invalid("replicas must be at least 1".into());
        }
        if self.dim == 0 || self.dim > crate::lattice::MAX_DIM {
            return invalid(format!("dim must lie in 1..={}", crate::lattice::MAX_DIM));
        }
        if self.n < 1 {
            return invalid("n must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid("alpha must lie in (0, 1)".into());
        }
        if self.cap == 0 {
            return invalid("cap must be positive".into());
        }
        self.offspring_law()?;
        for s in std::iter::once(&self.start)
            .chain(&self.probes)
            .chain(self.pairs.iter().flat_map(|(a, b)| [a, b]))
        {
            if s.dim() != self.dim {
                return invalid(format!("site {s} does not have dimension {}", self.dim));
            }
        }
        if self.horizon == 0 {
            self.horizon = 10 * (self.n as u64).pow(2);
        }
        Ok(self)
    }
}
