//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7                  # master seed, mandatory
//! name = "demo"
//!
//! [problem]
//! kind = "logistic"         # logistic | quadratic_pl
//! nodes = 10
//! dim = 5
//! samples = 50              # logistic only
//! lambda = 0.001            # logistic only
//! omega = 1.0               # logistic only
//! rank_deficit = 0          # quadratic_pl only
//! # seed = 1                # defaults to a child of the master seed
//!
//! [network]
//! kind = "geometric"        # geometric | path | ring | complete
//! radius = 0.5
//! max_attempts = 100
//! weights = "scaled"        # laplacian | scaled (1 / (1 + max degree))
//!
//! [params]
//! alpha = 0.1
//! beta = 0.05
//! rho = 10.0
//! eta = 0.5                 # constant in (0, 1); or eta = "random" with eta_seed
//! horizon = 2000
//!
//! [noise]
//! u = 1.0                   # u_e = u_w = u on every node
//! r = 0.9
//!
//! [trace]
//! cadence = 1
//! lyapunov = false
//!
//! [run]
//! repeats = 10
//! # seeds = [1, 2, 3]       # overrides repeats
//! output = "out"
//! plot = true
//!
//! [sweep]                   # optional
//! parameter = "r"           # r | u
//! values = [0.0, 0.5, 0.9]
//! ```
//!
//! Any field can be overridden with `section.key=value` strings (top-level
//! keys have no section). Override values are parsed as TOML and fall back
//! to bare strings.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithm::{EtaSchedule, FreeConstants};
use crate::seeds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("override `{key}`: {msg}")]
    Override { key: String, msg: String },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Logistic,
    QuadraticPl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Geometric,
    Path,
    Ring,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Laplacian,
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Decay rate `r̄`.
    R,
    /// Initial scale `ū`.
    U,
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::R => "r",
            SweepParameter::U => "u",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub nodes: usize,
    pub dim: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub rank_deficit: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub kind: NetworkKind,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_weights")]
    pub weights: Weights,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Constant(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    #[serde(default = "default_eta")]
    pub eta: EtaSpec,
    pub eta_seed: Option<u64>,
    pub horizon: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    #[serde(default = "default_cadence")]
    pub cadence: u64,
    #[serde(default)]
    pub lyapunov: bool,
    pub c_theta: Option<f64>,
    pub gamma: Option<f64>,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            cadence: 1,
            lyapunov: false,
            c_theta: None,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub plot: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            repeats: 1,
            seeds: None,
            output: None,
            plot: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSection,
    pub network: NetworkSection,
    pub params: ParamsSection,
    #[serde(default = "default_noise")]
    pub noise: NoiseSection,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub run: RunSection,
    pub sweep: Option<SweepSection>,
}

fn default_samples() -> usize {
    50
}
fn default_lambda() -> f64 {
    0.001
}
fn default_omega() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    0.5
}
fn default_attempts() -> u32 {
    100
}
fn default_weights() -> Weights {
    Weights::Scaled
}
fn default_eta() -> EtaSpec {
    EtaSpec::Constant(0.5)
}
fn default_cadence() -> u64 {
    1
}
fn default_repeats() -> usize {
    1
}
fn default_name() -> String {
    "experiment".into()
}
fn default_noise() -> NoiseSection {
    NoiseSection { u: 0.0, r: 0.0 }
}

impl ExperimentConfig {
    /// Parses a config file with optional `section.key=value` overrides.
    pub fn parse(src: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = if overrides.is_empty() {
            toml::from_str(src).map_err(|e| de_error(src, &e))?
        } else {
            let mut table: toml::Table = toml::from_str(src).map_err(|e| de_error(src, &e))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            table
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Other(format!("after overrides: {}", e.message())))?
        };
        cfg.check(src, overrides)?;
        Ok(cfg)
    }

    /// Canonical TOML text; the config hash is taken over this.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text, ignoring where outputs are written.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.run.output = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn problem_seed(&self) -> u64 {
        self.problem.seed.unwrap_or_else(|| seeds::derive(self.seed, 1))
    }

    pub fn network_seed(&self) -> u64 {
        self.network.seed.unwrap_or_else(|| seeds::derive(self.seed, 2))
    }

    /// Noise seeds, one per repeat. Shared across sweep points so that
    /// points differ only in the swept quantity.
    pub fn run_seeds(&self) -> Vec<u64> {
        match &self.run.seeds {
            Some(s) => s.clone(),
            None => (0..self.run.repeats as u64).map(|j| seeds::derive(self.seed, 100 + j)).collect(),
        }
    }

    pub fn eta_schedule(&self) -> EtaSchedule {
        match &self.params.eta {
            EtaSpec::Constant(v) => EtaSchedule::Constant(*v),
            EtaSpec::Named(_) => EtaSchedule::Random {
                seed: self.params.eta_seed.unwrap_or_else(|| seeds::derive(self.seed, 3)),
            },
        }
    }

    pub fn free_constants(&self) -> Option<FreeConstants> {
        match (self.trace.c_theta, self.trace.gamma) {
            (Some(c_theta), Some(gamma)) => Some(FreeConstants { c_theta, gamma }),
            _ => None,
        }
    }

    fn check(&self, src: &str, overrides: &[String]) -> Result<(), ConfigError> {
        let fail = |section: &str, key: &str, msg: String| -> ConfigError {
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if overrides.iter().any(|o| o.split('=').next().map(str::trim) == Some(full.as_str())) {
                return ConfigError::Override { key: full, msg };
            }
            match locate(src, section, key) {
                Some(line) => ConfigError::Line { line, msg },
                None => ConfigError::Other(format!("{full}: {msg}")),
            }
        };
        let p = &self.problem;
        if p.nodes < 2 {
            return Err(fail("problem", "nodes", "need at least 2 nodes".into()));
        }
        if p.dim == 0 {
            return Err(fail("problem", "dim", "dimension must be positive".into()));
        }
        if p.kind == ProblemKind::Logistic && p.samples == 0 {
            return Err(fail("problem", "samples", "need at least one sample per node".into()));
        }
        if p.kind == ProblemKind::QuadraticPl && p.rank_deficit >= p.dim {
            return Err(fail("problem", "rank_deficit", "must be below dim".into()));
        }
        if !(p.lambda > 0.0 && p.omega > 0.0) {
            let key = if p.lambda > 0.0 { "omega" } else { "lambda" };
            return Err(fail("problem", key, "must be positive".into()));
        }
        let n = &self.network;
        if n.kind == NetworkKind::Geometric && !(n.radius > 0.0) {
            return Err(fail("network", "radius", "must be positive".into()));
        }
        let a = &self.params;
        for (key, v) in [("alpha", a.alpha), ("rho", a.rho)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(fail("params", key, format!("must be positive, got {v}")));
            }
        }
        if !(a.beta >= 0.0 && a.beta.is_finite()) {
            return Err(fail("params", "beta", format!("must be non-negative, got {}", a.beta)));
        }
        match &a.eta {
            EtaSpec::Constant(v) if !(*v > 0.0 && *v < 1.0) => {
                return Err(fail("params", "eta", format!("constant eta must lie in (0, 1), got {v}")));
            }
            EtaSpec::Named(s) if s != "random" => {
                return Err(fail("params", "eta", format!("expected a number or \"random\", got \"{s}\"")));
            }
            _ => {}
        }
        if !(self.noise.u >= 0.0 && self.noise.u.is_finite()) {
            return Err(fail("noise", "u", "must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.noise.r) {
            return Err(fail("noise", "r", "must lie in [0, 1)".into()));
        }
        if self.trace.cadence == 0 {
            return Err(fail("trace", "cadence", "must be at least 1".into()));
        }
        if self.trace.c_theta.is_some() != self.trace.gamma.is_some() {
            return Err(fail("trace", "c_theta", "c_theta and gamma go together".into()));
        }
        match &self.run.seeds {
            Some(s) if s.is_empty() => return Err(fail("run", "seeds", "seed list is empty".into())),
            None if self.run.repeats == 0 => return Err(fail("run", "repeats", "must be at least 1".into())),
            _ => {}
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(fail("sweep", "values", "no sweep values".into()));
            }
            for v in &sw.values {
                let ok = match sw.parameter {
                    SweepParameter::R => (0.0..1.0).contains(v),
                    SweepParameter::U => *v >= 0.0 && v.is_finite(),
                };
                if !ok {
                    return Err(fail("sweep", "values", format!("{v} is out of range for {}", sw.parameter)));
                }
            }
        }
        Ok(())
    }
}

fn de_error(src: &str, e: &toml::de::Error) -> ConfigError {
    match e.span() {
        Some(span) => ConfigError::Line {
            line: src[..span.start.min(src.len())].matches('\n').count() + 1,
            msg: e.message().to_string(),
        },
        None => ConfigError::Other(e.message().to_string()),
    }
}

/// 1-based line of `key = ...` inside `[section]` (top level when empty).
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override {
        key: spec.to_string(),
        msg: "expected section.key=value".into(),
    })?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = path.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cursor = table;
    for s in sections {
        let entry = cursor
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| ConfigError::Override {
            key: path.to_string(),
            msg: format!("`{s}` is not a section"),
        })?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
