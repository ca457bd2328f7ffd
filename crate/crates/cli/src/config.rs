//! Experiment configuration: a TOML document with one table per module.
//!
//! Every knob has a default except `domain.n` and `action.alpha`. Unknown
//! keys are rejected, and `--override key=value` edits the parsed document
//! before it is typed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdaf_core::diagnostics::{DiagnoseOptions, MinimaxOptions};
use sdaf_core::solver::Branch;
use sdaf_core::spectral::EigenOptions;
use sdaf_core::{
    ActionConfig, ContinuationSchedule, FlatTorus2, HomotopyClass, Perturbation, SolverConfig, SpinStructure, SurfaceDomain,
    Target,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Solve,
    Saddle,
    Continue,
    Flow,
    Spectrum,
    Diagnose,
    Uniqueness,
    Convexity,
    Growthcheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Solve => "solve",
            Experiment::Saddle => "saddle",
            Experiment::Continue => "continue",
            Experiment::Flow => "flow",
            Experiment::Spectrum => "spectrum",
            Experiment::Diagnose => "diagnose",
            Experiment::Uniqueness => "uniqueness",
            Experiment::Convexity => "convexity",
            Experiment::Growthcheck => "growthcheck",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainBlock,
    #[serde(default)]
    pub target: TargetBlock,
    #[serde(default)]
    pub class: ClassBlock,
    pub action: ActionBlock,
    #[serde(default)]
    pub initial: InitialBlock,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub schedule: Option<ScheduleBlock>,
    #[serde(default)]
    pub spectrum: SpectrumBlock,
    #[serde(default)]
    pub flow: FlowBlock,
    #[serde(default)]
    pub diagnostics: DiagnoseOptions,
    /// Sampled linking estimates; computed by `saddle` and `diagnose` when present.
    #[serde(default)]
    pub minimax: Option<MinimaxBlock>,
    #[serde(default)]
    pub uniqueness: UniquenessBlock,
    #[serde(default)]
    pub convexity: ConvexityBlock,
    #[serde(default)]
    pub growth: GrowthBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub n: usize,
    #[serde(default = "one")]
    pub side_length: f64,
    /// Signs of the spin structure along the two generators.
    #[serde(default = "antiperiodic")]
    pub spin_structure: [i32; 2],
}

fn one() -> f64 {
    1.0
}

fn antiperiodic() -> [i32; 2] {
    [-1, -1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetBlock {
    Torus {
        #[serde(default = "one")]
        period: f64,
    },
    Sphere,
}

impl Default for TargetBlock {
    fn default() -> Self {
        TargetBlock::Torus { period: 1.0 }
    }
}

/// Winding matrix for torus targets, degree for the sphere. Identity and
/// degree 0 when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassBlock {
    pub winding: Option<[[i64; 2]; 2]>,
    pub degree: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBlock {
    pub alpha: f64,
    /// Perturbation scale; give this or `k`, not both. Zero if neither.
    pub epsilon: Option<f64>,
    pub k: Option<u32>,
    /// Exponent of the power perturbation; `4 alpha / (3 alpha - 2)` if absent.
    pub mu: Option<f64>,
    /// Replaces the power perturbation.
    pub perturbation: Option<Perturbation>,
}

impl PartialEq for ActionBlock {
    fn eq(&self, other: &Self) -> bool {
        self.alpha == other.alpha
            && self.epsilon == other.epsilon
            && self.k == other.k
            && self.mu == other.mu
            && serde_json::to_string(&self.perturbation).ok() == serde_json::to_string(&other.perturbation).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialBlock {
    /// Affine torus map or constant sphere map plus smooth noise.
    Smooth {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    Affine {
        #[serde(default)]
        offset: [f64; 2],
    },
    Constant {
        point: Vec<f64>,
    },
    Bubble {
        #[serde(default = "centre")]
        center: [f64; 2],
        scale: f64,
        radius: f64,
    },
    /// `phi` (and `psi` if stored) from a field archive.
    Archive {
        path: PathBuf,
    },
}

fn default_amplitude() -> f64 {
    0.05
}

fn centre() -> [f64; 2] {
    [0.5, 0.5]
}

impl Default for InitialBlock {
    fn default() -> Self {
        InitialBlock::Smooth {
            amplitude: default_amplitude(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub alphas: Vec<f64>,
    pub ks: Vec<u32>,
    pub energy_bound: f64,
    #[serde(default = "nontrivial")]
    pub branch: Branch,
    #[serde(default = "eight")]
    pub spectral_count: usize,
}

fn nontrivial() -> Branch {
    Branch::Nontrivial
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumBlock {
    pub count: usize,
    /// Kernel threshold; `1e-6 * 2 pi / side_length` if absent.
    pub zero_threshold: Option<f64>,
    pub eigen: EigenOptions,
}

impl Default for SpectrumBlock {
    fn default() -> Self {
        Self {
            count: 8,
            zero_threshold: None,
            eigen: EigenOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowBlock {
    /// Flow time; `solver.flow_horizon` if absent.
    pub horizon: Option<f64>,
    /// L2 norm of the random initial spinor.
    pub psi_amplitude: f64,
}

impl Default for FlowBlock {
    fn default() -> Self {
        Self {
            horizon: None,
            psi_amplitude: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimaxBlock {
    pub samples: usize,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub rho: Option<f64>,
}

impl Default for MinimaxBlock {
    fn default() -> Self {
        Self {
            samples: 1000,
            r1: None,
            r2: None,
            rho: None,
        }
    }
}

impl MinimaxBlock {
    pub fn options(&self, seed: u64) -> MinimaxOptions {
        MinimaxOptions {
            samples: self.samples,
            seed,
            r1: self.r1,
            r2: self.r2,
            rho: self.rho,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniquenessBlock {
    pub trials: usize,
}

impl Default for UniquenessBlock {
    fn default() -> Self {
        Self { trials: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexityBlock {
    pub steps: usize,
    /// Noise amplitude of the second endpoint.
    pub amplitude: f64,
}

impl Default for ConvexityBlock {
    fn default() -> Self {
        Self {
            steps: 11,
            amplitude: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthBlock {
    pub samples: usize,
}

impl Default for GrowthBlock {
    fn default() -> Self {
        Self { samples: 16 }
    }
}

/// Parse a value the way it would appear on the right of `=` in TOML,
/// falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::key(spec, "override must have the form key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::key(key, "empty path segment"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::key(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::ConfigSyntax {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        doc.try_into().map_err(|e: toml::de::Error| CliError::ConfigSyntax {
            path: origin.to_path_buf(),
            message: e.to_string().split_whitespace().collect::<Vec<_>>().join(" "),
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Serialize(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn domain(&self) -> Result<SurfaceDomain> {
        let d = &self.domain;
        let spin = SpinStructure::from_signs(d.spin_structure[0], d.spin_structure[1])
            .map_err(|e| CliError::key("domain.spin_structure", e.to_string()))?;
        SurfaceDomain::new(d.n, d.side_length, spin).map_err(|e| CliError::key("domain", e.to_string()))
    }

    pub fn target(&self) -> Result<Target> {
        match self.target {
            TargetBlock::Torus { period } => Ok(Target::Torus(
                FlatTorus2::new(period).map_err(|e| CliError::key("target.period", e.to_string()))?,
            )),
            TargetBlock::Sphere => Ok(Target::sphere()),
        }
    }

    pub fn class(&self) -> Result<HomotopyClass> {
        match (self.target, self.class.winding, self.class.degree) {
            (_, Some(_), Some(_)) => Err(CliError::key("class", "give either `winding` or `degree`, not both")),
            (TargetBlock::Torus { .. }, Some(a), None) => Ok(HomotopyClass::Winding(a)),
            (TargetBlock::Torus { .. }, None, None) => Ok(HomotopyClass::IDENTITY),
            (TargetBlock::Torus { .. }, None, Some(_)) => Err(CliError::key("class.degree", "torus targets take a winding matrix")),
            (TargetBlock::Sphere, None, Some(d)) => Ok(HomotopyClass::Degree(d)),
            (TargetBlock::Sphere, None, None) => Ok(HomotopyClass::Degree(0)),
            (TargetBlock::Sphere, Some(_), None) => Err(CliError::key("class.winding", "sphere targets take a degree")),
        }
    }

    pub fn epsilon(&self) -> Result<f64> {
        match (self.action.epsilon, self.action.k) {
            (Some(_), Some(_)) => Err(CliError::key("action.k", "give either `epsilon` or `k`, not both")),
            (Some(e), None) => Ok(e),
            (None, Some(0)) => Err(CliError::key("action.k", "k must be a positive integer")),
            (None, Some(k)) => Ok(1.0 / k as f64),
            (None, None) => Ok(0.0),
        }
    }

    /// Validated action parameters.
    pub fn action_config(&self) -> Result<ActionConfig> {
        let a = &self.action;
        let eps = self.epsilon()?;
        let mu = a.mu.unwrap_or_else(|| ActionConfig::canonical_exponent(a.alpha));
        let key_err = |e: sdaf_core::Error| match e {
            sdaf_core::Error::Config { key, message } => CliError::key(format!("action.{key}"), message),
            other => CliError::Core(other),
        };
        let mut cfg = ActionConfig::with_exponent(a.alpha, eps, mu).map_err(key_err)?;
        if let Some(p) = &a.perturbation {
            cfg = cfg.with_perturbation(p.clone()).map_err(key_err)?;
        }
        Ok(cfg)
    }

    /// The configured perturbation without the admissibility window, for
    /// growth checks on arbitrary hooks.
    pub fn perturbation(&self) -> Perturbation {
        match &self.action.perturbation {
            Some(p) => p.clone(),
            None => Perturbation::canonical(
                self.action
                    .mu
                    .unwrap_or_else(|| ActionConfig::canonical_exponent(self.action.alpha)),
            ),
        }
    }

    pub fn schedule(&self) -> Result<ContinuationSchedule> {
        let s = self
            .schedule
            .as_ref()
            .ok_or_else(|| CliError::key("schedule", "continuation needs a [schedule] table"))?;
        let sched = ContinuationSchedule {
            alphas: s.alphas.clone(),
            ks: s.ks.clone(),
            solver: self.solver,
            energy_bound: s.energy_bound,
            mu: self.action.mu,
            branch: s.branch,
            spectral_count: s.spectral_count,
        };
        sched.validate().map_err(|e| match e {
            sdaf_core::Error::Config { key, message } => CliError::key(key, message),
            other => CliError::Core(other),
        })?;
        Ok(sched)
    }

    /// Checks every block the experiment will touch before any compute.
    pub fn validate(&self, kind: Experiment) -> Result<()> {
        self.domain()?;
        self.target()?;
        self.class()?;
        self.solver.validate().map_err(|e| match e {
            sdaf_core::Error::Config { key, message } => CliError::key(format!("solver.{key}"), message),
            other => CliError::Core(other),
        })?;
        if kind == Experiment::Growthcheck {
            self.epsilon()?;
            if self.growth.samples == 0 {
                return Err(CliError::key("growth.samples", "need at least one sample"));
            }
        } else if matches!(kind, Experiment::Solve | Experiment::Uniqueness | Experiment::Convexity) {
            if !(self.action.alpha >= 1.0 && self.action.alpha <= 2.0) {
                return Err(CliError::key("action.alpha", format!("alpha must lie in [1, 2], got {}", self.action.alpha)));
            }
        } else {
            self.action_config()?;
        }
        if kind == Experiment::Continue {
            self.schedule()?;
        }
        if self.spectrum.count == 0 {
            return Err(CliError::key("spectrum.count", "need at least one eigenpair"));
        }
        if kind == Experiment::Uniqueness && self.uniqueness.trials < 2 {
            return Err(CliError::key("uniqueness.trials", "need at least two trials"));
        }
        if kind == Experiment::Convexity && self.convexity.steps < 3 {
            return Err(CliError::key("convexity.steps", "need at least three steps"));
        }
        Ok(())
    }
}
