use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use elmo_core::lie::CheckOptions;
use elmo_core::model::{Architecture, TrainConfig};
use elmo_core::sim::{ControllerKind, PlantSpec, Scenario};
use elmo_core::{LqrWeights, SampleBox};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A parsed configuration and the directory its relative paths refer to.
pub struct Loaded<T> {
    pub config: T,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

/// Writes `run.toml` (the effective configuration after flag overrides,
/// preceded by its SHA-256) and returns the hash.
pub fn echo<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<String> {
    let body = toml::to_string(config).context("serializing the effective configuration")?;
    let hash = hex::encode(Sha256::digest(body.as_bytes()));
    let text = format!("# elmo {command}\n# config sha256 = {hash}\n{body}");
    fs::write(out.join("run.toml"), text).context("writing run.toml")?;
    Ok(hash)
}

/// `gen-data`: the experiment itself.
pub use elmo_core::sim::ExperimentConfig as GenDataConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    /// Training dataset CSV.
    pub data: PathBuf,
    /// Held-out experiment for the R² table; without it the validation
    /// blocks of the training data are replayed instead.
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Seeds the parameter initialization; `train.seed` orders the batches.
    /// The `--seed` flag sets both.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    /// RK4 steps per sample in the free-run evaluation.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Largest relative error accepted from the trained maps' inverse round
    /// trips on the data.
    #[serde(default = "default_round_trip_tolerance")]
    pub round_trip_tolerance: f64,
}

fn default_round_trip_tolerance() -> f64 {
    1e-9
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// Model file; alternatively `plant` names a teacher whose own model is
    /// used.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub plant: Option<PlantSpec>,
    pub y_d: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(default)]
    pub weights: LqrWeights,
    #[serde(default = "default_target_tolerance")]
    pub target_tolerance: f64,
}

fn default_target_tolerance() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// The true system.
    pub plant: PlantSpec,
    /// Controller model file; defaults to the plant's own model, which
    /// requires a teacher plant.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Controllers to run on the same scenario; defaults to the scenario's.
    #[serde(default)]
    pub compare: Vec<ControllerKind>,
    /// Largest barrier value accepted from the barrier controller before
    /// the run counts as failed.
    #[serde(default = "default_max_h_tolerance")]
    pub max_h_tolerance: f64,
    pub scenario: Scenario,
}

fn default_max_h_tolerance() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// A built-in system name.
    #[serde(default)]
    pub fixture: Option<String>,
    /// A system file (`name`, `f`, `g`, optional `[domain]`).
    #[serde(default)]
    pub system: Option<PathBuf>,
    /// Sampling box; overrides the system file's. Defaults to `[−1, 1]ⁿ`.
    #[serde(default)]
    pub domain: Option<SampleBox>,
    #[serde(default)]
    pub options: CheckOptions,
}
