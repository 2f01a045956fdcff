use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use catchflux::laplace::FitConfig;
use catchflux::synth::SynthSpec;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SingleSource,
    TwoSource,
    Custom,
}

/// Everything a run depends on. Loaded from `--config` and then overridden
/// by command-line flags; the merged value is echoed into the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub groundwater: Option<PathBuf>,
    /// Existing fit JSON for `predict` and `report`.
    pub fit_result: Option<PathBuf>,
    /// Second fit JSON for the explained-deviation comparison in `report`.
    pub compare: Option<PathBuf>,
    pub screens: Option<PathBuf>,
    pub gvf: Option<PathBuf>,
    pub links: Option<PathBuf>,
    pub intersect: Option<PathBuf>,
    pub ph_resolution: Option<f64>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Not echoed: results do not depend on it.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    pub model: Option<ModelKind>,
    pub folds: Option<usize>,
    pub fit: Option<FitConfig>,
    pub synth: Option<SynthSpec>,
}

#[derive(Deserialize)]
struct ManifestEnvelope {
    config: RunConfig,
}

impl RunConfig {
    /// Reads a config file; a previous run's `manifest.json` is accepted too.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
        if value.get("tool").and_then(|t| t.as_str()) == Some("catchflux") && value.get("config").is_some() {
            let env: ManifestEnvelope = serde_json::from_value(value)
                .with_context(|| format!("{}: malformed manifest config", path.display()))?;
            return Ok(env.config);
        }
        serde_json::from_value(value).with_context(|| format!("{}: invalid config", path.display()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn model(&self) -> ModelKind {
        self.model.unwrap_or(ModelKind::SingleSource)
    }

    /// The fit settings with the run seed applied.
    pub fn fit_config(&self) -> FitConfig {
        let mut cfg = self.fit.clone().unwrap_or_default();
        cfg.seed = self.seed();
        cfg
    }
}

/// A required input path that must exist.
pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let Some(path) = value.as_deref() else {
        bail!("missing required input --{flag}");
    };
    if !path.exists() {
        bail!("input file {} (--{flag}) does not exist", path.display());
    }
    Ok(path)
}
