use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cde::CdeConfig;
use crate::error::{LipCdeError, Result};
use crate::model::{ModelConfig, Variant};
use crate::outcome::OutcomeConfig;
use crate::sim::SimConfig;
use crate::spectral::SpectralConfig;
use crate::train::{LossConfig, TrainConfig};

/// Sweep settings used by the evaluate and ablate commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gammas: Vec<f64>,
    pub missing_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Store measured run time in metrics.json (breaks byte-identical reruns).
    pub record_wallclock: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            missing_rates: vec![0.0, 0.15, 0.3],
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            record_wallclock: false,
        }
    }
}

fn default_run_id() -> String {
    "run".to_string()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub cde: CdeConfig,
    #[serde(default)]
    pub outcome: OutcomeConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: default_run_id(),
            output_dir: default_output_dir(),
            sim: SimConfig::default(),
            spectral: SpectralConfig::default(),
            cde: CdeConfig::default(),
            outcome: OutcomeConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LipCdeError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LipCdeError::Config(m) => LipCdeError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(LipCdeError::config("run_id must be a non-empty name without path separators"));
        }
        self.sim.validate()?;
        self.spectral.validate()?;
        self.cde.validate()?;
        self.outcome.validate()?;
        self.train.validate()?;
        if let Some(g) = self.eval.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(LipCdeError::config(format!("eval.gammas entries must lie in [0, 1], got {g}")));
        }
        if let Some(r) = self.eval.missing_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(LipCdeError::config(format!(
                "eval.missing_rates entries must lie in [0, 1), got {r}"
            )));
        }
        if self.eval.seeds.is_empty() || self.eval.variants.is_empty() || self.eval.gammas.is_empty() {
            return Err(LipCdeError::config("eval.seeds, eval.variants and eval.gammas must be non-empty"));
        }
        if self.eval.missing_rates.is_empty() {
            return Err(LipCdeError::config("eval.missing_rates must be non-empty"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            spectral: self.spectral.clone(),
            cde: self.cde.clone(),
            outcome: self.outcome.clone(),
        }
    }

    /// Every setting, defaults filled in, in a fixed key order.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_toml`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[sim]\nn_patient = 3").is_err());
    }

    #[test]
    fn out_of_range_gamma_is_a_config_error() {
        let e = ExperimentConfig::from_toml_str("[sim]\ngamma_deg = 1.5").unwrap_err();
        assert!(matches!(e, LipCdeError::Config(_)));
    }

    #[test]
    fn canonical_text_round_trips_and_hash_is_stable() {
        let cfg = ExperimentConfig::from_toml_str("run_id = \"x\"\n[train]\nepochs = 3\n[eval]\nvariants = [\"full\", \"wo_lip\"]")
            .unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.canonical_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
