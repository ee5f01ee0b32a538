//! Experiment configuration: JSON with a fixed schema. Unknown keys are
//! hard errors so typos in sweep definitions fail loudly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xdomainmix::data::{gen_rotated_moons, gen_spurious_blobs, DatasetBundle, RotatedMoonsSpec, SpuriousBlobsSpec};
use xdomainmix::model::ArchConfig;
use xdomainmix::training::TrainConfig;

/// Configuration errors exit with code 2; everything else is code 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {}", m),
            CliError::Run(e) => write!(f, "{:#}", e),
        }
    }
}

impl std::error::Error for CliError {}

impl From<xdomainmix::Error> for CliError {
    fn from(e: xdomainmix::Error) -> Self {
        CliError::Run(anyhow::Error::new(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(anyhow::Error::new(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(anyhow::Error::new(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DatasetSpec {
    SpuriousBlobs(SpuriousBlobsSpec),
    RotatedMoons(RotatedMoonsSpec),
}

/// Network shape settings; input/output widths come from the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSettings {
    pub extractor_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ArchSettings {
    fn default() -> Self {
        ArchSettings {
            extractor_hidden: vec![64],
            feature_dim: 32,
            head_hidden: vec![32],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub arch: ArchSettings,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        match &self.dataset {
            DatasetSpec::SpuriousBlobs(s) => {
                s.validate().map_err(|e| CliError::Config(e.to_string()))?
            }
            DatasetSpec::RotatedMoons(_) => {}
        }
        Ok(())
    }

    pub fn build_bundle(&self) -> CliResult<DatasetBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        let bundle = match &self.dataset {
            DatasetSpec::SpuriousBlobs(s) => gen_spurious_blobs(s, &mut rng)?,
            DatasetSpec::RotatedMoons(s) => gen_rotated_moons(s, &mut rng)?,
        };
        Ok(bundle)
    }

    pub fn resolve_arch(&self, bundle: &DatasetBundle) -> ArchConfig {
        ArchConfig {
            input_dim: bundle.input_dim,
            extractor_hidden: self.arch.extractor_hidden.clone(),
            feature_dim: self.arch.feature_dim,
            head_hidden: self.arch.head_hidden.clone(),
            num_classes: bundle.num_classes,
            num_domains: bundle.num_domains,
        }
    }
}

/// "3", "0,2,5", and "0..5" (half-open) all work.
pub fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| bad_seeds(s))?;
        let hi: u64 = b.trim().parse().map_err(|_| bad_seeds(s))?;
        if lo >= hi {
            return Err(bad_seeds(s));
        }
        return Ok((lo..hi).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad_seeds(s)))
        .collect::<CliResult<_>>()?;
    if seeds.is_empty() {
        return Err(bad_seeds(s));
    }
    Ok(seeds)
}

fn bad_seeds(s: &str) -> CliError {
    CliError::Config(format!(
        "cannot parse seeds '{}': expected N, N,M,... or LO..HI",
        s
    ))
}

pub fn parse_fractions(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("cannot parse fraction '{}'", p)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_forms() {
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("0,2,5").unwrap(), vec![0, 2, 5]);
        assert_eq!(parse_seeds("0..5").unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = r#"{"dataset":{"kind":"spurious_blobs","params":{}},"typo_key":1}"#;
        let err = serde_json::from_str::<ExperimentConfig>(text).unwrap_err();
        assert!(err.to_string().contains("typo_key"));
    }

    #[test]
    fn defaults_fill_in() {
        let text = r#"{"dataset":{"kind":"rotated_moons","params":{}}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.arch.feature_dim, 32);
        assert_eq!(cfg.train.total_steps, 3000);
    }
}
