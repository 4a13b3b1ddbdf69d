//! Run configuration: one TOML file mirroring every module's tunables.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sketchlab::agent::AgentConfig;
use sketchlab::classifier::ClassifierTrainConfig;
use sketchlab::corpus::ToyGenSpec;
use sketchlab::env::RewardConfig;
use sketchlab::photo2sketch::P2sConfig;
use sketchlab::retrieval::{Fusion, FUSION_DELTAS};
use sketchlab::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub per_class_cap: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            per_class_cap: 75_000,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: Vec<usize>,
    pub fusion: Fusion,
    pub deltas: Vec<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: vec![1, 10],
            fusion: Fusion::Mean,
            deltas: FUSION_DELTAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub toy: ToyGenSpec,
    pub classifier: ClassifierTrainConfig,
    pub agent: AgentConfig,
    pub reward: RewardConfig,
    pub trainer: TrainerConfig,
    pub p2s: P2sConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Pushes the resolved global seed into every module config.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.toy.seed = seed;
        self.classifier.seed = seed;
        self.trainer.seed = seed;
    }
}

/// `--seed`, then the config file, then `SKETCHLAB_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .with_context(|| format!("SKETCHLAB_SEED is not an unsigned integer: {v:?}")),
        None => Ok(0),
    }
}

/// Writes `run-<command>.toml` into `dir`: the resolved config, loadable
/// again with `--config`, under a comment header naming the invocation.
pub fn write_echo(dir: &Path, command: &str, seed: u64, args: &[String], cfg: &RunConfig) -> Result<()> {
    if seed > i64::MAX as u64 {
        bail!("seed {seed} does not fit the config format (max {})", i64::MAX);
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut text = format!(
        "# command: {command}\n# version: {}\n# seed: {seed}\n# args: {}\n\n",
        env!("CARGO_PKG_VERSION"),
        args.join(" ").replace('\n', " ")
    );
    text.push_str(&toml::to_string(cfg)?);
    let path = dir.join(format!("run-{command}.toml"));
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some("3")).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, None, Some("x")).is_err());
    }

    #[test]
    fn default_round_trips_and_unknown_keys_fail() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(7);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<RunConfig>("[trainer]\nepisodez = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
        let partial: RunConfig = toml::from_str("[reward]\nscheme = \"basic\"\n").unwrap();
        assert_eq!(partial.reward.scheme, sketchlab::env::RewardScheme::Basic);
    }
}
