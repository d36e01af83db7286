//! Run configuration (TOML, one section per module) and run manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::agents::{RemotePolicyConfig, RemoteUserAgentConfig, DEFAULT_JACCARD_THRESHOLD};
use crate::embed::EmbedderSpec;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RANK_CEILING;
use crate::grpo::GrpoHyper;
use crate::index::STORE_VERSION;
use crate::remote::EndpointConfig;
use crate::rollout::RolloutConfig;
use crate::seeds::{derive_seed, sha256_hex};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// train:valid:test proportions.
    pub split: [u32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { split: [8, 1, 1] }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Toy,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    /// Toy embedder seed; derived from the master seed when unset.
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Toy,
            dimension: 16,
            seed: None,
            endpoint: EndpointConfig::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn spec(&self, master_seed: u64) -> EmbedderSpec {
        match self.kind {
            EmbedderKind::Toy => EmbedderSpec::Toy {
                dimension: self.dimension,
                seed: self.seed.unwrap_or_else(|| derive_seed(master_seed, "embedder")),
            },
            EmbedderKind::Remote => EmbedderSpec::Remote {
                dimension: self.dimension,
                endpoint: self.endpoint.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserAgentConfig {
    /// Token Jaccard similarity at which the simulator suggests instead of denying.
    pub jaccard_threshold: f64,
    #[serde(flatten)]
    pub remote: RemoteUserAgentConfig,
}

impl Default for UserAgentConfig {
    fn default() -> Self {
        Self {
            jaccard_threshold: DEFAULT_JACCARD_THRESHOLD,
            remote: RemoteUserAgentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub rank_ceiling: usize,
    /// Grounding caps for the rank-vs-cap analysis.
    pub caps: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            rank_ceiling: DEFAULT_RANK_CEILING,
            caps: vec![1, 3, 6],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
    pub rollout: RolloutConfig,
    pub policy: RemotePolicyConfig,
    pub user_agent: UserAgentConfig,
    pub grpo: GrpoHyper,
    pub evaluation: EvaluationConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.split.contains(&0) {
            return Err(Error::Config("data.split entries must be positive".into()));
        }
        if self.embedder.dimension == 0 {
            return Err(Error::Config("embedder.dimension must be positive".into()));
        }
        self.rollout.validate()?;
        self.grpo.validate()?;
        if self.evaluation.caps.windows(2).any(|w| w[0] > w[1]) || self.evaluation.caps.contains(&0) {
            return Err(Error::Config("evaluation.caps must be positive and ascending".into()));
        }
        if self.evaluation.rank_ceiling == 0 {
            return Err(Error::Config("evaluation.rank_ceiling must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// File formats and their schema versions.
pub const SCHEMA_VERSIONS: &[(&str, u32)] = &[
    ("catalog", 1),
    ("interactions", 1),
    ("split", 1),
    ("store", STORE_VERSION),
    ("recall", 1),
    ("trajectory", 1),
    ("logprob", 1),
    ("scored", 1),
    ("report", 1),
    ("manifest", 1),
];

/// Reproducibility record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub schema_versions: BTreeMap<String, u32>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn checksums(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, inputs: &[&Path], started: SystemTime) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            schema_versions: SCHEMA_VERSIONS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed: config.seed,
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            inputs: checksums(inputs)?,
            outputs: BTreeMap::new(),
            started_unix_ms: started.duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO).as_millis(),
            elapsed_ms: 0,
        })
    }

    /// Records output checksums and the elapsed time.
    pub fn finish(&mut self, outputs: &[&Path], started: SystemTime) -> Result<()> {
        self.outputs = checksums(outputs)?;
        self.elapsed_ms = started.elapsed().unwrap_or(Duration::ZERO).as_millis();
        Ok(())
    }

    /// Paths whose current checksum differs from the recorded one (missing files included).
    pub fn verify(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(path, sum)| file_sha256(Path::new(path)).ok().as_ref() != Some(*sum))
            .map(|(path, _)| path.clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.rollout.max_groundings, 6);
        assert_eq!(c.rollout.group_size, 6);
        assert_eq!(c.grpo.clip_eps, 0.2);
        assert_eq!(c.user_agent.remote.temperature, 0.0);
    }

    #[test]
    fn sections_override_and_round_trip() {
        let text = r#"
            seed = 9
            [rollout]
            max_groundings = 3
            [grpo]
            aggregation = "sequence-sum"
            [embedder]
            dimension = 8
            seed = 4
        "#;
        let c = Config::from_toml(text).unwrap();
        assert_eq!(c.rollout.turns(), 5);
        assert_eq!(c.embedder.spec(c.seed), EmbedderSpec::Toy { dimension: 8, seed: 4 });
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[rollout]\nmax_turns = 2").is_err());
        assert!(Config::from_toml("[grpo]\nclip_eps = 0.0").is_err());
        assert!(Config::from_toml("[rollout]\nbogus = 1").is_err());
        assert!(Config::from_toml("[evaluation]\ncaps = [3, 1]").is_err());
    }

    #[test]
    fn manifest_checksums_verify() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "abc").unwrap();
        let started = SystemTime::now();
        let mut m = RunManifest::new("test", &Config::default(), &[&input], started).unwrap();
        m.finish(&[&input], started).unwrap();
        assert!(m.verify().is_empty());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        std::fs::write(&input, "abd").unwrap();
        assert_eq!(m.verify(), vec![input.display().to_string()]);
    }
}
