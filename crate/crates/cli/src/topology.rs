//! Topology files: the agents of a localhost deployment, in TOML.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskmesh_agent::AgentConfig;
use taskmesh_core::recovery::RecoveryConfig;
use taskmesh_core::{Policy, ProcessorKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub agents: Vec<AgentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub name: String,
    #[serde(default = "default_host")]
    pub host: String,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
    pub cores: u32,
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
    #[serde(default)]
    pub software_tags: Vec<String>,
    #[serde(default = "default_kinds")]
    pub processor_kinds: Vec<String>,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_memory() -> u64 {
    1024
}

fn default_kinds() -> Vec<String> {
    vec!["cpu".into()]
}

impl TopologyConfig {
    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Read { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let t: Self = toml::from_str(text).map_err(|e| TopologyError::Invalid(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.agents.is_empty() {
            return Err(TopologyError::Invalid("at least one agent is required".into()));
        }
        let mut names = HashSet::new();
        let mut ports = HashSet::new();
        for a in &self.agents {
            if !names.insert(a.name.as_str()) {
                return Err(TopologyError::Invalid(format!("duplicate agent name `{}`", a.name)));
            }
            if a.port != 0 && !ports.insert((a.host.as_str(), a.port)) {
                return Err(TopologyError::Invalid(format!("duplicate port {}", a.port)));
            }
            self.agent_config(a)?;
        }
        Ok(())
    }

    pub fn agent(&self, name: &str) -> Option<&AgentEntry> {
        self.agents.iter().find(|a| a.name == name)
    }

    pub fn agent_config(&self, a: &AgentEntry) -> Result<AgentConfig, TopologyError> {
        let kinds = a
            .processor_kinds
            .iter()
            .map(|k| k.parse::<ProcessorKind>())
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|e| TopologyError::Invalid(format!("agent {}: {e}", a.name)))?;
        let mut c = AgentConfig::new(&a.name, a.cores, a.memory_mb);
        c.host = a.host.clone();
        c.port = a.port;
        c.software_tags = a.software_tags.iter().cloned().collect();
        c.processor_kinds = kinds;
        c.recovery = self.recovery;
        c.policy = self.policy;
        c.validate().map_err(|e| TopologyError::Invalid(e.to_string()))?;
        Ok(c)
    }
}
