//! Service configuration, read from a TOML file.
//!
//! ```toml
//! state_dir = "state"
//! repo_root = "repo"
//! fleet_file = "fleet.json"
//! trust_key_file = "trust.key"   # hex-encoded HMAC key
//! listen_addr = "127.0.0.1:8740"
//! cycle_period_s = 30            # 0 disables background monitoring cycles
//! max_retries = 3
//! validation_jobs = 3
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use swdist_core::clock::{Clock, SystemClock, VirtualClock};
use swdist_core::harness::{FleetConfig, HarnessError};
use swdist_core::orchestrator::OrchestratorError;
use swdist_core::repo::RepoError;
use swdist_core::{Fleet, Orchestrator, OrchestratorConfig, Repository, TrustConfig};
use thiserror::Error;

/// Shortest accepted trust key, in bytes.
pub const MIN_KEY_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid configuration in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("fleet: {0}")]
    Fleet(#[from] HarnessError),
    #[error("repository: {0}")]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8740))
}

fn default_cycle() -> u64 {
    30
}

fn default_retries() -> u32 {
    OrchestratorConfig::default().max_retries
}

fn default_validation_jobs() -> u32 {
    OrchestratorConfig::default().validation_jobs
}

fn default_vo() -> String {
    OrchestratorConfig::default().vo
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub state_dir: PathBuf,
    pub repo_root: PathBuf,
    pub fleet_file: PathBuf,
    pub trust_key_file: PathBuf,
    #[serde(default = "default_listen")]
    pub listen_addr: SocketAddr,
    #[serde(default = "default_cycle")]
    pub cycle_period_s: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_validation_jobs")]
    pub validation_jobs: u32,
    #[serde(default = "default_vo")]
    pub vo: String,
    /// Mirror repositories, consulted before the primary when installing.
    #[serde(default)]
    pub mirrors: Vec<PathBuf>,
    /// Write-once backup tree used by release backups.
    #[serde(default)]
    pub coldstore: Option<PathBuf>,
    #[serde(default)]
    pub allow_dteam_write: bool,
}

impl GateConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        let mut config: GateConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_owned(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        config.orchestrator_config().validate().map_err(|e| ConfigError::Invalid {
            key: e.key,
            message: e.message,
        })?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.state_dir);
        fix(&mut self.repo_root);
        fix(&mut self.fleet_file);
        fix(&mut self.trust_key_file);
        self.mirrors.iter_mut().for_each(fix);
        if let Some(c) = self.coldstore.as_mut() {
            fix(c);
        }
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        let defaults = OrchestratorConfig::default();
        OrchestratorConfig {
            vo: self.vo.clone(),
            max_retries: self.max_retries,
            validation_jobs: self.validation_jobs,
            cycle_period_ms: match self.cycle_period_s {
                0 => defaults.cycle_period_ms,
                s => s.saturating_mul(1000),
            },
            ..defaults
        }
    }

    pub fn trust(&self) -> Result<TrustConfig, ConfigError> {
        let key = read_trust_key(&self.trust_key_file)?;
        let mut trust = TrustConfig::new(key, &self.vo);
        trust.allow_dteam_write = self.allow_dteam_write;
        Ok(trust)
    }

    pub fn fleet(&self) -> Result<Fleet, ConfigError> {
        let path = &self.fleet_file;
        let bytes = fs::read(path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
        let fleet: FleetConfig = serde_json::from_slice(&bytes)
            .map_err(|e| ConfigError::Parse { path: path.clone(), message: e.to_string() })?;
        Ok(Fleet::from_config(self.state_dir.join("sites"), &fleet)?)
    }

    /// Opens every component and restores the ledger from the state
    /// directory.
    ///
    /// The returned clock is virtual: simulated work jumps it forward, and
    /// the service pulls it up to wall time before each mutation. It never
    /// starts behind the last recorded event.
    pub fn open(&self) -> Result<(Orchestrator, Arc<VirtualClock>), ConfigError> {
        let trust = self.trust()?;
        let fleet = self.fleet()?;
        let repo = Repository::open(&self.repo_root)?;
        let mirrors = self.mirrors.iter().map(Repository::open).collect::<Result<Vec<_>, _>>()?;
        let clock = Arc::new(VirtualClock::new(SystemClock.now_ms()));
        let orch = Orchestrator::new(
            self.orchestrator_config(),
            clock.clone(),
            trust,
            repo,
            mirrors,
            fleet,
            Some(&self.state_dir),
        )?;
        if let Some(last) = orch.ledger().entries().last() {
            clock.advance_to(last.at);
        }
        Ok((orch, clock))
    }
}

/// Reads a hex-encoded key. Surrounding whitespace is ignored.
pub fn read_trust_key(path: &Path) -> Result<Vec<u8>, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
    let key = hex::decode(text.trim()).map_err(|e| ConfigError::Invalid {
        key: "trust_key_file",
        message: format!("{}: not hex ({e})", path.display()),
    })?;
    if key.len() < MIN_KEY_LEN {
        return Err(ConfigError::Invalid {
            key: "trust_key_file",
            message: format!("key is {} bytes, need at least {MIN_KEY_LEN}", key.len()),
        });
    }
    Ok(key)
}
