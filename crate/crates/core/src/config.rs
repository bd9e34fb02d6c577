use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration value for {key}: {message}")]
pub struct ConfigError {
    pub key: &'static str,
    pub message: String,
}

/// Tunables of the orchestrator. Times are milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Virtual organization whose releases this instance distributes.
    pub vo: String,
    /// Retries after the first attempt; also the ticket escalation threshold.
    pub max_retries: u32,
    /// Retry n waits `backoff_base_ms * 2^(n-1)`.
    pub backoff_base_ms: u64,
    /// Validation jobs per validation step.
    pub validation_jobs: u32,
    pub cycle_period_ms: u64,
    /// Consecutive unreachable probes before a site is marked OFFLINE.
    pub offline_after: u32,
    pub snapshot_every: u64,
    /// Whether a monitoring cycle also drives active jobs until they settle.
    pub drive_jobs: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            vo: "cms".into(),
            max_retries: 3,
            backoff_base_ms: 2_000,
            validation_jobs: 3,
            cycle_period_ms: 30_000,
            offline_after: 3,
            snapshot_every: 256,
            drive_jobs: true,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, message: &str| Err(ConfigError { key, message: message.to_owned() });
        if self.validation_jobs == 0 {
            return bad("validation_jobs", "at least one validation job is required");
        }
        if !crate::ids::is_identifier(&self.vo) || self.vo.contains('-') {
            return bad("vo", "must be a non-empty identifier without '-'");
        }
        if self.offline_after == 0 {
            return bad("offline_after", "must be at least 1");
        }
        if self.cycle_period_ms == 0 {
            return bad("cycle_period_ms", "must be positive");
        }
        if self.max_retries > 16 {
            return bad("max_retries", "at most 16");
        }
        Ok(())
    }

    /// Wait before retry number `retry` (1-based).
    pub fn backoff_ms(&self, retry: u32) -> u64 {
        self.backoff_base_ms.saturating_mul(1u64 << retry.saturating_sub(1).min(32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        OrchestratorConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_validation_jobs_rejected() {
        let c = OrchestratorConfig { validation_jobs: 0, ..Default::default() };
        assert_eq!(c.validate().unwrap_err().key, "validation_jobs");
    }

    #[test]
    fn backoff_doubles() {
        let c = OrchestratorConfig::default();
        assert_eq!([c.backoff_ms(1), c.backoff_ms(2), c.backoff_ms(3)], [2_000, 4_000, 8_000]);
    }
}
