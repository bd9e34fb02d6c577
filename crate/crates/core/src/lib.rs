//! Release distribution for a fleet of compute sites.
//!
//! A release is cut into deterministic, content-addressed bundles and
//! published to a repository (with mirrors and a write-once cold store).
//! Installation on a site is a per-(site, release) job that moves through
//! submission, installation, validation and publication. Every state change
//! is recorded in an append-only ledger, monitoring probes keep the
//! published site tags honest, and failures turn into tickets that escalate
//! once the retry budget is spent.
//!
//! The [`Orchestrator`] wires the pieces together; each module can also be
//! used on its own.

pub mod authz;
pub mod canonical;
pub mod clock;
pub mod config;
pub mod deploy;
pub mod harness;
pub mod ids;
pub mod ledger;
pub mod orchestrator;
pub mod repo;
pub mod tags;
pub mod watch;

pub use authz::{Action, Authority, Credential, Decision, Queue, Role, TrustConfig};
pub use canonical::{to_canonical_string, to_canonical_vec, Digest, HASH_ALGORITHM};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use config::OrchestratorConfig;
pub use deploy::{DeployError, DeploymentJob, JobAction, JobState, ValidationReport};
pub use harness::{Fault, FaultKind, Fleet, SiteConfig, TaskKind};
pub use ids::{ReleaseId, SiteId};
pub use ledger::{EventBody, Ledger, Ticket, TicketState};
pub use orchestrator::Orchestrator;
pub use repo::{build_bundle, cut_release, Bundle, FileEntry, ReleaseManifest, Repository};
pub use tags::{Tag, TagKind, TagStore};
pub use watch::{CheckId, ProbeResult, StatusDocument};
