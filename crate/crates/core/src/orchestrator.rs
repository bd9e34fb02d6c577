//! The orchestrator owns every component and the state directory:
//!
//! ```text
//! <state>/ledger/events.log     append-only event log
//! <state>/ledger/snapshot.json  periodic snapshot of the derived views
//! <state>/history/<site>.log    probe history, one canonical entry per line
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::authz::{Action, Authority, Credential, Resource, TrustConfig};
use crate::canonical::to_canonical_vec;
use crate::clock::Clock;
use crate::config::{ConfigError, OrchestratorConfig};
use crate::deploy::{DeployError, PendingWork};
use crate::harness::{Fault, FaultKind, Fleet, HarnessError};
use crate::ids::{ReleaseId, SiteId};
use crate::ledger::{EventBody, Ledger, LedgerConfig, LedgerError, Ticket};
use crate::repo::{
    backup_release, sync_mirror, BackupRecord, Bundle, MirrorDelta, RepoError, ReleaseManifest,
    Repository,
};
use crate::tags::{parse_tag, Tag, TagError, TagStore};
use crate::watch::HistoryEntry;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("{subject} may not {action:?}")]
    Forbidden { subject: String, action: Action },
    #[error("storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub struct Orchestrator {
    pub(crate) config: OrchestratorConfig,
    pub(crate) clock: Arc<dyn Clock>,
    pub(crate) authority: Authority,
    pub(crate) service: Credential,
    pub(crate) repo: Repository,
    pub(crate) mirrors: Vec<Repository>,
    pub(crate) fleet: Fleet,
    pub(crate) tags: TagStore,
    pub(crate) ledger: Ledger,
    pub(crate) state_dir: Option<PathBuf>,
    /// Work whose result becomes visible at a later virtual time, by job id.
    pub(crate) pending: BTreeMap<String, PendingWork>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("config", &self.config)
            .field("sites", &self.fleet.len())
            .field("sequence", &self.ledger.sequence())
            .finish()
    }
}

impl Orchestrator {
    /// Assembles an orchestrator. With a state directory the ledger is
    /// restored from (and persisted to) `<state>/ledger`; without one it
    /// lives in memory.
    pub fn new(
        config: OrchestratorConfig,
        clock: Arc<dyn Clock>,
        trust: TrustConfig,
        repo: Repository,
        mirrors: Vec<Repository>,
        fleet: Fleet,
        state_dir: Option<&Path>,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let ledger_config = LedgerConfig {
            max_retries: config.max_retries,
            offline_after: config.offline_after,
            snapshot_every: config.snapshot_every,
        };
        let ledger = match state_dir {
            Some(dir) => Ledger::open(&dir.join("ledger"), clock.clone(), ledger_config)?,
            None => Ledger::in_memory(clock.clone(), ledger_config),
        };
        let mut tags = TagStore::new();
        for id in fleet.ids() {
            tags.add_site(id.clone());
        }
        for (site, raws) in &ledger.state().site_tags {
            for raw in raws {
                if let Ok(tag) = parse_tag(raw) {
                    tags.insert_unchecked(site, tag);
                }
            }
        }
        let service = Credential::service(&config.vo);
        Ok(Orchestrator {
            config,
            clock,
            authority: Authority::new(trust),
            service,
            repo,
            mirrors,
            fleet,
            tags,
            ledger,
            state_dir: state_dir.map(Path::to_owned),
            pending: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn authority(&self) -> &Authority {
        &self.authority
    }

    pub fn repository(&self) -> &Repository {
        &self.repo
    }

    pub fn mirrors(&self) -> &[Repository] {
        &self.mirrors
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn tags(&self) -> &TagStore {
        &self.tags
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn state_dir(&self) -> Option<&Path> {
        self.state_dir.as_deref()
    }

    pub(crate) fn require(&self, cred: &Credential, action: Action, resource: Resource) -> Result<(), OrchestratorError> {
        if self.authority.authorize(cred, action, &resource).allowed {
            Ok(())
        } else {
            Err(OrchestratorError::Forbidden { subject: cred.subject().to_owned(), action })
        }
    }

    /// Adds a release to the primary repository and records the announcement.
    pub fn publish_release(
        &mut self,
        cred: &Credential,
        manifest: &ReleaseManifest,
        bundles: &[Bundle],
    ) -> Result<(), OrchestratorError> {
        self.require(cred, Action::WriteSwArea, Resource::Repository(self.repo.root().display().to_string()))?;
        let a = self.repo.publish_release(manifest, bundles, self.clock.now_ms())?;
        self.ledger.record(EventBody::ReleasePublished {
            release: a.release,
            manifest_digest: a.manifest_digest,
            generation: a.generation,
        })?;
        Ok(())
    }

    /// Pull-synchronizes every mirror from the primary.
    pub fn sync_mirrors(&mut self) -> Result<Vec<MirrorDelta>, OrchestratorError> {
        let mut out = Vec::with_capacity(self.mirrors.len());
        for m in &mut self.mirrors {
            out.push(sync_mirror(&self.repo, m)?);
        }
        Ok(out)
    }

    pub fn backup_release(&self, id: &ReleaseId, coldstore: &Path) -> Result<BackupRecord, OrchestratorError> {
        Ok(backup_release(&self.repo, id, coldstore)?)
    }

    /// Publishes a request-install tag; the next monitoring cycle picks it up.
    pub fn request_install(
        &mut self,
        cred: &Credential,
        site: &SiteId,
        release: &ReleaseId,
    ) -> Result<Tag, OrchestratorError> {
        let tag = Tag::request(&self.config.vo, release)?;
        self.tags.publish_tag(&self.authority, cred, site, tag.clone())?;
        self.ledger.record(EventBody::TagPublished { site: site.clone(), tag: tag.raw().to_owned() })?;
        Ok(tag)
    }

    /// Retracts a tag on behalf of `cred`. Retracting an absent tag is a no-op.
    pub fn retract_tag(&mut self, cred: &Credential, site: &SiteId, tag: &Tag) -> Result<(), OrchestratorError> {
        let present = self.tags.has(site, tag.raw());
        self.tags.retract_tag(&self.authority, cred, site, tag)?;
        if present {
            self.ledger.record(EventBody::TagRetracted { site: site.clone(), tag: tag.raw().to_owned() })?;
        }
        Ok(())
    }

    /// Publishes a tag as the orchestrator itself.
    pub(crate) fn publish_as_service(&mut self, site: &SiteId, tag: Tag) -> Result<(), DeployError> {
        if self.tags.has(site, tag.raw()) {
            return Ok(());
        }
        self.tags
            .publish_tag(&self.authority, &self.service, site, tag.clone())
            .map_err(|e| DeployError::TagPublishFailed(e.to_string()))?;
        self.ledger.record(EventBody::TagPublished { site: site.clone(), tag: tag.raw().to_owned() })?;
        Ok(())
    }

    pub(crate) fn retract_as_service(&mut self, site: &SiteId, tag: &Tag) -> Result<(), DeployError> {
        if !self.tags.has(site, tag.raw()) {
            return Ok(());
        }
        self.tags
            .retract_tag(&self.authority, &self.service, site, tag)
            .map_err(|e| DeployError::TagPublishFailed(e.to_string()))?;
        self.ledger.record(EventBody::TagRetracted { site: site.clone(), tag: tag.raw().to_owned() })?;
        Ok(())
    }

    pub fn close_ticket(
        &mut self,
        cred: &Credential,
        ticket_id: &str,
        note: &str,
    ) -> Result<Ticket, OrchestratorError> {
        self.require(cred, Action::ManageTickets, Resource::Repository("tickets".into()))?;
        Ok(self.ledger.close(ticket_id, note)?.clone())
    }

    pub fn inject_fault(&mut self, site: &SiteId, fault: Fault) -> Result<Vec<Fault>, OrchestratorError> {
        Ok(self.fleet.inject(site, fault)?)
    }

    pub fn clear_fault(&mut self, site: &SiteId, kind: FaultKind) -> Result<Vec<Fault>, OrchestratorError> {
        Ok(self.fleet.clear(site, kind)?)
    }

    /// Appends a probe to `<state>/history/<site>.log`.
    pub(crate) fn append_history(&self, entry: &HistoryEntry) -> Result<(), OrchestratorError> {
        let Some(state) = &self.state_dir else { return Ok(()) };
        let dir = state.join("history");
        let storage = |path: &Path| {
            let path = path.to_owned();
            move |source| OrchestratorError::Storage { path, source }
        };
        fs::create_dir_all(&dir).map_err(storage(&dir))?;
        let path = dir.join(format!("{}.log", entry.probe.site));
        let mut line = to_canonical_vec(entry).expect("history entry serializes");
        line.push(b'\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(&line))
            .map_err(storage(&path))
    }
}
