//! Bookkeeping and error treatment.
//!
//! The ledger is an append-only event log plus views folded from it: jobs,
//! installation records, tickets, probe history and site status. There is a
//! single writer (`&mut self`); every mutation is validated against the
//! current views, appended (and flushed) to `<dir>/events.log`, then applied.
//! A snapshot of the views is written to `<dir>/snapshot.json` every
//! `snapshot_every` events so a restart only has to fold the tail.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{to_canonical_vec, Digest};
use crate::clock::Clock;
use crate::deploy::{DeploymentJob, JobAction, JobFailure, JobState, Transition, ValidationReport};
use crate::ids::{ReleaseId, SiteId};
use crate::watch::{CheckId, HistoryEntry};

pub const EVENTS_FILE: &str = "events.log";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("storage failure at {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed event: {0}")]
    Malformed(String),
    #[error("event log corrupt at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("unknown ticket {0}")]
    UnknownTicket(String),
    #[error("ticket {ticket_id} cannot {op} from state {state:?}")]
    IllegalTicketTransition { ticket_id: String, state: TicketState, op: &'static str },
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> LedgerError + '_ {
    move |source| LedgerError::StorageFailure { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketState {
    Open,
    Retrying,
    Escalated,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TicketOrigin {
    Job { job_id: String },
    Check { site: SiteId, check: CheckId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TicketNote {
    pub at: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub ticket_id: String,
    pub origin: TicketOrigin,
    pub severity: Severity,
    pub state: TicketState,
    pub retry_count: u32,
    pub opened_at: u64,
    pub notes: Vec<TicketNote>,
}

impl Ticket {
    pub fn is_closed(&self) -> bool {
        self.state == TicketState::Closed
    }
}

/// Installation status of one release on one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstallState {
    Authorized,
    Installing,
    Installed,
    Validating,
    Validated,
    Published,
    InstallFailed,
    ValidationFailed,
    Abandoned,
    Removed,
}

impl InstallState {
    pub fn is_published(self) -> bool {
        self == InstallState::Published
    }

    pub fn from_job(s: JobState) -> Option<InstallState> {
        Some(match s {
            JobState::Submitted | JobState::Rejected => return None,
            JobState::Authorized => InstallState::Authorized,
            JobState::Installing => InstallState::Installing,
            JobState::Installed => InstallState::Installed,
            JobState::Validating => InstallState::Validating,
            JobState::Validated => InstallState::Validated,
            JobState::Published => InstallState::Published,
            JobState::InstallFailed => InstallState::InstallFailed,
            JobState::ValidationFailed => InstallState::ValidationFailed,
            JobState::Abandoned => InstallState::Abandoned,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallationRecord {
    pub site: SiteId,
    pub release: ReleaseId,
    pub state: InstallState,
    pub job_id: String,
    pub updated_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
}

/// Everything that can happen, as recorded in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum EventBody {
    JobSubmitted {
        job: DeploymentJob,
    },
    JobTransition {
        job_id: String,
        from: JobState,
        to: JobState,
        attempts: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        not_before: Option<u64>,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<JobFailure>,
    },
    ValidationRecorded {
        job_id: String,
        report: ValidationReport,
    },
    InstallationRemoved {
        site: SiteId,
        release: ReleaseId,
        job_id: String,
    },
    TicketOpened {
        ticket: Ticket,
    },
    TicketRetry {
        ticket_id: String,
        note: String,
    },
    TicketEscalated {
        ticket_id: String,
        note: String,
    },
    TicketClosed {
        ticket_id: String,
        note: String,
    },
    TicketSeverity {
        ticket_id: String,
        severity: Severity,
    },
    ProbeRecorded {
        entry: HistoryEntry,
    },
    TagPublished {
        site: SiteId,
        tag: String,
    },
    TagRetracted {
        site: SiteId,
        tag: String,
    },
    ReleasePublished {
        release: ReleaseId,
        manifest_digest: Digest,
        generation: u64,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::JobSubmitted { .. } => "job_submitted",
            EventBody::JobTransition { .. } => "job_transition",
            EventBody::ValidationRecorded { .. } => "validation_recorded",
            EventBody::InstallationRemoved { .. } => "installation_removed",
            EventBody::TicketOpened { .. } => "ticket_opened",
            EventBody::TicketRetry { .. } => "ticket_retry",
            EventBody::TicketEscalated { .. } => "ticket_escalated",
            EventBody::TicketClosed { .. } => "ticket_closed",
            EventBody::TicketSeverity { .. } => "ticket_severity",
            EventBody::ProbeRecorded { .. } => "probe_recorded",
            EventBody::TagPublished { .. } => "tag_published",
            EventBody::TagRetracted { .. } => "tag_retracted",
            EventBody::ReleasePublished { .. } => "release_published",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub sequence: u64,
    pub at: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteStatus {
    pub history: Vec<HistoryEntry>,
    pub consecutive_unreachable: u32,
    pub offline: bool,
}

impl SiteStatus {
    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.history.last()
    }
}

/// One cell of the site × release overview.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatrixCell {
    pub site: SiteId,
    pub release: ReleaseId,
    pub state: InstallState,
}

mod map_as_vec {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K, V, S>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error>
    where
        K: Serialize,
        V: Serialize,
        S: Serializer,
    {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Views folded from the event log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerState {
    pub sequence: u64,
    pub jobs: BTreeMap<String, DeploymentJob>,
    #[serde(with = "map_as_vec")]
    pub installations: BTreeMap<(SiteId, ReleaseId), InstallationRecord>,
    pub tickets: BTreeMap<String, Ticket>,
    pub sites: BTreeMap<SiteId, SiteStatus>,
    pub site_tags: BTreeMap<SiteId, BTreeSet<String>>,
    pub releases: BTreeMap<String, Digest>,
}

fn malformed(msg: impl Into<String>) -> LedgerError {
    LedgerError::Malformed(msg.into())
}

impl LedgerState {
    fn ticket(&self, id: &str) -> Result<&Ticket, LedgerError> {
        self.tickets.get(id).ok_or_else(|| LedgerError::UnknownTicket(id.to_owned()))
    }

    /// Rejects events that would break a view invariant.
    fn check(&self, body: &EventBody, max_retries: u32) -> Result<(), LedgerError> {
        let illegal = |t: &Ticket, op| LedgerError::IllegalTicketTransition {
            ticket_id: t.ticket_id.clone(),
            state: t.state,
            op,
        };
        match body {
            EventBody::JobSubmitted { job } => {
                if self.jobs.contains_key(&job.job_id) {
                    return Err(malformed(format!("job {} already exists", job.job_id)));
                }
                if job.state != JobState::Submitted || !job.transitions.is_empty() || job.attempts != 0 {
                    return Err(malformed("jobs enter the log in SUBMITTED"));
                }
            }
            EventBody::JobTransition { job_id, from, to, attempts, .. } => {
                let job = self
                    .jobs
                    .get(job_id)
                    .ok_or_else(|| malformed(format!("unknown job {job_id}")))?;
                if *to == JobState::Authorized {
                    let other = self.jobs.values().any(|j| {
                        j.job_id != *job_id
                            && !j.state.is_terminal()
                            && j.state != JobState::Submitted
                            && j.action == job.action
                            && j.site == job.site
                            && j.release == job.release
                    });
                    if other {
                        return Err(malformed(format!(
                            "active {:?} job exists for {} on {}",
                            job.action, job.release, job.site
                        )));
                    }
                }
                if job.state != *from || !from.can_transition(*to) {
                    return Err(malformed(format!(
                        "job {job_id}: illegal transition {from:?} -> {to:?} (job is {:?})",
                        job.state
                    )));
                }
                let expected = if *to == JobState::Installing { job.attempts + 1 } else { job.attempts };
                if *attempts != expected || *attempts > max_retries + 1 {
                    return Err(malformed(format!("job {job_id}: bad attempt count {attempts}")));
                }
                if *to == JobState::Abandoned && *attempts != max_retries + 1 {
                    return Err(malformed(format!("job {job_id}: abandoned with retries left")));
                }
            }
            EventBody::ValidationRecorded { job_id, .. } => {
                if !self.jobs.contains_key(job_id) {
                    return Err(malformed(format!("unknown job {job_id}")));
                }
            }
            EventBody::InstallationRemoved { site, release, .. } => {
                if !self.installations.contains_key(&(site.clone(), release.clone())) {
                    return Err(malformed(format!("no installation of {release} on {site}")));
                }
            }
            EventBody::TicketOpened { ticket } => {
                if self.tickets.contains_key(&ticket.ticket_id) {
                    return Err(malformed(format!("ticket {} exists", ticket.ticket_id)));
                }
                if ticket.state != TicketState::Open || ticket.retry_count != 0 {
                    return Err(malformed("tickets open in state OPEN"));
                }
            }
            EventBody::TicketRetry { ticket_id, .. } => {
                let t = self.ticket(ticket_id)?;
                if !matches!(t.state, TicketState::Open | TicketState::Retrying)
                    || t.retry_count >= max_retries
                {
                    return Err(illegal(t, "retry"));
                }
            }
            EventBody::TicketEscalated { ticket_id, .. } => {
                let t = self.ticket(ticket_id)?;
                if !matches!(t.state, TicketState::Open | TicketState::Retrying) {
                    return Err(illegal(t, "escalate"));
                }
            }
            EventBody::TicketClosed { ticket_id, .. } => {
                let t = self.ticket(ticket_id)?;
                if t.state == TicketState::Closed {
                    return Err(illegal(t, "close"));
                }
            }
            EventBody::TicketSeverity { ticket_id, .. } => {
                let t = self.ticket(ticket_id)?;
                if t.state == TicketState::Closed {
                    return Err(illegal(t, "change severity"));
                }
            }
            EventBody::ProbeRecorded { entry } => {
                let last = self
                    .sites
                    .get(&entry.probe.site)
                    .and_then(|s| s.latest())
                    .map_or(0, |e| e.sequence);
                if entry.sequence != last + 1 {
                    return Err(malformed(format!(
                        "probe sequence {} for {} does not follow {last}",
                        entry.sequence, entry.probe.site
                    )));
                }
                if !entry.probe.is_complete() {
                    return Err(malformed("probe result is missing checks"));
                }
            }
            EventBody::TagPublished { .. }
            | EventBody::TagRetracted { .. }
            | EventBody::ReleasePublished { .. } => {}
        }
        Ok(())
    }

    fn apply(&mut self, entry: &EventLogEntry, offline_after: u32) {
        let at = entry.at;
        self.sequence = entry.sequence;
        match &entry.body {
            EventBody::JobSubmitted { job } => {
                self.jobs.insert(job.job_id.clone(), job.clone());
            }
            EventBody::JobTransition { job_id, from, to, attempts, not_before, detail, failure } => {
                let job = self.jobs.get_mut(job_id).expect("checked");
                job.state = *to;
                job.attempts = *attempts;
                job.not_before = *not_before;
                job.transitions.push(Transition {
                    from: *from,
                    to: *to,
                    at,
                    detail: detail.clone(),
                    failure: failure.clone(),
                });
                if job.action == JobAction::Install {
                    if let Some(state) = InstallState::from_job(*to) {
                        let key = (job.site.clone(), job.release.clone());
                        let validation =
                            self.installations.get(&key).and_then(|r| r.validation.clone());
                        self.installations.insert(
                            key,
                            InstallationRecord {
                                site: job.site.clone(),
                                release: job.release.clone(),
                                state,
                                job_id: job_id.clone(),
                                updated_at: at,
                                validation,
                            },
                        );
                    }
                }
            }
            EventBody::ValidationRecorded { job_id, report } => {
                let job = &self.jobs[job_id];
                if let Some(rec) = self.installations.get_mut(&(job.site.clone(), job.release.clone())) {
                    rec.validation = Some(report.clone());
                    rec.updated_at = at;
                }
            }
            EventBody::InstallationRemoved { site, release, job_id } => {
                let rec = self.installations.get_mut(&(site.clone(), release.clone())).expect("checked");
                rec.state = InstallState::Removed;
                rec.job_id = job_id.clone();
                rec.updated_at = at;
            }
            EventBody::TicketOpened { ticket } => {
                self.tickets.insert(ticket.ticket_id.clone(), ticket.clone());
            }
            EventBody::TicketRetry { ticket_id, note } => {
                let t = self.tickets.get_mut(ticket_id).expect("checked");
                t.state = TicketState::Retrying;
                t.retry_count += 1;
                t.notes.push(TicketNote { at, text: note.clone() });
            }
            EventBody::TicketEscalated { ticket_id, note } => {
                let t = self.tickets.get_mut(ticket_id).expect("checked");
                t.state = TicketState::Escalated;
                t.notes.push(TicketNote { at, text: note.clone() });
            }
            EventBody::TicketClosed { ticket_id, note } => {
                let t = self.tickets.get_mut(ticket_id).expect("checked");
                t.state = TicketState::Closed;
                t.notes.push(TicketNote { at, text: note.clone() });
            }
            EventBody::TicketSeverity { ticket_id, severity } => {
                self.tickets.get_mut(ticket_id).expect("checked").severity = *severity;
            }
            EventBody::ProbeRecorded { entry } => {
                let status = self.sites.entry(entry.probe.site.clone()).or_default();
                let reachable = entry.probe.passed(CheckId::Reachable);
                status.consecutive_unreachable =
                    if reachable { 0 } else { status.consecutive_unreachable + 1 };
                if status.consecutive_unreachable >= offline_after {
                    status.offline = true;
                } else if entry.probe.overall {
                    status.offline = false;
                }
                status.history.push(entry.clone());
            }
            EventBody::TagPublished { site, tag } => {
                self.site_tags.entry(site.clone()).or_default().insert(tag.clone());
            }
            EventBody::TagRetracted { site, tag } => {
                if let Some(set) = self.site_tags.get_mut(site) {
                    set.remove(tag);
                }
            }
            EventBody::ReleasePublished { release, manifest_digest, .. } => {
                self.releases.insert(release.key(), manifest_digest.clone());
            }
        }
    }

    pub fn active_job(
        &self,
        site: &SiteId,
        release: &ReleaseId,
        action: JobAction,
    ) -> Option<&DeploymentJob> {
        self.jobs.values().find(|j| {
            !j.state.is_terminal() && j.action == action && &j.site == site && &j.release == release
        })
    }

    pub fn installation(&self, site: &SiteId, release: &ReleaseId) -> Option<&InstallationRecord> {
        self.installations.get(&(site.clone(), release.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerConfig {
    /// Also the ticket escalation threshold.
    pub max_retries: u32,
    pub offline_after: u32,
    pub snapshot_every: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig { max_retries: 3, offline_after: 3, snapshot_every: 256 }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    sequence: u64,
    state: LedgerState,
}

pub struct Ledger {
    dir: Option<PathBuf>,
    log: Option<File>,
    clock: Arc<dyn Clock>,
    config: LedgerConfig,
    state: LedgerState,
    entries: Vec<EventLogEntry>,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger")
            .field("dir", &self.dir)
            .field("sequence", &self.state.sequence)
            .finish()
    }
}

impl Ledger {
    pub fn in_memory(clock: Arc<dyn Clock>, config: LedgerConfig) -> Self {
        Ledger { dir: None, log: None, clock, config, state: LedgerState::default(), entries: vec![] }
    }

    /// Opens (or creates) the ledger under `dir`, restoring the views from
    /// the latest snapshot plus the log tail.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, config: LedgerConfig) -> Result<Self, LedgerError> {
        fs::create_dir_all(dir).map_err(storage(dir))?;
        let events_path = dir.join(EVENTS_FILE);
        let entries = read_log(&events_path)?;

        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut state = match fs::read(&snapshot_path) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|e| {
                    LedgerError::CorruptLog { line: 0, message: format!("snapshot: {e}") }
                })?;
                if snap.sequence > entries.len() as u64 {
                    // snapshot ahead of the log; fall back to a full replay
                    LedgerState::default()
                } else {
                    snap.state
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => LedgerState::default(),
            Err(e) => return Err(storage(&snapshot_path)(e)),
        };
        for entry in entries.iter().skip(state.sequence as usize) {
            state.check(&entry.body, config.max_retries).map_err(|e| LedgerError::CorruptLog {
                line: entry.sequence as usize,
                message: e.to_string(),
            })?;
            state.apply(entry, config.offline_after);
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events_path)
            .map_err(storage(&events_path))?;
        Ok(Ledger { dir: Some(dir.to_owned()), log: Some(log), clock, config, state, entries })
    }

    /// Folds `entries` into a fresh in-memory ledger.
    pub fn replay(
        entries: &[EventLogEntry],
        clock: Arc<dyn Clock>,
        config: LedgerConfig,
    ) -> Result<Self, LedgerError> {
        let mut ledger = Ledger::in_memory(clock, config);
        for (i, entry) in entries.iter().enumerate() {
            if entry.sequence != i as u64 + 1 {
                return Err(LedgerError::CorruptLog { line: i + 1, message: "sequence gap".into() });
            }
            ledger.state.check(&entry.body, config.max_retries)?;
            ledger.state.apply(entry, config.offline_after);
            ledger.entries.push(entry.clone());
        }
        Ok(ledger)
    }

    pub fn config(&self) -> LedgerConfig {
        self.config
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn sequence(&self) -> u64 {
        self.state.sequence
    }

    pub fn entries(&self) -> &[EventLogEntry] {
        &self.entries
    }

    /// Appends one event and updates the views. Returns its sequence number.
    pub fn record(&mut self, body: EventBody) -> Result<u64, LedgerError> {
        self.state.check(&body, self.config.max_retries)?;
        let entry = EventLogEntry { sequence: self.state.sequence + 1, at: self.clock.now_ms(), body };
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            let mut line = to_canonical_vec(&entry).expect("events serialize");
            line.push(b'\n');
            let path = dir.join(EVENTS_FILE);
            log.write_all(&line).map_err(storage(&path))?;
            log.sync_data().map_err(storage(&path))?;
        }
        self.state.apply(&entry, self.config.offline_after);
        self.entries.push(entry);
        if self.state.sequence.is_multiple_of(self.config.snapshot_every.max(1)) {
            self.write_snapshot()?;
        }
        Ok(self.state.sequence)
    }

    pub fn write_snapshot(&self) -> Result<(), LedgerError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let snap = Snapshot { sequence: self.state.sequence, state: self.state.clone() };
        let bytes = to_canonical_vec(&snap).expect("snapshot serializes");
        let tmp = dir.join("snapshot.json.tmp");
        fs::write(&tmp, bytes).map_err(storage(&tmp))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::rename(&tmp, &path).map_err(storage(&path))
    }

    /// True iff a non-terminal install job exists for (site, release), or,
    /// when `include_published` is set, the release is PUBLISHED there.
    pub fn exists(&self, site: &SiteId, release: &ReleaseId, include_published: bool) -> bool {
        self.state.active_job(site, release, JobAction::Install).is_some()
            || (include_published
                && self
                    .state
                    .installation(site, release)
                    .is_some_and(|r| r.state == InstallState::Published))
    }

    pub fn job(&self, job_id: &str) -> Option<&DeploymentJob> {
        self.state.jobs.get(job_id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &DeploymentJob> {
        self.state.jobs.values()
    }

    pub fn status_matrix(&self) -> Vec<MatrixCell> {
        self.state
            .installations
            .values()
            .map(|r| MatrixCell { site: r.site.clone(), release: r.release.clone(), state: r.state })
            .collect()
    }

    pub fn tickets(&self) -> impl Iterator<Item = &Ticket> {
        self.state.tickets.values()
    }

    pub fn ticket(&self, id: &str) -> Option<&Ticket> {
        self.state.tickets.get(id)
    }

    /// Most recent `last` probe results for `site`, newest first.
    pub fn history(&self, site: &SiteId, last: usize) -> Vec<HistoryEntry> {
        self.state
            .sites
            .get(site)
            .map(|s| s.history.iter().rev().take(last).cloned().collect())
            .unwrap_or_default()
    }

    pub fn site_status(&self, site: &SiteId) -> Option<&SiteStatus> {
        self.state.sites.get(site)
    }

    pub fn open_ticket(
        &mut self,
        origin: TicketOrigin,
        severity: Severity,
        note: impl Into<String>,
    ) -> Result<Ticket, LedgerError> {
        let ticket = Ticket {
            ticket_id: format!("tkt-{:06}", self.state.tickets.len() + 1),
            origin,
            severity,
            state: TicketState::Open,
            retry_count: 0,
            opened_at: self.clock.now_ms(),
            notes: vec![TicketNote { at: self.clock.now_ms(), text: note.into() }],
        };
        self.record(EventBody::TicketOpened { ticket: ticket.clone() })?;
        Ok(ticket)
    }

    /// Counts one retry; reaching the threshold escalates automatically.
    pub fn note_retry(&mut self, ticket_id: &str, note: impl Into<String>) -> Result<&Ticket, LedgerError> {
        self.record(EventBody::TicketRetry { ticket_id: ticket_id.to_owned(), note: note.into() })?;
        if self.state.tickets[ticket_id].retry_count >= self.config.max_retries {
            self.record(EventBody::TicketEscalated {
                ticket_id: ticket_id.to_owned(),
                note: format!("retry threshold {} reached", self.config.max_retries),
            })?;
        }
        Ok(&self.state.tickets[ticket_id])
    }

    pub fn escalate(&mut self, ticket_id: &str, note: impl Into<String>) -> Result<&Ticket, LedgerError> {
        self.record(EventBody::TicketEscalated { ticket_id: ticket_id.to_owned(), note: note.into() })?;
        Ok(&self.state.tickets[ticket_id])
    }

    pub fn close(&mut self, ticket_id: &str, note: impl Into<String>) -> Result<&Ticket, LedgerError> {
        self.record(EventBody::TicketClosed { ticket_id: ticket_id.to_owned(), note: note.into() })?;
        Ok(&self.state.tickets[ticket_id])
    }

    pub fn set_severity(&mut self, ticket_id: &str, severity: Severity) -> Result<&Ticket, LedgerError> {
        self.record(EventBody::TicketSeverity { ticket_id: ticket_id.to_owned(), severity })?;
        Ok(&self.state.tickets[ticket_id])
    }

    /// The open (non-closed) ticket for a job or check, if any.
    pub fn open_ticket_for(&self, origin: &TicketOrigin) -> Option<&Ticket> {
        self.state.tickets.values().find(|t| &t.origin == origin && !t.is_closed())
    }
}

/// Reads and sequence-checks an event log file. A missing file is empty.
pub fn read_log(path: &Path) -> Result<Vec<EventLogEntry>, LedgerError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(storage(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(storage(path))?;
        if line.is_empty() {
            continue;
        }
        let entry: EventLogEntry = serde_json::from_str(&line)
            .map_err(|e| LedgerError::CorruptLog { line: i + 1, message: e.to_string() })?;
        if entry.sequence != out.len() as u64 + 1 {
            return Err(LedgerError::CorruptLog { line: i + 1, message: "sequence gap".into() });
        }
        out.push(entry);
    }
    Ok(out)
}
