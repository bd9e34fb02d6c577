//! Per-(site, release) deployment jobs.
//!
//! ```text
//! SUBMITTED -> AUTHORIZED | REJECTED
//! AUTHORIZED -> INSTALLING -> INSTALLED | INSTALL_FAILED
//! INSTALLED -> VALIDATING -> VALIDATED | VALIDATION_FAILED
//! VALIDATED -> PUBLISHED
//! INSTALL_FAILED | VALIDATION_FAILED -> INSTALLING (retry) | ABANDONED
//! ```
//!
//! Work on a site takes virtual time. Starting a step executes the work and
//! parks its result until the site's queue model says the task has finished;
//! the step that follows reveals it. [`Orchestrator::drive_jobs`] always
//! advances the job that becomes ready first, so jobs on different sites
//! overlap in virtual time.
//!
//! Removal jobs reuse the same graph: INSTALLING deletes the release tree,
//! VALIDATING checks that it is gone and PUBLISHED means the removal is done.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz::{Action, Credential, Queue, Resource, Role};
use crate::canonical::{to_canonical_vec, Digest};
use crate::harness::{PkgDbEntry, SiteError, TaskKind};
use crate::ids::{ReleaseId, SiteId};
use crate::ledger::{EventBody, InstallState, LedgerError, Severity, TicketOrigin, TicketState};
use crate::orchestrator::Orchestrator;
use crate::repo::{fetch, RepoError, Repository};
use crate::tags::Tag;

/// Per-release file written next to the installed files.
pub const RELEASE_MARKER: &str = ".swdist-release.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Submitted,
    Authorized,
    Installing,
    Installed,
    Validating,
    Validated,
    Published,
    Rejected,
    InstallFailed,
    ValidationFailed,
    Abandoned,
}

impl JobState {
    pub const ALL: [JobState; 11] = [
        JobState::Submitted,
        JobState::Authorized,
        JobState::Installing,
        JobState::Installed,
        JobState::Validating,
        JobState::Validated,
        JobState::Published,
        JobState::Rejected,
        JobState::InstallFailed,
        JobState::ValidationFailed,
        JobState::Abandoned,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Published | JobState::Rejected | JobState::Abandoned)
    }

    pub fn is_failed(self) -> bool {
        matches!(self, JobState::InstallFailed | JobState::ValidationFailed)
    }

    pub fn can_transition(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Submitted, Authorized)
                | (Submitted, Rejected)
                | (Authorized, Installing)
                | (Installing, Installed)
                | (Installing, InstallFailed)
                | (Installed, Validating)
                | (Validating, Validated)
                | (Validating, ValidationFailed)
                | (Validated, Published)
                | (InstallFailed, Installing)
                | (InstallFailed, Abandoned)
                | (ValidationFailed, Installing)
                | (ValidationFailed, Abandoned)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobAction {
    Install,
    Remove,
}

/// Why an attempt failed.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobFailure {
    #[error("fetch failed: {0}")]
    FetchFailed(String),
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("disk full: {0}")]
    DiskFull(String),
    #[error("site unreachable")]
    SiteUnreachable,
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error("validation failed: {passed}/{run} jobs passed")]
    Validation { passed: u32, run: u32 },
}

impl From<SiteError> for JobFailure {
    fn from(e: SiteError) -> Self {
        match e {
            SiteError::Unreachable => JobFailure::SiteUnreachable,
            SiteError::PermissionDenied(p) => JobFailure::PermissionDenied(p),
            SiteError::DiskFull(p) => JobFailure::DiskFull(p),
            other => JobFailure::TaskFailed(other.to_string()),
        }
    }
}

impl From<RepoError> for JobFailure {
    fn from(e: RepoError) -> Self {
        match e {
            RepoError::DigestMismatch { .. } => JobFailure::DigestMismatch(e.to_string()),
            other => JobFailure::FetchFailed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: JobState,
    pub to: JobState,
    pub at: u64,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<JobFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub job_id: String,
    pub attempt: u32,
    pub jobs_run: u32,
    pub jobs_passed: u32,
    pub verdict: bool,
    pub failures: Vec<String>,
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentJob {
    pub job_id: String,
    pub site: SiteId,
    pub release: ReleaseId,
    pub action: JobAction,
    pub submitter: String,
    pub role: Role,
    pub queue: Queue,
    pub state: JobState,
    /// Number of times the job entered INSTALLING.
    pub attempts: u32,
    pub submitted_at: u64,
    /// Earliest time the job may move again (retry backoff).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub not_before: Option<u64>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("{release} on {site} already has job {existing}")]
    DuplicateSubmission { site: SiteId, release: ReleaseId, existing: String },
    #[error("job {job_id} rejected: {reason}")]
    Unauthorized { job_id: String, reason: String },
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("unknown release {0}")]
    UnknownRelease(ReleaseId),
    #[error("{release} does not support architecture {architecture} of {site}")]
    UnsupportedArchitecture { site: SiteId, release: ReleaseId, architecture: String },
    #[error("{release} is not installed on {site}")]
    NotInstalled { site: SiteId, release: ReleaseId },
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("tag publication failed: {0}")]
    TagPublishFailed(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Result of one [`Orchestrator::step_job`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Moved(JobState),
    /// Work started or backoff pending; nothing to do before this time.
    Waiting(u64),
    Done(JobState),
}

#[derive(Debug, Clone)]
pub(crate) enum WorkResult {
    Files(Result<(), JobFailure>),
    Validation(ValidationReport, Option<JobFailure>),
}

#[derive(Debug, Clone)]
pub(crate) struct PendingWork {
    pub ready_at: u64,
    pub attempt: u32,
    pub result: WorkResult,
}

/// Settled jobs after [`Orchestrator::drive_jobs`].
#[derive(Debug, Default)]
pub struct DriveReport {
    pub steps: u64,
    pub settled: BTreeMap<String, JobState>,
    /// Jobs that could not move, with the reason.
    pub stuck: Vec<(String, DeployError)>,
}

/// Contents of [`RELEASE_MARKER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseMarker {
    pub release: ReleaseId,
    pub manifest_digest: Digest,
    /// Installed path (relative to the release directory) to content digest.
    pub files: BTreeMap<String, Digest>,
}

/// `<project>/<version>` below a site's software area.
pub fn release_dir(release: &ReleaseId) -> PathBuf {
    Path::new(&release.project).join(&release.version)
}

impl Orchestrator {
    pub fn submit_install(
        &mut self,
        cred: &Credential,
        site: &SiteId,
        release: &ReleaseId,
    ) -> Result<DeploymentJob, DeployError> {
        self.submit(cred, site, release, JobAction::Install)
    }

    pub fn submit_remove(
        &mut self,
        cred: &Credential,
        site: &SiteId,
        release: &ReleaseId,
    ) -> Result<DeploymentJob, DeployError> {
        self.submit(cred, site, release, JobAction::Remove)
    }

    fn submit(
        &mut self,
        cred: &Credential,
        site: &SiteId,
        release: &ReleaseId,
        action: JobAction,
    ) -> Result<DeploymentJob, DeployError> {
        let arch = self
            .fleet
            .site(site)
            .map_err(|_| DeployError::UnknownSite(site.clone()))?
            .architecture()
            .to_owned();
        let manifest = &self
            .repo
            .release(release)
            .ok_or_else(|| DeployError::UnknownRelease(release.clone()))?
            .manifest;
        if action == JobAction::Install && !manifest.supports(&arch) {
            return Err(DeployError::UnsupportedArchitecture {
                site: site.clone(),
                release: release.clone(),
                architecture: arch,
            });
        }

        let decision = self.authority.authorize(cred, Action::SubmitInstall, &Resource::Site(site.clone()));
        let now = self.clock.now_ms();
        let job = DeploymentJob {
            job_id: format!("job-{:06}", self.ledger.state().jobs.len() + 1),
            site: site.clone(),
            release: release.clone(),
            action,
            submitter: cred.subject().to_owned(),
            role: cred.role(),
            queue: self.authority.queue_for(cred),
            state: JobState::Submitted,
            attempts: 0,
            submitted_at: now,
            not_before: None,
            transitions: vec![],
        };
        if !decision.allowed {
            self.ledger.record(EventBody::JobSubmitted { job: job.clone() })?;
            self.move_job(&job, JobState::Rejected, 0, None, decision.reason.clone(), None)?;
            return Err(DeployError::Unauthorized { job_id: job.job_id, reason: decision.reason });
        }

        let state = self.ledger.state();
        let duplicate = |existing: &str| DeployError::DuplicateSubmission {
            site: site.clone(),
            release: release.clone(),
            existing: existing.to_owned(),
        };
        let active = |a| state.active_job(site, release, a).map(|j| j.job_id.clone());
        if let Some(existing) = active(JobAction::Install).or_else(|| active(JobAction::Remove)) {
            return Err(duplicate(&existing));
        }
        let record = state.installation(site, release);
        let published = record.filter(|r| r.state == InstallState::Published);
        match (action, published) {
            (JobAction::Install, Some(r)) => return Err(duplicate(&r.job_id)),
            (JobAction::Remove, None) => {
                return Err(DeployError::NotInstalled { site: site.clone(), release: release.clone() })
            }
            _ => {}
        }

        self.ledger.record(EventBody::JobSubmitted { job: job.clone() })?;
        self.move_job(&job, JobState::Authorized, 0, None, decision.reason, None)?;
        Ok(self.ledger.job(&job.job_id).expect("just recorded").clone())
    }

    fn move_job(
        &mut self,
        job: &DeploymentJob,
        to: JobState,
        attempts: u32,
        not_before: Option<u64>,
        detail: impl Into<String>,
        failure: Option<JobFailure>,
    ) -> Result<(), LedgerError> {
        let current = self.ledger.job(&job.job_id).map_or(job.state, |j| j.state);
        self.ledger.record(EventBody::JobTransition {
            job_id: job.job_id.clone(),
            from: current,
            to,
            attempts,
            not_before,
            detail: detail.into(),
            failure,
        })?;
        Ok(())
    }

    /// When the job can next make progress, or `None` once it is terminal.
    pub fn job_ready_at(&self, job: &DeploymentJob) -> Option<u64> {
        if job.state.is_terminal() {
            return None;
        }
        Some(match self.pending.get(&job.job_id) {
            Some(p) if p.attempt == job.attempts => p.ready_at,
            _ => job.not_before.unwrap_or(0),
        })
    }

    /// Performs the next transition of a job if it is due.
    pub fn step_job(&mut self, job_id: &str) -> Result<Step, DeployError> {
        let job = self
            .ledger
            .job(job_id)
            .cloned()
            .ok_or_else(|| DeployError::UnknownJob(job_id.to_owned()))?;
        let now = self.clock.now_ms();
        if job.state.is_terminal() {
            return Ok(Step::Done(job.state));
        }
        if let Some(at) = self.job_ready_at(&job) {
            if at > now {
                return Ok(Step::Waiting(at));
            }
        }
        let to = match job.state {
            JobState::Submitted => {
                // only left behind by an interrupted submission
                self.move_job(&job, JobState::Rejected, 0, None, "submission interrupted", None)?;
                JobState::Rejected
            }
            JobState::Authorized => {
                self.move_job(&job, JobState::Installing, 1, None, "attempt 1", None)?;
                JobState::Installing
            }
            JobState::Installing | JobState::Validating => {
                let pending = self.pending.remove(job_id).filter(|p| p.attempt == job.attempts);
                match pending {
                    None => {
                        let work = if job.state == JobState::Installing {
                            self.start_files(&job, now)
                        } else {
                            self.start_validation(&job, now)
                        };
                        let at = work.ready_at;
                        self.pending.insert(job_id.to_owned(), work);
                        return Ok(Step::Waiting(at));
                    }
                    Some(work) => self.finish_work(&job, work.result)?,
                }
            }
            JobState::Installed => {
                self.move_job(&job, JobState::Validating, job.attempts, None, "validation started", None)?;
                JobState::Validating
            }
            JobState::Validated => {
                self.publish(&job)?;
                JobState::Published
            }
            JobState::InstallFailed | JobState::ValidationFailed => self.retry_or_abandon(&job)?,
            JobState::Published | JobState::Rejected | JobState::Abandoned => unreachable!(),
        };
        Ok(Step::Moved(to))
    }

    /// Steps one job until it is terminal, advancing the clock as needed.
    pub fn run_job(&mut self, job_id: &str) -> Result<JobState, DeployError> {
        loop {
            match self.step_job(job_id)? {
                Step::Done(s) => return Ok(s),
                Step::Waiting(at) => self.clock.sleep_until(at),
                Step::Moved(_) => {}
            }
        }
    }

    /// Drives every active job until all are terminal, always stepping the
    /// job that is ready first.
    pub fn drive_jobs(&mut self) -> Result<DriveReport, DeployError> {
        let mut report = DriveReport::default();
        let mut stuck = BTreeSet::new();
        loop {
            let next = self
                .ledger
                .jobs()
                .filter(|j| !stuck.contains(&j.job_id))
                .filter_map(|j| self.job_ready_at(j).map(|at| (at, j.job_id.clone())))
                .min();
            let Some((at, id)) = next else { break };
            self.clock.sleep_until(at);
            report.steps += 1;
            match self.step_job(&id) {
                Ok(Step::Done(s)) => {
                    report.settled.insert(id, s);
                }
                Ok(Step::Moved(s)) if s.is_terminal() => {
                    report.settled.insert(id, s);
                }
                Ok(_) => {}
                Err(DeployError::Ledger(e)) => return Err(DeployError::Ledger(e)),
                Err(e) => {
                    stuck.insert(id.clone());
                    report.stuck.push((id, e));
                }
            }
        }
        Ok(report)
    }

    fn sources(&self) -> Vec<&Repository> {
        self.mirrors.iter().chain(std::iter::once(&self.repo)).collect()
    }

    /// Installs or removes the release files (the INSTALLING work).
    fn start_files(&mut self, job: &DeploymentJob, now: u64) -> PendingWork {
        let outcome = match self.fleet.exec(&job.site, TaskKind::InstallStep, job.queue, now) {
            Ok(o) => o,
            Err(e) => {
                return PendingWork {
                    ready_at: now,
                    attempt: job.attempts,
                    result: WorkResult::Files(Err(JobFailure::TaskFailed(e.to_string()))),
                }
            }
        };
        let result = match outcome.result {
            Err(e) => Err(e.into()),
            Ok(()) => match job.action {
                JobAction::Install => self.install_files(job),
                JobAction::Remove => self.remove_files(job),
            },
        };
        PendingWork { ready_at: outcome.completed_at, attempt: job.attempts, result: WorkResult::Files(result) }
    }

    fn install_files(&self, job: &DeploymentJob) -> Result<(), JobFailure> {
        let fetched = fetch(&job.release, &self.sources())?;
        let site = self.fleet.site(&job.site).map_err(|e| JobFailure::TaskFailed(e.to_string()))?;
        let root = release_dir(&job.release);
        let mut files = BTreeMap::new();
        for bundle in &fetched.bundles {
            let entries = bundle
                .entries()
                .map_err(|e| JobFailure::DigestMismatch(format!("{}: {e}", bundle.digest())))?;
            for e in entries {
                site.write_file(&root.join(&e.path), &e.content, e.mode)?;
                files.insert(e.path.clone(), Digest::of(&e.content));
            }
        }
        let marker = ReleaseMarker {
            release: job.release.clone(),
            manifest_digest: fetched.manifest.manifest_digest.clone(),
            files,
        };
        let bytes = to_canonical_vec(&marker).expect("marker serializes");
        site.write_file(&root.join(RELEASE_MARKER), &bytes, 0o644)?;
        let mut db = site.read_pkgdb()?;
        db.releases.insert(
            job.release.key(),
            PkgDbEntry {
                release: job.release.clone(),
                manifest_digest: fetched.manifest.manifest_digest.clone(),
                packages: fetched.manifest.packages.iter().map(|p| p.name.clone()).collect(),
            },
        );
        site.write_pkgdb(&db)?;
        Ok(())
    }

    fn remove_files(&self, job: &DeploymentJob) -> Result<(), JobFailure> {
        let site = self.fleet.site(&job.site).map_err(|e| JobFailure::TaskFailed(e.to_string()))?;
        site.remove_tree(&release_dir(&job.release))?;
        let mut db = site.read_pkgdb()?;
        if db.releases.remove(&job.release.key()).is_some() {
            site.write_pkgdb(&db)?;
        }
        Ok(())
    }

    /// Runs the validation jobs. Job `i` checks every installed file whose
    /// index is `i` modulo the job count.
    fn start_validation(&mut self, job: &DeploymentJob, now: u64) -> PendingWork {
        let k = self.config.validation_jobs;
        let mut ready_at = now;
        let mut passed = 0;
        let mut failures = Vec::new();
        let mut unreachable = false;
        for i in 0..k {
            let name = format!("mc-{}", i + 1);
            let outcome = match self.fleet.exec(&job.site, TaskKind::ValidationJob, job.queue, now) {
                Ok(o) => o,
                Err(e) => {
                    failures.push(format!("{name}: {e}"));
                    continue;
                }
            };
            ready_at = ready_at.max(outcome.completed_at);
            let result = outcome.result.map_err(JobFailure::from).and_then(|()| match job.action {
                JobAction::Install => self.check_installed(job, i, k),
                JobAction::Remove => self.check_removed(job),
            });
            match result {
                Ok(()) => passed += 1,
                Err(e) => {
                    unreachable |= e == JobFailure::SiteUnreachable;
                    failures.push(format!("{name}: {e}"));
                }
            }
        }
        let report = ValidationReport {
            job_id: job.job_id.clone(),
            attempt: job.attempts,
            jobs_run: k,
            jobs_passed: passed,
            verdict: passed == k,
            failures,
            completed_at: ready_at,
        };
        let failure = if report.verdict {
            None
        } else if unreachable {
            Some(JobFailure::SiteUnreachable)
        } else {
            Some(JobFailure::Validation { passed, run: k })
        };
        PendingWork { ready_at, attempt: job.attempts, result: WorkResult::Validation(report, failure) }
    }

    fn check_installed(&self, job: &DeploymentJob, i: u32, k: u32) -> Result<(), JobFailure> {
        let site = self.fleet.site(&job.site).map_err(|e| JobFailure::TaskFailed(e.to_string()))?;
        let root = release_dir(&job.release);
        let marker: ReleaseMarker = serde_json::from_slice(&site.read_file(&root.join(RELEASE_MARKER))?)
            .map_err(|e| JobFailure::TaskFailed(format!("release marker: {e}")))?;
        let db = site.read_pkgdb()?;
        match db.releases.get(&job.release.key()) {
            Some(e) if e.manifest_digest == marker.manifest_digest => {}
            _ => return Err(JobFailure::TaskFailed("package database lacks the release".into())),
        }
        for (path, digest) in marker.files.iter().skip(i as usize).step_by(k as usize) {
            let content = site.read_file(&root.join(path))?;
            if Digest::of(&content) != *digest {
                return Err(JobFailure::DigestMismatch(format!("installed file {path}")));
            }
        }
        Ok(())
    }

    fn check_removed(&self, job: &DeploymentJob) -> Result<(), JobFailure> {
        let site = self.fleet.site(&job.site).map_err(|e| JobFailure::TaskFailed(e.to_string()))?;
        if site.exists(&release_dir(&job.release))? {
            return Err(JobFailure::TaskFailed("release directory still present".into()));
        }
        if site.read_pkgdb()?.releases.contains_key(&job.release.key()) {
            return Err(JobFailure::TaskFailed("package database still lists the release".into()));
        }
        Ok(())
    }

    fn finish_work(&mut self, job: &DeploymentJob, result: WorkResult) -> Result<JobState, DeployError> {
        let (ok_state, fail_state) = match job.state {
            JobState::Installing => (JobState::Installed, JobState::InstallFailed),
            _ => (JobState::Validated, JobState::ValidationFailed),
        };
        let failure = match result {
            WorkResult::Files(r) => r.err(),
            WorkResult::Validation(report, failure) => {
                if job.action == JobAction::Install {
                    self.ledger.record(EventBody::ValidationRecorded { job_id: job.job_id.clone(), report })?;
                }
                failure
            }
        };
        match failure {
            None => {
                let detail = if ok_state == JobState::Installed { "files in place" } else { "validation passed" };
                self.move_job(job, ok_state, job.attempts, None, detail, None)?;
                Ok(ok_state)
            }
            Some(f) => {
                let retry_at = self.clock.now_ms() + self.config.backoff_ms(job.attempts);
                let detail = f.to_string();
                self.move_job(job, fail_state, job.attempts, Some(retry_at), detail.clone(), Some(f))?;
                let origin = TicketOrigin::Job { job_id: job.job_id.clone() };
                if self.ledger.open_ticket_for(&origin).is_none() {
                    self.ledger.open_ticket(origin, Severity::Error, format!("attempt {}: {detail}", job.attempts))?;
                }
                Ok(fail_state)
            }
        }
    }

    fn retry_or_abandon(&mut self, job: &DeploymentJob) -> Result<JobState, DeployError> {
        let origin = TicketOrigin::Job { job_id: job.job_id.clone() };
        let ticket = self.ledger.open_ticket_for(&origin).cloned();
        if job.attempts <= self.config.max_retries {
            let next = job.attempts + 1;
            if let Some(t) = ticket.filter(|t| matches!(t.state, TicketState::Open | TicketState::Retrying)) {
                self.ledger.note_retry(&t.ticket_id, format!("retry {}", next - 1))?;
            }
            self.move_job(job, JobState::Installing, next, None, format!("attempt {next}"), None)?;
            return Ok(JobState::Installing);
        }

        let mut detail = format!("abandoned after {} attempts", job.attempts);
        if job.action == JobAction::Install {
            if let Err(e) = self.remove_files(job) {
                detail.push_str(&format!("; cleanup failed: {e}"));
            }
        }
        self.move_job(job, JobState::Abandoned, job.attempts, None, detail.clone(), None)?;
        let ticket = match ticket {
            Some(t) => t,
            None => self.ledger.open_ticket(origin, Severity::Critical, detail.clone())?,
        };
        if ticket.severity != Severity::Critical {
            self.ledger.set_severity(&ticket.ticket_id, Severity::Critical)?;
        }
        if matches!(ticket.state, TicketState::Open | TicketState::Retrying) {
            self.ledger.escalate(&ticket.ticket_id, detail)?;
        }
        Ok(JobState::Abandoned)
    }

    fn publish(&mut self, job: &DeploymentJob) -> Result<(), DeployError> {
        let vo = self.config.vo.clone();
        let installed = Tag::installed(&vo, &job.release).map_err(|e| DeployError::TagPublishFailed(e.to_string()))?;
        match job.action {
            JobAction::Install => {
                self.publish_as_service(&job.site, installed)?;
                let request =
                    Tag::request(&vo, &job.release).map_err(|e| DeployError::TagPublishFailed(e.to_string()))?;
                self.retract_as_service(&job.site, &request)?;
                self.move_job(job, JobState::Published, job.attempts, None, "install tag published", None)?;
            }
            JobAction::Remove => {
                self.retract_as_service(&job.site, &installed)?;
                self.move_job(job, JobState::Published, job.attempts, None, "release removed", None)?;
                self.ledger.record(EventBody::InstallationRemoved {
                    site: job.site.clone(),
                    release: job.release.clone(),
                    job_id: job.job_id.clone(),
                })?;
            }
        }
        let origin = TicketOrigin::Job { job_id: job.job_id.clone() };
        if let Some(t) = self.ledger.open_ticket_for(&origin).cloned() {
            self.ledger.close(&t.ticket_id, "job published")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_states_have_no_exits() {
        for from in JobState::ALL.into_iter().filter(|s| s.is_terminal()) {
            assert!(JobState::ALL.iter().all(|to| !from.can_transition(*to)), "{from:?}");
        }
    }

    #[test]
    fn every_state_reachable_from_submitted() {
        let mut seen = BTreeSet::from([JobState::Submitted]);
        let mut frontier = vec![JobState::Submitted];
        while let Some(s) = frontier.pop() {
            for to in JobState::ALL {
                if s.can_transition(to) && seen.insert(to) {
                    frontier.push(to);
                }
            }
        }
        assert_eq!(seen.len(), JobState::ALL.len());
    }

    #[test]
    fn failure_serialization() {
        let s = crate::canonical::to_canonical_string(&JobFailure::DiskFull("/x".into())).unwrap();
        assert_eq!(s, r#"{"detail":"/x","kind":"DISK_FULL"}"#);
        let s = crate::canonical::to_canonical_string(&JobFailure::SiteUnreachable).unwrap();
        assert_eq!(s, r#"{"kind":"SITE_UNREACHABLE"}"#);
    }
}
