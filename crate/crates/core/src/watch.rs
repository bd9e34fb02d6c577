//! Site monitoring: probes, probe history, check tickets, the request-tag
//! scan and the consolidated status document.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz::{Action, Resource};
use crate::deploy::{release_dir, DeployError, DriveReport, ReleaseMarker, RELEASE_MARKER};
use crate::harness::{SiteError, SimSite, TaskKind};
use crate::ids::{ReleaseId, SiteId};
use crate::ledger::{EventBody, InstallState, LedgerError, Severity, TicketOrigin};
use crate::orchestrator::{Orchestrator, OrchestratorError};
use crate::tags::{Tag, TagKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckId {
    Reachable,
    SwAreaRw,
    ArchMatch,
    PkgDbOk,
    TagsConsistent,
}

impl CheckId {
    pub const ALL: [CheckId; 5] =
        [CheckId::Reachable, CheckId::SwAreaRw, CheckId::ArchMatch, CheckId::PkgDbOk, CheckId::TagsConsistent];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckId,
    pub passed: bool,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub site: SiteId,
    pub timestamp: u64,
    /// One result per check, in [`CheckId::ALL`] order.
    pub checks: Vec<CheckResult>,
    pub overall: bool,
}

impl ProbeResult {
    pub fn check(&self, id: CheckId) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check == id)
    }

    pub fn passed(&self, id: CheckId) -> bool {
        self.check(id).is_some_and(|c| c.passed)
    }

    pub fn is_complete(&self) -> bool {
        self.checks.iter().map(|c| c.check).eq(CheckId::ALL)
            && self.overall == self.checks.iter().all(|c| c.passed)
    }

    fn unreachable(site: SiteId, timestamp: u64) -> Self {
        let checks = CheckId::ALL
            .iter()
            .map(|&check| CheckResult { check, passed: false, evidence: "unreachable".into() })
            .collect();
        ProbeResult { site, timestamp, checks, overall: false }
    }
}

/// A probe result with its position in the site's history (from 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub sequence: u64,
    pub probe: ProbeResult,
}

#[derive(Debug, Error)]
pub enum WatchError {
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub site: SiteId,
    pub tag: String,
    pub reason: String,
}

#[derive(Debug, Default, Serialize)]
pub struct CycleReport {
    pub started_at: u64,
    pub finished_at: u64,
    pub probes: Vec<ProbeResult>,
    pub tickets_opened: Vec<String>,
    pub tickets_closed: Vec<String>,
    pub submitted: Vec<String>,
    pub skipped: Vec<Skipped>,
    #[serde(skip)]
    pub drive: Option<DriveReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseStatus {
    pub release: ReleaseId,
    pub state: InstallState,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteView {
    pub site: SiteId,
    pub architecture: String,
    pub offline: bool,
    pub degraded: bool,
    pub latest_probe: Option<ProbeResult>,
    pub tags: Vec<String>,
    pub installations: Vec<ReleaseStatus>,
    pub open_tickets: Vec<String>,
}

/// Consolidated per-site view, keyed by the ledger sequence it reflects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusDocument {
    pub sequence: u64,
    pub generated_at: u64,
    pub sites: Vec<SiteView>,
    pub degraded_sites: Vec<SiteId>,
}

impl Orchestrator {
    /// Probes one site as the orchestrator (esm, privileged queue) and
    /// records the result.
    pub fn probe_site(&mut self, site: &SiteId) -> Result<HistoryEntry, WatchError> {
        if !self.fleet.contains(site) {
            return Err(WatchError::UnknownSite(site.clone()));
        }
        let decision = self.authority.authorize(&self.service, Action::ProbeRead, &Resource::Site(site.clone()));
        let queue = decision.queue.unwrap_or_else(|| self.authority.queue_for(&self.service));
        let now = self.clock.now_ms();
        let outcome = self
            .fleet
            .exec(site, TaskKind::ProbeCheck, queue, now)
            .map_err(|_| WatchError::UnknownSite(site.clone()))?;
        let probe = match outcome.result {
            Err(SiteError::Unreachable) => ProbeResult::unreachable(site.clone(), outcome.completed_at),
            _ => self.run_checks(site, outcome.completed_at),
        };
        self.clock.sleep_until(outcome.completed_at);
        let sequence = self.ledger.site_status(site).and_then(|s| s.latest()).map_or(0, |e| e.sequence) + 1;
        let entry = HistoryEntry { sequence, probe };
        self.ledger.record(EventBody::ProbeRecorded { entry: entry.clone() })?;
        self.append_history(&entry)?;
        Ok(entry)
    }

    fn run_checks(&self, id: &SiteId, timestamp: u64) -> ProbeResult {
        let site = self.fleet.site(id).expect("checked by caller");
        let mut checks = vec![CheckResult {
            check: CheckId::Reachable,
            passed: true,
            evidence: "probe completed".into(),
        }];
        let mut push = |check, r: Result<String, String>| {
            let (passed, evidence) = match r {
                Ok(e) => (true, e),
                Err(e) => (false, e),
            };
            checks.push(CheckResult { check, passed, evidence });
        };
        push(
            CheckId::SwAreaRw,
            site.check_rw().map(|()| "scratch file written and deleted".to_owned()).map_err(|e| e.to_string()),
        );
        push(CheckId::ArchMatch, self.check_arch(site));
        push(CheckId::PkgDbOk, self.check_pkgdb(site));
        push(CheckId::TagsConsistent, self.check_tags(site));
        let overall = checks.iter().all(|c| c.passed);
        ProbeResult { site: id.clone(), timestamp, checks, overall }
    }

    fn installed_here(&self, site: &SiteId) -> Vec<(ReleaseId, InstallState)> {
        self.ledger
            .state()
            .installations
            .values()
            .filter(|r| &r.site == site)
            .map(|r| (r.release.clone(), r.state))
            .collect()
    }

    fn check_arch(&self, site: &SimSite) -> Result<String, String> {
        let arch = site.architecture();
        let bad: Vec<String> = self
            .installed_here(site.id())
            .into_iter()
            .filter(|(_, s)| matches!(s, InstallState::Installed | InstallState::Validated | InstallState::Published))
            .filter_map(|(r, _)| {
                let m = &self.repo.release(&r)?.manifest;
                (!m.supports(arch)).then(|| format!("{r} built for {}", m.architectures.join(",")))
            })
            .collect();
        if bad.is_empty() {
            Ok(format!("{arch}: all installed releases match"))
        } else {
            Err(format!("{arch}: {}", bad.join("; ")))
        }
    }

    fn check_pkgdb(&self, site: &SimSite) -> Result<String, String> {
        let db = site.read_pkgdb().map_err(|e| e.to_string())?;
        let mut bad = Vec::new();
        for (key, entry) in &db.releases {
            if let Some(r) = self.repo.release(&entry.release) {
                if r.manifest.manifest_digest != entry.manifest_digest {
                    bad.push(format!("{key}: manifest digest differs from repository"));
                }
            }
        }
        if bad.is_empty() {
            Ok(format!("{} releases registered", db.releases.len()))
        } else {
            Err(bad.join("; "))
        }
    }

    /// Published install tags must match PUBLISHED records both ways, and
    /// every published release must still be present on disk.
    fn check_tags(&self, site: &SimSite) -> Result<String, String> {
        let tagged: BTreeSet<String> = self
            .tags
            .site(site.id())
            .map(|s| s.tags.iter().filter(|t| t.kind() == TagKind::Installed).map(|t| t.raw().to_owned()).collect())
            .unwrap_or_default();
        let mut expected = BTreeSet::new();
        let mut problems = Vec::new();
        for (release, state) in self.installed_here(site.id()) {
            if state != InstallState::Published {
                continue;
            }
            let Ok(tag) = Tag::installed(&self.config.vo, &release) else { continue };
            expected.insert(tag.raw().to_owned());
            if let Err(e) = marker_matches(site, &release) {
                problems.push(format!("{release}: {e}"));
            }
        }
        for t in tagged.difference(&expected) {
            problems.push(format!("tag {t} without a published installation"));
        }
        for t in expected.difference(&tagged) {
            problems.push(format!("published installation without tag {t}"));
        }
        if problems.is_empty() {
            Ok(format!("{} install tags consistent", tagged.len()))
        } else {
            Err(problems.join("; "))
        }
    }

    /// Opens a warning ticket for each newly failing check and closes it once
    /// the check passes again. When the site is unreachable only the
    /// reachability check is ticketed.
    fn update_check_tickets(&mut self, probe: &ProbeResult, report: &mut CycleReport) -> Result<(), LedgerError> {
        let reachable = probe.passed(CheckId::Reachable);
        for c in &probe.checks {
            if !reachable && c.check != CheckId::Reachable {
                continue;
            }
            let origin = TicketOrigin::Check { site: probe.site.clone(), check: c.check };
            let open = self.ledger.open_ticket_for(&origin).map(|t| t.ticket_id.clone());
            match (c.passed, open) {
                (false, None) => {
                    let t = self.ledger.open_ticket(origin, Severity::Warning, c.evidence.clone())?;
                    report.tickets_opened.push(t.ticket_id);
                }
                (true, Some(id)) => {
                    self.ledger.close(&id, format!("{:?} passing again", c.check))?;
                    report.tickets_closed.push(id);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Release named by a request tag payload (`<project>_<version>`).
    fn release_for_payload(&self, payload: &str) -> Option<ReleaseId> {
        self.repo
            .releases()
            .map(|r| r.manifest.id())
            .find(|id| format!("{}_{}", id.project, id.version) == payload)
    }

    /// One monitoring cycle: probe every site, update check tickets, submit
    /// installs for request tags, then (if configured) drive jobs to rest.
    pub fn run_cycle(&mut self) -> Result<CycleReport, WatchError> {
        let mut report = CycleReport { started_at: self.clock.now_ms(), ..Default::default() };
        let sites: Vec<SiteId> = self.fleet.ids().cloned().collect();
        for site in &sites {
            let entry = self.probe_site(site)?;
            self.update_check_tickets(&entry.probe, &mut report)?;
            report.probes.push(entry.probe);
        }

        for (site, probe) in sites.iter().zip(&report.probes.clone()) {
            let requests: Vec<Tag> = self
                .tags
                .site(site)
                .map(|s| s.tags.iter().filter(|t| t.kind() == TagKind::Request).cloned().collect())
                .unwrap_or_default();
            for tag in requests {
                let skip = |reason: &str| Skipped {
                    site: site.clone(),
                    tag: tag.raw().to_owned(),
                    reason: reason.to_owned(),
                };
                if tag.vo() != self.config.vo {
                    report.skipped.push(skip("foreign virtual organization"));
                    continue;
                }
                if self.ledger.site_status(site).is_some_and(|s| s.offline) {
                    report.skipped.push(skip("site offline"));
                    continue;
                }
                if !probe.passed(CheckId::Reachable) {
                    report.skipped.push(skip("site unreachable"));
                    continue;
                }
                let Some(release) = self.release_for_payload(tag.payload()) else {
                    report.skipped.push(skip("release not in repository"));
                    continue;
                };
                if self.ledger.exists(site, &release, false) {
                    report.skipped.push(skip("job already active"));
                    continue;
                }
                let service = self.service.clone();
                match self.submit_install(&service, site, &release) {
                    Ok(job) => report.submitted.push(job.job_id),
                    Err(DeployError::DuplicateSubmission { .. }) => {
                        // already published: the request is stale
                        self.retract_as_service(site, &tag)?;
                        report.skipped.push(skip("already published; request retracted"));
                    }
                    Err(DeployError::Ledger(e)) => return Err(e.into()),
                    Err(e) => report.skipped.push(skip(&e.to_string())),
                }
            }
        }

        if self.config.drive_jobs {
            report.drive = Some(self.drive_jobs()?);
        }
        report.finished_at = self.clock.now_ms();
        Ok(report)
    }

    /// Most recent `last` probes of a site, newest first.
    pub fn history(&self, site: &SiteId, last: usize) -> Result<Vec<HistoryEntry>, WatchError> {
        if !self.fleet.contains(site) {
            return Err(WatchError::UnknownSite(site.clone()));
        }
        Ok(self.ledger.history(site, last))
    }

    pub fn render_status(&self) -> StatusDocument {
        let state = self.ledger.state();
        let mut sites = Vec::new();
        for site in self.fleet.sites() {
            let id = site.id();
            let status = state.sites.get(id);
            let latest = status.and_then(|s| s.latest()).map(|e| e.probe.clone());
            let open_tickets = state
                .tickets
                .values()
                .filter(|t| !t.is_closed())
                .filter(|t| match &t.origin {
                    TicketOrigin::Check { site, .. } => site == id,
                    TicketOrigin::Job { job_id } => state.jobs.get(job_id).is_some_and(|j| &j.site == id),
                })
                .map(|t| t.ticket_id.clone())
                .collect();
            let offline = status.is_some_and(|s| s.offline);
            sites.push(SiteView {
                site: id.clone(),
                architecture: site.architecture().to_owned(),
                offline,
                degraded: offline || latest.as_ref().is_some_and(|p| !p.overall),
                latest_probe: latest,
                tags: self.tags.site(id).map(|s| s.raws()).unwrap_or_default(),
                installations: state
                    .installations
                    .values()
                    .filter(|r| &r.site == id)
                    .map(|r| ReleaseStatus { release: r.release.clone(), state: r.state, job_id: r.job_id.clone() })
                    .collect(),
                open_tickets,
            });
        }
        let degraded_sites = sites.iter().filter(|s| s.degraded).map(|s| s.site.clone()).collect();
        StatusDocument { sequence: state.sequence, generated_at: self.clock.now_ms(), sites, degraded_sites }
    }
}

/// Checks the release marker and that every recorded file is present.
fn marker_matches(site: &SimSite, release: &ReleaseId) -> Result<(), String> {
    let root = release_dir(release);
    let bytes = site.read_file(&root.join(RELEASE_MARKER)).map_err(|_| "install root missing".to_owned())?;
    let marker: ReleaseMarker = serde_json::from_slice(&bytes).map_err(|e| format!("release marker: {e}"))?;
    for path in marker.files.keys() {
        if !site.exists(&root.join(Path::new(path))).map_err(|e| e.to_string())? {
            return Err(format!("missing {path}"));
        }
    }
    Ok(())
}
