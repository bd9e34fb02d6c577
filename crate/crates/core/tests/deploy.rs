mod common;

use std::sync::Arc;

use swdist_core::deploy::{release_dir, DeployError, JobFailure, Step, RELEASE_MARKER};
use swdist_core::harness::SiteConfig;
use swdist_core::ledger::{InstallState, Severity, TicketOrigin};
use swdist_core::orchestrator::OrchestratorError;
use swdist_core::{
    Clock, Fault, FaultKind, Fleet, JobState, Orchestrator, OrchestratorConfig, ReleaseId, Repository, Role, SiteId,
    TicketState, VirtualClock,
};

use common::*;

fn one_site() -> (Env, SiteId) {
    let mut e = env(1);
    publish(&mut e.orch, "CMSSW", "1_0_0");
    (e, SiteId::new("site-01"))
}

fn states(o: &Orchestrator, job_id: &str) -> Vec<JobState> {
    let j = o.ledger().job(job_id).unwrap();
    std::iter::once(JobState::Submitted).chain(j.transitions.iter().map(|t| t.to)).collect()
}

#[test]
fn happy_path_walks_the_graph() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_eq!(job.state, JobState::Authorized);
    assert_eq!(e.orch.run_job(&job.job_id).unwrap(), JobState::Published);
    use JobState::*;
    assert_eq!(
        states(&e.orch, &job.job_id),
        [Submitted, Authorized, Installing, Installed, Validating, Validated, Published]
    );
    let area = e.orch.fleet().site(&site).unwrap().sw_area().to_owned();
    assert!(area.join("CMSSW/1_0_0/bin/cmsRun").exists());
    assert!(area.join("CMSSW/1_0_0").join(RELEASE_MARKER).exists());
    let rec = e.orch.ledger().state().installation(&site, &cmssw()).unwrap();
    assert_eq!(rec.state, InstallState::Published);
    let v = rec.validation.as_ref().unwrap();
    assert_eq!((v.jobs_run, v.jobs_passed, v.verdict), (3, 3, true));
    assert!(e.orch.tags().has(&site, "VO-cms-CMSSW_1_0_0"));
}

#[test]
fn virtual_time_follows_task_latencies() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    let t0 = e.clock.now_ms();
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    e.orch.run_job(&job.job_id).unwrap();
    let j = e.orch.ledger().job(&job.job_id).unwrap();
    let at = |s: JobState| j.transitions.iter().find(|t| t.to == s).unwrap().at;
    assert_eq!(at(JobState::Installed) - at(JobState::Installing), 100);
    // three validation jobs, serial on one queue
    assert_eq!(at(JobState::Validated) - at(JobState::Validating), 600);
    assert_eq!(e.clock.now_ms() - t0, 700);
}

#[test]
fn retries_back_off_exponentially() {
    let (mut e, site) = one_site();
    e.orch.inject_fault(&site, Fault::JobFailProb { p: 1.0 }).unwrap();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    e.orch.run_job(&job.job_id).unwrap();
    let j = e.orch.ledger().job(&job.job_id).unwrap();
    let failed: Vec<u64> = j.transitions.iter().filter(|t| t.to == JobState::InstallFailed).map(|t| t.at).collect();
    let retried: Vec<u64> = j.transitions.iter().filter(|t| t.to == JobState::Installing).map(|t| t.at).skip(1).collect();
    assert_eq!(failed.len(), 4);
    let waits: Vec<u64> = failed.iter().zip(&retried).map(|(f, r)| r - f).collect();
    assert_eq!(waits, [2_000, 4_000, 8_000]);
}

#[test]
fn retry_then_success_closes_the_ticket() {
    let (mut e, site) = one_site();
    e.orch.inject_fault(&site, Fault::DiskFull).unwrap();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    // first attempt: start work, then reveal the failure
    assert_eq!(e.orch.step_job(&job.job_id).unwrap(), Step::Moved(JobState::Installing));
    let Step::Waiting(at) = e.orch.step_job(&job.job_id).unwrap() else { panic!() };
    e.clock.advance_to(at);
    assert_eq!(e.orch.step_job(&job.job_id).unwrap(), Step::Moved(JobState::InstallFailed));
    let j = e.orch.ledger().job(&job.job_id).unwrap();
    assert!(matches!(j.transitions.last().unwrap().failure, Some(JobFailure::DiskFull(_))));
    let t = e.orch.ledger().tickets().next().unwrap().clone();
    assert_eq!((t.severity, t.state), (Severity::Error, TicketState::Open));

    e.orch.clear_fault(&site, FaultKind::DiskFull).unwrap();
    assert_eq!(e.orch.run_job(&job.job_id).unwrap(), JobState::Published);
    let t = e.orch.ledger().ticket(&t.ticket_id).unwrap();
    assert_eq!((t.state, t.retry_count), (TicketState::Closed, 1));
    assert_eq!(e.orch.ledger().job(&job.job_id).unwrap().attempts, 2);
}

#[test]
fn permission_denied_is_reported() {
    let (mut e, site) = one_site();
    e.orch.inject_fault(&site, Fault::PermDenied).unwrap();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&job.job_id).unwrap(), JobState::Abandoned);
    let j = e.orch.ledger().job(&job.job_id).unwrap();
    assert!(j
        .transitions
        .iter()
        .filter(|t| t.to == JobState::InstallFailed)
        .all(|t| matches!(t.failure, Some(JobFailure::PermissionDenied(_)))));
}

#[test]
fn corrupt_repositories_give_digest_mismatch() {
    let (mut e, site) = one_site();
    let digests: Vec<_> = e.orch.repository().release(&cmssw()).unwrap().bundles.clone();
    for repo in std::iter::once(e.orch.repository()).chain(e.orch.mirrors()) {
        std::fs::write(repo.bundle_path(&digests[0]), b"rot").unwrap();
    }
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    e.orch.run_job(&job.job_id).unwrap();
    let j = e.orch.ledger().job(&job.job_id).unwrap();
    let first = j.transitions.iter().find(|t| t.to == JobState::InstallFailed).unwrap();
    assert!(matches!(first.failure, Some(JobFailure::DigestMismatch(_))), "{:?}", first.failure);
}

#[test]
fn corrupt_mirror_falls_back_to_primary() {
    let (mut e, site) = one_site();
    let digests: Vec<_> = e.orch.repository().release(&cmssw()).unwrap().bundles.clone();
    let mirror = &e.orch.mirrors()[0];
    std::fs::write(mirror.bundle_path(&digests[1]), b"rot").unwrap();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&job.job_id).unwrap(), JobState::Published);
}

#[test]
fn failed_validation_leaves_files_abandonment_removes_them() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    let id = job.job_id.clone();
    // run until the files are in place, then make validation fail
    while e.orch.ledger().job(&id).unwrap().state != JobState::Installed {
        if let Step::Waiting(at) = e.orch.step_job(&id).unwrap() {
            e.clock.advance_to(at);
        }
    }
    e.orch.inject_fault(&site, Fault::JobFailProb { p: 1.0 }).unwrap();
    while e.orch.ledger().job(&id).unwrap().state != JobState::ValidationFailed {
        if let Step::Waiting(at) = e.orch.step_job(&id).unwrap() {
            e.clock.advance_to(at);
        }
    }
    let area = e.orch.fleet().site(&site).unwrap().sw_area().join(release_dir(&cmssw()));
    assert!(area.join("bin/cmsRun").exists(), "files removed after failed validation");
    let rec = e.orch.ledger().state().installation(&site, &cmssw()).unwrap();
    let v = rec.validation.as_ref().unwrap();
    assert_eq!((v.jobs_run, v.jobs_passed, v.verdict), (3, 0, false));

    assert_eq!(e.orch.run_job(&id).unwrap(), JobState::Abandoned);
    assert!(!area.exists());
    let db = e.orch.fleet().site(&site).unwrap().read_pkgdb().unwrap();
    assert!(db.releases.is_empty());
}

#[test]
fn tampered_install_fails_validation() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    let id = e.orch.submit_install(&cred, &site, &cmssw()).unwrap().job_id;
    while e.orch.ledger().job(&id).unwrap().state != JobState::Installed {
        if let Step::Waiting(at) = e.orch.step_job(&id).unwrap() {
            e.clock.advance_to(at);
        }
    }
    let area = e.orch.fleet().site(&site).unwrap().sw_area().join(release_dir(&cmssw()));
    std::fs::write(area.join("etc/core.cfg"), "threads=64\n").unwrap();
    while e.orch.ledger().job(&id).unwrap().state == JobState::Installed
        || e.orch.ledger().job(&id).unwrap().state == JobState::Validating
    {
        if let Step::Waiting(at) = e.orch.step_job(&id).unwrap() {
            e.clock.advance_to(at);
        }
    }
    let j = e.orch.ledger().job(&id).unwrap();
    assert_eq!(j.state, JobState::ValidationFailed);
    assert_eq!(j.transitions.last().unwrap().failure, Some(JobFailure::Validation { passed: 2, run: 3 }));
    // the retry reinstalls and succeeds
    assert_eq!(e.orch.run_job(&id).unwrap(), JobState::Published);
}

#[test]
fn unreachable_site_during_validation() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    let id = e.orch.submit_install(&cred, &site, &cmssw()).unwrap().job_id;
    while e.orch.ledger().job(&id).unwrap().state != JobState::Installed {
        if let Step::Waiting(at) = e.orch.step_job(&id).unwrap() {
            e.clock.advance_to(at);
        }
    }
    e.orch.inject_fault(&site, Fault::Unreachable).unwrap();
    while e.orch.ledger().job(&id).unwrap().state != JobState::ValidationFailed {
        if let Step::Waiting(at) = e.orch.step_job(&id).unwrap() {
            e.clock.advance_to(at);
        }
    }
    let j = e.orch.ledger().job(&id).unwrap();
    assert_eq!(j.transitions.last().unwrap().failure, Some(JobFailure::SiteUnreachable));
}

#[test]
fn submission_errors() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    assert!(matches!(
        e.orch.submit_install(&cred, &SiteId::new("nowhere"), &cmssw()),
        Err(DeployError::UnknownSite(_))
    ));
    assert!(matches!(
        e.orch.submit_install(&cred, &site, &ReleaseId::new("CMSSW", "9_9_9")),
        Err(DeployError::UnknownRelease(_))
    ));
    for role in [Role::User, Role::Dteam] {
        let c = credential(e.orch.authority(), role, e.clock.now_ms());
        match e.orch.submit_install(&c, &site, &cmssw()) {
            Err(DeployError::Unauthorized { job_id, .. }) => {
                let j = e.orch.ledger().job(&job_id).unwrap();
                assert_eq!(j.state, JobState::Rejected);
                assert!(e.orch.ledger().state().installation(&site, &cmssw()).is_none());
            }
            other => panic!("{role:?}: {other:?}"),
        }
    }
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert!(matches!(
        e.orch.submit_install(&cred, &site, &cmssw()),
        Err(DeployError::DuplicateSubmission { existing, .. }) if existing == job.job_id
    ));
    e.orch.run_job(&job.job_id).unwrap();
    // a published release cannot be submitted again
    assert!(matches!(
        e.orch.submit_install(&cred, &site, &cmssw()),
        Err(DeployError::DuplicateSubmission { .. })
    ));
}

#[test]
fn architecture_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let mut fleet = Fleet::new(dir.path().join("sites"), 1);
    fleet.create_site(SiteConfig::new("arm", "aarch64")).unwrap();
    let mut o = Orchestrator::new(
        OrchestratorConfig::default(),
        Arc::new(VirtualClock::new(0)),
        trust(),
        Repository::open(dir.path().join("repo")).unwrap(),
        vec![],
        fleet,
        None,
    )
    .unwrap();
    publish(&mut o, "CMSSW", "1_0_0");
    let cred = esm(&o);
    assert!(matches!(
        o.submit_install(&cred, &SiteId::new("arm"), &cmssw()),
        Err(DeployError::UnsupportedArchitecture { .. })
    ));
}

#[test]
fn removal_reuses_the_graph() {
    let (mut e, site) = one_site();
    let cred = esm(&e.orch);
    assert!(matches!(
        e.orch.submit_remove(&cred, &site, &cmssw()),
        Err(DeployError::NotInstalled { .. })
    ));
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    e.orch.run_job(&job.job_id).unwrap();

    e.orch.inject_fault(&site, Fault::PermDenied).unwrap();
    let rm = e.orch.submit_remove(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&rm.job_id).unwrap(), JobState::Abandoned);
    let j = e.orch.ledger().job(&rm.job_id).unwrap();
    assert!(matches!(
        j.transitions.iter().find(|t| t.to == JobState::InstallFailed).unwrap().failure,
        Some(JobFailure::PermissionDenied(_))
    ));
    // still installed and tagged
    assert_eq!(
        e.orch.ledger().state().installation(&site, &cmssw()).unwrap().state,
        InstallState::Published
    );
    assert!(e.orch.tags().has(&site, "VO-cms-CMSSW_1_0_0"));

    e.orch.clear_fault(&site, FaultKind::PermDenied).unwrap();
    let rm = e.orch.submit_remove(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&rm.job_id).unwrap(), JobState::Published);
    assert_eq!(
        e.orch.ledger().state().installation(&site, &cmssw()).unwrap().state,
        InstallState::Removed
    );
    assert!(!e.orch.tags().has(&site, "VO-cms-CMSSW_1_0_0"));
    let area = e.orch.fleet().site(&site).unwrap().sw_area().join(release_dir(&cmssw()));
    assert!(!area.exists());
    // and it can be installed again
    let again = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&again.job_id).unwrap(), JobState::Published);
}

#[test]
fn abandoned_install_can_be_resubmitted() {
    let (mut e, site) = one_site();
    e.orch.inject_fault(&site, Fault::JobFailProb { p: 1.0 }).unwrap();
    let cred = esm(&e.orch);
    let first = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&first.job_id).unwrap(), JobState::Abandoned);
    e.orch.clear_fault(&site, FaultKind::JobFailProb).unwrap();
    let second = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_ne!(first.job_id, second.job_id);
    assert_eq!(e.orch.run_job(&second.job_id).unwrap(), JobState::Published);
    // the first job's ticket stays escalated and critical
    let t = e
        .orch
        .ledger()
        .tickets()
        .find(|t| t.origin == TicketOrigin::Job { job_id: first.job_id.clone() })
        .unwrap();
    assert_eq!((t.state, t.severity), (TicketState::Escalated, Severity::Critical));
}

#[test]
fn zero_retries_abandons_after_one_attempt() {
    let config = OrchestratorConfig { max_retries: 0, ..Default::default() };
    let mut e = env_with(1, config, false);
    publish(&mut e.orch, "CMSSW", "1_0_0");
    let site = SiteId::new("site-01");
    e.orch.inject_fault(&site, Fault::JobFailProb { p: 1.0 }).unwrap();
    let cred = esm(&e.orch);
    let job = e.orch.submit_install(&cred, &site, &cmssw()).unwrap();
    assert_eq!(e.orch.run_job(&job.job_id).unwrap(), JobState::Abandoned);
    assert_eq!(e.orch.ledger().job(&job.job_id).unwrap().attempts, 1);
    let t = e.orch.ledger().tickets().next().unwrap();
    assert_eq!((t.state, t.severity), (TicketState::Escalated, Severity::Critical));
}

#[test]
fn zero_validation_jobs_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = OrchestratorConfig { validation_jobs: 0, ..Default::default() };
    let r = Orchestrator::new(
        config,
        Arc::new(VirtualClock::new(0)),
        trust(),
        Repository::open(dir.path().join("repo")).unwrap(),
        vec![],
        Fleet::new(dir.path().join("sites"), 0),
        None,
    );
    assert!(matches!(r, Err(OrchestratorError::Config(c)) if c.key == "validation_jobs"));
}

#[test]
fn jobs_on_different_sites_overlap_in_time() {
    let mut e = env(4);
    publish(&mut e.orch, "CMSSW", "1_0_0");
    let cred = esm(&e.orch);
    let t0 = e.clock.now_ms();
    for s in site_ids(4) {
        e.orch.submit_install(&cred, &s, &cmssw()).unwrap();
    }
    let report = e.orch.drive_jobs().unwrap();
    assert_eq!(report.settled.len(), 4);
    assert!(report.settled.values().all(|s| *s == JobState::Published));
    // same elapsed time as a single job: the sites work in parallel
    assert_eq!(e.clock.now_ms() - t0, 700);
}
