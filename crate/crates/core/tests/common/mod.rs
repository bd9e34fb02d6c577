#![allow(dead_code)]

use std::sync::Arc;

use swdist_core::authz::Claims;
use swdist_core::harness::SiteConfig;
use swdist_core::repo::PackageDescriptor;
use swdist_core::{
    build_bundle, cut_release, Authority, Bundle, Credential, FileEntry, Fleet, Orchestrator,
    OrchestratorConfig, ReleaseId, ReleaseManifest, Repository, Role, SiteId, TrustConfig,
    VirtualClock,
};
use tempfile::TempDir;

pub const KEY: &[u8] = b"test-key-0123456789abcdef";
pub const ARCH: &str = "slc3_ia32";

pub struct Env {
    pub dir: TempDir,
    pub clock: Arc<VirtualClock>,
    pub orch: Orchestrator,
}

pub fn site_ids(n: usize) -> Vec<SiteId> {
    (1..=n).map(|i| SiteId::new(format!("site-{i:02}"))).collect()
}

pub fn trust() -> TrustConfig {
    TrustConfig::new(KEY.to_vec(), "cms")
}

pub fn credential(authority: &Authority, role: Role, now: u64) -> Credential {
    let claims = Claims {
        subject: format!("/CN={role:?}"),
        vo: "cms".into(),
        role,
        expires_at: now + 3_600_000,
    };
    authority.authenticate(authority.mint(&claims).as_bytes(), now).unwrap()
}

pub fn esm(orch: &Orchestrator) -> Credential {
    credential(orch.authority(), Role::Esm, orch.clock().now_ms())
}

/// A small release of two packages with a dependency between them.
pub fn release_parts(project: &str, version: &str) -> (ReleaseManifest, Vec<Bundle>) {
    let core = build_bundle(vec![
        FileEntry::new("bin/cmsRun", 0o755, format!("#!/bin/sh\necho {project} {version}\n")),
        FileEntry::new("lib/libcore.so", 0o644, vec![7u8; 300]),
        FileEntry::new("etc/core.cfg", 0o644, "threads=1\n"),
    ])
    .unwrap();
    let gen = build_bundle(vec![
        FileEntry::new("lib/libgen.so", 0o644, vec![9u8; 200]),
        FileEntry::new("share/gen/cards.txt", 0o644, format!("cards for {version}\n")),
    ])
    .unwrap();
    let manifest = cut_release(
        project,
        version,
        &[ARCH],
        vec![
            PackageDescriptor::for_bundle("core", version, &core),
            PackageDescriptor::for_bundle("generators", version, &gen).depends_on(["core"]),
        ],
        1_000,
    )
    .unwrap();
    (manifest, vec![core, gen])
}

pub fn env_with(n: usize, config: OrchestratorConfig, state: bool) -> Env {
    env_seeded(n, config, state, 42)
}

pub fn env_seeded(n: usize, config: OrchestratorConfig, state: bool, seed: u64) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(VirtualClock::new(1_000_000));
    let mut fleet = Fleet::new(dir.path().join("sites"), seed);
    for id in site_ids(n) {
        fleet.create_site(SiteConfig::new(id.as_str(), ARCH)).unwrap();
    }
    let repo = Repository::open(dir.path().join("repo")).unwrap();
    let mirror = Repository::open(dir.path().join("mirror")).unwrap();
    let state_dir = dir.path().join("state");
    let orch = Orchestrator::new(
        config,
        clock.clone(),
        trust(),
        repo,
        vec![mirror],
        fleet,
        state.then_some(state_dir.as_path()),
    )
    .unwrap();
    Env { dir, clock, orch }
}

pub fn env(n: usize) -> Env {
    env_with(n, OrchestratorConfig::default(), true)
}

pub fn cmssw() -> ReleaseId {
    ReleaseId::new("CMSSW", "1_0_0")
}

/// Publishes `project/version` to the primary and syncs the mirror.
pub fn publish(orch: &mut Orchestrator, project: &str, version: &str) -> ReleaseManifest {
    let (manifest, bundles) = release_parts(project, version);
    let cred = esm(orch);
    orch.publish_release(&cred, &manifest, &bundles).unwrap();
    orch.sync_mirrors().unwrap();
    manifest
}
