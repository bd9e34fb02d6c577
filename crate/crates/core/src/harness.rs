//! Simulated compute sites.
//!
//! Each site has a real software-area directory, a local package database
//! file, two serial task queues (normal and privileged) over virtual time,
//! and a set of injectable faults. Behaviour is fully determined by the site
//! config, its RNG seed, the fault schedule and the sequence of calls.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz::Queue;
use crate::canonical::{to_canonical_vec, Digest};
use crate::ids::{is_identifier, ReleaseId, SiteId};

pub const PKGDB_FILE: &str = ".pkgdb.json";
const RW_PROBE_FILE: &str = ".swdist-rw-probe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    Unreachable,
    PermDenied,
    DiskFull,
    PkgdbCorrupt,
    JobFailProb,
    Slow,
}

impl std::str::FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| format!("unknown fault kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fault {
    Unreachable,
    PermDenied,
    DiskFull,
    PkgdbCorrupt,
    /// Each install or validation task fails with probability `p`.
    JobFailProb { p: f64 },
    /// Multiplies task latency.
    Slow { factor: f64 },
}

impl Fault {
    pub fn kind(&self) -> FaultKind {
        match self {
            Fault::Unreachable => FaultKind::Unreachable,
            Fault::PermDenied => FaultKind::PermDenied,
            Fault::DiskFull => FaultKind::DiskFull,
            Fault::PkgdbCorrupt => FaultKind::PkgdbCorrupt,
            Fault::JobFailProb { .. } => FaultKind::JobFailProb,
            Fault::Slow { .. } => FaultKind::Slow,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        match *self {
            Fault::JobFailProb { p } if !(0.0..=1.0).contains(&p) => {
                Err(HarnessError::InvalidFault(format!("probability {p} outside [0, 1]")))
            }
            Fault::Slow { factor } if !(factor >= 1.0 && factor.is_finite()) => {
                Err(HarnessError::InvalidFault(format!("slow factor {factor} below 1")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    InstallStep,
    ValidationJob,
    ProbeCheck,
}

impl TaskKind {
    /// Virtual-time cost of the task on an unloaded, unslowed site.
    pub fn base_latency_ms(self) -> u64 {
        match self {
            TaskKind::InstallStep => 100,
            TaskKind::ValidationJob => 200,
            TaskKind::ProbeCheck => 20,
        }
    }

    fn subject_to_job_failure(self) -> bool {
        matches!(self, TaskKind::InstallStep | TaskKind::ValidationJob)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum SiteError {
    #[error("site unreachable")]
    Unreachable,
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("disk full: {0}")]
    DiskFull(String),
    #[error("local package database unreadable")]
    PkgDbCorrupt,
    #[error("{0:?} task failed")]
    TaskFailed(TaskKind),
    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("site {0} already exists")]
    DuplicateSite(SiteId),
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("invalid site config: {0}")]
    InvalidConfig(String),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("cannot create software area {path}: {message}")]
    Storage { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub id: SiteId,
    pub architecture: String,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SiteConfig {
    pub fn new(id: &str, architecture: &str) -> Self {
        SiteConfig { id: SiteId::new(id), architecture: architecture.into(), faults: vec![], seed: None }
    }
}

/// Contents of the fleet configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(default)]
    pub seed: u64,
    pub sites: Vec<SiteConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueModel {
    /// Virtual time at which the last accepted task completes.
    pub busy_until: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: u64,
    pub site: SiteId,
    pub kind: TaskKind,
    pub queue: Queue,
    pub submitted_at: u64,
    pub started_at: u64,
    pub completed_at: u64,
    pub result: Result<(), SiteError>,
}

impl TaskOutcome {
    pub fn duration_ms(&self) -> u64 {
        self.completed_at - self.started_at
    }
}

/// One release entry in a site's local package database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkgDbEntry {
    pub release: ReleaseId,
    pub manifest_digest: Digest,
    pub packages: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageDb {
    pub releases: BTreeMap<String, PkgDbEntry>,
}

#[derive(Debug)]
pub struct SimSite {
    id: SiteId,
    architecture: String,
    sw_area: PathBuf,
    normal: QueueModel,
    privileged: QueueModel,
    faults: BTreeMap<FaultKind, Fault>,
    rng: ChaCha8Rng,
    next_task: u64,
}

impl SimSite {
    pub fn id(&self) -> &SiteId {
        &self.id
    }

    pub fn architecture(&self) -> &str {
        &self.architecture
    }

    pub fn sw_area(&self) -> &Path {
        &self.sw_area
    }

    pub fn faults(&self) -> Vec<Fault> {
        self.faults.values().copied().collect()
    }

    pub fn has_fault(&self, kind: FaultKind) -> bool {
        self.faults.contains_key(&kind)
    }

    pub fn queue(&self, q: Queue) -> &QueueModel {
        match q {
            Queue::Normal => &self.normal,
            Queue::Privileged => &self.privileged,
        }
    }

    fn slow_factor(&self) -> f64 {
        match self.faults.get(&FaultKind::Slow) {
            Some(Fault::Slow { factor }) => *factor,
            _ => 1.0,
        }
    }

    /// Runs one task. Latency is the task's base cost times any SLOW factor;
    /// the task starts when its queue frees up, and the privileged queue is
    /// independent of the normal backlog.
    pub fn exec(&mut self, kind: TaskKind, queue: Queue, now: u64) -> TaskOutcome {
        self.next_task += 1;
        let task_id = self.next_task;
        let mk = |started_at, completed_at, result| TaskOutcome {
            task_id,
            site: self.id.clone(),
            kind,
            queue,
            submitted_at: now,
            started_at,
            completed_at,
            result,
        };
        if self.has_fault(FaultKind::Unreachable) {
            return mk(now, now, Err(SiteError::Unreachable));
        }
        let latency = (kind.base_latency_ms() as f64 * self.slow_factor()).ceil() as u64;
        let q = match queue {
            Queue::Normal => &mut self.normal,
            Queue::Privileged => &mut self.privileged,
        };
        let started_at = now.max(q.busy_until);
        let completed_at = started_at + latency;
        q.busy_until = completed_at;
        q.accepted += 1;

        let area = self.sw_area.display().to_string();
        let result = if kind == TaskKind::InstallStep && self.has_fault(FaultKind::PermDenied) {
            Err(SiteError::PermissionDenied(area))
        } else if kind == TaskKind::InstallStep && self.has_fault(FaultKind::DiskFull) {
            Err(SiteError::DiskFull(area))
        } else {
            match self.faults.get(&FaultKind::JobFailProb) {
                Some(Fault::JobFailProb { p }) if kind.subject_to_job_failure() => {
                    if self.rng.random::<f64>() < *p {
                        Err(SiteError::TaskFailed(kind))
                    } else {
                        Ok(())
                    }
                }
                _ => Ok(()),
            }
        };
        mk(started_at, completed_at, result)
    }

    fn resolve(&self, rel: &Path) -> PathBuf {
        self.sw_area.join(rel)
    }

    fn guard_write(&self, path: &Path) -> Result<(), SiteError> {
        if self.has_fault(FaultKind::Unreachable) {
            return Err(SiteError::Unreachable);
        }
        if self.has_fault(FaultKind::PermDenied) {
            return Err(SiteError::PermissionDenied(path.display().to_string()));
        }
        if self.has_fault(FaultKind::DiskFull) {
            return Err(SiteError::DiskFull(path.display().to_string()));
        }
        Ok(())
    }

    fn guard_read(&self) -> Result<(), SiteError> {
        if self.has_fault(FaultKind::Unreachable) {
            return Err(SiteError::Unreachable);
        }
        Ok(())
    }

    pub fn write_file(&self, rel: &Path, content: &[u8], mode: u32) -> Result<(), SiteError> {
        let path = self.resolve(rel);
        self.guard_write(&path)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, content).map_err(io_err(&path))?;
        set_mode(&path, mode).map_err(io_err(&path))
    }

    pub fn read_file(&self, rel: &Path) -> Result<Vec<u8>, SiteError> {
        self.guard_read()?;
        let path = self.resolve(rel);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn exists(&self, rel: &Path) -> Result<bool, SiteError> {
        self.guard_read()?;
        Ok(self.resolve(rel).exists())
    }

    /// Removes a directory tree below the software area. Missing trees are fine.
    pub fn remove_tree(&self, rel: &Path) -> Result<(), SiteError> {
        let path = self.resolve(rel);
        if self.has_fault(FaultKind::Unreachable) {
            return Err(SiteError::Unreachable);
        }
        if self.has_fault(FaultKind::PermDenied) {
            return Err(SiteError::PermissionDenied(path.display().to_string()));
        }
        match fs::remove_dir_all(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Creates and deletes a scratch file in the software area.
    pub fn check_rw(&self) -> Result<(), SiteError> {
        let rel = Path::new(RW_PROBE_FILE);
        self.write_file(rel, b"rw", 0o644)?;
        let path = self.resolve(rel);
        fs::remove_file(&path).map_err(io_err(&path))
    }

    pub fn read_pkgdb(&self) -> Result<PackageDb, SiteError> {
        self.guard_read()?;
        if self.has_fault(FaultKind::PkgdbCorrupt) {
            return Err(SiteError::PkgDbCorrupt);
        }
        let path = self.resolve(Path::new(PKGDB_FILE));
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|_| SiteError::PkgDbCorrupt),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(PackageDb::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn write_pkgdb(&self, db: &PackageDb) -> Result<(), SiteError> {
        let bytes = to_canonical_vec(db).expect("package db serializes");
        self.write_file(Path::new(PKGDB_FILE), &bytes, 0o644)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SiteError + '_ {
    move |e| SiteError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[cfg(unix)]
fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    // keep the owner able to rewrite the file on re-install
    fs::set_permissions(path, fs::Permissions::from_mode((mode & 0o7777) | 0o600))
}

#[cfg(not(unix))]
fn set_mode(_path: &Path, _mode: u32) -> io::Result<()> {
    Ok(())
}

fn site_seed(fleet_seed: u64, id: &SiteId) -> u64 {
    // FNV-1a over the id, mixed with the fleet seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_str().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ fleet_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// All simulated sites, each with its software area under
/// `<root>/<site id>/sw`.
#[derive(Debug)]
pub struct Fleet {
    root: PathBuf,
    seed: u64,
    sites: BTreeMap<SiteId, SimSite>,
}

impl Fleet {
    pub fn new(root: impl Into<PathBuf>, seed: u64) -> Self {
        Fleet { root: root.into(), seed, sites: BTreeMap::new() }
    }

    pub fn from_config(root: impl Into<PathBuf>, config: &FleetConfig) -> Result<Self, HarnessError> {
        let mut fleet = Fleet::new(root, config.seed);
        for site in &config.sites {
            fleet.create_site(site.clone())?;
        }
        Ok(fleet)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers a site. Faults listed in the config are active from the start.
    pub fn create_site(&mut self, config: SiteConfig) -> Result<&SimSite, HarnessError> {
        if self.sites.contains_key(&config.id) {
            return Err(HarnessError::DuplicateSite(config.id));
        }
        if !config.id.is_valid() {
            return Err(HarnessError::InvalidConfig(format!("site id {:?}", config.id)));
        }
        if !is_identifier(&config.architecture) {
            return Err(HarnessError::InvalidConfig(format!(
                "architecture {:?}",
                config.architecture
            )));
        }
        let mut faults = BTreeMap::new();
        for f in &config.faults {
            f.validate()?;
            if faults.insert(f.kind(), *f).is_some() {
                return Err(HarnessError::InvalidFault(format!("{:?} listed twice", f.kind())));
            }
        }
        let sw_area = self.root.join(config.id.as_str()).join("sw");
        fs::create_dir_all(&sw_area).map_err(|e| HarnessError::Storage {
            path: sw_area.display().to_string(),
            message: e.to_string(),
        })?;
        let seed = config.seed.unwrap_or_else(|| site_seed(self.seed, &config.id));
        let site = SimSite {
            id: config.id.clone(),
            architecture: config.architecture,
            sw_area,
            normal: QueueModel::default(),
            privileged: QueueModel::default(),
            faults,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_task: 0,
        };
        Ok(self.sites.entry(config.id).or_insert(site))
    }

    pub fn site(&self, id: &SiteId) -> Result<&SimSite, HarnessError> {
        self.sites.get(id).ok_or_else(|| HarnessError::UnknownSite(id.clone()))
    }

    pub fn site_mut(&mut self, id: &SiteId) -> Result<&mut SimSite, HarnessError> {
        self.sites.get_mut(id).ok_or_else(|| HarnessError::UnknownSite(id.clone()))
    }

    pub fn contains(&self, id: &SiteId) -> bool {
        self.sites.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &SiteId> {
        self.sites.keys()
    }

    pub fn sites(&self) -> impl Iterator<Item = &SimSite> {
        self.sites.values()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Activates `fault`, replacing any active fault of the same kind.
    pub fn inject(&mut self, id: &SiteId, fault: Fault) -> Result<Vec<Fault>, HarnessError> {
        fault.validate()?;
        let site = self.site_mut(id)?;
        site.faults.insert(fault.kind(), fault);
        Ok(site.faults())
    }

    pub fn clear(&mut self, id: &SiteId, kind: FaultKind) -> Result<Vec<Fault>, HarnessError> {
        let site = self.site_mut(id)?;
        site.faults.remove(&kind);
        Ok(site.faults())
    }

    pub fn exec(
        &mut self,
        id: &SiteId,
        kind: TaskKind,
        queue: Queue,
        now: u64,
    ) -> Result<TaskOutcome, HarnessError> {
        Ok(self.site_mut(id)?.exec(kind, queue, now))
    }
}
