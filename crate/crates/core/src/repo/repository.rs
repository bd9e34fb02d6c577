//! Repository index, publication, mirroring and mirror-preferring fetch.
//!
//! On-disk layout under a repository root:
//!
//! ```text
//! <root>/index              canonical JSON of RepositoryIndex
//! <root>/bundles/<digest>   bundle payloads
//! <root>/announcements.log  one canonical Announcement per line
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{to_canonical_vec, Digest, HASH_ALGORITHM};
use crate::ids::ReleaseId;

use super::bundle::{Bundle, Verdict};
use super::manifest::{ReleaseManifest, ReleaseState};

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("release {0} is already published")]
    AlreadyPublished(ReleaseId),
    #[error("digest mismatch for {what}: expected {expected}")]
    DigestMismatch { what: String, expected: Digest },
    #[error("release {0} not found")]
    NotFound(ReleaseId),
    #[error("release {release} is in state {state:?}, publication needs RELEASED or later")]
    NotReleased { release: ReleaseId, state: ReleaseState },
    #[error("mirror generation {mirror} is ahead of primary generation {primary}")]
    MirrorAhead { mirror: u64, primary: u64 },
    #[error("mirror and primary share generation {0} but differ in content")]
    MirrorDiverged(u64),
    #[error("index uses hash algorithm {0:?}, expected {HASH_ALGORITHM}")]
    HashAlgorithm(String),
    #[error("storage failure at {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt repository metadata at {path}: {message}")]
    CorruptIndex { path: PathBuf, message: String },
}

pub(crate) fn storage(path: &Path) -> impl FnOnce(io::Error) -> RepoError + '_ {
    move |source| RepoError::StorageFailure { path: path.to_owned(), source }
}

/// Writes via a sibling temp file and rename, so readers never see a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RepoError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(storage(&tmp))?;
    fs::rename(&tmp, path).map_err(storage(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedRelease {
    pub manifest: ReleaseManifest,
    pub bundles: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Announcement {
    pub release: ReleaseId,
    pub manifest_digest: Digest,
    pub generation: u64,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepositoryIndex {
    pub hash_algorithm: String,
    pub generation: u64,
    /// Keyed by `project/version`.
    pub releases: BTreeMap<String, IndexedRelease>,
    pub announcements: Vec<Announcement>,
}

impl Default for RepositoryIndex {
    fn default() -> Self {
        RepositoryIndex {
            hash_algorithm: HASH_ALGORITHM.to_owned(),
            generation: 0,
            releases: BTreeMap::new(),
            announcements: Vec::new(),
        }
    }
}

/// What [`sync_mirror`] transferred.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorDelta {
    pub releases_added: Vec<ReleaseId>,
    pub releases_removed: Vec<ReleaseId>,
    pub bundles_copied: Vec<Digest>,
}

impl MirrorDelta {
    pub fn is_empty(&self) -> bool {
        self.releases_added.is_empty()
            && self.releases_removed.is_empty()
            && self.bundles_copied.is_empty()
    }
}

/// A directory-backed repository. The index is cached in memory; bundle
/// payloads are always read back from disk so storage corruption is caught
/// at fetch time.
#[derive(Debug)]
pub struct Repository {
    root: PathBuf,
    index: RepositoryIndex,
}

impl Repository {
    /// Opens the repository at `root`, creating an empty one if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RepoError> {
        let root = root.into();
        let bundles = root.join("bundles");
        fs::create_dir_all(&bundles).map_err(storage(&bundles))?;
        let index_path = root.join("index");
        let index = match fs::read(&index_path) {
            Ok(bytes) => serde_json::from_slice::<RepositoryIndex>(&bytes).map_err(|e| {
                RepoError::CorruptIndex { path: index_path.clone(), message: e.to_string() }
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let index = RepositoryIndex::default();
                write_atomic(&index_path, &to_canonical_vec(&index).expect("index serializes"))?;
                index
            }
            Err(e) => return Err(storage(&index_path)(e)),
        };
        if index.hash_algorithm != HASH_ALGORITHM {
            return Err(RepoError::HashAlgorithm(index.hash_algorithm));
        }
        Ok(Repository { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &RepositoryIndex {
        &self.index
    }

    pub fn generation(&self) -> u64 {
        self.index.generation
    }

    pub fn release(&self, id: &ReleaseId) -> Option<&IndexedRelease> {
        self.index.releases.get(&id.key())
    }

    pub fn contains(&self, id: &ReleaseId) -> bool {
        self.release(id).is_some()
    }

    pub fn releases(&self) -> impl Iterator<Item = &IndexedRelease> {
        self.index.releases.values()
    }

    /// Announcement feed, oldest first.
    pub fn announcements(&self) -> &[Announcement] {
        &self.index.announcements
    }

    pub fn bundle_path(&self, digest: &Digest) -> PathBuf {
        self.root.join("bundles").join(digest.as_str())
    }

    /// Reads a stored payload without verifying it.
    pub fn load_bundle(&self, digest: &Digest) -> Result<Bundle, RepoError> {
        let path = self.bundle_path(digest);
        let payload = fs::read(&path).map_err(storage(&path))?;
        Ok(Bundle::from_stored(digest.clone(), payload))
    }

    /// Loads every bundle of `id` and checks each against its digest.
    pub fn fetch_verified(&self, id: &ReleaseId) -> Result<(ReleaseManifest, Vec<Bundle>), RepoError> {
        let rel = self.release(id).ok_or_else(|| RepoError::NotFound(id.clone()))?;
        let mut out = Vec::with_capacity(rel.bundles.len());
        for d in &rel.bundles {
            let bundle = match self.load_bundle(d) {
                Ok(b) => b,
                Err(RepoError::StorageFailure { source, .. })
                    if source.kind() == io::ErrorKind::NotFound =>
                {
                    return Err(RepoError::DigestMismatch {
                        what: format!("missing bundle of {id}"),
                        expected: d.clone(),
                    })
                }
                Err(e) => return Err(e),
            };
            if let Verdict::Corrupt { expected, .. } = bundle.verify() {
                return Err(RepoError::DigestMismatch { what: format!("bundle of {id}"), expected });
            }
            out.push(bundle);
        }
        Ok((rel.manifest.clone(), out))
    }

    /// Adds a release to the index and announces it. `bundles` must contain
    /// one intact bundle for every package digest; extra bundles are ignored.
    /// On error the repository is unchanged.
    pub fn publish_release(
        &mut self,
        manifest: &ReleaseManifest,
        bundles: &[Bundle],
        at: u64,
    ) -> Result<Announcement, RepoError> {
        let id = manifest.id();
        if self.contains(&id) {
            return Err(RepoError::AlreadyPublished(id));
        }
        if manifest.state < ReleaseState::Released || manifest.state == ReleaseState::Deprecated {
            return Err(RepoError::NotReleased { release: id, state: manifest.state });
        }
        if !manifest.digest_matches() {
            return Err(RepoError::DigestMismatch {
                what: format!("manifest of {id}"),
                expected: manifest.manifest_digest.clone(),
            });
        }
        let by_digest: BTreeMap<&Digest, &Bundle> = bundles
            .iter()
            .filter(|b| b.verify().is_ok())
            .map(|b| (b.digest(), b))
            .collect();
        let mut needed = Vec::new();
        for p in &manifest.packages {
            match by_digest.get(&p.digest) {
                Some(b) if b.size() == p.size => needed.push(*b),
                _ => {
                    return Err(RepoError::DigestMismatch {
                        what: format!("package {} of {id}", p.name),
                        expected: p.digest.clone(),
                    })
                }
            }
        }

        for b in &needed {
            let path = self.bundle_path(b.digest());
            if !path.exists() {
                write_atomic(&path, b.payload())?;
            }
        }
        let mut next = self.index.clone();
        next.generation += 1;
        let announcement = Announcement {
            release: id.clone(),
            manifest_digest: manifest.manifest_digest.clone(),
            generation: next.generation,
            at,
        };
        next.releases.insert(
            id.key(),
            IndexedRelease {
                manifest: manifest.clone(),
                bundles: manifest.packages.iter().map(|p| p.digest.clone()).collect(),
            },
        );
        next.announcements.push(announcement.clone());
        self.commit(next)?;
        self.append_announcement(&announcement)?;
        Ok(announcement)
    }

    fn commit(&mut self, next: RepositoryIndex) -> Result<(), RepoError> {
        let bytes = to_canonical_vec(&next).expect("index serializes");
        write_atomic(&self.root.join("index"), &bytes)?;
        self.index = next;
        Ok(())
    }

    fn append_announcement(&self, a: &Announcement) -> Result<(), RepoError> {
        let path = self.root.join("announcements.log");
        let mut line = to_canonical_vec(a).expect("announcement serializes");
        line.push(b'\n');
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(&line))
            .map_err(storage(&path))
    }

    fn rewrite_announcements(&self) -> Result<(), RepoError> {
        let mut buf = Vec::new();
        for a in &self.index.announcements {
            buf.extend(to_canonical_vec(a).expect("announcement serializes"));
            buf.push(b'\n');
        }
        write_atomic(&self.root.join("announcements.log"), &buf)
    }

    /// All bundle digests referenced by the index.
    pub fn digest_set(&self) -> BTreeSet<Digest> {
        self.releases().flat_map(|r| r.bundles.iter().cloned()).collect()
    }
}

/// Pull-synchronizes `mirror` from `primary`. Afterwards the mirror holds
/// exactly the primary's releases, bundles and announcements, at the
/// primary's generation.
pub fn sync_mirror(primary: &Repository, mirror: &mut Repository) -> Result<MirrorDelta, RepoError> {
    let (pg, mg) = (primary.generation(), mirror.generation());
    if mg > pg {
        return Err(RepoError::MirrorAhead { mirror: mg, primary: pg });
    }
    let mut delta = MirrorDelta::default();
    let mut next = mirror.index.clone();

    for (key, rel) in &primary.index.releases {
        if next.releases.get(key) == Some(rel) {
            continue;
        }
        for d in &rel.bundles {
            let dest = mirror.bundle_path(d);
            let intact = fs::read(&dest).map(|b| Digest::of(&b) == *d).unwrap_or(false);
            if intact {
                continue;
            }
            let b = primary.load_bundle(d)?;
            if !b.verify().is_ok() {
                return Err(RepoError::DigestMismatch {
                    what: format!("primary bundle of {}", rel.manifest.id()),
                    expected: d.clone(),
                });
            }
            write_atomic(&dest, b.payload())?;
            delta.bundles_copied.push(d.clone());
        }
        next.releases.insert(key.clone(), rel.clone());
        delta.releases_added.push(rel.manifest.id());
    }
    let stale: Vec<String> = next
        .releases
        .keys()
        .filter(|k| !primary.index.releases.contains_key(*k))
        .cloned()
        .collect();
    for key in stale {
        if let Some(rel) = next.releases.remove(&key) {
            delta.releases_removed.push(rel.manifest.id());
        }
    }
    next.announcements = primary.index.announcements.clone();

    if next == mirror.index {
        return Ok(delta);
    }
    if mg == pg {
        return Err(RepoError::MirrorDiverged(mg));
    }
    next.generation = pg;
    mirror.commit(next)?;
    mirror.rewrite_announcements()?;
    Ok(delta)
}

/// Result of a successful [`fetch`].
#[derive(Debug)]
pub struct Fetched {
    /// Position in the source list that served the release.
    pub source: usize,
    pub manifest: ReleaseManifest,
    pub bundles: Vec<Bundle>,
    /// Sources that listed the release but failed verification.
    pub rejected: Vec<usize>,
}

/// Fetches `id` from the first source that holds an intact copy.
pub fn fetch(id: &ReleaseId, sources: &[&Repository]) -> Result<Fetched, RepoError> {
    let mut rejected = Vec::new();
    let mut last_err = None;
    for (i, repo) in sources.iter().enumerate() {
        if !repo.contains(id) {
            continue;
        }
        match repo.fetch_verified(id) {
            Ok((manifest, bundles)) => {
                return Ok(Fetched { source: i, manifest, bundles, rejected });
            }
            Err(e) => {
                rejected.push(i);
                last_err = Some(e);
            }
        }
    }
    Err(last_err.unwrap_or_else(|| RepoError::NotFound(id.clone())))
}
