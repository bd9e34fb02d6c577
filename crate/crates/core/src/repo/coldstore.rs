//! Write-once backup tree.
//!
//! `<coldstore>/<project>/<version>/<digest>` holds each bundle payload and
//! `<coldstore>/<project>/<version>/record.json` the backup record. Existing
//! files are never overwritten; a backup that finds identical bytes in place
//! is a no-op.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::{to_canonical_vec, Digest};
use crate::ids::ReleaseId;

use super::repository::{storage, RepoError, Repository};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupRecord {
    pub release: ReleaseId,
    pub manifest_digest: Digest,
    pub digests: Vec<Digest>,
}

pub fn backup_release(
    repo: &Repository,
    id: &ReleaseId,
    coldstore: &Path,
) -> Result<BackupRecord, RepoError> {
    let (manifest, bundles) = repo.fetch_verified(id)?;
    let dir = coldstore.join(&id.project).join(&id.version);
    fs::create_dir_all(&dir).map_err(storage(&dir))?;
    for b in &bundles {
        write_once(&dir.join(b.digest().as_str()), b.payload())?;
    }
    let record = BackupRecord {
        release: id.clone(),
        manifest_digest: manifest.manifest_digest.clone(),
        digests: bundles.iter().map(|b| b.digest().clone()).collect(),
    };
    write_once(&dir.join("record.json"), &to_canonical_vec(&record).expect("record serializes"))?;
    Ok(record)
}

/// Digests of the payloads actually present in the cold store for `id`,
/// recomputed from the stored bytes.
pub fn stored_digests(coldstore: &Path, id: &ReleaseId) -> Result<Vec<Digest>, RepoError> {
    let dir = coldstore.join(&id.project).join(&id.version);
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(storage(&dir))? {
        let path: PathBuf = entry.map_err(storage(&dir))?.path();
        if path.file_name().and_then(|n| n.to_str()).and_then(Digest::parse).is_some() {
            out.push(Digest::of(&fs::read(&path).map_err(storage(&path))?));
        }
    }
    out.sort();
    Ok(out)
}

fn write_once(path: &Path, bytes: &[u8]) -> Result<(), RepoError> {
    match fs::read(path) {
        Ok(existing) if existing == bytes => Ok(()),
        Ok(_) => Err(RepoError::StorageFailure {
            path: path.to_owned(),
            source: io::Error::new(io::ErrorKind::AlreadyExists, "write-once file differs"),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            fs::write(path, bytes).map_err(storage(path))
        }
        Err(e) => Err(storage(path)(e)),
    }
}
