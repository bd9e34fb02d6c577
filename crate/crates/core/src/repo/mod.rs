//! Release preparation: packaging, repository, cold-store backup, mirrors.

mod bundle;
mod coldstore;
mod manifest;
mod repository;

pub use bundle::{build_bundle, verify_bundle, Bundle, BundleError, FileEntry, Verdict, BUNDLE_MAGIC};
pub use coldstore::{backup_release, stored_digests, BackupRecord};
pub use manifest::{cut_release, ManifestError, PackageDescriptor, ReleaseManifest, ReleaseState};
pub use repository::{
    fetch, sync_mirror, Announcement, Fetched, IndexedRelease, MirrorDelta, RepoError,
    Repository, RepositoryIndex,
};
