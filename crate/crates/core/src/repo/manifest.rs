use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Digest;
use crate::ids::{is_identifier, ReleaseId};

use super::bundle::Bundle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageDescriptor {
    pub name: String,
    pub version: String,
    pub digest: Digest,
    pub size: u64,
    #[serde(default)]
    pub depends: Vec<String>,
}

impl PackageDescriptor {
    /// Describes `bundle` as package `name`/`version`.
    pub fn for_bundle(name: impl Into<String>, version: impl Into<String>, bundle: &Bundle) -> Self {
        PackageDescriptor {
            name: name.into(),
            version: version.into(),
            digest: bundle.digest().clone(),
            size: bundle.size(),
            depends: Vec::new(),
        }
    }

    pub fn depends_on<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.depends.extend(names.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReleaseState {
    Draft,
    Released,
    Validated,
    Archived,
    Deprecated,
}

impl ReleaseState {
    pub fn can_move_to(self, to: ReleaseState) -> bool {
        use ReleaseState::*;
        matches!(
            (self, to),
            (Draft, Released) | (Released, Validated) | (Validated, Archived)
        ) || (to == Deprecated && self != Deprecated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("release has no packages")]
    EmptyRelease,
    #[error("release has no architectures")]
    NoArchitecture,
    #[error("bad identifier in {field}: {value:?}")]
    BadIdentifier { field: &'static str, value: String },
    #[error("duplicate package {0:?}")]
    DuplicatePackage(String),
    #[error("package {package:?} depends on unknown package {missing:?}")]
    DanglingDependency { package: String, missing: String },
    #[error("package {0:?} depends on itself")]
    SelfDependency(String),
    #[error("package {package:?} lists dependency {dependency:?} twice")]
    DuplicateDependency { package: String, dependency: String },
    #[error("illegal release state transition {from:?} -> {to:?}")]
    IllegalTransition { from: ReleaseState, to: ReleaseState },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseManifest {
    pub project: String,
    pub version: String,
    pub architectures: Vec<String>,
    pub packages: Vec<PackageDescriptor>,
    pub created_at: u64,
    pub state: ReleaseState,
    pub manifest_digest: Digest,
}

/// The part of a manifest that the digest covers.
#[derive(Serialize)]
struct DigestedContent<'a> {
    project: &'a str,
    version: &'a str,
    architectures: &'a [String],
    packages: &'a [PackageDescriptor],
}

/// Fixes the content of a release. Packages are stored sorted by name and
/// architectures sorted and deduplicated, so the digest does not depend on
/// input order.
pub fn cut_release(
    project: &str,
    version: &str,
    architectures: &[&str],
    packages: Vec<PackageDescriptor>,
    created_at: u64,
) -> Result<ReleaseManifest, ManifestError> {
    for (field, value) in [("project", project), ("version", version)] {
        if !is_identifier(value) {
            return Err(ManifestError::BadIdentifier { field, value: value.to_owned() });
        }
    }
    if packages.is_empty() {
        return Err(ManifestError::EmptyRelease);
    }
    let architectures: BTreeSet<String> = architectures.iter().map(|a| a.to_string()).collect();
    if architectures.is_empty() {
        return Err(ManifestError::NoArchitecture);
    }
    if let Some(bad) = architectures.iter().find(|a| !is_identifier(a)) {
        return Err(ManifestError::BadIdentifier { field: "architecture", value: bad.clone() });
    }

    let mut names = BTreeSet::new();
    for p in &packages {
        if p.name.is_empty() || p.version.is_empty() {
            return Err(ManifestError::BadIdentifier { field: "package", value: p.name.clone() });
        }
        if !names.insert(p.name.as_str()) {
            return Err(ManifestError::DuplicatePackage(p.name.clone()));
        }
    }
    for p in &packages {
        let mut seen = BTreeSet::new();
        for d in &p.depends {
            if d == &p.name {
                return Err(ManifestError::SelfDependency(p.name.clone()));
            }
            if !seen.insert(d) {
                return Err(ManifestError::DuplicateDependency {
                    package: p.name.clone(),
                    dependency: d.clone(),
                });
            }
            if !names.contains(d.as_str()) {
                return Err(ManifestError::DanglingDependency {
                    package: p.name.clone(),
                    missing: d.clone(),
                });
            }
        }
    }

    let mut packages = packages;
    packages.sort_by(|a, b| a.name.cmp(&b.name));
    let mut manifest = ReleaseManifest {
        project: project.to_owned(),
        version: version.to_owned(),
        architectures: architectures.into_iter().collect(),
        packages,
        created_at,
        state: ReleaseState::Released,
        manifest_digest: Digest::of(b""),
    };
    manifest.manifest_digest = manifest.compute_digest();
    Ok(manifest)
}

impl ReleaseManifest {
    pub fn id(&self) -> ReleaseId {
        ReleaseId::new(&self.project, &self.version)
    }

    /// Canonical bytes the digest is computed over.
    pub fn digested_bytes(&self) -> Vec<u8> {
        crate::canonical::to_canonical_vec(&DigestedContent {
            project: &self.project,
            version: &self.version,
            architectures: &self.architectures,
            packages: &self.packages,
        })
        .expect("manifest content serializes")
    }

    pub fn compute_digest(&self) -> Digest {
        Digest::of(&self.digested_bytes())
    }

    pub fn digest_matches(&self) -> bool {
        self.compute_digest() == self.manifest_digest
    }

    pub fn transition(&mut self, to: ReleaseState) -> Result<(), ManifestError> {
        if !self.state.can_move_to(to) {
            return Err(ManifestError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    pub fn supports(&self, architecture: &str) -> bool {
        self.architectures.iter().any(|a| a == architecture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repo::{build_bundle, FileEntry};

    fn pkg(name: &str, content: &str) -> PackageDescriptor {
        let b = build_bundle([FileEntry::new(format!("{name}/lib.so"), 0o755, content)]).unwrap();
        PackageDescriptor::for_bundle(name, "1.0", &b)
    }

    #[test]
    fn cut_two_packages() {
        let m = cut_release(
            "CMSSW",
            "1_0_0",
            &["slc3_ia32"],
            vec![pkg("pkgA", "a"), pkg("pkgB", "b").depends_on(["pkgA"])],
            0,
        )
        .unwrap();
        assert_eq!(m.packages.len(), 2);
        assert_eq!(m.state, ReleaseState::Released);
        assert!(m.digest_matches());
    }

    #[test]
    fn empty_release() {
        let err = cut_release("CMSSW", "1_0_0", &["slc3_ia32"], vec![], 0).unwrap_err();
        assert_eq!(err, ManifestError::EmptyRelease);
    }

    #[test]
    fn dependency_errors() {
        let err = cut_release("P", "1", &["x"], vec![pkg("a", "").depends_on(["zz"])], 0).unwrap_err();
        assert!(matches!(err, ManifestError::DanglingDependency { .. }));
        let err = cut_release("P", "1", &["x"], vec![pkg("a", "").depends_on(["a"])], 0).unwrap_err();
        assert_eq!(err, ManifestError::SelfDependency("a".into()));
        let err =
            cut_release("P", "1", &["x"], vec![pkg("a", ""), pkg("b", "").depends_on(["a", "a"])], 0)
                .unwrap_err();
        assert!(matches!(err, ManifestError::DuplicateDependency { .. }));
        let err = cut_release("P", "1", &["x"], vec![pkg("a", "1"), pkg("a", "2")], 0).unwrap_err();
        assert_eq!(err, ManifestError::DuplicatePackage("a".into()));
    }

    #[test]
    fn digest_ignores_package_order_and_time() {
        let a = cut_release("P", "1", &["x", "y"], vec![pkg("a", "1"), pkg("b", "2")], 5).unwrap();
        let b = cut_release("P", "1", &["y", "x"], vec![pkg("b", "2"), pkg("a", "1")], 9).unwrap();
        assert_eq!(a.manifest_digest, b.manifest_digest);
        let c = cut_release("P", "2", &["x", "y"], vec![pkg("a", "1"), pkg("b", "2")], 5).unwrap();
        assert_ne!(a.manifest_digest, c.manifest_digest);
    }

    #[test]
    fn state_graph() {
        use ReleaseState::*;
        let mut m = cut_release("P", "1", &["x"], vec![pkg("a", "")], 0).unwrap();
        assert!(m.transition(Archived).is_err());
        m.transition(Validated).unwrap();
        m.transition(Archived).unwrap();
        m.transition(Deprecated).unwrap();
        assert!(m.transition(Deprecated).is_err());
        assert!(Draft.can_move_to(Deprecated));
        assert!(!Released.can_move_to(Draft));
    }
}
