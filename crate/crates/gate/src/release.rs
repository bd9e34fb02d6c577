//! Cutting a release from package directories into an output directory,
//! and reading that directory back for publication.
//!
//! ```text
//! <out>/manifest.json        canonical manifest
//! <out>/bundles/<digest>     one payload per package
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde_json::{json, Value};
use swdist_core::repo::PackageDescriptor;
use swdist_core::{build_bundle, cut_release, to_canonical_vec, Bundle, Digest, FileEntry, ReleaseManifest};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct PackageSource {
    pub name: String,
    pub dir: PathBuf,
    pub depends: Vec<String>,
}

/// Every regular file under `root`, with `/`-separated relative paths.
fn collect_files(root: &Path) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let entry = entry?;
            let path = entry.path();
            let meta = entry.metadata()?;
            if meta.is_dir() {
                stack.push(path);
            } else if meta.is_file() {
                let rel = path.strip_prefix(root).expect("under root");
                let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                let content = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                out.push(FileEntry::new(rel.join("/"), file_mode(&meta), content));
            }
        }
    }
    Ok(out)
}

#[cfg(unix)]
fn file_mode(meta: &fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o777
}

#[cfg(not(unix))]
fn file_mode(_: &fs::Metadata) -> u32 {
    0o644
}

/// Bundles each package directory, cuts the manifest and writes both to
/// `out`.
pub fn cut_to_dir(
    project: &str,
    version: &str,
    architectures: &[String],
    packages: &[PackageSource],
    created_at: u64,
    out: &Path,
) -> Result<ReleaseManifest> {
    let mut descriptors = Vec::new();
    let mut bundles = Vec::new();
    for p in packages {
        let files = collect_files(&p.dir)?;
        if files.is_empty() {
            bail!("package {} has no files under {}", p.name, p.dir.display());
        }
        let bundle = build_bundle(files).with_context(|| format!("bundling {}", p.name))?;
        descriptors.push(PackageDescriptor::for_bundle(&p.name, version, &bundle).depends_on(p.depends.clone()));
        bundles.push(bundle);
    }
    let archs: Vec<&str> = architectures.iter().map(String::as_str).collect();
    let manifest = cut_release(project, version, &archs, descriptors, created_at)?;

    let bundle_dir = out.join("bundles");
    fs::create_dir_all(&bundle_dir).with_context(|| format!("creating {}", bundle_dir.display()))?;
    for b in &bundles {
        fs::write(bundle_dir.join(b.digest().as_str()), b.payload())?;
    }
    fs::write(out.join(MANIFEST_FILE), to_canonical_vec(&manifest)?)?;
    Ok(manifest)
}

/// Reads a cut directory into the body of `POST /releases`.
pub fn publish_body(dir: &Path) -> Result<Value> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: ReleaseManifest = serde_json::from_slice(
        &fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
    )
    .with_context(|| format!("parsing {}", path.display()))?;
    let mut bundles = Vec::new();
    for p in &manifest.packages {
        let path = dir.join("bundles").join(p.digest.as_str());
        let payload = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let bundle = Bundle::from_stored(p.digest.clone(), payload);
        if !bundle.verify().is_ok() {
            bail!("bundle {} of package {} does not match its digest", p.digest, p.name);
        }
        bundles.push(json!({ "digest": p.digest, "payload": STANDARD.encode(bundle.payload()) }));
    }
    Ok(json!({ "manifest": manifest, "bundles": bundles }))
}

/// Parses `NAME=DIR` and `NAME=DEP` arguments into package sources.
pub fn parse_packages(specs: &[String], depends: &[String]) -> Result<Vec<PackageSource>> {
    let mut out = Vec::new();
    for s in specs {
        let Some((name, dir)) = s.split_once('=') else { bail!("expected NAME=DIR, got {s:?}") };
        out.push(PackageSource { name: name.to_owned(), dir: PathBuf::from(dir), depends: vec![] });
    }
    for d in depends {
        let Some((name, dep)) = d.split_once('=') else { bail!("expected NAME=DEPENDENCY, got {d:?}") };
        let Some(p) = out.iter_mut().find(|p| p.name == name) else { bail!("--depend names unknown package {name:?}") };
        p.depends.push(dep.to_owned());
    }
    Ok(out)
}

pub fn short(d: &Digest) -> &str {
    &d.as_str()[..12]
}
