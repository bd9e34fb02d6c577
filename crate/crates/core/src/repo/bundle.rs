//! Deterministic bundle format.
//!
//! Payload layout, all integers big-endian:
//!
//! ```text
//! "SWB1"  u32 entry_count
//! repeated: u32 path_len  path bytes  u32 mode  u64 content_len  content bytes
//! ```
//!
//! Entries are sorted by path bytes before encoding, so the payload (and its
//! digest) depends only on the set of entries, never on the order they were
//! supplied in.

use std::fmt;

use thiserror::Error;

use crate::canonical::Digest;

pub const BUNDLE_MAGIC: &[u8; 4] = b"SWB1";

#[derive(Clone, PartialEq, Eq)]
pub struct FileEntry {
    pub path: String,
    pub mode: u32,
    pub content: Vec<u8>,
}

impl FileEntry {
    pub fn new(path: impl Into<String>, mode: u32, content: impl Into<Vec<u8>>) -> Self {
        FileEntry { path: path.into(), mode, content: content.into() }
    }
}

impl fmt::Debug for FileEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FileEntry({:?}, {:o}, {} bytes)", self.path, self.mode, self.content.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BundleError {
    #[error("path escapes the bundle root: {0:?}")]
    PathTraversal(String),
    #[error("malformed path: {0:?}")]
    InvalidPath(String),
    #[error("duplicate path: {0:?}")]
    DuplicatePath(String),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

/// Verdict of re-hashing a bundle's payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Corrupt { expected: Digest, actual: Digest },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

/// An immutable archive. `digest` is what the bundle claims to be; for a
/// bundle fresh out of [`build_bundle`] it is the hash of `payload`.
#[derive(Clone, PartialEq, Eq)]
pub struct Bundle {
    digest: Digest,
    payload: Vec<u8>,
}

impl fmt::Debug for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bundle({}, {} bytes)", self.digest, self.payload.len())
    }
}

pub fn build_bundle<I>(files: I) -> Result<Bundle, BundleError>
where
    I: IntoIterator<Item = FileEntry>,
{
    let mut entries: Vec<FileEntry> = files.into_iter().collect();
    for e in &entries {
        check_path(&e.path)?;
    }
    entries.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    if let Some(w) = entries.windows(2).find(|w| w[0].path == w[1].path) {
        return Err(BundleError::DuplicatePath(w[0].path.clone()));
    }
    let payload = encode(&entries);
    Ok(Bundle { digest: Digest::of(&payload), payload })
}

pub fn verify_bundle(bundle: &Bundle) -> Verdict {
    bundle.verify()
}

impl Bundle {
    /// Wraps bytes read back from storage under the digest they were stored
    /// as. Nothing is checked; call [`Bundle::verify`].
    pub fn from_stored(digest: Digest, payload: Vec<u8>) -> Self {
        Bundle { digest, payload }
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn size(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn verify(&self) -> Verdict {
        let actual = Digest::of(&self.payload);
        if actual == self.digest {
            Verdict::Ok
        } else {
            Verdict::Corrupt { expected: self.digest.clone(), actual }
        }
    }

    /// Decodes the entry list, in canonical (sorted) order.
    pub fn entries(&self) -> Result<Vec<FileEntry>, BundleError> {
        decode(&self.payload)
    }
}

fn check_path(path: &str) -> Result<(), BundleError> {
    if path.starts_with('/') || path.contains('\\') {
        return Err(BundleError::PathTraversal(path.to_owned()));
    }
    if path.is_empty() || path.contains('\0') {
        return Err(BundleError::InvalidPath(path.to_owned()));
    }
    for comp in path.split('/') {
        match comp {
            ".." => return Err(BundleError::PathTraversal(path.to_owned())),
            "" | "." => return Err(BundleError::InvalidPath(path.to_owned())),
            _ => {}
        }
    }
    Ok(())
}

fn encode(entries: &[FileEntry]) -> Vec<u8> {
    let body: usize = entries.iter().map(|e| 16 + e.path.len() + e.content.len()).sum();
    let mut out = Vec::with_capacity(8 + body);
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for e in entries {
        out.extend_from_slice(&(e.path.len() as u32).to_be_bytes());
        out.extend_from_slice(e.path.as_bytes());
        out.extend_from_slice(&e.mode.to_be_bytes());
        out.extend_from_slice(&(e.content.len() as u64).to_be_bytes());
        out.extend_from_slice(&e.content);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if self.buf.len() < n {
            return Err(BundleError::Malformed("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(payload: &[u8]) -> Result<Vec<FileEntry>, BundleError> {
    let mut r = Reader { buf: payload };
    if r.take(4)? != BUNDLE_MAGIC {
        return Err(BundleError::Malformed("bad magic"));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| BundleError::Malformed("path is not UTF-8"))?
            .to_owned();
        check_path(&path)?;
        let mode = r.u32()?;
        let clen = usize::try_from(r.u64()?).map_err(|_| BundleError::Malformed("length"))?;
        let content = r.take(clen)?.to_vec();
        if let Some(prev) = entries.last() {
            let prev: &FileEntry = prev;
            if prev.path.as_bytes() >= path.as_bytes() {
                return Err(BundleError::Malformed("entries out of order"));
            }
        }
        entries.push(FileEntry { path, mode, content });
    }
    if !r.buf.is_empty() {
        return Err(BundleError::Malformed("trailing bytes"));
    }
    Ok(entries)
}
