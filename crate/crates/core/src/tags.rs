//! Site software tags.
//!
//! Grammar: `VO-<vo>-<payload>` for an installed release and
//! `VO-<vo>-<payload>-request-install` for an install request, where the
//! payload of a release tag is `<project>_<version>`. The VO may not contain
//! `-`; nothing may contain whitespace. Comparison is exact bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz::{Action, Authority, Credential, Resource};
use crate::ids::{ReleaseId, SiteId};

const PREFIX: &str = "VO-";
const REQUEST_SUFFIX: &str = "-request-install";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    Installed,
    Request,
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    raw: String,
    vo: String,
    payload: String,
    kind: TagKind,
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tag({})", self.raw)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("bad identifier for {field}: {value:?}")]
    BadIdentifier { field: &'static str, value: String },
    #[error("not a tag: {0:?}")]
    NotATag(String),
    #[error("{0:?} is not permitted to change tags")]
    Unauthorized(String),
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
}

fn clean(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

fn check_ident(field: &'static str, value: &str) -> Result<(), TagError> {
    if clean(value) {
        Ok(())
    } else {
        Err(TagError::BadIdentifier { field, value: value.to_owned() })
    }
}

fn render(vo: &str, project: &str, version: &str, kind: TagKind) -> Result<Tag, TagError> {
    check_ident("vo", vo)?;
    if vo.contains('-') {
        return Err(TagError::BadIdentifier { field: "vo", value: vo.to_owned() });
    }
    check_ident("project", project)?;
    check_ident("version", version)?;
    let payload = format!("{project}_{version}");
    if payload.ends_with(REQUEST_SUFFIX) {
        return Err(TagError::BadIdentifier { field: "version", value: version.to_owned() });
    }
    let raw = match kind {
        TagKind::Installed => format!("{PREFIX}{vo}-{payload}"),
        TagKind::Request => format!("{PREFIX}{vo}-{payload}{REQUEST_SUFFIX}"),
    };
    Ok(Tag { raw, vo: vo.to_owned(), payload, kind })
}

pub fn render_install_tag(vo: &str, project: &str, version: &str) -> Result<Tag, TagError> {
    render(vo, project, version, TagKind::Installed)
}

pub fn render_request_tag(vo: &str, project: &str, version: &str) -> Result<Tag, TagError> {
    render(vo, project, version, TagKind::Request)
}

pub fn parse_tag(raw: &str) -> Result<Tag, TagError> {
    let not_a_tag = || TagError::NotATag(raw.to_owned());
    if !clean(raw) {
        return Err(not_a_tag());
    }
    let rest = raw.strip_prefix(PREFIX).ok_or_else(not_a_tag)?;
    let (vo, tail) = rest.split_once('-').ok_or_else(not_a_tag)?;
    if vo.is_empty() || tail.is_empty() {
        return Err(not_a_tag());
    }
    let (payload, kind) = match tail.strip_suffix(REQUEST_SUFFIX) {
        Some("") => return Err(not_a_tag()),
        Some(p) => (p, TagKind::Request),
        None if tail == &REQUEST_SUFFIX[1..] => return Err(not_a_tag()),
        None => (tail, TagKind::Installed),
    };
    Ok(Tag { raw: raw.to_owned(), vo: vo.to_owned(), payload: payload.to_owned(), kind })
}

impl Tag {
    pub fn installed(vo: &str, release: &ReleaseId) -> Result<Tag, TagError> {
        render_install_tag(vo, &release.project, &release.version)
    }

    pub fn request(vo: &str, release: &ReleaseId) -> Result<Tag, TagError> {
        render_request_tag(vo, &release.project, &release.version)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn vo(&self) -> &str {
        &self.vo
    }

    pub fn payload(&self) -> &str {
        &self.payload
    }

    pub fn kind(&self) -> TagKind {
        self.kind
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteTagSet {
    pub site: SiteId,
    pub tags: BTreeSet<Tag>,
    pub version: u64,
}

impl SiteTagSet {
    pub fn contains(&self, raw: &str) -> bool {
        self.tags.iter().any(|t| t.raw == raw)
    }

    /// Raw strings, sorted.
    pub fn raws(&self) -> Vec<String> {
        let mut v: Vec<String> = self.tags.iter().map(|t| t.raw.clone()).collect();
        v.sort();
        v
    }
}

/// Tag sets of every site in the fleet.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagStore {
    sites: BTreeMap<SiteId, SiteTagSet>,
}

impl TagStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_site(&mut self, site: SiteId) {
        self.sites.entry(site.clone()).or_insert(SiteTagSet {
            site,
            tags: BTreeSet::new(),
            version: 0,
        });
    }

    pub fn site(&self, site: &SiteId) -> Option<&SiteTagSet> {
        self.sites.get(site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteTagSet> {
        self.sites.values()
    }

    fn check(
        &self,
        authority: &Authority,
        cred: &Credential,
        site: &SiteId,
    ) -> Result<(), TagError> {
        let d = authority.authorize(cred, Action::PublishTag, &Resource::Site(site.clone()));
        if !d.allowed {
            return Err(TagError::Unauthorized(cred.subject().to_owned()));
        }
        if !self.sites.contains_key(site) {
            return Err(TagError::UnknownSite(site.clone()));
        }
        Ok(())
    }

    /// Adds `tag` to `site`. Publishing a tag that is already present leaves
    /// the set and its version untouched.
    pub fn publish_tag(
        &mut self,
        authority: &Authority,
        cred: &Credential,
        site: &SiteId,
        tag: Tag,
    ) -> Result<&SiteTagSet, TagError> {
        self.check(authority, cred, site)?;
        Ok(self.insert_unchecked(site, tag))
    }

    pub fn retract_tag(
        &mut self,
        authority: &Authority,
        cred: &Credential,
        site: &SiteId,
        tag: &Tag,
    ) -> Result<&SiteTagSet, TagError> {
        self.check(authority, cred, site)?;
        Ok(self.remove_unchecked(site, tag))
    }

    /// Applies a publication without an authorization check. Used when
    /// rebuilding from the ledger, where the check already happened.
    pub(crate) fn insert_unchecked(&mut self, site: &SiteId, tag: Tag) -> &SiteTagSet {
        self.add_site(site.clone());
        let set = self.sites.get_mut(site).expect("site just added");
        if set.tags.insert(tag) {
            set.version += 1;
        }
        set
    }

    pub(crate) fn remove_unchecked(&mut self, site: &SiteId, tag: &Tag) -> &SiteTagSet {
        self.add_site(site.clone());
        let set = self.sites.get_mut(site).expect("site just added");
        if set.tags.remove(tag) {
            set.version += 1;
        }
        set
    }

    /// Sites carrying exactly `tag.raw`.
    pub fn query_sites(&self, tag: &Tag) -> Vec<SiteId> {
        self.sites
            .values()
            .filter(|s| s.contains(&tag.raw))
            .map(|s| s.site.clone())
            .collect()
    }

    pub fn has(&self, site: &SiteId, raw: &str) -> bool {
        self.sites.get(site).is_some_and(|s| s.contains(raw))
    }
}
