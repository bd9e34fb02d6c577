//! Credentials, the role/action table and queue assignment.
//!
//! Tokens stand in for grid certificates: a set of claims (subject, VO, role,
//! expiry) signed with HMAC-SHA256 under a shared trust key. Wire format is
//! standard base64 of
//!
//! ```text
//! u32 claims_len (big-endian) | canonical JSON claims | 32-byte MAC over the claims
//! ```

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::canonical::to_canonical_vec;
use crate::ids::SiteId;

const MAC_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Experiment software manager.
    Esm,
    /// Grid integration team running site functional tests.
    Dteam,
    User,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Esm, Role::Dteam, Role::User];
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "esm" => Ok(Role::Esm),
            "dteam" => Ok(Role::Dteam),
            "user" => Ok(Role::User),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SubmitInstall,
    WriteSwArea,
    ProbeRead,
    ManageTickets,
    PublishTag,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::SubmitInstall,
        Action::WriteSwArea,
        Action::ProbeRead,
        Action::ManageTickets,
        Action::PublishTag,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Queue {
    Normal,
    Privileged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resource {
    Site(SiteId),
    Repository(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub allowed: bool,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue: Option<Queue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("malformed token: {0}")]
    MalformedToken(&'static str),
    #[error("token signature does not verify")]
    BadSignature,
    #[error("unknown virtual organization {0:?}")]
    UnknownVO(String),
    #[error("token expired at {expires_at}")]
    Expired { expires_at: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub subject: String,
    pub vo: String,
    pub role: Role,
    pub expires_at: u64,
}

/// An authenticated identity. Only [`Authority::authenticate`] (and the
/// orchestrator's own service identity) can produce one.
#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct Credential {
    subject: String,
    vo: String,
    role: Role,
}

impl Credential {
    pub(crate) fn service(vo: &str) -> Self {
        Credential { subject: "/CN=swdist-service".into(), vo: vo.into(), role: Role::Esm }
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn vo(&self) -> &str {
        &self.vo
    }

    pub fn role(&self) -> Role {
        self.role
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Credential({} {}/{:?})", self.subject, self.vo, self.role)
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct TrustConfig {
    #[serde(with = "hex_bytes")]
    pub key: Vec<u8>,
    pub vos: Vec<String>,
    /// Lets dteam write the software area. Off unless explicitly configured.
    #[serde(default)]
    pub allow_dteam_write: bool,
    #[serde(default = "default_skew")]
    pub clock_skew_ms: u64,
}

fn default_skew() -> u64 {
    60_000
}

impl TrustConfig {
    pub fn new(key: impl Into<Vec<u8>>, vo: &str) -> Self {
        TrustConfig {
            key: key.into(),
            vos: vec![vo.to_owned()],
            allow_dteam_write: false,
            clock_skew_ms: default_skew(),
        }
    }
}

impl fmt::Debug for TrustConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustConfig")
            .field("key", &"<redacted>")
            .field("vos", &self.vos)
            .field("allow_dteam_write", &self.allow_dteam_write)
            .field("clock_skew_ms", &self.clock_skew_ms)
            .finish()
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Verifies tokens and answers authorization questions. Immutable after
/// construction, so it can be shared freely.
#[derive(Debug, Clone)]
pub struct Authority {
    trust: TrustConfig,
}

impl Authority {
    pub fn new(trust: TrustConfig) -> Self {
        Authority { trust }
    }

    pub fn trust(&self) -> &TrustConfig {
        &self.trust
    }

    fn mac(&self) -> Hmac<Sha256> {
        <Hmac<Sha256> as KeyInit>::new_from_slice(&self.trust.key)
            .expect("HMAC accepts keys of any length")
    }

    /// Issues a signed token. Tooling and tests use this; the service itself
    /// only verifies.
    pub fn mint(&self, claims: &Claims) -> String {
        let body = to_canonical_vec(claims).expect("claims serialize");
        let mut mac = self.mac();
        mac.update(&body);
        let tag = mac.finalize().into_bytes();
        let mut raw = Vec::with_capacity(4 + body.len() + MAC_LEN);
        raw.extend_from_slice(&(body.len() as u32).to_be_bytes());
        raw.extend_from_slice(&body);
        raw.extend_from_slice(&tag);
        STANDARD.encode(raw)
    }

    pub fn authenticate(&self, token: &[u8], now_ms: u64) -> Result<Credential, AuthError> {
        let token = trim_ascii(token);
        if token.is_empty() {
            return Err(AuthError::MalformedToken("empty"));
        }
        let raw = STANDARD.decode(token).map_err(|_| AuthError::MalformedToken("not base64"))?;
        if raw.len() < 4 + MAC_LEN {
            return Err(AuthError::MalformedToken("too short"));
        }
        let len = u32::from_be_bytes(raw[..4].try_into().unwrap()) as usize;
        if raw.len() != 4 + len + MAC_LEN {
            return Err(AuthError::MalformedToken("length prefix mismatch"));
        }
        let (body, tag) = raw[4..].split_at(len);
        let mut mac = self.mac();
        mac.update(body);
        mac.verify_slice(tag).map_err(|_| AuthError::BadSignature)?;

        let claims: Claims =
            serde_json::from_slice(body).map_err(|_| AuthError::MalformedToken("claims"))?;
        if !self.trust.vos.iter().any(|v| v == &claims.vo) {
            return Err(AuthError::UnknownVO(claims.vo));
        }
        if now_ms > claims.expires_at.saturating_add(self.trust.clock_skew_ms) {
            return Err(AuthError::Expired { expires_at: claims.expires_at });
        }
        Ok(Credential { subject: claims.subject, vo: claims.vo, role: claims.role })
    }

    /// Whether the role table allows `role` to perform `action`.
    pub fn permits(&self, role: Role, action: Action) -> bool {
        match role {
            Role::Esm => true,
            Role::Dteam => {
                action == Action::ProbeRead
                    || (action == Action::WriteSwArea && self.trust.allow_dteam_write)
            }
            Role::User => false,
        }
    }

    pub fn authorize(&self, cred: &Credential, action: Action, _resource: &Resource) -> Decision {
        if self.permits(cred.role, action) {
            Decision {
                allowed: true,
                reason: "role_permits".into(),
                queue: Some(self.queue_for(cred)),
            }
        } else {
            Decision { allowed: false, reason: "default_deny".into(), queue: None }
        }
    }

    pub fn queue_for(&self, cred: &Credential) -> Queue {
        match cred.role {
            Role::Esm | Role::Dteam => Queue::Privileged,
            Role::User => Queue::Normal,
        }
    }
}

fn trim_ascii(b: &[u8]) -> &[u8] {
    let start = b.iter().position(|c| !c.is_ascii_whitespace()).unwrap_or(b.len());
    let end = b.iter().rposition(|c| !c.is_ascii_whitespace()).map_or(start, |i| i + 1);
    &b[start..end]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn authority() -> Authority {
        Authority::new(TrustConfig::new(b"test-key".to_vec(), "cms"))
    }

    fn claims(role: Role) -> Claims {
        Claims { subject: "/CN=alice".into(), vo: "cms".into(), role, expires_at: 10_000 }
    }

    #[test]
    fn roundtrip_esm() {
        let a = authority();
        let cred = a.authenticate(a.mint(&claims(Role::Esm)).as_bytes(), 0).unwrap();
        assert_eq!(cred.role(), Role::Esm);
        assert_eq!(cred.subject(), "/CN=alice");
    }

    #[test]
    fn empty_token() {
        assert_eq!(
            authority().authenticate(b"", 0),
            Err(AuthError::MalformedToken("empty"))
        );
    }

    #[test]
    fn wrong_key() {
        let other = Authority::new(TrustConfig::new(b"other".to_vec(), "cms"));
        let t = other.mint(&claims(Role::Esm));
        assert_eq!(authority().authenticate(t.as_bytes(), 0), Err(AuthError::BadSignature));
    }

    #[test]
    fn unknown_vo() {
        let a = authority();
        let mut c = claims(Role::Esm);
        c.vo = "atlas".into();
        assert_eq!(
            a.authenticate(a.mint(&c).as_bytes(), 0),
            Err(AuthError::UnknownVO("atlas".into()))
        );
    }

    #[test]
    fn expiry_has_skew_allowance() {
        let a = authority();
        let t = a.mint(&claims(Role::User));
        assert!(a.authenticate(t.as_bytes(), 10_000 + 60_000).is_ok());
        assert_eq!(
            a.authenticate(t.as_bytes(), 10_000 + 60_001),
            Err(AuthError::Expired { expires_at: 10_000 })
        );
    }

    #[test]
    fn queues() {
        let a = authority();
        for (role, q) in [
            (Role::Esm, Queue::Privileged),
            (Role::Dteam, Queue::Privileged),
            (Role::User, Queue::Normal),
        ] {
            let cred = a.authenticate(a.mint(&claims(role)).as_bytes(), 0).unwrap();
            assert_eq!(a.queue_for(&cred), q);
        }
    }

    #[test]
    fn dteam_write_flag() {
        let mut trust = TrustConfig::new(b"k".to_vec(), "cms");
        assert!(!Authority::new(trust.clone()).permits(Role::Dteam, Action::WriteSwArea));
        trust.allow_dteam_write = true;
        let a = Authority::new(trust);
        assert!(a.permits(Role::Dteam, Action::WriteSwArea));
        assert!(!a.permits(Role::Dteam, Action::SubmitInstall));
    }

    #[test]
    fn decision_queue_iff_allowed() {
        let a = authority();
        for role in Role::ALL {
            let cred = Credential { subject: "s".into(), vo: "cms".into(), role };
            for action in Action::ALL {
                let d = a.authorize(&cred, action, &Resource::Site(SiteId::new("A")));
                assert_eq!(d.allowed, d.queue.is_some());
            }
        }
    }
}
