use base64::Engine;
use proptest::prelude::*;
use sha2::{Digest as _, Sha256};
use swdist_core::authz::{AuthError, Claims, Resource};
use swdist_core::{to_canonical_vec, Action, Authority, Role, SiteId, TrustConfig};

const KEY: &[u8] = b"shared-secret";

/// HMAC-SHA256 written out from its definition, used as an oracle.
fn hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

fn authority() -> Authority {
    Authority::new(TrustConfig::new(KEY.to_vec(), "cms"))
}

fn claims(role: Role) -> Claims {
    Claims { subject: "/CN=alice".into(), vo: "cms".into(), role, expires_at: 100_000 }
}

/// Token = base64(u32 BE body length || canonical claims || HMAC).
fn forge(key: &[u8], claims_json: &[u8]) -> String {
    let mut raw = (claims_json.len() as u32).to_be_bytes().to_vec();
    raw.extend(claims_json);
    raw.extend(hmac_sha256(key, claims_json));
    base64::engine::general_purpose::STANDARD.encode(raw)
}

#[test]
fn oracle_matches_rfc4231_case_2() {
    let mac = hmac_sha256(b"Jefe", b"what do ya want for nothing?");
    assert_eq!(hex::encode(mac), "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843");
}

#[test]
fn minted_token_matches_oracle_encoding() {
    let c = claims(Role::Dteam);
    let body = to_canonical_vec(&c).unwrap();
    assert_eq!(
        String::from_utf8(body.clone()).unwrap(),
        r#"{"expires_at":100000,"role":"dteam","subject":"/CN=alice","vo":"cms"}"#
    );
    assert_eq!(authority().mint(&c), forge(KEY, &body));
}

#[test]
fn oracle_built_token_authenticates() {
    let body = br#"{"expires_at":100000,"role":"esm","subject":"/CN=bob","vo":"cms"}"#;
    let cred = authority().authenticate(forge(KEY, body).as_bytes(), 0).unwrap();
    assert_eq!((cred.subject(), cred.vo(), cred.role()), ("/CN=bob", "cms", Role::Esm));
}

#[test]
fn wrong_key_is_bad_signature() {
    let body = to_canonical_vec(&claims(Role::Esm)).unwrap();
    let t = forge(b"other key", &body);
    assert_eq!(authority().authenticate(t.as_bytes(), 0).unwrap_err(), AuthError::BadSignature);
}

#[test]
fn unknown_vo() {
    let mut c = claims(Role::Esm);
    c.vo = "atlas".into();
    let t = authority().mint(&c);
    assert_eq!(authority().authenticate(t.as_bytes(), 0).unwrap_err(), AuthError::UnknownVO("atlas".into()));
}

#[test]
fn malformed_tokens() {
    let a = authority();
    for t in [&b""[..], b"   ", b"!!!not base64", b"AAAA"] {
        assert!(matches!(a.authenticate(t, 0), Err(AuthError::MalformedToken(_))), "{t:?}");
    }
    // valid signature over something that is not a claims object
    let t = forge(KEY, b"[1,2,3]");
    assert!(matches!(a.authenticate(t.as_bytes(), 0), Err(AuthError::MalformedToken(_))));
}

#[test]
fn expiry_allows_sixty_seconds_of_skew() {
    let a = authority();
    let t = a.mint(&claims(Role::User));
    assert!(a.authenticate(t.as_bytes(), 100_000 + 60_000).is_ok());
    assert_eq!(
        a.authenticate(t.as_bytes(), 100_000 + 60_001).unwrap_err(),
        AuthError::Expired { expires_at: 100_000 }
    );
}

#[test]
fn dteam_write_only_with_flag() {
    let mut trust = TrustConfig::new(KEY.to_vec(), "cms");
    assert!(!Authority::new(trust.clone()).permits(Role::Dteam, Action::WriteSwArea));
    trust.allow_dteam_write = true;
    let a = Authority::new(trust);
    assert!(a.permits(Role::Dteam, Action::WriteSwArea));
    assert!(!a.permits(Role::Dteam, Action::SubmitInstall));
}

#[test]
fn decisions_carry_reason_and_queue() {
    let a = authority();
    let site = Resource::Site(SiteId::new("A"));
    let esm = a.authenticate(a.mint(&claims(Role::Esm)).as_bytes(), 0).unwrap();
    let user = a.authenticate(a.mint(&claims(Role::User)).as_bytes(), 0).unwrap();
    let d = a.authorize(&esm, Action::ProbeRead, &site);
    assert!(d.allowed && d.reason == "role_permits" && d.queue.is_some());
    let d = a.authorize(&user, Action::ProbeRead, &site);
    assert!(!d.allowed && d.reason == "default_deny" && d.queue.is_none());
}

fn rank(r: Role) -> u8 {
    match r {
        Role::User => 0,
        Role::Dteam => 1,
        Role::Esm => 2,
    }
}

fn role() -> impl Strategy<Value = Role> {
    prop_oneof![Just(Role::Esm), Just(Role::Dteam), Just(Role::User)]
}

fn action() -> impl Strategy<Value = Action> {
    prop::sample::select(Action::ALL.to_vec())
}

proptest! {
    #[test]
    fn higher_roles_never_lose_permissions(a in role(), b in role(), act in action(), flag in any::<bool>()) {
        let mut trust = TrustConfig::new(KEY.to_vec(), "cms");
        trust.allow_dteam_write = flag;
        let auth = Authority::new(trust);
        if rank(a) <= rank(b) && auth.permits(a, act) {
            prop_assert!(auth.permits(b, act));
        }
    }

    #[test]
    fn mutated_tokens_never_authenticate(r in role(), pos in any::<prop::sample::Index>(), delta in 1u8..=255) {
        let a = authority();
        let mut t = a.mint(&claims(r)).into_bytes();
        let i = pos.index(t.len());
        t[i] = t[i].wrapping_add(delta);
        prop_assert!(a.authenticate(&t, 0).is_err());
    }

    #[test]
    fn arbitrary_bytes_never_authenticate(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        prop_assert!(authority().authenticate(&bytes, 0).is_err());
    }
}
