use proptest::prelude::*;
use swdist_core::authz::Claims;
use swdist_core::tags::{parse_tag, render_install_tag, render_request_tag, TagError};
use swdist_core::{Authority, ReleaseId, Role, SiteId, Tag, TagKind, TagStore, TrustConfig};

fn authority() -> Authority {
    Authority::new(TrustConfig::new(b"k".to_vec(), "cms"))
}

fn cred(a: &Authority, role: Role) -> swdist_core::Credential {
    let c = Claims { subject: "/CN=t".into(), vo: "cms".into(), role, expires_at: u64::MAX / 2 };
    a.authenticate(a.mint(&c).as_bytes(), 0).unwrap()
}

#[test]
fn not_a_tag() {
    for raw in ["", "cms-CMSSW_1", "VO-", "VO-cms", "VO-cms-", "VO-cms-request-install", "VO-cms--request-install", "VO-cms-a b"] {
        assert!(matches!(parse_tag(raw), Err(TagError::NotATag(_))), "{raw:?}");
    }
}

#[test]
fn store_queries_and_versions() {
    let a = authority();
    let esm = cred(&a, Role::Esm);
    let mut store = TagStore::new();
    for s in ["A", "B", "C"] {
        store.add_site(SiteId::new(s));
    }
    let rel = ReleaseId::new("CMSSW", "1_0_0");
    let t = Tag::installed("cms", &rel).unwrap();
    store.publish_tag(&a, &esm, &SiteId::new("A"), t.clone()).unwrap();
    store.publish_tag(&a, &esm, &SiteId::new("C"), t.clone()).unwrap();
    let v = store.site(&SiteId::new("A")).unwrap().version;
    // republishing does not bump the version
    store.publish_tag(&a, &esm, &SiteId::new("A"), t.clone()).unwrap();
    assert_eq!(store.site(&SiteId::new("A")).unwrap().version, v);
    assert_eq!(store.query_sites(&t), vec![SiteId::new("A"), SiteId::new("C")]);

    store.retract_tag(&a, &esm, &SiteId::new("A"), &t).unwrap();
    assert_eq!(store.query_sites(&t), vec![SiteId::new("C")]);
    assert!(matches!(
        store.publish_tag(&a, &esm, &SiteId::new("Z"), t.clone()),
        Err(TagError::UnknownSite(_))
    ));
}

#[test]
fn only_esm_changes_tags() {
    let a = authority();
    let mut store = TagStore::new();
    store.add_site(SiteId::new("A"));
    let t = Tag::request("cms", &ReleaseId::new("P", "1")).unwrap();
    for role in [Role::Dteam, Role::User] {
        let c = cred(&a, role);
        assert!(matches!(store.publish_tag(&a, &c, &SiteId::new("A"), t.clone()), Err(TagError::Unauthorized(_))));
        assert!(matches!(store.retract_tag(&a, &c, &SiteId::new("A"), &t), Err(TagError::Unauthorized(_))));
    }
    assert!(store.site(&SiteId::new("A")).unwrap().tags.is_empty());
}

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_.]{1,12}"
}

proptest! {
    #[test]
    fn install_tags_round_trip(vo in "[a-z]{1,6}", project in ident(), version in ident()) {
        let t = render_install_tag(&vo, &project, &version).unwrap();
        let p = parse_tag(t.raw()).unwrap();
        prop_assert_eq!(p.kind(), TagKind::Installed);
        prop_assert_eq!(p.vo(), vo.as_str());
        prop_assert_eq!(p.payload(), format!("{project}_{version}"));
        prop_assert_eq!(p, t);
    }

    #[test]
    fn request_tags_round_trip(vo in "[a-z]{1,6}", project in ident(), version in ident()) {
        let t = render_request_tag(&vo, &project, &version).unwrap();
        prop_assert_eq!(t.raw(), format!("VO-{vo}-{project}_{version}-request-install"));
        let p = parse_tag(t.raw()).unwrap();
        prop_assert_eq!(p.kind(), TagKind::Request);
        prop_assert_eq!(p, t);
    }

    #[test]
    fn parse_never_panics(raw in ".{0,40}") {
        if let Ok(t) = parse_tag(&raw) {
            prop_assert_eq!(t.raw(), raw.as_str());
        }
    }
}
