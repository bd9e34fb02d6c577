mod common;

use std::process::{Command, Stdio};
use std::io::Write;

use proptest::prelude::*;
use swdist_core::repo::{
    backup_release, fetch, stored_digests, sync_mirror, verify_bundle, PackageDescriptor, RepoError,
    Verdict,
};
use swdist_core::{build_bundle, cut_release, Digest, FileEntry, ReleaseId, Repository};

use common::release_parts;

/// sha256 as computed by coreutils.
fn sha256sum(bytes: &[u8]) -> String {
    let mut child = Command::new("sha256sum")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .expect("sha256sum available");
    child.stdin.take().unwrap().write_all(bytes).unwrap();
    let out = child.wait_with_output().unwrap();
    String::from_utf8(out.stdout).unwrap().split_whitespace().next().unwrap().to_owned()
}

/// Hand-rolled encoder for the documented bundle layout.
fn encode_by_hand(mut files: Vec<(&str, u32, &[u8])>) -> Vec<u8> {
    files.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    let mut out = b"SWB1".to_vec();
    out.extend((files.len() as u32).to_be_bytes());
    for (path, mode, content) in files {
        out.extend((path.len() as u32).to_be_bytes());
        out.extend(path.as_bytes());
        out.extend(mode.to_be_bytes());
        out.extend((content.len() as u64).to_be_bytes());
        out.extend(content);
    }
    out
}

#[test]
fn bundle_payload_matches_documented_layout() {
    let files: Vec<(&str, u32, &[u8])> =
        vec![("lib/b.so", 0o644, b"bbb"), ("bin/a", 0o755, b"#!a"), ("Z", 0o600, b"")];
    let bundle =
        build_bundle(files.iter().map(|(p, m, c)| FileEntry::new(*p, *m, c.to_vec()))).unwrap();
    let expected = encode_by_hand(files);
    assert_eq!(bundle.payload(), &expected[..]);
    assert_eq!(bundle.digest().as_str(), sha256sum(&expected));
}

#[test]
fn manifest_digest_matches_hand_built_canonical_form() {
    let b = build_bundle(vec![FileEntry::new("x", 0o644, "x")]).unwrap();
    let c = build_bundle(vec![FileEntry::new("y", 0o644, "y")]).unwrap();
    let m = cut_release(
        "CMSSW",
        "1_0_0",
        &["slc3_ia32", "amd64"],
        vec![
            PackageDescriptor::for_bundle("zeta", "1", &c).depends_on(["alpha"]),
            PackageDescriptor::for_bundle("alpha", "1", &b),
        ],
        99,
    )
    .unwrap();
    let canonical = format!(
        concat!(
            r#"{{"architectures":["amd64","slc3_ia32"],"packages":["#,
            r#"{{"depends":[],"digest":"{}","name":"alpha","size":{},"version":"1"}},"#,
            r#"{{"depends":["alpha"],"digest":"{}","name":"zeta","size":{},"version":"1"}}],"#,
            r#""project":"CMSSW","version":"1_0_0"}}"#
        ),
        b.digest(),
        b.size(),
        c.digest(),
        c.size()
    );
    assert_eq!(String::from_utf8(m.digested_bytes()).unwrap(), canonical);
    assert_eq!(m.manifest_digest.as_str(), sha256sum(canonical.as_bytes()));
}

#[test]
fn tampered_bundle_is_reported_corrupt() {
    let b = build_bundle(vec![FileEntry::new("a", 0o644, "hello")]).unwrap();
    let mut payload = b.payload().to_vec();
    *payload.last_mut().unwrap() ^= 1;
    let tampered = swdist_core::Bundle::from_stored(b.digest().clone(), payload.clone());
    match verify_bundle(&tampered) {
        Verdict::Corrupt { expected, actual } => {
            assert_eq!(&expected, b.digest());
            assert_eq!(actual.as_str(), sha256sum(&payload));
        }
        Verdict::Ok => panic!("tamper not detected"),
    }
}

#[test]
fn publish_writes_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut repo = Repository::open(dir.path()).unwrap();
    let (m, bundles) = release_parts("CMSSW", "1_0_0");
    let a = repo.publish_release(&m, &bundles, 77).unwrap();
    assert_eq!((a.generation, a.at), (1, 77));
    assert_eq!(a.manifest_digest, m.manifest_digest);
    for b in &bundles {
        let stored = std::fs::read(dir.path().join("bundles").join(b.digest().as_str())).unwrap();
        assert_eq!(sha256sum(&stored), b.digest().as_str());
    }
    let index: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("index")).unwrap()).unwrap();
    assert_eq!(index["generation"], 1);
    assert_eq!(index["hash_algorithm"], "sha256");
    let log = std::fs::read_to_string(dir.path().join("announcements.log")).unwrap();
    assert_eq!(log.lines().count(), 1);

    // reopening reads the same index back
    let again = Repository::open(dir.path()).unwrap();
    assert_eq!(again.index(), repo.index());
}

#[test]
fn publish_errors_leave_repository_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut repo = Repository::open(dir.path()).unwrap();
    let (m, bundles) = release_parts("CMSSW", "1_0_0");

    let wrong = vec![bundles[0].clone()];
    assert!(matches!(repo.publish_release(&m, &wrong, 1), Err(RepoError::DigestMismatch { .. })));
    let mut forged = m.clone();
    forged.version = "9_9_9".into();
    assert!(matches!(repo.publish_release(&forged, &bundles, 1), Err(RepoError::DigestMismatch { .. })));
    assert_eq!(repo.generation(), 0);
    assert!(!dir.path().join("bundles").join(bundles[0].digest().as_str()).exists());

    repo.publish_release(&m, &bundles, 1).unwrap();
    assert!(matches!(repo.publish_release(&m, &bundles, 2), Err(RepoError::AlreadyPublished(_))));
    assert_eq!(repo.generation(), 1);
}

#[test]
fn mirror_sync_and_mirror_ahead() {
    let dir = tempfile::tempdir().unwrap();
    let mut primary = Repository::open(dir.path().join("p")).unwrap();
    let mut mirror = Repository::open(dir.path().join("m")).unwrap();
    let (m1, b1) = release_parts("CMSSW", "1_0_0");
    primary.publish_release(&m1, &b1, 1).unwrap();
    let delta = sync_mirror(&primary, &mut mirror).unwrap();
    assert_eq!(delta.releases_added, vec![ReleaseId::new("CMSSW", "1_0_0")]);
    assert_eq!(delta.bundles_copied.len(), 2);
    assert!(sync_mirror(&primary, &mut mirror).unwrap().is_empty());
    assert_eq!(mirror.announcements(), primary.announcements());

    // a mirror that got ahead of the primary is refused
    let (m2, b2) = release_parts("CMSSW", "2_0_0");
    mirror.publish_release(&m2, &b2, 2).unwrap();
    assert!(matches!(
        sync_mirror(&primary, &mut mirror),
        Err(RepoError::MirrorAhead { mirror: 2, primary: 1 })
    ));
}

#[test]
fn fetch_of_missing_release_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::open(dir.path()).unwrap();
    assert!(matches!(fetch(&ReleaseId::new("X", "1"), &[&repo]), Err(RepoError::NotFound(_))));
}

#[test]
fn fetch_fails_when_every_copy_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut repo = Repository::open(dir.path()).unwrap();
    let (m, b) = release_parts("CMSSW", "1_0_0");
    repo.publish_release(&m, &b, 1).unwrap();
    std::fs::write(repo.bundle_path(b[1].digest()), b"x").unwrap();
    assert!(matches!(fetch(&m.id(), &[&repo]), Err(RepoError::DigestMismatch { .. })));
    std::fs::remove_file(repo.bundle_path(b[1].digest())).unwrap();
    assert!(matches!(fetch(&m.id(), &[&repo]), Err(RepoError::DigestMismatch { .. })));
}

#[test]
fn coldstore_backup_is_write_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut repo = Repository::open(dir.path().join("repo")).unwrap();
    let (m, b) = release_parts("CMSSW", "1_0_0");
    repo.publish_release(&m, &b, 1).unwrap();
    let cold = dir.path().join("cold");
    let rec = backup_release(&repo, &m.id(), &cold).unwrap();
    let mut want: Vec<Digest> = b.iter().map(|x| x.digest().clone()).collect();
    want.sort();
    assert_eq!(stored_digests(&cold, &m.id()).unwrap(), want);
    // idempotent when bytes match
    assert_eq!(backup_release(&repo, &m.id(), &cold).unwrap(), rec);

    // refuses to overwrite differing bytes
    let victim = cold.join("CMSSW/1_0_0").join(b[0].digest().as_str());
    std::fs::write(&victim, b"other").unwrap();
    assert!(matches!(backup_release(&repo, &m.id(), &cold), Err(RepoError::StorageFailure { .. })));
    assert_eq!(std::fs::read(&victim).unwrap(), b"other");
}

#[test]
fn unwritable_coldstore_is_a_storage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut repo = Repository::open(dir.path().join("repo")).unwrap();
    let (m, b) = release_parts("CMSSW", "1_0_0");
    repo.publish_release(&m, &b, 1).unwrap();
    // a regular file where the cold store directory should be
    let cold = dir.path().join("cold");
    std::fs::write(&cold, b"not a directory").unwrap();
    assert!(matches!(backup_release(&repo, &m.id(), &cold), Err(RepoError::StorageFailure { .. })));
}

fn file_set() -> impl Strategy<Value = Vec<FileEntry>> {
    prop::collection::btree_map("[a-z]{1,3}(/[a-z0-9_][a-z0-9_.]{0,3}){0,2}", (any::<bool>(), prop::collection::vec(any::<u8>(), 0..64)), 0..10)
        .prop_map(|m| {
            m.into_iter()
                .map(|(p, (exec, c))| FileEntry::new(p, if exec { 0o755 } else { 0o644 }, c))
                .collect()
        })
}

proptest! {
    #[test]
    fn bundle_ignores_input_order(files in file_set(), seed in any::<u64>()) {
        let mut shuffled = files.clone();
        // deterministic Fisher-Yates driven by the seed
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = build_bundle(files.clone()).unwrap();
        let b = build_bundle(shuffled).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        prop_assert_eq!(a.payload(), b.payload());
        let mut sorted = files;
        sorted.sort_by(|x, y| x.path.as_bytes().cmp(y.path.as_bytes()));
        prop_assert_eq!(a.entries().unwrap(), sorted);
    }

    #[test]
    fn bundle_digest_is_sha256_of_payload(files in file_set()) {
        let b = build_bundle(files).unwrap();
        prop_assert_eq!(b.digest(), &Digest::of(b.payload()));
        prop_assert!(verify_bundle(&b).is_ok());
    }
}
