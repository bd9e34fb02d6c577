#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use swdist_core::authz::Claims;
use swdist_core::clock::{Clock, SystemClock};
use swdist_core::{Authority, Role, TrustConfig};
use swdist_gate::api::SEQUENCE_HEADER;
use swdist_gate::release::{cut_to_dir, publish_body, PackageSource};
use swdist_gate::GateConfig;
use tempfile::TempDir;
use tower::ServiceExt;

pub const KEY: [u8; 32] = [0x5a; 32];
pub const ARCH: &str = "slc3_ia32";

pub struct Setup {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl Setup {
    /// A config file inside the state directory, with `n` sites and no
    /// background cycles.
    pub fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("trust.key"), hex::encode(KEY)).unwrap();
        let sites: Vec<Value> = site_ids(n)
            .iter()
            .map(|id| serde_json::json!({ "id": id, "architecture": ARCH }))
            .collect();
        fs::write(root.join("fleet.json"), serde_json::json!({ "seed": 7, "sites": sites }).to_string()).unwrap();
        let config_path = root.join("swdist.toml");
        fs::write(
            &config_path,
            "state_dir = \".\"\n\
             repo_root = \"repo\"\n\
             fleet_file = \"fleet.json\"\n\
             trust_key_file = \"trust.key\"\n\
             listen_addr = \"127.0.0.1:0\"\n\
             cycle_period_s = 0\n\
             mirrors = [\"mirror\"]\n\
             coldstore = \"cold\"\n",
        )
        .unwrap();
        Setup { dir, config_path }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> GateConfig {
        GateConfig::load(&self.config_path).unwrap()
    }

    /// Cuts CMSSW/<version> (core + generators) into `<root>/cut-<version>`.
    pub fn cut(&self, version: &str) -> PathBuf {
        let src = self.root().join(format!("src-{version}"));
        for (pkg, files) in [("core", &["bin/cmsRun", "lib/libFW.so", "etc/env.sh"][..]), ("gen", &["pythia.cfg"][..])] {
            for f in files {
                let p = src.join(pkg).join(f);
                fs::create_dir_all(p.parent().unwrap()).unwrap();
                fs::write(&p, format!("{pkg}:{f}:{version}")).unwrap();
            }
        }
        let pkgs = vec![
            PackageSource { name: "core".into(), dir: src.join("core"), depends: vec![] },
            PackageSource { name: "gen".into(), dir: src.join("gen"), depends: vec!["core".into()] },
        ];
        let out = self.root().join(format!("cut-{version}"));
        cut_to_dir("CMSSW", version, &[ARCH.into()], &pkgs, 1, &out).unwrap();
        out
    }

    pub fn publish_body(&self, version: &str) -> Value {
        publish_body(&self.cut(version)).unwrap()
    }
}

pub fn site_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("site-{i:02}")).collect()
}

pub fn token_with(key: &[u8], subject: &str, role: Role) -> String {
    Authority::new(TrustConfig::new(key.to_vec(), "cms")).mint(&Claims {
        subject: subject.into(),
        vo: "cms".into(),
        role,
        expires_at: SystemClock.now_ms() + 3_600_000,
    })
}

pub fn token(role: Role) -> String {
    let subject = match role {
        Role::Esm => "/CN=esm",
        Role::Dteam => "/CN=dteam",
        Role::User => "/CN=user",
    };
    token_with(&KEY, subject, role)
}

pub struct Reply {
    pub status: StatusCode,
    pub sequence: u64,
    pub raw: String,
    pub body: Value,
}

impl Reply {
    pub fn reason(&self) -> &str {
        self.body["reason"].as_str().unwrap_or("")
    }
}

pub async fn send(app: &Router, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let sequence = res.headers()[SEQUENCE_HEADER].to_str().unwrap().parse().unwrap();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let raw = String::from_utf8(bytes.to_vec()).unwrap();
    let body = serde_json::from_str(&raw).unwrap_or(Value::Null);
    Reply { status, sequence, raw, body }
}

pub async fn get(app: &Router, path: &str) -> Reply {
    send(app, Method::GET, path, None, None).await
}

pub async fn post(app: &Router, path: &str, token: &str, body: Option<Value>) -> Reply {
    send(app, Method::POST, path, Some(token), body).await
}
