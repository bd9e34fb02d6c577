//! Talks to the API either over HTTP or by dispatching requests to an
//! in-process router over a local state directory. Both paths go through
//! the same handlers.

use anyhow::{Context, Result};
use axum::body::Body;
use axum::http::{header, Method, Request};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tokio::runtime::Runtime;
use tower::ServiceExt;

use crate::api::router;
use crate::config::GateConfig;
use crate::server::open_state;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn reason(&self) -> &str {
        self.body.get("reason").and_then(Value::as_str).unwrap_or("")
    }

    pub fn message(&self) -> &str {
        self.body.get("message").and_then(Value::as_str).unwrap_or("")
    }
}

pub enum Transport {
    Remote { base: String, http: reqwest::blocking::Client },
    Local { runtime: Runtime, router: Router },
}

impl Transport {
    pub fn remote(base: &str) -> Result<Self> {
        let http = reqwest::blocking::Client::builder().build().context("building HTTP client")?;
        Ok(Transport::Remote { base: base.trim_end_matches('/').to_owned(), http })
    }

    /// Opens the state directory named in `config` in-process.
    pub fn local(config: &GateConfig) -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .context("starting runtime")?;
        let state = open_state(config)?;
        Ok(Transport::Local { runtime, router: router(state) })
    }

    pub fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<&Value>) -> Result<ApiResponse> {
        let payload = body.map(|b| serde_json::to_vec(b).expect("json value serializes"));
        let (status, bytes) = match self {
            Transport::Remote { base, http } => {
                let url = format!("{base}{path}");
                let mut req = http.request(method.clone(), &url);
                if let Some(t) = token {
                    req = req.bearer_auth(t);
                }
                if let Some(p) = payload {
                    req = req.header(header::CONTENT_TYPE, "application/json").body(p);
                }
                let res = req.send().with_context(|| format!("{method} {url}"))?;
                let status = res.status().as_u16();
                (status, res.bytes().context("reading response")?.to_vec())
            }
            Transport::Local { runtime, router } => {
                let mut req = Request::builder().method(method).uri(path);
                if let Some(t) = token {
                    req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
                }
                let req = match payload {
                    Some(p) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(p)),
                    None => req.body(Body::empty()),
                }
                .context("building request")?;
                runtime.block_on(async {
                    let res = router.clone().oneshot(req).await?;
                    let status = res.status().as_u16();
                    let bytes = res.into_body().collect().await?.to_bytes();
                    anyhow::Ok((status, bytes.to_vec()))
                })?
            }
        };
        let body = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes)
                .with_context(|| format!("response is not JSON: {}", String::from_utf8_lossy(&bytes)))?
        };
        Ok(ApiResponse { status, body })
    }
}
