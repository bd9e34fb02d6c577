//! HTTP surface over one [`Orchestrator`].
//!
//! Reads are open; every mutating endpoint needs a bearer token. Bodies are
//! canonical JSON (sorted keys, no whitespace) and every response carries
//! the ledger sequence it reflects, in the body as `sequence` and in the
//! `x-ledger-sequence` header.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use swdist_core::authz::Resource;
use swdist_core::clock::{Clock, SystemClock, VirtualClock};
use swdist_core::deploy::DriveReport;
use swdist_core::ids::{ReleaseId, SiteId};
use swdist_core::watch::CycleReport;
use swdist_core::{
    to_canonical_string, Action, Authority, Bundle, Credential, Digest, JobAction, Orchestrator,
    ReleaseManifest, Tag,
};

use crate::error::ApiError;

pub const SEQUENCE_HEADER: &str = "x-ledger-sequence";
const DEFAULT_HISTORY: usize = 50;

struct Shared {
    orch: RwLock<Orchestrator>,
    authority: Authority,
    clock: Arc<VirtualClock>,
    cycle_busy: AtomicBool,
    coldstore: Option<PathBuf>,
}

/// Handle shared by every request. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    /// `clock` must be the clock the orchestrator was built with.
    pub fn new(orch: Orchestrator, clock: Arc<VirtualClock>, coldstore: Option<PathBuf>) -> Self {
        let authority = orch.authority().clone();
        AppState {
            shared: Arc::new(Shared {
                orch: RwLock::new(orch),
                authority,
                clock,
                cycle_busy: AtomicBool::new(false),
                coldstore,
            }),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Orchestrator> {
        self.shared.orch.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Orchestrator> {
        self.shared.orch.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn clock(&self) -> &Arc<VirtualClock> {
        &self.shared.clock
    }

    /// Claims the monitoring-cycle slot. `None` while another cycle runs.
    pub fn begin_cycle(&self) -> Option<CycleGuard> {
        let busy = &self.shared.cycle_busy;
        (!busy.swap(true, Ordering::AcqRel)).then(|| CycleGuard { state: self.clone() })
    }

    /// Runs one monitoring cycle unless one is already in progress.
    pub fn run_cycle(&self) -> Result<(CycleReport, u64), ApiError> {
        let _guard = self.begin_cycle().ok_or_else(|| {
            ApiError::new(StatusCode::CONFLICT, "CycleInProgress", "a monitoring cycle is already running")
        })?;
        self.catch_up();
        let mut orch = self.write();
        let report = orch.run_cycle()?;
        Ok((report, orch.ledger().sequence()))
    }

    /// Pulls the virtual clock up to wall time.
    fn catch_up(&self) {
        self.shared.clock.advance_to(SystemClock.now_ms());
    }

    fn authenticate(&self, token: &str) -> Result<Credential, ApiError> {
        self.catch_up();
        Ok(self.shared.authority.authenticate(token.as_bytes(), self.shared.clock.now_ms())?)
    }

    fn require(&self, cred: &Credential, action: Action, resource: Resource) -> Result<(), ApiError> {
        if self.shared.authority.authorize(cred, action, &resource).allowed {
            Ok(())
        } else {
            Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "Forbidden",
                format!("{} may not {action:?}", cred.subject()),
            ))
        }
    }
}

/// Releases the cycle slot on drop.
pub struct CycleGuard {
    state: AppState,
}

impl Drop for CycleGuard {
    fn drop(&mut self) {
        self.state.shared.cycle_busy.store(false, Ordering::Release);
    }
}

/// The authenticated caller of a mutating endpoint.
pub struct Caller(pub Credential);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let value = parts.headers.get(header::AUTHORIZATION).ok_or_else(ApiError::missing_token)?;
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(ApiError::missing_token)?;
        state.authenticate(token).map(Caller)
    }
}

/// A canonical JSON response.
pub struct Reply {
    status: StatusCode,
    sequence: u64,
    body: String,
}

impl Reply {
    /// `fields` plus `sequence`.
    fn new(status: StatusCode, sequence: u64, mut fields: Value) -> Self {
        if let Value::Object(map) = &mut fields {
            map.insert("sequence".into(), sequence.into());
        }
        Self::raw(status, sequence, &fields)
    }

    fn ok(sequence: u64, fields: Value) -> Self {
        Self::new(StatusCode::OK, sequence, fields)
    }

    fn raw(status: StatusCode, sequence: u64, body: &impl serde::Serialize) -> Self {
        Reply { status, sequence, body: to_canonical_string(body).expect("response serializes") }
    }
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let mut res = (self.status, self.body).into_response();
        let h = res.headers_mut();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
        h.insert(SEQUENCE_HEADER, HeaderValue::from(self.sequence));
        res
    }
}

type ApiResult = Result<Reply, ApiError>;

/// Runs blocking orchestrator work off the async executor.
async fn blocking<F>(f: F) -> ApiResult
where
    F: FnOnce() -> ApiResult + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

fn parse_release(s: &str) -> Result<ReleaseId, ApiError> {
    s.parse().map_err(ApiError::bad_request)
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/status", get(status))
        .route("/jobs", get(list_jobs).post(submit_job))
        .route("/jobs/drive", post(drive_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/sites", get(list_sites))
        .route("/sites/{id}/history", get(site_history))
        .route("/sites/{id}/tags", get(site_tags))
        .route("/sites/{id}/tags/request", post(request_tag).delete(retract_request))
        .route("/sites/{id}/probe", post(probe_site))
        .route("/tickets", get(list_tickets))
        .route("/tickets/{id}/close", post(close_ticket))
        .route("/releases", get(list_releases).post(publish_release))
        .route("/releases/{project}/{version}/backup", post(backup_release))
        .route("/mirrors/sync", post(sync_mirrors))
        .route("/watch/cycle", post(watch_cycle));
    #[cfg(feature = "demo")]
    let api = api.route("/admin/faults", post(admin_faults));
    api.fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(middleware::from_fn_with_state(state.clone(), stamp_sequence))
        .with_state(state)
}

/// Error responses carry the sequence current when they were produced.
async fn stamp_sequence(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    if !res.headers().contains_key(SEQUENCE_HEADER) {
        let seq = state.read().ledger().sequence();
        res.headers_mut().insert(SEQUENCE_HEADER, HeaderValue::from(seq));
    }
    res
}

async fn status(State(state): State<AppState>) -> Reply {
    let doc = state.read().render_status();
    Reply::raw(StatusCode::OK, doc.sequence, &doc)
}

#[derive(Deserialize)]
struct SubmitJob {
    site: SiteId,
    release: String,
    #[serde(default)]
    action: Option<JobAction>,
}

async fn submit_job(State(state): State<AppState>, Caller(cred): Caller, body: Bytes) -> ApiResult {
    let req: SubmitJob = parse_body(&body)?;
    let release = parse_release(&req.release)?;
    blocking(move || {
        let mut orch = state.write();
        let job = match req.action.unwrap_or(JobAction::Install) {
            JobAction::Install => orch.submit_install(&cred, &req.site, &release)?,
            JobAction::Remove => orch.submit_remove(&cred, &req.site, &release)?,
        };
        Ok(Reply::new(StatusCode::CREATED, orch.ledger().sequence(), json!({ "job": job })))
    })
    .await
}

async fn list_jobs(State(state): State<AppState>, Query(q): Query<BTreeMap<String, String>>) -> Reply {
    let orch = state.read();
    let site = q.get("site");
    let jobs: Vec<_> = orch.ledger().jobs().filter(|j| site.is_none_or(|s| j.site.as_str() == s)).collect();
    Reply::ok(orch.ledger().sequence(), json!({ "jobs": jobs }))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let orch = state.read();
    let job = orch.ledger().job(&id).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "UnknownJob", format!("unknown job {id}"))
    })?;
    Ok(Reply::ok(orch.ledger().sequence(), json!({ "job": job })))
}

fn drive_summary(report: &DriveReport) -> Value {
    let stuck: Vec<Value> = report
        .stuck
        .iter()
        .map(|(job_id, e)| json!({ "job_id": job_id, "error": e.to_string() }))
        .collect();
    json!({ "steps": report.steps, "settled": report.settled, "stuck": stuck })
}

async fn drive_jobs(State(state): State<AppState>, Caller(cred): Caller) -> ApiResult {
    state.require(&cred, Action::SubmitInstall, Resource::Repository("jobs".into()))?;
    blocking(move || {
        let mut orch = state.write();
        let report = orch.drive_jobs()?;
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "drive": drive_summary(&report) })))
    })
    .await
}

async fn list_sites(State(state): State<AppState>) -> Reply {
    let doc = state.read().render_status();
    let sites: Vec<Value> = doc
        .sites
        .iter()
        .map(|s| {
            json!({
                "site": s.site,
                "architecture": s.architecture,
                "offline": s.offline,
                "degraded": s.degraded,
                "probed": s.latest_probe.is_some(),
                "installations": s.installations.len(),
                "open_tickets": s.open_tickets.len(),
            })
        })
        .collect();
    Reply::ok(doc.sequence, json!({ "sites": sites }))
}

async fn site_history(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    let last = match q.get("last") {
        Some(n) => n.parse().map_err(|_| ApiError::bad_request(format!("last: {n:?} is not a count")))?,
        None => DEFAULT_HISTORY,
    };
    let site = SiteId::new(id);
    let orch = state.read();
    let history = orch.history(&site, last)?;
    Ok(Reply::ok(orch.ledger().sequence(), json!({ "site": site, "history": history })))
}

async fn site_tags(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let site = SiteId::new(id);
    let orch = state.read();
    let tags = orch
        .tags()
        .site(&site)
        .map(|s| s.raws())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownSite", format!("unknown site {site}")))?;
    Ok(Reply::ok(orch.ledger().sequence(), json!({ "site": site, "tags": tags })))
}

#[derive(Deserialize)]
struct ReleaseBody {
    release: String,
}

async fn request_tag(
    State(state): State<AppState>,
    Caller(cred): Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let req: ReleaseBody = parse_body(&body)?;
    let release = parse_release(&req.release)?;
    blocking(move || {
        let mut orch = state.write();
        let tag = orch.request_install(&cred, &SiteId::new(id.clone()), &release)?;
        Ok(Reply::new(StatusCode::CREATED, orch.ledger().sequence(), json!({ "site": id, "tag": tag.raw() })))
    })
    .await
}

async fn retract_request(
    State(state): State<AppState>,
    Caller(cred): Caller,
    Path(id): Path<String>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    let release = parse_release(q.get("release").ok_or_else(|| ApiError::bad_request("missing release"))?)?;
    blocking(move || {
        let mut orch = state.write();
        let tag = Tag::request(&orch.config().vo, &release)?;
        orch.retract_tag(&cred, &SiteId::new(id.clone()), &tag)?;
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "site": id, "retracted": tag.raw() })))
    })
    .await
}

async fn probe_site(State(state): State<AppState>, Caller(cred): Caller, Path(id): Path<String>) -> ApiResult {
    let site = SiteId::new(id);
    state.require(&cred, Action::ProbeRead, Resource::Site(site.clone()))?;
    blocking(move || {
        let mut orch = state.write();
        let entry = orch.probe_site(&site)?;
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "entry": entry })))
    })
    .await
}

async fn list_tickets(State(state): State<AppState>, Query(q): Query<BTreeMap<String, String>>) -> ApiResult {
    let open_only = match q.get("state").map(String::as_str) {
        None | Some("all") => false,
        Some("open") => true,
        Some(other) => return Err(ApiError::bad_request(format!("state: expected open or all, got {other:?}"))),
    };
    let orch = state.read();
    let tickets: Vec<_> = orch.ledger().tickets().filter(|t| !open_only || !t.is_closed()).collect();
    Ok(Reply::ok(orch.ledger().sequence(), json!({ "tickets": tickets })))
}

#[derive(Deserialize, Default)]
struct CloseBody {
    #[serde(default)]
    note: Option<String>,
}

async fn close_ticket(
    State(state): State<AppState>,
    Caller(cred): Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let req: CloseBody = if body.is_empty() { CloseBody::default() } else { parse_body(&body)? };
    let note = req.note.unwrap_or_else(|| format!("closed by {}", cred.subject()));
    blocking(move || {
        let mut orch = state.write();
        let ticket = orch.close_ticket(&cred, &id, &note)?;
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "ticket": ticket })))
    })
    .await
}

async fn list_releases(State(state): State<AppState>) -> Reply {
    let orch = state.read();
    let repo = orch.repository();
    let releases: Vec<Value> = repo
        .releases()
        .map(|r| {
            let m = &r.manifest;
            json!({
                "release": m.id(),
                "state": m.state,
                "architectures": m.architectures,
                "packages": m.packages.iter().map(|p| &p.name).collect::<Vec<_>>(),
                "manifest_digest": m.manifest_digest,
                "created_at": m.created_at,
            })
        })
        .collect();
    Reply::ok(orch.ledger().sequence(), json!({ "generation": repo.generation(), "releases": releases }))
}

#[derive(Deserialize)]
pub struct WireBundle {
    pub digest: String,
    /// Base64 (standard alphabet) of the bundle payload.
    pub payload: String,
}

#[derive(Deserialize)]
struct PublishBody {
    manifest: ReleaseManifest,
    bundles: Vec<WireBundle>,
}

async fn publish_release(State(state): State<AppState>, Caller(cred): Caller, body: Bytes) -> ApiResult {
    let req: PublishBody = parse_body(&body)?;
    let mut bundles = Vec::with_capacity(req.bundles.len());
    for b in req.bundles {
        let digest =
            Digest::parse(&b.digest).ok_or_else(|| ApiError::bad_request(format!("bad digest {:?}", b.digest)))?;
        let payload = STANDARD
            .decode(b.payload)
            .map_err(|e| ApiError::bad_request(format!("payload of {digest}: {e}")))?;
        bundles.push(Bundle::from_stored(digest, payload));
    }
    blocking(move || {
        let mut orch = state.write();
        orch.publish_release(&cred, &req.manifest, &bundles)?;
        let generation = orch.repository().generation();
        Ok(Reply::new(
            StatusCode::CREATED,
            orch.ledger().sequence(),
            json!({ "release": req.manifest.id(), "generation": generation }),
        ))
    })
    .await
}

async fn backup_release(
    State(state): State<AppState>,
    Caller(cred): Caller,
    Path((project, version)): Path<(String, String)>,
) -> ApiResult {
    let release = parse_release(&format!("{project}/{version}"))?;
    state.require(&cred, Action::WriteSwArea, Resource::Repository(release.key()))?;
    let coldstore = state.shared.coldstore.clone().ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, "NoColdStore", "no coldstore is configured")
    })?;
    blocking(move || {
        let orch = state.read();
        let record = orch.backup_release(&release, &coldstore)?;
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "backup": record })))
    })
    .await
}

async fn sync_mirrors(State(state): State<AppState>, Caller(cred): Caller) -> ApiResult {
    state.require(&cred, Action::WriteSwArea, Resource::Repository("mirrors".into()))?;
    blocking(move || {
        let mut orch = state.write();
        let deltas = orch.sync_mirrors()?;
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "mirrors": deltas })))
    })
    .await
}

async fn watch_cycle(State(state): State<AppState>, Caller(cred): Caller) -> ApiResult {
    state.require(&cred, Action::SubmitInstall, Resource::Repository("watch".into()))?;
    blocking(move || {
        let (report, sequence) = state.run_cycle()?;
        let drive = report.drive.as_ref().map(drive_summary);
        Ok(Reply::ok(sequence, json!({ "cycle": report, "drive": drive })))
    })
    .await
}

#[cfg(feature = "demo")]
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultBody {
    site: SiteId,
    #[serde(default)]
    inject: Option<swdist_core::Fault>,
    #[serde(default)]
    clear: Option<swdist_core::FaultKind>,
}

/// Harness control: activates or clears a fault on a simulated site.
#[cfg(feature = "demo")]
async fn admin_faults(State(state): State<AppState>, Caller(cred): Caller, body: Bytes) -> ApiResult {
    let req: FaultBody = parse_body(&body)?;
    state.require(&cred, Action::WriteSwArea, Resource::Site(req.site.clone()))?;
    blocking(move || {
        let mut orch = state.write();
        let faults = match (req.inject, req.clear) {
            (Some(f), None) => orch.inject_fault(&req.site, f)?,
            (None, Some(k)) => orch.clear_fault(&req.site, k)?,
            _ => return Err(ApiError::bad_request("give exactly one of inject or clear")),
        };
        Ok(Reply::ok(orch.ledger().sequence(), json!({ "site": req.site, "faults": faults })))
    })
    .await
}
