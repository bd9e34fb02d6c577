//! `swdist` command line. Subcommands map one-to-one onto API endpoints,
//! except `serve`, `release cut` and `token mint`, which work on local files.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use axum::http::Method;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use swdist_core::authz::Claims;
use swdist_core::clock::{Clock, SystemClock};
use swdist_core::{Authority, ReleaseId, Role};

use crate::client::{ApiResponse, Transport};
use crate::config::GateConfig;
use crate::release;

pub const DEFAULT_CONFIG: &str = "swdist.toml";
pub const TOKEN_ENV: &str = "SWDIST_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "swdist", version, about = "Distribute software releases to a fleet of compute sites")]
pub struct Cli {
    /// Configuration file [default: <STATE_DIR>/swdist.toml with --local, else ./swdist.toml]
    #[arg(long, short, env = "SWDIST_CONFIG", global = true)]
    pub config: Option<PathBuf>,

    /// Operate on this state directory in-process instead of calling a server.
    #[arg(long, value_name = "STATE_DIR", global = true)]
    pub local: Option<PathBuf>,

    /// Service base URL [default: http://<listen_addr> from the config]
    #[arg(long, env = "SWDIST_URL", global = true)]
    pub url: Option<String>,

    /// File holding the bearer token. Falls back to $SWDIST_TOKEN.
    #[arg(long, global = true)]
    pub token_file: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Output::Table, global = true)]
    pub output: Output,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    /// Human-readable rows.
    Table,
    /// The response body as returned by the service.
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve,
    /// Cut, publish, back up and list releases.
    #[command(subcommand)]
    Release(ReleaseCmd),
    /// Mirror repositories.
    #[command(subcommand)]
    Mirror(MirrorCmd),
    /// Installation and removal jobs.
    #[command(subcommand)]
    Job(JobCmd),
    /// Sites, probes and probe history.
    #[command(subcommand)]
    Site(SiteCmd),
    /// Site tags.
    #[command(subcommand)]
    Tag(TagCmd),
    /// Operator tickets.
    #[command(subcommand)]
    Ticket(TicketCmd),
    /// Monitoring cycles.
    #[command(subcommand)]
    Watch(WatchCmd),
    /// Bearer tokens.
    #[command(subcommand)]
    Token(TokenCmd),
    /// Simulated site faults.
    #[cfg(feature = "demo")]
    #[command(subcommand)]
    Fault(FaultCmd),
}

#[derive(Debug, Subcommand)]
pub enum ReleaseCmd {
    /// Bundle package directories and cut a release into OUT.
    Cut {
        #[arg(long)]
        project: String,
        #[arg(long)]
        version: String,
        /// Supported architecture; repeatable.
        #[arg(long = "arch", required = true)]
        architectures: Vec<String>,
        /// NAME=DIR; repeatable.
        #[arg(long = "package", required = true)]
        packages: Vec<String>,
        /// NAME=DEPENDENCY; repeatable.
        #[arg(long = "depend")]
        depends: Vec<String>,
        #[arg(long)]
        /// Output directory for manifest.json and bundles/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Publish a cut release directory to the repository.
    Publish { dir: PathBuf },
    /// Copy a published release to the configured cold store.
    Backup { release: ReleaseId },
    /// Published releases.
    List,
}

#[derive(Debug, Subcommand)]
pub enum MirrorCmd {
    /// Pull every mirror up to the primary repository.
    Sync,
}

#[derive(Debug, Subcommand)]
pub enum JobCmd {
    /// Submit an installation (or removal) job.
    Submit {
        #[arg(long)]
        site: String,
        #[arg(long)]
        release: ReleaseId,
        /// Remove the release instead of installing it.
        #[arg(long)]
        remove: bool,
    },
    /// Show one job.
    Status { job_id: String },
    /// Jobs, optionally for one site.
    List {
        #[arg(long)]
        site: Option<String>,
    },
    /// Run active jobs until they settle.
    Drive,
}

#[derive(Debug, Subcommand)]
pub enum SiteCmd {
    /// Sites with their latest probe.
    List,
    /// Probe a site now.
    Probe { site: String },
    /// Recent probes of a site.
    History {
        site: String,
        #[arg(long, default_value_t = 20)]
        last: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum TagCmd {
    /// Ask for an installation via a request tag.
    Request(TagArgs),
    /// Withdraw a request tag.
    Retract(TagArgs),
    /// Tags on a site.
    List { site: String },
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    site: String,
    #[arg(long)]
    release: ReleaseId,
}

#[derive(Debug, Subcommand)]
pub enum TicketCmd {
    /// Open tickets.
    List {
        /// Include closed tickets.
        #[arg(long)]
        all: bool,
    },
    /// Close a ticket.
    Close {
        ticket_id: String,
        #[arg(long)]
        note: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum WatchCmd {
    /// Probe every site, act on request tags and drive jobs.
    RunCycle,
}

#[derive(Debug, Subcommand)]
pub enum TokenCmd {
    /// Sign a token with the configured trust key.
    Mint {
        /// Identity recorded as the actor.
        #[arg(long)]
        subject: String,
        /// esm, dteam or user.
        #[arg(long)]
        role: Role,
        /// Lifetime in seconds.
        #[arg(long, default_value_t = 3600)]
        ttl_s: u64,
    },
}

#[cfg(feature = "demo")]
#[derive(Debug, Subcommand)]
pub enum FaultCmd {
    /// Activate a fault, e.g. `--kind job_fail_prob --value 0.3`.
    Inject {
        #[arg(long)]
        site: String,
        #[arg(long)]
        kind: swdist_core::FaultKind,
        /// Probability for job_fail_prob, factor for slow.
        #[arg(long)]
        value: Option<f64>,
    },
    Clear {
        #[arg(long)]
        site: String,
        #[arg(long)]
        kind: swdist_core::FaultKind,
    },
}

/// An API failure, reported with a nonzero exit.
#[derive(Debug, thiserror::Error)]
#[error("{}", describe(.0))]
pub struct ApiFailure(pub ApiResponse);

fn describe(r: &ApiResponse) -> String {
    let what = match r.status {
        401 | 403 => "unauthorized",
        404 => "not found",
        409 => "conflict",
        _ => "request failed",
    };
    format!("{what} ({} {}): {}", r.status, r.reason(), r.message())
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn config_path(&self) -> PathBuf {
        match (&self.cli.config, &self.cli.local) {
            (Some(c), _) => c.clone(),
            (None, Some(state)) => state.join(DEFAULT_CONFIG),
            (None, None) => PathBuf::from(DEFAULT_CONFIG),
        }
    }

    fn config(&self) -> Result<GateConfig> {
        let path = self.config_path();
        let mut config = GateConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(state) = &self.cli.local {
            config.state_dir = state.clone();
        }
        Ok(config)
    }

    fn transport(&self) -> Result<Transport> {
        if self.cli.local.is_some() {
            return Transport::local(&self.config()?);
        }
        match &self.cli.url {
            Some(url) => Transport::remote(url),
            None => Transport::remote(&format!("http://{}", self.config()?.listen_addr)),
        }
    }

    fn token(&self) -> Result<Option<String>> {
        if let Some(path) = &self.cli.token_file {
            let t = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(Some(t.trim().to_owned()));
        }
        Ok(std::env::var(TOKEN_ENV).ok().map(|t| t.trim().to_owned()).filter(|t| !t.is_empty()))
    }

    fn call(&self, method: Method, path: &str, body: Option<Value>) -> Result<Value> {
        let token = if method == Method::GET { None } else { self.token()? };
        let res = self.transport()?.call(method, path, token.as_deref(), body.as_ref())?;
        if !res.is_success() {
            return Err(ApiFailure(res).into());
        }
        Ok(res.body)
    }

    fn get(&self, path: &str) -> Result<Value> {
        self.call(Method::GET, path, None)
    }

    fn post(&self, path: &str, body: Option<Value>) -> Result<Value> {
        self.call(Method::POST, path, body)
    }

    /// Prints `body` as JSON, or through `table` in table mode.
    fn emit(&mut self, body: &Value, table: impl FnOnce(&Value) -> Vec<Vec<String>>) -> Result<()> {
        match self.cli.output {
            Output::Json => writeln!(self.out, "{}", serde_json::to_string_pretty(body)?)?,
            Output::Table => {
                for line in render_rows(&table(body)) {
                    writeln!(self.out, "{line}")?;
                }
            }
        }
        Ok(())
    }
}

/// Left-aligned columns separated by two spaces. The first row is the
/// header; a single-column table is printed bare.
pub fn render_rows(rows: &[Vec<String>]) -> Vec<String> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut width = vec![0; cols];
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    rows.iter()
        .map(|r| {
            let mut line = String::new();
            for (i, c) in r.iter().enumerate() {
                if i + 1 < r.len() {
                    line.push_str(&format!("{c:<w$}  ", w = width[i]));
                } else {
                    line.push_str(c);
                }
            }
            line
        })
        .collect()
}

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn release_str(v: &Value) -> String {
    format!("{}/{}", s(&v["project"]), s(&v["version"]))
}

fn items<'a>(body: &'a Value, key: &str) -> &'a [Value] {
    body[key].as_array().map(Vec::as_slice).unwrap_or(&[])
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn job_rows(jobs: &[Value]) -> Vec<Vec<String>> {
    let mut rows = vec![header(&["JOB", "SITE", "RELEASE", "ACTION", "STATE", "ATTEMPTS"])];
    for j in jobs {
        rows.push(vec![
            s(&j["job_id"]),
            s(&j["site"]),
            release_str(&j["release"]),
            s(&j["action"]),
            s(&j["state"]),
            s(&j["attempts"]),
        ]);
    }
    rows
}

fn one(line: String) -> Vec<Vec<String>> {
    vec![vec![line]]
}

/// Runs the command. API failures come back as [`ApiFailure`].
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut ctx = Ctx { cli, out };
    match &cli.command {
        Command::Serve => {
            let config = ctx.config()?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::server::serve(config))?;
        }
        Command::Release(cmd) => release_cmd(&mut ctx, cmd)?,
        Command::Mirror(MirrorCmd::Sync) => {
            let body = ctx.post("/mirrors/sync", None)?;
            ctx.emit(&body, |b| {
                let mut rows = vec![header(&["MIRROR", "RELEASES_ADDED", "BUNDLES_COPIED"])];
                for (i, m) in items(b, "mirrors").iter().enumerate() {
                    let n = |k: &str| items(m, k).len().to_string();
                    rows.push(vec![i.to_string(), n("releases_added"), n("bundles_copied")]);
                }
                rows
            })?;
        }
        Command::Job(cmd) => job_cmd(&mut ctx, cmd)?,
        Command::Site(cmd) => site_cmd(&mut ctx, cmd)?,
        Command::Tag(cmd) => tag_cmd(&mut ctx, cmd)?,
        Command::Ticket(cmd) => ticket_cmd(&mut ctx, cmd)?,
        Command::Watch(WatchCmd::RunCycle) => {
            let body = ctx.post("/watch/cycle", None)?;
            ctx.emit(&body, |b| {
                let c = &b["cycle"];
                let n = |k: &str| items(c, k).len().to_string();
                vec![
                    header(&["PROBES", "SUBMITTED", "SKIPPED", "TICKETS_OPENED", "TICKETS_CLOSED", "SEQUENCE"]),
                    vec![n("probes"), n("submitted"), n("skipped"), n("tickets_opened"), n("tickets_closed"), s(&b["sequence"])],
                ]
            })?;
        }
        Command::Token(TokenCmd::Mint { subject, role, ttl_s }) => {
            let config = ctx.config()?;
            let authority = Authority::new(config.trust()?);
            let claims = Claims {
                subject: subject.clone(),
                vo: config.vo.clone(),
                role: *role,
                expires_at: SystemClock.now_ms() + ttl_s.saturating_mul(1000),
            };
            writeln!(ctx.out, "{}", authority.mint(&claims))?;
        }
        #[cfg(feature = "demo")]
        Command::Fault(cmd) => fault_cmd(&mut ctx, cmd)?,
    }
    Ok(())
}

fn release_cmd(ctx: &mut Ctx<'_>, cmd: &ReleaseCmd) -> Result<()> {
    match cmd {
        ReleaseCmd::Cut { project, version, architectures, packages, depends, out } => {
            let pkgs = release::parse_packages(packages, depends)?;
            let m = release::cut_to_dir(project, version, architectures, &pkgs, SystemClock.now_ms(), out)?;
            let body = serde_json::to_value(&m)?;
            ctx.emit(&body, |_| one(format!("{} {}", m.id(), m.manifest_digest)))
        }
        ReleaseCmd::Publish { dir } => {
            let body = ctx.post("/releases", Some(release::publish_body(dir)?))?;
            ctx.emit(&body, |b| one(format!("{} generation {}", release_str(&b["release"]), s(&b["generation"]))))
        }
        ReleaseCmd::Backup { release } => {
            let body = ctx.post(&format!("/releases/{}/{}/backup", release.project, release.version), None)?;
            ctx.emit(&body, |b| {
                one(format!("{} {} bundles", release_str(&b["backup"]["release"]), items(&b["backup"], "digests").len()))
            })
        }
        ReleaseCmd::List => {
            let body = ctx.get("/releases")?;
            ctx.emit(&body, |b| {
                let mut rows = vec![header(&["RELEASE", "STATE", "ARCHITECTURES", "PACKAGES", "DIGEST"])];
                for r in items(b, "releases") {
                    let join = |k: &str| items(r, k).iter().map(s).collect::<Vec<_>>().join(",");
                    let digest = s(&r["manifest_digest"]);
                    rows.push(vec![
                        release_str(&r["release"]),
                        s(&r["state"]),
                        join("architectures"),
                        join("packages"),
                        digest.chars().take(12).collect(),
                    ]);
                }
                rows
            })
        }
    }
}

fn job_cmd(ctx: &mut Ctx<'_>, cmd: &JobCmd) -> Result<()> {
    match cmd {
        JobCmd::Submit { site, release, remove } => {
            let action = if *remove { "remove" } else { "install" };
            let body = ctx.post("/jobs", Some(json!({ "site": site, "release": release.to_string(), "action": action })))?;
            ctx.emit(&body, |b| one(s(&b["job"]["job_id"])))
        }
        JobCmd::Status { job_id } => {
            let body = ctx.get(&format!("/jobs/{job_id}"))?;
            ctx.emit(&body, |b| job_rows(std::slice::from_ref(&b["job"])))
        }
        JobCmd::List { site } => {
            let path = match site {
                Some(site) => format!("/jobs?site={site}"),
                None => "/jobs".into(),
            };
            let body = ctx.get(&path)?;
            ctx.emit(&body, |b| job_rows(items(b, "jobs")))
        }
        JobCmd::Drive => {
            let body = ctx.post("/jobs/drive", None)?;
            ctx.emit(&body, |b| {
                let mut rows = vec![header(&["JOB", "STATE"])];
                if let Some(settled) = b["drive"]["settled"].as_object() {
                    rows.extend(settled.iter().map(|(id, st)| vec![id.clone(), s(st)]));
                }
                rows
            })
        }
    }
}

fn site_state(site: &Value) -> &'static str {
    if site["offline"].as_bool() == Some(true) {
        "offline"
    } else if site["degraded"].as_bool() == Some(true) {
        "degraded"
    } else if site["probed"].as_bool() == Some(true) {
        "ok"
    } else {
        "unprobed"
    }
}

fn site_cmd(ctx: &mut Ctx<'_>, cmd: &SiteCmd) -> Result<()> {
    match cmd {
        SiteCmd::List => {
            let body = ctx.get("/sites")?;
            ctx.emit(&body, |b| {
                let mut rows = vec![header(&["SITE", "ARCHITECTURE", "STATE", "INSTALLATIONS", "OPEN_TICKETS"])];
                for site in items(b, "sites") {
                    rows.push(vec![
                        s(&site["site"]),
                        s(&site["architecture"]),
                        site_state(site).into(),
                        s(&site["installations"]),
                        s(&site["open_tickets"]),
                    ]);
                }
                rows
            })
        }
        SiteCmd::Probe { site } => {
            let body = ctx.post(&format!("/sites/{site}/probe"), None)?;
            ctx.emit(&body, |b| probe_rows(std::slice::from_ref(&b["entry"])))
        }
        SiteCmd::History { site, last } => {
            let body = ctx.get(&format!("/sites/{site}/history?last={last}"))?;
            ctx.emit(&body, |b| probe_rows(items(b, "history")))
        }
    }
}

fn probe_rows(entries: &[Value]) -> Vec<Vec<String>> {
    let mut rows = vec![header(&["SEQ", "TIMESTAMP", "OVERALL", "FAILED_CHECKS"])];
    for e in entries {
        let p = &e["probe"];
        let failed: Vec<String> =
            items(p, "checks").iter().filter(|c| c["passed"] == Value::Bool(false)).map(|c| s(&c["check"])).collect();
        let overall = if p["overall"].as_bool() == Some(true) { "pass" } else { "fail" };
        rows.push(vec![
            s(&e["sequence"]),
            s(&p["timestamp"]),
            overall.into(),
            if failed.is_empty() { "-".into() } else { failed.join(",") },
        ]);
    }
    rows
}

fn tag_cmd(ctx: &mut Ctx<'_>, cmd: &TagCmd) -> Result<()> {
    match cmd {
        TagCmd::Request(a) => {
            let body = ctx.post(&format!("/sites/{}/tags/request", a.site), Some(json!({ "release": a.release.to_string() })))?;
            ctx.emit(&body, |b| one(s(&b["tag"])))
        }
        TagCmd::Retract(a) => {
            let path = format!("/sites/{}/tags/request?release={}", a.site, a.release);
            let body = ctx.call(Method::DELETE, &path, None)?;
            ctx.emit(&body, |b| one(s(&b["retracted"])))
        }
        TagCmd::List { site } => {
            let body = ctx.get(&format!("/sites/{site}/tags"))?;
            ctx.emit(&body, |b| items(b, "tags").iter().map(|t| vec![s(t)]).collect())
        }
    }
}

fn ticket_origin(o: &Value) -> String {
    match o["type"].as_str() {
        Some("job") => format!("job {}", s(&o["job_id"])),
        Some("check") => format!("{} {}", s(&o["site"]), s(&o["check"])),
        _ => s(o),
    }
}

fn ticket_cmd(ctx: &mut Ctx<'_>, cmd: &TicketCmd) -> Result<()> {
    let rows = |tickets: &[Value]| {
        let mut rows = vec![header(&["TICKET", "SEVERITY", "STATE", "RETRIES", "ORIGIN"])];
        for t in tickets {
            rows.push(vec![
                s(&t["ticket_id"]),
                s(&t["severity"]),
                s(&t["state"]),
                s(&t["retry_count"]),
                ticket_origin(&t["origin"]),
            ]);
        }
        rows
    };
    match cmd {
        TicketCmd::List { all } => {
            let body = ctx.get(if *all { "/tickets" } else { "/tickets?state=open" })?;
            ctx.emit(&body, |b| rows(items(b, "tickets")))
        }
        TicketCmd::Close { ticket_id, note } => {
            let req = note.as_ref().map(|n| json!({ "note": n }));
            let body = ctx.post(&format!("/tickets/{ticket_id}/close"), req)?;
            ctx.emit(&body, |b| rows(std::slice::from_ref(&b["ticket"])))
        }
    }
}

#[cfg(feature = "demo")]
fn fault_cmd(ctx: &mut Ctx<'_>, cmd: &FaultCmd) -> Result<()> {
    use swdist_core::{Fault, FaultKind};
    let (site, req) = match cmd {
        FaultCmd::Inject { site, kind, value } => {
            let need = || value.ok_or_else(|| anyhow::anyhow!("--value is required for {kind:?}"));
            let fault = match kind {
                FaultKind::Unreachable => Fault::Unreachable,
                FaultKind::PermDenied => Fault::PermDenied,
                FaultKind::DiskFull => Fault::DiskFull,
                FaultKind::PkgdbCorrupt => Fault::PkgdbCorrupt,
                FaultKind::JobFailProb => Fault::JobFailProb { p: need()? },
                FaultKind::Slow => Fault::Slow { factor: need()? },
            };
            (site, json!({ "site": site, "inject": fault }))
        }
        FaultCmd::Clear { site, kind } => (site, json!({ "site": site, "clear": kind })),
    };
    let body = ctx.post("/admin/faults", Some(req))?;
    ctx.emit(&body, |b| {
        let kinds: Vec<String> = items(b, "faults").iter().map(|f| s(&f["kind"])).collect();
        one(format!("{site}: {}", if kinds.is_empty() { "no faults".into() } else { kinds.join(",") }))
    })
}
