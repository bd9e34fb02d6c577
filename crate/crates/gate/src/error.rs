//! One status code per error variant. The matches are exhaustive on purpose:
//! a new variant in any module fails to compile here until it is mapped.

use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use serde_json::json;
use swdist_core::authz::AuthError;
use swdist_core::deploy::DeployError;
use swdist_core::harness::HarnessError;
use swdist_core::ledger::LedgerError;
use swdist_core::orchestrator::OrchestratorError;
use swdist_core::repo::{BundleError, ManifestError, RepoError};
use swdist_core::tags::TagError;
use swdist_core::to_canonical_string;
use swdist_core::watch::WatchError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub reason: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, reason: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, reason, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    pub fn missing_token() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "MissingToken", "a bearer token is required")
    }

    fn with(status: StatusCode, reason: &'static str, e: &impl std::fmt::Display) -> Self {
        Self::new(status, reason, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "message": self.message,
            "reason": self.reason,
            "status": self.status.as_u16(),
        });
        let mut res = (self.status, to_canonical_string(&body).expect("error body serializes")).into_response();
        res.headers_mut()
            .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
        res
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let reason = match e {
            AuthError::MalformedToken(_) => "MalformedToken",
            AuthError::BadSignature => "BadSignature",
            AuthError::UnknownVO(_) => "UnknownVO",
            AuthError::Expired { .. } => "Expired",
        };
        Self::with(StatusCode::UNAUTHORIZED, reason, &e)
    }
}

impl From<DeployError> for ApiError {
    fn from(e: DeployError) -> Self {
        use StatusCode as S;
        if let DeployError::Ledger(inner) = e {
            return inner.into();
        }
        let (status, reason) = match &e {
            DeployError::DuplicateSubmission { .. } => (S::CONFLICT, "DuplicateSubmission"),
            DeployError::Unauthorized { .. } => (S::FORBIDDEN, "Unauthorized"),
            DeployError::UnknownSite(_) => (S::NOT_FOUND, "UnknownSite"),
            DeployError::UnknownRelease(_) => (S::NOT_FOUND, "UnknownRelease"),
            DeployError::UnsupportedArchitecture { .. } => (S::UNPROCESSABLE_ENTITY, "UnsupportedArchitecture"),
            DeployError::NotInstalled { .. } => (S::CONFLICT, "NotInstalled"),
            DeployError::UnknownJob(_) => (S::NOT_FOUND, "UnknownJob"),
            DeployError::TagPublishFailed(_) => (S::INTERNAL_SERVER_ERROR, "TagPublishFailed"),
            DeployError::Ledger(_) => unreachable!("mapped above"),
        };
        Self::with(status, reason, &e)
    }
}

impl From<LedgerError> for ApiError {
    fn from(e: LedgerError) -> Self {
        use StatusCode as S;
        let (status, reason) = match &e {
            LedgerError::StorageFailure { .. } => (S::INTERNAL_SERVER_ERROR, "StorageFailure"),
            LedgerError::Malformed(_) => (S::CONFLICT, "RejectedEvent"),
            LedgerError::CorruptLog { .. } => (S::INTERNAL_SERVER_ERROR, "CorruptLog"),
            LedgerError::UnknownTicket(_) => (S::NOT_FOUND, "UnknownTicket"),
            LedgerError::IllegalTicketTransition { .. } => (S::CONFLICT, "IllegalTicketTransition"),
        };
        Self::with(status, reason, &e)
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        use StatusCode as S;
        let (status, reason) = match &e {
            HarnessError::DuplicateSite(_) => (S::CONFLICT, "DuplicateSite"),
            HarnessError::UnknownSite(_) => (S::NOT_FOUND, "UnknownSite"),
            HarnessError::InvalidConfig(_) => (S::BAD_REQUEST, "InvalidConfig"),
            HarnessError::InvalidFault(_) => (S::BAD_REQUEST, "InvalidFault"),
            HarnessError::Storage { .. } => (S::INTERNAL_SERVER_ERROR, "StorageFailure"),
        };
        Self::with(status, reason, &e)
    }
}

impl From<RepoError> for ApiError {
    fn from(e: RepoError) -> Self {
        use StatusCode as S;
        let (status, reason) = match &e {
            RepoError::AlreadyPublished(_) => (S::CONFLICT, "AlreadyPublished"),
            RepoError::DigestMismatch { .. } => (S::UNPROCESSABLE_ENTITY, "DigestMismatch"),
            RepoError::NotFound(_) => (S::NOT_FOUND, "UnknownRelease"),
            RepoError::NotReleased { .. } => (S::CONFLICT, "NotReleased"),
            RepoError::MirrorAhead { .. } => (S::CONFLICT, "MirrorAhead"),
            RepoError::MirrorDiverged(_) => (S::CONFLICT, "MirrorDiverged"),
            RepoError::HashAlgorithm(_) => (S::INTERNAL_SERVER_ERROR, "HashAlgorithm"),
            RepoError::StorageFailure { .. } => (S::INTERNAL_SERVER_ERROR, "StorageFailure"),
            RepoError::CorruptIndex { .. } => (S::INTERNAL_SERVER_ERROR, "CorruptIndex"),
        };
        Self::with(status, reason, &e)
    }
}

impl From<TagError> for ApiError {
    fn from(e: TagError) -> Self {
        use StatusCode as S;
        let (status, reason) = match &e {
            TagError::BadIdentifier { .. } => (S::BAD_REQUEST, "BadIdentifier"),
            TagError::NotATag(_) => (S::BAD_REQUEST, "NotATag"),
            TagError::Unauthorized(_) => (S::FORBIDDEN, "Unauthorized"),
            TagError::UnknownSite(_) => (S::NOT_FOUND, "UnknownSite"),
        };
        Self::with(status, reason, &e)
    }
}

impl From<ManifestError> for ApiError {
    fn from(e: ManifestError) -> Self {
        let reason = match e {
            ManifestError::EmptyRelease => "EmptyRelease",
            ManifestError::NoArchitecture => "NoArchitecture",
            ManifestError::BadIdentifier { .. } => "BadIdentifier",
            ManifestError::DuplicatePackage(_) => "DuplicatePackage",
            ManifestError::DanglingDependency { .. } => "DanglingDependency",
            ManifestError::SelfDependency(_) => "SelfDependency",
            ManifestError::DuplicateDependency { .. } => "DuplicateDependency",
            ManifestError::IllegalTransition { .. } => "IllegalTransition",
        };
        Self::with(StatusCode::BAD_REQUEST, reason, &e)
    }
}

impl From<BundleError> for ApiError {
    fn from(e: BundleError) -> Self {
        let reason = match e {
            BundleError::PathTraversal(_) => "PathTraversal",
            BundleError::InvalidPath(_) => "InvalidPath",
            BundleError::DuplicatePath(_) => "DuplicatePath",
            BundleError::Malformed(_) => "MalformedBundle",
        };
        Self::with(StatusCode::BAD_REQUEST, reason, &e)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Config(c) => Self::with(StatusCode::INTERNAL_SERVER_ERROR, "ConfigInvalid", &c),
            OrchestratorError::Ledger(e) => e.into(),
            OrchestratorError::Harness(e) => e.into(),
            OrchestratorError::Repo(e) => e.into(),
            OrchestratorError::Tag(e) => e.into(),
            e @ OrchestratorError::Forbidden { .. } => Self::with(StatusCode::FORBIDDEN, "Forbidden", &e),
            e @ OrchestratorError::Storage { .. } => {
                Self::with(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure", &e)
            }
        }
    }
}

impl From<WatchError> for ApiError {
    fn from(e: WatchError) -> Self {
        match e {
            e @ WatchError::UnknownSite(_) => Self::with(StatusCode::NOT_FOUND, "UnknownSite", &e),
            WatchError::Ledger(e) => e.into(),
            WatchError::Deploy(e) => e.into(),
            WatchError::Orchestrator(e) => e.into(),
        }
    }
}
