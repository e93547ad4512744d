//! Read-only HTTP API over one immutable engine snapshot.
//!
//! The router answers 503 until a snapshot is installed; after that every
//! response is a pure function of (snapshot, request). Heavy work runs on the
//! blocking pool so concurrent requests never queue behind one another.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use seqcf_core::cohort::save_cohort_csv;
use seqcf_core::engine::{self, Artifacts, CfRequest};
use seqcf_core::Error;

pub const DEFAULT_PAGE: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },

    #[error("invalid --allow-origin `{0}`")]
    Origin(String),

    #[error(transparent)]
    Engine(#[from] Error),

    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// Loaded artifacts plus the reports that depend on nothing but them.
#[derive(Debug)]
pub struct Snapshot {
    artifacts: Artifacts,
    id: String,
    audit: String,
    cascade: String,
    catalog: String,
}

impl Snapshot {
    /// Snapshot id hashes the canonical serialization of every artifact.
    pub fn new(artifacts: Artifacts) -> Result<Self, Error> {
        let parts = [
            (engine::CATALOG_FILE, artifacts.catalog().to_json()),
            (engine::COHORT_FILE, save_cohort_csv(artifacts.cohort())),
            (engine::GRAPH_FILE, artifacts.graph().to_json()),
            (engine::MODEL_FILE, artifacts.model().to_json()),
        ];
        let id = digest(parts.iter().map(|(n, s)| (*n, s.as_bytes())));
        Self::with_id(artifacts, id)
    }

    /// Snapshot id hashes the file bytes, so identical directories share it.
    pub fn load_dir(dir: &Path) -> Result<Self, Error> {
        let artifacts = Artifacts::load_dir(dir)?;
        let names = [
            engine::CATALOG_FILE,
            engine::COHORT_FILE,
            engine::GRAPH_FILE,
            engine::MODEL_FILE,
        ];
        let bytes = names
            .iter()
            .map(|n| std::fs::read(dir.join(n)))
            .collect::<Result<Vec<_>, _>>()?;
        let id = digest(names.iter().copied().zip(bytes.iter().map(Vec::as_slice)));
        Self::with_id(artifacts, id)
    }

    fn with_id(artifacts: Artifacts, id: String) -> Result<Self, Error> {
        let audit = engine::to_json(&engine::audit(artifacts.cohort())?);
        let cascade = engine::to_json(&engine::cascade(artifacts.cohort())?);
        let catalog = artifacts.catalog().to_json();
        Ok(Self {
            artifacts,
            id,
            audit,
            cascade,
            catalog,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn artifacts(&self) -> &Artifacts {
        &self.artifacts
    }
}

fn digest<'a>(parts: impl Iterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in parts {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    format!("{:x}", h.finalize())
}

/// Shared handle: empty until the loader installs a snapshot.
#[derive(Debug, Clone, Default)]
pub struct AppState(Arc<OnceLock<Snapshot>>);

impl AppState {
    pub fn loaded(snapshot: Snapshot) -> Self {
        let s = Self::default();
        s.install(snapshot);
        s
    }

    /// Installs the snapshot; a second install is ignored.
    pub fn install(&self, snapshot: Snapshot) -> bool {
        self.0.set(snapshot).is_ok()
    }

    fn snapshot(&self) -> Result<&Snapshot, ApiError> {
        self.0.get().ok_or_else(ApiError::unavailable)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// `None` disables CORS; `Some("*")` allows any origin.
    pub allow_origin: Option<String>,
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code,
                message: message.into(),
                field: field.map(str::to_string),
            },
        }
    }

    fn unavailable() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "loading",
            "snapshot not loaded yet",
            None,
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        use StatusCode as S;
        let msg = e.to_string();
        match &e {
            Error::UnknownPatient(_) => Self::new(S::NOT_FOUND, "unknown_patient", msg, Some("patient_id")),
            Error::NoCounterfactual { .. } => Self::new(S::UNPROCESSABLE_ENTITY, "no_counterfactual", msg, None),
            Error::NotIntervention(_) => Self::new(S::BAD_REQUEST, "not_intervention", msg, Some("interventions")),
            Error::UnknownFeature(_) | Error::InterventionSyntax(_) => {
                Self::new(S::BAD_REQUEST, "invalid_intervention", msg, Some("interventions"))
            }
            Error::Config { parameter, .. } => {
                let field = parameter.clone();
                Self::new(S::BAD_REQUEST, "invalid_parameter", msg, Some(&field))
            }
            _ if e.is_validation() => Self::new(S::BAD_REQUEST, "invalid_request", msg, None),
            _ => Self::new(S::INTERNAL_SERVER_ERROR, "engine_error", msg, None),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text(), None)
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_query", r.body_text(), None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

/// Body already rendered by the engine's canonical serializer.
struct RawJson(String);

impl IntoResponse for RawJson {
    fn into_response(self) -> Response {
        (
            [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
            self.0,
        )
            .into_response()
    }
}

type ApiResult = Result<RawJson, ApiError>;

/// Runs engine work off the async workers.
async fn blocking<F>(state: AppState, f: F) -> ApiResult
where
    F: FnOnce(&Snapshot) -> Result<String, Error> + Send + 'static,
{
    state.snapshot()?;
    tokio::task::spawn_blocking(move || {
        let snap = state.snapshot()?;
        f(snap).map(RawJson).map_err(ApiError::from)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "engine_error", e.to_string(), None))?
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    snapshot_id: &'a str,
}

async fn health(State(state): State<AppState>) -> ApiResult {
    let snap = state.snapshot()?;
    Ok(RawJson(engine::to_json(&Health {
        status: "ok",
        snapshot_id: snap.id(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientQuery {
    limit: Option<usize>,
    offset: Option<usize>,
    min_risk: Option<f64>,
}

async fn patients(State(state): State<AppState>, query: Result<Query<PatientQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = query?;
    blocking(state, move |s| {
        let page = engine::list_patients(
            s.artifacts(),
            q.limit.unwrap_or(DEFAULT_PAGE),
            q.offset.unwrap_or(0),
            q.min_risk,
        )?;
        Ok(engine::to_json(&page))
    })
    .await
}

async fn patient(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    blocking(state, move |s| {
        Ok(engine::to_json(&engine::patient_detail(s.artifacts(), &id)?))
    })
    .await
}

async fn counterfactual(State(state): State<AppState>, body: Result<Json<CfRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    blocking(state, move |s| {
        Ok(engine::to_json(&engine::run_counterfactual(s.artifacts(), &req)?))
    })
    .await
}

async fn audit(State(state): State<AppState>) -> ApiResult {
    Ok(RawJson(state.snapshot()?.audit.clone()))
}

async fn cascade(State(state): State<AppState>) -> ApiResult {
    Ok(RawJson(state.snapshot()?.cascade.clone()))
}

async fn catalog(State(state): State<AppState>) -> ApiResult {
    Ok(RawJson(state.snapshot()?.catalog.clone()))
}

pub fn router(state: AppState, options: &ServeOptions) -> Result<Router, ServeError> {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/patients", get(patients))
        .route("/patients/{id}", get(patient))
        .route("/counterfactual", post(counterfactual))
        .route("/audit", get(audit))
        .route("/cascade", get(cascade))
        .route("/catalog", get(catalog))
        .with_state(state);
    if let Some(dir) = &options.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    if let Some(origin) = &options.allow_origin {
        let cors = CorsLayer::new()
            .allow_methods(Any)
            .allow_headers([header::CONTENT_TYPE]);
        let cors = if origin == "*" {
            cors.allow_origin(Any)
        } else {
            let value = HeaderValue::from_str(origin).map_err(|_| ServeError::Origin(origin.clone()))?;
            cors.allow_origin(value)
        };
        app = app.layer(cors);
    }
    Ok(app)
}

/// Binds first, then loads the snapshot in the background; requests that
/// arrive meanwhile get 503.
pub async fn serve(bind: &str, artifacts_dir: PathBuf, options: ServeOptions) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|source| ServeError::Bind {
            addr: bind.to_string(),
            source,
        })?;
    let state = AppState::default();
    let app = router(state.clone(), &options)?;
    let addr: SocketAddr = listener.local_addr()?;
    log::info!("listening on {addr}");
    let loader = tokio::task::spawn_blocking(move || Snapshot::load_dir(&artifacts_dir));
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let snapshot = loader.await.map_err(|e| ServeError::Io(std::io::Error::other(e)))??;
    log::info!("snapshot {} loaded", snapshot.id());
    state.install(snapshot);
    server.await.map_err(|e| ServeError::Io(std::io::Error::other(e)))??;
    Ok(())
}
