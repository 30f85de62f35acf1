//! HTTP adapter over the retrieval engine and session recommender.
//!
//! Every route is mounted under both `/api/v1` and `/api`. Engine work is
//! blocking (provider calls, scans), so handlers hop onto the blocking pool;
//! each session sits behind its own mutex, which serializes its mutations.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use archseek_core::session::LikeOutcome;
use archseek_core::{
    AspectWeights, CaseId, Error, Origin, RetrievalEngine, Session, SessionSnapshot,
};
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::api::{self, ApiResult, CaseDetail, Health};

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub seed: u64,
    pub session_ttl: Duration,
    pub max_upload_bytes: usize,
    pub result_limit: Option<usize>,
    pub snapshot_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            seed: 0,
            session_ttl: Duration::from_secs(3600),
            max_upload_bytes: 10 * 1024 * 1024,
            result_limit: None,
            snapshot_dir: None,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "session_not_found",
            format!("no session {id}"),
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Input(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::UnsupportedMedia(_) => (StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media"),
            Error::EmptyAnalysis(_) => (StatusCode::UNPROCESSABLE_ENTITY, "empty_analysis"),
            Error::State(_) => (StatusCode::CONFLICT, "invalid_state"),
            // both mean no usable provider from the client's point of view
            Error::Transport { .. } | Error::Config(_) => {
                (StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable")
            }
            Error::Augmentation { .. } => (StatusCode::BAD_GATEWAY, "bad_provider_reply"),
            Error::Format(_) | Error::Io { .. } | Error::Json(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.code, self.message);
        }
        let body =
            serde_json::json!({ "error": ErrorBody { code: self.code, message: self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResponse<T> = Result<Json<T>, ApiError>;

struct Slot {
    session: Mutex<Session>,
    last_used: Mutex<Instant>,
}

/// In-memory sessions with idle eviction and optional JSON snapshots.
pub struct SessionStore {
    map: Mutex<HashMap<String, Arc<Slot>>>,
    ttl: Duration,
    snapshot_dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn new(ttl: Duration, snapshot_dir: Option<PathBuf>) -> Self {
        SessionStore {
            map: Mutex::new(HashMap::new()),
            ttl,
            snapshot_dir,
        }
    }

    pub fn len(&self) -> usize {
        self.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evict_expired(&self) {
        let now = Instant::now();
        self.map
            .lock()
            .retain(|_, slot| now.duration_since(*slot.last_used.lock()) < self.ttl);
    }

    fn snapshot_path(&self, id: &str) -> Option<PathBuf> {
        // ids are generated as uuids; anything else never touches the disk
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        self.snapshot_dir
            .as_ref()
            .filter(|_| safe)
            .map(|d| d.join(format!("{id}.json")))
    }

    fn persist(&self, session: &Session) {
        let Some(path) = self.snapshot_path(session.session_id()) else {
            return;
        };
        let write = || -> std::io::Result<()> {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let json = serde_json::to_vec(&session.snapshot()).map_err(std::io::Error::other)?;
            std::fs::write(&path, json)
        };
        if let Err(e) = write() {
            log::warn!("could not persist session {}: {e}", session.session_id());
        }
    }

    fn insert(&self, session: Session) -> Arc<Slot> {
        self.evict_expired();
        self.persist(&session);
        let id = session.session_id().to_string();
        let slot = Arc::new(Slot {
            session: Mutex::new(session),
            last_used: Mutex::new(Instant::now()),
        });
        self.map.lock().insert(id, slot.clone());
        slot
    }

    /// Looks a session up, falling back to its snapshot when one exists.
    fn get(&self, id: &str, engine: &RetrievalEngine) -> Result<Arc<Slot>, ApiError> {
        self.evict_expired();
        if let Some(slot) = self.map.lock().get(id).cloned() {
            *slot.last_used.lock() = Instant::now();
            return Ok(slot);
        }
        let path = self.snapshot_path(id).filter(|p| p.is_file());
        let Some(path) = path else {
            return Err(ApiError::unknown_session(id));
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let snap: SessionSnapshot = serde_json::from_str(&text).map_err(Error::from)?;
        let session = Session::restore(engine, snap)?;
        Ok(self.insert(session))
    }
}

pub struct AppState {
    pub engine: Arc<RetrievalEngine>,
    pub sessions: SessionStore,
    pub settings: ServiceSettings,
    started: AtomicU64,
}

impl AppState {
    pub fn new(engine: Arc<RetrievalEngine>, settings: ServiceSettings) -> Arc<Self> {
        Arc::new(AppState {
            engine,
            sessions: SessionStore::new(settings.session_ttl, settings.snapshot_dir.clone()),
            settings,
            started: AtomicU64::new(0),
        })
    }

    fn next_seed(&self) -> u64 {
        self.settings
            .seed
            .wrapping_add(self.started.fetch_add(1, Ordering::Relaxed))
    }

    fn result(&self, session: &Session) -> ApiResult {
        api::session_result(self.engine.database(), session, self.settings.result_limit)
    }
}

fn new_session_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextQueryRequest {
    pub query: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsRequest {
    pub weights: AspectWeights,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikeRequest {
    pub case_id: CaseId,
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    Json(api::health(st.engine.database()))
}

async fn query_text(
    State(st): State<Arc<AppState>>,
    Json(req): Json<TextQueryRequest>,
) -> ApiResponse<ApiResult> {
    blocking(move || {
        let origin = Origin::Text { query: req.query };
        let session = Session::start(&st.engine, new_session_id(), origin, st.next_seed())?;
        let out = st.result(&session);
        st.sessions.insert(session);
        Ok(Json(out))
    })
    .await
}

async fn query_image(
    State(st): State<Arc<AppState>>,
    mut form: Multipart,
) -> ApiResponse<ApiResult> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", m);
    let mut image = None;
    let mut weights = AspectWeights::default();
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name() {
            Some("image") => image = Some(field.bytes().await.map_err(|e| bad(e.to_string()))?),
            Some("weights") => {
                let text = field.text().await.map_err(|e| bad(e.to_string()))?;
                if !text.trim().is_empty() {
                    weights =
                        serde_json::from_str(&text).map_err(|e| bad(format!("weights: {e}")))?;
                }
            }
            other => return Err(bad(format!("unexpected form field {other:?}"))),
        }
    }
    let image = image.ok_or_else(|| bad("missing form field \"image\"".into()))?;
    if image.len() > st.settings.max_upload_bytes {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            "image exceeds the upload limit",
        ));
    }
    blocking(move || {
        weights.validate()?;
        let out = st.engine.image_query(&image, &weights)?;
        let session = Session::start_from_image(
            &st.engine,
            new_session_id(),
            out.cache,
            out.weights,
            st.next_seed(),
        )?;
        let res = st.result(&session);
        st.sessions.insert(session);
        Ok(Json(res))
    })
    .await
}

async fn start_session(
    State(st): State<Arc<AppState>>,
    body: Option<Json<StartRequest>>,
) -> ApiResponse<ApiResult> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    blocking(move || {
        let seed = req.seed.unwrap_or_else(|| st.next_seed());
        let session = Session::start(&st.engine, new_session_id(), Origin::None, seed)?;
        let out = st.result(&session);
        st.sessions.insert(session);
        Ok(Json(out))
    })
    .await
}

/// Runs `f` on a session under its lock, persisting when `mutates`.
async fn with_session<T, F>(st: Arc<AppState>, id: String, mutates: bool, f: F) -> ApiResponse<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState, &mut Session) -> Result<T, ApiError> + Send + 'static,
{
    blocking(move || {
        let slot = st.sessions.get(&id, &st.engine)?;
        let mut session = slot.session.lock();
        let out = f(&st, &mut session)?;
        if mutates {
            st.sessions.persist(&session);
        }
        Ok(Json(out))
    })
    .await
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResponse<ApiResult> {
    with_session(st, id, false, |st, s| Ok(st.result(s))).await
}

async fn set_weights(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<WeightsRequest>,
) -> ApiResponse<ApiResult> {
    with_session(st, id, true, move |st, s| {
        if s.image_cache().is_none() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "no_image_query",
                "session has no image query to re-weight",
            ));
        }
        req.weights.validate()?;
        s.set_weights(&st.engine, req.weights)?;
        Ok(st.result(s))
    })
    .await
}

async fn like(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<LikeRequest>,
) -> ApiResponse<ApiResult> {
    with_session(st, id, true, move |st, s| {
        match s.like(&st.engine, req.case_id)? {
            LikeOutcome::Liked => Ok(st.result(s)),
            LikeOutcome::AlreadyLiked => Err(ApiError::new(
                StatusCode::CONFLICT,
                "already_liked",
                format!("case {} is already liked", req.case_id),
            )),
        }
    })
    .await
}

async fn unlike(
    State(st): State<Arc<AppState>>,
    Path((id, case_id)): Path<(String, u64)>,
) -> ApiResponse<ApiResult> {
    with_session(st, id, true, move |st, s| {
        let case_id = CaseId(case_id);
        if !s.liked().contains(&case_id) {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "not_liked",
                format!("case {case_id} is not liked in this session"),
            ));
        }
        s.unlike(&st.engine, case_id)?;
        Ok(st.result(s))
    })
    .await
}

async fn case_detail(
    State(st): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> ApiResponse<CaseDetail> {
    api::case_detail(st.engine.database(), CaseId(id))
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no case {id}")))
}

fn api_routes(max_upload: usize) -> Router<Arc<AppState>> {
    Router::new()
        .route("/health", get(health))
        .route("/query/text", post(query_text))
        // room for the multipart envelope around the image
        .route(
            "/query/image",
            post(query_image).layer(DefaultBodyLimit::max(max_upload.saturating_add(64 * 1024))),
        )
        .route("/session", post(start_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/weights", post(set_weights))
        .route("/session/{id}/like", post(like))
        .route("/session/{id}/like/{case_id}", delete(unlike))
        .route("/cases/{id}", get(case_detail))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = api_routes(state.settings.max_upload_bytes);
    let mut app = Router::new().nest("/api/v1", api.clone()).nest("/api", api);
    if let Some(dir) = &state.settings.ui_dir {
        app = app.nest_service(
            "/app",
            ServeDir::new(dir).append_index_html_on_directories(true),
        );
    }
    app.with_state(state)
}
