//! HTTP resources under `/v1`.
//!
//! Engine calls block (a remote provider does network I/O), so every handler
//! runs them on the blocking pool. With a remote provider the capture
//! endpoints answer `202 Accepted` with a job to poll at `/v1/jobs/{id}`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use contexty_core::analyzer::AnalyzerAdapter;
use contexty_core::engine::{ChatInput, Clock, EngineConfig, ObservationInput, Session, SnippetInput};
use contexty_core::probe::Choice;
use contexty_core::store::{valid_session_id, SessionStore};
use contexty_core::tree::MemoryEdit;
use contexty_core::{BranchId, GroupName, ImageRef, MemoryId, Provenance};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Job {
    pub id: String,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

/// Shared state of a running service.
pub struct AppState {
    store: SessionStore,
    analyzer: AnalyzerAdapter,
    engine: EngineConfig,
    token: Option<String>,
    clock: Option<Clock>,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    jobs: Mutex<HashMap<String, Job>>,
}

impl AppState {
    pub fn new(store: SessionStore, analyzer: AnalyzerAdapter, engine: EngineConfig) -> Self {
        Self {
            store,
            analyzer,
            engine,
            token: None,
            clock: None,
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
        }
    }

    /// Requires `Authorization: Bearer <token>` on every resource except
    /// the health check.
    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    fn now(&self) -> contexty_core::Timestamp {
        match &self.clock {
            Some(c) => c(),
            None => contexty_core::engine::system_clock()(),
        }
    }

    fn attach_clock(&self, session: Session) -> Session {
        match &self.clock {
            Some(c) => session.with_clock(c.clone()),
            None => session,
        }
    }

    /// Loaded session, opening (and replaying) it on first use. Only one
    /// handle per session exists, so its log has a single writer.
    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        let mut sessions = self.sessions.lock().expect("session table");
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        if !self.store.exists(id) {
            return Err(ApiError::not_found(format!("unknown session {id}")));
        }
        let session = Session::open(&self.store, id, self.analyzer.clone(), self.engine)?;
        let session = Arc::new(self.attach_clock(session));
        sessions.insert(id.to_string(), session.clone());
        Ok(session)
    }

    pub fn create_session(&self, id: Option<String>) -> ApiResult<Arc<Session>> {
        let id = id.unwrap_or_else(|| format!("s_{}", uuid::Uuid::new_v4().simple()));
        if !valid_session_id(&id) {
            return Err(ApiError::bad_request(format!("invalid session id {id:?}")));
        }
        let mut sessions = self.sessions.lock().expect("session table");
        if sessions.contains_key(&id) || self.store.exists(&id) {
            return Err(ApiError::conflict(format!("session {id} already exists")));
        }
        let session = Session::create(&self.store, &id, self.analyzer.clone(), self.engine, self.now())?;
        let session = Arc::new(self.attach_clock(session));
        sessions.insert(id, session.clone());
        Ok(session)
    }

    fn start_job(&self) -> String {
        let id = format!("job_{}", uuid::Uuid::new_v4().simple());
        let job = Job {
            id: id.clone(),
            status: JobStatus::Pending,
            result: None,
            error: None,
        };
        self.jobs.lock().expect("job table").insert(id.clone(), job);
        id
    }

    fn finish_job(&self, id: &str, outcome: ApiResult<Value>) {
        if let Some(job) = self.jobs.lock().expect("job table").get_mut(id) {
            match outcome {
                Ok(v) => {
                    job.status = JobStatus::Done;
                    job.result = Some(v);
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(e);
                }
            }
        }
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job table").get(id).cloned()
    }
}

pub type Shared = Arc<AppState>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn decode_image(b64: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("imageBase64 is not valid base64: {e}")))
}

async fn require_token(State(app): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|given| given == token);
        if !ok {
            let body = ApiError::bad_request("missing or invalid bearer token");
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

pub fn router(app: Shared) -> Router {
    let sessions = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/capture/snippet", post(capture_snippet))
        .route("/sessions/:id/capture/observation", post(capture_observation))
        .route("/sessions/:id/chat", post(chat))
        .route("/sessions/:id/probe/choice", post(probe_choice))
        .route("/sessions/:id/probe/funnel", get(probe_funnel))
        .route("/sessions/:id/tree", get(get_tree))
        .route("/sessions/:id/tree/move", post(tree_move))
        .route("/sessions/:id/tree/group", post(tree_group))
        .route("/sessions/:id/tree/reorg", post(tree_reorg))
        .route("/sessions/:id/timeline", get(get_timeline))
        .route("/sessions/:id/summary", get(get_summary).put(put_summary))
        .route("/sessions/:id/summary/refresh", post(refresh_summary))
        .route("/sessions/:id/memories/:mid", post(edit_memory).patch(edit_memory).delete(delete_memory))
        .route("/sessions/:id/memories/:mid/visibility", post(set_visibility))
        .route("/sessions/:id/branches/:bid", post(rename_branch).patch(rename_branch).delete(delete_branch))
        .route("/sessions/:id/blobs/:blob", get(get_blob))
        .route("/sessions/:id/events", get(get_events))
        .route("/jobs/:job", get(get_job))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token));
    Router::new()
        .nest("/v1", sessions.route("/health", get(health)))
        .with_state(app)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CreateSessionBody {
    #[serde(default)]
    id: Option<String>,
}

fn session_doc(s: &Session) -> Value {
    let state = s.state();
    json!({
        "id": s.id(),
        "manifest": s.manifest(),
        "version": state.last_seq,
        "treeVersion": state.tree_seq,
        "memoryCount": state.tree.len(),
        "pendingChoices": state.pending_choices().iter().map(|p| p.query_id.clone()).collect::<Vec<_>>(),
        "funnel": state.funnel,
    })
}

async fn create_session(State(app): State<Shared>, body: Option<Json<CreateSessionBody>>) -> ApiResult<Response> {
    let id = body.and_then(|Json(b)| b.id);
    let doc = blocking(move || app.create_session(id).map(|s| session_doc(&s))).await?;
    Ok((StatusCode::CREATED, Json(doc)).into_response())
}

async fn list_sessions(State(app): State<Shared>) -> ApiResult<Json<Value>> {
    let ids = blocking(move || Ok(app.store().list()?)).await?;
    Ok(Json(json!({ "sessions": ids })))
}

async fn get_session(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(session_doc(&*app.session(&id)?)))).await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SnippetBody {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    image_base64: Option<String>,
    #[serde(default)]
    user_memo: Option<String>,
    #[serde(default)]
    provenance: Provenance,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ObservationBody {
    image_base64: String,
    #[serde(default)]
    provenance: Provenance,
}

/// Runs a capture now, or as a job when the provider is remote.
async fn run_capture<F>(app: Shared, id: String, f: F) -> ApiResult<Response>
where
    F: FnOnce(&Session) -> ApiResult<contexty_core::engine::CaptureOutcome> + Send + 'static,
{
    let session = {
        let app = app.clone();
        blocking(move || app.session(&id)).await?
    };
    if app.analyzer.is_remote() {
        let job = app.start_job();
        let poll = format!("/v1/jobs/{job}");
        let job_id = job.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = f(&session).and_then(|o| serde_json::to_value(o).map_err(|e| ApiError::internal(e.to_string())));
            app.finish_job(&job_id, outcome);
        });
        let body = json!({ "jobId": job, "status": JobStatus::Pending, "poll": poll });
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    let outcome = blocking(move || f(&session)).await?;
    let status = if outcome.memory.is_some() { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(outcome)).into_response())
}

async fn capture_snippet(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<SnippetBody>) -> ApiResult<Response> {
    let image = body.image_base64.as_deref().map(decode_image).transpose()?;
    let input = SnippetInput {
        text: body.text,
        image,
        user_memo: body.user_memo,
        provenance: body.provenance,
    };
    run_capture(app, id, move |s| Ok(s.capture_snippet(input)?)).await
}

async fn capture_observation(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<ObservationBody>) -> ApiResult<Response> {
    let input = ObservationInput {
        image: decode_image(&body.image_base64)?,
        provenance: body.provenance,
    };
    run_capture(app, id, move |s| Ok(s.capture_observation(input)?)).await
}

async fn chat(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<ChatInput>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let out = app.session(&id)?.chat(body)?;
        Ok(Json(json!(out)))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ChoiceBody {
    query_id: String,
    chosen: Choice,
}

async fn probe_choice(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<ChoiceBody>) -> ApiResult<Response> {
    let record = blocking(move || Ok(app.session(&id)?.choose(&body.query_id, body.chosen)?)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn probe_funnel(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.funnel())))).await
}

async fn get_tree(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.tree_view())))).await
}

async fn get_timeline(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.timeline())))).await
}

async fn get_summary(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.summary())))).await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SummaryBody {
    summary: String,
}

async fn put_summary(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<SummaryBody>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.set_summary(&body.summary)?)))).await
}

async fn refresh_summary(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.refresh_summary()?)))).await
}

/// Moves a memory (`memoryId` + `targetBranchId`) or a branch (`branchId`
/// + `parentId`). A null target unassigns or lifts to the root.
#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct MoveBody {
    #[serde(default)]
    memory_id: Option<MemoryId>,
    #[serde(default)]
    target_branch_id: Option<BranchId>,
    #[serde(default)]
    branch_id: Option<BranchId>,
    #[serde(default)]
    parent_id: Option<BranchId>,
}

async fn tree_move(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<MoveBody>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let s = app.session(&id)?;
        match (&body.memory_id, &body.branch_id) {
            (Some(m), None) => s.move_memory(m, body.target_branch_id.as_ref())?,
            (None, Some(b)) if body.target_branch_id.is_none() => s.move_branch(b, body.parent_id.as_ref())?,
            _ => return Err(ApiError::bad_request("give either memoryId (+ targetBranchId) or branchId (+ parentId)")),
        };
        Ok(Json(json!(s.tree_view())))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct GroupBody {
    memory_ids: Vec<MemoryId>,
    #[serde(default)]
    name: Option<String>,
}

async fn tree_group(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<GroupBody>) -> ApiResult<Response> {
    let doc = blocking(move || {
        let s = app.session(&id)?;
        let branch = s.group(&body.memory_ids, body.name)?;
        Ok(json!({ "branchId": branch, "tree": s.tree_view() }))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(doc)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ReorgBody {
    instruction: String,
    #[serde(default)]
    memory_ids: Vec<MemoryId>,
    #[serde(default)]
    branch_ids: Vec<BranchId>,
}

async fn tree_reorg(State(app): State<Shared>, Path(id): Path<String>, Json(body): Json<ReorgBody>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let s = app.session(&id)?;
        let out = s.reorganize(&body.instruction, &body.memory_ids, &body.branch_ids)?;
        Ok(Json(json!({ "reorg": out, "tree": s.tree_view() })))
    })
    .await
}

async fn edit_memory(
    State(app): State<Shared>,
    Path((id, mid)): Path<(String, String)>,
    Json(edit): Json<MemoryEdit>,
) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.edit_memory(&MemoryId::new(mid), edit)?)))).await
}

async fn delete_memory(State(app): State<Shared>, Path((id, mid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let s = app.session(&id)?;
        s.delete_memory(&MemoryId::new(mid))?;
        Ok(Json(json!(s.tree_view())))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct VisibilityBody {
    hidden: bool,
    #[serde(default)]
    archived: bool,
}

async fn set_visibility(
    State(app): State<Shared>,
    Path((id, mid)): Path<(String, String)>,
    Json(body): Json<VisibilityBody>,
) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!(app.session(&id)?.set_visibility(&MemoryId::new(mid), body.hidden, body.archived)?)))).await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RenameBody {
    name: String,
    #[serde(default)]
    summary: String,
}

async fn rename_branch(
    State(app): State<Shared>,
    Path((id, bid)): Path<(String, String)>,
    Json(body): Json<RenameBody>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let name = GroupName::new(body.name.trim(), body.summary.trim());
        Ok(Json(json!(app.session(&id)?.rename_branch(&BranchId::new(bid), name)?)))
    })
    .await
}

async fn delete_branch(State(app): State<Shared>, Path((id, bid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let s = app.session(&id)?;
        s.delete_branch(&BranchId::new(bid))?;
        Ok(Json(json!(s.tree_view())))
    })
    .await
}

async fn get_blob(State(app): State<Shared>, Path((id, blob)): Path<(String, String)>) -> ApiResult<Response> {
    let bytes = blocking(move || Ok(app.session(&id)?.load_blob(&ImageRef::new(blob))?)).await?;
    let mime = match bytes.first() {
        Some(0x89) => "image/png",
        Some(0xFF) => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn get_events(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(json!({ "events": app.session(&id)?.events()? })))).await
}

async fn get_job(State(app): State<Shared>, Path(job): Path<String>) -> ApiResult<Json<Job>> {
    app.job(&job).map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {job}")))
}
