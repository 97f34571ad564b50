//! HTTP routes over a [`Store`]. Request bodies are JSON; every error is
//! returned as `{"error": {"code", "message", "field"?, "ids"?}}`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/datasets` | register a dataset ([`DatasetUpload`]) |
//! | GET | `/datasets/{id}` | dataset summary |
//! | POST | `/sessions` | create a session and run selection |
//! | GET | `/sessions/{id}` | session state, votes and jobs |
//! | GET | `/sessions/{id}/selection` | selected clips and candidate scores |
//! | POST | `/sessions/{id}/annotations` | record labels |
//! | POST | `/sessions/{id}/finetune` | start fine-tuning, `202` with the job |
//! | GET | `/jobs/{id}` | job status |
//! | GET | `/sessions/{id}/retrieval?query=&k=&space=` | top-K clips |
//! | GET | `/videos/{id}/schematic?dataset=` | positions for rendering |
//! | POST | `/sessions/{id}/clone` | copy a session for re-annotation |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gafl_core::{Annotation, FinetuneConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::error::{ServiceError, ServiceResult};
use super::store::{CreateSession, DatasetUpload, ServiceDefaults, Space, Store};
use crate::config::ServeConfig;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(serde_json::json!({ "error": self }))).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ServiceResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        let msg = format!("invalid JSON body: {e}");
        if e.is_data() {
            ServiceError::invalid("body", msg)
        } else {
            ServiceError::bad_request(msg)
        }
    })
}

/// Runs blocking store work off the async executor.
async fn blocking<T, F>(f: F) -> ServiceResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::internal(format!("worker panicked: {e}")))?
}

type AppState = State<Arc<Store>>;

async fn add_dataset(State(store): AppState, body: Bytes) -> ServiceResult<Response> {
    let upload: DatasetUpload = parse_body(&body)?;
    let info = blocking(move || store.add_dataset(upload)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn dataset_info(State(store): AppState, Path(id): Path<String>) -> ServiceResult<Response> {
    Ok(Json(store.dataset_info(&id)?).into_response())
}

async fn create_session(State(store): AppState, body: Bytes) -> ServiceResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    let session = blocking(move || store.create_session(req)).await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn session(State(store): AppState, Path(id): Path<String>) -> ServiceResult<Response> {
    Ok(Json(store.session(&id)?).into_response())
}

async fn selection(State(store): AppState, Path(id): Path<String>) -> ServiceResult<Response> {
    Ok(Json(store.selection(&id)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateBody {
    annotations: Vec<Annotation>,
}

async fn annotate(State(store): AppState, Path(id): Path<String>, body: Bytes) -> ServiceResult<Response> {
    let req: AnnotateBody = parse_body(&body)?;
    let session = blocking(move || store.annotate(&id, req.annotations)).await?;
    Ok(Json(session).into_response())
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FinetuneBody {
    config: Option<FinetuneConfig>,
}

async fn finetune(State(store): AppState, Path(id): Path<String>, body: Bytes) -> ServiceResult<Response> {
    let req: FinetuneBody = if body.iter().all(u8::is_ascii_whitespace) { FinetuneBody::default() } else { parse_body(&body)? };
    let ticket = store.start_finetune(&id, req.config)?;
    let view = store.job(&ticket.job_id)?;
    let worker = store.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = worker.run_job(&ticket) {
            log::error!("job {}: {}", ticket.job_id, e.message);
        }
    });
    Ok((StatusCode::ACCEPTED, Json(view)).into_response())
}

async fn job(State(store): AppState, Path(id): Path<String>) -> ServiceResult<Response> {
    Ok(Json(store.job(&id)?).into_response())
}

#[derive(Deserialize)]
struct RetrievalQuery {
    query: Option<String>,
    k: Option<String>,
    space: Option<String>,
}

async fn retrieval(
    State(store): AppState,
    Path(id): Path<String>,
    Query(q): Query<RetrievalQuery>,
) -> ServiceResult<Response> {
    let query = q.query.ok_or_else(|| ServiceError::invalid("query", "the `query` parameter is required"))?;
    let k = match q.k {
        None => 10,
        Some(k) => k.parse().map_err(|_| ServiceError::invalid("k", format!("k = {k:?} is not a non-negative integer")))?,
    };
    let space = match q.space.as_deref() {
        None | Some("pretrained") => Space::Pretrained,
        Some("finetuned") => Space::Finetuned,
        Some(other) => {
            return Err(ServiceError::invalid("space", format!("space {other:?} is not `pretrained` or `finetuned`")))
        }
    };
    let view = blocking(move || store.retrieval(&id, &query, k, space)).await?;
    Ok(Json(view).into_response())
}

#[derive(Deserialize)]
struct SchematicQuery {
    dataset: Option<String>,
}

async fn schematic(
    State(store): AppState,
    Path(id): Path<String>,
    Query(q): Query<SchematicQuery>,
) -> ServiceResult<Response> {
    Ok(Json(store.schematic(&id, q.dataset.as_deref())?).into_response())
}

async fn clone_session(State(store): AppState, Path(id): Path<String>) -> ServiceResult<Response> {
    let session = blocking(move || store.clone_session(&id)).await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn fallback() -> ServiceError {
    ServiceError::not_found("no such route")
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/datasets", post(add_dataset))
        .route("/datasets/{id}", get(dataset_info))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/selection", get(selection))
        .route("/sessions/{id}/annotations", post(annotate))
        .route("/sessions/{id}/finetune", post(finetune))
        .route("/sessions/{id}/retrieval", get(retrieval))
        .route("/sessions/{id}/clone", post(clone_session))
        .route("/jobs/{id}", get(job))
        .route("/videos/{id}/schematic", get(schematic))
        .fallback(fallback)
        .with_state(store)
}

/// Serves until ctrl-c.
pub async fn serve(cfg: &ServeConfig, defaults: ServiceDefaults) -> crate::Result<()> {
    let store = Store::open(&cfg.data_dir, defaults)
        .map_err(|e| crate::Error::Invalid(format!("cannot open {}: {}", cfg.data_dir.display(), e.message)))?;
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            crate::Error::Invalid(format!("{addr} is already in use; pick another port with --port"))
        } else {
            crate::Error::io(addr.clone(), e)
        }
    })?;
    let local = listener.local_addr().map_err(|e| crate::Error::io(addr.clone(), e))?;
    log::info!("serving {} on http://{local}", cfg.data_dir.display());
    eprintln!("listening on http://{local}");
    axum::serve(listener, router(Arc::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| crate::Error::io(addr, e))
}
