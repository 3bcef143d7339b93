//! HTTP interface.
//!
//! ```text
//! GET  /api/queue?annotator=ID          {annotator, pending, done}
//! GET  /api/images/{id}                 {image_id, image_url, candidates, meta}
//! POST /api/images/{id}/selection       {candidate_index, annotator_id, elapsed_ms}
//! GET  /api/export                      tar of the current export
//! GET  /files/images/{id}               image PNG
//! GET  /files/candidates/{id}/{m}       candidate mask PNG
//! ```

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde_json::{json, Value};

use crate::dataset::{Dataset, DatasetError};
use crate::export;
use crate::selection_log::{latest_per_annotator, SelectionLog, SelectionRecord};

pub struct AppState {
    pub dataset: Dataset,
    /// Single writer for the log; also guards the in-memory history.
    pub log: Mutex<SelectionLog>,
}

pub type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/images/{id}", get(image_info))
        .route("/api/images/{id}/selection", post(select))
        .route("/api/export", get(export_tar))
        .route("/files/images/{id}", get(image_file))
        .route("/files/candidates/{id}/{index}", get(candidate_file))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        let status = match e {
            DatasetError::UnknownImage(_) | DatasetError::CandidatesMissing(_) => StatusCode::NOT_FOUND,
            DatasetError::IndexOutOfRange { .. } => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

async fn queue(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Result<Json<Value>, ApiError> {
    let annotator = q
        .get("annotator")
        .filter(|a| !a.is_empty())
        .ok_or_else(|| bad_request("missing annotator"))?;
    let log = s.log.lock().map_err(internal)?;
    let latest = latest_per_annotator(log.records());
    let (done, pending): (Vec<&str>, Vec<&str>) = s
        .dataset
        .manifest
        .ids()
        .partition(|id| latest.contains_key(&(id.to_string(), annotator.clone())));
    Ok(Json(json!({ "annotator": annotator, "pending": pending, "done": done })))
}

async fn image_info(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let meta = s.dataset.candidate_meta(&id)?;
    let candidates: Vec<String> = (0..meta.num_candidates())
        .map(|m| format!("/files/candidates/{id}/{m}"))
        .collect();
    Ok(Json(json!({
        "image_id": id,
        "image_url": format!("/files/images/{id}"),
        "candidates": candidates,
        "meta": meta,
    })))
}

/// Parses the body by hand so every malformed request is a 400.
fn parse_selection(body: &[u8]) -> Result<(i64, String, u64), ApiError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| bad_request("body must be a JSON object"))?;
    let index = obj
        .get("candidate_index")
        .and_then(Value::as_i64)
        .ok_or_else(|| bad_request("candidate_index must be an integer"))?;
    let annotator = obj
        .get("annotator_id")
        .and_then(Value::as_str)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| bad_request("annotator_id must be a non-empty string"))?;
    let elapsed = obj
        .get("elapsed_ms")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad_request("elapsed_ms must be a non-negative integer"))?;
    if let Some(k) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "candidate_index" | "annotator_id" | "elapsed_ms"))
    {
        return Err(bad_request(format!("unknown field {k:?}")));
    }
    Ok((index, annotator.to_string(), elapsed))
}

async fn select(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<SelectionRecord>, ApiError> {
    s.dataset.entry(&id)?;
    let (index, annotator_id, elapsed_ms) = parse_selection(&body)?;
    s.dataset.check_index(&id, index)?;
    let rec = SelectionRecord {
        image_id: id,
        candidate_index: index,
        annotator_id,
        elapsed_ms,
        timestamp: Utc::now(),
    };
    s.log.lock().map_err(internal)?.append(rec.clone()).map_err(internal)?;
    Ok(Json(rec))
}

async fn export_tar(State(s): State<Shared>) -> Result<Response, ApiError> {
    let records = s.log.lock().map_err(internal)?.records().to_vec();
    let tar = export::build(&s.dataset, &records)
        .and_then(|e| e.to_tar())
        .map_err(|e| internal(format!("{e:#}")))?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"export.tar\""),
        ],
        tar,
    )
        .into_response())
}

async fn png(path: std::path::PathBuf) -> Result<Response, ApiError> {
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("{} not found", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn image_file(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = s.dataset.entry(&id)?.image_path.clone();
    png(path).await
}

async fn candidate_file(State(s): State<Shared>, Path((id, index)): Path<(String, String)>) -> Result<Response, ApiError> {
    let index: i64 = index.parse().map_err(|_| bad_request("candidate index must be an integer"))?;
    s.dataset.check_index(&id, index)?;
    if index < 0 {
        return Err(bad_request("candidate index must be >= 0"));
    }
    png(s.dataset.candidate_path(&id, index as usize)).await
}
