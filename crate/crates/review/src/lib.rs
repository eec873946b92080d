//! HTTP review service: lists assessed patient-trial pairs, serves
//! assessments and page images, records reviewer feedback and exports the
//! labeled dataset.
//!
//! Every request needs `Authorization: Bearer <token>`. Feedback requests
//! also need an `X-Actor-Id` header; the server stamps the time.

pub mod state;

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde_json::json;
use trialmatch_core::model::FeedbackPayload;
use trialmatch_core::workspace::Workspace;

pub use state::{
    Appended, AssessmentView, ClassificationBody, CriterionReviewBody, ExportBundle, PageRef, PairAssessments,
    PairSummary, ReviewError, ReviewState, Submission,
};

pub const ACTOR_HEADER: &str = "x-actor-id";

#[derive(Clone)]
pub struct AppState {
    state: Arc<RwLock<ReviewState>>,
    token: Arc<str>,
}

impl AppState {
    pub fn new(state: ReviewState, token: impl Into<Arc<str>>) -> Self {
        AppState { state: Arc::new(RwLock::new(state)), token: token.into() }
    }

    pub fn load(workspace: Workspace, token: impl Into<Arc<str>>) -> Result<Self, ReviewError> {
        Ok(AppState::new(ReviewState::load(workspace)?, token))
    }
}

pub enum ApiError {
    Unauthorized,
    BadRequest(String),
    Review(ReviewError),
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        ApiError::Review(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "missing or invalid bearer token".to_string()),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Review(e) => {
                let status = match &e {
                    ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
                    ReviewError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
                    ReviewError::Unredacted(_) => StatusCode::FORBIDDEN,
                    ReviewError::Workspace(_) | ReviewError::Append(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, e.to_string())
            }
        };
        (status, Json(json!({ "error": message }))).into_response()
    }
}

async fn require_token(State(app): State<AppState>, request: Request, next: Next) -> Result<Response, ApiError> {
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(&*app.token) {
        return Err(ApiError::Unauthorized);
    }
    Ok(next.run(request).await)
}

fn actor(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get(ACTOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .ok_or_else(|| ApiError::BadRequest(format!("missing {ACTOR_HEADER} header")))
}

fn read(app: &AppState) -> std::sync::RwLockReadGuard<'_, ReviewState> {
    app.state.read().expect("review state poisoned")
}

async fn list_pairs(State(app): State<AppState>) -> Json<Vec<PairSummary>> {
    Json(read(&app).list_pairs())
}

async fn pair_assessments(
    State(app): State<AppState>,
    Path((patient_id, trial_id)): Path<(String, String)>,
) -> Result<Json<PairAssessments>, ApiError> {
    Ok(Json(read(&app).pair_assessments(&patient_id, &trial_id)?))
}

async fn page_image(State(app): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let page_id = file
        .strip_suffix(".png")
        .ok_or_else(|| ApiError::Review(ReviewError::NotFound(format!("{file} not found"))))?;
    let bytes = read(&app).page_png(page_id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn append(app: &AppState, submission: Submission) -> Result<Response, ApiError> {
    let (event, appended) = app.state.write().expect("review state poisoned").append(submission, Utc::now())?;
    let status = match appended {
        Appended::Stored => StatusCode::CREATED,
        Appended::Duplicate => StatusCode::OK,
    };
    Ok((status, Json(event)).into_response())
}

async fn post_feedback(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<CriterionReviewBody>,
) -> Result<Response, ApiError> {
    let submission = Submission {
        event_id: body.event_id,
        actor_id: actor(&headers)?,
        patient_id: body.patient_id,
        trial_id: body.trial_id,
        payload: FeedbackPayload::CriterionReview {
            criterion_id: body.criterion_id,
            human_verdict: body.human_verdict,
        },
    };
    append(&app, submission)
}

async fn post_classification(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<ClassificationBody>,
) -> Result<Response, ApiError> {
    let submission = Submission {
        event_id: body.event_id,
        actor_id: actor(&headers)?,
        patient_id: body.patient_id,
        trial_id: body.trial_id,
        payload: FeedbackPayload::PatientClassification { label: body.label },
    };
    append(&app, submission)
}

async fn export(State(app): State<AppState>) -> Json<ExportBundle> {
    Json(read(&app).export())
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/pairs", get(list_pairs))
        .route("/pairs/{patient_id}/{trial_id}/assessments", get(pair_assessments))
        .route("/pages/{file}", get(page_image))
        .route("/feedback", post(post_feedback))
        .route("/classification", post(post_classification))
        .route("/export", get(export))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "review service listening");
    axum::serve(listener, router(app)).await
}
