//! HTTP inference service: case browsing and question answering over one
//! loaded checkpoint.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use anomaly_vqa::data::{CaseInfo, Dataset, QuestionTemplate, Source};
use anomaly_vqa::model::{DecodeOptions, VqaModel};

/// Turns kept per session; older turns are dropped first.
pub const HISTORY_CAP: usize = 100;
pub const DEFAULT_SESSION: &str = "default";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

pub struct ServiceState {
    model: Option<Arc<VqaModel>>,
    data: Dataset,
    cases: Vec<CaseInfo>,
    options: DecodeOptions,
    sessions: Mutex<HashMap<String, VecDeque<Turn>>>,
}

impl ServiceState {
    pub fn new(model: Option<Arc<VqaModel>>, data: Dataset, options: DecodeOptions) -> Arc<Self> {
        let cases = data.cases();
        Arc::new(Self {
            model,
            data,
            cases,
            options,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    /// Appends a turn and returns the session's history.
    fn record(&self, session: &str, turn: Turn) -> Vec<Turn> {
        let mut sessions = self.sessions.lock().expect("session lock");
        let history = sessions.entry(session.to_string()).or_default();
        history.push_back(turn);
        while history.len() > HISTORY_CAP {
            history.pop_front();
        }
        history.iter().cloned().collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

struct Failure(StatusCode, &'static str, String);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let body = ApiError {
            error: self.1.to_string(),
            message: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

impl From<anomaly_vqa::Error> for Failure {
    fn from(e: anomaly_vqa::Error) -> Self {
        let status = match e {
            anomaly_vqa::Error::UnknownCase(_) => StatusCode::NOT_FOUND,
            anomaly_vqa::Error::PrefixTooLong { .. } | anomaly_vqa::Error::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Failure(status, e.code(), e.to_string())
    }
}

fn unknown_case(id: &str) -> Failure {
    Failure(StatusCode::NOT_FOUND, "UnknownCase", format!("unknown case: {id}"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub category: String,
    pub known: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseImages {
    pub original: String,
    pub anomaly: String,
    pub reconstruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseDetail {
    pub case_id: String,
    pub patient_id: String,
    pub category: String,
    pub known: bool,
    pub height: usize,
    pub width: usize,
    /// Base64-encoded PNGs.
    pub images: CaseImages,
    pub presets: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AskRequest {
    pub case_id: String,
    pub question: String,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    pub log_score: f64,
    pub latency_ms: f64,
    pub session_id: String,
    pub history: Vec<Turn>,
}

pub fn presets() -> Vec<String> {
    QuestionTemplate::ALL.iter().map(|t| t.question().to_string()).collect()
}

async fn list_cases(State(state): State<Arc<ServiceState>>) -> Json<Vec<CaseRow>> {
    Json(
        state
            .cases
            .iter()
            .map(|c| CaseRow {
                case_id: c.case_id.clone(),
                category: c.category.clone(),
                known: c.known,
            })
            .collect(),
    )
}

async fn case_detail(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Json<CaseDetail>, Failure> {
    let info = state.cases.iter().find(|c| c.case_id == id).ok_or_else(|| unknown_case(&id))?;
    let triple = state.data.triple(&id)?;
    let png = |s: Source| -> Result<String, Failure> { Ok(STANDARD.encode(triple.image(s).to_png_bytes()?)) };
    let (height, width, _) = triple.dims();
    Ok(Json(CaseDetail {
        case_id: info.case_id.clone(),
        patient_id: info.patient_id.clone(),
        category: info.category.clone(),
        known: info.known,
        height,
        width,
        images: CaseImages {
            original: png(Source::Original)?,
            anomaly: png(Source::Anomaly)?,
            reconstruction: png(Source::Reconstruction)?,
        },
        presets: presets(),
    }))
}

async fn ask(State(state): State<Arc<ServiceState>>, Json(req): Json<AskRequest>) -> Result<Json<AskResponse>, Failure> {
    let question = req.question.trim().to_string();
    if question.is_empty() {
        return Err(Failure(StatusCode::BAD_REQUEST, "EmptyQuestion", "question is empty".into()));
    }
    if state.data.triple(&req.case_id).is_err() {
        return Err(unknown_case(&req.case_id));
    }
    let Some(model) = state.model.clone() else {
        return Err(Failure(
            StatusCode::SERVICE_UNAVAILABLE,
            "ModelNotLoaded",
            "no checkpoint is loaded".into(),
        ));
    };
    let start = Instant::now();
    let worker_state = Arc::clone(&state);
    let (case_id, q) = (req.case_id.clone(), question.clone());
    let generation = tokio::task::spawn_blocking(move || {
        let triple = worker_state.data.triple(&case_id)?;
        model.generate(triple, &q, &worker_state.options)
    })
    .await
    .map_err(|e| Failure(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let session_id = req.session_id.unwrap_or_else(|| DEFAULT_SESSION.to_string());
    let history = state.record(
        &session_id,
        Turn {
            question,
            answer: generation.answer.clone(),
        },
    );
    log::info!("ask {} [{session_id}] in {latency_ms:.1} ms", req.case_id);
    Ok(Json(AskResponse {
        answer: generation.answer,
        log_score: generation.log_score,
        latency_ms,
        session_id,
        history,
    }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(case_detail))
        .route("/ask", post(ask))
        .with_state(state)
}
