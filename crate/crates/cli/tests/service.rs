use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use anomaly_vqa::backbone::{BackboneConfig, BackboneKind};
use anomaly_vqa::data::generate_synthetic_dataset;
use anomaly_vqa::decoder::DecoderConfig;
use anomaly_vqa::fusion::FusionStrategy;
use anomaly_vqa::model::{DecodeOptions, ModelConfig, VqaModel};
use anomaly_vqa::training::corpus_tokenizer;
use anomaly_vqa_cli::service::{router, AskResponse, CaseDetail, CaseRow, ServiceState, HISTORY_CAP};

fn app(with_model: bool) -> Router {
    let data = generate_synthetic_dataset(4, (8, 8), &["healthy", "tumor", "edema", "resection"], 1).unwrap();
    let config = ModelConfig {
        image_size: (8, 8),
        backbone: BackboneConfig {
            kind: BackboneKind::PatchTransformer,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            pretrained_weights: None,
            freeze: false,
        },
        fusion: FusionStrategy::Concat,
        decoder: DecoderConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            max_len: 6,
            max_prefix: 48,
            vocab_size: 0,
        },
        ..ModelConfig::default()
    };
    let model = with_model.then(|| Arc::new(VqaModel::new(&config, corpus_tokenizer(&data)).unwrap()));
    let options = DecodeOptions {
        width: 3,
        max_len: 6,
        ..DecodeOptions::default()
    };
    router(ServiceState::new(model, data, options))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn ask(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/ask")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

#[tokio::test]
async fn lists_every_case() {
    let app = app(true);
    let (status, body) = get(&app, "/cases").await;
    assert_eq!(status, StatusCode::OK);
    let rows: Vec<CaseRow> = serde_json::from_value(body).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r.category == "healthy"));
}

#[tokio::test]
async fn case_detail_carries_three_equal_pngs_and_presets() {
    let app = app(true);
    let (_, rows) = get(&app, "/cases").await;
    let rows: Vec<CaseRow> = serde_json::from_value(rows).unwrap();
    let healthy = rows.iter().find(|r| r.category == "healthy").unwrap();
    let (status, body) = get(&app, &format!("/cases/{}", healthy.case_id)).await;
    assert_eq!(status, StatusCode::OK);
    let detail: CaseDetail = serde_json::from_value(body).unwrap();
    let pngs = [&detail.images.original, &detail.images.anomaly, &detail.images.reconstruction];
    for png in pngs {
        let bytes = STANDARD.decode(png).unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
        // IHDR width and height, big endian
        let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
        let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
        assert_eq!((h as usize, w as usize), (detail.height, detail.width));
    }
    assert!(detail.presets.iter().any(|p| p == "Is the case normal?"));
}

#[tokio::test]
async fn unknown_case_is_404() {
    let app = app(true);
    let (status, body) = get(&app, "/cases/missing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UnknownCase");
    let (status, body) = ask(&app, json!({"case_id": "missing", "question": "Is the case normal?"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UnknownCase");
}

async fn first_case(app: &Router) -> String {
    let (_, rows) = get(app, "/cases").await;
    rows[0]["case_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn empty_question_is_400() {
    let app = app(true);
    let case = first_case(&app).await;
    let (status, body) = ask(&app, json!({"case_id": case, "question": "  "})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "EmptyQuestion");
}

#[tokio::test]
async fn missing_model_is_503() {
    let app = app(false);
    let case = first_case(&app).await;
    let (status, body) = ask(&app, json!({"case_id": case, "question": "Is the case normal?"})).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "ModelNotLoaded");
    // browsing still works
    assert_eq!(get(&app, "/cases").await.0, StatusCode::OK);
}

#[tokio::test]
async fn repeated_questions_get_identical_answers() {
    let app = app(true);
    let case = first_case(&app).await;
    let body = json!({"case_id": case, "question": "Is the case normal?", "session_id": "a"});
    let (_, first) = ask(&app, body.clone()).await;
    let (_, second) = ask(&app, body).await;
    assert_eq!(first["answer"], second["answer"]);
    assert_eq!(first["log_score"], second["log_score"]);
}

#[tokio::test]
async fn session_history_grows_per_session() {
    let app = app(true);
    let case = first_case(&app).await;
    let questions = [
        "Is the case normal?",
        "Please describe the condition of the brain.",
        "Can you comment on the severity of the pathology?",
    ];
    let mut last = None;
    for q in questions {
        let (status, body) = ask(&app, json!({"case_id": case, "question": q, "session_id": "s1"})).await;
        assert_eq!(status, StatusCode::OK);
        last = Some(serde_json::from_value::<AskResponse>(body).unwrap());
    }
    let last = last.unwrap();
    assert_eq!(last.history.len(), 3);
    let asked: Vec<&str> = last.history.iter().map(|t| t.question.as_str()).collect();
    assert_eq!(asked, questions);
    assert_eq!(last.history[2].answer, last.answer);
    let (_, other) = ask(&app, json!({"case_id": case, "question": "Is the case normal?", "session_id": "s2"})).await;
    assert_eq!(other["history"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn history_is_capped() {
    let app = app(true);
    let case = first_case(&app).await;
    let mut len = 0;
    for i in 0..HISTORY_CAP + 3 {
        let q = if i % 2 == 0 { "Is the case normal?" } else { "Please describe the condition of the brain." };
        let (_, body) = ask(&app, json!({"case_id": case, "question": q, "session_id": "long"})).await;
        len = body["history"].as_array().unwrap().len();
    }
    assert_eq!(len, HISTORY_CAP);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_asks_match_sequential_ones() {
    let app = app(true);
    let (_, rows) = get(&app, "/cases").await;
    let cases: Vec<String> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["case_id"].as_str().unwrap().to_string())
        .collect();
    let requests: Vec<Value> = cases
        .iter()
        .flat_map(|c| {
            ["Is the case normal?", "Please describe the condition of the brain."]
                .map(|q| json!({"case_id": c, "question": q, "session_id": format!("{c}-{q}")}))
        })
        .collect();
    let mut sequential = Vec::new();
    for r in &requests {
        sequential.push(ask(&app, r.clone()).await.1["answer"].clone());
    }
    let handles: Vec<_> = requests
        .iter()
        .cloned()
        .map(|r| {
            let app = app.clone();
            tokio::spawn(async move { ask(&app, r).await.1["answer"].clone() })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(sequential) {
        assert_eq!(h.await.unwrap(), want);
    }
}
