#![cfg(feature = "cli")]

use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::DateTime;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mentorloop::grid::{Detection, GridShape};
use mentorloop::http::{router, AppState};
use mentorloop::mentorflow::MentoringSession;
use mentorloop::service::SessionStore;

struct Fixture {
    _dir: tempfile::TempDir,
    state: AppState,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::write(images.join("img-a.png"), b"\x89PNG fake").unwrap();
    let mut store = SessionStore::open(
        &dir.path().join("sessions.jsonl"),
        GridShape::new(4, 4, 2),
        Some(dir.path().join("partial")),
    )
    .unwrap();
    for (i, name) in ["img-a", "img-b"].iter().enumerate() {
        let at = DateTime::from_timestamp(1_700_000_000 + i as i64, 0).unwrap();
        let dets = vec![
            Detection::new(0, [(0, 0), (0, 1)].into_iter().collect(), 0.9),
            Detection::new(1, [(3, 3)].into_iter().collect(), 0.7),
        ];
        store.create_session(MentoringSession::new(name, dets, at)).unwrap();
    }
    Fixture {
        state: AppState {
            store: Arc::new(Mutex::new(store)),
            images_dir: images,
            cell_size: (8, 8),
        },
        _dir: dir,
    }
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, value)
}

#[tokio::test]
async fn next_session_is_oldest_open() {
    let f = fixture();
    let (status, body) = call(&f.state, "GET", "/sessions/next", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["id"], "s-img-a");
    assert_eq!(body["image_url"], "/images/img-a");
    assert_eq!(body["unanswered"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn full_session_round_trip() {
    let f = fixture();
    let (_, s) = call(&f.state, "GET", "/sessions/s-img-a", None).await;
    let ids: Vec<String> = s["detections"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["id"].as_str().unwrap().to_string())
        .collect();

    let (status, body) = call(&f.state, "POST", "/sessions/s-img-a/complete", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "precondition");
    assert!(body["message"].is_string());

    for (id, verdict) in ids.iter().zip(["confirmed", "infirmed"]) {
        let (status, _) = call(
            &f.state,
            "POST",
            "/sessions/s-img-a/feedback",
            Some(json!({ "detection_id": id, "verdict": verdict })),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, body) = call(&f.state, "POST", "/sessions/s-img-a/complete", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "completed");

    let (status, body) = call(&f.state, "POST", "/sessions/s-img-a/complete", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "conflict");

    let (status, _) = call(
        &f.state,
        "POST",
        "/sessions/s-img-a/feedback",
        Some(json!({ "detection_id": ids[0], "verdict": "infirmed" })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, progress) = call(&f.state, "GET", "/progress", None).await;
    assert_eq!(progress, json!({ "open": 1, "completed": 1, "total": 2 }));
    let (_, next) = call(&f.state, "GET", "/sessions/next", None).await;
    assert_eq!(next["id"], "s-img-b");
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let f = fixture();
    let (status, body) = call(&f.state, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
    let (status, _) = call(
        &f.state,
        "POST",
        "/sessions/s-img-a/feedback",
        Some(json!({ "detection_id": "missing", "verdict": "confirmed" })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.state, "POST", "/sessions/nope/complete", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.state, "GET", "/images/img-zzz", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.state, "GET", "/images/..%2Fsessions", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_feedback_is_rejected() {
    let f = fixture();
    let (status, body) = call(
        &f.state,
        "POST",
        "/sessions/s-img-a/feedback",
        Some(json!({ "detection_id": "x", "verdict": "maybe" })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_input");
}

#[tokio::test]
async fn images_are_served() {
    let f = fixture();
    let req = Request::builder().uri("/images/img-a").body(Body::empty()).unwrap();
    let resp = router(f.state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
}

#[tokio::test]
async fn empty_queue_has_no_content() {
    let f = fixture();
    for id in ["s-img-a", "s-img-b"] {
        let (_, s) = call(&f.state, "GET", &format!("/sessions/{id}"), None).await;
        for d in s["detections"].as_array().unwrap() {
            call(
                &f.state,
                "POST",
                &format!("/sessions/{id}/feedback"),
                Some(json!({ "detection_id": d["id"], "verdict": "infirmed" })),
            )
            .await;
        }
        call(&f.state, "POST", &format!("/sessions/{id}/complete"), None).await;
    }
    let (status, _) = call(&f.state, "GET", "/sessions/next", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
}
