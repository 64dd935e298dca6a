use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use splitsr_cli::service::{router, AppState};
use splitsr_core::image_io::decode_png;
use splitsr_core::upscale::{Bicubic, Upscaler};
use splitsr_core::zoom::{Scheduler, ZoomEngine};
use splitsr_core::Tensor;
use tower::ServiceExt;

fn detailed(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let v = 128.0 + 90.0 * ((x as f32 * 0.9 + c as f32).sin() * (y as f32 * 0.7).cos());
        v.round()
    })
}

struct Fixture {
    app: Router,
    state: Arc<AppState>,
    ratings: std::path::PathBuf,
    _dir: tempfile::TempDir,
}

fn fixture(images: &[(&str, usize, usize)], workers: usize) -> Fixture {
    let mut scheduler = Scheduler::new();
    for &(id, h, w) in images {
        scheduler.add_image(id, detailed(h, w)).unwrap();
    }
    let model: Arc<dyn Upscaler> = Arc::new(Bicubic);
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("ratings.jsonl");
    let state = AppState::new(ZoomEngine::start(scheduler, Some(model), workers), ratings.clone());
    Fixture {
        app: router(state.clone()),
        state,
        ratings,
        _dir: dir,
    }
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn assert_api_error(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(!body["message"].as_str().unwrap().is_empty());
    assert!(body["request_id"].as_str().unwrap().starts_with("err-"));
}

#[tokio::test]
async fn lists_images() {
    let f = fixture(&[("b", 40, 300), ("a", 20, 30)], 1);
    let (status, body) = send_json(&f.app, "GET", "/images", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!([{"id": "a", "width": 30, "height": 20}, {"id": "b", "width": 300, "height": 40}])
    );
}

#[tokio::test]
async fn tile_dimensions_follow_the_scaled_grid() {
    let f = fixture(&[("img", 40, 300)], 1);
    for (x, zoom, w, h) in [(0, 1.5, 384, 60), (1, 1.5, 450 - 384, 60), (1, 3.0, 900 - 768, 120)] {
        let (status, png) = send(&f.app, "GET", &format!("/images/img/tile?x={x}&y=0&zoom={zoom}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let t = decode_png(&png, "tile".as_ref()).unwrap();
        assert_eq!((t.shape().w, t.shape().h), (w, h));
    }
}

#[tokio::test]
async fn repeated_tile_queries_are_byte_identical_and_methods_differ() {
    let f = fixture(&[("img", 48, 48)], 2);
    let uri = |m: &str| format!("/images/img/tile?x=0&y=0&zoom=3&method={m}");
    let (_, a) = send(&f.app, "GET", &uri("splitsr"), None).await;
    let (_, b) = send(&f.app, "GET", &uri("splitsr"), None).await;
    let (_, c) = send(&f.app, "GET", &uri("bilinear"), None).await;
    let (_, d) = send(&f.app, "GET", &uri("bilinear"), None).await;
    assert_eq!(a, b);
    assert_eq!(c, d);
    assert_ne!(a, c);
    let (_, default) = send(&f.app, "GET", "/images/img/tile?x=0&y=0&zoom=3", None).await;
    assert_eq!(default, a);
}

#[tokio::test]
async fn tile_errors() {
    let f = fixture(&[("img", 300, 300)], 1);
    let cases = [
        ("/images/nope/tile?x=0&y=0&zoom=2", StatusCode::NOT_FOUND, "not_found"),
        ("/images/img/tile?x=0&y=0&zoom=wide", StatusCode::BAD_REQUEST, "bad_request"),
        ("/images/img/tile?x=0&y=0&zoom=NaN", StatusCode::BAD_REQUEST, "bad_request"),
        ("/images/img/tile?x=0&y=0", StatusCode::BAD_REQUEST, "bad_request"),
        ("/images/img/tile?x=0&y=0&zoom=2&method=lanczos", StatusCode::BAD_REQUEST, "bad_request"),
        ("/images/img/tile?x=-1&y=0&zoom=2", StatusCode::BAD_REQUEST, "bad_request"),
        ("/images/img/tile?x=2&y=0&zoom=2", StatusCode::CONFLICT, "outside_grid"),
        ("/images/img/tile?x=0&y=2&zoom=2", StatusCode::CONFLICT, "outside_grid"),
        ("/nowhere", StatusCode::NOT_FOUND, "not_found"),
    ];
    for (uri, status, code) in cases {
        let (got, body) = send_json(&f.app, "GET", uri, None).await;
        assert_eq!(got, status, "{uri}");
        assert_api_error(&body, code);
    }
}

#[tokio::test]
async fn zoom_is_clamped_and_echoed() {
    let f = fixture(&[("img", 40, 40)], 1);
    let cases = [
        (9.0, 5.0, json!({"kind": "model_then_bilinear", "target": 5.0})),
        (0.25, 1.0, json!({"kind": "bilinear_only"})),
        (3.0, 3.0, json!({"kind": "model_then_downsample", "target": 3.0})),
    ];
    let mut ids = Vec::new();
    for (asked, echoed, strategy) in cases {
        let body = json!({"focus_x": 10.0, "focus_y": 10.0, "zoom": asked}).to_string();
        let (status, resp) = send_json(&f.app, "POST", "/images/img/zoom", Some(&body)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(resp["zoom"], echoed);
        assert_eq!(resp["strategy"], strategy);
        assert_eq!(resp["image"], "img");
        ids.push(resp["request_id"].as_u64().unwrap());
    }
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
}

#[tokio::test]
async fn zoom_errors() {
    let f = fixture(&[("img", 40, 40)], 1);
    let cases = [
        ("/images/nope/zoom", r#"{"focus_x":1,"focus_y":1,"zoom":2}"#, StatusCode::NOT_FOUND),
        ("/images/img/zoom", r#"{"focus_x":1,"focus_y":1,"zoom":"deep"}"#, StatusCode::BAD_REQUEST),
        ("/images/img/zoom", r#"{"focus_x":1,"focus_y":1,"zoom":null}"#, StatusCode::BAD_REQUEST),
        ("/images/img/zoom", r#"{"focus_x":1,"focus_y":1}"#, StatusCode::BAD_REQUEST),
        ("/images/img/zoom", r#"{"focus_x":1,"#, StatusCode::BAD_REQUEST),
    ];
    for (uri, body, status) in cases {
        let (got, resp) = send_json(&f.app, "POST", uri, Some(body)).await;
        assert_eq!(got, status, "{body}");
        assert_api_error(&resp, if status == StatusCode::NOT_FOUND { "not_found" } else { "bad_request" });
    }
}

/// Tile indices ordered by distance from centre to focus, row-major on ties.
fn distance_order(cols: usize, rows: usize, tile: f64, focus: (f64, f64)) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cols * rows).collect();
    let d = |i: usize| {
        let (cx, cy) = ((i % cols) as f64 * tile + tile / 2.0, (i / cols) as f64 * tile + tile / 2.0);
        (cx - focus.0).powi(2) + (cy - focus.1).powi(2)
    };
    idx.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
    idx
}

#[tokio::test]
async fn progress_reports_distance_ordered_completion() {
    let f = fixture(&[("grid", 1024, 1024)], 1);
    let focus = (900.0, 150.0);
    let body = json!({"focus_x": focus.0, "focus_y": focus.1, "zoom": 1.5}).to_string();
    let (_, resp) = send_json(&f.app, "POST", "/images/grid/zoom", Some(&body)).await;
    let rid = resp["request_id"].as_u64().unwrap();

    let state = f.state.clone();
    tokio::task::spawn_blocking(move || state.engine().wait(rid, Duration::from_secs(60)).unwrap())
        .await
        .unwrap();
    let (status, p) = send_json(&f.app, "GET", &format!("/requests/{rid}/progress"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((p["done"].as_u64(), p["total"].as_u64()), (Some(16), Some(16)));
    let tiles = p["tiles"].as_array().unwrap();
    assert!(tiles.iter().all(|t| t["latency_ms"].as_f64().unwrap() >= 0.0));
    let mut by_order: Vec<(u64, usize)> = tiles
        .iter()
        .map(|t| (t["order"].as_u64().unwrap(), t["index"].as_u64().unwrap() as usize))
        .collect();
    by_order.sort();
    let completed: Vec<usize> = by_order.into_iter().map(|(_, i)| i).collect();
    assert_eq!(completed, distance_order(4, 4, 256.0, focus));
}

#[tokio::test]
async fn progress_errors() {
    let f = fixture(&[("img", 40, 40)], 1);
    for uri in ["/requests/77/progress", "/requests/abc/progress"] {
        let (status, body) = send_json(&f.app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_api_error(&body, "not_found");
    }
}

#[tokio::test]
async fn ratings_are_appended() {
    let f = fixture(&[("img", 40, 40)], 1);
    for (method, score) in [("splitsr", 6), ("bilinear", 2)] {
        let body = json!({"image_id": "img", "method": method, "score": score}).to_string();
        let (status, resp) = send_json(&f.app, "POST", "/ratings", Some(&body)).await;
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!(resp["score"], score);
    }
    let log = std::fs::read_to_string(&f.ratings).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!((&lines[0]["method"], &lines[0]["score"]), (&json!("splitsr"), &json!(6)));
    assert_eq!((&lines[1]["method"], &lines[1]["score"]), (&json!("bilinear"), &json!(2)));
    assert_eq!(lines[1]["image_id"], "img");
}

#[tokio::test]
async fn rating_errors() {
    let f = fixture(&[("img", 40, 40)], 1);
    let cases = [
        (r#"{"image_id":"nope","method":"splitsr","score":3}"#, StatusCode::NOT_FOUND),
        (r#"{"image_id":"img","method":"splitsr","score":0}"#, StatusCode::BAD_REQUEST),
        (r#"{"image_id":"img","method":"splitsr","score":8}"#, StatusCode::BAD_REQUEST),
        (r#"{"image_id":"img","method":"splitsr","score":4.5}"#, StatusCode::BAD_REQUEST),
        (r#"{"image_id":"img","method":"nearest","score":4}"#, StatusCode::BAD_REQUEST),
        (r#"not json"#, StatusCode::BAD_REQUEST),
    ];
    for (body, status) in cases {
        let (got, resp) = send_json(&f.app, "POST", "/ratings", Some(body)).await;
        assert_eq!(got, status, "{body}");
        assert!(resp["request_id"].is_string());
    }
    assert!(!f.ratings.exists());
}
