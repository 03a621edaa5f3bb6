use std::io::Cursor;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use image::RgbImage;
use nullface_core::engine::Engine;
use nullface_core::masks::{encode_mask_png, RegionMask};
use nullface_core::pipeline::StackSpec;
use nullface_core::runs::{execute, RunContext, RunManifest};
use nullface_core::toyset::{decode_rgb, toy_face};
use nullface_service::{router, AppState, ServiceConfig, API_VERSION, API_VERSION_HEADER, DEFAULT_MAX_UPLOAD_BYTES};
use serde_json::{json, Value};
use tower::ServiceExt;

const STEPS: usize = 20;

struct App {
    router: Router,
    state: AppState,
    _dir: tempfile::TempDir,
}

fn app_with_cap(cap: usize) -> App {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(ServiceConfig {
        run_dir: dir.path().to_path_buf(),
        max_upload_bytes: cap,
        plugin_path: None,
    })
    .unwrap();
    App {
        router: router(state.clone()),
        state,
        _dir: dir,
    }
}

fn app() -> App {
    app_with_cap(DEFAULT_MAX_UPLOAD_BYTES)
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }
}

async fn send(app: &App, req: Request<Body>) -> Reply {
    let res = app.router.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn get(app: &App, uri: &str) -> Reply {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &App, uri: &str, body: Value) -> Reply {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

async fn upload_bytes(app: &App, bytes: Vec<u8>) -> Reply {
    let req = Request::post("/api/images")
        .header(header::CONTENT_TYPE, "image/png")
        .body(Body::from(bytes))
        .unwrap();
    send(app, req).await
}

async fn upload(app: &App, img: &RgbImage) -> String {
    let r = upload_bytes(app, png(img)).await;
    assert_eq!(r.status, StatusCode::CREATED);
    r.json()["image_id"].as_str().unwrap().to_string()
}

async fn wait_job(app: &App, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let r = get(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let job = r.json();
        match job["state"].as_str().unwrap() {
            "done" | "failed" => return job,
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(60), "job {id} did not finish");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

async fn inverted(app: &App, img: &RgbImage) -> (String, String) {
    let image_id = upload(app, img).await;
    let r = post_json(app, "/api/invert", json!({ "image_id": image_id, "steps": STEPS })).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let job = wait_job(app, r.json()["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    (image_id, job["result"]["inversion_id"].as_str().unwrap().to_string())
}

async fn anonymize(app: &App, body: Value) -> Value {
    let r = post_json(app, "/api/anonymize", body).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
    let job = wait_job(app, r.json()["id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    job
}

#[tokio::test(flavor = "multi_thread")]
async fn upload_then_segmentation() {
    let app = app();
    let id = upload(&app, &toy_face(0, 0, 64)).await;
    let r = get(&app, &format!("/api/images/{id}/segmentation")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers.get(API_VERSION_HEADER).unwrap(), API_VERSION);
    let seg = r.json();
    assert_eq!(seg["width"], 64);
    assert_eq!(seg["height"], 64);
    let labels = seg["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 64 * 64);
    assert!(labels.iter().all(|l| l.as_u64().unwrap() < 9));
    let regions = seg["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 9);
    for (i, r) in regions.iter().enumerate() {
        assert_eq!(r["code"], i);
    }
    // The toy parser finds a face.
    assert!(labels.iter().any(|l| l.as_u64().unwrap() != 0));
}

#[tokio::test(flavor = "multi_thread")]
async fn identical_uploads_get_distinct_ids() {
    let app = app();
    let img = toy_face(0, 1, 64);
    let a = upload(&app, &img).await;
    let b = upload(&app, &img).await;
    assert_ne!(a, b);
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_uploads_are_rejected() {
    let app = app_with_cap(4096);
    let r = upload_bytes(&app, b"\x89PNG\r\n\x1a\nnot really".to_vec()).await;
    assert_eq!(r.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert!(r.json()["error"]["message"].is_string());
    assert_eq!(r.headers.get(API_VERSION_HEADER).unwrap(), API_VERSION);

    let r = upload_bytes(&app, vec![0u8; 5000]).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);

    let req = Request::post("/api/images")
        .header(header::CONTENT_TYPE, "text/plain")
        .body(Body::from("hello"))
        .unwrap();
    assert_eq!(send(&app, req).await.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test(flavor = "multi_thread")]
async fn invert_job_lifecycle_and_single_flight() {
    let app = app();
    let image_id = upload(&app, &toy_face(0, 2, 64)).await;
    let body = json!({ "image_id": image_id, "steps": STEPS, "seed": 3 });
    let replies = futures_join(&app, body.clone(), 4).await;
    let ids: Vec<_> = replies.iter().map(|j| j["id"].as_str().unwrap().to_string()).collect();
    assert!(ids.iter().all(|i| *i == ids[0]), "{ids:?}");
    assert_eq!(replies[0]["kind"], "invert");
    assert_eq!(replies[0]["config"]["steps"], STEPS);
    assert_eq!(replies[0]["config"]["seed"], 3);

    let job = wait_job(&app, &ids[0]).await;
    assert_eq!(job["state"], "done");
    assert!(job["started_ms"].as_u64().unwrap() >= job["created_ms"].as_u64().unwrap());
    assert!(job["finished_ms"].as_u64().unwrap() >= job["started_ms"].as_u64().unwrap());
    assert_eq!(job["result"]["manifest"]["command"], "invert");
    assert_eq!(job["result"]["manifest"]["params"]["seed"], "3");
    assert_eq!(app.state.inversions_computed(), 1);

    let r = get(&app, job["result"]["result_url"].as_str().unwrap()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers.get(header::CONTENT_TYPE).unwrap(), "application/json");
    assert_eq!(r.json()["command"], "invert");

    // Asking again after completion joins the finished job.
    let again = post_json(&app, "/api/invert", body).await.json();
    assert_eq!(again["id"], ids[0]);
    assert_eq!(app.state.inversions_computed(), 1);
}

async fn futures_join(app: &App, body: Value, n: usize) -> Vec<Value> {
    let mut handles = Vec::new();
    for _ in 0..n {
        let router = app.router.clone();
        let body = body.clone();
        handles.push(tokio::spawn(async move {
            let req = Request::post("/api/invert")
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(body.to_string()))
                .unwrap();
            let res = router.oneshot(req).await.unwrap();
            assert_eq!(res.status(), StatusCode::ACCEPTED);
            let bytes = res.into_body().collect().await.unwrap().to_bytes();
            serde_json::from_slice::<Value>(&bytes).unwrap()
        }));
    }
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn degenerate_settings_reconstruct() {
    let app = app();
    let img = toy_face(0, 3, 64);
    let (_, inv) = inverted(&app, &img).await;

    let stack = StackSpec::default().build(64, 64).unwrap();
    let recon = stack.codec.decode(&stack.codec.encode(&img).unwrap()).unwrap();

    let job = anonymize(
        &app,
        json!({ "inversion_id": inv, "t_skip": STEPS, "mask_start": 0, "lambda_cfg": 10.0 }),
    )
    .await;
    let r = get(&app, job["result"]["result_url"].as_str().unwrap()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers.get(header::CONTENT_TYPE).unwrap(), "image/png");
    let out = decode_rgb(&r.body).unwrap();
    let worst = out
        .as_raw()
        .iter()
        .zip(recon.as_raw())
        .map(|(a, b)| (*a as i32 - *b as i32).abs())
        .max()
        .unwrap();
    assert!(worst <= 1, "max pixel difference {worst}");

    let job = anonymize(
        &app,
        json!({ "inversion_id": inv, "t_skip": 5, "mask_start": 5, "lambda_cfg": 0.0 }),
    )
    .await;
    let d = job["result"]["identity_distance"].as_f64().unwrap();
    assert!(d < 1e-4, "identity distance {d}");
    assert_eq!(app.state.inversions_computed(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn presets_share_one_inversion() {
    let app = app();
    let (_, inv) = inverted(&app, &toy_face(0, 4, 64)).await;
    let base = json!({ "inversion_id": inv, "t_skip": 10, "mask_start": 10 });
    let mut outputs = Vec::new();
    let mut jobs = Vec::new();
    for preset in ["keep-eyes", "keep-mouth", "whole-face"] {
        let mut body = base.clone();
        body["mask"] = json!(preset);
        let job = anonymize(&app, body).await;
        assert_eq!(job["config"]["mask"], preset);
        assert_eq!(job["result"]["cached"], false);
        assert!(job["result"]["identity_distance"].as_f64().unwrap() > 0.0);
        outputs.push(get(&app, job["result"]["result_url"].as_str().unwrap()).await.body);
        jobs.push(job);
    }
    assert_ne!(outputs[0], outputs[1]);
    assert_eq!(app.state.inversions_computed(), 1);
    for j in &jobs[1..] {
        assert_eq!(j["result"]["manifest"]["fingerprints"], jobs[0]["result"]["manifest"]["fingerprints"]);
        assert_eq!(j["result"]["manifest"]["params"]["record"], jobs[0]["result"]["manifest"]["params"]["record"]);
    }

    // Each result replays from its manifest to identical bytes.
    let engine = Engine::new(1).unwrap();
    let ctx = RunContext {
        plugin_path: None,
        engine: &engine,
        cancel: None,
    };
    let replay_dir = tempfile::tempdir().unwrap();
    for (i, j) in jobs.iter().enumerate() {
        let manifest = RunManifest::parse(&j["result"]["manifest"].to_string()).unwrap();
        let mut params = manifest.params.clone();
        let out = replay_dir.path().join(format!("{i}.png"));
        params.insert("out".into(), out.display().to_string());
        let replayed = execute(&manifest.command, &params, &ctx).unwrap();
        assert_eq!(replayed.results, manifest.results);
        assert_eq!(std::fs::read(&out).unwrap(), outputs[i]);
    }

    // The same request again is served from the result store.
    let mut body = base.clone();
    body["mask"] = json!("keep-eyes");
    let job = anonymize(&app, body).await;
    assert_eq!(job["result"]["cached"], true);
    assert_eq!(get(&app, job["result"]["result_url"].as_str().unwrap()).await.body, outputs[0]);
}

#[tokio::test(flavor = "multi_thread")]
async fn anonymize_waits_for_a_running_inversion() {
    let app = app();
    let image_id = upload(&app, &toy_face(0, 5, 64)).await;
    let r = post_json(&app, "/api/invert", json!({ "image_id": image_id, "steps": STEPS })).await;
    let inv = r.json()["config"]["inversion_id"].as_str().unwrap().to_string();
    // No wait: the anonymize job joins the inversion in flight.
    let job = anonymize(&app, json!({ "inversion_id": inv, "t_skip": 10, "mask_start": 10 })).await;
    assert_eq!(job["result"]["inversion_id"], inv);
    assert_eq!(app.state.inversions_computed(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn inline_masks() {
    let app = app();
    let (_, inv) = inverted(&app, &toy_face(0, 6, 64)).await;

    let mut values = vec![0.0f32; 32 * 32];
    for v in values.iter_mut().take(32 * 16) {
        *v = 1.0;
    }
    let latent = RegionMask::from_values(32, 32, values).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_mask_png(&latent).unwrap());
    let job = anonymize(
        &app,
        json!({ "inversion_id": inv, "t_skip": 10, "mask_start": 10, "mask": { "png_base64": b64 } }),
    )
    .await;
    assert_eq!(job["config"]["mask"], "inline");
    let mask_param = job["result"]["manifest"]["params"]["mask"].as_str().unwrap();
    assert!(std::path::Path::new(mask_param).exists());

    // Image-resolution masks are accepted and downsampled.
    let full = RegionMask::filled(64, 64, 1.0).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_mask_png(&full).unwrap());
    anonymize(
        &app,
        json!({ "inversion_id": inv, "t_skip": 10, "mask_start": 10, "mask": { "png_base64": b64 } }),
    )
    .await;

    let odd = RegionMask::filled(20, 20, 1.0).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_mask_png(&odd).unwrap());
    let r = post_json(&app, "/api/anonymize", json!({ "inversion_id": inv, "mask": { "png_base64": b64 } })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = post_json(&app, "/api/anonymize", json!({ "inversion_id": inv, "mask": { "png_base64": "@@@" } })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn error_statuses() {
    let app = app();
    let r = post_json(&app, "/api/invert", json!({ "image_id": "img-nope" })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.headers.get(API_VERSION_HEADER).unwrap(), API_VERSION);
    assert_eq!(get(&app, "/api/images/img-nope/segmentation").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/jobs/job-nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/jobs/job-nope/result").await.status, StatusCode::NOT_FOUND);
    let r = post_json(&app, "/api/anonymize", json!({ "inversion_id": "inv-nope" })).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let (image_id, inv) = inverted(&app, &toy_face(0, 7, 64)).await;
    for body in [
        json!({ "image_id": image_id, "steps": 0 }),
        json!({ "image_id": image_id, "steps": 5000 }),
        json!({ "image_id": image_id, "backend": "no-such-backend" }),
    ] {
        let r = post_json(&app, "/api/invert", body.clone()).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    let r = post_json(&app, "/api/invert", json!({ "image_id": image_id, "colour": "red" })).await;
    assert!(r.status.is_client_error());

    for body in [
        json!({ "inversion_id": inv, "t_skip": STEPS + 1 }),
        json!({ "inversion_id": inv, "mask_start": STEPS + 1 }),
        json!({ "inversion_id": inv, "lambda_id": -1.0 }),
        json!({ "inversion_id": inv, "lambda_img": -0.5 }),
        json!({ "inversion_id": inv, "mask": "keep-ears" }),
    ] {
        let r = post_json(&app, "/api/anonymize", body.clone()).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    let r = post_json(&app, "/api/anonymize", json!({ "inversion_id": inv, "backend": "toy-attention" })).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}
