//! HTTP contract, exercised in-process against a small sealed run.

use std::path::Path;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use ptprobe::harness::{capture, PlantedConfig, PlantedModel, ProbePoint, View};
use ptprobe::scene::{generate_scene_pair, SceneConfig};
use ptprobe::store::{
    decode_ptms, write_json, write_manifest, write_planted_model, write_ptms, write_scene_pair, write_trace, Manifest, PtmsFrame,
    RunLayout,
};
use ptprobe_server::{router, ServerOptions, PTMS_MIME};

const PAIRS: [u64; 2] = [11, 12];

fn build_run(root: &Path, sealed: bool) -> Vec<String> {
    let layout = RunLayout::new(root);
    let model = PlantedModel::new(PlantedConfig::default()).unwrap();
    write_planted_model(&layout.model(), &model).unwrap();
    let points: Vec<ProbePoint> = View::BOTH.iter().map(|&v| ProbePoint::encoder(v)).collect();
    let mut ids = Vec::new();
    for seed in PAIRS {
        let pair = generate_scene_pair(seed, &SceneConfig::default()).unwrap();
        let id = pair.id();
        write_scene_pair(&layout.pair_dir(&id), &pair).unwrap();
        write_trace(&layout.trace_dir(&id), &capture(&model, &pair).unwrap()).unwrap();
        let frames: Vec<PtmsFrame> =
            points.iter().map(|p| PtmsFrame::from_pointmap(p, &pair.gt_pointmaps[p.view.index()], 8).unwrap()).collect();
        write_ptms(&layout.ptms(&id), &frames).unwrap();
        ids.push(id);
    }
    let mut m = Manifest::new("export");
    m.model_id = Some("planted".into());
    m.pair_ids = ids.clone();
    m.probe_points = points.iter().map(|p| p.to_string()).collect();
    write_manifest(&layout.export(), &m).unwrap();
    write_json(&layout.heads().join("profiles.json"), &json!([{ "head": 0, "label": "register" }])).unwrap();
    if sealed {
        layout.seal().unwrap();
    }
    ids
}

struct Fixture {
    _dir: tempfile::TempDir,
    pairs: Vec<String>,
    app: Router,
}

fn fixture(live: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let pairs = build_run(&dir.path().join("run1"), true);
    build_run(&dir.path().join("draft"), false);
    let app = router(ServerOptions { runs_root: dir.path().to_path_buf(), cors_origin: "*".into(), live });
    Fixture { _dir: dir, pairs, app }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, header::HeaderMap) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, body, headers)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b, _) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn lists_only_sealed_runs() {
    let f = fixture(true);
    let (s, v) = get_json(&f.app, "/runs").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["runs"], json!([{ "id": "run1", "model_id": "planted" }]));
    let (s, v) = get_json(&f.app, "/runs/draft/pairs").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"]["message"].as_str().unwrap().contains("draft"));
    let (s, v) = get_json(&f.app, "/runs/run1/pairs").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["pairs"], json!(f.pairs));
    let (_, v) = get_json(&f.app, &format!("/runs/run1/pairs/{}/points", f.pairs[0])).await;
    assert_eq!(v["points"], json!(["v1.enc.b0.sa.post", "v2.enc.b0.sa.post"]));
}

#[tokio::test]
async fn not_found_and_bad_requests() {
    let f = fixture(true);
    let p = &f.pairs[0];
    for uri in [
        "/nope".to_string(),
        "/runs/..%2Frun1/pairs".to_string(),
        "/runs/run1/pairs/pair999999/points".to_string(),
        format!("/runs/run1/pairs/{p}/pointmap?point=v1.dec.b9.sa.post"),
        "/jobs/job-42".to_string(),
    ] {
        assert_eq!(get_json(&f.app, &uri).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    for uri in [
        format!("/runs/run1/pairs/{p}/pointmap"),
        format!("/runs/run1/pairs/{p}/attention?view=3&block=0&sublayer=sa&head=0&query=0"),
        format!("/runs/run1/pairs/{p}/attention?view=1&block=0&sublayer=mlp&head=0&query=0"),
        format!("/runs/run1/pairs/{p}/attention?view=1&block=0&sublayer=sa&head=0&query=64"),
    ] {
        let (s, v) = get_json(&f.app, &uri).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(v["error"]["status"], json!(400));
    }
    let (s, _) = post_json(&f.app, &format!("/runs/run1/pairs/{p}/knockout"), "{ not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let bad_head = r#"{"view":2,"block":0,"sublayer":"self_attention","heads":[9],"key_tokens":{"top_k_attended":2}}"#;
    assert_eq!(post_json(&f.app, &format!("/runs/run1/pairs/{p}/knockout"), bad_head).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn pointmap_json_matches_ptms_bytes() {
    let f = fixture(true);
    let uri = format!("/runs/run1/pairs/{}/pointmap?point=v2.enc.b0.sa.post", f.pairs[1]);
    let (s, frame) = get_json(&f.app, &uri).await;
    assert_eq!(s, StatusCode::OK);
    let req = Request::get(&uri).header(header::ACCEPT, PTMS_MIME).body(Body::empty()).unwrap();
    let (s, bytes, headers) = send(&f.app, req).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], PTMS_MIME);
    assert!(headers.contains_key(header::CACHE_CONTROL));
    let frames = decode_ptms(&bytes).unwrap();
    assert_eq!(frames.len(), 1);
    assert_eq!(serde_json::to_value(&frames[0]).unwrap(), frame);
    assert_eq!(frame["view_ids"], json!(vec![2; 8]));
}

#[tokio::test]
async fn register_head_rows_do_not_depend_on_the_query() {
    let f = fixture(true);
    let base = format!("/runs/run1/pairs/{}/attention?view=1&block=1&sublayer=sa&head=0", f.pairs[0]);
    let (s, a) = get_json(&f.app, &format!("{base}&query=0")).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = get_json(&f.app, &format!("{base}&query=37")).await;
    assert_eq!(a["row"], b["row"]);
    assert_eq!(a["row"].as_array().unwrap().len(), 64);
    assert_eq!(a["key"], json!("v1.b1.sa.h0"));
}

#[tokio::test]
async fn heads_and_schema_are_served() {
    let f = fixture(true);
    let (s, v) = get_json(&f.app, "/runs/run1/heads").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["profiles"][0]["label"], json!("register"));
    let (s, v) = get_json(&f.app, "/schema").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["paths"]["/runs/{run}/pairs/{pair}/knockout"]["post"].is_object());
}

#[tokio::test]
async fn empty_knockout_job_reports_zero_delta() {
    let f = fixture(true);
    let spec = r#"{"view":2,"block":2,"sublayer":"self_attention","heads":[],"key_tokens":{"top_k_attended":5}}"#;
    let (s, v) = post_json(&f.app, &format!("/runs/run1/pairs/{}/knockout", f.pairs[0]), spec).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["job_id"].as_str().unwrap().to_string();
    assert_eq!(v["status_url"], json!(format!("/jobs/{id}")));
    let mut status = Value::Null;
    for _ in 0..500 {
        status = get_json(&f.app, &format!("/jobs/{id}")).await.1;
        if status["status"] == "done" || status["status"] == "failed" {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    assert_eq!(status["status"], json!("done"), "{status}");
    let (s, r) = get_json(&f.app, &format!("/jobs/{id}/result")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["comparison"]["output_delta"], json!(0.0));
    assert_eq!(r["comparison"]["tokens"], json!([]));
}

#[tokio::test]
async fn knockout_without_live_adapter_conflicts() {
    let f = fixture(false);
    let spec = r#"{"view":2,"block":2,"sublayer":"self_attention","heads":[0],"key_tokens":{"explicit":[1,2]}}"#;
    let (s, v) = post_json(&f.app, &format!("/runs/run1/pairs/{}/knockout", f.pairs[0]), spec).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["status"], json!(409));
}

#[tokio::test]
async fn cors_allows_configured_origin() {
    let f = fixture(true);
    let req = Request::get("/runs").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let (_, _, headers) = send(&f.app, req).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}
