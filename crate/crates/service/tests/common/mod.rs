#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use intenttune_core::fixtures::{self, PortraitFixture};
use intenttune_core::imaging;
use intenttune_service::config::ServiceConfig;
use intenttune_service::{router, Workspace};
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct TestApp {
    pub dir: tempfile::TempDir,
    pub ws: Arc<Workspace>,
    pub app: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }

    /// Asserts a structured error body with the given status and code.
    pub fn expect_error(&self, status: StatusCode, code: &str) -> Value {
        assert_eq!(self.status, status, "{}", String::from_utf8_lossy(&self.bytes));
        let v = self.json();
        assert_eq!(v["code"], code, "{v}");
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()), "{v}");
        assert!(v.get("detail").is_some(), "{v}");
        v
    }
}

impl TestApp {
    pub fn new() -> Self {
        Self::with_config(|_| {})
    }

    pub fn with_config(edit: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServiceConfig { workspace: dir.path().join("ws"), ..Default::default() };
        edit(&mut cfg);
        let ws = Arc::new(Workspace::open(cfg).unwrap());
        let app = router(ws.clone());
        Self { dir, ws, app }
    }

    pub async fn send(&self, req: Request<Body>) -> Reply {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let content_type =
            resp.headers().get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or_default().to_string();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
        Reply { status, content_type, bytes }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let builder = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => builder.header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())),
            None => builder.body(Body::empty()),
        };
        self.send(req.unwrap()).await
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.call(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> Reply {
        self.call(Method::POST, uri, Some(body)).await
    }

    pub async fn put(&self, uri: &str, body: Value) -> Reply {
        self.call(Method::PUT, uri, Some(body)).await
    }

    pub async fn upload(&self, project_id: &str, files: &[(String, Vec<u8>)]) -> Reply {
        let boundary = "intenttune-test-boundary";
        let mut body = Vec::new();
        for (name, bytes) in files {
            body.extend_from_slice(
                format!(
                    "--{boundary}\r\nContent-Disposition: form-data; name=\"files\"; filename=\"{name}\"\r\nContent-Type: image/png\r\n\r\n"
                )
                .as_bytes(),
            );
            body.extend_from_slice(bytes);
            body.extend_from_slice(b"\r\n");
        }
        body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
        let req = Request::builder()
            .method(Method::POST)
            .uri(format!("/api/projects/{project_id}/images"))
            .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
            .body(Body::from(body))
            .unwrap();
        self.send(req).await
    }

    /// Long-polls the event endpoint until the run reports no further events.
    pub async fn drain_events(&self, run_id: &str, deadline: Duration) -> Vec<Value> {
        let start = Instant::now();
        let mut after = 0;
        let mut out = Vec::new();
        loop {
            assert!(start.elapsed() < deadline, "run {run_id} did not finish in time");
            let r = self.get(&format!("/api/runs/{run_id}/events?after={after}&timeout_ms=2000")).await;
            assert_eq!(r.status, StatusCode::OK);
            let v = r.json();
            let events = v["events"].as_array().unwrap().clone();
            if let Some(last) = events.last() {
                after = last["seq"].as_u64().unwrap();
            }
            let done = v["done"].as_bool().unwrap();
            let empty = events.is_empty();
            out.extend(events);
            if done && empty {
                return out;
            }
        }
    }
}

pub fn fixture_files(f: &PortraitFixture) -> Vec<(String, Vec<u8>)> {
    f.images.iter().map(|i| (i.name.clone().unwrap(), imaging::encode_png(&i.pixels))).collect()
}

pub fn fig3_payload() -> Value {
    let f = fixtures::portrait_fixture();
    json!({
        "text": fixtures::INTENT_TEXT,
        "regions": f.regions,
        "backend": "rule",
        "structured": fixtures::vincent_structured(),
    })
}

/// Creates a project and runs it through upload, intent and preprocessing.
pub async fn prepared_project(app: &TestApp, name: &str) -> (String, Value) {
    let f = fixtures::portrait_fixture();
    let r = app.post("/api/projects", json!({"name": name})).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let pid = r.json()["project_id"].as_str().unwrap().to_string();
    assert_eq!(app.upload(&pid, &fixture_files(&f)).await.status, StatusCode::CREATED);
    let det: Value = serde_json::from_str(&f.detector.to_json()).unwrap();
    assert_eq!(app.put(&format!("/api/projects/{pid}/detections"), det).await.status, StatusCode::NO_CONTENT);
    let r = app.post(&format!("/api/projects/{pid}/intent"), fig3_payload()).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    let r = app.post(&format!("/api/projects/{pid}/preprocess"), json!({})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    (pid, r.json())
}
