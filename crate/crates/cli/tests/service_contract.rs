use std::sync::Arc;

use archseek_cli::service::{router, AppState, ServiceSettings};
use archseek_core::augment::{replay_key, ReplayVlm};
use archseek_core::embedding::{Embedder, EmbeddingProviderConfig, ImageInput};
use archseek_core::index::{ingest, IngestOptions};
use archseek_core::retrieval::rerank_with_weights;
use archseek_core::synth::{generate, SynthCorpus, SynthParams};
use archseek_core::{
    Aspect, AspectWeights, CaseId, EmbeddingGateway, EngineConfig, Error, RetrievalEngine, Space,
};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "xX-archseek-test-Xx";

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: SynthCorpus,
    engine: Arc<RetrievalEngine>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams {
        cases: 12,
        queries: 3,
        ..SynthParams::default()
    };
    let corpus = generate(&params, dir.path()).unwrap();
    let gw = Arc::new(EmbeddingGateway::mock(32, 32));
    let vlm = Arc::new(ReplayVlm::new(&corpus.fixtures_dir));
    let report = ingest(
        &corpus.cases_dir,
        &gw,
        vlm.as_ref(),
        &IngestOptions::default(),
    )
    .unwrap();
    let engine = RetrievalEngine::new(
        Arc::new(report.database),
        gw,
        Some(vlm),
        EngineConfig::default(),
    )
    .unwrap();
    Fixture {
        _dir: dir,
        corpus,
        engine: Arc::new(engine),
    }
}

fn app(engine: Arc<RetrievalEngine>) -> Router {
    router(AppState::new(engine, ServiceSettings::default()))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    };
    send(app, req.unwrap()).await
}

async fn upload(app: &Router, image: &[u8], weights: Option<&str>) -> (StatusCode, Value) {
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"q.png\"\r\nContent-Type: image/png\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(image);
    body.extend_from_slice(b"\r\n");
    if let Some(w) = weights {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"weights\"\r\n\r\n{w}\r\n"
            )
            .as_bytes(),
        );
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    let req = Request::post("/api/v1/query/image")
        .header(
            "content-type",
            format!("multipart/form-data; boundary={BOUNDARY}"),
        )
        .body(Body::from(body))
        .unwrap();
    send(app, req).await
}

fn card_ids(v: &Value) -> Vec<u64> {
    v["cards"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["case_id"].as_u64().unwrap())
        .collect()
}

fn ids(v: &[CaseId]) -> Vec<u64> {
    v.iter().map(|c| c.0).collect()
}

#[tokio::test]
async fn health_reports_version_and_size() {
    let f = fixture();
    let app = app(f.engine.clone());
    for uri in ["/api/v1/health", "/api/health"] {
        let (s, v) = call(&app, "GET", uri, None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["case_count"], 12);
        assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    }
}

#[tokio::test]
async fn text_query_mirrors_the_engine() {
    let f = fixture();
    let app = app(f.engine.clone());
    let q = &f.corpus.dataset.queries[0].query;
    let (s, v) = call(
        &app,
        "POST",
        "/api/v1/query/text",
        Some(json!({ "query": q })),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        card_ids(&v),
        ids(&f.engine.text_query(q).unwrap().case_ids())
    );
    assert_eq!(v["mode"], "text");
    assert!(v["session_id"].is_string());
    let first = &v["cards"][0];
    assert!(first["snippet"].is_string() && first["score"].as_f64().unwrap() > 0.0);

    let (s, v) = call(
        &app,
        "POST",
        "/api/query/text",
        Some(json!({ "query": "  " })),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    assert_eq!(v["error"]["code"], "invalid_input");
}

struct Down;

impl Embedder for Down {
    fn describe(&self) -> String {
        "down".into()
    }
    fn embed_text(&self, _: &str) -> archseek_core::Result<Vec<f32>> {
        Err(Error::Transport {
            provider: "down".into(),
            message: "connection refused".into(),
        })
    }
    fn embed_image(&self, _: &ImageInput<'_>) -> archseek_core::Result<Vec<f32>> {
        self.embed_text("")
    }
}

#[tokio::test]
async fn provider_outage_is_503() {
    let f = fixture();
    let mut t = EmbeddingProviderConfig::mock(Space::Text, 32);
    let mut c = EmbeddingProviderConfig::mock(Space::Crossmodal, 32);
    t.max_retries = 0;
    c.max_retries = 0;
    let gw = EmbeddingGateway::with_embedders(t, Arc::new(Down), c, Arc::new(Down)).unwrap();
    let engine = RetrievalEngine::new(
        f.engine.database().clone(),
        Arc::new(gw),
        None,
        EngineConfig::default(),
    )
    .unwrap();
    let (s, v) = call(
        &app(Arc::new(engine)),
        "POST",
        "/api/v1/query/text",
        Some(json!({"query": "roof"})),
    )
    .await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{v}");
}

#[tokio::test]
async fn image_query_and_reweighting() {
    let f = fixture();
    let app = app(f.engine.clone());
    let image = std::fs::read(f.corpus.cases_dir.join("case-0003/img-1.png")).unwrap();

    let (s, v) = upload(&app, &image, None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["mode"], "image");
    assert!(v["weights"].as_object().unwrap().values().all(|w| w == 1.0));
    assert!(!v["analysis"]["aspects"].as_object().unwrap().is_empty());
    let expected = f
        .engine
        .image_query(&image, &AspectWeights::default())
        .unwrap();
    assert_eq!(card_ids(&v), ids(&expected.result.case_ids()));
    let sid = v["session_id"].as_str().unwrap().to_string();

    let calls = f.engine.gateway().provider_calls();
    let weights = json!({"style": 1.0, "form": 0.0, "material_usage": 0.0, "sense_of_feeling": 0.0,
        "context_relations": 0.0, "passive_design": 0.0, "general_highlights": 0.0});
    let uri = format!("/api/v1/session/{sid}/weights");
    let (s, v) = call(&app, "POST", &uri, Some(json!({ "weights": weights }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let w = AspectWeights::only(Aspect::Style).unwrap();
    assert_eq!(
        card_ids(&v),
        ids(&rerank_with_weights(&expected.cache, &w).unwrap().case_ids())
    );
    let (_, again) = call(&app, "POST", &uri, Some(json!({ "weights": weights }))).await;
    assert_eq!(again["cards"], v["cards"]);
    assert_eq!(f.engine.gateway().provider_calls(), calls);

    let zero = json!({"style": 0.0, "form": 0.0, "material_usage": 0.0, "sense_of_feeling": 0.0,
        "context_relations": 0.0, "passive_design": 0.0, "general_highlights": 0.0});
    let (s, _) = call(&app, "POST", &uri, Some(json!({ "weights": zero }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(
        &app,
        "POST",
        "/api/v1/session/nope/weights",
        Some(json!({ "weights": weights })),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, text) = call(
        &app,
        "POST",
        "/api/v1/query/text",
        Some(json!({"query": "roof"})),
    )
    .await;
    let uri = format!(
        "/api/v1/session/{}/weights",
        text["session_id"].as_str().unwrap()
    );
    let (s, _) = call(&app, "POST", &uri, Some(json!({ "weights": weights }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn image_upload_errors() {
    let f = fixture();
    let app = app(f.engine.clone());
    let (s, v) = upload(&app, b"0123456789", None).await;
    assert_eq!(s, StatusCode::UNSUPPORTED_MEDIA_TYPE, "{v}");

    let mut blank = b"\x89PNG\r\n\x1a\n".to_vec();
    blank.extend_from_slice(b"nothing to say");
    std::fs::write(
        f.corpus
            .fixtures_dir
            .join(format!("{}.json", replay_key(&blank))),
        r#"{"analysis": {"form": [], "style": []}}"#,
    )
    .unwrap();
    let (s, v) = upload(&app, &blank, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let image = std::fs::read(f.corpus.cases_dir.join("case-0001/img-1.png")).unwrap();
    let (s, _) = upload(&app, &image, Some(r#"{"style": 3.0}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn likes_on_a_random_start() {
    let f = fixture();
    let app = app(f.engine.clone());
    let (s, start) = call(&app, "POST", "/api/v1/session", Some(json!({"seed": 4}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(start["mode"], "browse");
    assert_eq!(card_ids(&start).len(), 12);
    let sid = start["session_id"].as_str().unwrap();
    let like = format!("/api/v1/session/{sid}/like");

    let (s, liked) = call(&app, "POST", &like, Some(json!({"case_id": 5}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(liked["liked"][0]["case_id"], 5);
    assert!(!card_ids(&liked).contains(&5));
    let (s, _) = call(&app, "POST", &like, Some(json!({"case_id": 5}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", &like, Some(json!({"case_id": 999}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, back) = call(&app, "DELETE", &format!("{like}/5"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(back["cards"], start["cards"]);
    let (s, _) = call(&app, "DELETE", &format!("{like}/5"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(
        &app,
        "POST",
        "/api/v1/session/missing/like",
        Some(json!({"case_id": 5})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn case_detail_groups_every_entry() {
    let f = fixture();
    let app = app(f.engine.clone());
    let (s, v) = call(&app, "GET", "/api/v1/cases/3", None).await;
    assert_eq!(s, StatusCode::OK);
    let grouped: usize = v["entry_groups"]
        .as_object()
        .unwrap()
        .values()
        .map(|g| g.as_array().unwrap().len())
        .sum();
    let stored = f.engine.database().case(CaseId(3)).unwrap().entries.len();
    assert_eq!(grouped, stored);
    assert_eq!(v["entry_count"], stored);
    let (s, _) = call(&app, "GET", "/api/v1/cases/4242", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_survive_a_restart_through_snapshots() {
    let f = fixture();
    let snaps = tempfile::tempdir().unwrap();
    let settings = ServiceSettings {
        snapshot_dir: Some(snaps.path().to_path_buf()),
        ..Default::default()
    };
    let first = router(AppState::new(f.engine.clone(), settings.clone()));
    let (_, v) = call(
        &first,
        "POST",
        "/api/v1/query/text",
        Some(json!({"query": "roof light"})),
    )
    .await;
    let sid = v["session_id"].as_str().unwrap();
    let (_, liked) = call(
        &first,
        "POST",
        &format!("/api/v1/session/{sid}/like"),
        Some(json!({"case_id": 2})),
    )
    .await;

    let second = router(AppState::new(f.engine.clone(), settings));
    let (s, restored) = call(&second, "GET", &format!("/api/v1/session/{sid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(restored, liked);
}

#[tokio::test]
async fn serves_the_ui_bundle_under_app() {
    let f = fixture();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>archseek</html>").unwrap();
    let settings = ServiceSettings {
        ui_dir: Some(ui.path().to_path_buf()),
        ..Default::default()
    };
    let app = router(AppState::new(f.engine.clone(), settings));
    let (s, body) = call(&app, "GET", "/app/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, "<html>archseek</html>");
}
