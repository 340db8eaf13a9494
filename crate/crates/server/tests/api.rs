use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cfsnet::checkpoint::Provenance;
use cfsnet::degrade::procedural_dataset;
use cfsnet::eval::{fidelity, Adaptive, MainOnly, Psnr, Restorer, SweepReport};
use cfsnet::image::{encode_pnm, Format, Image};
use cfsnet::model::{CfsModel, ModelConfig, Task};
use cfsnet::wire::{decode_image, encode_image, CoeffsResponse, ErrorBody, Health, ModelInfo, RestoreResponse};
use cfsnet_server::{router, AppState, ServerConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny() -> ModelConfig {
    ModelConfig { modules: 2, channels: 4, control_dim: 6, mapper_hidden_dims: [5, 5, 5], ..ModelConfig::default() }
}

fn app_with(config: ModelConfig, server: ServerConfig) -> (Router, CfsModel) {
    let model = CfsModel::build(config, 7).unwrap();
    let state = AppState::new(model.clone(), Provenance { steps_completed: 2, ..Provenance::default() }, server);
    (router(state), model)
}

fn app() -> (Router, CfsModel) {
    app_with(tiny(), ServerConfig::default())
}

fn sample(seed: u64) -> Image {
    procedural_dataset(seed, 1, 1, 12, 9).remove(0).quantized()
}

trait Quantized {
    fn quantized(&self) -> Image;
}

impl Quantized for Image {
    fn quantized(&self) -> Image {
        Image::from_u8_interleaved(self.channels(), self.height(), self.width(), &self.to_u8_interleaved()).unwrap()
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, value)
}

fn error_code(v: &Value) -> String {
    serde_json::from_value::<ErrorBody>(v.clone()).unwrap().error.code
}

fn png(img: &Image) -> String {
    encode_image(img, Format::Png).unwrap()
}

#[tokio::test]
async fn health_and_model_info() {
    let (app, model) = app();
    let (status, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let health: Health = serde_json::from_value(body).unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.model_id, model.model_id());

    let (status, body) = call(&app, Method::GET, "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: ModelInfo = serde_json::from_value(body).unwrap();
    assert_eq!(&info.config, model.config());
    assert_eq!(info.provenance.steps_completed, 2);
    assert_eq!(info.parameter_count, model.parameter_count());
}

#[tokio::test]
async fn coefficients_have_one_vector_per_module() {
    let (app, model) = app();
    let (status, body) = call(&app, Method::GET, "/coeffs?alpha=0.5", None).await;
    assert_eq!(status, StatusCode::OK);
    let coeffs: CoeffsResponse = serde_json::from_value(body).unwrap();
    assert_eq!(coeffs.modules.len(), 2);
    assert!(coeffs.modules.iter().all(|m| m.values.len() == 4));
    assert_eq!(coeffs.modules, model.map_control(0.5).unwrap());

    for bad in ["/coeffs?alpha=NaN", "/coeffs?alpha=inf", "/coeffs?alpha=x", "/coeffs"] {
        let (status, body) = call(&app, Method::GET, bad, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(["invalid_alpha", "invalid_query"].contains(&error_code(&body).as_str()), "{bad}");
    }
}

#[tokio::test]
async fn zero_alpha_restores_with_the_main_branch() {
    let (app, model) = app();
    let img = sample(1);
    let (status, body) = call(&app, Method::POST, "/restore", Some(json!({ "image": png(&img), "alpha": 0.0 }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: RestoreResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.alpha, 0.0);
    assert_eq!(resp.model_id, model.model_id());
    assert!(resp.psnr.is_none() && resp.rmse.is_none());
    let (restored, format) = decode_image(&resp.image).unwrap();
    assert_eq!(format, Format::Png);
    let expected = MainOnly(&model).restore(&img, 0.0).unwrap().clipped().quantized();
    assert_eq!(restored, expected);
}

#[tokio::test]
async fn ground_truth_adds_metrics() {
    let (app, model) = app();
    let img = sample(2);
    let gt = sample(3);
    let req = json!({ "image": png(&img), "alpha": "0.4", "ground_truth": png(&gt) });
    let (status, body) = call(&app, Method::POST, "/restore", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: RestoreResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.alpha, 0.4);
    let expected = fidelity(&Adaptive(&model).restore(&img, 0.4).unwrap().clipped(), &gt).unwrap();
    assert_eq!(resp.psnr, Some(expected.psnr));
    assert_eq!(resp.rmse, Some(expected.rmse));
    assert!(resp.timing_ms >= 0.0);

    let req = json!({ "image": png(&img), "alpha": 0.4, "ground_truth": png(&gt) });
    let (_, again) = call(&app, Method::POST, "/restore", Some(req.clone())).await;
    let again: RestoreResponse = serde_json::from_value(again).unwrap();
    assert_eq!(again.image, resp.image);

    let identical = json!({ "image": png(&img), "alpha": 0.0, "ground_truth": png(&MainOnly(&model).restore(&img, 0.0).unwrap().clipped().quantized()) });
    let (_, body) = call(&app, Method::POST, "/restore", Some(identical)).await;
    let resp: RestoreResponse = serde_json::from_value(body).unwrap();
    assert!(resp.psnr.unwrap().value() > 48.0 || resp.psnr == Some(Psnr::Infinite));
}

#[tokio::test]
async fn pnm_requests_get_pnm_replies() {
    let (app, _) = app();
    let img = sample(4);
    let body = json!({ "image": STANDARD.encode(encode_pnm(&img).unwrap()), "alpha": 1 });
    let (status, body) = call(&app, Method::POST, "/restore", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: RestoreResponse = serde_json::from_value(body).unwrap();
    assert_eq!(decode_image(&resp.image).unwrap().1, Format::Pnm);
}

#[tokio::test]
async fn invalid_restore_payloads_are_rejected() {
    let (app, _) = app();
    let img = png(&sample(5));
    let rgb = png(&procedural_dataset(1, 1, 3, 8, 8).remove(0));
    let cases = [
        (json!({ "image": img, "alpha": "NaN" }), "invalid_alpha"),
        (json!({ "image": img, "alpha": "abc" }), "invalid_json"),
        (json!({ "image": img }), "invalid_json"),
        (json!({ "image": "!!!not base64", "alpha": 0.5 }), "invalid_image"),
        (json!({ "image": STANDARD.encode(b"GIF89a...."), "alpha": 0.5 }), "invalid_image"),
        (json!({ "image": rgb, "alpha": 0.5 }), "channel_mismatch"),
        (
            json!({ "image": img, "alpha": 0.5, "ground_truth": png(&procedural_dataset(1, 1, 1, 5, 5).remove(0)) }),
            "ground_truth_shape",
        ),
    ];
    for (body, code) in cases {
        let (status, reply) = call(&app, Method::POST, "/restore", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{reply}");
        assert_eq!(error_code(&reply), code);
    }
    let resp = app.clone().oneshot(Request::post("/restore").body(Body::from("{}")).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let (status, reply) = call(&app, Method::POST, "/restore", Some(Value::String("x".into()))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&reply), "invalid_json");
}

#[tokio::test]
async fn oversized_images_are_rejected() {
    let (app, _) = app_with(tiny(), ServerConfig { max_pixels: 100, ui_dir: None });
    let small = procedural_dataset(1, 1, 1, 10, 10).remove(0);
    let (status, _) = call(&app, Method::POST, "/restore", Some(json!({ "image": png(&small), "alpha": 0.5 }))).await;
    assert_eq!(status, StatusCode::OK);
    let big = procedural_dataset(1, 1, 1, 10, 11).remove(0);
    let (status, body) = call(&app, Method::POST, "/restore", Some(json!({ "image": png(&big), "alpha": 0.5 }))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "image_too_large");
    // Bodies far beyond what the pixel limit allows are cut off before parsing.
    let huge = "A".repeat(3 << 20);
    let (status, body) = call(&app, Method::POST, "/restore", Some(json!({ "image": huge, "alpha": 0.5 }))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "payload_too_large");
}

#[tokio::test]
async fn super_resolution_ground_truth_is_at_output_scale() {
    let config = ModelConfig { task: Task::Sr, sr_scale: Some(2), ..tiny() };
    let (app, _) = app_with(config, ServerConfig { max_pixels: 100, ui_dir: None });
    let lr = procedural_dataset(1, 1, 1, 10, 10).remove(0);
    let hr = procedural_dataset(2, 1, 1, 20, 20).remove(0);
    let (status, body) = call(
        &app,
        Method::POST,
        "/restore",
        Some(json!({ "image": png(&lr), "alpha": 0.5, "ground_truth": png(&hr) })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: RestoreResponse = serde_json::from_value(body).unwrap();
    let (out, _) = decode_image(&resp.image).unwrap();
    assert_eq!((out.height(), out.width()), (20, 20));
    assert!(resp.psnr.is_some());
}

#[tokio::test]
async fn concurrent_restores_agree() {
    let (app, _) = app();
    let body = json!({ "image": png(&sample(6)), "alpha": 0.7 });
    let calls = (0..6).map(|_| {
        let (app, body) = (app.clone(), body.clone());
        async move { call(&app, Method::POST, "/restore", Some(body)).await }
    });
    let replies = futures_join(calls).await;
    let images: Vec<String> =
        replies.into_iter().map(|(_, b)| serde_json::from_value::<RestoreResponse>(b).unwrap().image).collect();
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

async fn futures_join<F>(futs: impl Iterator<Item = F>) -> Vec<F::Output>
where
    F: std::future::Future + Send + 'static,
    F::Output: Send + 'static,
{
    let handles: Vec<_> = futs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn sweep_over_a_procedural_dataset() {
    let (app, model) = app();
    let req = json!({
        "dataset": { "source": "procedural", "seed": 3, "count": 2, "height": 10, "width": 10 },
        "spec": { "kind": "awgn", "sigma": 30.0, "seed": 4 },
        "alphas": "0:1:0.1",
    });
    let (status, body) = call(&app, Method::POST, "/sweep", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let report: SweepReport = serde_json::from_value(body).unwrap();
    assert_eq!(report.grid.len(), 11);
    assert_eq!(report.method, "cfsnet");
    assert_eq!(report.model_id, model.model_id());

    let req = json!({
        "dataset": { "source": "procedural", "seed": 3, "count": 2, "height": 10, "width": 10 },
        "spec": { "kind": "awgn", "sigma": 30.0, "seed": 4 },
        "alphas": [0.0, 1.0],
        "method": "cfsnet-sa",
    });
    let (status, body) = call(&app, Method::POST, "/sweep", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let sa: SweepReport = serde_json::from_value(body).unwrap();
    assert_eq!(sa.method, "cfsnet-sa");
    assert_eq!(
        sa.per_image_psnr.iter().map(|r| r[0]).collect::<Vec<_>>(),
        report.per_image_psnr.iter().map(|r| r[0]).collect::<Vec<_>>()
    );
}

#[tokio::test]
async fn invalid_sweeps_are_rejected() {
    let (app, _) = app();
    let base = json!({
        "dataset": { "source": "procedural", "seed": 3, "count": 1, "height": 8, "width": 8 },
        "spec": { "kind": "awgn", "sigma": 30.0 },
        "alphas": "0:1:0.5",
    });
    let with = |key: &str, value: Value| {
        let mut v = base.clone();
        v[key] = value;
        v
    };
    let cases = [
        (with("alphas", json!("1:0:0.1")), "invalid_grid"),
        (with("alphas", json!([])), "invalid_grid"),
        (with("method", json!("dni")), "invalid_method"),
        (with("spec", json!({ "kind": "awgn", "sigma": -1.0 })), "invalid_spec"),
        (with("spec", json!({ "kind": "bicubic_down", "scale": 3 })), "invalid_spec"),
        (with("dataset", json!({ "source": "path", "path": "/nonexistent/images" })), "invalid_dataset"),
        (
            with("dataset", json!({ "source": "procedural", "seed": 1, "count": 0, "height": 8, "width": 8 })),
            "invalid_dataset",
        ),
    ];
    for (body, code) in cases {
        let (status, reply) = call(&app, Method::POST, "/sweep", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {reply}");
        assert_eq!(error_code(&reply), code, "{body}");
    }
    let (app, _) = app_with(tiny(), ServerConfig { max_pixels: 32, ui_dir: None });
    let (status, reply) = call(&app, Method::POST, "/sweep", Some(base)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&reply), "image_too_large");
}

#[tokio::test]
async fn unknown_routes_and_methods_answer_in_json() {
    let (app, _) = app();
    let (status, body) = call(&app, Method::GET, "/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");
    let (status, body) = call(&app, Method::GET, "/restore", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(error_code(&body), "method_not_allowed");
    let (status, _) = call(&app, Method::GET, "/ui/", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ui_bundle_is_served_under_ui() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>cfs</html>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let (app, _) = app_with(tiny(), ServerConfig { ui_dir: Some(dir.path().to_path_buf()), ..ServerConfig::default() });
    for (uri, expected) in
        [("/ui/", "<html>cfs</html>"), ("/ui/app.js", "console.log(1)"), ("/ui/some/route", "<html>cfs</html>")]
    {
        let resp = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK, "{uri}");
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        assert_eq!(&bytes[..], expected.as_bytes(), "{uri}");
    }
    let (status, _) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
}
