use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use bdinvert::editor::{save_directions, sefa_directions, DirectionSource};
use bdinvert::generator::{save_weights, GeneratorConfig, GeneratorMode, GeneratorWeights};
use bdinvert::image_io;
use bdinvert::inversion::InversionResult;
use bdinvert::latent::GeometricTransform;
use bdinvert::metrics::psnr;
use bdinvert::pipeline::{Assets, CheckpointLayout};
use bdinvert::pnorm::estimate_stats;
use bdinvert::tensor::Tensor;
use bdinvert_service::{JobState, Service, ServiceConfig};
use http_body_util::BodyExt;
use rand::SeedableRng;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

fn tiny_config() -> GeneratorConfig {
    let mut c = GeneratorConfig::desk(GeneratorMode::StyleGan2);
    c.channels_per_scale = vec![8; 5];
    c.z_dim = 16;
    c.w_dim = 16;
    c
}

/// Generator, statistics and directions in a fresh checkpoint directory.
fn checkpoints(dir: &Path) -> GeneratorWeights {
    let layout = CheckpointLayout::new(dir);
    let g = GeneratorWeights::random(tiny_config(), 3).unwrap();
    save_weights(&g, &layout.generator()).unwrap();
    estimate_stats(&g, 10_000, 0).unwrap().save(&layout.pnorm(), &g.checksum()).unwrap();
    let cfg = &g.config;
    let mut dirs = sefa_directions(&g, cfg.detail_start(), cfg.num_styles(), 2).unwrap();
    dirs.push(dirs[0].clone()); // duplicate name, dropped from the listing
    let mut coarse = dirs[0].clone();
    coarse.name = "coarse".into();
    coarse.layer_lo = 1;
    coarse.source = DirectionSource::File;
    dirs.push(coarse);
    save_directions(&dirs, &layout.directions()).unwrap();
    g
}

struct Fixture {
    service: Option<Service>,
    app: Router,
    _tmp: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self::build(true)
    }

    fn build(with_checkpoints: bool) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        if with_checkpoints {
            checkpoints(&tmp.path().join("ckpt"));
        }
        let service = Service::start(ServiceConfig {
            port: 0,
            checkpoint_dir: tmp.path().join("ckpt"),
            data_dir: tmp.path().join("data"),
            workers: 1,
            console_origin: None,
        })
        .unwrap();
        let app = service.router();
        Fixture {
            service: Some(service),
            app,
            _tmp: tmp,
        }
    }

    fn service(&self) -> &Service {
        self.service.as_ref().unwrap()
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = self.raw(method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn raw(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn submit(&self, iterations: usize) -> String {
        let (status, body) = self
            .call(
                "POST",
                "/api/invert",
                Some(json!({
                    "v": 1,
                    "image": png_b64(1),
                    "config_overrides": {"iterations": iterations, "init_detail": "encoder_free", "perceptual_resolution": 64}
                })),
            )
            .await;
        assert_eq!(status, StatusCode::ACCEPTED, "{body}");
        body["job_id"].as_str().unwrap().to_string()
    }

    /// Poll until the job is final, checking that progress never goes back.
    async fn wait(&self, id: &str) -> Value {
        let start = Instant::now();
        let mut last = 0;
        loop {
            let (status, job) = self.call("GET", &format!("/api/jobs/{id}"), None).await;
            assert_eq!(status, StatusCode::OK);
            let it = job["progress"]["iteration"].as_u64().unwrap();
            assert!(it >= last, "iteration went from {last} to {it}");
            assert!(it <= job["progress"]["total"].as_u64().unwrap());
            last = it;
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "job {id} did not finish");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        if let Some(s) = self.service.take() {
            s.shutdown();
        }
    }
}

fn png_b64(seed: u64) -> String {
    let img = Tensor::<f32>::randn(&[3, 64, 64], 0.4, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    B64.encode(image_io::encode_png(&img.map(|v| v.clamp(-1.0, 1.0))).unwrap())
}

fn image_of(body: &Value) -> Tensor<f32> {
    image_io::decode_image(&B64.decode(body["image"].as_str().unwrap()).unwrap()).unwrap()
}

#[tokio::test]
async fn invert_job_lifecycle() {
    let fx = Fixture::new();
    let id = fx.submit(6).await;
    assert!(ulid::Ulid::from_string(&id).is_ok());
    let job = fx.wait(&id).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["v"], 1);
    assert_eq!(job["config"]["iterations"], 6);
    assert!(job["final_metrics"]["psnr"].is_number());
    assert_eq!(job["result_ref"], format!("results/{id}"));
    assert!(job["error"].is_null());

    let dir = fx.service().data_dir().join("results").join(&id);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["meta"]["config"]["iterations"], 6);
    assert!(dir.join("run_manifest.json").is_file());
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let fx = Fixture::new();
    let full = png_b64(2);
    let truncated = &full[..full.len() / 2 - 1];
    for body in [
        json!({"image": truncated}),
        json!({"image": B64.encode(b"not an image")}),
        json!({"v": 2, "image": full}),
        json!({"image": full, "config_overrides": {"bogus": 1}}),
        json!({"image": full, "config_overrides": {"iterations": 0}}),
        json!({"nothing": true}),
    ] {
        let (status, resp) = fx.call("POST", "/api/invert", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {resp}");
    }
}

#[tokio::test]
async fn missing_checkpoints_conflict() {
    let fx = Fixture::build(false);
    let (status, body) = fx
        .call("POST", "/api/invert", Some(json!({"image": png_b64(3), "config_overrides": {"init_detail": "encoder_free"}})))
        .await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let (status, body) = fx.call("GET", "/api/directions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["directions"], json!([]));

    // no encoder: the default initialization needs one
    let fx = Fixture::new();
    let (status, _) = fx.call("POST", "/api/invert", Some(json!({"image": png_b64(3)}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn unknown_job_is_404() {
    let fx = Fixture::new();
    let (status, body) = fx.call("GET", "/api/jobs/01ARZ3NDEKTSV4RRFFQ69G5FAV", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["v"], 1);
}

#[tokio::test]
async fn direction_listing() {
    let fx = Fixture::new();
    let (_, a) = fx.call("GET", "/api/directions", None).await;
    let (_, b) = fx.call("GET", "/api/directions", None).await;
    assert_eq!(a, b);
    assert_eq!(a["v"], 1);
    let list = a["directions"].as_array().unwrap();
    let names: Vec<&str> = list.iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 3);
    let mut unique = names.clone();
    unique.dedup();
    assert_eq!(unique, names);
    for d in list {
        assert!(d.get("vector").is_none() && d.get("v").is_none());
        assert_eq!(d["layer_range"].as_array().unwrap().len(), 2);
    }
}

#[tokio::test]
async fn editing() {
    let fx = Fixture::new();
    let id = fx.submit(4).await;
    assert_eq!(fx.wait(&id).await["state"], "done");
    let dir = fx.service().data_dir().join("results").join(&id);
    let stored_png = std::fs::read(dir.join("reconstruction.png")).unwrap();
    let (_, dirs) = fx.call("GET", "/api/directions", None).await;
    let d0 = dirs["directions"][0]["name"].as_str().unwrap().to_string();

    // no edits: the stored reconstruction, byte for byte
    let (status, body) = fx.call("POST", "/api/edit", Some(json!({"v": 1, "result_id": id, "edits": []}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(B64.decode(body["image"].as_str().unwrap()).unwrap(), stored_png);

    // self style mix is the identity
    let (_, body) = fx.call("POST", "/api/edit", Some(json!({"result_id": id, "style_mix_ref": id}))).await;
    assert_eq!(B64.decode(body["image"].as_str().unwrap()).unwrap(), stored_png);

    // +alpha then -alpha returns to the stored code
    let (_, body) = fx
        .call(
            "POST",
            "/api/edit",
            Some(json!({"result_id": id, "edits": [{"direction": d0, "alpha": 3.0}, {"direction": d0, "alpha": -3.0}], "return_code": true})),
        )
        .await;
    let g = Assets::load(&CheckpointLayout::new(fx._tmp.path().join("ckpt"))).unwrap();
    let stored = InversionResult::load(&dir, &g.generator).unwrap();
    let back = body["detail_code"].as_array().unwrap();
    assert_eq!(back.len(), stored.code.w_detail.len());
    for (w, b) in stored.code.w_detail.iter().zip(back) {
        for (x, y) in w.data().iter().zip(b.as_array().unwrap()) {
            assert!((*x as f64 - y.as_f64().unwrap()).abs() < 1e-6);
        }
    }

    // a nonzero edit changes the image and leaves the stored result alone
    let (_, body) = fx.call("POST", "/api/edit", Some(json!({"result_id": id, "edits": [{"direction": d0, "alpha": 5.0}]}))).await;
    assert_ne!(B64.decode(body["image"].as_str().unwrap()).unwrap(), stored_png);
    assert_eq!(std::fs::read(dir.join("reconstruction.png")).unwrap(), stored_png);

    // one base cell of shift matches a pixel shift of the reconstruction
    let (status, body) = fx
        .call("POST", "/api/edit", Some(json!({"result_id": id, "transform": GeometricTransform::translate(1.0, 0.0)})))
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let shifted = image_of(&body);
    let stride = g.generator.config.stride();
    let recon = image_io::decode_image(&stored_png).unwrap();
    let expect = GeometricTransform::translate(stride as f64, 0.0).apply(&recon);
    // overlap of the shift, less a border of two strides
    let b = 2 * stride;
    let (x0, w, h) = (stride + b, 64 - stride - 2 * b, 64 - 2 * b);
    let crop = |t: &Tensor<f32>| {
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), i % (h * w) / w, i % w);
            t.data()[c * 64 * 64 + (y + b) * 64 + x + x0]
        })
    };
    let p = psnr(&crop(&shifted), &crop(&expect)).unwrap();
    assert!(p >= 30.0, "shift preview PSNR {p}");
}

#[tokio::test]
async fn edit_errors() {
    let fx = Fixture::new();
    let (status, _) = fx.call("POST", "/api/edit", Some(json!({"result_id": "01ARZ3NDEKTSV4RRFFQ69G5FAV"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = fx.call("POST", "/api/edit", Some(json!({"result_id": "../../etc"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let id = fx.submit(2).await;
    fx.wait(&id).await;
    for edits in [json!([{"direction": "coarse", "alpha": 1.0}]), json!([{"direction": "nope", "alpha": 1.0}])] {
        let (status, body) = fx.call("POST", "/api/edit", Some(json!({"result_id": id, "edits": edits}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    let (status, _) = fx.call("POST", "/api/edit", Some(json!({"result_id": id, "style_mix_layers": [1, 3], "style_mix_ref": id}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_match_serial() {
    let fx = Arc::new(Fixture::new());
    let id = fx.submit(2).await;
    fx.wait(&id).await;
    let (_, dirs) = fx.call("GET", "/api/directions", None).await;
    let names: Vec<String> = dirs["directions"].as_array().unwrap()[..2]
        .iter()
        .map(|d| d["name"].as_str().unwrap().to_string())
        .collect();
    let request = |k: usize| {
        json!({"result_id": id, "edits": [{"direction": names[k % 2], "alpha": (k % 5) as f64 - 2.0}]})
    };
    let mut serial = Vec::new();
    for k in 0..100 {
        serial.push(fx.raw("POST", "/api/edit", Some(request(k))).await.1);
    }
    let handles: Vec<_> = (0..100)
        .map(|k| {
            let (fx, body) = (fx.clone(), request(k));
            tokio::spawn(async move { fx.raw("POST", "/api/edit", Some(body)).await.1 })
        })
        .collect();
    for (k, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), serial[k], "request {k}");
    }
}

#[tokio::test]
async fn single_worker_is_fifo() {
    let fx = Fixture::new();
    let ids = [fx.submit(5).await, fx.submit(5).await, fx.submit(5).await];
    let mut finished = Vec::new();
    for id in &ids {
        let job = fx.wait(id).await;
        assert_eq!(job["state"], "done");
        finished.push(job["finished_at"].as_f64().unwrap());
    }
    assert!(finished.windows(2).all(|w| w[0] < w[1]), "{finished:?}");
    assert_eq!(fx.service().job(&ids[0]).unwrap().state, JobState::Done);
}

#[tokio::test]
async fn cors_headers() {
    let fx = Fixture::new();
    let req = Request::builder()
        .uri("/api/directions")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = fx.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
