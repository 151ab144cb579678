use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use pyrstyle::config::TrainConfig;
use pyrstyle::fixtures;
use pyrstyle::imageio::{decode_png, encode_png, Image};
use pyrstyle::losses::penalty;
use pyrstyle::trainer::{Dataset, Trainer};
use pyrstyle_service::{
    serve, spawn_training, MetricsHistory, SampleList, Session, StatusReport, TrainingState,
};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;

const SIZE: usize = 16;

fn small_config() -> TrainConfig {
    TrainConfig {
        image_size: SIZE,
        patch: 8,
        d: 8,
        heads: 2,
        ffn: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        feature_channels: vec![4, 8],
        epochs: 10_000,
        timing: false,
        checkpoint_every: 10_000,
        ..TrainConfig::default()
    }
}

struct Server {
    base: String,
    client: reqwest::Client,
    stop: Option<oneshot::Sender<()>>,
}

impl Server {
    async fn start(session: Arc<Session>) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        tokio::spawn(serve(listener, session, async {
            let _ = rx.await;
        }));
        Server {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
            stop: Some(tx),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> T {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        r.json().await.unwrap()
    }

    async fn rate(&self, body: Value) -> (StatusCode, Option<Value>) {
        let r = self
            .client
            .post(self.url("/api/rate"))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status();
        let text = r.text().await.unwrap();
        (status, serde_json::from_str(&text).ok())
    }

    async fn stylize(&self, content: Vec<u8>, style: Vec<u8>) -> reqwest::Response {
        let form = Form::new()
            .part("content", Part::bytes(content).file_name("c.png"))
            .part("style", Part::bytes(style).file_name("s.png"));
        self.client
            .post(self.url("/api/stylize"))
            .multipart(form)
            .send()
            .await
            .unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

fn png(img: &Image) -> Vec<u8> {
    encode_png(img).unwrap()
}

async fn wait_for<T>(what: &str, mut f: impl AsyncFnMut() -> Option<T>) -> T {
    let start = Instant::now();
    loop {
        if let Some(v) = f().await {
            return v;
        }
        assert!(
            start.elapsed() < Duration::from_secs(120),
            "timed out waiting for {what}"
        );
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_session_endpoints() {
    let server = Server::start(Session::new(8)).await;

    let status: StatusReport = server.get("/api/status").await;
    assert_eq!(status.state, TrainingState::Idle);
    assert_eq!(status.epoch, 0);
    assert_eq!(status.gamma, None);
    assert_eq!(status.pending_ratings, 0);

    let raw: Value = server.get("/api/status").await;
    assert_eq!(raw["state"], "idle");
    assert_eq!(raw["v"], 1);

    let samples: SampleList = server.get("/api/samples").await;
    assert!(samples.samples.is_empty());
    let metrics: MetricsHistory = server.get("/api/metrics").await;
    assert!(metrics.epochs.is_empty() && metrics.steps.is_empty());

    let img = png(&fixtures::radial(SIZE));
    let r = server.stylize(img.clone(), img).await;
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
    let body: Value = r.json().await.unwrap();
    assert!(body["error"].is_string());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rate_rejects_bad_bodies() {
    let server = Server::start(Session::new(8)).await;
    for rating in [
        json!(0),
        json!(6),
        json!(-1),
        json!(2.5),
        json!("3"),
        Value::Null,
    ] {
        let (status, body) = server
            .rate(json!({"sample_id": "1", "rating": rating}))
            .await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "rating {rating}");
        assert!(body.unwrap()["error"].is_string());
    }
    let (status, _) = server.rate(json!({"rating": 3})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let r = server
        .client
        .post(server.url("/api/rate"))
        .body("not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let (status, _) = server.rate(json!({"sample_id": "nope", "rating": 3})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rating_round_trip_during_training() {
    let out = tempfile::tempdir().unwrap();
    let config = small_config();
    let trainer = Trainer::new(config).unwrap();
    let data =
        Dataset::from_images(vec![fixtures::radial(SIZE)], vec![fixtures::stripes(SIZE)]).unwrap();
    let session = Session::new(4);
    let server = Server::start(Arc::clone(&session)).await;
    let handle = spawn_training(&session, trainer, data, out.path().to_path_buf()).unwrap();
    assert!(spawn_training(
        &session,
        Trainer::new(small_config()).unwrap(),
        Dataset::from_images(vec![fixtures::radial(SIZE)], vec![fixtures::stripes(SIZE)]).unwrap(),
        out.path().to_path_buf(),
    )
    .is_err());

    let status: StatusReport = server.get("/api/status").await;
    assert_eq!(status.state, TrainingState::Training);
    assert!((status.gamma.unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

    let sample = wait_for("a sample", async || {
        let list: SampleList = server.get("/api/samples").await;
        list.samples.into_iter().next()
    })
    .await;
    assert!(!sample.rated);
    assert_eq!(sample.content_ref, "content0");
    assert_eq!(sample.style_ref, "style0");
    assert_eq!(sample.image.format, "png");
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&sample.image.data)
        .unwrap();
    let img = decode_png(&bytes, "sample".as_ref()).unwrap();
    assert_eq!((img.height(), img.width()), (SIZE, SIZE));
    assert!(out
        .path()
        .join(format!("samples/sample-{}.png", sample.sample_id))
        .exists());

    let (status, _) = server
        .rate(json!({"sample_id": sample.sample_id, "rating": 1}))
        .await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = server
        .rate(json!({"sample_id": sample.sample_id, "rating": 4}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let list: SampleList = server.get("/api/samples").await;
    assert!(list.samples.iter().all(|s| s.sample_id != sample.sample_id));

    let applied = wait_for("the rating to apply", async || {
        let m: MetricsHistory = server.get("/api/metrics").await;
        m.steps.into_iter().find(|s| s.rating.is_some())
    })
    .await;
    let rating = applied.rating.as_ref().unwrap();
    assert_eq!(rating.sample_id, sample.sample_id);
    assert_eq!(rating.rating, 1);
    assert!(applied.step > sample.step);
    let gap = applied.l_new - applied.l_total;
    assert!(
        (gap - applied.gamma * penalty(1)).abs() <= 1e-12,
        "gap {gap} gamma {}",
        applied.gamma
    );

    let m: MetricsHistory = server.get("/api/metrics").await;
    for s in m.steps.iter().filter(|s| s.rating.is_none()) {
        assert_eq!(s.l_new, s.l_total);
    }

    wait_for("pending ratings to drain", async || {
        let s: StatusReport = server.get("/api/status").await;
        (s.pending_ratings == 0).then_some(())
    })
    .await;

    // Stylize uses the model published at an epoch boundary.
    let content = png(&fixtures::landscape(SIZE));
    let style = png(&fixtures::checker(SIZE));
    let r = server.stylize(content.clone(), b"garbage".to_vec()).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    session.request_stop();
    let summary = tokio::task::spawn_blocking(move || handle.join().unwrap())
        .await
        .unwrap()
        .unwrap();
    assert!(summary.stopped);
    let status: StatusReport = server.get("/api/status").await;
    assert_eq!(status.state, TrainingState::Stopped);
    assert_eq!(status.error, None);
    assert_eq!(status.latest.unwrap().epoch, status.epoch);

    let first = server.stylize(content.clone(), style.clone()).await;
    assert_eq!(first.status(), StatusCode::OK);
    assert_eq!(first.headers()["content-type"], "image/png");
    let secs: f64 = first.headers()["x-inference-seconds"]
        .to_str()
        .unwrap()
        .parse()
        .unwrap();
    assert!(secs >= 0.0);
    let first = first.bytes().await.unwrap();
    let second = server.stylize(content, style).await.bytes().await.unwrap();
    assert_eq!(first, second);
    let out_img = decode_png(&first, "out".as_ref()).unwrap();
    assert_eq!((out_img.height(), out_img.width()), (SIZE, SIZE));

    // Inputs of another size are resized to the model grid.
    let big = png(&fixtures::radial(SIZE * 2));
    let r = server.stylize(big.clone(), big).await;
    assert_eq!(r.status(), StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unrated_buffer_evicts_oldest() {
    let out = tempfile::tempdir().unwrap();
    let trainer = Trainer::new(small_config()).unwrap();
    let data =
        Dataset::from_images(vec![fixtures::radial(SIZE)], vec![fixtures::checker(SIZE)]).unwrap();
    let session = Session::new(2);
    let server = Server::start(Arc::clone(&session)).await;
    let handle = spawn_training(&session, trainer, data, out.path().to_path_buf()).unwrap();

    wait_for("three samples", async || {
        let s: StatusReport = server.get("/api/status").await;
        (s.epoch >= 3).then_some(())
    })
    .await;
    session.request_stop();
    tokio::task::spawn_blocking(move || handle.join().unwrap())
        .await
        .unwrap()
        .unwrap();

    let list: SampleList = server.get("/api/samples").await;
    assert_eq!(list.samples.len(), 2);
    let ids: Vec<u64> = list
        .samples
        .iter()
        .map(|s| s.sample_id.parse().unwrap())
        .collect();
    assert!(ids[0] > ids[1], "newest first: {ids:?}");
    let (status, _) = server.rate(json!({"sample_id": "1", "rating": 5})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
