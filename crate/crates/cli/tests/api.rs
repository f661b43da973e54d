mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

use cbx::api::{router, AttributeResponse, InterveneResponse, PredictResponse, SampleEntry};
use cbx::session::{Session, Target};
use cbx_core::attribution::{AttributionConfig, Method};
use cbx_core::evalkit::{most_salient_point, ContributionReport};
use cbx_core::render::RgbImage;
use cbx_core::Tensor;

struct Client {
    session: Arc<Session>,
}

impl Client {
    fn new() -> Self {
        Self {
            session: Arc::new(common::session()),
        }
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = router(self.session.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
            .await
            .unwrap();
        (status, body.to_vec())
    }

    async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.send(Request::get(uri).body(Body::empty()).unwrap())
            .await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
        self.send(
            Request::post(uri)
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
        .await
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> T {
    serde_json::from_slice(body).unwrap()
}

fn assert_finite(v: &Value) {
    match v {
        Value::Number(n) => assert!(n.as_f64().unwrap().is_finite()),
        Value::Null => panic!("null in response (non-finite number?)"),
        Value::Array(a) => a.iter().for_each(assert_finite),
        Value::Object(o) => o.values().for_each(assert_finite),
        _ => {}
    }
}

fn contribution_sum(r: &ContributionReport) -> f64 {
    r.rows.iter().map(|r| r.contribution_percent).sum()
}

#[tokio::test]
async fn samples_are_listed_in_id_order_with_thumbnails() {
    let c = Client::new();
    let (status, body) = c.get("/samples").await;
    assert_eq!(status, StatusCode::OK);
    let entries: Vec<SampleEntry> = parse(&body);
    assert_eq!(entries.len(), 3);
    assert!(entries.windows(2).all(|w| w[0].id < w[1].id));
    for (e, s) in entries.iter().zip(c.session.samples()) {
        assert_eq!(e.class_label, s.class_label);
        let img = RgbImage::from_ppm(&BASE64.decode(&e.thumbnail).unwrap()).unwrap();
        assert_eq!((img.height, img.width), (32, 32));
        assert_eq!(img, RgbImage::from_tensor(&s.image).unwrap());
    }
}

#[tokio::test]
async fn predict_matches_in_process_prediction() {
    let c = Client::new();
    for id in 0..3 {
        let (status, body) = c.post("/predict", json!({ "sample_id": id })).await;
        assert_eq!(status, StatusCode::OK);
        assert_finite(&parse::<Value>(&body));
        let got: PredictResponse = parse(&body);
        let want = c.session.predict(c.session.sample(id).unwrap()).unwrap();
        assert_eq!(got.class_probs, want.class_probs);
        assert_eq!(got.predicted_class, want.predicted_class());
        let values: Vec<f64> = got.concepts.iter().map(|e| e.value).collect();
        let present: Vec<bool> = got.concepts.iter().map(|e| e.present).collect();
        assert_eq!(values, want.concepts.values);
        assert_eq!(present, want.concepts.presence);
        assert!((got.class_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let (status, _) = c.post("/predict", json!({ "sample_id": 3 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concept_attribution_returns_an_image_shaped_map() {
    let c = Client::new();
    for method in ["lrp", "grad", "ig"] {
        let req = json!({
            "sample_id": 1,
            "target": { "kind": "concept", "index": 2 },
            "method": method,
            "options": { "steps": 16 }
        });
        let (status, body) = c.post("/attribute", req).await;
        assert_eq!(status, StatusCode::OK, "{method}");
        let got: AttributeResponse = parse(&body);
        assert_eq!(got.reduced_grid.len(), 32);
        assert!(got.reduced_grid.iter().all(|r| r.len() == 32));
        let flat: Vec<f64> = got.reduced_grid.concat();
        let grid = Tensor::new(vec![32, 32], flat).unwrap();
        assert_eq!(
            most_salient_point(&grid).unwrap(),
            (got.peak.row, got.peak.col)
        );
        let img = RgbImage::from_ppm(&BASE64.decode(&got.map_png_or_ppm).unwrap()).unwrap();
        assert_eq!((img.height, img.width), (32, 32));

        let config = AttributionConfig::new(match method {
            "lrp" => Method::Lrp { rule_map: None },
            "grad" => Method::Gradient,
            _ => Method::IntegratedGradients {
                steps: 16,
                baseline: None,
            },
        });
        let want = c
            .session
            .explain(c.session.sample(1).unwrap(), Target::Concept(2), &config)
            .unwrap();
        assert_eq!(got.reduced_grid, want.grid_rows());
    }
}

#[tokio::test]
async fn class_attribution_is_a_concept_strip() {
    let c = Client::new();
    let k = c.session.model.n_concepts();
    let req = json!({
        "sample_id": 0,
        "target": { "kind": "class", "index": 1 },
        "method": "lrp"
    });
    let (status, body) = c.post("/attribute", req).await;
    assert_eq!(status, StatusCode::OK);
    let got: AttributeResponse = parse(&body);
    assert_eq!(got.reduced_grid.len(), 1);
    assert_eq!(got.reduced_grid[0].len(), k);
    let p = c.session.predict(c.session.sample(0).unwrap()).unwrap();
    let relevance = cbx_core::evalkit::class_relevance(&c.session.model, &p.bottleneck, 1).unwrap();
    assert_eq!(got.reduced_grid[0], relevance);
    let grid = Tensor::new(vec![1, k], relevance).unwrap();
    assert_eq!(
        most_salient_point(&grid).unwrap(),
        (got.peak.row, got.peak.col)
    );
}

#[tokio::test]
async fn attribution_errors_use_the_declared_statuses() {
    let c = Client::new();
    let cases = [
        (
            json!({"sample_id": 0, "target": {"kind": "concept", "index": 0}, "method": "cam"}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"sample_id": 0, "target": {"kind": "concept", "index": 12}, "method": "lrp"}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"sample_id": 0, "target": {"kind": "class", "index": 8}, "method": "grad"}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"sample_id": 0, "target": {"kind": "part", "index": 0}, "method": "lrp"}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"sample_id": 0, "target": {"kind": "concept", "index": 0}, "method": "ig", "options": {"steps": 0}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"sample_id": 9, "target": {"kind": "concept", "index": 0}, "method": "lrp"}),
            StatusCode::NOT_FOUND,
        ),
    ];
    for (req, want) in cases {
        let (status, body) = c.post("/attribute", req.clone()).await;
        assert_eq!(status, want, "{req}");
        assert!(parse::<Value>(&body)["error"].is_string());
    }
}

#[tokio::test]
async fn smoothgrad_options_are_honoured_and_deterministic() {
    let c = Client::new();
    let req = |seed: u64| {
        json!({
            "sample_id": 2,
            "target": { "kind": "concept", "index": 0 },
            "method": "grad",
            "options": { "smoothgrad": { "n_samples": 4, "sigma": 0.1, "seed": seed } }
        })
    };
    let (_, a) = c.post("/attribute", req(1)).await;
    let (_, b) = c.post("/attribute", req(1)).await;
    let (_, other) = c.post("/attribute", req(2)).await;
    assert_eq!(a, b);
    assert_ne!(a, other);
}

#[tokio::test]
async fn intervention_matches_the_library_and_is_stateless() {
    let c = Client::new();
    let (_, before) = c.post("/predict", json!({ "sample_id": 0 })).await;

    let (status, body) = c
        .post("/intervene", json!({ "sample_id": 0, "overrides": {} }))
        .await;
    assert_eq!(status, StatusCode::OK);
    let empty: InterveneResponse = parse(&body);
    assert!(empty.delta.iter().all(|&d| d == 0.0));
    assert_eq!(empty.old_probs, empty.new_probs);

    let req = json!({ "sample_id": 0, "overrides": { "1": 0.0, "4": 1.0 }, "target_class": 3 });
    let (status, body) = c.post("/intervene", req).await;
    assert_eq!(status, StatusCode::OK);
    assert_finite(&parse::<Value>(&body));
    let got: InterveneResponse = parse(&body);
    let overrides = BTreeMap::from([(1, 0.0), (4, 1.0)]);
    let (want, report) = c
        .session
        .intervene(c.session.sample(0).unwrap(), &overrides, Some(3))
        .unwrap();
    assert_eq!(got.old_probs, want.old_probs);
    assert_eq!(got.new_probs, want.new_probs);
    assert_eq!(got.delta, want.delta);
    assert_eq!(got.new_contributions, report);
    assert_eq!(got.new_contributions.target_class, 3);
    assert!((got.new_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!((contribution_sum(&got.new_contributions) - 100.0).abs() <= 1e-9);

    let (_, after) = c.post("/predict", json!({ "sample_id": 0 })).await;
    assert_eq!(before, after);

    let bad = json!({ "sample_id": 0, "overrides": { "12": 1.0 } });
    assert_eq!(
        c.post("/intervene", bad).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let bad = json!({ "sample_id": 0, "target_class": 8 });
    assert_eq!(
        c.post("/intervene", bad).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let bad = json!({ "sample_id": 0, "overrides": { "x": 1.0 } });
    assert_eq!(
        c.post("/intervene", bad).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let missing = json!({ "sample_id": 7 });
    assert_eq!(c.post("/intervene", missing).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn contributions_are_sorted_percentages() {
    let c = Client::new();
    let (status, body) = c.get("/contributions?sample_id=1&class=2").await;
    assert_eq!(status, StatusCode::OK);
    let got: ContributionReport = parse(&body);
    assert_eq!(got.target_class, 2);
    assert!((contribution_sum(&got) - 100.0).abs() <= 1e-9);
    assert!(got
        .rows
        .windows(2)
        .all(|w| w[0].contribution_percent >= w[1].contribution_percent));
    let want = c
        .session
        .contributions(c.session.sample(1).unwrap(), Some(2))
        .unwrap();
    assert_eq!(got, want);

    let (status, body) = c.get("/contributions?sample_id=1").await;
    assert_eq!(status, StatusCode::OK);
    let predicted = c.session.predict(c.session.sample(1).unwrap()).unwrap();
    assert_eq!(
        parse::<ContributionReport>(&body).target_class,
        predicted.predicted_class()
    );

    assert_eq!(
        c.get("/contributions?sample_id=1&class=8").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.get("/contributions?sample_id=5&class=0").await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let c = Client::new();
    let req = json!({
        "sample_id": 2,
        "target": { "kind": "concept", "index": 5 },
        "method": "ig"
    });
    let first = c.post("/attribute", req.clone()).await;
    let second = c.post("/attribute", req).await;
    assert_eq!(first, second);
    assert_eq!(c.get("/samples").await, c.get("/samples").await);
}
