//! JSON-over-HTTP access to a loaded [`Session`].
//!
//! The session is shared read-only behind an `Arc`; every response is a pure
//! function of the loaded files and the request.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use cbx_core::attribution::{AttributionConfig, Method, SmoothGrad, DEFAULT_IG_STEPS};
use cbx_core::evalkit::ContributionReport;
use cbx_core::synth::SyntheticSample;

use crate::error::CliError;
use crate::session::{thumbnail, Session, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub class_label: usize,
    pub class_name: String,
    /// Base64 binary PPM of the input image.
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub id: usize,
    pub name: String,
    pub value: f64,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub concepts: Vec<ConceptEntry>,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// `"concept"` or `"class"`.
    pub kind: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradOptions {
    pub n_samples: usize,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeOptions {
    /// Integrated-gradients steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothgrad: Option<SmoothGradOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRequest {
    pub sample_id: usize,
    pub target: TargetSpec,
    /// `lrp`, `grad` or `ig`.
    pub method: String,
    #[serde(default)]
    pub options: AttributeOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeResponse {
    /// Base64 binary PPM heatmap.
    pub map_png_or_ppm: String,
    pub reduced_grid: Vec<Vec<f64>>,
    pub peak: Peak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneRequest {
    pub sample_id: usize,
    /// Concept index (as a JSON object key) to forced value.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    #[serde(default)]
    pub target_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneResponse {
    pub old_probs: Vec<f64>,
    pub new_probs: Vec<f64>,
    pub delta: Vec<f64>,
    pub new_contributions: ContributionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionsQuery {
    pub sample_id: usize,
    #[serde(default)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }
}

impl From<cbx_core::Error> for ApiError {
    fn from(e: cbx_core::Error) -> Self {
        use cbx_core::Error as E;
        let status = match e {
            E::IndexOutOfRange { .. } | E::InvalidArgument(_) | E::ConfigInvalid(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn sample(session: &Session, id: usize) -> Result<&SyntheticSample, ApiError> {
    session
        .sample(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown sample {id}")))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T, F>(session: Arc<Session>, work: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Session) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || work(&session))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
        })?
        .map(Json)
}

pub fn samples(session: &Session) -> Result<Vec<SampleEntry>, ApiError> {
    session
        .samples()
        .iter()
        .enumerate()
        .map(|(id, s)| {
            Ok(SampleEntry {
                id,
                class_label: s.class_label,
                class_name: session.model.class_names[s.class_label].clone(),
                thumbnail: BASE64.encode(thumbnail(s)?),
            })
        })
        .collect()
}

pub fn predict(session: &Session, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let p = session.predict(sample(session, req.sample_id)?)?;
    let concepts = (0..session.model.n_concepts())
        .map(|i| ConceptEntry {
            id: i,
            name: session.model.concept_names[i].clone(),
            value: p.concepts.values[i],
            present: p.concepts.presence[i],
        })
        .collect();
    Ok(PredictResponse {
        concepts,
        predicted_class: p.predicted_class(),
        class_probs: p.class_probs,
    })
}

fn attribution_config(req: &AttributeRequest) -> Result<AttributionConfig, ApiError> {
    let method = match req.method.as_str() {
        "lrp" => Method::Lrp { rule_map: None },
        "grad" => Method::Gradient,
        "ig" => {
            let steps = req.options.steps.unwrap_or(DEFAULT_IG_STEPS);
            if steps == 0 {
                return Err(ApiError::unprocessable("steps must be at least 1"));
            }
            Method::IntegratedGradients {
                steps,
                baseline: None,
            }
        }
        other => {
            return Err(ApiError::unprocessable(format!(
                "unknown method {other:?} (lrp, grad, ig)"
            )))
        }
    };
    let mut config = AttributionConfig::new(method);
    if let Some(sg) = &req.options.smoothgrad {
        if sg.n_samples == 0 || !(sg.sigma >= 0.0 && sg.sigma.is_finite()) {
            return Err(ApiError::unprocessable(
                "smoothgrad needs n_samples >= 1 and a finite sigma >= 0",
            ));
        }
        config = config.with_smoothgrad(SmoothGrad {
            n_samples: sg.n_samples,
            sigma: sg.sigma,
            seed: sg.seed,
        });
    }
    Ok(config)
}

pub fn attribute(session: &Session, req: &AttributeRequest) -> Result<AttributeResponse, ApiError> {
    let s = sample(session, req.sample_id)?;
    let target = match req.target.kind.as_str() {
        "concept" => Target::Concept(req.target.index),
        "class" => Target::Class(req.target.index),
        other => {
            return Err(ApiError::unprocessable(format!(
                "target kind {other:?} is not concept or class"
            )))
        }
    };
    if let Some(msg) = session.target_error(target) {
        return Err(ApiError::unprocessable(msg));
    }
    let config = attribution_config(req)?;
    let ex = session.explain(s, target, &config)?;
    Ok(AttributeResponse {
        map_png_or_ppm: BASE64.encode(ex.render().to_ppm()),
        reduced_grid: ex.grid_rows(),
        peak: Peak {
            row: ex.peak.0,
            col: ex.peak.1,
        },
    })
}

pub fn intervene(session: &Session, req: &InterveneRequest) -> Result<InterveneResponse, ApiError> {
    let s = sample(session, req.sample_id)?;
    let k = session.model.n_concepts();
    let mut overrides = BTreeMap::new();
    for (key, &value) in &req.overrides {
        match key.parse::<usize>() {
            Ok(i) if i < k => {
                overrides.insert(i, value);
            }
            _ => {
                return Err(ApiError::unprocessable(format!(
                    "concept index {key:?} is not in 0..{k}"
                )))
            }
        }
    }
    if let Some(t) = req.target_class {
        if let Some(msg) = session.target_error(Target::Class(t)) {
            return Err(ApiError::unprocessable(msg));
        }
    }
    let (result, report) = session.intervene(s, &overrides, req.target_class)?;
    Ok(InterveneResponse {
        old_probs: result.old_probs,
        new_probs: result.new_probs,
        delta: result.delta,
        new_contributions: report,
    })
}

pub fn contributions(
    session: &Session,
    q: &ContributionsQuery,
) -> Result<ContributionReport, ApiError> {
    let s = sample(session, q.sample_id)?;
    if let Some(c) = q.class {
        if c >= session.model.n_classes() {
            return Err(ApiError::not_found(format!("unknown class {c}")));
        }
    }
    Ok(session.contributions(s, q.class)?)
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route(
            "/samples",
            get(|State(s): State<Arc<Session>>| async move { blocking(s, samples).await }),
        )
        .route(
            "/predict",
            post(
                |State(s): State<Arc<Session>>, Json(req): Json<PredictRequest>| async move {
                    blocking(s, move |s| predict(s, &req)).await
                },
            ),
        )
        .route(
            "/attribute",
            post(
                |State(s): State<Arc<Session>>, Json(req): Json<AttributeRequest>| async move {
                    blocking(s, move |s| attribute(s, &req)).await
                },
            ),
        )
        .route(
            "/intervene",
            post(
                |State(s): State<Arc<Session>>, Json(req): Json<InterveneRequest>| async move {
                    blocking(s, move |s| intervene(s, &req)).await
                },
            ),
        )
        .route(
            "/contributions",
            get(
                |State(s): State<Arc<Session>>, Query(q): Query<ContributionsQuery>| async move {
                    blocking(s, move |s| contributions(s, &q)).await
                },
            ),
        )
        .with_state(session)
}

/// Blocks serving `session` on `host:port` until the process is stopped.
pub fn serve(session: Session, host: &str, port: u16) -> Result<(), CliError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        println!(
            "serving {} samples on http://{}",
            session.samples().len(),
            listener.local_addr()?
        );
        axum::serve(listener, router(Arc::new(session))).await?;
        Ok(())
    })
}
