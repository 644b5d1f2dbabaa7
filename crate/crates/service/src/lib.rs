//! HTTP review API over a spinometry data directory.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/studies` | study summaries, sorted by id |
//! | GET | `/studies/{id}/image` | 8-bit grayscale PNG (`?rater=` applies that record's crop) |
//! | GET/PUT | `/studies/{id}/annotations/{rater}` | revisioned annotation |
//! | POST | `/compute` | parameters for a keypoint set |
//! | GET | `/cohort/report?pred=&gt=` | evaluation report |

use std::future::Future;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use spinometry::dataset::{AnnotationRecord, ClinicalMetadata, DatasetError, Rect};
use spinometry::geometry::{compute_parameters, KeypointSet, Landmark, SpinopelvicParameters, View};
use spinometry::report::{
    default_thresholds, evaluate_cohort, parse_thresholds, EvaluationReport, ReportError,
    ReportOptions,
};
use spinometry::store::{AnnotationRevision, Store, StoreError};

pub const DEFAULT_BIND: &str = "127.0.0.1:8731";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub readonly: bool,
    /// Allowed browser origin; `*` allows any.
    pub cors_origin: Option<String>,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    DataDir(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Store>,
    readonly: bool,
}

impl AppState {
    pub fn new(store: Store, readonly: bool) -> Self {
        AppState { store: Arc::new(store), readonly }
    }
}

/// JSON error body: `{"error": kind, "message": ..., "detail": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detail: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_revision: Option<u64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody { error: kind.into(), message: message.into(), detail: vec![], current_revision: None },
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.body.error, self.body.message);
        }
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::StudyNotFound(_) | StoreError::InvalidId(_) => ApiError::not_found(message),
            StoreError::RevisionConflict { current, .. } => {
                let mut err = ApiError::new(StatusCode::CONFLICT, "RevisionConflict", message);
                err.body.current_revision = Some(current);
                err
            }
            StoreError::Dataset(DatasetError::InvariantViolation(detail)) => {
                let mut err =
                    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvariantViolation", "record is invalid");
                err.body.detail = detail;
                err
            }
            StoreError::Dataset(d) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, d.kind(), message),
            StoreError::DataDir(_) | StoreError::Io { .. } => ApiError::internal(message),
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        let kind = match &e {
            ReportError::EmptyCohort => "EmptyCohort",
            ReportError::Alignment(_) => "AlignmentError",
            ReportError::Duplicate(_) => "DuplicateAnnotation",
            ReportError::Eval(_) => "EvaluationError",
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, kind, e.to_string())
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub width_px: u32,
    pub height_px: u32,
    pub pixel_spacing_px_per_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterState {
    pub rater_id: String,
    pub revision: Option<u64>,
    pub view: Option<View>,
    pub complete: bool,
    pub missing: Vec<Landmark>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub has_image: bool,
    pub image: Option<ImageInfo>,
    pub rater_ids: Vec<String>,
    pub metadata: Option<ClinicalMetadata>,
    pub raters: Vec<RaterState>,
}

/// Built from the files on every call.
pub fn study_summaries(store: &Store) -> Result<Vec<StudySummary>, StoreError> {
    let mut out = Vec::new();
    for study_id in store.study_ids()? {
        let rater_ids = store.rater_ids(&study_id)?;
        let mut image = None;
        let mut metadata = None;
        let mut raters = Vec::with_capacity(rater_ids.len());
        for rater in &rater_ids {
            match store.load(&study_id, rater) {
                Ok(Some(rev)) => {
                    let rec = &rev.record;
                    if rec.view() == View::WholeSpine || image.is_none() {
                        image.get_or_insert(ImageInfo {
                            width_px: rec.image.width_px,
                            height_px: rec.image.height_px,
                            pixel_spacing_px_per_mm: rec.image.pixel_spacing_px_per_mm,
                        });
                    }
                    metadata.get_or_insert_with(|| rec.metadata.clone());
                    raters.push(RaterState {
                        rater_id: rater.clone(),
                        revision: Some(rev.revision),
                        view: Some(rec.view()),
                        complete: rec.keypoints.is_complete(),
                        missing: rec.keypoints.missing(),
                        error: None,
                    });
                }
                Ok(None) => {}
                Err(e) => raters.push(RaterState {
                    rater_id: rater.clone(),
                    revision: None,
                    view: None,
                    complete: false,
                    missing: vec![],
                    error: Some(e.to_string()),
                }),
            }
        }
        out.push(StudySummary {
            has_image: store.image_path(&study_id).is_some(),
            study_id,
            image,
            rater_ids,
            metadata,
            raters,
        });
    }
    Ok(out)
}

/// Min-max window to 8 bits, optionally cropped first.
pub fn display_png(source: &[u8], crop: Option<Rect>) -> Result<Vec<u8>, image::ImageError> {
    let mut img = image::load_from_memory(source)?;
    if let Some(r) = crop {
        let x = r.x.max(0.0).floor() as u32;
        let y = r.y.max(0.0).floor() as u32;
        let w = (r.w.max(0.0).ceil() as u32).min(img.width().saturating_sub(x));
        let h = (r.h.max(0.0).ceil() as u32).min(img.height().saturating_sub(y));
        img = img.crop_imm(x, y, w, h);
    }
    let luma = img.to_luma16();
    let (lo, hi) = luma
        .pixels()
        .fold((u16::MAX, u16::MIN), |(lo, hi), p| (lo.min(p.0[0]), hi.max(p.0[0])));
    let span = f64::from(hi.saturating_sub(lo));
    let out = GrayImage::from_fn(luma.width(), luma.height(), |x, y| {
        let v = luma.get_pixel(x, y).0[0];
        if span == 0.0 {
            Luma([0])
        } else {
            Luma([(f64::from(v - lo) * 255.0 / span).round() as u8])
        }
    });
    let mut bytes = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(out).write_to(&mut bytes, ImageFormat::Png)?;
    Ok(bytes.into_inner())
}

async fn list_studies(State(app): State<AppState>) -> Result<Json<Vec<StudySummary>>, ApiError> {
    blocking(move || Ok(study_summaries(&app.store)?)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    rater: Option<String>,
}

async fn study_image(
    State(app): State<AppState>,
    Path(study): Path<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let png = blocking(move || {
        let path = app
            .store
            .image_path(&study)
            .ok_or_else(|| ApiError::not_found(format!("no image for study {study}")))?;
        let crop = match &q.rater {
            Some(rater) => app
                .store
                .load(&study, rater)?
                .ok_or_else(|| ApiError::not_found(format!("no annotation {study}/{rater}")))?
                .record
                .image
                .crop,
            None => None,
        };
        let bytes = std::fs::read(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        display_png(&bytes, crop).map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "ImageDecode", format!("{}: {e}", path.display()))
        })
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], png).into_response())
}

async fn get_annotation(
    State(app): State<AppState>,
    Path((study, rater)): Path<(String, String)>,
) -> Result<Json<AnnotationRevision>, ApiError> {
    blocking(move || {
        if !app.store.study_exists(&study) {
            return Err(ApiError::not_found(format!("study {study} not found")));
        }
        app.store
            .load(&study, &rater)?
            .ok_or_else(|| ApiError::not_found(format!("no annotation {study}/{rater}")))
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PutAnnotation {
    pub expected_revision: u64,
    pub record: AnnotationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PutResult {
    pub revision: u64,
}

fn invalid_body(e: serde_json::Error) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidBody", e.to_string())
}

async fn put_annotation(
    State(app): State<AppState>,
    Path((study, rater)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<PutResult>, ApiError> {
    if app.readonly {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "ReadOnly", "server is read-only"));
    }
    let put: PutAnnotation = serde_json::from_slice(&body).map_err(invalid_body)?;
    blocking(move || {
        let revision = app.store.put(&study, &rater, &put.record, put.expected_revision)?;
        Ok(PutResult { revision })
    })
    .await
    .map(Json)
}

async fn compute(body: Bytes) -> Result<Json<SpinopelvicParameters>, ApiError> {
    let ks: KeypointSet = serde_json::from_slice(&body).map_err(invalid_body)?;
    compute_parameters(&ks)
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.kind(), e.to_string()))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    pred: String,
    gt: String,
    thresholds: Option<String>,
}

/// Report over the stored annotations of two raters, including their
/// lumbosacral siblings. Matches the evaluate command on the same files.
pub fn cohort_report(
    store: &Store,
    pred: &str,
    gt: &str,
    thresholds_mm: Vec<f64>,
) -> Result<EvaluationReport, ApiError> {
    let preds = store.cohort_with_lumbosacral(pred)?;
    let gts = store.cohort_with_lumbosacral(gt)?;
    let opts = ReportOptions { thresholds_mm, ..ReportOptions::default() };
    Ok(evaluate_cohort(preds, gts, &opts)?)
}

async fn report(
    State(app): State<AppState>,
    Query(q): Query<ReportQuery>,
) -> Result<Json<EvaluationReport>, ApiError> {
    let thresholds = match &q.thresholds {
        Some(text) => parse_thresholds(text)
            .map_err(|m| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidThresholds", m))?,
        None => default_thresholds(),
    };
    blocking(move || cohort_report(&app.store, &q.pred, &q.gt, thresholds)).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", get(list_studies))
        .route("/studies/{id}/image", get(study_image))
        .route("/studies/{id}/annotations/{rater}", get(get_annotation).put(put_annotation))
        .route("/compute", post(compute))
        .route("/cohort/report", get(report))
        .with_state(state)
}

fn cors_layer(origin: &str) -> Result<CorsLayer, ServeError> {
    let allow = if origin == "*" {
        AllowOrigin::any()
    } else {
        AllowOrigin::exact(HeaderValue::from_str(origin).map_err(|_| ServeError::Cors(origin.to_string()))?)
    };
    Ok(CorsLayer::new().allow_origin(allow).allow_methods(Any).allow_headers(Any))
}

/// Full application for `config`, including the optional CORS layer.
pub fn app(config: &ServiceConfig) -> Result<Router, ServeError> {
    let store = Store::open(&config.data_dir)?;
    let router = router(AppState::new(store, config.readonly));
    Ok(match &config.cors_origin {
        Some(origin) => router.layer(cors_layer(origin)?),
        None => router,
    })
}

/// Serves until `shutdown` resolves; in-flight requests finish first.
pub async fn serve(
    config: ServiceConfig,
    bind: SocketAddr,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let app = app(&config)?;
    let n = Store::open(&config.data_dir)?.study_ids()?.len();
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|source| ServeError::Bind { addr: bind, source })?;
    log::info!(
        "serving {n} studies from {} on http://{}{}",
        config.data_dir.display(),
        listener.local_addr()?,
        if config.readonly { " (read-only)" } else { "" }
    );
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    log::info!("shut down cleanly");
    Ok(())
}

/// Resolves on Ctrl-C.
pub async fn ctrl_c() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::warn!("cannot listen for Ctrl-C: {e}");
        std::future::pending::<()>().await;
    }
}
