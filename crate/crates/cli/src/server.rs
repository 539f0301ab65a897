//! HTTP service behind the concept explorer.
//!
//! ```text
//! GET  /api/report            the (optionally sampled) report
//! GET  /api/audio/{clip_id}   audio bytes of a clip in the store
//! GET  /api/annotations       every stored annotation
//! POST /api/annotations       append one annotation, 201 on success
//! GET  /                      static UI files from --ui-dir
//! ```

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use ard_core::report::{parse_annotation_log, AnnotationRecord, PipelineReport};
use ard_core::store::{is_valid_id, ActivationStore};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tokio::io::AsyncWriteExt;
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8787;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub report: PathBuf,
    pub store: PathBuf,
    pub annotations: PathBuf,
    pub host: String,
    pub port: u16,
    pub ui_dir: Option<PathBuf>,
    /// Serve a seeded random subset of this many concepts.
    pub sample: Option<usize>,
    pub seed: u64,
}

struct AppState {
    report: PipelineReport,
    features: HashSet<usize>,
    store: ActivationStore,
    annotations: Mutex<PathBuf>,
}

/// Keep `n` concepts chosen by a seeded draw, in their original order.
pub fn sample_concepts(report: &mut PipelineReport, n: usize, seed: u64) {
    if n >= report.concepts.len() {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, report.concepts.len(), n).into_vec();
    keep.sort_unstable();
    let concepts = std::mem::take(&mut report.concepts);
    let mut keep = keep.into_iter().peekable();
    report.concepts = concepts
        .into_iter()
        .enumerate()
        .filter_map(|(i, c)| keep.next_if_eq(&i).map(|_| c))
        .collect();
}

pub fn router(config: &ServeConfig) -> Result<Router> {
    let mut report: PipelineReport = crate::files::read_json(&config.report)?;
    let store = ActivationStore::open(&config.store)
        .with_context(|| format!("opening store {}", config.store.display()))?;
    report.validate(Some(store.manifest()))?;
    // annotations may target any concept of the full report
    let features = report.concepts.iter().map(|c| c.feature).collect();
    if let Some(n) = config.sample {
        sample_concepts(&mut report, n, config.seed);
    }
    if let Some(parent) = config.annotations.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let state = Arc::new(AppState {
        report,
        features,
        store,
        annotations: Mutex::new(config.annotations.clone()),
    });
    let api = Router::new()
        .route("/api/report", get(get_report))
        .route("/api/audio/{clip_id}", get(get_audio))
        .route("/api/annotations", get(list_annotations).post(post_annotation))
        .with_state(state);
    Ok(match &config.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(no_ui)),
    })
}

/// Bind and serve until interrupted. The bound address is printed on
/// stdout as `listening on http://<addr>` before the first request.
pub async fn serve(config: ServeConfig) -> Result<()> {
    let app = router(&config)?;
    let listener = TcpListener::bind((config.host.as_str(), config.port))
        .await
        .with_context(|| format!("binding {}:{}", config.host, config.port))?;
    let addr: SocketAddr = listener.local_addr()?;
    println!("listening on http://{addr}");
    log::info!("serving {} on http://{addr}", config.report.display());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn get_report(State(state): State<Arc<AppState>>) -> Json<PipelineReport> {
    Json(state.report.clone())
}

pub fn audio_content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("wav") => "audio/wav",
        Some("mp3") => "audio/mpeg",
        Some("flac") => "audio/flac",
        Some("ogg" | "oga") => "audio/ogg",
        Some("opus") => "audio/opus",
        Some("m4a" | "mp4") => "audio/mp4",
        Some("webm") => "audio/webm",
        _ => "application/octet-stream",
    }
}

async fn get_audio(State(state): State<Arc<AppState>>, UrlPath(clip_id): UrlPath<String>) -> Response {
    if !is_valid_id(&clip_id) || state.store.clip(&clip_id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown clip {clip_id:?}"));
    }
    let Some(path) = state.store.audio_path(&clip_id) else {
        return error(StatusCode::NOT_FOUND, format!("clip {clip_id:?} has no audio"));
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, audio_content_type(&path))], bytes).into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            error(StatusCode::NOT_FOUND, format!("audio for clip {clip_id:?} is missing"))
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn read_log(path: &Path) -> Result<Vec<AnnotationRecord>> {
    match tokio::fs::read_to_string(path).await {
        Ok(text) => Ok(parse_annotation_log(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

async fn list_annotations(State(state): State<Arc<AppState>>) -> Response {
    let path = state.annotations.lock().await;
    match read_log(&path).await {
        Ok(records) => Json(records).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn post_annotation(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let mut record: AnnotationRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid annotation: {e}")),
    };
    if let Err(e) = record.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    if !state.features.contains(&record.concept_feature) {
        return error(
            StatusCode::BAD_REQUEST,
            format!("feature {} is not in the report", record.concept_feature),
        );
    }
    record.created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let mut line = match serde_json::to_string(&record) {
        Ok(l) => l,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    line.push('\n');

    // single writer: the lock is held until the line is on disk
    let path = state.annotations.lock().await;
    let written = async {
        let mut f = tokio::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&*path)
            .await?;
        f.write_all(line.as_bytes()).await?;
        f.sync_data().await
    }
    .await;
    match written {
        Ok(()) => (StatusCode::CREATED, Json(record)).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn no_ui() -> Html<&'static str> {
    Html(
        "<!doctype html><title>ard</title><p>No UI installed. \
         Start with <code>--ui-dir</code> to serve one. API: \
         <a href=\"/api/report\">/api/report</a>, \
         <a href=\"/api/annotations\">/api/annotations</a>.</p>",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ard_core::report::ModelMeta;

    fn report(n: usize) -> PipelineReport {
        let concepts = (0..n)
            .map(|i| ard_core::naming::ConceptRecord {
                feature: i,
                m_score: (n - i) as f64,
                name: format!("c{i}"),
                error: None,
                captions: vec![],
                caption_failures: vec![],
                representatives: vec![],
                low_representatives: vec![],
            })
            .collect();
        let meta = ModelMeta {
            d_x: 1,
            d_z: 1,
            topk: 1,
            expansion: 1,
            layer_tag: String::new(),
        };
        PipelineReport::new("0", "", meta, concepts)
    }

    #[test]
    fn sampling_keeps_order_and_is_seeded() {
        let mut a = report(50);
        sample_concepts(&mut a, 10, 3);
        assert_eq!(a.concepts.len(), 10);
        assert!(a.concepts.windows(2).all(|w| w[0].m_score > w[1].m_score));
        let mut b = report(50);
        sample_concepts(&mut b, 10, 3);
        assert_eq!(a, b);
        let mut c = report(5);
        sample_concepts(&mut c, 10, 3);
        assert_eq!(c.concepts.len(), 5);
    }

    #[test]
    fn content_types() {
        assert_eq!(audio_content_type(Path::new("a/b.wav")), "audio/wav");
        assert_eq!(audio_content_type(Path::new("b.MP3")), "audio/mpeg");
        assert_eq!(audio_content_type(Path::new("b")), "application/octet-stream");
    }
}
