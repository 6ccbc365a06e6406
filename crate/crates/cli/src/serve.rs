//! Review service: referral queue, frame payloads and correction intake.
//!
//! All state lives in the run directory. Corrections are appended to
//! `corrections.json` through an atomic rewrite while holding the write lock,
//! so a record is durable before its POST returns.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use dqc_core::dqc::{dice, dice_volume, diagnose_frame};
use dqc_core::experiments::{load_run, BaselineRun, CORRECTIONS_FILE, REFERRALS_FILE, SCHEMA_VERSION};
use dqc_core::hitl::{apply_corrections, CorrectionRecord, CorrectionSource, ReferralPlan};
use dqc_core::render::{gray_png, heatmap_png, ValueRange};
use dqc_core::rle::MaskRle;
use dqc_core::volumes::{read_json, write_json};
use dqc_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const INDEX_HTML: &str = include_str!("../static/index.html");

struct AppState {
    run_dir: PathBuf,
    run: BaselineRun,
    plan: ReferralPlan,
    /// Latest record per (slice, frame).
    records: RwLock<BTreeMap<(String, usize), CorrectionRecord>>,
    static_dir: Option<PathBuf>,
}

type Shared = Arc<AppState>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Status {
    Pending,
    Accepted,
    Corrected,
}

fn status_of(records: &BTreeMap<(String, usize), CorrectionRecord>, slice: &str, t: usize) -> Status {
    match records.get(&(slice.to_string(), t)) {
        None => Status::Pending,
        Some(r) if r.corrected => Status::Corrected,
        Some(_) => Status::Accepted,
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.0,
            Json(json!({ "schema_version": SCHEMA_VERSION, "error": self.1 })),
        )
            .into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

fn internal(e: Error) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

fn load_state(run_dir: &Path, static_dir: Option<PathBuf>) -> Result<AppState> {
    let run = load_run(run_dir)?;
    let referrals = run_dir.join(REFERRALS_FILE);
    if !referrals.is_file() {
        return Err(Error::Config(format!("{} not found; run `dqc refer` first", referrals.display())));
    }
    let plan: ReferralPlan = read_json(&referrals)?;
    let path = run_dir.join(CORRECTIONS_FILE);
    let stored: Vec<CorrectionRecord> = if path.is_file() { read_json(&path)? } else { Vec::new() };
    let records = stored
        .into_iter()
        .map(|r| ((r.slice_id.clone(), r.t), r))
        .collect();
    Ok(AppState {
        run_dir: run_dir.to_path_buf(),
        run,
        plan,
        records: RwLock::new(records),
        static_dir,
    })
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/referrals", get(referrals))
        .route("/api/frame/{slice}/{t}", get(frame))
        .route("/api/corrections", post(corrections))
        .route("/api/progress", get(progress))
        .route("/", get(index))
        .route("/{*path}", get(static_file))
        .with_state(state)
}

/// Serves until the process is killed. Prints the bound address first, so
/// `--port 0` can be used to pick a free port.
pub fn serve(run_dir: &Path, bind: IpAddr, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let state = Arc::new(load_state(run_dir, static_dir)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async move {
        let addr = SocketAddr::new(bind, port);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| Error::Config(format!("listener address: {e}")))?;
        println!("listening on http://{local}");
        use std::io::Write as _;
        let _ = std::io::stdout().flush();
        axum::serve(listener, router(state))
            .await
            .map_err(|e| Error::Config(format!("server error: {e}")))
    })
}

async fn referrals(State(st): State<Shared>) -> ApiResult {
    let records = st.records.read().expect("records lock");
    let mut queue: Vec<_> = st.plan.selected.iter().collect();
    queue.sort_by_key(|r| r.rank);
    let items: Vec<Value> = queue
        .into_iter()
        .map(|r| {
            json!({
                "slice": r.slice_id,
                "t": r.t,
                "q_frame": r.q_frame,
                "rank": r.rank,
                "status": status_of(&records, &r.slice_id, r.t),
            })
        })
        .collect();
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "strategy": st.plan.strategy,
        "budget": st.plan.budget,
        "referrals": items,
    })))
}

fn range_json(r: ValueRange) -> Value {
    json!({ "min": r.min, "max": r.max })
}

fn parse_frame(st: &AppState, slice: &str, t: &str) -> std::result::Result<usize, ApiError> {
    let s = st
        .run
        .slice(slice)
        .ok_or_else(|| not_found(format!("unknown slice {slice}")))?;
    let t: usize = t.parse().map_err(|_| not_found(format!("unknown frame {slice}/{t}")))?;
    if t >= s.slice.dims().frames {
        return Err(not_found(format!("unknown frame {slice}/{t}")));
    }
    Ok(t)
}

async fn frame(State(st): State<Shared>, UrlPath((slice, t)): UrlPath<(String, String)>) -> ApiResult {
    let t = parse_frame(&st, &slice, &t)?;
    let s = st.run.slice(&slice).expect("checked above");
    let dims = s.slice.dims();
    let records = st.records.read().expect("records lock");
    let current: Vec<u8> = match records.get(&(slice.clone(), t)) {
        Some(r) => r.mask_after.decode().map_err(internal)?,
        None => s.mask.frame(t).to_vec(),
    };
    let (image_png, image_range) = gray_png(s.slice.image.frame(t), dims.rows, dims.cols).map_err(internal)?;
    let (dqc_png, dqc_range) = heatmap_png(s.map.frame(t), dims.rows, dims.cols).map_err(internal)?;
    let diag = diagnose_frame(&current, dims.rows, dims.cols, t, st.run.config.connectivity);
    let dice_2d = s.slice.truth.as_ref().map(|tr| dice(&current, tr.frame(t))).transpose().map_err(internal)?;
    let rank = st
        .plan
        .selected
        .iter()
        .find(|r| r.slice_id == slice && r.t == t)
        .map(|r| r.rank);
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "slice": slice,
        "t": t,
        "frames": dims.frames,
        "rows": dims.rows,
        "cols": dims.cols,
        "image": BASE64.encode(image_png),
        "image_range": range_json(image_range),
        "mask_rle": MaskRle::encode(&current, dims.rows, dims.cols).map_err(internal)?,
        "dqc": BASE64.encode(dqc_png),
        "dqc_range": range_json(dqc_range),
        "q_frame": s.qc.q_frame[t],
        "q_frame_series": s.qc.q_frame,
        "area": diag.area,
        "component_count": diag.component_count,
        "failed": diag.failed,
        "dice_2d": dice_2d,
        "rank": rank,
        "status": status_of(&records, &slice, t),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectionRequest {
    slice: String,
    t: usize,
    #[serde(default)]
    mask_rle: Option<MaskRle>,
    #[serde(default)]
    accept: bool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn corrections(State(st): State<Shared>, body: String) -> ApiResult {
    let req: CorrectionRequest =
        serde_json::from_str(&body).map_err(|e| bad_request(format!("invalid request body: {e}")))?;
    let t = parse_frame(&st, &req.slice, &req.t.to_string())?;
    let s = st.run.slice(&req.slice).expect("checked above");
    let dims = s.slice.dims();
    let before = s.mask.frame(t);
    let (after, corrected) = match (&req.mask_rle, req.accept) {
        (Some(_), true) => return Err(bad_request("send either accept:true or mask_rle, not both")),
        (None, false) => return Err(bad_request("missing mask_rle (or accept:true)")),
        (None, true) => (before.to_vec(), false),
        (Some(rle), false) => {
            if (rle.rows, rle.cols) != (dims.rows, dims.cols) {
                return Err(bad_request(format!(
                    "mask is {}x{}, frame is {}x{}",
                    rle.rows, rle.cols, dims.rows, dims.cols
                )));
            }
            let bits = rle.decode().map_err(|e| bad_request(format!("malformed mask_rle: {e}")))?;
            (bits, true)
        }
    };
    let record = CorrectionRecord {
        slice_id: req.slice.clone(),
        t,
        corrected,
        mask_before: MaskRle::encode(before, dims.rows, dims.cols).map_err(internal)?,
        mask_after: MaskRle::encode(&after, dims.rows, dims.cols).map_err(internal)?,
        source: CorrectionSource::HumanUi,
        timestamp: Some(now_ms()),
    };

    let mut records = st.records.write().expect("records lock");
    let mut next = records.clone();
    next.insert((req.slice.clone(), t), record);
    let all: Vec<CorrectionRecord> = next.values().cloned().collect();
    write_json(st.run_dir.join(CORRECTIONS_FILE), &all).map_err(internal)?;
    *records = next;

    let diag = diagnose_frame(&after, dims.rows, dims.cols, t, st.run.config.connectivity);
    let (dice_2d, slice_dice) = match &s.slice.truth {
        Some(truth) => {
            let fixed = apply_corrections(&s.mask, &req.slice, &all).map_err(internal)?;
            (
                Some(dice(&after, truth.frame(t)).map_err(internal)?),
                Some(dice_volume(&fixed, truth).map_err(internal)?),
            )
        }
        None => (None, None),
    };
    let progress = progress_json(&st, &records);
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "slice": req.slice,
        "t": t,
        "corrected": corrected,
        "area": diag.area,
        "component_count": diag.component_count,
        "failed": diag.failed,
        "dice_2d": dice_2d,
        "slice_dice": slice_dice,
        "progress": progress,
    })))
}

fn progress_json(st: &AppState, records: &BTreeMap<(String, usize), CorrectionRecord>) -> Value {
    let (mut pending, mut accepted, mut corrected) = (0usize, 0usize, 0usize);
    for r in &st.plan.selected {
        match status_of(records, &r.slice_id, r.t) {
            Status::Pending => pending += 1,
            Status::Accepted => accepted += 1,
            Status::Corrected => corrected += 1,
        }
    }
    json!({
        "total": st.plan.selected.len(),
        "pending": pending,
        "accepted": accepted,
        "corrected": corrected,
    })
}

async fn progress(State(st): State<Shared>) -> ApiResult {
    let records = st.records.read().expect("records lock");
    let mut body = progress_json(&st, &records);
    body["schema_version"] = json!(SCHEMA_VERSION);
    Ok(Json(body))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn index(State(st): State<Shared>) -> Response {
    serve_static(&st, "index.html")
}

async fn static_file(State(st): State<Shared>, UrlPath(path): UrlPath<String>) -> Response {
    serve_static(&st, &path)
}

fn serve_static(st: &AppState, rel: &str) -> Response {
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return not_found("no such file").into_response();
    }
    match &st.static_dir {
        Some(dir) => match std::fs::read(dir.join(rel)) {
            Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel))], bytes).into_response(),
            Err(_) => not_found(format!("no such file {}", rel.display())).into_response(),
        },
        None if rel == Path::new("index.html") => {
            ([(header::CONTENT_TYPE, content_type(rel))], INDEX_HTML).into_response()
        }
        None => not_found(format!("no such file {}", rel.display())).into_response(),
    }
}
