//! In-process stand-ins for the external services: a diffusion backend, a
//! chat-completions endpoint and a webhook receiver. Used by the test suites
//! and for offline demos.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{ImageFormat, Rgb, RgbImage};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

/// Serves `router` on an ephemeral localhost port.
pub async fn serve(router: Router) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!(error = %e, "stub server stopped");
        }
    });
    Ok((addr, handle))
}

#[derive(Debug, Clone, Default)]
pub struct DiffusionStubConfig {
    /// The first N submissions answer HTTP 500.
    pub fail_first: u32,
    /// Submissions with these seeds always answer HTTP 500.
    pub poison_seeds: BTreeSet<u64>,
    /// Submissions with these seeds are refused by the content filter.
    pub filtered_seeds: BTreeSet<u64>,
    /// Time spent inside each submission.
    pub latency: Duration,
    /// Answer `queued` and deliver the image on the first poll.
    pub deferred: bool,
    /// Scale factor applied to requested image sizes, to keep tests light.
    pub max_side: Option<u32>,
}

#[derive(Default)]
pub struct DiffusionStubStats {
    pub submissions: AtomicU32,
    pub polls: AtomicU32,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    /// Every submission body, minus the inline images.
    pub bodies: Mutex<Vec<Value>>,
}

#[derive(Clone)]
struct DiffusionStubState {
    cfg: Arc<DiffusionStubConfig>,
    stats: Arc<DiffusionStubStats>,
    pending: Arc<Mutex<HashMap<String, String>>>,
}

pub struct DiffusionStub {
    pub addr: SocketAddr,
    pub stats: Arc<DiffusionStubStats>,
    handle: JoinHandle<()>,
}

impl DiffusionStub {
    pub async fn start(cfg: DiffusionStubConfig) -> std::io::Result<Self> {
        let stats = Arc::new(DiffusionStubStats::default());
        let state = DiffusionStubState {
            cfg: Arc::new(cfg),
            stats: stats.clone(),
            pending: Arc::default(),
        };
        let router = Router::new()
            .route("/txt2img", post(stub_submit))
            .route("/inpaint", post(stub_submit))
            .route("/jobs/{id}", get(stub_poll))
            .with_state(state);
        let (addr, handle) = serve(router).await?;
        Ok(Self { addr, stats, handle })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for DiffusionStub {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

struct InFlight<'a>(&'a DiffusionStubStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a DiffusionStubStats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn png(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("png encodes");
    buf.into_inner()
}

/// A deterministic picture for `body`: a seed-tinted gradient for scenes, or
/// the posted scene darkened under the posted mask for inpainting.
fn render(body: &Value, max_side: Option<u32>) -> Result<Vec<u8>, String> {
    let seed = body["seed"].as_u64().unwrap_or(0);
    let decode = |key: &str| -> Result<Option<image::DynamicImage>, String> {
        body.get(key)
            .and_then(Value::as_str)
            .map(|s| {
                let bytes = B64.decode(s).map_err(|e| format!("{key}: {e}"))?;
                image::load_from_memory(&bytes).map_err(|e| format!("{key}: {e}"))
            })
            .transpose()
    };
    if let (Some(scene), Some(mask)) = (decode("scene_image")?, decode("mask_image")?) {
        let mut out = scene.to_rgb8();
        let mask = mask.to_luma8();
        if mask.dimensions() != out.dimensions() {
            return Err(format!("mask {:?} does not match scene {:?}", mask.dimensions(), out.dimensions()));
        }
        for (x, y, px) in out.enumerate_pixels_mut() {
            let a = mask.get_pixel(x, y).0[0] as u32;
            for c in px.0.iter_mut() {
                *c = ((*c as u32 * (255 - a) + 20 * a) / 255) as u8;
            }
        }
        return Ok(png(&out));
    }
    let side = |key: &str| {
        let v = body[key].as_u64().unwrap_or(64) as u32;
        max_side.map_or(v, |m| v.min(m)).max(1)
    };
    let (w, h) = (side("width"), side("height"));
    let tint = [(seed & 0xff) as u8, ((seed >> 8) & 0xff) as u8, ((seed >> 16) & 0xff) as u8];
    let img = RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            tint[0].wrapping_add((x * 255 / w) as u8),
            tint[1].wrapping_add((y * 255 / h) as u8),
            tint[2],
        ])
    });
    Ok(png(&img))
}

async fn stub_submit(State(st): State<DiffusionStubState>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let _guard = InFlight::enter(&st.stats);
    let n = st.stats.submissions.fetch_add(1, Ordering::SeqCst);
    let mut logged = body.clone();
    if let Some(o) = logged.as_object_mut() {
        o.retain(|k, _| !k.ends_with("_image"));
    }
    st.stats.bodies.lock().expect("stub lock").push(logged);
    if !st.cfg.latency.is_zero() {
        tokio::time::sleep(st.cfg.latency).await;
    }
    let seed = body["seed"].as_u64().unwrap_or(0);
    if n < st.cfg.fail_first || st.cfg.poison_seeds.contains(&seed) {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "stub failure" })));
    }
    if st.cfg.filtered_seeds.contains(&seed) {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({ "code": "content_filter", "error": "refused by content filter" })),
        );
    }
    let bytes = match render(&body, st.cfg.max_side) {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({ "error": e }))),
    };
    let id = format!("stub-{n}");
    let image = B64.encode(bytes);
    if st.cfg.deferred {
        st.pending.lock().expect("stub lock").insert(id.clone(), image);
        return (StatusCode::OK, Json(json!({ "id": id, "status": "queued" })));
    }
    (StatusCode::OK, Json(json!({ "id": id, "status": "done", "image": image })))
}

async fn stub_poll(State(st): State<DiffusionStubState>, Path(id): Path<String>) -> (StatusCode, Json<Value>) {
    st.stats.polls.fetch_add(1, Ordering::SeqCst);
    match st.pending.lock().expect("stub lock").remove(&id) {
        Some(image) => (StatusCode::OK, Json(json!({ "id": id, "status": "done", "image": image }))),
        None => (StatusCode::NOT_FOUND, Json(json!({ "error": "unknown job" }))),
    }
}

/// What the chat-completions stub answers: an HTTP status and a raw body.
#[derive(Debug, Clone)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
}

impl StubReply {
    /// A 200 chat-completions response whose assistant message is `text`.
    pub fn completion(text: &str) -> Self {
        Self {
            status: 200,
            body: json!({
                "choices": [{ "index": 0, "message": { "role": "assistant", "content": text } }]
            })
            .to_string(),
        }
    }

    pub fn error(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.to_string(),
        }
    }
}

pub type Responder = Arc<dyn Fn(&Value) -> StubReply + Send + Sync>;

#[derive(Clone)]
struct VlmStubState {
    responder: Responder,
    requests: Arc<Mutex<Vec<Value>>>,
}

pub struct VlmStub {
    pub addr: SocketAddr,
    pub requests: Arc<Mutex<Vec<Value>>>,
    handle: JoinHandle<()>,
}

impl VlmStub {
    pub async fn start(responder: Responder) -> std::io::Result<Self> {
        let requests = Arc::new(Mutex::new(Vec::new()));
        let state = VlmStubState {
            responder,
            requests: requests.clone(),
        };
        let router = Router::new()
            .route("/v1/chat/completions", post(vlm_reply))
            .with_state(state);
        let (addr, handle) = serve(router).await?;
        Ok(Self { addr, requests, handle })
    }

    /// Answers every request with the same assistant text.
    pub async fn fixed(text: &str) -> std::io::Result<Self> {
        let reply = StubReply::completion(text);
        Self::start(Arc::new(move |_| reply.clone())).await
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }
}

impl Drop for VlmStub {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn vlm_reply(State(st): State<VlmStubState>, Json(body): Json<Value>) -> (StatusCode, String) {
    let reply = (st.responder)(&body);
    st.requests.lock().expect("stub lock").push(body);
    (
        StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        reply.body,
    )
}

#[derive(Clone)]
struct WebhookState {
    fail_first: u32,
    seen: Arc<AtomicU32>,
    bodies: Arc<Mutex<Vec<Value>>>,
}

/// Records every delivered alert; the first `fail_first` requests get HTTP 500.
pub struct WebhookStub {
    pub addr: SocketAddr,
    pub bodies: Arc<Mutex<Vec<Value>>>,
    pub requests: Arc<AtomicU32>,
    handle: JoinHandle<()>,
}

impl WebhookStub {
    pub async fn start(fail_first: u32) -> std::io::Result<Self> {
        let state = WebhookState {
            fail_first,
            seen: Arc::default(),
            bodies: Arc::default(),
        };
        let (requests, bodies) = (state.seen.clone(), state.bodies.clone());
        let router = Router::new().route("/hook", post(hook)).with_state(state);
        let (addr, handle) = serve(router).await?;
        Ok(Self {
            addr,
            bodies,
            requests,
            handle,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/hook", self.addr)
    }
}

impl Drop for WebhookStub {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn hook(State(st): State<WebhookState>, Json(body): Json<Value>) -> StatusCode {
    let n = st.seen.fetch_add(1, Ordering::SeqCst);
    if n < st.fail_first {
        return StatusCode::INTERNAL_SERVER_ERROR;
    }
    st.bodies.lock().expect("stub lock").push(body);
    StatusCode::OK
}
