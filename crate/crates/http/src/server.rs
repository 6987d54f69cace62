//! Deterministic mock of all four services.
//!
//! Each reply is a pure function of the request body hash and the fixture
//! directory. With a fixture directory:
//!
//! * `<hash>.txt` overrides the chat reply for that request.
//! * `<hash>.status` is a fault plan: whitespace separated tokens consumed
//!   one per request with that hash. A number is returned as the HTTP
//!   status; `delay=<ms>` stalls before answering normally. Once the plan is
//!   used up the request is served normally.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{FromRequest, Multipart, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use tokio::sync::oneshot;
use vlb_core::clients::mock::{fixture_response, mock_inpaint, respond, word_count, MockEmbed, MockSegment};
use vlb_core::clients::{
    ChatRequest, EmbedInput, EmbedService, InpaintRequest, InpaintTask, SegmentService, Usage,
};
use vlb_core::model::sha256_hex;
use vlb_core::store::{decode_gray, decode_rgb, encode_png_gray, encode_png_rgb};

use crate::wire::{
    b64, parse_keep, unb64, AssistantMessage, ChatCompletion, Choice, EmbedItem, EmbedRequest, EmbedResponse,
    SegmentWire, WireMask, CHAT_PATH, EMBED_PATH, INPAINT_PATH, REQUEST_HASH_HEADER, SEGMENT_PATH,
};

struct Inner {
    fixtures: Option<PathBuf>,
    served: Mutex<HashMap<String, usize>>,
    embed: MockEmbed,
    segment: MockSegment,
}

#[derive(Clone)]
struct MockState(Arc<Inner>);

enum Fault {
    Status(StatusCode),
    Delay(Duration),
}

fn read_plan(dir: &Path, hash: &str) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(dir.join(format!("{hash}.status"))).ok()?;
    Some(text.split_whitespace().map(String::from).collect())
}

impl MockState {
    fn next_fault(&self, hash: &str) -> Option<Fault> {
        let plan = read_plan(self.0.fixtures.as_deref()?, hash)?;
        let n = {
            let mut served = self.0.served.lock().expect("served lock");
            let n = served.entry(hash.to_string()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let tok = plan.get(n)?;
        if let Some(ms) = tok.strip_prefix("delay=") {
            return ms.parse().ok().map(|ms| Fault::Delay(Duration::from_millis(ms)));
        }
        tok.parse::<u16>()
            .ok()
            .and_then(|s| StatusCode::from_u16(s).ok())
            .map(Fault::Status)
    }

    /// Applies the fault plan; `Some` short-circuits the request.
    async fn fault(&self, hash: &str) -> Option<Response> {
        match self.next_fault(hash)? {
            Fault::Status(s) => Some((s, hashed(hash), "injected fault").into_response()),
            Fault::Delay(d) => {
                tokio::time::sleep(d).await;
                None
            }
        }
    }
}

fn hashed(hash: &str) -> [(&'static str, String); 1] {
    [(REQUEST_HASH_HEADER, hash.to_string())]
}

fn bad(e: impl ToString) -> Response {
    (StatusCode::BAD_REQUEST, e.to_string()).into_response()
}

async fn chat(State(s): State<MockState>, body: Bytes) -> Response {
    let hash = sha256_hex(&body);
    if let Some(r) = s.fault(&hash).await {
        return r;
    }
    let req: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad(e),
    };
    if let Err(e) = req.validate() {
        return bad(e);
    }
    let text = s
        .0
        .fixtures
        .as_deref()
        .and_then(|d| fixture_response(d, &hash))
        .unwrap_or_else(|| respond(&req));
    let usage = Usage {
        prompt_tokens: word_count(&req.text()),
        completion_tokens: word_count(&text),
    };
    let c = ChatCompletion {
        model: req.model,
        choices: vec![Choice {
            index: 0,
            message: AssistantMessage {
                role: "assistant".into(),
                content: text,
            },
        }],
        usage,
    };
    (hashed(&hash), axum::Json(c)).into_response()
}

/// Field name to bytes.
async fn form_fields(headers: &HeaderMap, body: Bytes) -> Result<HashMap<String, Vec<u8>>, Response> {
    let mut req = Request::new(Body::from(body));
    if let Some(ct) = headers.get(CONTENT_TYPE) {
        req.headers_mut().insert(CONTENT_TYPE, ct.clone());
    }
    let mut mp = Multipart::from_request(req, &()).await.map_err(IntoResponse::into_response)?;
    let mut out = HashMap::new();
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(bad)?;
        out.insert(name, bytes.to_vec());
    }
    Ok(out)
}

fn field<'a>(f: &'a HashMap<String, Vec<u8>>, name: &str) -> Result<&'a [u8], Response> {
    f.get(name)
        .map(Vec::as_slice)
        .ok_or_else(|| bad(format!("missing field `{name}`")))
}

fn text_field(f: &HashMap<String, Vec<u8>>, name: &str) -> Result<String, Response> {
    String::from_utf8(field(f, name)?.to_vec()).map_err(bad)
}

async fn inpaint_inner(s: MockState, headers: HeaderMap, body: Bytes) -> Result<Response, Response> {
    let hash = sha256_hex(&body);
    if let Some(r) = s.fault(&hash).await {
        return Ok(r);
    }
    let f = form_fields(&headers, body).await?;
    let task: InpaintTask = text_field(&f, "task")?.parse().map_err(bad)?;
    let keep = match f.get("keep") {
        Some(_) => Some(parse_keep(&text_field(&f, "keep")?).map_err(bad)?),
        None => None,
    };
    let req = InpaintRequest {
        task,
        image: decode_rgb(field(&f, "image")?).map_err(bad)?,
        mask: decode_gray(field(&f, "mask")?).map_err(bad)?,
        prompt: text_field(&f, "prompt")?,
        keep,
    };
    req.validate().map_err(bad)?;
    let png = encode_png_rgb(&mock_inpaint(&req));
    Ok((hashed(&hash), [(CONTENT_TYPE.as_str(), "image/png")], png).into_response())
}

async fn inpaint(State(s): State<MockState>, headers: HeaderMap, body: Bytes) -> Response {
    inpaint_inner(s, headers, body).await.unwrap_or_else(|r| r)
}

async fn segment_inner(s: MockState, headers: HeaderMap, body: Bytes) -> Result<Response, Response> {
    let hash = sha256_hex(&body);
    if let Some(r) = s.fault(&hash).await {
        return Ok(r);
    }
    let f = form_fields(&headers, body).await?;
    let img = decode_rgb(field(&f, "image")?).map_err(bad)?;
    let resp = s.0.segment.segment(&img).map_err(bad)?;
    let wire = SegmentWire {
        masks: resp
            .masks
            .iter()
            .map(|m| WireMask {
                serial: m.serial,
                area: m.area,
                png: b64(&encode_png_gray(&m.mask)),
            })
            .collect(),
    };
    Ok((hashed(&hash), axum::Json(wire)).into_response())
}

async fn segment(State(s): State<MockState>, headers: HeaderMap, body: Bytes) -> Response {
    segment_inner(s, headers, body).await.unwrap_or_else(|r| r)
}

async fn embed_inner(s: MockState, body: Bytes) -> Result<Response, Response> {
    let hash = sha256_hex(&body);
    if let Some(r) = s.fault(&hash).await {
        return Ok(r);
    }
    let req: EmbedRequest = serde_json::from_slice(&body).map_err(bad)?;
    let inputs = req
        .inputs
        .into_iter()
        .map(|i| match i {
            EmbedItem::Image { png } => Ok(EmbedInput::Image(
                decode_rgb(&unb64(&png).map_err(bad)?).map_err(bad)?,
            )),
            EmbedItem::Text { text } => Ok(EmbedInput::Text(text)),
        })
        .collect::<Result<Vec<_>, Response>>()?;
    let vectors = s.0.embed.embed(&inputs).map_err(bad)?;
    Ok((hashed(&hash), axum::Json(EmbedResponse { vectors })).into_response())
}

async fn embed(State(s): State<MockState>, body: Bytes) -> Response {
    embed_inner(s, body).await.unwrap_or_else(|r| r)
}

pub fn router(fixtures: Option<PathBuf>) -> Router {
    let state = MockState(Arc::new(Inner {
        fixtures,
        served: Mutex::default(),
        embed: MockEmbed::default(),
        segment: MockSegment::default(),
    }));
    Router::new()
        .route(CHAT_PATH, post(chat))
        .route(INPAINT_PATH, post(inpaint))
        .route(SEGMENT_PATH, post(segment))
        .route(EMBED_PATH, post(embed))
        .with_state(state)
}

fn runtime() -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
}

/// Serves on `addr` until the process exits.
pub fn serve_forever(fixtures: Option<PathBuf>, addr: SocketAddr) -> io::Result<()> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        axum::serve(listener, router(fixtures)).await
    })
}

/// A mock server on a background thread; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(fixtures: Option<PathBuf>, addr: SocketAddr) -> io::Result<Self> {
        let std_listener = TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let rt = runtime()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                axum::serve(listener, router(fixtures))
                    .with_graceful_shutdown(async {
                        rx.await.ok();
                    })
                    .await
            })
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
