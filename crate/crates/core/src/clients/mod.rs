//! Typed protocol surface for the four external services: chat (vision LLM),
//! inpainting, segmentation and embedding.
//!
//! Transports implement the service traits; the free functions in this
//! module ([`inpaint`], [`segment`], [`embed`]) wrap every call with the
//! pre- and post-condition checks so a bad request never reaches the wire.

pub mod mock;
mod retry;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use base64::Engine;
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::index::{EmbeddingVector, IndexError};
use crate::model::sha256_hex;
use crate::store::{decode_rgb, encode_png_rgb};

pub use retry::{with_retry, Attempt, RetryPolicy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u64 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("service returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

/// One content part of a chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

const PNG_DATA_PREFIX: &str = "data:image/png;base64,";

impl Part {
    pub fn text(t: impl Into<String>) -> Self {
        Part::Text { text: t.into() }
    }

    pub fn png(bytes: &[u8]) -> Self {
        Part::ImageUrl {
            image_url: ImageUrl {
                url: format!(
                    "{PNG_DATA_PREFIX}{}",
                    base64::engine::general_purpose::STANDARD.encode(bytes)
                ),
            },
        }
    }

    pub fn image(img: &RgbImage) -> Self {
        Part::png(&encode_png_rgb(img))
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text { text } => Some(text),
            Part::ImageUrl { .. } => None,
        }
    }

    /// Decoded PNG bytes of an inline image part.
    pub fn image_bytes(&self) -> Option<Vec<u8>> {
        match self {
            Part::ImageUrl { image_url } => image_url
                .url
                .strip_prefix(PNG_DATA_PREFIX)
                .and_then(|b| base64::engine::general_purpose::STANDARD.decode(b).ok()),
            Part::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<Part>,
}

impl Message {
    pub fn user(content: Vec<Part>) -> Self {
        Self {
            role: "user".into(),
            content,
        }
    }
}

/// Chat-completion request in the common JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, parts: Vec<Part>) -> Self {
        Self {
            model: model.into(),
            messages: vec![Message::user(parts)],
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    /// Exact bytes sent on the wire.
    pub fn wire_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.wire_bytes())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.messages.is_empty() {
            return Err(ServiceError::Precondition("chat request has no messages".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ServiceError::Precondition(format!(
                "temperature {} out of range",
                self.temperature
            )));
        }
        Ok(())
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| m.content.iter().filter_map(Part::as_text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> Vec<Vec<u8>> {
        self.messages
            .iter()
            .flat_map(|m| m.content.iter().filter_map(Part::image_bytes))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub attempts: u32,
    pub request_hash: String,
}

pub trait ChatService: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError>;
}

/// A chat service bound to one model name.
#[derive(Clone)]
pub struct ChatEndpoint {
    pub service: Arc<dyn ChatService>,
    pub model: String,
}

impl fmt::Debug for ChatEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatEndpoint").field("model", &self.model).finish()
    }
}

impl ChatEndpoint {
    pub fn new(service: Arc<dyn ChatService>, model: impl Into<String>) -> Self {
        Self {
            service,
            model: model.into(),
        }
    }

    pub fn request(&self, parts: Vec<Part>) -> ChatRequest {
        ChatRequest::new(self.model.clone(), parts)
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError> {
        req.validate()?;
        self.service.chat(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintTask {
    Add,
    Remove,
    Outpaint,
}

impl InpaintTask {
    pub fn as_str(self) -> &'static str {
        match self {
            InpaintTask::Add => "add",
            InpaintTask::Remove => "remove",
            InpaintTask::Outpaint => "outpaint",
        }
    }
}

impl std::str::FromStr for InpaintTask {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" => Ok(InpaintTask::Add),
            "remove" => Ok(InpaintTask::Remove),
            "outpaint" => Ok(InpaintTask::Outpaint),
            other => Err(ServiceError::Precondition(format!("unknown inpaint task `{other}`"))),
        }
    }
}

/// Axis-aligned pixel rectangle `[x, x+width) × [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub task: InpaintTask,
    /// Target canvas. For outpainting this already holds the pasted original.
    pub image: RgbImage,
    /// Single channel, nonzero where content is generated.
    pub mask: GrayImage,
    pub prompt: String,
    /// Outpainting only: the rectangle holding the original pixels.
    pub keep: Option<Rect>,
}

impl InpaintRequest {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let (w, h) = self.image.dimensions();
        if self.mask.dimensions() != (w, h) {
            return Err(ServiceError::Precondition(format!(
                "mask {}x{} does not match canvas {w}x{h}",
                self.mask.width(),
                self.mask.height()
            )));
        }
        let area = self.mask.pixels().filter(|p| p.0[0] != 0).count() as u64;
        match self.task {
            InpaintTask::Add | InpaintTask::Remove => {
                if area == 0 || area >= w as u64 * h as u64 {
                    return Err(ServiceError::Precondition(format!(
                        "{} mask area {area} must be in (0, {})",
                        self.task.as_str(),
                        w as u64 * h as u64
                    )));
                }
            }
            InpaintTask::Outpaint => {
                let keep = self.keep.ok_or_else(|| {
                    ServiceError::Precondition("outpaint request without keep rectangle".into())
                })?;
                let exact = self
                    .mask
                    .enumerate_pixels()
                    .all(|(x, y, p)| (p.0[0] == 0) == keep.contains(x, y));
                if !exact {
                    return Err(ServiceError::Precondition(
                        "outpaint mask must cover exactly the border extension".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Stable content hash used by transports and mocks.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.task.as_str().as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(self.prompt.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&self.image.width().to_le_bytes());
        bytes.extend_from_slice(&self.image.height().to_le_bytes());
        bytes.extend_from_slice(self.image.as_raw());
        bytes.extend_from_slice(self.mask.as_raw());
        sha256_hex(bytes)
    }
}

pub trait InpaintService: Send + Sync {
    fn inpaint(&self, req: &InpaintRequest) -> Result<RgbImage, ServiceError>;
}

/// Validates, calls, and checks that the result keeps the canvas size.
pub fn inpaint(svc: &dyn InpaintService, req: &InpaintRequest) -> Result<RgbImage, ServiceError> {
    req.validate()?;
    let out = svc.inpaint(req)?;
    if out.dimensions() != req.image.dimensions() {
        return Err(ServiceError::InvalidResponse(format!(
            "inpaint returned {}x{}, expected {}x{}",
            out.width(),
            out.height(),
            req.image.width(),
            req.image.height()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub serial: u32,
    pub mask: GrayImage,
    pub area: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentResponse {
    pub masks: Vec<SegmentMask>,
}

impl SegmentResponse {
    pub fn validate(&self, width: u32, height: u32) -> Result<(), ServiceError> {
        let mut serials: Vec<u32> = self.masks.iter().map(|m| m.serial).collect();
        serials.sort_unstable();
        if serials.iter().enumerate().any(|(i, &s)| s != i as u32 + 1) {
            return Err(ServiceError::InvalidResponse(format!(
                "segment serials {serials:?} are not 1..={}",
                serials.len()
            )));
        }
        for m in &self.masks {
            if m.mask.dimensions() != (width, height) {
                return Err(ServiceError::InvalidResponse(format!(
                    "mask {} has wrong dimensions",
                    m.serial
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, serial: u32) -> Option<&SegmentMask> {
        self.masks.iter().find(|m| m.serial == serial)
    }
}

pub trait SegmentService: Send + Sync {
    fn segment(&self, image: &RgbImage) -> Result<SegmentResponse, ServiceError>;
}

pub fn segment(svc: &dyn SegmentService, image: &RgbImage) -> Result<SegmentResponse, ServiceError> {
    let resp = svc.segment(image)?;
    resp.validate(image.width(), image.height())?;
    Ok(resp)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedInput {
    Image(RgbImage),
    Text(String),
}

pub trait EmbedService: Send + Sync {
    /// Raw vectors, one per input, possibly not normalized.
    fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, ServiceError>;
}

/// Embeds inputs and normalizes client-side.
pub fn embed(
    svc: &dyn EmbedService,
    items: &[(String, EmbedInput)],
) -> Result<Vec<EmbeddingVector<f32>>, ServiceError> {
    let inputs: Vec<EmbedInput> = items.iter().map(|(_, i)| i.clone()).collect();
    let raw = svc.embed(&inputs)?;
    if raw.len() != items.len() {
        return Err(ServiceError::InvalidResponse(format!(
            "embed returned {} vectors for {} inputs",
            raw.len(),
            items.len()
        )));
    }
    items
        .iter()
        .zip(raw)
        .map(|((id, _), v)| {
            EmbeddingVector::normalized(id.clone(), v)
                .map_err(|e: IndexError| ServiceError::InvalidResponse(e.to_string()))
        })
        .collect()
}

/// The external services one bootstrap run talks to.
#[derive(Clone)]
pub struct Services {
    /// Generator model used by the bootstrapping strategies.
    pub chat: ChatEndpoint,
    pub judge: Option<ChatEndpoint>,
    pub inpaint: Arc<dyn InpaintService>,
    pub segment: Arc<dyn SegmentService>,
    pub embed: Arc<dyn EmbedService>,
    /// Sampling temperature for generation calls (evaluation always uses 0).
    pub generation_temperature: f64,
}

/// One logged chat exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub endpoint: String,
    pub request_hash: String,
    pub response: String,
    pub attempts: u32,
}

/// Request-hash keyed log of every chat exchange; iteration order is sorted
/// and therefore independent of scheduling.
#[derive(Debug, Default)]
pub struct ProvenanceLog {
    entries: Mutex<BTreeMap<(String, String), (String, u32)>>,
}

impl ProvenanceLog {
    pub fn record(&self, endpoint: &str, request_hash: &str, response: &str, attempts: u32) {
        self.entries.lock().expect("log lock").insert(
            (endpoint.to_string(), request_hash.to_string()),
            (response.to_string(), attempts),
        );
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.entries
            .lock()
            .expect("log lock")
            .iter()
            .map(|((endpoint, request_hash), (response, attempts))| LogEntry {
                endpoint: endpoint.clone(),
                request_hash: request_hash.clone(),
                response: response.clone(),
                attempts: *attempts,
            })
            .collect()
    }

    /// Returns the sorted entries and clears the log.
    pub fn take(&self) -> Vec<LogEntry> {
        let out = self.entries();
        self.entries.lock().expect("log lock").clear();
        out
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Chat service wrapper that records each exchange in a [`ProvenanceLog`].
pub struct RecordingChat {
    pub label: String,
    pub inner: Arc<dyn ChatService>,
    pub log: Arc<ProvenanceLog>,
}

impl ChatService for RecordingChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError> {
        let resp = self.inner.chat(req)?;
        self.log
            .record(&self.label, &resp.request_hash, &resp.text, resp.attempts);
        Ok(resp)
    }
}

/// Decodes an inline PNG into RGB.
pub fn decode_image_part(bytes: &[u8]) -> Result<RgbImage, ServiceError> {
    decode_rgb(bytes).map_err(|e| ServiceError::InvalidResponse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::mock::{MockEmbed, MockInpaint};
    use super::*;
    use image::{Luma, Rgb};

    fn canvas(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([20, 40, 60]))
    }

    fn block_mask(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([if x < w / 2 && y < h / 2 { 255 } else { 0 }]))
    }

    #[test]
    fn request_hash_is_reproducible() {
        let a = ChatRequest::new("m", vec![Part::text("hi"), Part::image(&canvas(2, 2))]);
        let b = ChatRequest::new("m", vec![Part::text("hi"), Part::image(&canvas(2, 2))]);
        assert_eq!(a.wire_bytes(), b.wire_bytes());
        assert_eq!(a.hash(), b.hash());
        let mut c = b.clone();
        c.seed = Some(1);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn chat_wire_shape() {
        let r = ChatRequest::new("gpt", vec![Part::text("q"), Part::png(b"\x89PNG")]);
        let v: serde_json::Value = serde_json::from_slice(&r.wire_bytes()).unwrap();
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"][0]["type"], "text");
        assert_eq!(v["messages"][0]["content"][1]["type"], "image_url");
        assert!(v["messages"][0]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(r.images(), vec![b"\x89PNG".to_vec()]);
    }

    #[test]
    fn empty_chat_request_rejected() {
        let mut r = ChatRequest::new("m", vec![]);
        r.messages.clear();
        assert!(matches!(r.validate(), Err(ServiceError::Precondition(_))));
    }

    #[test]
    fn mismatched_mask_fails_before_the_call() {
        struct Panics;
        impl InpaintService for Panics {
            fn inpaint(&self, _: &InpaintRequest) -> Result<RgbImage, ServiceError> {
                panic!("must not be called");
            }
        }
        let req = InpaintRequest {
            task: InpaintTask::Remove,
            image: canvas(8, 8),
            mask: block_mask(4, 8),
            prompt: "cup".into(),
            keep: None,
        };
        assert!(matches!(inpaint(&Panics, &req), Err(ServiceError::Precondition(_))));
    }

    #[test]
    fn full_canvas_add_mask_rejected() {
        let req = InpaintRequest {
            task: InpaintTask::Add,
            image: canvas(4, 4),
            mask: GrayImage::from_pixel(4, 4, Luma([255])),
            prompt: "cup".into(),
            keep: None,
        };
        assert!(req.validate().is_err());
    }

    #[test]
    fn mock_inpaint_preserves_dims_and_fills_magenta() {
        let req = InpaintRequest {
            task: InpaintTask::Add,
            image: canvas(8, 6),
            mask: block_mask(8, 6),
            prompt: "cup".into(),
            keep: None,
        };
        let out = inpaint(&MockInpaint, &req).unwrap();
        assert_eq!(out.dimensions(), (8, 6));
        assert_eq!(out.get_pixel(0, 0), &Rgb([255, 0, 255]));
        assert_eq!(out.get_pixel(7, 5), &Rgb([20, 40, 60]));
    }

    #[test]
    fn wrong_size_response_rejected() {
        struct Shrinks;
        impl InpaintService for Shrinks {
            fn inpaint(&self, _: &InpaintRequest) -> Result<RgbImage, ServiceError> {
                Ok(RgbImage::new(1, 1))
            }
        }
        let req = InpaintRequest {
            task: InpaintTask::Add,
            image: canvas(8, 6),
            mask: block_mask(8, 6),
            prompt: "cup".into(),
            keep: None,
        };
        assert!(matches!(inpaint(&Shrinks, &req), Err(ServiceError::InvalidResponse(_))));
    }

    #[test]
    fn segment_serials_must_be_contiguous() {
        let m = |serial| SegmentMask {
            serial,
            mask: GrayImage::new(2, 2),
            area: 0,
        };
        assert!(SegmentResponse { masks: vec![m(1), m(2)] }.validate(2, 2).is_ok());
        assert!(SegmentResponse { masks: vec![m(1), m(3)] }.validate(2, 2).is_err());
        assert!(SegmentResponse { masks: vec![m(2), m(2)] }.validate(2, 2).is_err());
    }

    #[test]
    fn embed_renormalizes() {
        struct Short;
        impl EmbedService for Short {
            fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, ServiceError> {
                Ok(inputs.iter().map(|_| vec![0.97, 0.0, 0.0]).collect())
            }
        }
        let out = embed(&Short, &[("a".into(), EmbedInput::Text("x".into()))]).unwrap();
        let norm: f64 = out[0].values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn identical_images_embed_identically() {
        let img = RgbImage::from_fn(16, 12, |x, y| Rgb([(x * 9) as u8, (y * 13) as u8, 77]));
        let out = embed(
            &MockEmbed::default(),
            &[
                ("a".into(), EmbedInput::Image(img.clone())),
                ("b".into(), EmbedInput::Image(img)),
            ],
        )
        .unwrap();
        assert_eq!(out[0].values(), out[1].values());
    }

    #[test]
    fn recording_chat_logs_sorted() {
        let log = Arc::new(ProvenanceLog::default());
        let chat = RecordingChat {
            label: "gen".into(),
            inner: Arc::new(mock::MockChat::default()),
            log: log.clone(),
        };
        for q in ["b", "a", "c"] {
            chat.chat(&ChatRequest::new("m", vec![Part::text(q)])).unwrap();
        }
        let entries = log.entries();
        assert_eq!(entries.len(), 3);
        assert!(entries.windows(2).all(|w| w[0].request_hash < w[1].request_hash));
    }
}
