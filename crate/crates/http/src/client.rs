use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;
use reqwest::StatusCode;
use vlb_core::clients::{
    with_retry, Attempt, ChatRequest, ChatResponse, ChatService, EmbedInput, EmbedService, InpaintRequest,
    InpaintService, RetryPolicy, SegmentMask, SegmentResponse, SegmentService, ServiceError,
};
use vlb_core::config::{EndpointConfig, EndpointKind};
use vlb_core::model::sha256_hex;
use vlb_core::pipeline::{Connector, MockConnector};
use vlb_core::store::{decode_gray, decode_rgb, encode_png_gray, encode_png_rgb};

use crate::wire::{
    b64, format_keep, unb64, ChatCompletion, EmbedItem, EmbedRequest, EmbedResponse, Form, SegmentWire,
    CHAT_PATH, EMBED_PATH, INPAINT_PATH, SEGMENT_PATH,
};

/// Counting semaphore capping in-flight requests to one endpoint.
#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

/// One configured endpoint: base URL, auth, retry budget and in-flight gate.
#[derive(Clone)]
pub struct Transport {
    base: String,
    client: Client,
    key: Option<String>,
    retry: RetryPolicy,
    gate: Arc<Semaphore>,
}

fn classify(e: reqwest::Error) -> Attempt {
    if e.is_timeout() {
        Attempt::Timeout
    } else {
        Attempt::Transient(ServiceError::Transport(e.to_string()))
    }
}

impl Transport {
    pub fn new(base: &str, key: Option<String>, retry: RetryPolicy, gate: Arc<Semaphore>) -> Result<Self, String> {
        let client = Client::builder()
            .timeout(Duration::from_millis(retry.request_timeout_ms))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            client,
            key,
            retry,
            gate,
        })
    }

    /// POSTs `body` under the retry policy. Returns the response bytes and
    /// the number of attempts made.
    pub fn post(&self, path: &str, content_type: &str, body: &[u8]) -> Result<(Vec<u8>, u32), ServiceError> {
        let url = format!("{}{path}", self.base);
        with_retry(&self.retry, &thread::sleep, |_| {
            let _permit = self.gate.acquire();
            let mut rb = self
                .client
                .post(&url)
                .header(CONTENT_TYPE, content_type)
                .body(body.to_vec());
            if let Some(k) = &self.key {
                rb = rb.bearer_auth(k);
            }
            let resp = rb.send().map_err(classify)?;
            let status = resp.status();
            if status == StatusCode::TOO_MANY_REQUESTS {
                return Err(Attempt::RateLimited);
            }
            if !status.is_success() {
                let err = ServiceError::Status {
                    status: status.as_u16(),
                    body: resp.text().unwrap_or_default(),
                };
                return Err(if status.is_server_error() {
                    Attempt::Transient(err)
                } else {
                    Attempt::Fatal(err)
                });
            }
            resp.bytes().map(|b| b.to_vec()).map_err(classify)
        })
    }

    fn post_json(&self, path: &str, body: &[u8]) -> Result<(Vec<u8>, u32), ServiceError> {
        self.post(path, "application/json", body)
    }
}

fn invalid(e: impl ToString) -> ServiceError {
    ServiceError::InvalidResponse(e.to_string())
}

pub struct HttpChat(pub Transport);

impl ChatService for HttpChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError> {
        req.validate()?;
        let wire = req.wire_bytes();
        let (bytes, attempts) = self.0.post_json(CHAT_PATH, &wire)?;
        let c: ChatCompletion = serde_json::from_slice(&bytes).map_err(invalid)?;
        let text = c
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| invalid("no choices in chat response"))?
            .message
            .content;
        Ok(ChatResponse {
            text,
            usage: c.usage,
            attempts,
            request_hash: sha256_hex(&wire),
        })
    }
}

pub struct HttpInpaint(pub Transport);

impl InpaintService for HttpInpaint {
    fn inpaint(&self, req: &InpaintRequest) -> Result<RgbImage, ServiceError> {
        req.validate()?;
        let mut form = Form::new(&req.hash())
            .text("task", req.task.as_str())
            .png("image", &encode_png_rgb(&req.image))
            .png("mask", &encode_png_gray(&req.mask))
            .text("prompt", &req.prompt);
        if let Some(keep) = &req.keep {
            form = form.text("keep", &format_keep(keep));
        }
        let (ct, body) = form.finish();
        let (bytes, _) = self.0.post(INPAINT_PATH, &ct, &body)?;
        decode_rgb(&bytes).map_err(invalid)
    }
}

pub struct HttpSegment(pub Transport);

impl SegmentService for HttpSegment {
    fn segment(&self, image: &RgbImage) -> Result<SegmentResponse, ServiceError> {
        let png = encode_png_rgb(image);
        let (ct, body) = Form::new(&sha256_hex(&png)).png("image", &png).finish();
        let (bytes, _) = self.0.post(SEGMENT_PATH, &ct, &body)?;
        let wire: SegmentWire = serde_json::from_slice(&bytes).map_err(invalid)?;
        let masks = wire
            .masks
            .into_iter()
            .map(|m| {
                let mask = decode_gray(&unb64(&m.png).map_err(invalid)?).map_err(invalid)?;
                Ok(SegmentMask {
                    serial: m.serial,
                    mask,
                    area: m.area,
                })
            })
            .collect::<Result<_, ServiceError>>()?;
        Ok(SegmentResponse { masks })
    }
}

pub struct HttpEmbed {
    pub transport: Transport,
    pub model: String,
}

impl EmbedService for HttpEmbed {
    fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, ServiceError> {
        let req = EmbedRequest {
            model: self.model.clone(),
            inputs: inputs
                .iter()
                .map(|i| match i {
                    EmbedInput::Image(img) => EmbedItem::Image {
                        png: b64(&encode_png_rgb(img)),
                    },
                    EmbedInput::Text(t) => EmbedItem::Text { text: t.clone() },
                })
                .collect(),
        };
        let body = serde_json::to_vec(&req).expect("embed request serializes");
        let (bytes, _) = self.transport.post_json(EMBED_PATH, &body)?;
        let resp: EmbedResponse = serde_json::from_slice(&bytes).map_err(invalid)?;
        Ok(resp.vectors)
    }
}

/// Builds HTTP clients for `http` endpoints and in-process mocks for `mock`
/// ones. Endpoints sharing a name share one in-flight gate.
#[derive(Debug, Default)]
pub struct HttpConnector {
    gates: Mutex<HashMap<String, Arc<Semaphore>>>,
}

impl HttpConnector {
    pub fn transport(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Transport, String> {
        let url = ep
            .url
            .as_deref()
            .ok_or_else(|| format!("endpoint `{name}` has no url"))?;
        let key = match &ep.key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| format!("endpoint `{name}`: environment variable {var} is not set"))?,
            ),
            None => None,
        };
        let gate = self
            .gates
            .lock()
            .expect("gate lock")
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(Semaphore::new(ep.max_in_flight)))
            .clone();
        Transport::new(url, key, retry.clone(), gate)
    }
}

impl Connector for HttpConnector {
    fn chat(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Arc<dyn ChatService>, String> {
        match ep.kind {
            EndpointKind::Mock => MockConnector.chat(name, ep, retry),
            EndpointKind::Http => Ok(Arc::new(HttpChat(self.transport(name, ep, retry)?))),
        }
    }

    fn inpaint(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Arc<dyn InpaintService>, String> {
        match ep.kind {
            EndpointKind::Mock => MockConnector.inpaint(name, ep, retry),
            EndpointKind::Http => Ok(Arc::new(HttpInpaint(self.transport(name, ep, retry)?))),
        }
    }

    fn segment(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Arc<dyn SegmentService>, String> {
        match ep.kind {
            EndpointKind::Mock => MockConnector.segment(name, ep, retry),
            EndpointKind::Http => Ok(Arc::new(HttpSegment(self.transport(name, ep, retry)?))),
        }
    }

    fn embed(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Arc<dyn EmbedService>, String> {
        match ep.kind {
            EndpointKind::Mock => MockConnector.embed(name, ep, retry),
            EndpointKind::Http => Ok(Arc::new(HttpEmbed {
                transport: self.transport(name, ep, retry)?,
                model: ep.model.clone().unwrap_or_else(|| name.to_string()),
            })),
        }
    }
}
