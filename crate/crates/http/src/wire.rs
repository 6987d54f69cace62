//! Wire shapes shared by the clients and the mock server.
//!
//! Chat uses the common chat-completion JSON. Inpaint and segment are
//! multipart POSTs:
//!
//! * `/v1/inpaint`: `task` (`add`|`remove`|`outpaint`), `image` (PNG),
//!   `mask` (single-channel PNG), `prompt`, and for outpainting `keep`
//!   as `x,y,width,height`. The response body is a PNG.
//! * `/v1/segment`: `image` (PNG). The response is [`SegmentWire`] JSON.
//!
//! Embedding is JSON in both directions, see [`EmbedRequest`].

use base64::Engine;
use serde::{Deserialize, Serialize};
use vlb_core::clients::{Rect, Usage};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const INPAINT_PATH: &str = "/v1/inpaint";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const EMBED_PATH: &str = "/v1/embed";

/// Response header carrying the hash the server keyed its reply on.
pub const REQUEST_HASH_HEADER: &str = "x-request-hash";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssistantMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub message: AssistantMessage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatCompletion {
    pub model: String,
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbedItem {
    /// Base64 PNG.
    Image { png: String },
    Text { text: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub inputs: Vec<EmbedItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireMask {
    pub serial: u32,
    pub area: u64,
    /// Base64 single-channel PNG.
    pub png: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentWire {
    pub masks: Vec<WireMask>,
}

pub fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn unb64(s: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| e.to_string())
}

pub fn format_keep(r: &Rect) -> String {
    format!("{},{},{},{}", r.x, r.y, r.width, r.height)
}

pub fn parse_keep(s: &str) -> Result<Rect, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("keep `{s}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] => Ok(Rect { x, y, width, height }),
        _ => Err(format!("keep `{s}` needs four fields")),
    }
}

/// multipart/form-data body with a caller-chosen boundary, so identical
/// requests produce identical bytes.
pub struct Form {
    boundary: String,
    body: Vec<u8>,
}

impl Form {
    /// `key` should be a content hash of the request.
    pub fn new(key: &str) -> Self {
        Self {
            boundary: format!("vlb-{}", &key[..key.len().min(40)]),
            body: Vec::new(),
        }
    }

    fn head(&mut self, name: &str, file: Option<&str>) {
        self.body.extend_from_slice(format!("--{}\r\n", self.boundary).as_bytes());
        let disp = match file {
            Some(f) => format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: image/png\r\n\r\n"),
            None => format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n"),
        };
        self.body.extend_from_slice(disp.as_bytes());
    }

    pub fn text(mut self, name: &str, value: &str) -> Self {
        self.head(name, None);
        self.body.extend_from_slice(value.as_bytes());
        self.body.extend_from_slice(b"\r\n");
        self
    }

    pub fn png(mut self, name: &str, bytes: &[u8]) -> Self {
        self.head(name, Some(&format!("{name}.png")));
        self.body.extend_from_slice(bytes);
        self.body.extend_from_slice(b"\r\n");
        self
    }

    /// `(content type, body)`.
    pub fn finish(mut self) -> (String, Vec<u8>) {
        self.body.extend_from_slice(format!("--{}--\r\n", self.boundary).as_bytes());
        (format!("multipart/form-data; boundary={}", self.boundary), self.body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_round_trips() {
        let r = Rect { x: 160, y: 120, width: 640, height: 480 };
        assert_eq!(parse_keep(&format_keep(&r)).unwrap(), r);
        assert!(parse_keep("1,2,3").is_err());
    }

    #[test]
    fn forms_are_deterministic() {
        let build = || Form::new("abc").text("task", "add").png("image", b"\x89PNG").finish();
        assert_eq!(build(), build());
        let (ct, body) = build();
        assert_eq!(ct, "multipart/form-data; boundary=vlb-abc");
        assert!(body.ends_with(b"--vlb-abc--\r\n"));
    }
}
