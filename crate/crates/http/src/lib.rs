//! HTTP transport for the external services, plus the mock server used for
//! offline runs.

mod client;
pub mod server;
pub mod wire;

pub use client::{HttpChat, HttpConnector, HttpEmbed, HttpInpaint, HttpSegment, Permit, Semaphore, Transport};
pub use server::{router, serve_forever, MockServer};
