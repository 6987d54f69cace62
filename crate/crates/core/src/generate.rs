//! Shared plumbing for the bootstrapping generators.

use std::collections::BTreeMap;

use crate::clients::{ChatRequest, Part, ServiceError, Services};
use crate::model::{StrategyId, StrategyKind, VariantRecord, VqaSample};
use crate::store::{ArtifactStore, StoreError};
use crate::{lang, vision};

/// A generation failure. Every variant consumes one judge attempt upstream.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("sample has no image dimensions")]
    MissingDims,
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error("no usable candidates in response")]
    NoCandidates,
    #[error("unknown serial {0}")]
    UnknownSerial(u32),
    #[error("segmentation found no objects")]
    NoSegments,
    #[error("invalid box {0:?}")]
    InvalidBox([u32; 4]),
    #[error("invalid outpaint ratio {0}")]
    InvalidRatio(f64),
    #[error("response leaves the question unchanged")]
    NoChange,
    #[error("added text leaks the answer `{0}`")]
    AnswerLeak(String),
    #[error("added context has {0} words, limit is 100")]
    ContextTooLong(usize),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("store: {0}")]
    Store(String),
}

impl From<StoreError> for GenError {
    fn from(e: StoreError) -> Self {
        GenError::Store(e.to_string())
    }
}

/// Services plus the artifact store a generator reads from and writes to.
#[derive(Clone, Copy)]
pub struct GenContext<'a> {
    pub services: &'a Services,
    pub store: &'a ArtifactStore,
}

impl<'a> GenContext<'a> {
    pub fn new(services: &'a Services, store: &'a ArtifactStore) -> Self {
        Self { services, store }
    }

    /// Generation request: configured temperature, seed forwarded.
    pub(crate) fn request(&self, parts: Vec<Part>, seed: u64) -> ChatRequest {
        let mut req = self.services.chat.request(parts);
        req.temperature = self.services.generation_temperature;
        req.seed = Some(seed);
        req
    }

    /// Sends a generation request and records prompt and response.
    pub(crate) fn chat(
        &self,
        template: &crate::prompts::Template,
        parts: Vec<Part>,
        seed: u64,
        ev: &mut Evidence,
    ) -> Result<String, GenError> {
        let req = self.request(parts, seed);
        ev.artifacts
            .insert("template".into(), format!("{}@{}", template.name, template.hash()));
        ev.text(self.store, "prompt", &req.text())?;
        ev.artifacts.insert("request_hash".into(), req.hash());
        let resp = self.services.chat.chat(&req)?;
        ev.text(self.store, "response", &resp.text)?;
        Ok(resp.text)
    }
}

/// Artifact references collected while generating one candidate.
#[derive(Debug, Default)]
pub struct Evidence {
    pub variant_id: String,
    pub artifacts: BTreeMap<String, String>,
}

impl Evidence {
    pub fn new(sample: &VqaSample, strategy: &StrategyId, seed: u64) -> Self {
        Self {
            variant_id: variant_id(&sample.id, strategy, seed),
            artifacts: BTreeMap::new(),
        }
    }

    /// Stores text content-addressed and as `artifacts/<variant>/<key>.txt`.
    pub fn text(&mut self, store: &ArtifactStore, key: &str, text: &str) -> Result<(), GenError> {
        let h = store.put_text(text)?;
        store.write_evidence(&self.variant_id, &format!("{key}.txt"), text.as_bytes())?;
        self.artifacts.insert(key.into(), h);
        Ok(())
    }

    pub fn png(&mut self, store: &ArtifactStore, key: &str, hash: String, png: &[u8]) -> Result<(), GenError> {
        store.write_evidence(&self.variant_id, &format!("{key}.png"), png)?;
        self.artifacts.insert(key.into(), hash);
        Ok(())
    }
}

/// Filesystem-safe id for one generated candidate.
pub fn variant_id(origin: &str, strategy: &StrategyId, seed: u64) -> String {
    let safe: String = origin
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.{strategy}.{seed:016x}")
}

pub(crate) fn candidate(
    origin: &VqaSample,
    sample: VqaSample,
    strategy: &StrategyId,
    seed: u64,
    ev: Evidence,
) -> VariantRecord {
    let mut artifacts = ev.artifacts;
    artifacts.insert("input".into(), origin.content_hash());
    artifacts.insert("output".into(), sample.content_hash());
    VariantRecord {
        origin_id: origin.id.clone(),
        sample,
        applied: vec![strategy.clone()],
        seed,
        judge_attempts: 0,
        fell_back: false,
        artifacts,
        stages: Vec::new(),
    }
}

/// Runs the generator for `strategy` once.
pub fn generate(
    strategy: &StrategyId,
    sample: &VqaSample,
    seed: u64,
    ctx: &GenContext<'_>,
) -> Result<VariantRecord, GenError> {
    match strategy.kind {
        StrategyKind::V1 => vision::apply_v1(sample, seed, ctx),
        StrategyKind::V2 => vision::apply_v2(sample, seed, ctx),
        StrategyKind::V3 => vision::apply_v3(
            sample,
            strategy.ratio().unwrap_or(crate::model::DEFAULT_OUTPAINT_RATIO),
            seed,
            ctx,
        ),
        StrategyKind::L1 => lang::apply_l1(sample, seed, ctx),
        StrategyKind::L2 => lang::apply_l2(sample, seed, ctx),
        StrategyKind::L3 => lang::apply_l3(sample, seed, ctx),
        StrategyKind::L4 => lang::apply_l4(sample, seed, ctx),
    }
}
