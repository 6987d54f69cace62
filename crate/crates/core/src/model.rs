//! Canonical domain types shared by every stage of the pipeline.
//!
//! A benchmark item is a [`VqaSample`]; a bootstrapped item together with its
//! provenance is a [`VariantRecord`]. The seven transformation strategies are
//! a closed registry ([`StrategyKind`]) carrying fixed difficulty labels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default per-side outpainting ratio for V3.
pub const DEFAULT_OUTPAINT_RATIO: f64 = 1.5;

/// Ratios swept by the outpainting ablation.
pub const SWEEP_RATIOS: [f64; 4] = [1.25, 1.5, 1.75, 2.0];

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Reference to an image on disk. Pixel data is never embedded in records.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionItem {
    pub letter: String,
    pub text: String,
}

impl OptionItem {
    pub fn new(letter: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            letter: letter.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerSpec {
    pub canonical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl AnswerSpec {
    pub fn new(canonical: impl Into<String>) -> Self {
        Self {
            canonical: canonical.into(),
            aliases: Vec::new(),
        }
    }

    /// Canonical answer followed by aliases.
    pub fn all(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    YesNo,
    Mcq,
    Open,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::YesNo => "yes_no",
            Format::Mcq => "mcq",
            Format::Open => "open",
        })
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    #[serde(default)]
    pub options: Vec<OptionItem>,
    pub answer: AnswerSpec,
    #[serde(default)]
    pub task_tag: String,
    pub format: Format,
}

/// A broken sample invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rule)
    }
}

impl VqaSample {
    /// Canonical JSON bytes; the basis of content hashes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.canonical_json())
    }

    pub fn option_text(&self, letter: &str) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.letter == letter)
            .map(|o| o.text.as_str())
    }
}

/// Checks every sample invariant. An empty result means the sample is well formed.
pub fn validate_sample(s: &VqaSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field, rule: &str| {
        out.push(Violation {
            field,
            rule: rule.to_string(),
        })
    };
    if s.id.trim().is_empty() {
        push("id", "id must be nonempty");
    }
    if s.image.width == 0 {
        push("image.width", "width must be > 0");
    }
    if s.image.height == 0 {
        push("image.height", "height must be > 0");
    }
    if s.answer.canonical.is_empty() {
        push("answer.canonical", "answer canonical must be nonempty");
    }
    match s.format {
        Format::Mcq => {
            if s.options.len() < 2 {
                push("options", "mcq requires at least 2 options");
            }
            let mut letters: Vec<&str> = s.options.iter().map(|o| o.letter.as_str()).collect();
            letters.sort_unstable();
            if letters.windows(2).any(|w| w[0] == w[1]) {
                push("options", "option letters must be unique");
            }
            if !s.options.iter().any(|o| o.letter == s.answer.canonical) {
                push("answer.canonical", "answer not in option letters");
            }
        }
        Format::YesNo => {
            if s.answer.canonical != "yes" && s.answer.canonical != "no" {
                push("answer.canonical", "answer not in {yes,no}");
            }
        }
        Format::Open => {}
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Hard,
}

/// The closed registry of bootstrapping strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    V1,
    V2,
    V3,
    L1,
    L2,
    L3,
    L4,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::V1,
        StrategyKind::V2,
        StrategyKind::V3,
        StrategyKind::L1,
        StrategyKind::L2,
        StrategyKind::L3,
        StrategyKind::L4,
    ];
    pub const IMAGE: [StrategyKind; 3] = [StrategyKind::V1, StrategyKind::V2, StrategyKind::V3];
    pub const LANGUAGE: [StrategyKind; 4] = [
        StrategyKind::L1,
        StrategyKind::L2,
        StrategyKind::L3,
        StrategyKind::L4,
    ];

    pub fn difficulty(self) -> Difficulty {
        match self {
            StrategyKind::V2 | StrategyKind::L3 => Difficulty::Easy,
            StrategyKind::V1
            | StrategyKind::V3
            | StrategyKind::L1
            | StrategyKind::L2
            | StrategyKind::L4 => Difficulty::Hard,
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, StrategyKind::V1 | StrategyKind::V2 | StrategyKind::V3)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::V1 => "V1",
            StrategyKind::V2 => "V2",
            StrategyKind::V3 => "V3",
            StrategyKind::L1 => "L1",
            StrategyKind::L2 => "L2",
            StrategyKind::L3 => "L3",
            StrategyKind::L4 => "L4",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = StrategyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| StrategyParseError(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy `{0}`")]
pub struct StrategyParseError(pub String);

/// A strategy plus its parameters (V3 carries the outpaint ratio under `ratio`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyId {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

impl StrategyId {
    pub fn new(kind: StrategyKind) -> Self {
        if kind == StrategyKind::V3 {
            return Self::v3(DEFAULT_OUTPAINT_RATIO);
        }
        Self {
            kind,
            params: BTreeMap::new(),
        }
    }

    pub fn v3(ratio: f64) -> Self {
        let mut params = BTreeMap::new();
        params.insert("ratio".to_string(), ratio);
        Self {
            kind: StrategyKind::V3,
            params,
        }
    }

    /// Outpaint ratio for V3, `None` for every other kind.
    pub fn ratio(&self) -> Option<f64> {
        (self.kind == StrategyKind::V3)
            .then(|| self.params.get("ratio").copied().unwrap_or(DEFAULT_OUTPAINT_RATIO))
    }

    pub fn difficulty(&self) -> Difficulty {
        self.kind.difficulty()
    }

    pub fn is_valid(&self) -> bool {
        match self.ratio() {
            Some(r) => r.is_finite() && r > 1.0,
            None => true,
        }
    }
}

impl From<StrategyKind> for StrategyId {
    fn from(kind: StrategyKind) -> Self {
        StrategyId::new(kind)
    }
}

/// Compact form: `V1`, `L4`, `V3` (default ratio) or `V3@1.75`.
impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ratio() {
            Some(r) if r != DEFAULT_OUTPAINT_RATIO => write!(f, "V3@{r}"),
            _ => f.write_str(self.kind.as_str()),
        }
    }
}

impl FromStr for StrategyId {
    type Err = StrategyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.split_once('@') {
            Some((kind, ratio)) => {
                let kind: StrategyKind = kind.parse()?;
                let ratio: f64 = ratio
                    .parse()
                    .map_err(|_| StrategyParseError(s.to_string()))?;
                let id = StrategyId::v3(ratio);
                if kind != StrategyKind::V3 || !id.is_valid() {
                    return Err(StrategyParseError(s.to_string()));
                }
                Ok(id)
            }
            None => Ok(StrategyId::new(s.parse()?)),
        }
    }
}

/// Outcome of one stage of a (possibly composed) bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub strategy: StrategyId,
    pub judge_attempts: u32,
    pub fell_back: bool,
    pub input_hash: String,
    pub output_hash: String,
}

/// A bootstrapped sample plus full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub origin_id: String,
    pub sample: VqaSample,
    pub applied: Vec<StrategyId>,
    pub seed: u64,
    pub judge_attempts: u32,
    pub fell_back: bool,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageRecord>,
}

pub const MAX_JUDGE_ATTEMPTS: u32 = 5;

impl VariantRecord {
    /// Record that substitutes the origin sample unchanged.
    pub fn fallback(origin: &VqaSample, applied: Vec<StrategyId>, seed: u64, attempts: u32) -> Self {
        Self {
            origin_id: origin.id.clone(),
            sample: origin.clone(),
            applied,
            seed,
            judge_attempts: attempts,
            fell_back: true,
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    /// Provenance invariants relative to the sample the record was derived from.
    pub fn check_invariants(&self, origin: &VqaSample) -> Vec<String> {
        let mut out = Vec::new();
        if self.fell_back && self.sample != *origin {
            out.push("fell_back record must equal origin sample".to_string());
        }
        if self.judge_attempts > MAX_JUDGE_ATTEMPTS {
            out.push(format!("judge_attempts {} > {}", self.judge_attempts, MAX_JUDGE_ATTEMPTS));
        }
        if self.applied.is_empty() && !(self.fell_back && self.judge_attempts == 0) {
            out.push("applied is empty on a non-identity record".to_string());
        }
        if self.sample.answer != origin.answer {
            out.push("answer changed".to_string());
        }
        out
    }

    /// `V1+V3+L4`, or `vanilla` for an empty chain.
    pub fn label(&self) -> String {
        if self.applied.is_empty() {
            return "vanilla".to_string();
        }
        self.applied
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Counter-based seed expansion: a pure function of the root seed and the
/// labelled coordinates (sample, stage, attempt, ...).
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
