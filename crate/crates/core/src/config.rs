//! Pipeline configuration (TOML). Relative paths resolve against the config
//! file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchio::AdapterKind;
use crate::clients::RetryPolicy;
use crate::composer::{JudgeMode, StrategyStack};
use crate::index::{HnswParams, SimilarityScale};
use crate::judge::JudgeConfig;
use crate::model::{StrategyId, StrategyKind, SWEEP_RATIOS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Model name sent with chat requests; defaults to the endpoint name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Environment variable holding the API key. Keys never live in config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Mock chat only: directory of `<request hash>.txt` canned replies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub generator: Option<String>,
    pub judge: Option<String>,
    pub inpaint: Option<String>,
    pub segment: Option<String>,
    pub embed: Option<String>,
    #[serde(default)]
    pub eval_models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Name used in reports; defaults to the file stem.
    pub name: Option<String>,
    pub path: PathBuf,
    pub adapter: String,
    #[serde(default = "one_f64")]
    pub fraction: f64,
    #[serde(default)]
    pub subset_seed: u64,
}

fn one_f64() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    #[default]
    Exhaustive,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub name: String,
    /// Train embeddings in the binary vector format.
    pub vectors: PathBuf,
    /// Caption JSONL; without it only image-only rates are computed.
    pub captions: Option<PathBuf>,
    #[serde(default)]
    pub index: IndexKind,
    #[serde(default)]
    pub hnsw: HnswParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: u32,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub similarity: SimilarityScale,
    #[serde(default = "default_k")]
    pub contamination_k: usize,
    #[serde(default = "default_ratio")]
    pub v3_ratio: f64,
    /// Adds lone V3 stacks at every sweep ratio.
    #[serde(default)]
    pub ratio_sweep: bool,
    #[serde(default)]
    pub stacks: Vec<String>,
    #[serde(default)]
    pub judge_mode: JudgeMode,
    #[serde(default = "default_temperature")]
    pub generation_temperature: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; overridden by `--jobs`.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub benchmark: BenchmarkConfig,
    pub corpus: Option<CorpusConfig>,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub judge: JudgeConfig,
}

fn default_seeds() -> u32 {
    5
}
fn default_theta() -> f64 {
    crate::contamination::DEFAULT_THRESHOLD
}
fn default_k() -> usize {
    1
}
fn default_ratio() -> f64 {
    crate::model::DEFAULT_OUTPAINT_RATIO
}
fn default_temperature() -> f64 {
    0.7
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_jobs() -> usize {
    1
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Loads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.benchmark.path);
        if let Some(c) = &mut self.corpus {
            fix(&mut c.vectors);
            if let Some(p) = &mut c.captions {
                fix(p);
            }
        }
        for ep in self.endpoints.values_mut() {
            if let Some(p) = &mut ep.fixtures {
                fix(p);
            }
        }
    }

    pub fn adapter(&self) -> Result<AdapterKind, ConfigError> {
        self.benchmark
            .adapter
            .parse()
            .map_err(|e: crate::benchio::BenchError| ConfigError::Invalid(e.to_string()))
    }

    pub fn benchmark_name(&self) -> String {
        self.benchmark.name.clone().unwrap_or_else(|| {
            self.benchmark
                .path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("benchmark")
                .to_string()
        })
    }

    /// Configured stacks with bare `V3` bound to `v3_ratio`, plus the sweep
    /// stacks when enabled. Deduplicated, first occurrence wins.
    pub fn resolved_stacks(&self) -> Result<Vec<StrategyStack>, ConfigError> {
        let mut out: Vec<StrategyStack> = Vec::new();
        let mut push = |s: StrategyStack| {
            if !out.contains(&s) {
                out.push(s);
            }
        };
        for raw in &self.stacks {
            let bad = |e: String| ConfigError::Invalid(format!("stack `{raw}`: {e}"));
            if raw.trim().eq_ignore_ascii_case("vanilla") {
                continue;
            }
            let mut ids = Vec::new();
            for tok in raw.split('+').map(str::trim) {
                let id = if tok == "V3" {
                    StrategyId::v3(self.v3_ratio)
                } else {
                    tok.parse().map_err(|e: crate::model::StrategyParseError| bad(e.to_string()))?
                };
                ids.push(id.to_string());
            }
            let stack: StrategyStack = ids
                .join("+")
                .parse()
                .map_err(|e: crate::composer::StackError| bad(e.to_string()))?;
            push(stack);
        }
        if self.ratio_sweep {
            for r in SWEEP_RATIOS {
                push(StrategyStack::single(StrategyId::v3(r)));
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds < 1 {
            return invalid("seeds must be >= 1".into());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return invalid(format!("theta {} must be in (0, 1]", self.theta));
        }
        if !(self.v3_ratio > 1.0 && self.v3_ratio.is_finite()) {
            return invalid(format!("v3_ratio {} must be > 1", self.v3_ratio));
        }
        if self.jobs < 1 {
            return invalid("jobs must be >= 1".into());
        }
        if self.judge.max_attempts < 1 {
            return invalid("judge.max_attempts must be >= 1".into());
        }
        self.adapter()?;
        let b = &self.benchmark;
        if !(b.fraction > 0.0 && b.fraction <= 1.0) {
            return invalid(format!("benchmark.fraction {} must be in (0, 1]", b.fraction));
        }
        for (name, ep) in &self.endpoints {
            if ep.kind == EndpointKind::Http && ep.url.is_none() {
                return invalid(format!("endpoint `{name}` is http but has no url"));
            }
            if ep.max_in_flight < 1 {
                return invalid(format!("endpoint `{name}`: max_in_flight must be >= 1"));
            }
        }
        let r = &self.roles;
        let refs = [
            ("generator", &r.generator),
            ("judge", &r.judge),
            ("inpaint", &r.inpaint),
            ("segment", &r.segment),
            ("embed", &r.embed),
        ];
        for (role, name) in refs {
            if let Some(n) = name {
                if !self.endpoints.contains_key(n) {
                    return invalid(format!("role `{role}` references undefined endpoint `{n}`"));
                }
            }
        }
        for n in &r.eval_models {
            if !self.endpoints.contains_key(n) {
                return invalid(format!("eval model references undefined endpoint `{n}`"));
            }
        }
        let stacks = self.resolved_stacks()?;
        if !stacks.is_empty() {
            if r.judge.is_none() {
                return invalid("stacks are configured but no judge endpoint is set".into());
            }
            if r.generator.is_none() {
                return invalid("stacks are configured but no generator endpoint is set".into());
            }
        }
        let kinds: Vec<StrategyKind> = stacks.iter().flat_map(|s| s.ops().map(|o| o.kind)).collect();
        let needs_inpaint = kinds.iter().any(|k| matches!(k, StrategyKind::V1 | StrategyKind::V2 | StrategyKind::V3));
        if needs_inpaint && r.inpaint.is_none() {
            return invalid("image stacks need an inpaint endpoint".into());
        }
        if kinds.contains(&StrategyKind::V2) && r.segment.is_none() {
            return invalid("V2 stacks need a segment endpoint".into());
        }
        if let Some(c) = &self.corpus {
            if r.embed.is_none() {
                return invalid(format!("corpus `{}` needs an embed endpoint", c.name));
            }
            if c.captions.is_some() && r.judge.is_none() {
                return invalid("caption judging needs a judge endpoint".into());
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, name: &str) -> Option<&EndpointConfig> {
        self.endpoints.get(name)
    }

    /// Model name for an endpoint.
    pub fn model_name(&self, name: &str) -> String {
        self.endpoints
            .get(name)
            .and_then(|e| e.model.clone())
            .unwrap_or_else(|| name.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
stacks = ["V1", "V3", "V1+L4"]
[benchmark]
path = "bench.jsonl"
adapter = "canonical"
[endpoints.gpt]
kind = "mock"
[endpoints.pp]
kind = "mock"
[roles]
generator = "gpt"
judge = "gpt"
inpaint = "pp"
eval_models = ["gpt"]
"#;

    #[test]
    fn defaults_and_stack_resolution() {
        let mut cfg = PipelineConfig::from_toml(BASE).unwrap();
        cfg.v3_ratio = 1.75;
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, 5);
        assert_eq!(cfg.theta, 0.9);
        let labels: Vec<String> = cfg.resolved_stacks().unwrap().iter().map(ToString::to_string).collect();
        assert_eq!(labels, ["V1", "V3@1.75", "V1+L4"]);
        cfg.ratio_sweep = true;
        assert_eq!(cfg.resolved_stacks().unwrap().len(), 3 + 3, "V3@1.75 is already a sweep ratio");
    }

    #[test]
    fn missing_judge_rejected() {
        let text = BASE.replace("judge = \"gpt\"\n", "");
        let err = PipelineConfig::from_toml(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("judge"), "{err}");
        let mut cfg = PipelineConfig::from_toml(&text).unwrap();
        cfg.stacks.clear();
        cfg.validate().unwrap();
    }

    #[test]
    fn undefined_endpoint_and_zero_seeds() {
        let text = BASE.replace("eval_models = [\"gpt\"]", "eval_models = [\"nope\"]");
        assert!(PipelineConfig::from_toml(&text).unwrap().validate().is_err());
        let mut cfg = PipelineConfig::from_toml(BASE).unwrap();
        cfg.seeds = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml(&format!("bogus = 1\n{BASE}")).is_err());
    }
}
