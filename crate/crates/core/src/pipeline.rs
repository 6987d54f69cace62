//! Stage runner: ingest, embed, contaminate, bootstrap, recontaminate, eval,
//! report. Each stage is skipped when its key (hash of input files plus the
//! config slice it reads) matches the last successful run and its outputs
//! still exist.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::benchio::{self, read_canonical, write_canonical, BenchmarkManifest};
use crate::clients::mock::{MockChat, MockEmbed, MockInpaint, MockSegment};
use crate::clients::{
    embed, ChatEndpoint, ChatService, EmbedInput, EmbedService, InpaintRequest, InpaintService, ProvenanceLog,
    RecordingChat, RetryPolicy, SegmentResponse, SegmentService, ServiceError, Services,
};
use crate::composer::{apply_stack_with, paired_grid, StrategyStack};
use crate::config::{ConfigError, EndpointConfig, EndpointKind, IndexKind, PipelineConfig};
use crate::contamination::{
    contamination_delta, image_contamination, image_text_contamination, parse_captions, write_report_csv,
    ContaminationParams, ContaminationReport,
};
use crate::eval::{
    aggregate, evaluate, format_delta_cell, format_std_cell, per_task_breakdown, ratio_sweep_report,
    read_run_jsonl, write_run_jsonl, EvalRun,
};
use crate::generate::{generate, GenContext};
use crate::index::io::read_vectors;
use crate::index::{EmbeddingIndex, EmbeddingVector, IndexMode};
use crate::judge::{attempt_stats, write_audit_csv, AttemptStats, AuditRow, ChatJudge};
use crate::model::{derive_seed, sha256_hex, StrategyId, VariantRecord, VqaSample, SWEEP_RATIOS};
use crate::report::{emit_figure_data, Bundle, BundleFile, BundleManifest, Figure, FlatReduction, VariantReduction};
use crate::store::{write_atomic, ArtifactStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Embed,
    Contaminate,
    Bootstrap,
    Recontaminate,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Contaminate,
        Stage::Bootstrap,
        Stage::Recontaminate,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Contaminate => "contaminate",
            Stage::Bootstrap => "bootstrap",
            Stage::Recontaminate => "recontaminate",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Ingest => 10,
            Stage::Embed => 11,
            Stage::Contaminate => 12,
            Stage::Bootstrap => 13,
            Stage::Eval => 14,
            Stage::Report => 15,
            Stage::Recontaminate => 16,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

pub const CONFIG_EXIT_CODE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => CONFIG_EXIT_CODE,
            PipelineError::Stage { stage, .. } => stage.exit_code(),
        }
    }
}

/// Builds service handles from endpoint configs.
pub trait Connector: Sync {
    fn chat(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Arc<dyn ChatService>, String>;
    fn inpaint(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy)
        -> Result<Arc<dyn InpaintService>, String>;
    fn segment(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy)
        -> Result<Arc<dyn SegmentService>, String>;
    fn embed(&self, name: &str, ep: &EndpointConfig, retry: &RetryPolicy) -> Result<Arc<dyn EmbedService>, String>;
}

/// In-process mocks; rejects `http` endpoints.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockConnector;

fn mock_only(name: &str, ep: &EndpointConfig) -> Result<(), String> {
    match ep.kind {
        EndpointKind::Mock => Ok(()),
        EndpointKind::Http => Err(format!("endpoint `{name}` is http; this build only has in-process mocks")),
    }
}

impl Connector for MockConnector {
    fn chat(&self, name: &str, ep: &EndpointConfig, _: &RetryPolicy) -> Result<Arc<dyn ChatService>, String> {
        mock_only(name, ep)?;
        Ok(match &ep.fixtures {
            Some(dir) => Arc::new(MockChat::with_fixtures(dir)),
            None => Arc::new(MockChat::default()),
        })
    }

    fn inpaint(&self, name: &str, ep: &EndpointConfig, _: &RetryPolicy) -> Result<Arc<dyn InpaintService>, String> {
        mock_only(name, ep)?;
        Ok(Arc::new(MockInpaint))
    }

    fn segment(&self, name: &str, ep: &EndpointConfig, _: &RetryPolicy) -> Result<Arc<dyn SegmentService>, String> {
        mock_only(name, ep)?;
        Ok(Arc::new(MockSegment::default()))
    }

    fn embed(&self, name: &str, ep: &EndpointConfig, _: &RetryPolicy) -> Result<Arc<dyn EmbedService>, String> {
        mock_only(name, ep)?;
        Ok(Arc::new(MockEmbed::default()))
    }
}

struct Unavailable(&'static str);

impl Unavailable {
    fn err(&self) -> ServiceError {
        ServiceError::Precondition(format!("no {} endpoint configured", self.0))
    }
}

impl InpaintService for Unavailable {
    fn inpaint(&self, _: &InpaintRequest) -> Result<image::RgbImage, ServiceError> {
        Err(self.err())
    }
}

impl SegmentService for Unavailable {
    fn segment(&self, _: &image::RgbImage) -> Result<SegmentResponse, ServiceError> {
        Err(self.err())
    }
}

impl EmbedService for Unavailable {
    fn embed(&self, _: &[EmbedInput]) -> Result<Vec<Vec<f32>>, ServiceError> {
        Err(self.err())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `cfg.jobs`.
    pub jobs: Option<usize>,
    /// Last stage to run.
    pub until: Option<Stage>,
    /// Ignore cached stage keys.
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ran,
    Cached,
    /// Not applicable to this config (e.g. no corpus).
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub outcome: StageOutcome,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stages: Vec<StageStatus>,
    pub bundle_hash: Option<String>,
}

impl RunSummary {
    pub fn outcome(&self, stage: Stage) -> Option<StageOutcome> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.outcome)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DoneFile {
    stage: Stage,
    key: String,
    outputs: Vec<String>,
}

/// Filesystem layout of one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store")
    }
    pub fn done(&self, s: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{s}.json"))
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("ingest/samples.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("ingest/manifest.json")
    }
    pub fn eval_vectors(&self) -> PathBuf {
        self.root.join("embed/eval.vlbe")
    }
    pub fn static_report(&self) -> PathBuf {
        self.root.join("contaminate/static.json")
    }
    pub fn static_csv(&self) -> PathBuf {
        self.root.join("contaminate/static.csv")
    }
    pub fn variants(&self, stack: &str, k: u32) -> PathBuf {
        self.root.join("bootstrap").join(stack).join(format!("seed{k}.jsonl"))
    }
    pub fn audit(&self, stack: &str) -> PathBuf {
        self.root.join("bootstrap").join(stack).join("audit.csv")
    }
    pub fn attempts(&self) -> PathBuf {
        self.root.join("bootstrap/attempts.json")
    }
    pub fn dynamic_report(&self) -> PathBuf {
        self.root.join("recontaminate/dynamic.json")
    }
    pub fn reductions(&self) -> PathBuf {
        self.root.join("recontaminate/reduction.csv")
    }
    pub fn run(&self, model: &str, stack: &str, k: u32) -> PathBuf {
        self.root.join("eval").join(model).join(stack).join(format!("seed{k}.jsonl"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn bundle(&self) -> PathBuf {
        self.root.join("report/bundle.json")
    }
    pub fn provenance(&self, s: Stage) -> PathBuf {
        self.root.join("provenance").join(format!("{s}.jsonl"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Endpoint-name directory component.
fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn hash_file(p: &Path) -> Result<String, String> {
    fs::read(p)
        .map(sha256_hex)
        .map_err(|e| format!("{}: {e}", p.display()))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<(), String> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| e.to_string())?;
    bytes.push(b'\n');
    write_atomic(p, &bytes).map_err(|e| format!("{}: {e}", p.display()))
}

fn write_bytes(p: &Path, bytes: &[u8]) -> Result<(), String> {
    write_atomic(p, bytes).map_err(|e| format!("{}: {e}", p.display()))
}

fn read_text(p: &Path) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T, String> {
    serde_json::from_str(&read_text(p)?).map_err(|e| format!("{}: {e}", p.display()))
}

pub fn read_samples(p: &Path) -> Result<Vec<VqaSample>, String> {
    let f = fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    read_canonical(std::io::BufReader::new(f)).map_err(|e| format!("{}: {e}", p.display()))
}

pub fn read_records(p: &Path) -> Result<Vec<VariantRecord>, String> {
    read_text(p)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format!("{}: {e}", p.display())))
        .collect()
}

pub fn write_records(p: &Path, records: &[VariantRecord]) -> Result<(), String> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| e.to_string())?;
        out.push(b'\n');
    }
    write_bytes(p, &out)
}

fn read_train_vectors(p: &Path) -> Result<Vec<EmbeddingVector<f32>>, String> {
    let f = fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    read_vectors(std::io::BufReader::new(f)).map_err(|e| format!("{}: {e}", p.display()))
}

fn write_vectors_file(p: &Path, v: &[EmbeddingVector<f32>]) -> Result<(), String> {
    let mut buf = Vec::new();
    crate::index::io::write_vectors(&mut buf, v).map_err(|e| e.to_string())?;
    write_bytes(p, &buf)
}

struct Handles {
    generator: Option<ChatEndpoint>,
    judge: Option<ChatEndpoint>,
    inpaint: Arc<dyn InpaintService>,
    segment: Arc<dyn SegmentService>,
    embed: Option<Arc<dyn EmbedService>>,
    eval: Vec<(String, ChatEndpoint)>,
}

fn connect(cfg: &PipelineConfig, c: &dyn Connector, log: &Arc<ProvenanceLog>) -> Result<Handles, ConfigError> {
    let bad = |e: String| ConfigError::Invalid(e);
    let ep = |name: &String| cfg.endpoint(name).expect("validated");
    let chat = |name: &String| -> Result<ChatEndpoint, ConfigError> {
        let inner = c.chat(name, ep(name), &cfg.retry).map_err(bad)?;
        let rec = RecordingChat {
            label: name.clone(),
            inner,
            log: log.clone(),
        };
        Ok(ChatEndpoint::new(Arc::new(rec), cfg.model_name(name)))
    };
    let r = &cfg.roles;
    Ok(Handles {
        generator: r.generator.as_ref().map(chat).transpose()?,
        judge: r.judge.as_ref().map(chat).transpose()?,
        inpaint: match &r.inpaint {
            Some(n) => c.inpaint(n, ep(n), &cfg.retry).map_err(bad)?,
            None => Arc::new(Unavailable("inpaint")),
        },
        segment: match &r.segment {
            Some(n) => c.segment(n, ep(n), &cfg.retry).map_err(bad)?,
            None => Arc::new(Unavailable("segment")),
        },
        embed: r.embed.as_ref().map(|n| c.embed(n, ep(n), &cfg.retry)).transpose().map_err(bad)?,
        eval: r
            .eval_models
            .iter()
            .map(|n| Ok((n.clone(), chat(n)?)))
            .collect::<Result<_, ConfigError>>()?,
    })
}

fn services(h: &Handles, cfg: &PipelineConfig) -> Result<Services, String> {
    Ok(Services {
        chat: h.generator.clone().ok_or("no generator endpoint")?,
        judge: h.judge.clone(),
        inpaint: h.inpaint.clone(),
        segment: h.segment.clone(),
        embed: h
            .embed
            .clone()
            .unwrap_or_else(|| Arc::new(Unavailable("embed")) as Arc<dyn EmbedService>),
        generation_temperature: cfg.generation_temperature,
    })
}

/// Seed `k` of one stack over every sample; checks each record's
/// invariants against its origin.
fn bootstrap_seed(
    cfg: &PipelineConfig,
    services: &Services,
    store: &ArtifactStore,
    samples: &[VqaSample],
    stack: &StrategyStack,
    k: u32,
) -> Result<(Vec<VariantRecord>, Vec<AuditRow>), String> {
    let ctx = GenContext::new(services, store);
    let judge = ChatJudge {
        endpoint: services.judge.as_ref().ok_or("no judge endpoint")?,
        store,
        cfg: cfg.judge,
    };
    let gen = |s: &StrategyId, input: &VqaSample, seed: u64| generate(s, input, seed, &ctx);
    let label = stack.to_string();
    let outcomes = samples
        .par_iter()
        .map(|s| {
            let seed = derive_seed(cfg.root_seed, &["bootstrap", &label, &k.to_string(), &s.id]);
            apply_stack_with(s, stack, &gen, &judge, &cfg.judge, cfg.judge_mode, seed)
                .map_err(|e| format!("{label} seed {k} sample {}: {e}", s.id))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let mut records = Vec::with_capacity(outcomes.len());
    let mut audit = Vec::new();
    for (o, s) in outcomes.into_iter().zip(samples) {
        let broken = o.record.check_invariants(s);
        if !broken.is_empty() {
            return Err(format!("{label} sample {}: {}", s.id, broken.join("; ")));
        }
        audit.extend(o.audit);
        records.push(o.record);
    }
    Ok((records, audit))
}

/// Connected services and the artifact store of `cfg.output_dir`, for
/// running single operations outside the staged pipeline.
pub struct Session<'a> {
    cfg: &'a PipelineConfig,
    connector: &'a dyn Connector,
    handles: Handles,
    store: ArtifactStore,
    log: Arc<ProvenanceLog>,
}

pub fn open_session<'a>(cfg: &'a PipelineConfig, connector: &'a dyn Connector) -> Result<Session<'a>, PipelineError> {
    cfg.validate()?;
    let log = Arc::new(ProvenanceLog::default());
    let handles = connect(cfg, connector, &log)?;
    let store = ArtifactStore::open(Layout::new(&cfg.output_dir).store())
        .map_err(|e| ConfigError::Invalid(format!("opening store: {e}")))?;
    Ok(Session {
        cfg,
        connector,
        handles,
        store,
        log,
    })
}

impl Session<'_> {
    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    /// Chat exchanges since the last call.
    pub fn take_provenance(&self) -> Vec<crate::clients::LogEntry> {
        self.log.take()
    }

    pub fn judge(&self) -> Option<&ChatEndpoint> {
        self.handles.judge.as_ref()
    }

    /// Copies sample images found under `base` into the store.
    pub fn import(&self, base: &Path, samples: &[VqaSample]) -> Result<(), String> {
        samples
            .par_iter()
            .try_for_each(|s| self.store.import(base, &s.image))
            .map_err(|e| e.to_string())
    }

    pub fn bootstrap(
        &self,
        samples: &[VqaSample],
        stack: &StrategyStack,
        k: u32,
    ) -> Result<(Vec<VariantRecord>, Vec<AuditRow>), String> {
        bootstrap_seed(self.cfg, &services(&self.handles, self.cfg)?, &self.store, samples, stack, k)
    }

    /// Any configured chat endpoint, recorded in the session log.
    pub fn chat(&self, name: &str) -> Result<ChatEndpoint, String> {
        let ep = self
            .cfg
            .endpoint(name)
            .ok_or_else(|| format!("endpoint `{name}` is not defined"))?;
        let inner = self.connector.chat(name, ep, &self.cfg.retry)?;
        let rec = RecordingChat {
            label: name.to_string(),
            inner,
            log: self.log.clone(),
        };
        Ok(ChatEndpoint::new(Arc::new(rec), self.cfg.model_name(name)))
    }

    pub fn evaluate(&self, model: &str, set: &[VqaSample], stack: &str, seed: u64) -> Result<EvalRun, String> {
        let ep = self.chat(model)?;
        Ok(evaluate(set, &ep, &self.store, &self.cfg.benchmark_name(), stack, seed))
    }
}

pub type Pool = rayon::ThreadPool;

/// Worker pool with `jobs` threads.
pub fn pool(jobs: usize) -> Result<Pool, String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| format!("thread pool: {e}"))
}

/// Runs every stage (or up to `opts.until`) inside a pool of `jobs` workers.
pub fn run_pipeline(cfg: &PipelineConfig, connector: &dyn Connector, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let jobs = opts.jobs.unwrap_or(cfg.jobs).max(1);
    let pool = pool(jobs).map_err(ConfigError::Invalid)?;
    let log = Arc::new(ProvenanceLog::default());
    let handles = connect(cfg, connector, &log)?;
    let stacks = cfg.resolved_stacks()?;
    let layout = Layout::new(&cfg.output_dir);
    let store = ArtifactStore::open(layout.store()).map_err(|e| PipelineError::Stage {
        stage: Stage::Ingest,
        message: format!("opening store: {e}"),
    })?;
    let mut runner = Runner {
        cfg,
        layout,
        store,
        handles,
        stacks,
        log,
        force: opts.force,
        statuses: Vec::new(),
    };
    pool.install(|| runner.run_all(opts.until))?;
    let bundle_hash = if runner.layout.bundle().exists() && opts.until.is_none_or(|u| u == Stage::Report) {
        let m: BundleManifest = read_json(&runner.layout.bundle()).map_err(|message| PipelineError::Stage {
            stage: Stage::Report,
            message,
        })?;
        Some(m.hash)
    } else {
        None
    };
    Ok(RunSummary {
        stages: runner.statuses,
        bundle_hash,
    })
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
    store: ArtifactStore,
    handles: Handles,
    stacks: Vec<StrategyStack>,
    log: Arc<ProvenanceLog>,
    force: bool,
    statuses: Vec<StageStatus>,
}

type StageResult = Result<Vec<PathBuf>, String>;

impl Runner<'_> {
    fn run_all(&mut self, until: Option<Stage>) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            self.dispatch(stage)?;
            if until == Some(stage) {
                break;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let fail = |message: String| PipelineError::Stage { stage, message };
        if !self.applies(stage) {
            self.statuses.push(StageStatus {
                stage,
                outcome: StageOutcome::Skipped,
                key: String::new(),
            });
            return Ok(());
        }
        let key = self.key(stage).map_err(fail)?;
        if !self.force && self.is_cached(stage, &key) {
            if stage == Stage::Ingest {
                self.reimport().map_err(fail)?;
            }
            self.statuses.push(StageStatus {
                stage,
                outcome: StageOutcome::Cached,
                key,
            });
            return Ok(());
        }
        self.log.take();
        let mut outputs = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Embed => self.embed(),
            Stage::Contaminate => self.contaminate(),
            Stage::Bootstrap => self.bootstrap(),
            Stage::Recontaminate => self.recontaminate(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
        }
        .map_err(fail)?;
        let entries = self.log.take();
        if !entries.is_empty() {
            let p = self.layout.provenance(stage);
            let mut bytes = Vec::new();
            for e in &entries {
                serde_json::to_writer(&mut bytes, e).map_err(|e| fail(e.to_string()))?;
                bytes.push(b'\n');
            }
            write_bytes(&p, &bytes).map_err(fail)?;
            outputs.push(p);
        }
        let done = DoneFile {
            stage,
            key: key.clone(),
            outputs: outputs.iter().map(|p| self.layout.rel(p)).collect(),
        };
        write_json(&self.layout.done(stage), &done).map_err(fail)?;
        self.statuses.push(StageStatus {
            stage,
            outcome: StageOutcome::Ran,
            key,
        });
        Ok(())
    }

    fn applies(&self, stage: Stage) -> bool {
        match stage {
            Stage::Embed | Stage::Contaminate => self.cfg.corpus.is_some(),
            Stage::Recontaminate => self.cfg.corpus.is_some() && !self.stacks.is_empty(),
            Stage::Bootstrap => !self.stacks.is_empty(),
            Stage::Eval => !self.cfg.roles.eval_models.is_empty(),
            Stage::Ingest | Stage::Report => true,
        }
    }

    fn is_cached(&self, stage: Stage, key: &str) -> bool {
        let Ok(done) = read_json::<DoneFile>(&self.layout.done(stage)) else {
            return false;
        };
        done.key == key
            && done
                .outputs
                .iter()
                .all(|o| fs::metadata(self.layout.root.join(o)).is_ok_and(|m| m.len() > 0))
    }

    fn endpoint_slice(&self, role: &Option<String>) -> Value {
        match role {
            Some(n) => json!({"name": n, "config": self.cfg.endpoint(n)}),
            None => Value::Null,
        }
    }

    fn stack_labels(&self) -> Vec<String> {
        self.stacks.iter().map(ToString::to_string).collect()
    }

    fn bootstrap_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for s in self.stack_labels() {
            for k in 0..self.cfg.seeds {
                out.push(self.layout.variants(&s, k));
            }
        }
        out
    }

    fn run_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for m in &self.cfg.roles.eval_models {
            let m = safe_name(m);
            out.push(self.layout.run(&m, "vanilla", 0));
            for s in self.stack_labels() {
                for k in 0..self.cfg.seeds {
                    out.push(self.layout.run(&m, &s, k));
                }
            }
        }
        out
    }

    /// Hash of the stage's input files and config slice. Missing inputs of
    /// skipped stages hash as empty.
    fn key(&self, stage: Stage) -> Result<String, String> {
        let cfg = self.cfg;
        let l = &self.layout;
        let hash_opt = |p: &Path| if p.exists() { hash_file(p) } else { Ok(String::new()) };
        let corpus_slice = || -> Result<Value, String> {
            let Some(c) = &cfg.corpus else {
                return Ok(Value::Null);
            };
            Ok(json!({
                "name": c.name,
                "vectors": hash_file(&c.vectors)?,
                "captions": c.captions.as_deref().map(hash_file).transpose()?,
                "index": c.index,
                "hnsw": c.hnsw,
                "theta": cfg.theta,
                "similarity": cfg.similarity,
                "k": cfg.contamination_k,
                "judge": self.endpoint_slice(&cfg.roles.judge),
            }))
        };
        let (inputs, slice): (Vec<PathBuf>, Value) = match stage {
            Stage::Ingest => (
                vec![cfg.benchmark.path.clone()],
                json!({
                    "name": cfg.benchmark_name(),
                    "adapter": cfg.benchmark.adapter,
                    "fraction": cfg.benchmark.fraction,
                    "subset_seed": cfg.benchmark.subset_seed,
                }),
            ),
            Stage::Embed => (vec![l.samples()], self.endpoint_slice(&cfg.roles.embed)),
            Stage::Contaminate => (vec![l.samples(), l.eval_vectors()], corpus_slice()?),
            Stage::Bootstrap => (
                vec![l.samples()],
                json!({
                    "stacks": self.stack_labels(),
                    "seeds": cfg.seeds,
                    "root_seed": cfg.root_seed,
                    "judge_mode": cfg.judge_mode,
                    "judge_config": cfg.judge,
                    "temperature": cfg.generation_temperature,
                    "generator": self.endpoint_slice(&cfg.roles.generator),
                    "judge": self.endpoint_slice(&cfg.roles.judge),
                    "inpaint": self.endpoint_slice(&cfg.roles.inpaint),
                    "segment": self.endpoint_slice(&cfg.roles.segment),
                }),
            ),
            Stage::Recontaminate => {
                let mut v = vec![l.samples(), l.eval_vectors(), l.static_report()];
                v.extend(self.stack_labels().iter().map(|s| l.variants(s, 0)));
                (v, json!({"corpus": corpus_slice()?, "embed": self.endpoint_slice(&cfg.roles.embed)}))
            }
            Stage::Eval => {
                let mut v = vec![l.samples()];
                v.extend(self.bootstrap_files());
                let models: Vec<Value> = cfg
                    .roles
                    .eval_models
                    .iter()
                    .map(|m| self.endpoint_slice(&Some(m.clone())))
                    .collect();
                (v, json!({"models": models, "benchmark": cfg.benchmark_name()}))
            }
            Stage::Report => {
                let mut v = self.run_files();
                v.extend([l.static_report(), l.reductions(), l.attempts()]);
                v.extend(self.stack_labels().iter().map(|s| l.audit(s)));
                (v, json!({"stacks": self.stack_labels(), "ratio": cfg.v3_ratio}))
            }
        };
        let hashes = inputs
            .iter()
            .map(|p| Ok((l.rel(p), hash_opt(p)?)))
            .collect::<Result<Vec<(String, String)>, String>>()?;
        let doc = json!({"stage": stage, "inputs": hashes, "config": slice});
        Ok(sha256_hex(serde_json::to_vec(&doc).map_err(|e| e.to_string())?))
    }

    fn base_dir(&self) -> PathBuf {
        self.cfg.benchmark.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn reimport(&self) -> Result<(), String> {
        let base = self.base_dir();
        for s in read_samples(&self.layout.samples())? {
            self.store.import(&base, &s.image).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn ingest(&self) -> StageResult {
        let cfg = self.cfg;
        let adapter = cfg.adapter().map_err(|e| e.to_string())?;
        let got = benchio::ingest(&cfg.benchmark.path, adapter).map_err(|e| e.to_string())?;
        let samples = benchio::subset(&got.samples, cfg.benchmark.fraction, cfg.benchmark.subset_seed)
            .map_err(|e| e.to_string())?;
        let base = self.base_dir();
        samples
            .par_iter()
            .try_for_each(|s| self.store.import(&base, &s.image))
            .map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_canonical(&samples, &mut buf).map_err(|e| e.to_string())?;
        write_bytes(&self.layout.samples(), &buf)?;
        let manifest = BenchmarkManifest {
            name: cfg.benchmark_name(),
            format: got.manifest.format,
            sample_count: samples.len(),
            subset_fraction: cfg.benchmark.fraction,
            subset_seed: cfg.benchmark.subset_seed,
        };
        write_json(&self.layout.manifest(), &manifest)?;
        Ok(vec![self.layout.samples(), self.layout.manifest()])
    }

    fn embed_images(&self, items: Vec<(String, &crate::model::ImageRef)>) -> Result<Vec<EmbeddingVector<f32>>, String> {
        let svc = self.handles.embed.as_ref().ok_or("no embed endpoint")?;
        let batches: Vec<Vec<EmbeddingVector<f32>>> = items
            .par_chunks(16)
            .map(|chunk| {
                let inputs = chunk
                    .iter()
                    .map(|(id, r)| Ok((id.clone(), EmbedInput::Image(self.store.load_image(r).map_err(|e| e.to_string())?))))
                    .collect::<Result<Vec<_>, String>>()?;
                embed(svc.as_ref(), &inputs).map_err(|e| e.to_string())
            })
            .collect::<Result<_, String>>()?;
        Ok(batches.into_iter().flatten().collect())
    }

    fn embed(&self) -> StageResult {
        let samples = read_samples(&self.layout.samples())?;
        let vectors = self.embed_images(samples.iter().map(|s| (s.id.clone(), &s.image)).collect())?;
        write_vectors_file(&self.layout.eval_vectors(), &vectors)?;
        Ok(vec![self.layout.eval_vectors()])
    }

    fn train_index(&self) -> Result<EmbeddingIndex<f32>, String> {
        let c = self.cfg.corpus.as_ref().ok_or("no corpus")?;
        let mode = match c.index {
            IndexKind::Exhaustive => IndexMode::Exhaustive,
            IndexKind::Approximate => IndexMode::Approximate(c.hnsw.clone()),
        };
        EmbeddingIndex::build(read_train_vectors(&c.vectors)?, mode).map_err(|e| e.to_string())
    }

    fn captions(&self) -> Result<Option<HashMap<String, Vec<String>>>, String> {
        let Some(p) = self.cfg.corpus.as_ref().and_then(|c| c.captions.as_ref()) else {
            return Ok(None);
        };
        parse_captions(&read_text(p)?).map(Some)
    }

    fn params(&self) -> ContaminationParams {
        ContaminationParams {
            threshold: self.cfg.theta,
            scale: self.cfg.similarity,
            k: self.cfg.contamination_k,
        }
    }

    fn contamination(
        &self,
        idx: &EmbeddingIndex<f32>,
        vectors: &[EmbeddingVector<f32>],
        samples: &[VqaSample],
        captions: &Option<HashMap<String, Vec<String>>>,
    ) -> Result<ContaminationReport, String> {
        let corpus = &self.cfg.corpus.as_ref().ok_or("no corpus")?.name;
        let report = image_contamination(&self.cfg.benchmark_name(), corpus, vectors, idx, &self.params())
            .map_err(|e| e.to_string())?;
        let report = match captions {
            Some(caps) => {
                let judge = self.handles.judge.as_ref().ok_or("no judge endpoint")?;
                let by_id: HashMap<String, VqaSample> = samples.iter().map(|s| (s.id.clone(), s.clone())).collect();
                image_text_contamination(report, caps, &by_id, judge).map_err(|e| e.to_string())?
            }
            None => report,
        };
        let broken = report.check_invariants();
        if !broken.is_empty() {
            return Err(broken.join("; "));
        }
        Ok(report)
    }

    fn contaminate(&self) -> StageResult {
        let samples = read_samples(&self.layout.samples())?;
        let vectors = read_train_vectors(&self.layout.eval_vectors())?;
        let idx = self.train_index()?;
        let report = self.contamination(&idx, &vectors, &samples, &self.captions()?)?;
        write_json(&self.layout.static_report(), &report)?;
        let mut csv = Vec::new();
        write_report_csv(&report, &mut csv).map_err(|e| e.to_string())?;
        write_bytes(&self.layout.static_csv(), &csv)?;
        Ok(vec![self.layout.static_report(), self.layout.static_csv()])
    }

    fn bootstrap(&self) -> StageResult {
        let cfg = self.cfg;
        let samples = read_samples(&self.layout.samples())?;
        let services = services(&self.handles, cfg)?;
        let mut outputs = Vec::new();
        let mut all: Vec<VariantRecord> = Vec::new();
        for stack in &self.stacks {
            let label = stack.to_string();
            let mut audit = Vec::new();
            for k in 0..cfg.seeds {
                let (records, rows) = bootstrap_seed(cfg, &services, &self.store, &samples, stack, k)?;
                audit.extend(rows);
                let p = self.layout.variants(&label, k);
                write_records(&p, &records)?;
                outputs.push(p);
                all.extend(records);
            }
            let mut csv = Vec::new();
            write_audit_csv(&audit, &mut csv).map_err(|e| e.to_string())?;
            let p = self.layout.audit(&label);
            write_bytes(&p, &csv)?;
            outputs.push(p);
        }
        let stats: Vec<AttemptStats> = attempt_stats(&all);
        write_json(&self.layout.attempts(), &stats)?;
        outputs.push(self.layout.attempts());
        Ok(outputs)
    }

    fn recontaminate(&self) -> StageResult {
        let samples = read_samples(&self.layout.samples())?;
        let eval_vectors = read_train_vectors(&self.layout.eval_vectors())?;
        let by_id: HashMap<&str, &EmbeddingVector<f32>> = eval_vectors.iter().map(|v| (v.id(), v)).collect();
        let origin_sha: HashMap<&str, &str> = samples.iter().map(|s| (s.id.as_str(), s.image.sha256.as_str())).collect();
        let static_report: ContaminationReport = read_json(&self.layout.static_report())?;
        let idx = self.train_index()?;
        let captions = self.captions()?;
        let mut dynamic: Vec<Value> = Vec::new();
        let mut reductions: Vec<VariantReduction> = Vec::new();
        for label in self.stack_labels() {
            let records = read_records(&self.layout.variants(&label, 0))?;
            let variants: Vec<VqaSample> = records.into_iter().map(|r| r.sample).collect();
            let changed: Vec<(String, &crate::model::ImageRef)> = variants
                .iter()
                .filter(|s| origin_sha.get(s.id.as_str()) != Some(&s.image.sha256.as_str()))
                .map(|s| (s.id.clone(), &s.image))
                .collect();
            let fresh: HashMap<String, EmbeddingVector<f32>> = self
                .embed_images(changed)?
                .into_iter()
                .map(|v| (v.id().to_string(), v))
                .collect();
            let vectors = variants
                .iter()
                .map(|s| {
                    fresh
                        .get(&s.id)
                        .or_else(|| by_id.get(s.id.as_str()).copied())
                        .cloned()
                        .ok_or_else(|| format!("no vector for {}", s.id))
                })
                .collect::<Result<Vec<_>, String>>()?;
            let report = self.contamination(&idx, &vectors, &variants, &captions)?;
            for row in contamination_delta(&static_report, &report).map_err(|e| e.to_string())? {
                reductions.push(VariantReduction {
                    variant: label.clone(),
                    row,
                });
            }
            dynamic.push(json!({"variant": label, "report": report}));
        }
        write_json(&self.layout.dynamic_report(), &dynamic)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &reductions {
            w.serialize(FlatReduction::from(r)).map_err(|e| e.to_string())?;
        }
        write_bytes(&self.layout.reductions(), &w.into_inner().map_err(|e| e.to_string())?)?;
        Ok(vec![self.layout.dynamic_report(), self.layout.reductions()])
    }

    fn eval(&self) -> StageResult {
        let cfg = self.cfg;
        let bench = cfg.benchmark_name();
        let samples = read_samples(&self.layout.samples())?;
        let mut sets: Vec<(String, u32, Vec<VqaSample>)> = vec![("vanilla".into(), 0, samples)];
        for label in self.stack_labels() {
            for k in 0..cfg.seeds {
                let records = read_records(&self.layout.variants(&label, k))?;
                sets.push((label.clone(), k, records.into_iter().map(|r| r.sample).collect()));
            }
        }
        let mut outputs = Vec::new();
        for (name, ep) in &self.handles.eval {
            for (label, k, set) in &sets {
                let run = evaluate(set, ep, &self.store, &bench, label, *k as u64);
                let p = self.layout.run(&safe_name(name), label, *k);
                let mut buf = Vec::new();
                write_run_jsonl(&run, &mut buf).map_err(|e| e.to_string())?;
                write_bytes(&p, &buf)?;
                outputs.push(p);
            }
        }
        Ok(outputs)
    }

    fn report(&self) -> StageResult {
        let l = &self.layout;
        let dir = l.report();
        let mut runs: Vec<EvalRun> = Vec::new();
        for p in self.run_files() {
            if p.exists() {
                runs.push(read_run_jsonl(&read_text(&p)?).map_err(|e| format!("{}: {e}", p.display()))?);
            }
        }
        let reductions: Vec<VariantReduction> = if l.reductions().exists() {
            let text = read_text(&l.reductions())?;
            let mut rd = csv::Reader::from_reader(text.as_bytes());
            rd.deserialize::<FlatReduction>()
                .map(|r| r.map(VariantReduction::from).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        let mut files: Vec<PathBuf> = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), String> {
            let p = dir.join(name);
            write_bytes(&p, &bytes)?;
            files.push(p);
            Ok(())
        };

        let table = aggregate(&runs);
        let mut scores = csv::Writer::from_writer(Vec::new());
        let mut cells = csv::Writer::from_writer(Vec::new());
        cells
            .write_record(["model", "benchmark", "stack", "seeds", "mean_delta", "mean_std", "unscored"])
            .map_err(|e| e.to_string())?;
        for r in &table.rows {
            scores.serialize(r).map_err(|e| e.to_string())?;
            let delta = r.delta.map(|d| format_delta_cell(r.mean, d)).unwrap_or_default();
            cells
                .write_record([
                    r.model.clone(),
                    r.benchmark.clone(),
                    r.stack.clone(),
                    r.seeds.to_string(),
                    delta,
                    format_std_cell(r.mean, r.std),
                    r.unscored.to_string(),
                ])
                .map_err(|e| e.to_string())?;
        }
        put("scores.csv", scores.into_inner().map_err(|e| e.to_string())?)?;
        put("delta_table.csv", cells.into_inner().map_err(|e| e.to_string())?)?;
        put("scores.json", pretty(&table)?)?;

        let mut per_task = csv::Writer::from_writer(Vec::new());
        per_task
            .write_record(["model", "benchmark", "stack", "seed", "task", "accuracy"])
            .map_err(|e| e.to_string())?;
        for run in &runs {
            for (task, acc) in per_task_breakdown(run) {
                per_task
                    .write_record([
                        run.model.clone(),
                        run.benchmark.clone(),
                        run.stack.clone(),
                        run.seed.to_string(),
                        task,
                        acc.to_string(),
                    ])
                    .map_err(|e| e.to_string())?;
            }
        }
        put("per_task.csv", per_task.into_inner().map_err(|e| e.to_string())?)?;

        let mut by_model: BTreeMap<(String, String), Vec<EvalRun>> = BTreeMap::new();
        for r in &runs {
            by_model.entry((r.model.clone(), r.benchmark.clone())).or_default().push(r.clone());
        }
        let mut sweep = csv::Writer::from_writer(Vec::new());
        sweep
            .write_record(["model", "benchmark", "ratio", "runs", "mean"])
            .map_err(|e| e.to_string())?;
        let mut warnings: Vec<String> = Vec::new();
        for ((model, bench), rs) in &by_model {
            let rep = ratio_sweep_report(rs);
            for row in rep.rows {
                sweep
                    .write_record([model.clone(), bench.clone(), row.ratio.to_string(), row.runs.to_string(), row.mean.to_string()])
                    .map_err(|e| e.to_string())?;
            }
            warnings.extend(rep.warnings.into_iter().map(|w| format!("{model}/{bench}: {w}")));
        }
        put("ratio_sweep.csv", sweep.into_inner().map_err(|e| e.to_string())?)?;

        if l.attempts().exists() {
            let stats: Vec<AttemptStats> = read_json(&l.attempts())?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for s in &stats {
                w.serialize(s).map_err(|e| e.to_string())?;
            }
            put("judge_attempts.csv", w.into_inner().map_err(|e| e.to_string())?)?;
        }
        if l.static_report().exists() {
            let static_report: ContaminationReport = read_json(&l.static_report())?;
            put(
                "contamination.json",
                pretty(&json!({"static": static_report, "reductions": reductions}))?,
            )?;
        }

        let bundle = Bundle { runs, reductions };
        let grid: Vec<StrategyStack> = paired_grid()
            .into_iter()
            .map(|mut s| {
                for op in &mut s.image_ops {
                    if op.kind == crate::model::StrategyKind::V3 {
                        *op = StrategyId::v3(self.cfg.v3_ratio);
                    }
                }
                s
            })
            .collect();
        let has = |labels: Vec<String>| labels.iter().all(|x| self.stack_labels().contains(x));
        for fig in Figure::ALL {
            let wanted = !bundle.runs.is_empty() || fig == Figure::ContaminationReduction;
            let ready = wanted
                && match fig {
                    Figure::DeltaHeatmap => has(grid.iter().map(ToString::to_string).collect()),
                    Figure::RatioSweep => has(SWEEP_RATIOS.iter().map(|r| StrategyId::v3(*r).to_string()).collect()),
                    Figure::ContaminationReduction => !bundle.reductions.is_empty(),
                    Figure::Radar | Figure::StackCount => true,
                };
            if ready {
                let bytes = emit_figure_data(&bundle, fig, &grid).map_err(|e| format!("{fig}: {e}"))?;
                put(&format!("figures/{fig}.csv"), bytes)?;
            } else {
                warnings.push(format!("figure {fig} not emitted: required runs not configured"));
            }
        }
        warnings.sort();
        put("warnings.txt", format!("{}\n", warnings.join("\n")).into_bytes())?;

        let mut listed: Vec<PathBuf> = files.clone();
        for p in self.run_files().into_iter().chain(self.bootstrap_files()) {
            if p.exists() {
                listed.push(p);
            }
        }
        for p in [l.samples(), l.static_report(), l.dynamic_report(), l.attempts()] {
            if p.exists() {
                listed.push(p);
            }
        }
        let entries = listed
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Ok(BundleFile {
                    path: l.rel(p),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let manifest = BundleManifest::new(entries);
        write_json(&l.bundle(), &manifest)?;
        files.push(l.bundle());
        Ok(files)
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, String> {
    let mut b = serde_json::to_vec_pretty(v).map_err(|e| e.to_string())?;
    b.push(b'\n');
    Ok(b)
}

/// Loads a config file and runs it; the error carries the exit code.
pub fn run_config_file(path: &Path, connector: &dyn Connector, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let cfg = PipelineConfig::load(path)?;
    run_pipeline(&cfg, connector, opts)
}
