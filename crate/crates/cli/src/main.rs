use std::collections::HashMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vlb_core::benchio::{self, write_canonical, AdapterKind};
use vlb_core::composer::{difficulty_label, paired_grid, StrategyStack};
use vlb_core::config::PipelineConfig;
use vlb_core::contamination::{
    image_contamination, image_text_contamination, parse_captions, write_report_csv, ContaminationParams,
};
use vlb_core::eval::{aggregate, format_std_cell, write_run_jsonl, EvalRun};
use vlb_core::fixture::{write_demo_fixture, Endpoints};
use vlb_core::index::io::{read_index, read_vectors, write_index};
use vlb_core::index::{EmbeddingIndex, EmbeddingVector, HnswParams, IndexMode};
use vlb_core::judge::{attempt_stats, write_audit_csv, AttemptStats};
use vlb_core::model::{VariantRecord, VqaSample};
use vlb_core::pipeline::{
    open_session, read_records, read_samples, run_pipeline, write_records, Layout, PipelineError, RunOptions,
    RunSummary, Stage, CONFIG_EXIT_CODE,
};
use vlb_core::report::Figure;
use vlb_http::HttpConnector;

#[derive(Parser)]
#[command(name = "vlb", version, about = "Bootstrap dynamic VQA benchmarks, measure contamination, score models")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; overrides `jobs` in the config.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage, reusing cached stage outputs.
    Run(RunArgs),
    /// Parse a benchmark file into canonical JSONL.
    Ingest(IngestArgs),
    /// Build or query an embedding index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Image-only and image-text contamination.
    Contaminate(ContaminateArgs),
    /// Generate judge-verified variants.
    Bootstrap(BootstrapArgs),
    /// Judge attempt statistics of variant sets.
    JudgeAudit(JudgeAuditArgs),
    /// List stacks with their difficulty labels.
    Compose(ComposeArgs),
    /// Score a model on a sample or variant set.
    Eval(EvalArgs),
    /// Write the report bundle and print figure data.
    Report(ReportArgs),
    /// Serve the deterministic mock of all four services.
    Mockd(MockdArgs),
    /// Write the 20-sample demo benchmark, corpus and config.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Stop after this stage.
    #[arg(long)]
    until: Option<Stage>,
    /// Ignore cached stage outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Canonical JSONL output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Vector file in, index file out.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        approximate: bool,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        ef_construction: Option<usize>,
        #[arg(long)]
        ef_search: Option<usize>,
    },
    /// Nearest training vectors for each query as TSV.
    Query {
        /// Index file, or a plain vector file scanned exhaustively.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
    },
}

#[derive(Args)]
struct ContaminateArgs {
    /// Eval image vectors.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Train index file or vector file.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    theta: f64,
    /// Train captions JSONL; needs --judge and --samples.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Judge endpoint name from the config.
    #[arg(long)]
    judge: Option<String>,
    /// Canonical samples of the eval set.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value = "benchmark")]
    benchmark: String,
    #[arg(long, default_value = "corpus")]
    corpus: String,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Canonical samples to bootstrap; without it the pipeline runs up to
    /// the bootstrap stage.
    #[arg(long)]
    set: Option<PathBuf>,
    /// Stack such as `V1+L4`; repeatable.
    #[arg(long)]
    stack: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u32,
    /// Directory the sample image paths are relative to; defaults to the
    /// benchmark directory.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Variant JSONL output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Args)]
struct JudgeAuditArgs {
    /// Variant JSONL files; without any, the bootstrap stage's statistics.
    #[arg(long)]
    set: Vec<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    stack: Vec<String>,
    /// The twelve image × language pairs.
    #[arg(long)]
    grid: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Endpoint name from the config.
    #[arg(long)]
    model: Option<String>,
    /// Sample / variant JSONL, a bootstrap stack directory holding
    /// `seed<k>.jsonl`, or a path containing `{seed}`.
    #[arg(long)]
    set: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u32,
    /// Stack label recorded in the runs.
    #[arg(long, default_value = "vanilla")]
    stack: String,
    /// Directory for run JSONL files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Print this figure's CSV.
    #[arg(long)]
    figure: Option<Figure>,
}

#[derive(Args)]
struct MockdArgs {
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 8089)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// Point every endpoint at this mock server instead of in-process mocks.
    #[arg(long)]
    mock_url: Option<String>,
}

struct Failure {
    code: i32,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

fn fail(stage: Stage) -> impl Fn(String) -> Failure {
    move |message| Failure {
        code: stage.exit_code(),
        message: format!("{stage}: {message}"),
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: CONFIG_EXIT_CODE,
        message: message.into(),
    }
}

fn s<E: ToString>(e: E) -> String {
    e.to_string()
}

struct Ctx {
    config: Option<PathBuf>,
    jobs: Option<usize>,
    connector: HttpConnector,
}

impl Ctx {
    fn load(&self) -> Result<PipelineConfig, Failure> {
        let p = self.config.as_ref().ok_or_else(|| config_error("--config is required"))?;
        let mut cfg = PipelineConfig::load(p).map_err(|e| config_error(e.to_string()))?;
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        Ok(cfg)
    }

    fn pipeline(&self, cfg: &PipelineConfig, until: Option<Stage>, force: bool) -> Result<RunSummary, Failure> {
        let opts = RunOptions {
            jobs: self.jobs,
            until,
            force,
        };
        let summary = run_pipeline(cfg, &self.connector, &opts)?;
        for st in &summary.stages {
            eprintln!("{:<14} {:?}", st.stage.name(), st.outcome);
        }
        Ok(summary)
    }

    /// Runs `f` inside a pool of `jobs` workers.
    fn pooled<T: Send>(&self, cfg: &PipelineConfig, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
        let pool = rayon_pool(self.jobs.unwrap_or(cfg.jobs))?;
        Ok(pool.install(f))
    }
}

fn rayon_pool(jobs: usize) -> Result<vlb_core::pipeline::Pool, Failure> {
    vlb_core::pipeline::pool(jobs).map_err(config_error)
}

fn output(path: Option<&Path>, bytes: &[u8]) -> Result<(), String> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(s)?;
            }
            fs::write(p, bytes).map_err(|e| format!("{}: {e}", p.display()))
        }
        None => io::stdout().write_all(bytes).map_err(s),
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(s)?;
    }
    w.into_inner().map_err(s)
}

fn load_vectors(p: &Path) -> Result<Vec<EmbeddingVector<f32>>, String> {
    let f = fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    read_vectors(BufReader::new(f)).map_err(|e| format!("{}: {e}", p.display()))
}

/// An index file, or a vector file indexed exhaustively.
fn load_index(p: &Path) -> Result<EmbeddingIndex<f32>, String> {
    let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
    match read_index(&bytes[..]) {
        Ok(idx) => Ok(idx),
        Err(_) => {
            let v = read_vectors(&bytes[..]).map_err(|e| format!("{}: {e}", p.display()))?;
            EmbeddingIndex::build(v, IndexMode::Exhaustive).map_err(s)
        }
    }
}

/// Variant records or canonical samples.
fn load_set(p: &Path) -> Result<Vec<VqaSample>, String> {
    match read_records(p) {
        Ok(r) => Ok(r.into_iter().map(|r| r.sample).collect()),
        Err(_) => read_samples(p),
    }
}

fn cmd_run(ctx: &Ctx, a: RunArgs) -> Result<(), Failure> {
    let cfg = ctx.load()?;
    let summary = ctx.pipeline(&cfg, a.until, a.force)?;
    if let Some(h) = summary.bundle_hash {
        println!("bundle {h}");
    }
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, a: IngestArgs) -> Result<(), Failure> {
    let Some(input) = a.input else {
        let cfg = ctx.load()?;
        ctx.pipeline(&cfg, Some(Stage::Ingest), false)?;
        println!("{}", Layout::new(&cfg.output_dir).samples().display());
        return Ok(());
    };
    let f = fail(Stage::Ingest);
    let adapter: AdapterKind = a
        .adapter
        .as_deref()
        .unwrap_or("canonical")
        .parse()
        .map_err(|e: benchio::BenchError| config_error(e.to_string()))?;
    let got = benchio::ingest(&input, adapter).map_err(|e| f(e.to_string()))?;
    let samples = benchio::subset(&got.samples, a.fraction, a.seed).map_err(|e| f(e.to_string()))?;
    let mut buf = Vec::new();
    write_canonical(&samples, &mut buf).map_err(|e| f(e.to_string()))?;
    output(a.out.as_deref(), &buf).map_err(&f)?;
    eprintln!("{} samples", samples.len());
    Ok(())
}

fn cmd_index(c: IndexCmd) -> Result<(), Failure> {
    let f = fail(Stage::Embed);
    match c {
        IndexCmd::Build {
            input,
            out,
            approximate,
            m,
            ef_construction,
            ef_search,
        } => {
            let vectors = load_vectors(&input).map_err(&f)?;
            let mode = if approximate {
                let d = HnswParams::default();
                IndexMode::Approximate(HnswParams {
                    m: m.unwrap_or(d.m),
                    ef_construction: ef_construction.unwrap_or(d.ef_construction),
                    ef_search: ef_search.unwrap_or(d.ef_search),
                    ..d
                })
            } else {
                IndexMode::Exhaustive
            };
            let idx = EmbeddingIndex::build(vectors, mode).map_err(|e| f(e.to_string()))?;
            let mut buf = Vec::new();
            write_index(&mut buf, &idx).map_err(|e| f(e.to_string()))?;
            output(Some(&out), &buf).map_err(&f)?;
            eprintln!("{} vectors of dim {}", idx.len(), idx.dim());
        }
        IndexCmd::Query { index, query, top_k } => {
            let idx = load_index(&index).map_err(&f)?;
            let queries = load_vectors(&query).map_err(&f)?;
            let mut out = String::from("query\trank\ttrain\tsimilarity\n");
            for q in &queries {
                for (rank, hit) in idx.top_k(q, top_k).map_err(|e| f(e.to_string()))?.iter().enumerate() {
                    out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", q.id(), rank + 1, hit.id, hit.score));
                }
            }
            output(None, out.as_bytes()).map_err(&f)?;
        }
    }
    Ok(())
}

fn cmd_contaminate(ctx: &Ctx, a: ContaminateArgs) -> Result<(), Failure> {
    let (Some(eval), Some(train)) = (&a.eval, &a.train) else {
        let cfg = ctx.load()?;
        ctx.pipeline(&cfg, Some(Stage::Contaminate), false)?;
        println!("{}", Layout::new(&cfg.output_dir).static_report().display());
        return Ok(());
    };
    let f = fail(Stage::Contaminate);
    let vectors = load_vectors(eval).map_err(&f)?;
    let idx = load_index(train).map_err(&f)?;
    let params = ContaminationParams {
        threshold: a.theta,
        ..Default::default()
    };
    let mut report = image_contamination(&a.benchmark, &a.corpus, &vectors, &idx, &params).map_err(|e| f(e.to_string()))?;
    if let Some(cp) = &a.captions {
        let (Some(judge), Some(samples)) = (&a.judge, &a.samples) else {
            return Err(config_error("--captions needs --judge and --samples"));
        };
        let cfg = ctx.load()?;
        let session = open_session(&cfg, &ctx.connector)?;
        let ep = session.chat(judge).map_err(config_error)?;
        let caps = parse_captions(&fs::read_to_string(cp).map_err(|e| f(format!("{}: {e}", cp.display())))?)
            .map_err(&f)?;
        let by_id: HashMap<String, VqaSample> = read_samples(samples)
            .map_err(&f)?
            .into_iter()
            .map(|s| (s.id.clone(), s))
            .collect();
        report = ctx
            .pooled(&cfg, || image_text_contamination(report, &caps, &by_id, &ep))?
            .map_err(|e| f(e.to_string()))?;
    }
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| f(e.to_string()))?;
    json.push(b'\n');
    output(a.out.as_deref(), &json).map_err(&f)?;
    if let Some(p) = &a.csv {
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).map_err(|e| f(e.to_string()))?;
        output(Some(p), &buf).map_err(&f)?;
    }
    Ok(())
}

fn parse_stacks(labels: &[String]) -> Result<Vec<StrategyStack>, Failure> {
    labels
        .iter()
        .map(|l| l.parse::<StrategyStack>().map_err(|e| config_error(format!("stack `{l}`: {e}"))))
        .collect()
}

fn cmd_bootstrap(ctx: &Ctx, a: BootstrapArgs) -> Result<(), Failure> {
    let mut cfg = ctx.load()?;
    let Some(set) = a.set else {
        if !a.stack.is_empty() {
            cfg.stacks = a.stack.clone();
        }
        ctx.pipeline(&cfg, Some(Stage::Bootstrap), false)?;
        return Ok(());
    };
    let f = fail(Stage::Bootstrap);
    let stacks = parse_stacks(&a.stack)?;
    if stacks.is_empty() {
        return Err(config_error("--set needs at least one --stack"));
    }
    let session = open_session(&cfg, &ctx.connector)?;
    let samples = read_samples(&set).map_err(&f)?;
    let base = a
        .images
        .clone()
        .or_else(|| cfg.benchmark.path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let (records, audit) = ctx.pooled(&cfg, || -> Result<_, String> {
        session.import(&base, &samples)?;
        let mut records: Vec<VariantRecord> = Vec::new();
        let mut audit = Vec::new();
        for stack in &stacks {
            let (r, rows) = session.bootstrap(&samples, stack, a.seed)?;
            records.extend(r);
            audit.extend(rows);
        }
        Ok((records, audit))
    })?
    .map_err(&f)?;
    match &a.out {
        Some(p) => write_records(p, &records).map_err(&f)?,
        None => {
            let mut out = Vec::new();
            for r in &records {
                serde_json::to_writer(&mut out, r).map_err(|e| f(e.to_string()))?;
                out.push(b'\n');
            }
            output(None, &out).map_err(&f)?;
        }
    }
    if let Some(p) = &a.audit {
        let mut buf = Vec::new();
        write_audit_csv(&audit, &mut buf).map_err(|e| f(e.to_string()))?;
        output(Some(p), &buf).map_err(&f)?;
    }
    Ok(())
}

fn cmd_judge_audit(ctx: &Ctx, a: JudgeAuditArgs) -> Result<(), Failure> {
    let f = fail(Stage::Bootstrap);
    let stats: Vec<AttemptStats> = if a.set.is_empty() {
        let cfg = ctx.load()?;
        let p = Layout::new(&cfg.output_dir).attempts();
        let text = fs::read_to_string(&p).map_err(|e| f(format!("{}: {e} (run the bootstrap stage first)", p.display())))?;
        serde_json::from_str(&text).map_err(|e| f(e.to_string()))?
    } else {
        let mut all = Vec::new();
        for p in &a.set {
            all.extend(read_records(p).map_err(&f)?);
        }
        attempt_stats(&all)
    };
    output(None, &csv_bytes(&stats).map_err(&f)?).map_err(&f)
}

#[derive(Serialize)]
struct ComposeRow {
    stack: String,
    image_ops: usize,
    lang_ops: usize,
    hard: usize,
    easy: usize,
}

fn cmd_compose(a: ComposeArgs) -> Result<(), Failure> {
    let mut stacks = parse_stacks(&a.stack)?;
    if a.grid || stacks.is_empty() {
        stacks.extend(paired_grid());
    }
    let rows: Vec<ComposeRow> = stacks
        .iter()
        .map(|st| {
            let (hard, easy) = difficulty_label(st);
            ComposeRow {
                stack: st.to_string(),
                image_ops: st.image_ops.len(),
                lang_ops: st.lang_ops.len(),
                hard,
                easy,
            }
        })
        .collect();
    output(None, &csv_bytes(&rows).map_err(config_error)?).map_err(config_error)
}

fn seed_paths(set: &Path, seeds: u32) -> Vec<(u64, PathBuf)> {
    let text = set.to_string_lossy();
    if set.is_dir() {
        (0..seeds).map(|k| (k as u64, set.join(format!("seed{k}.jsonl")))).collect()
    } else if text.contains("{seed}") {
        (0..seeds)
            .map(|k| (k as u64, PathBuf::from(text.replace("{seed}", &k.to_string()))))
            .collect()
    } else {
        vec![(0, set.to_path_buf())]
    }
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = ctx.load()?;
    let Some(set) = a.set else {
        if let Some(m) = a.model {
            cfg.roles.eval_models = vec![m];
        }
        ctx.pipeline(&cfg, Some(Stage::Eval), false)?;
        return Ok(());
    };
    let model = a.model.ok_or_else(|| config_error("--set needs --model"))?;
    let f = fail(Stage::Eval);
    let session = open_session(&cfg, &ctx.connector)?;
    let mut runs: Vec<EvalRun> = Vec::new();
    for (seed, p) in seed_paths(&set, a.seeds) {
        let samples = load_set(&p).map_err(&f)?;
        let run = ctx
            .pooled(&cfg, || session.evaluate(&model, &samples, &a.stack, seed))?
            .map_err(&f)?;
        println!("seed {seed}\t{:.2}\tunscored {}", run.accuracy * 100.0, run.unscored);
        if let Some(dir) = &a.out {
            let mut buf = Vec::new();
            write_run_jsonl(&run, &mut buf).map_err(|e| f(e.to_string()))?;
            output(Some(&dir.join(format!("seed{seed}.jsonl"))), &buf).map_err(&f)?;
        }
        runs.push(run);
    }
    for row in &aggregate(&runs).rows {
        println!("{}\t{}\t{}\t{}", row.model, row.benchmark, row.stack, format_std_cell(row.mean, row.std));
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, a: ReportArgs) -> Result<(), Failure> {
    let cfg = ctx.load()?;
    let summary = ctx.pipeline(&cfg, None, false)?;
    let f = fail(Stage::Report);
    match a.figure {
        Some(fig) => {
            let p = Layout::new(&cfg.output_dir).report().join(format!("figures/{fig}.csv"));
            let bytes = fs::read(&p).map_err(|e| f(format!("{}: {e}; see report/warnings.txt", p.display())))?;
            output(None, &bytes).map_err(&f)?;
        }
        None => {
            if let Some(h) = summary.bundle_hash {
                println!("bundle {h}");
            }
        }
    }
    Ok(())
}

fn cmd_mockd(a: MockdArgs) -> Result<(), Failure> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| config_error(format!("address: {e}")))?;
    eprintln!("mockd listening on http://{addr}");
    vlb_http::serve_forever(a.fixtures, addr).map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })
}

fn cmd_fixture(a: FixtureArgs) -> Result<(), Failure> {
    let endpoints = match a.mock_url {
        Some(u) => Endpoints::Http(u),
        None => Endpoints::InProcess,
    };
    let p = write_demo_fixture(&a.out, &endpoints).map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })?;
    println!("{}", p.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        config: cli.config,
        jobs: cli.jobs,
        connector: HttpConnector::default(),
    };
    let r = match cli.cmd {
        Cmd::Run(a) => cmd_run(&ctx, a),
        Cmd::Ingest(a) => cmd_ingest(&ctx, a),
        Cmd::Index(c) => cmd_index(c),
        Cmd::Contaminate(a) => cmd_contaminate(&ctx, a),
        Cmd::Bootstrap(a) => cmd_bootstrap(&ctx, a),
        Cmd::JudgeAudit(a) => cmd_judge_audit(&ctx, a),
        Cmd::Compose(a) => cmd_compose(a),
        Cmd::Eval(a) => cmd_eval(&ctx, a),
        Cmd::Report(a) => cmd_report(&ctx, a),
        Cmd::Mockd(a) => cmd_mockd(a),
        Cmd::Fixture(a) => cmd_fixture(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code.clamp(1, 255) as u8)
        }
    }
}
