//! Model querying, answer scoring, seed aggregation and delta tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clients::{ChatEndpoint, ChatRequest, Part, ServiceError};
use crate::composer::StrategyStack;
use crate::judge::{first_yes_no, YesNo};
use crate::model::{Format, OptionItem, VqaSample, SWEEP_RATIOS};
use crate::store::ArtifactStore;

/// Question text as sent to the evaluated model: the stem, then one line per
/// option rendered `A. text` in stored order.
pub fn render_question(sample: &VqaSample) -> String {
    let mut out = sample.question.clone();
    for o in &sample.options {
        out.push('\n');
        out.push_str(&format!("{}. {}", o.letter, o.text));
    }
    out
}

/// Evaluation request: image first, temperature 0.
pub fn eval_request(sample: &VqaSample, endpoint: &ChatEndpoint, image_png: &[u8]) -> ChatRequest {
    let mut req = endpoint.request(vec![Part::png(image_png), Part::text(render_question(sample))]);
    req.temperature = 0.0;
    req
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("image unavailable: {0}")]
    Image(String),
    #[error("no vanilla run for model {model} on {benchmark}")]
    MissingVanilla { model: String, benchmark: String },
}

pub fn ask_model(sample: &VqaSample, endpoint: &ChatEndpoint, store: &ArtifactStore) -> Result<String, EvalError> {
    let png = store
        .get(&sample.image.sha256)
        .map_err(|e| EvalError::Image(e.to_string()))?;
    Ok(endpoint.chat(&eval_request(sample, endpoint, &png))?.text)
}

fn tokens(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            out.push((s, &text[s..i]));
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Letter chosen by the extraction ladder: the first standalone option
/// letter, else the unique option whose text the response contains. A
/// capital `A` followed by a lowercase word is read as the article.
pub fn extract_choice(response: &str, options: &[OptionItem]) -> Option<String> {
    let toks = tokens(response);
    for (i, (pos, t)) in toks.iter().enumerate() {
        if !options.iter().any(|o| o.letter == *t) {
            continue;
        }
        if *t == "A" {
            let after = &response[pos + 1..];
            let next_is_word = after.starts_with(' ')
                && toks
                    .get(i + 1)
                    .is_some_and(|(_, n)| n.chars().next().is_some_and(char::is_lowercase));
            if next_is_word {
                continue;
            }
        }
        return Some(t.to_string());
    }
    let lower = response.to_lowercase();
    let named: Vec<&OptionItem> = options
        .iter()
        .filter(|o| !o.text.trim().is_empty() && lower.contains(&o.text.trim().to_lowercase()))
        .collect();
    match named.as_slice() {
        [one] => Some(one.letter.clone()),
        _ => None,
    }
}

pub fn score_mcq(response: &str, options: &[OptionItem], answer: &str) -> bool {
    extract_choice(response, options).is_some_and(|l| l == answer)
}

pub fn score_yesno(response: &str, answer: &str) -> bool {
    let expected = match answer.trim().to_ascii_lowercase().as_str() {
        "yes" => YesNo::Yes,
        "no" => YesNo::No,
        _ => return false,
    };
    first_yes_no(response) == Some(expected)
}

fn normalize(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', '!', '?'])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Exact match against the canonical answer or an alias, ignoring case,
/// surrounding whitespace and trailing punctuation.
pub fn score_open(response: &str, sample: &VqaSample) -> bool {
    let r = normalize(response);
    sample.answer.all().any(|a| normalize(a) == r)
}

pub fn score(sample: &VqaSample, response: &str) -> bool {
    match sample.format {
        Format::Mcq => score_mcq(response, &sample.options, &sample.answer.canonical),
        Format::YesNo => score_yesno(response, &sample.answer.canonical),
        Format::Open => score_open(response, sample),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub response: String,
    pub correct: bool,
    /// Set when the model could not be queried; such samples count as wrong.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub task_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub model: String,
    pub benchmark: String,
    pub stack: String,
    pub seed: u64,
    pub per_sample: Vec<SampleScore>,
    pub accuracy: f64,
    pub unscored: usize,
}

impl EvalRun {
    /// Sorts per-sample entries by id and recomputes the tallies.
    pub fn new(model: &str, benchmark: &str, stack: &str, seed: u64, mut per_sample: Vec<SampleScore>) -> Self {
        per_sample.sort_by(|a, b| a.id.cmp(&b.id));
        let correct = per_sample.iter().filter(|s| s.correct).count();
        let unscored = per_sample.iter().filter(|s| s.error.is_some()).count();
        Self {
            model: model.to_string(),
            benchmark: benchmark.to_string(),
            stack: stack.to_string(),
            seed,
            accuracy: correct as f64 / per_sample.len().max(1) as f64,
            unscored,
            per_sample,
        }
    }
}

/// Queries and scores every sample; service failures are kept as unscored entries.
pub fn evaluate(
    samples: &[VqaSample],
    endpoint: &ChatEndpoint,
    store: &ArtifactStore,
    benchmark: &str,
    stack: &str,
    seed: u64,
) -> EvalRun {
    use rayon::prelude::*;
    let per_sample: Vec<SampleScore> = samples
        .par_iter()
        .map(|s| match ask_model(s, endpoint, store) {
            Ok(resp) => SampleScore {
                id: s.id.clone(),
                correct: score(s, &resp),
                response: resp,
                error: None,
                task_tag: s.task_tag.clone(),
            },
            Err(e) => SampleScore {
                id: s.id.clone(),
                response: String::new(),
                correct: false,
                error: Some(e.to_string()),
                task_tag: s.task_tag.clone(),
            },
        })
        .collect();
    EvalRun::new(&endpoint.model, benchmark, stack, seed, per_sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunHeader {
    model: String,
    benchmark: String,
    stack: String,
    seed: u64,
    accuracy: f64,
    unscored: usize,
}

/// One header line, then one line per sample.
pub fn write_run_jsonl<W: std::io::Write>(run: &EvalRun, mut w: W) -> std::io::Result<()> {
    let header = RunHeader {
        model: run.model.clone(),
        benchmark: run.benchmark.clone(),
        stack: run.stack.clone(),
        seed: run.seed,
        accuracy: run.accuracy,
        unscored: run.unscored,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &run.per_sample {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_run_jsonl(text: &str) -> Result<EvalRun, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: RunHeader = serde_json::from_str(lines.next().ok_or("empty run file")?).map_err(|e| e.to_string())?;
    let per_sample = lines
        .map(|l| serde_json::from_str::<SampleScore>(l).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalRun::new(
        &header.model,
        &header.benchmark,
        &header.stack,
        header.seed,
        per_sample,
    ))
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub benchmark: String,
    pub stack: String,
    pub seeds: usize,
    /// Accuracy in percent.
    pub mean: f64,
    pub std: f64,
    /// `mean − vanilla mean` in percentage points, when a vanilla run exists.
    pub delta: Option<f64>,
    pub unscored: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

/// Groups runs by (model, benchmark, stack) and aggregates over seeds.
pub fn aggregate(runs: &[EvalRun]) -> ScoreTable {
    let mut groups: BTreeMap<(String, String, String), Vec<&EvalRun>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.model.clone(), r.benchmark.clone(), r.stack.clone()))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<ScoreRow> = groups
        .into_iter()
        .map(|((model, benchmark, stack), rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.accuracy * 100.0).collect();
            let (mean, std) = mean_std(&accs);
            ScoreRow {
                model,
                benchmark,
                stack,
                seeds: rs.len(),
                mean,
                std,
                delta: None,
                unscored: rs.iter().map(|r| r.unscored).sum(),
            }
        })
        .collect();
    let vanilla: BTreeMap<(String, String), f64> = rows
        .iter()
        .filter(|r| r.stack == "vanilla")
        .map(|r| ((r.model.clone(), r.benchmark.clone()), r.mean))
        .collect();
    for r in &mut rows {
        r.delta = vanilla.get(&(r.model.clone(), r.benchmark.clone())).map(|v| r.mean - v);
    }
    ScoreTable { rows }
}

impl ScoreTable {
    /// Non-vanilla rows, failing if any lacks a vanilla baseline.
    pub fn delta_rows(&self) -> Result<Vec<&ScoreRow>, EvalError> {
        self.rows
            .iter()
            .filter(|r| r.stack != "vanilla")
            .map(|r| {
                if r.delta.is_some() {
                    Ok(r)
                } else {
                    Err(EvalError::MissingVanilla {
                        model: r.model.clone(),
                        benchmark: r.benchmark.clone(),
                    })
                }
            })
            .collect()
    }

    pub fn get(&self, model: &str, benchmark: &str, stack: &str) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.benchmark == benchmark && r.stack == stack)
    }
}

/// `64.79 (4.65↓)`: mean and absolute delta, two decimals, arrow for sign.
pub fn format_delta_cell(mean: f64, delta: f64) -> String {
    let d = format!("{:.2}", delta.abs());
    let arrow = if d == "0.00" {
        ""
    } else if delta < 0.0 {
        "↓"
    } else {
        "↑"
    };
    format!("{mean:.2} ({d}{arrow})")
}

/// `69.10 (0.5737)`: mean to two decimals, std to four.
pub fn format_std_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.4})")
}

/// Tag key used for grouping: lowercased, `untagged` when empty.
pub fn task_key(tag: &str) -> String {
    let t = tag.trim();
    if t.is_empty() {
        "untagged".to_string()
    } else {
        t.to_lowercase()
    }
}

pub fn per_task_breakdown(run: &EvalRun) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in &run.per_sample {
        let e = counts.entry(task_key(&s.task_tag)).or_default();
        e.1 += 1;
        if s.correct {
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub runs: usize,
    /// Mean accuracy in percent.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// Ratio of a run whose stack is a lone V3, e.g. `V3@1.75`.
pub fn run_ratio(run: &EvalRun) -> Option<f64> {
    let stack: StrategyStack = run.stack.parse().ok()?;
    match (stack.image_ops.as_slice(), stack.lang_ops.is_empty()) {
        ([only], true) => only.ratio(),
        _ => None,
    }
}

/// Mean accuracy per outpaint ratio; missing sweep ratios are warned about.
pub fn ratio_sweep_report(runs: &[EvalRun]) -> SweepReport {
    let mut by: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in runs {
        if let Some(ratio) = run_ratio(r) {
            by.entry(ratio.to_bits()).or_default().push(r.accuracy * 100.0);
        }
    }
    let mut rows: Vec<SweepRow> = by
        .into_iter()
        .map(|(bits, accs)| SweepRow {
            ratio: f64::from_bits(bits),
            runs: accs.len(),
            mean: mean_std(&accs).0,
        })
        .collect();
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let warnings = SWEEP_RATIOS
        .iter()
        .filter(|r| !rows.iter().any(|row| row.ratio == **r))
        .map(|r| format!("no runs for ratio {r}"))
        .collect();
    SweepReport { rows, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> Vec<OptionItem> {
        vec![
            OptionItem::new("A", "the kitchen"),
            OptionItem::new("B", "a garden"),
            OptionItem::new("C", "the garage"),
            OptionItem::new("D", "an office"),
        ]
    }

    #[test]
    fn ladder_examples() {
        assert!(score_mcq("B", &opts(), "B"));
        assert!(score_mcq("The answer is (C) the kitchen.", &opts(), "C"));
        assert!(!score_mcq("Either the kitchen or a garden.", &opts(), "A"));
        assert!(score_mcq("It looks like the garage to me", &opts(), "C"));
        assert!(score_mcq("A dog is in a garden.", &opts(), "B"));
        assert!(score_mcq("A. the kitchen", &opts(), "A"));
    }

    #[test]
    fn yes_no_examples() {
        assert!(score_yesno("Yes, there is.", "yes"));
        assert!(!score_yesno("no", "yes"));
        assert!(!score_yesno("unclear", "yes"));
    }

    #[test]
    fn options_rendered_in_order() {
        let s = VqaSample {
            question: "Where?".into(),
            options: opts(),
            ..crate::model::tests::mcq()
        };
        assert_eq!(
            render_question(&s),
            "Where?\nA. the kitchen\nB. a garden\nC. the garage\nD. an office"
        );
    }

    #[test]
    fn std_of_single_run_is_zero() {
        assert_eq!(mean_std(&[42.0]), (42.0, 0.0));
    }

    #[test]
    fn cells() {
        assert_eq!(format_delta_cell(64.79, 64.79 - 69.44), "64.79 (4.65↓)");
        assert_eq!(format_delta_cell(70.0, 1.234), "70.00 (1.23↑)");
        assert_eq!(format_std_cell(69.1, 0.573_68), "69.10 (0.5737)");
    }

    fn run(stack: &str, seed: u64, correct: &[bool]) -> EvalRun {
        let per = correct
            .iter()
            .enumerate()
            .map(|(i, c)| SampleScore {
                id: format!("s{i}"),
                response: String::new(),
                correct: *c,
                error: None,
                task_tag: String::new(),
            })
            .collect();
        EvalRun::new("m", "b", stack, seed, per)
    }

    #[test]
    fn missing_vanilla() {
        let t = aggregate(&[run("V1", 0, &[true])]);
        assert!(matches!(t.delta_rows(), Err(EvalError::MissingVanilla { .. })));
    }

    #[test]
    fn sweep_rows_and_warnings() {
        let runs = vec![
            run("V3@1.25", 0, &[true, false]),
            run("V3", 0, &[true, true]),
            run("V3", 1, &[false, false]),
            run("V3@2", 0, &[true]),
        ];
        let r = ratio_sweep_report(&runs);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[1].ratio, 1.5);
        assert_eq!(r.rows[1].mean, 50.0);
        assert_eq!(r.warnings, vec!["no runs for ratio 1.75".to_string()]);
    }

    #[test]
    fn untagged_group() {
        let r = run("vanilla", 0, &[true, false]);
        assert_eq!(per_task_breakdown(&r)["untagged"], 0.5);
    }
}
