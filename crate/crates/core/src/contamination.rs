//! Image-only and image-text contamination of an evaluation set against a
//! training corpus, and static-vs-dynamic reductions.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{ChatEndpoint, Part, ServiceError};
use crate::index::{EmbeddingIndex, EmbeddingVector, IndexError, Scalar, SimilarityScale};
use crate::judge::{first_yes_no, YesNo};
use crate::model::VqaSample;
use crate::prompts;

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContaminationError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("threshold {0} must be in (0, 1]")]
    InvalidThreshold(f64),
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("no captions for train id {0}")]
    MissingCaption(String),
    #[error("no sample for eval id {0}")]
    MissingSample(String),
    #[error("judge failed on ({eval_id}, {train_id}): {source}")]
    Service {
        eval_id: String,
        train_id: String,
        source: ServiceError,
    },
    #[error("unparseable verdict on ({eval_id}, {train_id}): {raw:?}")]
    UnparseableVerdict {
        eval_id: String,
        train_id: String,
        raw: String,
    },
    #[error("reports differ in corpus or threshold: {0}")]
    CorpusMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub eval_id: String,
    pub train_id: String,
    pub score: f64,
    /// Further train neighbours at or above the threshold when `k > 1`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neighbours: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedPair {
    pub eval_id: String,
    pub train_id: String,
    pub verdict: String,
    pub contaminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub benchmark: String,
    pub corpus: String,
    pub threshold: f64,
    pub scale: SimilarityScale,
    pub eval_count: usize,
    pub image_only_rate: f64,
    pub image_text_rate: f64,
    pub matches: Vec<Match>,
    pub judged: Vec<JudgedPair>,
}

impl ContaminationReport {
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let expect = self.matches.len() as f64 / self.eval_count.max(1) as f64;
        if (self.image_only_rate - expect).abs() > 1e-12 {
            out.push("image_only_rate disagrees with matches".to_string());
        }
        if self.image_text_rate > self.image_only_rate + 1e-12 {
            out.push("image_text_rate exceeds image_only_rate".to_string());
        }
        for j in &self.judged {
            if !self.matches.iter().any(|m| m.eval_id == j.eval_id && m.train_id == j.train_id) {
                out.push(format!("judged pair ({}, {}) not in matches", j.eval_id, j.train_id));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationParams {
    pub threshold: f64,
    pub scale: SimilarityScale,
    /// Neighbours per eval image passed to the caption judge.
    pub k: usize,
}

impl Default for ContaminationParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            scale: SimilarityScale::RawCosine,
            k: 1,
        }
    }
}

/// Counts eval images whose best train similarity reaches the threshold.
pub fn image_contamination<T: Scalar>(
    benchmark: &str,
    corpus: &str,
    eval: &[EmbeddingVector<T>],
    train: &EmbeddingIndex<T>,
    params: &ContaminationParams,
) -> Result<ContaminationReport, ContaminationError> {
    let theta = params.threshold;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(ContaminationError::InvalidThreshold(theta));
    }
    if eval.is_empty() {
        return Err(ContaminationError::EmptyEval);
    }
    let k = params.k.max(1);
    let found: Result<Vec<Option<Match>>, IndexError> = eval
        .par_iter()
        .map(|q| {
            let hits = train.top_k(q, k)?;
            let scored: Vec<(String, f64)> = hits
                .into_iter()
                .map(|h| (h.id, params.scale.apply(h.score).to_f64_lossy()))
                .filter(|(_, s)| *s >= theta)
                .collect();
            Ok(scored.split_first().map(|((id, s), rest)| Match {
                eval_id: q.id().to_string(),
                train_id: id.clone(),
                score: *s,
                neighbours: rest.to_vec(),
            }))
        })
        .collect();
    let mut matches: Vec<Match> = found?.into_iter().flatten().collect();
    matches.sort_by(|a, b| a.eval_id.cmp(&b.eval_id));
    Ok(ContaminationReport {
        benchmark: benchmark.to_string(),
        corpus: corpus.to_string(),
        threshold: theta,
        scale: params.scale,
        eval_count: eval.len(),
        image_only_rate: matches.len() as f64 / eval.len() as f64,
        image_text_rate: 0.0,
        matches,
        judged: Vec::new(),
    })
}

/// The caption-judge request for one matched pair.
pub fn caption_prompt(endpoint: &ChatEndpoint, captions: &[&str], sample: &VqaSample) -> crate::clients::ChatRequest {
    let joined = captions.join("\n");
    let answer = crate::vision::answer_text(sample);
    let text = prompts::CAPTION_JUDGE.fill(&[("C", &joined), ("Q", &sample.question), ("A", &answer)]);
    endpoint.request(vec![Part::text(text)])
}

/// Sends each matched pair to the caption judge. The rate denominator is
/// the whole evaluation set.
pub fn image_text_contamination(
    mut report: ContaminationReport,
    captions: &HashMap<String, Vec<String>>,
    samples: &HashMap<String, VqaSample>,
    judge: &ChatEndpoint,
) -> Result<ContaminationReport, ContaminationError> {
    let judged: Result<Vec<JudgedPair>, ContaminationError> = report
        .matches
        .par_iter()
        .map(|m| judge_pair(m, captions, samples, judge))
        .collect();
    let mut judged = judged?;
    judged.sort_by(|a, b| a.eval_id.cmp(&b.eval_id));
    let hits = judged.iter().filter(|j| j.contaminated).count();
    report.image_text_rate = hits as f64 / report.eval_count.max(1) as f64;
    report.judged = judged;
    Ok(report)
}

fn judge_pair(
    m: &Match,
    captions: &HashMap<String, Vec<String>>,
    samples: &HashMap<String, VqaSample>,
    judge: &ChatEndpoint,
) -> Result<JudgedPair, ContaminationError> {
    let sample = samples
        .get(&m.eval_id)
        .ok_or_else(|| ContaminationError::MissingSample(m.eval_id.clone()))?;
    let mut caps: Vec<&str> = Vec::new();
    for id in std::iter::once(&m.train_id).chain(m.neighbours.iter().map(|(id, _)| id)) {
        let c = captions
            .get(id)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| ContaminationError::MissingCaption(id.clone()))?;
        caps.extend(c.iter().map(String::as_str));
    }
    let base = caption_prompt(judge, &caps, sample);
    let mut raw = String::new();
    for retry in 0..2u64 {
        let mut req = base.clone();
        if retry > 0 {
            req.seed = Some(retry);
        }
        let resp = judge.chat(&req).map_err(|source| ContaminationError::Service {
            eval_id: m.eval_id.clone(),
            train_id: m.train_id.clone(),
            source,
        })?;
        if let Some(t) = first_yes_no(&resp.text) {
            return Ok(JudgedPair {
                eval_id: m.eval_id.clone(),
                train_id: m.train_id.clone(),
                verdict: resp.text,
                contaminated: t == YesNo::Yes,
            });
        }
        raw = resp.text;
    }
    Err(ContaminationError::UnparseableVerdict {
        eval_id: m.eval_id.clone(),
        train_id: m.train_id.clone(),
        raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub benchmark: String,
    pub corpus: String,
    pub metric: String,
    pub static_rate: f64,
    pub dynamic_rate: f64,
    pub reduction: f64,
}

/// Static minus dynamic rate for both metrics; negative reductions are kept.
pub fn contamination_delta(
    static_report: &ContaminationReport,
    dynamic_report: &ContaminationReport,
) -> Result<Vec<ReductionRow>, ContaminationError> {
    if static_report.corpus != dynamic_report.corpus {
        return Err(ContaminationError::CorpusMismatch(format!(
            "{} vs {}",
            static_report.corpus, dynamic_report.corpus
        )));
    }
    if static_report.threshold != dynamic_report.threshold {
        return Err(ContaminationError::CorpusMismatch(format!(
            "threshold {} vs {}",
            static_report.threshold, dynamic_report.threshold
        )));
    }
    let row = |metric: &str, s: f64, d: f64| ReductionRow {
        benchmark: static_report.benchmark.clone(),
        corpus: static_report.corpus.clone(),
        metric: metric.to_string(),
        static_rate: s,
        dynamic_rate: d,
        reduction: s - d,
    };
    Ok(vec![
        row("image_only", static_report.image_only_rate, dynamic_report.image_only_rate),
        row("image_text", static_report.image_text_rate, dynamic_report.image_text_rate),
    ])
}

/// Percent with two decimals, e.g. `84.46`.
pub fn format_percent(rate: f64) -> String {
    format!("{:.2}", rate * 100.0)
}

/// Rate with four decimals, e.g. `0.2510`.
pub fn format_rate(rate: f64) -> String {
    format!("{:.4}", rate)
}

/// Train captions from JSONL lines `{"id": ..., "caption": ...}` or
/// `{"id": ..., "captions": [...]}`.
pub fn parse_captions(text: &str) -> Result<HashMap<String, Vec<String>>, String> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        #[serde(default)]
        caption: Option<String>,
        #[serde(default)]
        captions: Vec<String>,
    }
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1))?;
        let e = out.entry(line.id).or_default();
        e.extend(line.caption);
        e.extend(line.captions);
    }
    Ok(out.into_iter().collect())
}

/// Report as CSV rows of matches with their verdicts.
pub fn write_report_csv<W: std::io::Write>(r: &ContaminationReport, w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["benchmark", "corpus", "eval_id", "train_id", "score", "verdict", "contaminated"])?;
    let verdicts: HashMap<(&str, &str), &JudgedPair> = r
        .judged
        .iter()
        .map(|j| ((j.eval_id.as_str(), j.train_id.as_str()), j))
        .collect();
    for m in &r.matches {
        let j = verdicts.get(&(m.eval_id.as_str(), m.train_id.as_str()));
        wr.write_record([
            r.benchmark.as_str(),
            r.corpus.as_str(),
            &m.eval_id,
            &m.train_id,
            &format!("{:.6}", m.score),
            j.map_or("", |j| j.verdict.trim()),
            &j.map_or(String::new(), |j| j.contaminated.to_string()),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::IndexMode;

    fn basis(dim: usize, i: usize, id: &str) -> EmbeddingVector<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        EmbeddingVector::new(id, v).unwrap()
    }

    fn planted() -> (Vec<EmbeddingVector<f64>>, EmbeddingIndex<f64>) {
        let dim = 128;
        let train: Vec<_> = (0..50).map(|i| basis(dim, i, &format!("t{i}"))).collect();
        let mut eval: Vec<_> = (0..50).map(|i| basis(dim, i, &format!("e{i}"))).collect();
        eval.extend((50..100).map(|i| basis(dim, i, &format!("e{i}"))));
        (eval, EmbeddingIndex::build(train, IndexMode::Exhaustive).unwrap())
    }

    #[test]
    fn half_planted_is_half_contaminated() {
        let (eval, idx) = planted();
        let r = image_contamination("b", "c", &eval, &idx, &ContaminationParams::default()).unwrap();
        assert_eq!(r.image_only_rate, 0.5);
        assert_eq!(r.matches.len(), 50);
        assert!(r.check_invariants().is_empty());
    }

    #[test]
    fn threshold_bounds() {
        let (eval, idx) = planted();
        let mut p = ContaminationParams {
            threshold: 1.0 + 1e-9,
            ..Default::default()
        };
        assert!(matches!(
            image_contamination("b", "c", &eval, &idx, &p),
            Err(ContaminationError::InvalidThreshold(_))
        ));
        p.threshold = 1.0;
        let orth: Vec<_> = (60..70).map(|i| basis(128, i, &format!("o{i}"))).collect();
        let r = image_contamination("b", "c", &orth, &idx, &p).unwrap();
        assert_eq!(r.image_only_rate, 0.0);
    }

    #[test]
    fn reduction_keeps_sign() {
        let (eval, idx) = planted();
        let a = image_contamination("b", "c", &eval, &idx, &ContaminationParams::default()).unwrap();
        let mut b = a.clone();
        b.image_only_rate = 0.7;
        let rows = contamination_delta(&a, &b).unwrap();
        assert!((rows[0].reduction + 0.2).abs() < 1e-12);
        assert_eq!(contamination_delta(&a, &a).unwrap()[1].reduction, 0.0);
        b.corpus = "other".into();
        assert!(matches!(contamination_delta(&a, &b), Err(ContaminationError::CorpusMismatch(_))));
    }

    #[test]
    fn captions_parse_both_shapes() {
        let c = parse_captions("{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"a\",\"captions\":[\"y\"]}\n").unwrap();
        assert_eq!(c["a"], vec!["x".to_string(), "y".to_string()]);
    }
}
