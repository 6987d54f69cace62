//! Consistency judge: per-strategy prompts with fixed verdict polarity, and
//! the regenerate-until-pass loop with fallback to the original sample.

use serde::{Deserialize, Serialize};

use crate::clients::{ChatEndpoint, ServiceError};
use crate::generate::GenError;
use crate::model::{StrategyId, StrategyKind, VariantRecord, VqaSample, MAX_JUDGE_ATTEMPTS};
use crate::prompts::{self, Template};
use crate::store::ArtifactStore;
use crate::vision::answer_text;

/// Which token means the candidate passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    YesPasses,
    NoPasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeInput {
    /// Original and modified images.
    TwoImages,
    /// Both questions, no image.
    Questions,
    /// The image plus both questions.
    ImageAndQuestions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeTemplate {
    pub strategy: StrategyKind,
    pub template: Template,
    pub polarity: Polarity,
    pub input: JudgeInput,
}

/// The fixed strategy → template table. Image prompts ask whether the edit
/// affects the answer, so "No" passes; L1 asks whether the answer applies to
/// both questions and L3/L4 whether both ask the same thing, so "Yes"
/// passes; L2 asks whether the rewrite changes the semantics, so "No" passes.
pub fn judge_template(kind: StrategyKind) -> JudgeTemplate {
    use JudgeInput::*;
    use Polarity::*;
    let (template, polarity, input) = match kind {
        StrategyKind::V1 => (prompts::JUDGE_V1, NoPasses, TwoImages),
        StrategyKind::V2 => (prompts::JUDGE_V2, NoPasses, TwoImages),
        StrategyKind::V3 => (prompts::JUDGE_V3, NoPasses, TwoImages),
        StrategyKind::L1 => (prompts::JUDGE_L1, YesPasses, Questions),
        StrategyKind::L2 => (prompts::JUDGE_L2, NoPasses, ImageAndQuestions),
        StrategyKind::L3 => (prompts::JUDGE_L3, YesPasses, ImageAndQuestions),
        StrategyKind::L4 => (prompts::JUDGE_L4, YesPasses, ImageAndQuestions),
    };
    JudgeTemplate {
        strategy: kind,
        template,
        polarity,
        input,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

/// First standalone, case-insensitive `yes` or `no` token.
pub fn first_yes_no(text: &str) -> Option<YesNo> {
    text.split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| match tok.to_ascii_lowercase().as_str() {
            "yes" => Some(YesNo::Yes),
            "no" => Some(YesNo::No),
            _ => None,
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error("unparseable verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("judge endpoint: {0}")]
    Service(#[from] ServiceError),
    #[error("no judge endpoint configured")]
    NoEndpoint,
}

pub fn parse_verdict(text: &str, polarity: Polarity) -> Result<Verdict, JudgeError> {
    let token = first_yes_no(text).ok_or_else(|| JudgeError::UnparseableVerdict(text.to_string()))?;
    let pass = match polarity {
        Polarity::YesPasses => token == YesNo::Yes,
        Polarity::NoPasses => token == YesNo::No,
    };
    Ok(Verdict {
        pass,
        raw: text.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub max_attempts: u32,
    pub verdict_retry: u32,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            max_attempts: MAX_JUDGE_ATTEMPTS,
            verdict_retry: 1,
        }
    }
}

/// Builds the judge request comparing `candidate` to `reference` (the
/// stage input; the original sample for single-strategy bootstraps).
pub fn build_judge_prompt(
    endpoint: &ChatEndpoint,
    strategy: &StrategyId,
    reference: &VqaSample,
    candidate: &VariantRecord,
    store: &ArtifactStore,
) -> Result<crate::clients::ChatRequest, JudgeError> {
    let jt = judge_template(strategy.kind);
    let answer = answer_text(reference);
    let load = |s: &VqaSample, what: &str| {
        store
            .get(&s.image.sha256)
            .map_err(|e| JudgeError::MissingArtifact(format!("{what} image: {e}")))
    };
    let original = load(reference, "original")?;
    let parts = match jt.input {
        JudgeInput::TwoImages => {
            if !candidate.artifacts.contains_key("edited") {
                return Err(JudgeError::MissingArtifact("edited image".into()));
            }
            let edited = load(&candidate.sample, "edited")?;
            jt.template.parts(
                &[("Q", &reference.question), ("A", &answer)],
                &[("I", &original), ("I2", &edited)],
            )
        }
        JudgeInput::Questions => jt.template.parts(
            &[
                ("Q", &reference.question),
                ("MQ", &candidate.sample.question),
                ("A", &answer),
            ],
            &[],
        ),
        JudgeInput::ImageAndQuestions => jt.template.parts(
            &[
                ("Q", &reference.question),
                ("MQ", &candidate.sample.question),
                ("A", &answer),
            ],
            &[("I", &original)],
        ),
    };
    Ok(endpoint.request(parts))
}

/// Sends the judge prompt. An unparseable verdict is retried
/// `cfg.verdict_retry` times with a perturbed request seed, then fails
/// closed as a rejection.
pub fn judge_candidate(
    endpoint: &ChatEndpoint,
    strategy: &StrategyId,
    reference: &VqaSample,
    candidate: &VariantRecord,
    store: &ArtifactStore,
    cfg: &JudgeConfig,
) -> Result<Verdict, JudgeError> {
    let base = build_judge_prompt(endpoint, strategy, reference, candidate, store)?;
    let polarity = judge_template(strategy.kind).polarity;
    let mut last = String::new();
    for retry in 0..=cfg.verdict_retry {
        let mut req = base.clone();
        if retry > 0 {
            req.seed = Some(retry as u64);
        }
        let resp = endpoint.chat(&req)?;
        match parse_verdict(&resp.text, polarity) {
            Ok(v) => return Ok(v),
            Err(_) => last = resp.text,
        }
    }
    Ok(Verdict { pass: false, raw: last })
}

/// Anything that can rule on a candidate.
pub trait Judge: Sync {
    fn judge(&self, strategy: &StrategyId, reference: &VqaSample, candidate: &VariantRecord)
        -> Result<Verdict, JudgeError>;
}

pub struct ChatJudge<'a> {
    pub endpoint: &'a ChatEndpoint,
    pub store: &'a ArtifactStore,
    pub cfg: JudgeConfig,
}

impl Judge for ChatJudge<'_> {
    fn judge(
        &self,
        strategy: &StrategyId,
        reference: &VqaSample,
        candidate: &VariantRecord,
    ) -> Result<Verdict, JudgeError> {
        judge_candidate(self.endpoint, strategy, reference, candidate, self.store, &self.cfg)
    }
}

/// One judged (or failed) generation attempt, for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub origin_id: String,
    pub strategy: String,
    pub attempt: u32,
    pub seed: u64,
    pub original_question: String,
    pub variant_question: String,
    pub original_image: String,
    pub variant_image: String,
    pub verdict: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    pub record: VariantRecord,
    pub audit: Vec<AuditRow>,
}

/// Seeds for attempt `k` (0-based) are `seed ^ k`.
pub fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    seed ^ attempt as u64
}

/// Generate, judge, regenerate. Returns on the first pass with
/// `judge_attempts` = attempts used; after `max_attempts` failures returns
/// the original sample with `fell_back = true`. Generation failures consume
/// an attempt; only judge endpoint errors abort.
pub fn bootstrap_with_judge(
    sample: &VqaSample,
    strategy: &StrategyId,
    generator: &mut dyn FnMut(u64) -> Result<VariantRecord, GenError>,
    judge: &dyn Judge,
    cfg: &JudgeConfig,
    seed: u64,
) -> Result<JudgeOutcome, JudgeError> {
    let max = cfg.max_attempts.max(1);
    let mut audit = Vec::new();
    let mut log = Vec::new();
    for attempt in 0..max {
        let s = attempt_seed(seed, attempt);
        let row = |variant: &VqaSample, verdict: String, pass: bool| AuditRow {
            origin_id: sample.id.clone(),
            strategy: strategy.to_string(),
            attempt: attempt + 1,
            seed: s,
            original_question: sample.question.clone(),
            variant_question: variant.question.clone(),
            original_image: sample.image.sha256.clone(),
            variant_image: variant.image.sha256.clone(),
            verdict,
            pass,
        };
        match generator(s) {
            Err(e) => {
                log.push(format!("generation failed: {e}"));
                audit.push(row(sample, format!("generation failed: {e}"), false));
            }
            Ok(mut cand) => {
                let v = judge.judge(strategy, sample, &cand)?;
                audit.push(row(&cand.sample, v.raw.clone(), v.pass));
                if v.pass {
                    cand.judge_attempts = attempt + 1;
                    cand.seed = seed;
                    cand.artifacts.insert("attempt_seed".into(), s.to_string());
                    cand.artifacts.insert("verdict".into(), v.raw);
                    for (i, l) in log.into_iter().enumerate() {
                        cand.artifacts.insert(format!("attempt_{}", i + 1), l);
                    }
                    return Ok(JudgeOutcome { record: cand, audit });
                }
                log.push(format!("rejected: {}", v.raw));
            }
        }
    }
    let mut record = VariantRecord::fallback(sample, vec![strategy.clone()], seed, max);
    for (i, l) in log.into_iter().enumerate() {
        record.artifacts.insert(format!("attempt_{}", i + 1), l);
    }
    Ok(JudgeOutcome { record, audit })
}

/// Mean attempts and mean rejections (attempts − 1) per strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptStats {
    pub strategy: String,
    pub records: usize,
    pub mean_attempts: f64,
    pub mean_rejections: f64,
    pub fallbacks: usize,
}

pub fn attempt_stats(records: &[VariantRecord]) -> Vec<AttemptStats> {
    let mut groups: std::collections::BTreeMap<String, Vec<&VariantRecord>> = Default::default();
    for r in records {
        if r.judge_attempts > 0 {
            groups.entry(r.label()).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .map(|(strategy, rs)| {
            let n = rs.len() as f64;
            let attempts: f64 = rs.iter().map(|r| r.judge_attempts as f64).sum();
            AttemptStats {
                strategy,
                records: rs.len(),
                mean_attempts: attempts / n,
                mean_rejections: (attempts - n) / n,
                fallbacks: rs.iter().filter(|r| r.fell_back).count(),
            }
        })
        .collect()
}

/// Writes audit rows as CSV.
pub fn write_audit_csv<W: std::io::Write>(rows: &[AuditRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_token_wins() {
        assert_eq!(first_yes_no("No, yes."), Some(YesNo::No));
        assert_eq!(first_yes_no("YES"), Some(YesNo::Yes));
        assert_eq!(first_yes_no("Nothing here, noted"), None);
        assert_eq!(first_yes_no("\"No\""), Some(YesNo::No));
    }

    #[test]
    fn polarity_examples() {
        let v1 = judge_template(StrategyKind::V1).polarity;
        assert!(parse_verdict("No", v1).unwrap().pass);
        let l3 = judge_template(StrategyKind::L3).polarity;
        assert!(parse_verdict("Yes", l3).unwrap().pass);
        assert!(matches!(
            parse_verdict("It depends.", l3),
            Err(JudgeError::UnparseableVerdict(_))
        ));
    }

    #[test]
    fn templates_match_strategies() {
        assert!(judge_template(StrategyKind::V1).template.text.contains("I added an object to the image"));
        assert!(judge_template(StrategyKind::L1)
            .template
            .text
            .contains("only have some minor differences"));
    }
}
