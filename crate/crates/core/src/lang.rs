//! Language bootstrapping: synonyms (L1), rephrasing (L2), relevant context
//! (L3) and irrelevant context (L4). Only the question stem is rewritten;
//! options and answer pass through untouched.

use serde::{Deserialize, Serialize};

use crate::generate::{candidate, Evidence, GenContext, GenError};
use crate::model::{StrategyId, StrategyKind, VariantRecord, VqaSample};
use crate::prompts::{self, Template};
use crate::store::encode_png_rgb;

/// Role-play personas for L2, indexed by `seed % 5`.
pub const PERSONAS: [&str; 5] = ["a casual user", "a researcher", "a teacher", "a writer", "a child"];

pub const MAX_CONTEXT_WORDS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEdit {
    pub strategy: StrategyId,
    pub original: String,
    pub transformed: String,
    pub prompt_hash: String,
}

pub fn persona(seed: u64) -> &'static str {
    PERSONAS[(seed % PERSONAS.len() as u64) as usize]
}

/// Whitespace word count.
pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

const LABELS: [&str; 4] = ["Rewritten question:", "Rephrased question:", "Question:", "Context:"];

/// Trims fences, quotes and echoed labels from a model reply.
pub fn clean_response(text: &str) -> String {
    let mut t = text.trim().trim_start_matches("```").trim_end_matches("```").trim();
    for l in LABELS {
        if let Some(rest) = t.strip_prefix(l) {
            t = rest.trim();
        }
    }
    let quoted = t.len() >= 2
        && ((t.starts_with('"') && t.ends_with('"')) || (t.starts_with('\'') && t.ends_with('\'')));
    if quoted {
        t = t[1..t.len() - 1].trim();
    }
    t.to_string()
}

/// Whole-word, case-insensitive containment.
pub fn contains_word(haystack: &str, needle: &str) -> bool {
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return false;
    }
    let hay = haystack.to_lowercase();
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        if boundary(hay[..start].chars().next_back()) && boundary(hay[end..].chars().next()) {
            return true;
        }
        from = start + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Answer strings that added context must not mention: canonical, aliases
/// and, for multiple choice, the correct option text. Single letters are
/// skipped since they match ordinary words.
pub fn leak_terms(sample: &VqaSample) -> Vec<String> {
    let mut terms: Vec<String> = sample.answer.all().map(str::to_string).collect();
    if let Some(t) = sample.option_text(&sample.answer.canonical) {
        terms.push(t.to_string());
    }
    terms.retain(|t| t.trim().chars().count() > 1);
    terms
}

pub fn check_leak(text: &str, sample: &VqaSample) -> Result<(), GenError> {
    match leak_terms(sample).into_iter().find(|t| contains_word(text, t)) {
        Some(t) => Err(GenError::AnswerLeak(t)),
        None => Ok(()),
    }
}

/// Prefixes the context to the question unless the reply already ends with it.
/// Returns the transformed question and the added context alone.
pub fn attach_context(reply: &str, question: &str) -> (String, String) {
    let reply = reply.trim();
    let q = question.trim();
    let context = match reply.strip_suffix(q) {
        Some(head) => head.trim_end(),
        None => reply,
    };
    let context = context.split_whitespace().collect::<Vec<_>>().join(" ");
    (format!("{context} {question}"), context)
}

fn require_question(sample: &VqaSample) -> Result<(), GenError> {
    if sample.question.trim().is_empty() {
        return Err(GenError::MissingField("question"));
    }
    Ok(())
}

fn first_line(text: &str) -> String {
    clean_response(text)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(clean_response)
        .unwrap_or_default()
}

fn rewrite(
    sample: &VqaSample,
    seed: u64,
    ctx: &GenContext<'_>,
    strategy: StrategyId,
    template: &Template,
    vars: &[(&str, &str)],
) -> Result<(QuestionEdit, Evidence), GenError> {
    require_question(sample)?;
    let mut ev = Evidence::new(sample, &strategy, seed);
    let reply = ctx.chat(template, template.parts(vars, &[]), seed, &mut ev)?;
    let transformed = first_line(&reply);
    if transformed.is_empty() {
        return Err(GenError::UnparseableResponse(reply));
    }
    if transformed.trim() == sample.question.trim() {
        return Err(GenError::NoChange);
    }
    Ok((
        QuestionEdit {
            strategy,
            original: sample.question.clone(),
            transformed,
            prompt_hash: ev.artifacts.get("prompt").cloned().unwrap_or_default(),
        },
        ev,
    ))
}

fn contextualize(
    sample: &VqaSample,
    seed: u64,
    ctx: &GenContext<'_>,
    strategy: StrategyId,
    template: &Template,
) -> Result<(QuestionEdit, Evidence), GenError> {
    require_question(sample)?;
    let img = ctx.store.load_image(&sample.image)?;
    let png = encode_png_rgb(&img);
    let mut ev = Evidence::new(sample, &strategy, seed);
    let reply = ctx.chat(
        template,
        template.parts(&[("Q", &sample.question)], &[("I", &png)]),
        seed,
        &mut ev,
    )?;
    let cleaned = clean_response(&reply);
    if cleaned.is_empty() {
        return Err(GenError::UnparseableResponse(reply));
    }
    let (transformed, context) = attach_context(&cleaned, &sample.question);
    if context.is_empty() {
        return Err(GenError::NoChange);
    }
    check_leak(&context, sample)?;
    if strategy.kind == StrategyKind::L4 {
        let n = word_count(&context);
        if n > MAX_CONTEXT_WORDS {
            return Err(GenError::ContextTooLong(n));
        }
    }
    Ok((
        QuestionEdit {
            strategy,
            original: sample.question.clone(),
            transformed,
            prompt_hash: ev.artifacts.get("prompt").cloned().unwrap_or_default(),
        },
        ev,
    ))
}

pub fn edit_l1(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<(QuestionEdit, Evidence), GenError> {
    rewrite(
        sample,
        seed,
        ctx,
        StrategyId::new(StrategyKind::L1),
        &prompts::L1_SYNONYM,
        &[("Q", &sample.question)],
    )
}

pub fn edit_l2(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<(QuestionEdit, Evidence), GenError> {
    rewrite(
        sample,
        seed,
        ctx,
        StrategyId::new(StrategyKind::L2),
        &prompts::L2_REPHRASE,
        &[("Q", &sample.question), ("P", persona(seed))],
    )
}

pub fn edit_l3(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<(QuestionEdit, Evidence), GenError> {
    contextualize(sample, seed, ctx, StrategyId::new(StrategyKind::L3), &prompts::L3_CONTEXT)
}

pub fn edit_l4(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<(QuestionEdit, Evidence), GenError> {
    contextualize(sample, seed, ctx, StrategyId::new(StrategyKind::L4), &prompts::L4_IRRELEVANT)
}

fn into_record(sample: &VqaSample, seed: u64, (edit, ev): (QuestionEdit, Evidence)) -> VariantRecord {
    let out = VqaSample {
        question: edit.transformed.clone(),
        ..sample.clone()
    };
    candidate(sample, out, &edit.strategy, seed, ev)
}

pub fn apply_l1(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<VariantRecord, GenError> {
    edit_l1(sample, seed, ctx).map(|e| into_record(sample, seed, e))
}

pub fn apply_l2(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<VariantRecord, GenError> {
    edit_l2(sample, seed, ctx).map(|e| into_record(sample, seed, e))
}

pub fn apply_l3(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<VariantRecord, GenError> {
    edit_l3(sample, seed, ctx).map(|e| into_record(sample, seed, e))
}

pub fn apply_l4(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<VariantRecord, GenError> {
    edit_l4(sample, seed, ctx).map(|e| into_record(sample, seed, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_word_matching() {
        assert!(contains_word("There is a red car.", "red"));
        assert!(!contains_word("He was bored.", "red"));
        assert!(contains_word("Yes! indeed", "yes"));
        assert!(contains_word("the Large Window", "large window"));
        assert!(!contains_word("anything", ""));
    }

    #[test]
    fn context_attaches_before_question() {
        let (t, c) = attach_context("A sunny room with a big window.", "What is on the table?");
        assert_eq!(t, "A sunny room with a big window. What is on the table?");
        assert_eq!(c, "A sunny room with a big window.");
        let (t, c) = attach_context("Sunny room. What is on the table?", "What is on the table?");
        assert_eq!(t, "Sunny room. What is on the table?");
        assert_eq!(c, "Sunny room.");
    }

    #[test]
    fn labels_and_quotes_stripped() {
        assert_eq!(clean_response("Rewritten question: \"Is it red?\""), "Is it red?");
        assert_eq!(clean_response("```\nIs it?\n```"), "Is it?");
    }

    #[test]
    fn persona_by_seed() {
        assert_eq!(persona(0), "a casual user");
        assert_eq!(persona(7), "a teacher");
    }

    #[test]
    fn word_count_is_idempotent() {
        let s = "  one two\tthree\nfour ";
        let once = s.split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(word_count(s), 4);
        assert_eq!(word_count(&once), 4);
    }
}
