//! Multi-strategy stacks: the paired grid, stack parsing and staged application.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::generate::{generate, GenContext};
use crate::judge::{bootstrap_with_judge, AuditRow, Judge, JudgeConfig, JudgeError, JudgeOutcome};
use crate::model::{Difficulty, StageRecord, StrategyId, StrategyKind, StrategyParseError, VariantRecord, VqaSample};

/// Image operations run first, then language operations, each list in order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StrategyStack {
    pub image_ops: Vec<StrategyId>,
    pub lang_ops: Vec<StrategyId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StackError {
    #[error(transparent)]
    Strategy(#[from] StrategyParseError),
    #[error("duplicate strategy {0}")]
    Duplicate(StrategyKind),
    #[error("image strategy {0} after a language strategy")]
    Order(StrategyKind),
    #[error("invalid strategy parameters for {0}")]
    Invalid(String),
}

impl StrategyStack {
    pub fn new(image_ops: Vec<StrategyId>, lang_ops: Vec<StrategyId>) -> Result<Self, StackError> {
        let s = Self { image_ops, lang_ops };
        s.validate()?;
        Ok(s)
    }

    pub fn pair(v: StrategyId, l: StrategyId) -> Self {
        Self {
            image_ops: vec![v],
            lang_ops: vec![l],
        }
    }

    pub fn single(s: StrategyId) -> Self {
        if s.kind.is_image() {
            Self {
                image_ops: vec![s],
                lang_ops: vec![],
            }
        } else {
            Self {
                image_ops: vec![],
                lang_ops: vec![s],
            }
        }
    }

    pub fn validate(&self) -> Result<(), StackError> {
        for (ops, image) in [(&self.image_ops, true), (&self.lang_ops, false)] {
            let mut seen = Vec::new();
            for s in ops {
                if s.kind.is_image() != image {
                    return Err(StackError::Order(s.kind));
                }
                if !s.is_valid() {
                    return Err(StackError::Invalid(s.to_string()));
                }
                if seen.contains(&s.kind) {
                    return Err(StackError::Duplicate(s.kind));
                }
                seen.push(s.kind);
            }
        }
        Ok(())
    }

    /// Generation order.
    pub fn ops(&self) -> impl Iterator<Item = &StrategyId> {
        self.image_ops.iter().chain(&self.lang_ops)
    }

    pub fn is_empty(&self) -> bool {
        self.image_ops.is_empty() && self.lang_ops.is_empty()
    }

    pub fn len(&self) -> usize {
        self.image_ops.len() + self.lang_ops.len()
    }
}

impl fmt::Display for StrategyStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("vanilla");
        }
        let parts: Vec<String> = self.ops().map(ToString::to_string).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for StrategyStack {
    type Err = StackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("vanilla") {
            return Ok(Self::default());
        }
        let mut stack = Self::default();
        for part in s.split('+') {
            let id: StrategyId = part.trim().parse()?;
            if id.kind.is_image() {
                if !stack.lang_ops.is_empty() {
                    return Err(StackError::Order(id.kind));
                }
                stack.image_ops.push(id);
            } else {
                stack.lang_ops.push(id);
            }
        }
        stack.validate()?;
        Ok(stack)
    }
}

/// The 3×4 product of image and language strategies.
pub fn paired_grid() -> Vec<StrategyStack> {
    StrategyKind::IMAGE
        .iter()
        .flat_map(|&v| {
            StrategyKind::LANGUAGE
                .iter()
                .map(move |&l| StrategyStack::pair(StrategyId::new(v), StrategyId::new(l)))
        })
        .collect()
}

/// `(hard, easy)` member counts.
pub fn difficulty_label(stack: &StrategyStack) -> (usize, usize) {
    stack.ops().fold((0, 0), |(h, e), s| match s.difficulty() {
        Difficulty::Hard => (h + 1, e),
        Difficulty::Easy => (h, e + 1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Each stage is judged against its own input.
    #[default]
    PerStage,
    /// The whole chain is generated, then every stage's template judges the
    /// composite against the original; any rejection regenerates the chain.
    Final,
}

impl FromStr for JudgeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_stage" => Ok(JudgeMode::PerStage),
            "final" => Ok(JudgeMode::Final),
            other => Err(format!("unknown judge mode `{other}`")),
        }
    }
}

/// Seed of stage `k` running strategy `s`.
pub fn stage_seed(seed: u64, k: usize, s: &StrategyId) -> u64 {
    crate::model::derive_seed(seed, &["stage", &k.to_string(), &s.to_string()])
}

/// Applies every stage of `stack` to `sample`.
pub fn apply_stack(
    sample: &VqaSample,
    stack: &StrategyStack,
    ctx: &GenContext<'_>,
    judge: &dyn Judge,
    cfg: &JudgeConfig,
    mode: JudgeMode,
    seed: u64,
) -> Result<JudgeOutcome, JudgeError> {
    let runner = |strategy: &StrategyId, input: &VqaSample, s: u64| generate(strategy, input, s, ctx);
    apply_stack_with(sample, stack, &runner, judge, cfg, mode, seed)
}

/// [`apply_stack`] over an arbitrary generator.
pub fn apply_stack_with(
    sample: &VqaSample,
    stack: &StrategyStack,
    gen: &dyn Fn(&StrategyId, &VqaSample, u64) -> Result<VariantRecord, crate::generate::GenError>,
    judge: &dyn Judge,
    cfg: &JudgeConfig,
    mode: JudgeMode,
    seed: u64,
) -> Result<JudgeOutcome, JudgeError> {
    if stack.is_empty() {
        return Ok(JudgeOutcome {
            record: VariantRecord::fallback(sample, vec![], seed, 0),
            audit: vec![],
        });
    }
    match mode {
        JudgeMode::PerStage => per_stage(sample, stack, gen, judge, cfg, seed),
        JudgeMode::Final => final_judged(sample, stack, gen, judge, cfg, seed),
    }
}

fn per_stage(
    sample: &VqaSample,
    stack: &StrategyStack,
    gen: &dyn Fn(&StrategyId, &VqaSample, u64) -> Result<VariantRecord, crate::generate::GenError>,
    judge: &dyn Judge,
    cfg: &JudgeConfig,
    seed: u64,
) -> Result<JudgeOutcome, JudgeError> {
    let mut cur = sample.clone();
    let mut stages = Vec::new();
    let mut audit: Vec<AuditRow> = Vec::new();
    let mut artifacts = std::collections::BTreeMap::new();
    for (k, s) in stack.ops().enumerate() {
        let input = cur.clone();
        let mut g = |seed: u64| gen(s, &input, seed);
        let out = bootstrap_with_judge(&input, s, &mut g, judge, cfg, stage_seed(seed, k, s))?;
        audit.extend(out.audit);
        let r = out.record;
        for (key, v) in &r.artifacts {
            artifacts.insert(format!("{k}.{s}.{key}"), v.clone());
        }
        stages.push(StageRecord {
            strategy: s.clone(),
            judge_attempts: r.judge_attempts,
            fell_back: r.fell_back,
            input_hash: input.content_hash(),
            output_hash: r.sample.content_hash(),
        });
        cur = r.sample;
    }
    let all_fell_back = stages.iter().all(|s| s.fell_back);
    let record = VariantRecord {
        origin_id: sample.id.clone(),
        sample: if all_fell_back { sample.clone() } else { cur },
        applied: stack.ops().cloned().collect(),
        seed,
        judge_attempts: stages.iter().map(|s| s.judge_attempts).max().unwrap_or(0),
        fell_back: all_fell_back,
        artifacts,
        stages,
    };
    Ok(JudgeOutcome { record, audit })
}

fn final_judged(
    sample: &VqaSample,
    stack: &StrategyStack,
    gen: &dyn Fn(&StrategyId, &VqaSample, u64) -> Result<VariantRecord, crate::generate::GenError>,
    judge: &dyn Judge,
    cfg: &JudgeConfig,
    seed: u64,
) -> Result<JudgeOutcome, JudgeError> {
    let applied: Vec<StrategyId> = stack.ops().cloned().collect();
    let mut audit = Vec::new();
    let max = cfg.max_attempts.max(1);
    for attempt in 0..max {
        let s = crate::judge::attempt_seed(seed, attempt);
        let mut cur = sample.clone();
        let mut stages = Vec::new();
        let mut artifacts = std::collections::BTreeMap::new();
        let mut failed = None;
        for (k, st) in applied.iter().enumerate() {
            match gen(st, &cur, stage_seed(s, k, st)) {
                Ok(r) => {
                    for (key, v) in &r.artifacts {
                        artifacts.insert(format!("{k}.{st}.{key}"), v.clone());
                    }
                    stages.push(StageRecord {
                        strategy: st.clone(),
                        judge_attempts: attempt + 1,
                        fell_back: false,
                        input_hash: cur.content_hash(),
                        output_hash: r.sample.content_hash(),
                    });
                    cur = r.sample;
                }
                Err(e) => {
                    failed = Some(format!("generation failed at {st}: {e}"));
                    break;
                }
            }
        }
        let row = |v: &VqaSample, verdict: String, pass: bool| AuditRow {
            origin_id: sample.id.clone(),
            strategy: stack.to_string(),
            attempt: attempt + 1,
            seed: s,
            original_question: sample.question.clone(),
            variant_question: v.question.clone(),
            original_image: sample.image.sha256.clone(),
            variant_image: v.image.sha256.clone(),
            verdict,
            pass,
        };
        if let Some(msg) = failed {
            audit.push(row(sample, msg, false));
            continue;
        }
        let composite = VariantRecord {
            origin_id: sample.id.clone(),
            sample: cur.clone(),
            applied: applied.clone(),
            seed,
            judge_attempts: attempt + 1,
            fell_back: false,
            artifacts: artifacts.clone(),
            stages: stages.clone(),
        };
        let mut pass = true;
        let mut raws = Vec::new();
        for st in &applied {
            let mut probe = composite.clone();
            if st.kind.is_image() && cur.image.sha256 != sample.image.sha256 {
                probe.artifacts.insert("edited".into(), cur.image.sha256.clone());
            }
            let v = judge.judge(st, sample, &probe)?;
            raws.push(format!("{st}:{}", v.raw.trim()));
            if !v.pass {
                pass = false;
                break;
            }
        }
        audit.push(row(&cur, raws.join(" | "), pass));
        if pass {
            return Ok(JudgeOutcome {
                record: composite,
                audit,
            });
        }
    }
    Ok(JudgeOutcome {
        record: VariantRecord::fallback(sample, applied, seed, max),
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = paired_grid();
        assert_eq!(g.len(), 12);
        let labels: Vec<String> = g.iter().map(ToString::to_string).collect();
        assert!(labels.contains(&"V1+L4".to_string()));
        assert!(labels.contains(&"V2+L3".to_string()));
        let mut dedup = labels.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 12);
        assert_eq!(labels, paired_grid().iter().map(ToString::to_string).collect::<Vec<_>>());
    }

    #[test]
    fn labels() {
        let s: StrategyStack = "V1+V3+L4".parse().unwrap();
        assert_eq!(difficulty_label(&s), (3, 0));
        assert_eq!(difficulty_label(&"V2+L3".parse().unwrap()), (0, 2));
        assert_eq!(difficulty_label(&StrategyStack::default()), (0, 0));
    }

    #[test]
    fn parse_round_trip_and_errors() {
        for s in ["V1+V3+L4", "V3@1.75+L2", "L1", "vanilla"] {
            let st: StrategyStack = s.parse().unwrap();
            assert_eq!(st.to_string(), s);
        }
        assert!(matches!("L1+V1".parse::<StrategyStack>(), Err(StackError::Order(_))));
        assert!(matches!("V1+V1".parse::<StrategyStack>(), Err(StackError::Duplicate(_))));
        assert!("V9".parse::<StrategyStack>().is_err());
    }
}
