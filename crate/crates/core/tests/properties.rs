use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use vlb_core::composer::{apply_stack_with, paired_grid, JudgeMode, StrategyStack};
use vlb_core::contamination::{image_contamination, ContaminationParams};
use vlb_core::generate::GenError;
use vlb_core::index::{HnswParams, IndexMode};
use vlb_core::judge::{bootstrap_with_judge, Judge, JudgeConfig, JudgeError, Verdict};
use vlb_core::model::{AnswerSpec, Format, StrategyId, StrategyKind, VariantRecord, VqaSample};
use vlb_core::store::ArtifactStore;
use vlb_core::{EmbeddingIndex, EmbeddingVector};

fn vectors(prefix: &str, raw: &[Vec<f32>]) -> Vec<EmbeddingVector<f32>> {
    raw.iter()
        .enumerate()
        .map(|(i, v)| EmbeddingVector::normalized(format!("{prefix}-{i:03}"), v.clone()).unwrap())
        .collect()
}

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn sample() -> VqaSample {
    let store = ArtifactStore::in_memory();
    VqaSample {
        id: "s".into(),
        image: store.put_image(&image::RgbImage::new(4, 4)).unwrap(),
        question: "Is the lamp on?".into(),
        options: vec![],
        answer: AnswerSpec::new("yes"),
        task_tag: String::new(),
        format: Format::YesNo,
    }
}

fn changed(origin: &VqaSample, s: &StrategyId, seed: u64) -> VariantRecord {
    let mut out = origin.clone();
    out.question = format!("{} ({seed})", origin.question);
    VariantRecord {
        sample: out,
        fell_back: false,
        ..VariantRecord::fallback(origin, vec![s.clone()], seed, 0)
    }
}

/// Passes or rejects according to a script, one entry per call.
struct Script(Vec<bool>, AtomicUsize);

impl Judge for Script {
    fn judge(&self, _: &StrategyId, _: &VqaSample, _: &VariantRecord) -> Result<Verdict, JudgeError> {
        let n = self.1.fetch_add(1, Ordering::SeqCst);
        Ok(Verdict {
            pass: self.0.get(n).copied().unwrap_or(false),
            raw: String::new(),
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn exhaustive_matches_naive_scan(
        train in prop::collection::vec(nonzero(8), 1..60),
        queries in prop::collection::vec(nonzero(8), 1..10),
    ) {
        let train = vectors("t", &train);
        let idx = EmbeddingIndex::build(train.clone(), IndexMode::Exhaustive).unwrap();
        for q in vectors("q", &queries) {
            let hit = idx.max_similarity(&q).unwrap();
            let best = train
                .iter()
                .map(|t| q.values().iter().zip(t.values()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((hit.score as f64 - best).abs() <= 1e-5, "{} vs {best}", hit.score);
        }
    }

    #[test]
    fn approximate_build_is_deterministic_and_batch_agrees(
        train in prop::collection::vec(nonzero(6), 2..80),
        queries in prop::collection::vec(nonzero(6), 1..8),
        seed: u64,
    ) {
        let mode = IndexMode::Approximate(HnswParams { m: 4, ef_construction: 16, ef_search: 8, seed });
        let a = EmbeddingIndex::build(vectors("t", &train), mode.clone()).unwrap();
        let b = EmbeddingIndex::build(vectors("t", &train), mode).unwrap();
        let qs = vectors("q", &queries);
        let batch = a.max_similarity_batch(&qs).unwrap();
        for (q, h) in qs.iter().zip(&batch) {
            prop_assert_eq!(&a.top_k(q, 3).unwrap(), &b.top_k(q, 3).unwrap());
            prop_assert_eq!(&a.max_similarity(q).unwrap(), h);
        }
    }

    #[test]
    fn contamination_rate_is_monotone_and_order_free(
        train in prop::collection::vec(nonzero(4), 1..30),
        eval in prop::collection::vec(nonzero(4), 1..30),
        lo in 0.05f64..0.95,
        step in 0.0f64..0.5,
        rotate in 0usize..30,
    ) {
        let idx = EmbeddingIndex::build(vectors("t", &train), IndexMode::Exhaustive).unwrap();
        let eval = vectors("e", &eval);
        let hi = (lo + step).min(1.0);
        let at = |theta: f64, e: &[EmbeddingVector<f32>]| {
            image_contamination("b", "c", e, &idx, &ContaminationParams { threshold: theta, ..Default::default() }).unwrap()
        };
        let low = at(lo, &eval);
        prop_assert!(at(hi, &eval).image_only_rate <= low.image_only_rate);
        prop_assert!(low.check_invariants().is_empty());
        let mut shuffled = eval.clone();
        shuffled.rotate_left(rotate % eval.len());
        shuffled.reverse();
        prop_assert_eq!(at(lo, &shuffled), low);
    }

    #[test]
    fn judge_loop_bounds(verdicts in prop::collection::vec(any::<bool>(), 5), gen_ok in prop::collection::vec(any::<bool>(), 5), seed: u64) {
        let origin = sample();
        let s = StrategyId::new(StrategyKind::L1);
        let judge = Script(verdicts.clone(), AtomicUsize::new(0));
        let calls = Cell::new(0usize);
        let mut gen = |sd: u64| {
            let n = calls.get();
            calls.set(n + 1);
            if gen_ok[n] { Ok(changed(&origin, &s, sd)) } else { Err(GenError::NoChange) }
        };
        let r = bootstrap_with_judge(&origin, &s, &mut gen, &judge, &JudgeConfig::default(), seed).unwrap().record;
        prop_assert!((1..=5).contains(&r.judge_attempts));
        // Judge calls happen only on successful generations.
        let mut judged = 0;
        let first_pass = (0..5).find(|&i| gen_ok[i] && { judged += 1; verdicts[judged - 1] });
        match first_pass {
            Some(i) => {
                prop_assert!(!r.fell_back);
                prop_assert_eq!(r.judge_attempts as usize, i + 1);
            }
            None => {
                prop_assert!(r.fell_back);
                prop_assert_eq!(r.judge_attempts, 5);
                prop_assert_eq!(serde_json::to_vec(&r.sample).unwrap(), serde_json::to_vec(&origin).unwrap());
            }
        }
    }

    #[test]
    fn stack_of_fallbacks_is_the_original(pick in 0usize..12, seed: u64) {
        let origin = sample();
        let stack: StrategyStack = paired_grid()[pick].clone();
        let never = |_: &StrategyId, _: &VqaSample, _: u64| -> Result<VariantRecord, GenError> { Err(GenError::NoChange) };
        let judge = Script(vec![], AtomicUsize::new(0));
        let out = apply_stack_with(&origin, &stack, &never, &judge, &JudgeConfig::default(), JudgeMode::PerStage, seed).unwrap();
        prop_assert!(out.record.fell_back);
        prop_assert_eq!(serde_json::to_vec(&out.record.sample).unwrap(), serde_json::to_vec(&origin).unwrap());
    }
}

#[test]
fn paired_grid_is_order_stable() {
    let a: Vec<String> = paired_grid().iter().map(ToString::to_string).collect();
    let b: Vec<String> = paired_grid().iter().map(ToString::to_string).collect();
    assert_eq!(a, b);
}
