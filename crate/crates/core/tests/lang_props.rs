use std::sync::Arc;

use proptest::prelude::*;
use vlb_core::clients::mock::{MockChat, MockEmbed, MockInpaint, MockSegment};
use vlb_core::clients::{ChatEndpoint, Services};
use vlb_core::generate::GenContext;
use vlb_core::lang::{apply_l1, apply_l2, apply_l3, apply_l4, attach_context, word_count, MAX_CONTEXT_WORDS};
use vlb_core::model::{AnswerSpec, Format, OptionItem, VqaSample};
use vlb_core::store::ArtifactStore;

fn services() -> Services {
    Services {
        chat: ChatEndpoint::new(Arc::new(MockChat::default()), "gen"),
        judge: None,
        inpaint: Arc::new(MockInpaint),
        segment: Arc::new(MockSegment::default()),
        embed: Arc::new(MockEmbed::default()),
        generation_temperature: 0.7,
    }
}

fn sample(store: &ArtifactStore, noun: &str, answer: usize, mcq: bool) -> VqaSample {
    let img = image::RgbImage::from_fn(24, 16, |x, y| image::Rgb([(x * 9) as u8, (y * 13) as u8, 90]));
    let opts = ["red", "green", "blue", "white"];
    VqaSample {
        id: format!("s-{noun}"),
        image: store.put_image(&img).unwrap(),
        question: format!("What colour is the {noun}?"),
        options: if mcq {
            ["A", "B", "C", "D"].iter().zip(opts).map(|(l, t)| OptionItem::new(*l, t)).collect()
        } else {
            vec![]
        },
        answer: AnswerSpec::new(if mcq { ["A", "B", "C", "D"][answer] } else { opts[answer] }),
        task_tag: "colour".into(),
        format: if mcq { Format::Mcq } else { Format::Open },
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn question_edits_keep_answer_and_options(
        noun in prop::sample::select(vec!["car", "kite", "mug", "door"]),
        answer in 0..4usize,
        mcq: bool,
        seed: u64,
    ) {
        let store = ArtifactStore::in_memory();
        let svc = services();
        let ctx = GenContext::new(&svc, &store);
        let s = sample(&store, noun, answer, mcq);
        for (i, f) in [apply_l1, apply_l2, apply_l3, apply_l4].into_iter().enumerate() {
            if let Ok(r) = f(&s, seed, &ctx) {
                prop_assert_eq!(&r.sample.answer, &s.answer);
                prop_assert_eq!(&r.sample.options, &s.options);
                if i >= 2 {
                    prop_assert!(r.sample.question.ends_with(&s.question));
                }
                if i == 3 {
                    let added = r.sample.question.strip_suffix(&s.question).unwrap();
                    prop_assert!(word_count(added) <= MAX_CONTEXT_WORDS);
                }
            }
        }
    }

    #[test]
    fn attached_context_ends_with_question(reply in "[a-z ]{0,60}", q in "[A-Z][a-z ]{1,30}\\?") {
        let (text, context) = attach_context(&reply, &q);
        prop_assert!(text.ends_with(&q));
        prop_assert!(!context.contains("  "));
    }
}
