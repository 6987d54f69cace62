//! Deterministic in-process stand-ins for the four services.
//!
//! Every response is a pure function of the request (and, for chat, an
//! optional fixture directory holding `<request-hash>.txt` overrides). The
//! HTTP mock server reuses these functions.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{
    decode_image_part, ChatRequest, ChatResponse, ChatService, EmbedInput, EmbedService, InpaintRequest,
    InpaintService, InpaintTask, SegmentMask, SegmentResponse, SegmentService, ServiceError, Usage,
};

/// Dimension of mock embeddings.
pub const MOCK_EMBED_DIM: usize = 64;

/// Fraction of judge requests the auto-responder passes, out of 256.
const JUDGE_PASS_OUT_OF_256: u8 = 204;

fn hash_bytes(s: &str) -> [u8; 32] {
    Sha256::digest(s.as_bytes()).into()
}

fn rng_for(hash: &str) -> ChaCha8Rng {
    let h = hash_bytes(hash);
    ChaCha8Rng::from_seed(h)
}

/// Which prompt family a chat request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    AddObjects,
    RemoveObjects,
    Synonym,
    Rephrase,
    Context,
    Irrelevant,
    JudgeImage,
    JudgeSameAnswer,
    JudgeChangesSemantics,
    JudgeSameQuestion,
    Caption,
    Eval,
}

pub fn classify(text: &str) -> PromptKind {
    if text.contains("directly inferred from the caption") {
        PromptKind::Caption
    } else if text.contains("Please give me randomly 10 objects") {
        PromptKind::AddObjects
    } else if text.contains("exactly 5 objects can be removed") {
        PromptKind::RemoveObjects
    } else if text.contains("Please assess whether the modifications in the images") {
        PromptKind::JudgeImage
    } else if text.contains("only have some minor differences") {
        PromptKind::JudgeSameAnswer
    } else if text.contains("changes the semantics of the original question") {
        PromptKind::JudgeChangesSemantics
    } else if text.contains("are they both asking") {
        PromptKind::JudgeSameQuestion
    } else if text.contains("Rewritten question:") {
        PromptKind::Synonym
    } else if text.contains("Rephrased question:") {
        PromptKind::Rephrase
    } else if text.contains("Please add context to the question") {
        PromptKind::Context
    } else if text.contains("provide a paragraph that is irrelevant") {
        PromptKind::Irrelevant
    } else {
        PromptKind::Eval
    }
}

/// Text of the last `Question: ` line.
fn last_question(text: &str) -> String {
    text.rsplit_once("Question: ")
        .map(|(_, q)| q.lines().next().unwrap_or("").trim().to_string())
        .unwrap_or_default()
}

const OBJECTS: [&str; 12] = [
    "potted plant",
    "ceramic vase",
    "table lamp",
    "stack of books",
    "wall clock",
    "teapot",
    "umbrella",
    "bicycle",
    "kite",
    "backpack",
    "teddy bear",
    "guitar",
];

const SYNONYMS: [(&str, &str); 16] = [
    ("kitchen", "cookroom"),
    ("picture", "image"),
    ("image", "picture"),
    ("photo", "photograph"),
    ("type", "kind"),
    ("color", "colour"),
    ("shown", "depicted"),
    ("depicted", "shown"),
    ("man", "gentleman"),
    ("woman", "lady"),
    ("person", "individual"),
    ("large", "big"),
    ("small", "little"),
    ("many", "numerous"),
    ("object", "item"),
    ("located", "situated"),
];

const LEAD_INS: [&str; 5] = [
    "Hey, quick one: ",
    "For the record, ",
    "Class, look closely: ",
    "Picture this: ",
    "Um, ",
];

const DESCRIPTIONS: [&str; 6] = [
    "The scene is lit evenly and several shapes sit against a plain backdrop.",
    "A few distinct regions fill the frame, each with a flat, uniform surface.",
    "The composition places its main elements away from the edges of the frame.",
    "There is a quiet, orderly arrangement of shapes across the whole picture.",
    "The background stays consistent throughout and nothing is blurred.",
    "Several blocks of colour are laid out with clear boundaries between them.",
];

const DIGRESSIONS: [&str; 5] = [
    "Consider the history of paint pigments, how ochre and charcoal gave way to synthetic dyes that now let a single wall glow in impossible tones.",
    "Somewhere a clockmaker is adjusting a tiny spring, thinking about the long afternoons when clocks were wound by hand and time felt slower.",
    "Imagine a lighthouse keeper who collects postcards of deserts, dreaming of dunes while the fog rolls in every evening.",
    "The evolution of the catcher's mitt is a curious tale of leather, padding and stubborn players who once caught fastballs bare-handed.",
    "A kite festival in spring fills the sky with dragons and fish, and children argue over whose string is the longest.",
];

fn rewrite_synonym(q: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = q.split(' ').collect();
    let hits: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| {
            let core = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            SYNONYMS.iter().any(|(a, _)| *a == core)
        })
        .map(|(i, _)| i)
        .collect();
    if hits.is_empty() {
        return format!("In the given picture, {}", lower_first(q));
    }
    let i = hits[rng.random_range(0..hits.len())];
    let w = words[i];
    let core = w.trim_matches(|c: char| !c.is_alphanumeric());
    let (_, syn) = SYNONYMS
        .iter()
        .find(|(a, _)| *a == core.to_lowercase())
        .expect("hit");
    let mut out = words.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    out[i] = w.replacen(core, syn, 1);
    out.join(" ")
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn add_objects(text: &str, rng: &mut ChaCha8Rng) -> String {
    let re = Regex::new(r"resolution:(\d+)×(\d+)").expect("regex");
    let (h, w) = re
        .captures(text)
        .map(|c| (c[1].parse::<u32>().unwrap_or(100), c[2].parse::<u32>().unwrap_or(100)))
        .unwrap_or((100, 100));
    let mut items = Vec::new();
    for i in 0..10 {
        let bw = rng.random_range((w / 6).max(1)..=(w / 3).max(1));
        let bh = rng.random_range((h / 6).max(1)..=(h / 3).max(1));
        let x = rng.random_range(0..=w.saturating_sub(bw));
        let y = rng.random_range(0..=h.saturating_sub(bh));
        let name = OBJECTS[(i + rng.random_range(0..OBJECTS.len())) % OBJECTS.len()];
        items.push(format!(
            "{{\"name\": \"{name}\", \"box\": [{x}, {y}, {}, {}]}}",
            x + bw,
            y + bh
        ));
    }
    format!("[{}]", items.join(", "))
}

fn remove_objects(req: &ChatRequest) -> String {
    let n = req
        .images()
        .first()
        .and_then(|b| decode_image_part(b).ok())
        .map(|img| connected_components(&img, MockSegment::default().min_area).len())
        .unwrap_or(0);
    let items: Vec<String> = (1..=n.min(5))
        .map(|s| format!("{{\"object_mark\": {s}, \"object_name\": \"object {s}\"}}"))
        .collect();
    format!("[{}]", items.join(", "))
}

fn judge(hash: &[u8; 32], pass: &'static str, fail: &'static str) -> String {
    if hash[0] < JUDGE_PASS_OUT_OF_256 {
        pass.to_string()
    } else {
        fail.to_string()
    }
}

fn caption_verdict(text: &str) -> String {
    let answer = text
        .lines()
        .find_map(|l| l.strip_prefix("Answer: "))
        .unwrap_or("")
        .trim()
        .to_lowercase();
    let answer = match answer.split_once(". ") {
        Some((letter, body)) if letter.len() == 1 => body.to_string(),
        _ => answer,
    };
    let caption = text
        .split_once("training image:\n")
        .and_then(|(_, r)| r.split_once("\nQuestion: "))
        .map(|(c, _)| c.to_lowercase())
        .unwrap_or_default();
    if !answer.is_empty() && caption.contains(&answer) {
        "Yes".into()
    } else {
        "No".into()
    }
}

fn eval_answer(text: &str, rng: &mut ChaCha8Rng) -> String {
    let re = Regex::new(r"(?m)^([A-Z])\. (.*)$").expect("regex");
    let options: Vec<(String, String)> = re
        .captures_iter(text)
        .map(|c| (c[1].to_string(), c[2].to_string()))
        .collect();
    if !options.is_empty() {
        let (letter, body) = &options[rng.random_range(0..options.len())];
        return match rng.random_range(0..4) {
            0 => letter.clone(),
            1 => format!("The answer is ({letter})."),
            2 => format!("{letter}. {body}"),
            _ => format!("I believe the correct option is {letter}."),
        };
    }
    if text.to_lowercase().contains("yes or no") {
        return if rng.random_bool(0.5) { "Yes".into() } else { "No".into() };
    }
    "I am not sure.".into()
}

/// The auto-responder.
pub fn respond(req: &ChatRequest) -> String {
    let hash = req.hash();
    let hb = hash_bytes(&hash);
    let mut rng = rng_for(&hash);
    let text = req.text();
    match classify(&text) {
        PromptKind::AddObjects => add_objects(&text, &mut rng),
        PromptKind::RemoveObjects => remove_objects(req),
        PromptKind::Synonym => rewrite_synonym(&last_question(&text), &mut rng),
        PromptKind::Rephrase => {
            let q = last_question(&text);
            format!("{}{}", LEAD_INS[rng.random_range(0..LEAD_INS.len())], lower_first(&q))
        }
        PromptKind::Context => DESCRIPTIONS[rng.random_range(0..DESCRIPTIONS.len())].to_string(),
        PromptKind::Irrelevant => DIGRESSIONS[rng.random_range(0..DIGRESSIONS.len())].to_string(),
        PromptKind::JudgeImage | PromptKind::JudgeChangesSemantics => judge(&hb, "No", "Yes"),
        PromptKind::JudgeSameAnswer | PromptKind::JudgeSameQuestion => judge(&hb, "Yes", "No"),
        PromptKind::Caption => caption_verdict(&text),
        PromptKind::Eval => eval_answer(&text, &mut rng),
    }
}

/// Looks up `<hash>.txt` in the fixture directory.
pub fn fixture_response(dir: &Path, hash: &str) -> Option<String> {
    std::fs::read_to_string(dir.join(format!("{hash}.txt"))).ok()
}

#[derive(Debug, Clone, Default)]
pub struct MockChat {
    pub fixtures: Option<PathBuf>,
}

impl MockChat {
    pub fn with_fixtures(dir: impl Into<PathBuf>) -> Self {
        Self {
            fixtures: Some(dir.into()),
        }
    }
}

pub fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl ChatService for MockChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ServiceError> {
        req.validate()?;
        let hash = req.hash();
        let text = self
            .fixtures
            .as_deref()
            .and_then(|d| fixture_response(d, &hash))
            .unwrap_or_else(|| respond(req));
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: word_count(&req.text()),
                completion_tokens: word_count(&text),
            },
            text,
            attempts: 1,
            request_hash: hash,
        })
    }
}

/// Fills the mask region: magenta for additions, mid gray otherwise.
pub fn mock_inpaint(req: &InpaintRequest) -> RgbImage {
    let fill = match req.task {
        InpaintTask::Add => Rgb([255, 0, 255]),
        InpaintTask::Remove | InpaintTask::Outpaint => Rgb([128, 128, 128]),
    };
    let mut out = req.image.clone();
    for (x, y, p) in req.mask.enumerate_pixels() {
        if p.0[0] != 0 {
            out.put_pixel(x, y, fill);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockInpaint;

impl InpaintService for MockInpaint {
    fn inpaint(&self, req: &InpaintRequest) -> Result<RgbImage, ServiceError> {
        Ok(mock_inpaint(req))
    }
}

/// 4-connected components of pixels that differ from the top-left
/// (background) colour, in raster order of their first pixel.
pub fn connected_components(img: &RgbImage, min_area: u64) -> Vec<GrayImage> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let bg = *img.get_pixel(0, 0);
    let mut label = vec![0u32; (w * h) as usize];
    let mut out = Vec::new();
    let mut next = 1u32;
    for start in 0..(w * h) {
        let (sx, sy) = (start % w, start / w);
        if label[start as usize] != 0 || *img.get_pixel(sx, sy) == bg {
            continue;
        }
        let mut stack = vec![(sx, sy)];
        let mut pixels = Vec::new();
        label[start as usize] = next;
        while let Some((x, y)) = stack.pop() {
            pixels.push((x, y));
            let mut visit = |nx: u32, ny: u32| {
                let i = (ny * w + nx) as usize;
                if label[i] == 0 && *img.get_pixel(nx, ny) != bg {
                    label[i] = next;
                    stack.push((nx, ny));
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        next += 1;
        if (pixels.len() as u64) < min_area {
            continue;
        }
        let mut mask = GrayImage::new(w, h);
        for (x, y) in pixels {
            mask.put_pixel(x, y, Luma([255]));
        }
        out.push(mask);
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct MockSegment {
    pub min_area: u64,
}

impl Default for MockSegment {
    fn default() -> Self {
        Self { min_area: 16 }
    }
}

pub fn mock_segment(img: &RgbImage, min_area: u64) -> SegmentResponse {
    SegmentResponse {
        masks: connected_components(img, min_area)
            .into_iter()
            .enumerate()
            .map(|(i, mask)| SegmentMask {
                serial: i as u32 + 1,
                area: mask.pixels().filter(|p| p.0[0] != 0).count() as u64,
                mask,
            })
            .collect(),
    }
}

impl SegmentService for MockSegment {
    fn segment(&self, image: &RgbImage) -> Result<SegmentResponse, ServiceError> {
        Ok(mock_segment(image, self.min_area))
    }
}

/// Image embeddings are a fixed random projection of an 8×8 colour
/// thumbnail; text embeddings are signed hashed bags of words.
#[derive(Debug, Clone)]
pub struct MockEmbed {
    projection: Vec<f32>,
}

const THUMB: u32 = 8;
const THUMB_FEATURES: usize = (THUMB * THUMB * 3) as usize + 1;

impl Default for MockEmbed {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e4be);
        let projection = (0..THUMB_FEATURES * MOCK_EMBED_DIM)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        Self { projection }
    }
}

fn thumbnail_features(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let mut feats = vec![0f32; THUMB_FEATURES];
    let mut counts = vec![0u32; (THUMB * THUMB) as usize];
    for (x, y, p) in img.enumerate_pixels() {
        let cell = ((y * THUMB / h.max(1)) * THUMB + x * THUMB / w.max(1)) as usize;
        counts[cell] += 1;
        for c in 0..3 {
            feats[cell * 3 + c] += p.0[c] as f32;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for c in 0..3 {
            let v = &mut feats[cell * 3 + c];
            *v = if n == 0 { 0.0 } else { *v / n as f32 / 255.0 - 0.5 };
        }
    }
    feats[THUMB_FEATURES - 1] = 1e-3;
    feats
}

pub fn text_features(text: &str) -> Vec<f32> {
    let mut v = vec![0f32; MOCK_EMBED_DIM];
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = hash_bytes(&tok.to_lowercase());
        let i = h[0] as usize % MOCK_EMBED_DIM;
        v[i] += if h[1] & 1 == 0 { 1.0 } else { -1.0 };
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

impl MockEmbed {
    pub fn image_vector(&self, img: &RgbImage) -> Vec<f32> {
        let f = thumbnail_features(img);
        (0..MOCK_EMBED_DIM)
            .map(|d| {
                let row = &self.projection[d * THUMB_FEATURES..(d + 1) * THUMB_FEATURES];
                row.iter().zip(&f).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

impl EmbedService for MockEmbed {
    fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<Vec<f32>>, ServiceError> {
        Ok(inputs
            .iter()
            .map(|i| match i {
                EmbedInput::Image(img) => self.image_vector(img),
                EmbedInput::Text(t) => text_features(t),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::Part;

    fn three_rects() -> RgbImage {
        let mut img = RgbImage::from_pixel(40, 30, Rgb([250, 250, 250]));
        for (x0, y0, c) in [(2, 2, [200, 0, 0]), (20, 3, [0, 200, 0]), (5, 18, [0, 0, 200])] {
            for y in y0..y0 + 8 {
                for x in x0..x0 + 10 {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
        img
    }

    #[test]
    fn three_rectangles_three_serials() {
        let r = MockSegment::default().segment(&three_rects()).unwrap();
        assert_eq!(r.masks.iter().map(|m| m.serial).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(r.masks.iter().all(|m| m.area == 80));
    }

    #[test]
    fn add_objects_lists_ten_boxes() {
        let req = ChatRequest::new(
            "m",
            vec![Part::text(crate::prompts::V1_ADD.fill(&[
                ("H", "480"),
                ("W", "640"),
                ("Q", "q"),
                ("A", "a"),
            ]))],
        );
        let out = respond(&req);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 10);
        for item in v.as_array().unwrap() {
            let b: Vec<u64> = serde_json::from_value(item["box"].clone()).unwrap();
            assert!(b[2] <= 640 && b[3] <= 480 && b[0] < b[2] && b[1] < b[3]);
        }
    }

    #[test]
    fn responder_is_pure() {
        let req = ChatRequest::new("m", vec![Part::text("What is it?\nA. cat\nB. dog")]);
        assert_eq!(respond(&req), respond(&req));
    }

    #[test]
    fn fixture_overrides_auto_response() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("m", vec![Part::text("hello")]);
        std::fs::write(dir.path().join(format!("{}.txt", req.hash())), "fixed bytes").unwrap();
        let chat = MockChat::with_fixtures(dir.path());
        assert_eq!(chat.chat(&req).unwrap().text, "fixed bytes");
    }

    #[test]
    fn caption_judge_checks_containment() {
        let t = crate::prompts::CAPTION_JUDGE.fill(&[
            ("C", "A red bus parked near a kitchen"),
            ("Q", "What room?"),
            ("A", "kitchen"),
        ]);
        assert_eq!(caption_verdict(&t), "Yes");
        let t = crate::prompts::CAPTION_JUDGE.fill(&[("C", "A red bus parked near a kitchen"), ("Q", "What room?"), ("A", "B. kitchen")]);
        assert_eq!(caption_verdict(&t), "Yes");
        let t = crate::prompts::CAPTION_JUDGE.fill(&[("C", "A red bus"), ("Q", "What room?"), ("A", "kitchen")]);
        assert_eq!(caption_verdict(&t), "No");
    }

    #[test]
    fn synonym_rewrite_changes_question() {
        let mut rng = rng_for("x");
        assert_eq!(
            rewrite_synonym("What type of flooring does the kitchen have?", &mut rng).len() > 0,
            true
        );
        let out = rewrite_synonym("Does the kitchen have tiles?", &mut rng);
        assert_eq!(out, "Does the cookroom have tiles?");
    }
}
