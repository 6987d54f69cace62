//! A small self-contained demo benchmark: rectangle scenes with counting
//! and colour questions, a train corpus with planted near-duplicates, and a
//! config wired to mock services.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clients::mock::MockEmbed;
use crate::composer::paired_grid;
use crate::index::{cosine, io::write_vectors, EmbeddingVector};
use crate::store::encode_png_rgb;

pub const DEMO_SAMPLES: usize = 20;
pub const WIDTH: u32 = 64;
pub const HEIGHT: u32 = 48;
pub const DECOYS: usize = 30;
/// Decoys closer than this to any eval image are redrawn.
pub const DECOY_MAX_COSINE: f32 = 0.8;
/// Every even-indexed eval image has a jittered copy in the train corpus.
pub const PLANTED: usize = DEMO_SAMPLES / 2;

pub const TASKS: [&str; 9] = [
    "Instance Counting",
    "Instance Attributes",
    "Scene Understanding",
    "Spatial Relation",
    "Instance Identity",
    "Instance Location",
    "Instance Interaction",
    "Visual Reasoning",
    "Text Understanding",
];

const COLOURS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 30, 30]),
    ("green", [30, 190, 60]),
    ("blue", [40, 60, 220]),
    ("yellow", [235, 220, 40]),
    ("cyan", [40, 210, 220]),
    ("orange", [240, 140, 20]),
];

const COUNTS: [&str; 4] = ["three", "four", "five", "six"];

#[derive(Debug, Clone)]
pub struct Rectangle {
    pub colour: &'static str,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rectangle {
    fn area(&self) -> u32 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn overlaps(&self, o: &Rectangle, gap: u32) -> bool {
        self.x0 < o.x1 + gap && o.x0 < self.x1 + gap && self.y0 < o.y1 + gap && o.y0 < self.y1 + gap
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub rects: Vec<Rectangle>,
}

/// 3–5 disjoint rectangles of distinct colours on a random background.
/// The top-left pixel is always background.
pub fn scene(rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.random_range(3..=5);
    let mut colours = COLOURS.to_vec();
    colours.shuffle(rng);
    let mut rects: Vec<Rectangle> = Vec::new();
    while rects.len() < n {
        let w = rng.random_range(8..=18);
        let h = rng.random_range(6..=14);
        let x0 = rng.random_range(2..WIDTH - w - 1);
        let y0 = rng.random_range(2..HEIGHT - h - 1);
        let r = Rectangle {
            colour: colours[rects.len()].0,
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        if rects.iter().all(|o| !o.overlaps(&r, 2)) && rects.iter().all(|o| o.area() != r.area()) {
            rects.push(r);
        }
    }
    let bg = [rng.random_range(0..=255), rng.random_range(0..=255), rng.random_range(0..=255)];
    let mut image = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb(bg));
    for (r, (_, rgb)) in rects.iter().zip(&colours) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                image.put_pixel(x, y, Rgb(*rgb));
            }
        }
    }
    Scene { image, rects }
}

fn jitter(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            let d: i16 = rng.random_range(-3..=3);
            p.0[c] = (p.0[c] as i16 + d).clamp(0, 255) as u8;
        }
    }
    out
}

struct Question {
    text: String,
    options: Vec<String>,
    answer: usize,
    answer_text: String,
}

fn question(i: usize, s: &Scene, rng: &mut ChaCha8Rng) -> Question {
    if i % 2 == 0 {
        let answer = s.rects.len() - 3;
        return Question {
            text: "How many coloured rectangles are shown in the picture?".into(),
            options: COUNTS.iter().map(|c| c.to_string()).collect(),
            answer,
            answer_text: COUNTS[answer].into(),
        };
    }
    let largest = s.rects.iter().max_by_key(|r| r.area()).expect("nonempty").colour;
    let mut options: Vec<String> = COLOURS
        .iter()
        .map(|c| c.0)
        .filter(|c| *c != largest)
        .take(3)
        .map(String::from)
        .collect();
    options.push(largest.into());
    options.shuffle(rng);
    let answer = options.iter().position(|o| o == largest).expect("present");
    Question {
        text: "What colour is the large rectangle in the image?".into(),
        options,
        answer,
        answer_text: largest.into(),
    }
}

/// Where to point the fixture's endpoints.
#[derive(Debug, Clone, Default)]
pub enum Endpoints {
    #[default]
    InProcess,
    /// Base URL of a running mock server.
    Http(String),
}

/// Writes the fixture under `dir` and returns the config path.
pub fn write_demo_fixture(dir: &Path, endpoints: &Endpoints) -> io::Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("corpus"))?;
    let embed = MockEmbed::default();
    let mut tsv = String::from("index\timage\tquestion\tA\tB\tC\tD\tanswer\tcategory\n");
    let mut train: Vec<EmbeddingVector<f32>> = Vec::new();
    let mut captions = String::new();
    let letters = ["A", "B", "C", "D"];
    let mut eval_vectors = Vec::new();
    for i in 0..DEMO_SAMPLES {
        let s = scene(&mut rng);
        let q = question(i, &s, &mut rng);
        let rel = format!("images/eval_{i:02}.png");
        fs::write(dir.join(&rel), encode_png_rgb(&s.image))?;
        eval_vectors.push(EmbeddingVector::normalized("eval", embed.image_vector(&s.image)).map_err(io::Error::other)?);
        tsv.push_str(&format!(
            "{i}\t{rel}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            q.text, q.options[0], q.options[1], q.options[2], q.options[3], letters[q.answer], TASKS[i % TASKS.len()]
        ));
        if i % 2 == 0 {
            let id = format!("train-dup-{i:02}");
            let v = embed.image_vector(&jitter(&s.image, &mut rng));
            train.push(EmbeddingVector::normalized(id.clone(), v).map_err(io::Error::other)?);
            let caption = if i % 4 == 0 {
                format!("A plain backdrop with {} blocks, mostly {}.", q.answer_text, s.rects[0].colour)
            } else {
                "Coloured blocks arranged on a plain backdrop.".to_string()
            };
            captions.push_str(&serde_json::json!({"id": id, "caption": caption}).to_string());
            captions.push('\n');
        }
    }
    let mut j = 0;
    while j < DECOYS {
        let s = scene(&mut rng);
        let id = format!("train-{j:04}");
        let v = EmbeddingVector::normalized(id.clone(), embed.image_vector(&s.image)).map_err(io::Error::other)?;
        let near = eval_vectors
            .iter()
            .any(|e| cosine(e, &v).is_ok_and(|c| c >= DECOY_MAX_COSINE));
        if near {
            continue;
        }
        j += 1;
        train.push(v);
        let caption = format!("Abstract shapes, sample {j}.");
        captions.push_str(&serde_json::json!({"id": id, "caption": caption}).to_string());
        captions.push('\n');
    }
    fs::write(dir.join("bench.tsv"), tsv)?;
    fs::write(dir.join("corpus/captions.jsonl"), captions)?;
    let mut f = io::BufWriter::new(fs::File::create(dir.join("corpus/train.vlbe"))?);
    write_vectors(&mut f, &train).map_err(io::Error::other)?;
    drop(f);
    let path = dir.join("config.toml");
    fs::write(&path, demo_config(endpoints))?;
    Ok(path)
}

fn demo_stacks() -> Vec<String> {
    let mut stacks: Vec<String> = ["V1", "V2", "V3", "L1", "L2", "L3", "L4"].map(String::from).to_vec();
    stacks.extend(paired_grid().iter().map(ToString::to_string));
    stacks.push("V1+V3+L4".into());
    stacks
}

pub fn demo_config(endpoints: &Endpoints) -> String {
    let stacks = demo_stacks()
        .iter()
        .map(|s| format!("\"{s}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let endpoint = |name: &str, model: &str| match endpoints {
        Endpoints::InProcess => format!("[endpoints.{name}]\nkind = \"mock\"\nmodel = \"{model}\"\n"),
        Endpoints::Http(url) => {
            format!("[endpoints.{name}]\nkind = \"http\"\nurl = \"{url}\"\nmodel = \"{model}\"\nmax_in_flight = 8\n")
        }
    };
    let mut out = format!(
        r#"root_seed = 7
seeds = 5
theta = 0.9
v3_ratio = 1.5
ratio_sweep = true
judge_mode = "per_stage"
output_dir = "out"
stacks = [{stacks}]

[benchmark]
name = "demo-mcq"
path = "bench.tsv"
adapter = "mmbench_like"

[corpus]
name = "demo-corpus"
vectors = "corpus/train.vlbe"
captions = "corpus/captions.jsonl"
index = "approximate"

[roles]
generator = "generator"
judge = "judge"
inpaint = "inpaint"
segment = "segment"
embed = "embed"
eval_models = ["lvlm-a", "lvlm-b"]

"#
    );
    for (name, model) in [
        ("generator", "mock-generator"),
        ("judge", "mock-judge"),
        ("inpaint", "mock-inpaint"),
        ("segment", "mock-segment"),
        ("embed", "mock-embed"),
        ("lvlm-a", "mock-lvlm-a"),
        ("lvlm-b", "mock-lvlm-b"),
    ] {
        out.push_str(&endpoint(name, model));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::mock::connected_components;

    #[test]
    fn scenes_segment_into_their_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = scene(&mut rng);
            assert_eq!(connected_components(&s.image, 16).len(), s.rects.len());
        }
    }

    #[test]
    fn jittered_copies_stay_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = MockEmbed::default();
        let v = |img: &RgbImage| EmbeddingVector::normalized("x", e.image_vector(img)).unwrap();
        for _ in 0..40 {
            let a = scene(&mut rng);
            let dup = jitter(&a.image, &mut rng);
            let c = cosine(&v(&a.image), &v(&dup)).unwrap();
            assert!(c >= 0.99, "{c}");
        }
    }

    #[test]
    fn fixture_ingests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_demo_fixture(dir.path(), &Endpoints::InProcess).unwrap();
        let cfg = crate::config::PipelineConfig::load(&cfg).unwrap();
        let got = crate::benchio::ingest(&cfg.benchmark.path, cfg.adapter().unwrap()).unwrap();
        assert_eq!(got.samples.len(), DEMO_SAMPLES);
        let tags: std::collections::BTreeSet<_> = got.samples.iter().map(|s| s.task_tag.clone()).collect();
        assert_eq!(tags.len(), 9);
    }
}
