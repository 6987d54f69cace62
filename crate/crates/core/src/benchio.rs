//! Benchmark ingestion into the canonical JSONL schema, subsetting and export.
//!
//! Non-canonical layouts are described by [`Adapter`] column maps rather than
//! per-benchmark parsing code.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, Cursor, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{
    sha256_hex, validate_sample, AnswerSpec, Format, ImageRef, OptionItem, VqaSample,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("benchmark contains no samples")]
    Empty,
    #[error("subset fraction {0} must be in (0, 1]")]
    InvalidFraction(f64),
    #[error("subset of {count} samples at fraction {fraction} is empty")]
    EmptyResult { count: usize, fraction: f64 },
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub format: Format,
    pub sample_count: usize,
    pub subset_fraction: f64,
    pub subset_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    MmeLike,
    MmbenchLike,
    SeedbenchLike,
    Canonical,
}

impl FromStr for AdapterKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mme_like" => Ok(Self::MmeLike),
            "mmbench_like" => Ok(Self::MmbenchLike),
            "seedbench_like" => Ok(Self::SeedbenchLike),
            "canonical" => Ok(Self::Canonical),
            other => Err(BenchError::UnknownAdapter(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Tab-separated with a header row.
    Tsv,
    /// One JSON object per line with flat keys.
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerCase {
    Lower,
    Upper,
    Keep,
}

/// Column map for one benchmark family.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub layout: Layout,
    pub format: Format,
    pub id: &'static str,
    pub image: &'static str,
    pub question: &'static str,
    pub answer: &'static str,
    pub task: Option<&'static str>,
    /// `(letter, column)`; empty cells are skipped.
    pub options: &'static [(&'static str, &'static str)],
    pub answer_case: AnswerCase,
}

const LETTER_COLUMNS: &[(&str, &str)] = &[("A", "A"), ("B", "B"), ("C", "C"), ("D", "D")];
const CHOICE_COLUMNS: &[(&str, &str)] = &[
    ("A", "choice_a"),
    ("B", "choice_b"),
    ("C", "choice_c"),
    ("D", "choice_d"),
];

impl AdapterKind {
    /// Column map, or `None` for the canonical schema.
    pub fn adapter(self) -> Option<Adapter> {
        match self {
            AdapterKind::MmeLike => Some(Adapter {
                layout: Layout::Tsv,
                format: Format::YesNo,
                id: "question_id",
                image: "image",
                question: "question",
                answer: "answer",
                task: Some("category"),
                options: &[],
                answer_case: AnswerCase::Lower,
            }),
            AdapterKind::MmbenchLike => Some(Adapter {
                layout: Layout::Tsv,
                format: Format::Mcq,
                id: "index",
                image: "image",
                question: "question",
                answer: "answer",
                task: Some("category"),
                options: LETTER_COLUMNS,
                answer_case: AnswerCase::Upper,
            }),
            AdapterKind::SeedbenchLike => Some(Adapter {
                layout: Layout::Jsonl,
                format: Format::Mcq,
                id: "question_id",
                image: "data_id",
                question: "question",
                answer: "answer",
                task: Some("question_type"),
                options: CHOICE_COLUMNS,
                answer_case: AnswerCase::Upper,
            }),
            AdapterKind::Canonical => None,
        }
    }
}

/// Result of ingesting one benchmark file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub samples: Vec<VqaSample>,
    pub manifest: BenchmarkManifest,
}

/// Reads a benchmark file. Image paths are resolved relative to the file's
/// directory for hashing and dimension probing.
pub fn ingest(path: &Path, kind: AdapterKind) -> Result<Ingested, BenchError> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let samples = match kind.adapter() {
        None => parse_canonical(&text)?,
        Some(adapter) => parse_with_adapter(&text, &adapter, &base)?,
    };
    let first = samples.first().ok_or(BenchError::Empty)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("benchmark")
        .to_string();
    let manifest = BenchmarkManifest {
        name,
        format: first.format,
        sample_count: samples.len(),
        subset_fraction: 1.0,
        subset_seed: 0,
    };
    Ok(Ingested { samples, manifest })
}

struct IdTracker(HashSet<String>);

impl IdTracker {
    fn insert(&mut self, id: &str, line: usize) -> Result<(), BenchError> {
        if !self.0.insert(id.to_string()) {
            return Err(BenchError::DuplicateId {
                line,
                id: id.to_string(),
            });
        }
        Ok(())
    }
}

fn check(sample: &VqaSample, line: usize) -> Result<(), BenchError> {
    let violations = validate_sample(sample);
    if violations.is_empty() {
        return Ok(());
    }
    let reason = violations
        .iter()
        .map(|v| format!("{}: {}", v.field, v.rule))
        .collect::<Vec<_>>()
        .join("; ");
    Err(BenchError::Parse { line, reason })
}

/// Parses canonical JSONL text (blank lines ignored).
pub fn parse_canonical(text: &str) -> Result<Vec<VqaSample>, BenchError> {
    let mut ids = IdTracker(HashSet::new());
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let sample: VqaSample = serde_json::from_str(raw).map_err(|e| BenchError::Parse {
            line,
            reason: e.to_string(),
        })?;
        check(&sample, line)?;
        ids.insert(&sample.id, line)?;
        out.push(sample);
    }
    Ok(out)
}

type Row = Vec<(String, String)>;

fn rows(text: &str, layout: Layout) -> Result<Vec<(usize, Row)>, BenchError> {
    let mut out = Vec::new();
    match layout {
        Layout::Tsv => {
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            let Some((_, header)) = lines.next() else {
                return Ok(out);
            };
            let header: Vec<String> = header.split('\t').map(|h| h.trim().to_string()).collect();
            for (i, l) in lines {
                let row = header
                    .iter()
                    .cloned()
                    .zip(l.split('\t').map(|c| c.trim().to_string()))
                    .collect();
                out.push((i + 1, row));
            }
        }
        Layout::Jsonl => {
            for (i, l) in text.lines().enumerate() {
                if l.trim().is_empty() {
                    continue;
                }
                let obj: serde_json::Map<String, Value> =
                    serde_json::from_str(l).map_err(|e| BenchError::Parse {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                let row = obj
                    .into_iter()
                    .map(|(k, v)| {
                        let v = match v {
                            Value::String(s) => s,
                            Value::Null => String::new(),
                            other => other.to_string(),
                        };
                        (k, v)
                    })
                    .collect();
                out.push((i + 1, row));
            }
        }
    }
    Ok(out)
}

fn cell<'a>(row: &'a Row, column: &str) -> Option<&'a str> {
    row.iter()
        .find(|(k, _)| k == column)
        .map(|(_, v)| v.as_str())
        .filter(|v| !v.is_empty())
}

fn required<'a>(row: &'a Row, column: &str, line: usize) -> Result<&'a str, BenchError> {
    cell(row, column).ok_or_else(|| BenchError::Parse {
        line,
        reason: format!("missing column `{column}`"),
    })
}

/// Hashes an image file and reads its dimensions without a full decode.
pub fn probe_image(base: &Path, rel: &str) -> Result<ImageRef, String> {
    let full: PathBuf = base.join(rel);
    let bytes = fs::read(&full).map_err(|e| format!("image `{rel}`: {e}"))?;
    let (width, height) = image::ImageReader::new(Cursor::new(&bytes))
        .with_guessed_format()
        .map_err(|e| format!("image `{rel}`: {e}"))?
        .into_dimensions()
        .map_err(|e| format!("image `{rel}`: {e}"))?;
    Ok(ImageRef {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
        width,
        height,
    })
}

pub fn parse_with_adapter(text: &str, a: &Adapter, base: &Path) -> Result<Vec<VqaSample>, BenchError> {
    let mut ids = IdTracker(HashSet::new());
    let mut out = Vec::new();
    for (line, row) in rows(text, a.layout)? {
        let id = required(&row, a.id, line)?.to_string();
        let image_rel = required(&row, a.image, line)?;
        let question = required(&row, a.question, line)?.to_string();
        let answer = required(&row, a.answer, line)?;
        let answer = match a.answer_case {
            AnswerCase::Lower => answer.to_lowercase(),
            AnswerCase::Upper => answer.to_uppercase(),
            AnswerCase::Keep => answer.to_string(),
        };
        let options = a
            .options
            .iter()
            .filter_map(|(letter, col)| cell(&row, col).map(|t| OptionItem::new(*letter, t)))
            .collect();
        let image = probe_image(base, image_rel).map_err(|reason| BenchError::Parse { line, reason })?;
        let sample = VqaSample {
            id,
            image,
            question,
            options,
            answer: AnswerSpec::new(answer),
            task_tag: a.task.and_then(|c| cell(&row, c)).unwrap_or("").to_string(),
            format: a.format,
        };
        check(&sample, line)?;
        ids.insert(&sample.id, line)?;
        out.push(sample);
    }
    Ok(out)
}

/// Deterministic seeded subset, a function of `(seed, sorted ids)` only.
/// The survivors keep their input order.
pub fn subset(samples: &[VqaSample], fraction: f64, seed: u64) -> Result<Vec<VqaSample>, BenchError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(BenchError::InvalidFraction(fraction));
    }
    let n = (fraction * samples.len() as f64).round() as usize;
    if n == 0 {
        return Err(BenchError::EmptyResult {
            count: samples.len(),
            fraction,
        });
    }
    if n == samples.len() {
        return Ok(samples.to_vec());
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let keep: BTreeSet<&str> = ids.into_iter().take(n).collect();
    Ok(samples
        .iter()
        .filter(|s| keep.contains(s.id.as_str()))
        .cloned()
        .collect())
}

pub fn write_canonical<W: Write>(samples: &[VqaSample], mut w: W) -> io::Result<()> {
    for s in samples {
        w.write_all(s.canonical_json().as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_canonical<R: BufRead>(mut r: R) -> Result<Vec<VqaSample>, BenchError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    parse_canonical(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_image(dir: &Path, name: &str, w: u32, h: u32) {
        RgbImage::from_pixel(w, h, Rgb([10, 20, 30]))
            .save(dir.join(name))
            .unwrap();
    }

    fn synthetic(n: usize) -> Vec<VqaSample> {
        (0..n)
            .map(|i| VqaSample {
                id: format!("id{i:05}"),
                image: ImageRef {
                    path: format!("{i}.png"),
                    sha256: "00".into(),
                    width: 8,
                    height: 8,
                },
                question: "Is it red?".into(),
                options: vec![],
                answer: AnswerSpec::new("yes"),
                task_tag: String::new(),
                format: Format::YesNo,
            })
            .collect()
    }

    #[test]
    fn mme_row_becomes_yes_no_sample() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 640, 480);
        let tsv = "question_id\timage\tquestion\tanswer\tcategory\n\
                   1\ta.png\tIs there a dog in this image? Please answer yes or no.\tYes\texistence\n";
        let p = dir.path().join("mme.tsv");
        fs::write(&p, tsv).unwrap();
        let got = ingest(&p, AdapterKind::MmeLike).unwrap();
        let s = &got.samples[0];
        assert_eq!(s.format, Format::YesNo);
        assert_eq!(s.answer.canonical, "yes");
        assert!(s.question.ends_with("Please answer yes or no."));
        assert_eq!((s.image.width, s.image.height), (640, 480));
        assert_eq!(got.manifest.sample_count, 1);
        assert_eq!(got.manifest.name, "mme");
    }

    #[test]
    fn missing_answer_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 4, 4);
        let tsv = "question_id\timage\tquestion\tanswer\n1\ta.png\tIs it?\n";
        let p = dir.path().join("b.tsv");
        fs::write(&p, tsv).unwrap();
        match ingest(&p, AdapterKind::MmeLike) {
            Err(BenchError::Parse { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("`answer`"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mmbench_and_seedbench_layouts() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 10, 10);
        let tsv = "index\timage\tquestion\tA\tB\tC\tD\tanswer\tcategory\n\
                   7\ta.png\tWhat is shown?\tcat\tdog\t\t\tb\tinstance\n";
        let p = dir.path().join("mmb.tsv");
        fs::write(&p, tsv).unwrap();
        let s = &ingest(&p, AdapterKind::MmbenchLike).unwrap().samples[0];
        assert_eq!(s.options.len(), 2);
        assert_eq!(s.answer.canonical, "B");

        let jsonl = r#"{"question_id": 101, "data_id": "a.png", "question": "Color?", "choice_a": "red", "choice_b": "blue", "choice_c": "green", "choice_d": "gray", "answer": "C", "question_type": "Instance Attributes"}"#;
        let p = dir.path().join("seed.jsonl");
        fs::write(&p, jsonl).unwrap();
        let s = &ingest(&p, AdapterKind::SeedbenchLike).unwrap().samples[0];
        assert_eq!(s.id, "101");
        assert_eq!(s.options[2].text, "green");
        assert_eq!(s.task_tag, "Instance Attributes");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = synthetic(2);
        let mut text = String::new();
        text.push_str(&s[0].canonical_json());
        text.push('\n');
        text.push_str(&s[0].canonical_json());
        assert!(matches!(
            parse_canonical(&text),
            Err(BenchError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn canonical_round_trip() {
        let s = synthetic(5);
        let mut buf = Vec::new();
        write_canonical(&s, &mut buf).unwrap();
        assert_eq!(read_canonical(&buf[..]).unwrap(), s);
    }

    #[test]
    fn subset_counts_and_determinism() {
        let s = synthetic(100);
        let a = subset(&s, 0.10, 7).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, subset(&s, 0.10, 7).unwrap());
        assert_ne!(a, subset(&s, 0.10, 8).unwrap());
        assert_eq!(subset(&s, 1.0, 3).unwrap(), s);

        let big = synthetic(10_000);
        assert_eq!(subset(&big, 0.30, 1).unwrap().len(), 3_000);
    }

    #[test]
    fn subset_is_independent_of_file_order_and_keeps_input_order() {
        let s = synthetic(50);
        let mut rev = s.clone();
        rev.reverse();
        let a: Vec<String> = subset(&s, 0.3, 11).unwrap().into_iter().map(|x| x.id).collect();
        let mut b: Vec<String> = subset(&rev, 0.3, 11).unwrap().into_iter().map(|x| x.id).collect();
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(a, sorted, "input order preserved");
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn subset_errors() {
        let s = synthetic(3);
        assert!(matches!(subset(&s, 0.0, 0), Err(BenchError::InvalidFraction(_))));
        assert!(matches!(subset(&s, 1.5, 0), Err(BenchError::InvalidFraction(_))));
        assert!(matches!(subset(&s, 0.1, 0), Err(BenchError::EmptyResult { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fraction_one_is_idempotent(n in 1usize..200, f in 0.01f64..1.0, seed: u64, seed2: u64) {
                let s = synthetic(n);
                if let Ok(once) = subset(&s, f, seed) {
                    prop_assert_eq!(subset(&once, 1.0, seed2).unwrap(), once.clone());
                    prop_assert_eq!(once.len(), (f * n as f64).round() as usize);
                }
            }
        }
    }
}
