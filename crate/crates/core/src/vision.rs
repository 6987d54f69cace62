//! Image bootstrapping: add an object (V1), remove an object (V2), outpaint (V3).

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clients::{self, InpaintRequest, InpaintTask, Rect, SegmentResponse};
use crate::generate::{candidate, Evidence, GenContext, GenError};
use crate::model::{StrategyId, StrategyKind, VqaSample};
use crate::prompts::{self, Template};
use crate::store::{encode_png_gray, encode_png_rgb};

/// Pixel box, half-open: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self, width: u32, height: u32) -> bool {
        self.x_min < self.x_max && self.x_max <= width && self.y_min < self.y_max && self.y_max <= height
    }

    pub fn area(&self) -> u64 {
        self.x_max.saturating_sub(self.x_min) as u64 * self.y_max.saturating_sub(self.y_min) as u64
    }

    fn as_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddCandidate {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoveCandidate {
    pub object_mark: u32,
    pub object_name: String,
}

fn dims(sample: &VqaSample) -> Result<(u32, u32), GenError> {
    if sample.image.width == 0 || sample.image.height == 0 {
        return Err(GenError::MissingDims);
    }
    Ok((sample.image.width, sample.image.height))
}

fn add_vars(sample: &VqaSample) -> Result<[(&'static str, String); 4], GenError> {
    let (w, h) = dims(sample)?;
    if sample.question.trim().is_empty() {
        return Err(GenError::MissingField("question"));
    }
    Ok([
        ("H", h.to_string()),
        ("W", w.to_string()),
        ("Q", sample.question.clone()),
        ("A", answer_text(sample)),
    ])
}

/// Answer as shown to generators and judges: the option text is appended for
/// multiple-choice samples so the model sees what the letter means.
pub fn answer_text(sample: &VqaSample) -> String {
    match sample.option_text(&sample.answer.canonical) {
        Some(t) => format!("{}. {}", sample.answer.canonical, t),
        None => sample.answer.canonical.clone(),
    }
}

fn borrow_vars<'a>(v: &'a [(&'static str, String)]) -> Vec<(&'a str, &'a str)> {
    v.iter().map(|(k, s)| (*k, s.as_str())).collect()
}

/// The add-object instruction, with the image marker left in place.
pub fn build_add_prompt(sample: &VqaSample) -> Result<String, GenError> {
    let vars = add_vars(sample)?;
    Ok(prompts::V1_ADD.fill(&borrow_vars(&vars)))
}

/// Strips Markdown code fences and returns the outermost `[...]` span.
fn list_span(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (end > start).then(|| &text[start..=end])
}

/// Parses a JSON list, quoting bare keys and bare string values if needed.
fn lenient_list(text: &str) -> Option<Vec<Value>> {
    let cleaned = text.replace("```json", "").replace("```", "");
    let span = list_span(&cleaned)?;
    if let Ok(Value::Array(v)) = serde_json::from_str(span) {
        return Some(v);
    }
    let keys = Regex::new(r#"([\{,]\s*)([A-Za-z_][A-Za-z0-9_]*)\s*:"#).expect("regex");
    let quoted = keys.replace_all(span, r#"$1"$2":"#);
    if let Ok(Value::Array(v)) = serde_json::from_str(&quoted) {
        return Some(v);
    }
    let values = Regex::new(r#":\s*([A-Za-z][^,\}\]"]*?)\s*([,\}])"#).expect("regex");
    let quoted = values.replace_all(&quoted, r#": "$1"$2"#);
    match serde_json::from_str(&quoted) {
        Ok(Value::Array(v)) => Some(v),
        _ => None,
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Parses the add-object response: clips boxes to the image, drops boxes
/// that are empty after clipping, keeps at most 10 in response order.
pub fn parse_add_candidates(text: &str, width: u32, height: u32) -> Result<Vec<AddCandidate>, GenError> {
    let items = lenient_list(text).ok_or_else(|| GenError::UnparseableResponse(snippet(text)))?;
    let mut out = Vec::new();
    for item in items {
        let Some(name) = item.get("name").and_then(Value::as_str) else {
            continue;
        };
        let Some(coords) = item.get("box").and_then(Value::as_array) else {
            continue;
        };
        let c: Vec<f64> = coords.iter().filter_map(number).collect();
        if c.len() != 4 || c.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let clip = |v: f64, max: u32| v.round().clamp(0.0, max as f64) as u32;
        let b = BBox::new(clip(c[0], width), clip(c[1], height), clip(c[2], width), clip(c[3], height));
        if b.is_valid(width, height) {
            out.push(AddCandidate {
                name: name.trim().to_string(),
                bbox: b,
            });
        }
        if out.len() == 10 {
            break;
        }
    }
    Ok(out)
}

/// Parses the remove-object response, keeping at most 5 entries.
pub fn parse_remove_candidates(text: &str) -> Result<Vec<RemoveCandidate>, GenError> {
    let items = lenient_list(text).ok_or_else(|| GenError::UnparseableResponse(snippet(text)))?;
    let out: Vec<RemoveCandidate> = items
        .iter()
        .filter_map(|item| {
            let mark = item.get("object_mark").and_then(number)?;
            if mark < 0.0 || mark.fract() != 0.0 {
                return None;
            }
            let name = match item.get("object_name") {
                Some(Value::String(s)) => s.trim().to_string(),
                Some(other) => other.to_string(),
                None => String::new(),
            };
            Some(RemoveCandidate {
                object_mark: mark as u32,
                object_name: name,
            })
        })
        .take(5)
        .collect();
    if out.is_empty() {
        return Err(GenError::UnparseableResponse(snippet(text)));
    }
    Ok(out)
}

fn snippet(text: &str) -> String {
    text.chars().take(80).collect()
}

/// Single-channel mask, 255 inside the box and 0 elsewhere.
pub fn bbox_to_mask(b: &BBox, width: u32, height: u32) -> Result<GrayImage, GenError> {
    if !b.is_valid(width, height) {
        return Err(GenError::InvalidBox(b.as_array()));
    }
    Ok(GrayImage::from_fn(width, height, |x, y| {
        let inside = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
        Luma([if inside { 255 } else { 0 }])
    }))
}

fn pick<T>(items: &[T], seed: u64) -> &T {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    &items[rng.random_range(0..items.len())]
}

fn sample_with_image(sample: &VqaSample, image: crate::model::ImageRef) -> VqaSample {
    VqaSample {
        image,
        ..sample.clone()
    }
}

/// Records the edited image and returns the candidate.
fn finish_image(
    sample: &VqaSample,
    strategy: &StrategyId,
    seed: u64,
    edited: &RgbImage,
    mut ev: Evidence,
    ctx: &GenContext<'_>,
) -> Result<crate::model::VariantRecord, GenError> {
    let r = ctx.store.put_image(edited)?;
    ev.png(ctx.store, "edited", r.sha256.clone(), &encode_png_rgb(edited))?;
    Ok(candidate(sample, sample_with_image(sample, r), strategy, seed, ev))
}

fn put_mask(ev: &mut Evidence, ctx: &GenContext<'_>, mask: &GrayImage) -> Result<(), GenError> {
    let h = ctx.store.put_mask(mask)?;
    ev.png(ctx.store, "mask", h, &encode_png_gray(mask))
}

fn image_parts(template: &Template, vars: &[(&str, &str)], png: &[u8]) -> Vec<clients::Part> {
    template.parts(vars, &[("I", png)])
}

/// Adds a model-proposed object at a seeded choice among the proposals.
pub fn apply_v1(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<crate::model::VariantRecord, GenError> {
    let strategy = StrategyId::new(StrategyKind::V1);
    let vars = add_vars(sample)?;
    let (w, h) = dims(sample)?;
    let img = ctx.store.load_image(&sample.image)?;
    let png = encode_png_rgb(&img);
    let mut ev = Evidence::new(sample, &strategy, seed);
    let text = ctx.chat(
        &prompts::V1_ADD,
        image_parts(&prompts::V1_ADD, &borrow_vars(&vars), &png),
        seed,
        &mut ev,
    )?;
    let cands = parse_add_candidates(&text, w, h)?;
    if cands.is_empty() {
        return Err(GenError::NoCandidates);
    }
    let chosen = pick(&cands, seed).clone();
    ev.artifacts
        .insert("chosen".into(), serde_json::to_string(&chosen).expect("serializes"));
    let mask = bbox_to_mask(&chosen.bbox, w, h)?;
    put_mask(&mut ev, ctx, &mask)?;
    let edited = clients::inpaint(
        ctx.services.inpaint.as_ref(),
        &InpaintRequest {
            task: InpaintTask::Add,
            image: img,
            mask,
            prompt: chosen.name.clone(),
            keep: None,
        },
    )?;
    finish_image(sample, &strategy, seed, &edited, ev, ctx)
}

/// 5×7 bitmaps for the digits 0–9, one row per byte, high bit on the left.
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Glyph cells are 5×7 plus a one-cell border.
pub fn label_size(serial: u32, scale: u32) -> (u32, u32) {
    let n = serial.to_string().len() as u32;
    ((n * 6 + 1) * scale, 9 * scale)
}

/// Draws `serial` as white block digits on a black plate centred at `(cx, cy)`.
pub fn draw_label(img: &mut RgbImage, serial: u32, cx: u32, cy: u32, scale: u32) {
    let (lw, lh) = label_size(serial, scale);
    let (w, h) = img.dimensions();
    let x0 = cx.saturating_sub(lw / 2).min(w.saturating_sub(lw));
    let y0 = cy.saturating_sub(lh / 2).min(h.saturating_sub(lh));
    let mut put = |x: u32, y: u32, c: Rgb<u8>| {
        if x < w && y < h {
            img.put_pixel(x, y, c);
        }
    };
    for y in 0..lh {
        for x in 0..lw {
            put(x0 + x, y0 + y, Rgb([0, 0, 0]));
        }
    }
    for (i, ch) in serial.to_string().bytes().enumerate() {
        let glyph = &DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..5u32 {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let gx = x0 + (1 + i as u32 * 6 + col) * scale + dx;
                        let gy = y0 + (1 + row as u32) * scale + dy;
                        put(gx, gy, Rgb([255, 255, 255]));
                    }
                }
            }
        }
    }
}

/// Mask centroid, rounded down.
pub fn centroid(mask: &GrayImage) -> Option<(u32, u32)> {
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    for (x, y, p) in mask.enumerate_pixels() {
        if p.0[0] != 0 {
            sx += x as u64;
            sy += y as u64;
            n += 1;
        }
    }
    (n > 0).then(|| ((sx / n) as u32, (sy / n) as u32))
}

/// Copy of `img` with each segment's serial drawn at its centroid.
pub fn overlay_marks(img: &RgbImage, seg: &SegmentResponse) -> RgbImage {
    let scale = (img.width().min(img.height()) / 96).max(1);
    let mut out = img.clone();
    for m in &seg.masks {
        if let Some((cx, cy)) = centroid(&m.mask) {
            draw_label(&mut out, m.serial, cx, cy, scale);
        }
    }
    out
}

/// Removes a segmented object named by the model.
pub fn apply_v2(sample: &VqaSample, seed: u64, ctx: &GenContext<'_>) -> Result<crate::model::VariantRecord, GenError> {
    let strategy = StrategyId::new(StrategyKind::V2);
    dims(sample)?;
    if sample.question.trim().is_empty() {
        return Err(GenError::MissingField("question"));
    }
    let img = ctx.store.load_image(&sample.image)?;
    let seg = clients::segment(ctx.services.segment.as_ref(), &img)?;
    if seg.masks.is_empty() {
        return Err(GenError::NoSegments);
    }
    let marked = overlay_marks(&img, &seg);
    let marked_png = encode_png_rgb(&marked);
    let mut ev = Evidence::new(sample, &strategy, seed);
    let marked_ref = ctx.store.put(&marked_png)?;
    ev.png(ctx.store, "marked", marked_ref, &marked_png)?;
    let text = ctx.chat(
        &prompts::V2_REMOVE,
        image_parts(&prompts::V2_REMOVE, &[("Q", &sample.question)], &marked_png),
        seed,
        &mut ev,
    )?;
    let cands = parse_remove_candidates(&text)?;
    let chosen = pick(&cands, seed).clone();
    ev.artifacts
        .insert("chosen".into(), serde_json::to_string(&chosen).expect("serializes"));
    let target = seg
        .get(chosen.object_mark)
        .ok_or(GenError::UnknownSerial(chosen.object_mark))?;
    let mask = GrayImage::from_fn(img.width(), img.height(), |x, y| {
        Luma([if target.mask.get_pixel(x, y).0[0] != 0 { 255 } else { 0 }])
    });
    put_mask(&mut ev, ctx, &mask)?;
    let edited = clients::inpaint(
        ctx.services.inpaint.as_ref(),
        &InpaintRequest {
            task: InpaintTask::Remove,
            image: img,
            mask,
            prompt: prompts::REMOVE_PROMPT.to_string(),
            keep: None,
        },
    )?;
    finish_image(sample, &strategy, seed, &edited, ev, ctx)
}

/// Expanded canvas size and the offset of the centred original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutpaintGeometry {
    pub width: u32,
    pub height: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

impl OutpaintGeometry {
    pub fn keep(&self, width: u32, height: u32) -> Rect {
        Rect {
            x: self.offset_x,
            y: self.offset_y,
            width,
            height,
        }
    }
}

pub fn outpaint_geometry(width: u32, height: u32, r: f64) -> Result<OutpaintGeometry, GenError> {
    if !r.is_finite() || r <= 1.0 {
        return Err(GenError::InvalidRatio(r));
    }
    let w2 = (r * width as f64).round();
    let h2 = (r * height as f64).round();
    if w2 <= width as f64 || h2 <= height as f64 || w2 > u32::MAX as f64 || h2 > u32::MAX as f64 {
        return Err(GenError::InvalidRatio(r));
    }
    let (w2, h2) = (w2 as u32, h2 as u32);
    Ok(OutpaintGeometry {
        width: w2,
        height: h2,
        offset_x: (w2 - width) / 2,
        offset_y: (h2 - height) / 2,
    })
}

/// Canvas with the original pasted at the offset, and the border mask.
pub fn outpaint_canvas(img: &RgbImage, g: &OutpaintGeometry) -> (RgbImage, GrayImage) {
    let keep = g.keep(img.width(), img.height());
    let mut canvas = RgbImage::from_pixel(g.width, g.height, Rgb([127, 127, 127]));
    image::imageops::replace(&mut canvas, img, g.offset_x as i64, g.offset_y as i64);
    let mask = GrayImage::from_fn(g.width, g.height, |x, y| Luma([if keep.contains(x, y) { 0 } else { 255 }]));
    (canvas, mask)
}

/// Outpaints the border of a canvas scaled by `r` per side.
pub fn apply_v3(
    sample: &VqaSample,
    r: f64,
    seed: u64,
    ctx: &GenContext<'_>,
) -> Result<crate::model::VariantRecord, GenError> {
    let strategy = StrategyId::v3(r);
    let (w, h) = dims(sample)?;
    let g = outpaint_geometry(w, h, r)?;
    let img = ctx.store.load_image(&sample.image)?;
    let (canvas, mask) = outpaint_canvas(&img, &g);
    let mut ev = Evidence::new(sample, &strategy, seed);
    ev.artifacts
        .insert("geometry".into(), serde_json::to_string(&g).expect("serializes"));
    put_mask(&mut ev, ctx, &mask)?;
    let edited = clients::inpaint(
        ctx.services.inpaint.as_ref(),
        &InpaintRequest {
            task: InpaintTask::Outpaint,
            image: canvas,
            mask,
            prompt: prompts::OUTPAINT_PROMPT.to_string(),
            keep: Some(g.keep(w, h)),
        },
    )?;
    ev.text(ctx.store, "prompt", prompts::OUTPAINT_PROMPT)?;
    finish_image(sample, &strategy, seed, &edited, ev, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clipping_keeps_positive_area() {
        let c = parse_add_candidates(r#"[{"name": "kite", "box": [600, 0, 800, 50]}]"#, 640, 480).unwrap();
        assert_eq!(c[0].bbox, BBox::new(600, 0, 640, 50));
        let c = parse_add_candidates(r#"[{"name": "kite", "box": [700, 0, 800, 50]}]"#, 640, 480).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn fenced_bare_key_list_parses() {
        let text = "```json\n[{name: cat, box:[1, 2, 30, 40]}, {name: ball, box: [0,0,0,0]}]\n```";
        let c = parse_add_candidates(text, 100, 100).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].name, "cat");
    }

    #[test]
    fn prose_is_unparseable() {
        assert!(matches!(
            parse_add_candidates("I cannot help with that.", 10, 10),
            Err(GenError::UnparseableResponse(_))
        ));
    }

    #[test]
    fn keeps_at_most_ten() {
        let items: Vec<String> = (0..14)
            .map(|i| format!(r#"{{"name": "o{i}", "box": [0, 0, {}, 5]}}"#, i + 1))
            .collect();
        let c = parse_add_candidates(&format!("[{}]", items.join(",")), 100, 100).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c[9].name, "o9");
    }

    #[test]
    fn remove_candidates_accept_string_marks() {
        let c = parse_remove_candidates(r#"[{"object_mark": "2", "object_name": "cup"}]"#).unwrap();
        assert_eq!(c, vec![RemoveCandidate { object_mark: 2, object_name: "cup".into() }]);
    }

    #[test]
    fn mask_examples() {
        let m = bbox_to_mask(&BBox::new(0, 0, 8, 6), 8, 6).unwrap();
        assert!(m.pixels().all(|p| p.0[0] == 255));
        let m = bbox_to_mask(&BBox::new(10, 10, 20, 30), 64, 64).unwrap();
        assert_eq!(m.pixels().filter(|p| p.0[0] == 255).count(), 200);
        assert!(matches!(
            bbox_to_mask(&BBox::new(5, 5, 5, 10), 64, 64),
            Err(GenError::InvalidBox(_))
        ));
    }

    #[test]
    fn geometry_examples() {
        let g = outpaint_geometry(640, 480, 1.5).unwrap();
        assert_eq!((g.width, g.height, g.offset_x, g.offset_y), (960, 720, 160, 120));
        assert!(outpaint_geometry(640, 480, 1.0).is_err());
        assert!(outpaint_geometry(640, 480, 1.0 + 1e-9).is_err());
        let g = outpaint_geometry(100, 100, 2.0).unwrap();
        let (_, mask) = outpaint_canvas(&RgbImage::new(100, 100), &g);
        assert_eq!(mask.pixels().filter(|p| p.0[0] == 255).count(), 30_000);
    }

    #[test]
    fn digits_render_distinctly() {
        let mut seen = std::collections::HashSet::new();
        for d in 0..10 {
            let mut img = RgbImage::new(20, 20);
            draw_label(&mut img, d, 10, 10, 1);
            assert!(seen.insert(img.into_raw()), "digit {d}");
        }
    }

    proptest! {
        #[test]
        fn centered_paste_is_byte_identical(w in 1u32..40, h in 1u32..40, r in 1.05f64..2.5, seed: u64) {
            prop_assume!(outpaint_geometry(w, h, r).is_ok());
            let g = outpaint_geometry(w, h, r).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
            let (canvas, mask) = outpaint_canvas(&img, &g);
            for (x, y, p) in img.enumerate_pixels() {
                prop_assert_eq!(canvas.get_pixel(x + g.offset_x, y + g.offset_y), p);
                prop_assert_eq!(mask.get_pixel(x + g.offset_x, y + g.offset_y).0[0], 0);
            }
            let border = mask.pixels().filter(|p| p.0[0] == 255).count() as u64;
            prop_assert_eq!(border, g.width as u64 * g.height as u64 - w as u64 * h as u64);
        }
    }
}
