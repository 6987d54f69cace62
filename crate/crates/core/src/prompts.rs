//! Versioned prompt templates.
//!
//! Templates live in `prompts/*.txt` and are compiled in; their sha256 hashes
//! are pinned in `prompts/prompts.lock`. Placeholders are `<NAME>` tokens.
//! `<I>` and `<I2>` mark where image parts go; every other placeholder is
//! text.

use crate::clients::Part;
use crate::model::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! template {
    ($name:literal) => {
        Template {
            name: $name,
            text: include_str!(concat!("../prompts/", $name, ".txt")),
        }
    };
}

pub const V1_ADD: Template = template!("v1_add");
pub const V2_REMOVE: Template = template!("v2_remove");
pub const L1_SYNONYM: Template = template!("l1_synonym");
pub const L2_REPHRASE: Template = template!("l2_rephrase");
pub const L3_CONTEXT: Template = template!("l3_context");
pub const L4_IRRELEVANT: Template = template!("l4_irrelevant");
pub const JUDGE_V1: Template = template!("judge_v1");
pub const JUDGE_V2: Template = template!("judge_v2");
pub const JUDGE_V3: Template = template!("judge_v3");
pub const JUDGE_L1: Template = template!("judge_l1");
pub const JUDGE_L2: Template = template!("judge_l2");
pub const JUDGE_L3: Template = template!("judge_l3");
pub const JUDGE_L4: Template = template!("judge_l4");
pub const CAPTION_JUDGE: Template = template!("caption_judge");

pub const ALL: [Template; 14] = [
    V1_ADD,
    V2_REMOVE,
    L1_SYNONYM,
    L2_REPHRASE,
    L3_CONTEXT,
    L4_IRRELEVANT,
    JUDGE_V1,
    JUDGE_V2,
    JUDGE_V3,
    JUDGE_L1,
    JUDGE_L2,
    JUDGE_L3,
    JUDGE_L4,
    CAPTION_JUDGE,
];

pub const LOCKFILE: &str = include_str!("../prompts/prompts.lock");

/// Fixed outpainting prompt.
pub const OUTPAINT_PROMPT: &str = "background continuation";

/// Inpainting prompt for object removal.
pub const REMOVE_PROMPT: &str = "remove the object and fill with background";

pub fn by_name(name: &str) -> Option<Template> {
    ALL.into_iter().find(|t| t.name == name)
}

/// Hash pinned in the lockfile for `name`.
pub fn locked_hash(name: &str) -> Option<&'static str> {
    let file = format!("{name}.txt");
    LOCKFILE.lines().find_map(|l| {
        let (n, h) = l.split_once(' ')?;
        (n == file).then_some(h.trim())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment<'a> {
    Text(String),
    Image(&'a [u8]),
}

impl Template {
    /// sha256 of the raw template file.
    pub fn hash(&self) -> String {
        sha256_hex(self.text)
    }

    /// Fills placeholders in one pass over the template, so values that
    /// happen to contain `<A>` and the like are never re-expanded.
    /// Image placeholders are rendered as `<I>`/`<I2>` literally.
    pub fn fill(&self, vars: &[(&str, &str)]) -> String {
        self.render(vars, &[])
            .into_iter()
            .map(|s| match s {
                Segment::Text(t) => t,
                Segment::Image(_) => String::new(),
            })
            .collect()
    }

    /// Splits the filled template into text and image segments. `images`
    /// pairs an image placeholder with PNG bytes; image placeholders without
    /// an entry are left as literal text.
    pub fn render<'a>(&self, vars: &[(&str, &str)], images: &[(&str, &'a [u8])]) -> Vec<Segment<'a>> {
        let text = self.text.trim_end();
        let mut out = Vec::new();
        let mut cur = String::new();
        let mut rest = text;
        while let Some(start) = rest.find('<') {
            cur.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            let token = after.find('>').map(|end| &after[..end]);
            match token {
                Some(name) if is_placeholder(name) => {
                    if let Some((_, bytes)) = images.iter().find(|(n, _)| *n == name) {
                        if !cur.is_empty() {
                            out.push(Segment::Text(std::mem::take(&mut cur)));
                        }
                        out.push(Segment::Image(bytes));
                    } else if let Some((_, v)) = vars.iter().find(|(n, _)| *n == name) {
                        cur.push_str(v);
                    } else {
                        cur.push('<');
                        cur.push_str(name);
                        cur.push('>');
                    }
                    rest = &after[name.len() + 1..];
                }
                _ => {
                    cur.push('<');
                    rest = after;
                }
            }
        }
        cur.push_str(rest);
        if !cur.is_empty() {
            out.push(Segment::Text(cur));
        }
        out
    }

    /// Renders into chat parts.
    pub fn parts(&self, vars: &[(&str, &str)], images: &[(&str, &[u8])]) -> Vec<Part> {
        self.render(vars, images)
            .into_iter()
            .map(|s| match s {
                Segment::Text(t) => Part::text(t),
                Segment::Image(b) => Part::png(b),
            })
            .collect()
    }
}

fn is_placeholder(name: &str) -> bool {
    !name.is_empty() && name.len() <= 3 && name.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
}
