//! Extraction of a bounding-box 4-tuple from free-form model output.
//!
//! Responses interleave chain-of-thought prose with coordinates, so the
//! parser scans for bracketed numeric 4-tuples and takes the LAST one: the
//! prompt asks the model to reason first and finish with the final answer,
//! making earlier tuples intermediate guesses.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::BBox;

/// Why a response yielded no usable box. Carried into trial records so
/// failure modes stay auditable per configuration.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFailure {
    #[error("no bracketed coordinate tuple found")]
    NoTupleFound,
    #[error("coordinate tuple contains a non-finite value")]
    MalformedNumbers,
    #[error("box is degenerate after clamping to image bounds")]
    DegenerateBox,
    #[error("box lies entirely outside the image")]
    OutOfRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParserOptions {
    /// Also accept `x1=… y1=… x2=… y2=…` keyed forms when no bracketed
    /// tuple is present. Off by default; the prompt mandates bracket form.
    pub keyed_fallback: bool,
}

/// A successfully extracted box plus provenance of the extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsedBox {
    pub bbox: BBox,
    /// Byte offsets of the matched tuple within the response text.
    pub span: (usize, usize),
    /// True when all four raw values sat in [0, 1] and were interpreted as
    /// fractions of the image dimensions.
    pub assumed_normalized: bool,
}

const NUM: &str = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?";

static GROUP_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[([^\[\]()]*)\]|\(([^\[\]()]*)\)").unwrap());
static NUM_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!("^{NUM}$")).unwrap());
static KEYED_RES: LazyLock<[Regex; 4]> = LazyLock::new(|| {
    ["x1", "y1", "x2", "y2"]
        .map(|key| Regex::new(&format!(r"(?i)\b{key}\s*[=:]\s*({NUM})")).unwrap())
});

fn parse_group(inner: &str) -> Option<[f64; 4]> {
    let tokens: Vec<&str> = inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.len() != 4 || !tokens.iter().all(|t| NUM_RE.is_match(t)) {
        return None;
    }
    // NUM_RE-validated tokens always parse; magnitude may overflow to inf,
    // which normalize() reports as malformed rather than skipping the group
    let mut vals = [0.0f64; 4];
    for (v, t) in vals.iter_mut().zip(&tokens) {
        *v = t.parse().ok()?;
    }
    Some(vals)
}

/// Finds the last bracketed (or parenthesized) group of exactly four
/// numeric tokens. Groups with other shapes or non-numeric tokens are
/// skipped, not fatal.
pub fn extract_tuple(text: &str) -> Result<([f64; 4], (usize, usize)), ParseFailure> {
    let mut last = None;
    for caps in GROUP_RE.captures_iter(text) {
        let inner = caps.get(1).or_else(|| caps.get(2)).unwrap();
        if let Some(vals) = parse_group(inner.as_str()) {
            let whole = caps.get(0).unwrap();
            last = Some((vals, (whole.start(), whole.end())));
        }
    }
    last.ok_or(ParseFailure::NoTupleFound)
}

fn extract_keyed(text: &str) -> Option<([f64; 4], (usize, usize))> {
    let mut vals = [0.0f64; 4];
    let (mut lo, mut hi) = (usize::MAX, 0usize);
    for (v, re) in vals.iter_mut().zip(KEYED_RES.iter()) {
        let caps = re.captures_iter(text).last()?;
        *v = caps.get(1).unwrap().as_str().parse().ok()?;
        let whole = caps.get(0).unwrap();
        lo = lo.min(whole.start());
        hi = hi.max(whole.end());
    }
    Some((vals, (lo, hi)))
}

/// Turns four raw values into a valid in-bounds box: scales fractions when
/// all values sit in [0, 1], reorders corners, clamps to the image, and
/// rejects what remains unusable.
pub fn normalize(raw: [f64; 4], dims: (u32, u32)) -> Result<(BBox, bool), ParseFailure> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ParseFailure::MalformedNumbers);
    }
    let (w, h) = (dims.0 as f64, dims.1 as f64);

    let assumed_normalized = raw.iter().all(|&v| (0.0..=1.0).contains(&v));
    let [mut x1, mut y1, mut x2, mut y2] = raw;
    if assumed_normalized {
        x1 *= w;
        x2 *= w;
        y1 *= h;
        y2 *= h;
    }
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
    }
    if y1 > y2 {
        std::mem::swap(&mut y1, &mut y2);
    }
    if x2 <= 0.0 || x1 >= w || y2 <= 0.0 || y1 >= h {
        return Err(ParseFailure::OutOfRange);
    }
    let bbox = BBox::new(
        x1.clamp(0.0, w),
        y1.clamp(0.0, h),
        x2.clamp(0.0, w),
        y2.clamp(0.0, h),
    )
    .map_err(|_| ParseFailure::DegenerateBox)?;
    Ok((bbox, assumed_normalized))
}

/// Full pipeline: tuple extraction (bracket form, then the keyed grammar if
/// enabled) followed by normalization into image coordinates.
pub fn parse_prediction(
    text: &str,
    dims: (u32, u32),
    options: ParserOptions,
) -> Result<ParsedBox, ParseFailure> {
    let extracted = match extract_tuple(text) {
        Ok(hit) => Ok(hit),
        Err(ParseFailure::NoTupleFound) if options.keyed_fallback => {
            extract_keyed(text).ok_or(ParseFailure::NoTupleFound)
        }
        Err(e) => Err(e),
    };
    let (raw, span) = extracted?;
    let (bbox, assumed_normalized) = normalize(raw, dims)?;
    Ok(ParsedBox {
        bbox,
        span,
        assumed_normalized,
    })
}

/// Renders a box in the prompt's answer format. Parsing the output (on a
/// canvas containing the box) recovers it exactly.
pub fn format_bbox(bbox: &BBox) -> String {
    format!(
        "[{}, {}, {}, {}]",
        bbox.x1(),
        bbox.y1(),
        bbox.x2(),
        bbox.y2()
    )
}
