use std::fmt;
use std::str::FromStr;

use super::{MweSpan, Sentence};

/// Per-token label. The declaration order fixes the class indices 0..3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    /// First component of an expression.
    B,
    /// Any later component.
    I,
    /// Token inside an expression's gap.
    G,
    O,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::B, Tag::I, Tag::G, Tag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Tag::ALL.get(i).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Tag::B => "B",
            Tag::I => "I",
            Tag::G => "G",
            Tag::O => "O",
        };
        f.write_str(c)
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" => Ok(Tag::B),
            "I" => Ok(Tag::I),
            "G" => Ok(Tag::G),
            "O" => Ok(Tag::O),
            other => Err(format!("unknown tag `{other}`")),
        }
    }
}

/// Greedy selection of spans expressible in one BIGO layer: candidates
/// ordered by (start, length, mwe_id); a span is kept only if no token of
/// its surface extent is already tagged. Kept spans never overlap, nest or
/// interleave.
pub fn resolve_overlaps(spans: &[MweSpan], sentence_len: usize) -> Vec<MweSpan> {
    let mut order: Vec<&MweSpan> = spans
        .iter()
        .filter(|s| !s.positions.is_empty() && s.last() <= sentence_len)
        .collect();
    order.sort_by_key(|s| (s.first(), s.last() - s.first(), s.mwe_id));
    let mut tagged = vec![false; sentence_len + 1];
    let mut kept = Vec::new();
    for span in order {
        if tagged[span.first()..=span.last()].iter().any(|&t| t) {
            continue;
        }
        tagged[span.first()..=span.last()].iter_mut().for_each(|t| *t = true);
        kept.push(span.clone());
    }
    kept
}

/// Tags for `len` tokens from an arbitrary span set (overlaps resolved first).
pub fn encode_spans(spans: &[MweSpan], len: usize) -> Vec<Tag> {
    let mut tags = vec![Tag::O; len];
    for span in resolve_overlaps(spans, len) {
        for p in span.first()..=span.last() {
            tags[p - 1] = Tag::G;
        }
        for &p in &span.positions {
            tags[p - 1] = Tag::I;
        }
        tags[span.first() - 1] = Tag::B;
    }
    tags
}

pub fn encode_bigo(sentence: &Sentence) -> Vec<Tag> {
    encode_spans(&sentence.spans, sentence.len())
}

/// Robust decoding of any tag sequence. `B` opens a span, `I` extends the
/// open span (or opens one), `G` keeps the open span open without adding
/// to it, `O` closes it. Spans are numbered 1.. in order of opening.
pub fn decode_bigo(tags: &[Tag]) -> Vec<MweSpan> {
    let mut spans: Vec<MweSpan> = Vec::new();
    let mut open = false;
    for (i, &tag) in tags.iter().enumerate() {
        let pos = i + 1;
        match tag {
            Tag::B => {
                spans.push(MweSpan::new(spans.len() as u32 + 1, vec![pos]));
                open = true;
            }
            Tag::I if open => spans.last_mut().expect("open span").positions.push(pos),
            Tag::I => {
                spans.push(MweSpan::new(spans.len() as u32 + 1, vec![pos]));
                open = true;
            }
            Tag::G => {}
            Tag::O => open = false,
        }
    }
    spans
}

/// Whether the sentence's spans survive an encode/decode round trip
/// unchanged, i.e. resolution drops nothing.
pub fn round_trip_safe(sentence: &Sentence) -> bool {
    let resolved = resolve_overlaps(&sentence.spans, sentence.len());
    if resolved.len() != sentence.spans.len() {
        return false;
    }
    let decoded = decode_bigo(&encode_bigo(sentence));
    decoded.len() == resolved.len()
        && decoded
            .iter()
            .zip(&resolved)
            .all(|(d, r)| d.positions == r.positions)
}
