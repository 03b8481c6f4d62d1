//! `.cupt` ingestion and output, BIGO tags, dependency adjacency and the
//! word vocabulary.
//!
//! A cupt file is CoNLL-U with an eleventh `PARSEME:MWE` column holding `*`
//! (no expression), `_` (unannotated) or a `;`-separated list of `<id>` /
//! `<id>:<category>` items. Multiword-token ranges (`3-4`) and empty nodes
//! (`3.1`) are kept for faithful rewriting but never indexed.

mod adjacency;
mod bigo;
mod vocab;

pub use adjacency::{build_adjacency, AdjacencySet};
pub use bigo::{decode_bigo, encode_bigo, encode_spans, resolve_overlaps, round_trip_safe, Tag};
pub use vocab::{build_vocab, Vocab, PAD, UNK};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

const COLUMNS: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// 1-based index of the syntactic word within its sentence.
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    /// 0 attaches to the root.
    pub head: usize,
    pub deprel: String,
    pub deps: String,
    pub misc: String,
    pub mwe_col: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MweSpan {
    pub mwe_id: u32,
    pub category: Option<String>,
    /// Strictly increasing 1-based token indices.
    pub positions: Vec<usize>,
}

impl MweSpan {
    pub fn new(mwe_id: u32, positions: Vec<usize>) -> Self {
        MweSpan {
            mwe_id,
            category: None,
            positions,
        }
    }

    pub fn first(&self) -> usize {
        self.positions[0]
    }

    pub fn last(&self) -> usize {
        *self.positions.last().expect("span has at least one position")
    }

    /// Tokens inside the surface extent that do not belong to the span.
    pub fn gap_size(&self) -> usize {
        (self.last() - self.first() + 1) - self.positions.len()
    }

    pub fn is_discontinuous(&self) -> bool {
        self.gap_size() > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Line {
    Comment(String),
    Token(usize),
    /// Multiword-token range or empty node, written back verbatim.
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub source_id: String,
    pub tokens: Vec<Token>,
    pub spans: Vec<MweSpan>,
    lines: Vec<Line>,
}

impl Sentence {
    /// Sentence from bare tokens, with no comments or extra rows.
    pub fn from_tokens(source_id: impl Into<String>, tokens: Vec<Token>, spans: Vec<MweSpan>) -> Self {
        let lines = (0..tokens.len()).map(Line::Token).collect();
        Sentence {
            source_id: source_id.into(),
            tokens,
            spans,
            lines,
        }
    }

    /// Add a `# key = value` line after the existing comment block.
    pub fn add_metadata(&mut self, key: &str, value: &str) {
        let at = self.lines.iter().take_while(|l| matches!(l, Line::Comment(_))).count();
        self.lines.insert(at, Line::Comment(format!("# {key} = {value}")));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    /// Exactly one root, every head inside the sentence, no cycles.
    pub fn check_tree(&self) -> Result<()> {
        let n = self.tokens.len();
        let err = |message: String| Error::Structure {
            sentence: self.source_id.clone(),
            message,
        };
        if let Some(t) = self.tokens.iter().find(|t| t.head > n) {
            return Err(err(format!("token {} has head {} outside 0..={n}", t.id, t.head)));
        }
        let roots = self.tokens.iter().filter(|t| t.head == 0).count();
        if roots != 1 {
            return Err(err(format!("expected one root, found {roots}")));
        }
        for start in 1..=n {
            let mut cur = start;
            for _ in 0..=n {
                cur = self.tokens[cur - 1].head;
                if cur == 0 {
                    break;
                }
            }
            if cur != 0 {
                return Err(err(format!("token {start} is on a cycle")));
            }
        }
        Ok(())
    }

    /// Copy of this sentence with the MWE column rewritten from `spans`.
    /// Spans are renumbered 1.. by first token; a missing category is
    /// written as `MWE`.
    pub fn with_spans(&self, spans: &[MweSpan]) -> Sentence {
        let mut ordered: Vec<MweSpan> = spans.to_vec();
        ordered.sort_by(|a, b| a.positions.cmp(&b.positions));
        let mut columns = vec![Vec::<String>::new(); self.tokens.len()];
        for (k, span) in ordered.iter_mut().enumerate() {
            span.mwe_id = k as u32 + 1;
            for (j, &p) in span.positions.iter().enumerate() {
                let item = if j == 0 {
                    format!("{}:{}", span.mwe_id, span.category.as_deref().unwrap_or("MWE"))
                } else {
                    span.mwe_id.to_string()
                };
                columns[p - 1].push(item);
            }
        }
        let mut out = self.clone();
        for (tok, items) in out.tokens.iter_mut().zip(columns) {
            tok.mwe_col = if items.is_empty() {
                "*".to_string()
            } else {
                items.join(";")
            };
        }
        for span in &mut ordered {
            if span.category.is_none() {
                span.category = Some("MWE".to_string());
            }
        }
        out.spans = ordered;
        out
    }

    fn write_to(&self, out: &mut String) {
        for line in &self.lines {
            match line {
                Line::Comment(text) | Line::Other(text) => out.push_str(text),
                Line::Token(i) => {
                    let t = &self.tokens[*i];
                    let _ = write!(
                        out,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        t.id,
                        t.form,
                        t.lemma,
                        t.upos,
                        t.xpos,
                        t.feats,
                        t.head,
                        t.deprel,
                        t.deps,
                        t.misc,
                        t.mwe_col
                    );
                }
            }
            out.push('\n');
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    /// Non-fatal irregularities seen while parsing.
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn spans(&self) -> Vec<Vec<MweSpan>> {
        self.sentences.iter().map(|s| s.spans.clone()).collect()
    }

    pub fn to_cupt(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            s.write_to(&mut out);
            out.push('\n');
        }
        out
    }
}

fn parse_index(field: &str, line: usize, what: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::parse(line, format!("{what} `{field}` is not a non-negative integer")))
}

struct SentenceBuilder {
    lines: Vec<Line>,
    tokens: Vec<Token>,
    spans: Vec<MweSpan>,
    source_id: Option<String>,
}

impl SentenceBuilder {
    fn new() -> Self {
        SentenceBuilder {
            lines: Vec::new(),
            tokens: Vec::new(),
            spans: Vec::new(),
            source_id: None,
        }
    }

    fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    fn add_mwe_items(&mut self, col: &str, position: usize, line: usize, warnings: &mut Vec<String>) -> Result<()> {
        if col == "*" || col == "_" {
            return Ok(());
        }
        for item in col.split(';') {
            let (id_part, category) = match item.split_once(':') {
                Some((id, cat)) if !cat.is_empty() => (id, Some(cat)),
                Some(_) => return Err(Error::parse(line, format!("empty MWE category in `{item}`"))),
                None => (item, None),
            };
            let mwe_id = id_part
                .parse::<u32>()
                .ok()
                .filter(|&id| id > 0)
                .ok_or_else(|| Error::parse(line, format!("bad MWE item `{item}`")))?;
            match self.spans.iter_mut().find(|s| s.mwe_id == mwe_id) {
                Some(span) => {
                    if span.positions.last() != Some(&position) {
                        span.positions.push(position);
                    }
                    if span.category.is_none() {
                        span.category = category.map(str::to_string);
                    }
                }
                None => {
                    if category.is_none() {
                        warnings.push(format!(
                            "line {line}: MWE id {mwe_id} continues a span that was never introduced"
                        ));
                    }
                    self.spans.push(MweSpan {
                        mwe_id,
                        category: category.map(str::to_string),
                        positions: vec![position],
                    });
                }
            }
        }
        Ok(())
    }

    fn finish(self, ordinal: usize) -> Sentence {
        Sentence {
            source_id: self.source_id.unwrap_or_else(|| format!("s{ordinal}")),
            tokens: self.tokens,
            spans: self.spans,
            lines: self.lines,
        }
    }
}

/// Parse a whole `.cupt` document.
pub fn parse_cupt(text: &str) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut current = SentenceBuilder::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !current.is_empty() {
                let done = std::mem::replace(&mut current, SentenceBuilder::new());
                corpus.sentences.push(done.finish(corpus.sentences.len() + 1));
            }
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                let key = key.trim();
                if key == "source_sent_id" || (key == "sent_id" && current.source_id.is_none()) {
                    current.source_id = Some(value.trim().to_string());
                }
            }
            current.lines.push(Line::Comment(line.to_string()));
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != COLUMNS {
            return Err(Error::parse(
                line_no,
                format!("expected {COLUMNS} tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            current.lines.push(Line::Other(line.to_string()));
            continue;
        }
        let id = parse_index(cols[0], line_no, "token id")?;
        let expected = current.tokens.len() + 1;
        if id != expected {
            return Err(Error::parse(line_no, format!("token id {id}, expected {expected}")));
        }
        let head = parse_index(cols[6], line_no, "head")?;
        if head == id {
            return Err(Error::parse(line_no, format!("token {id} is its own head")));
        }
        current.add_mwe_items(cols[10], id, line_no, &mut corpus.warnings)?;
        current.tokens.push(Token {
            id,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            xpos: cols[4].to_string(),
            feats: cols[5].to_string(),
            head,
            deprel: cols[7].to_string(),
            deps: cols[8].to_string(),
            misc: cols[9].to_string(),
            mwe_col: cols[10].to_string(),
        });
        current.lines.push(Line::Token(id - 1));
    }
    if !current.is_empty() {
        corpus.sentences.push(current.finish(corpus.sentences.len() + 1));
    }
    // a block of comments alone is not a sentence
    corpus.sentences.retain(|s| !s.tokens.is_empty());
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    Ok(corpus)
}

/// Every position covered by at least one span.
pub fn covered_positions(spans: &[MweSpan]) -> BTreeSet<usize> {
    spans.iter().flat_map(|s| s.positions.iter().copied()).collect()
}
