//! Context documents: segmentation of raw text into indexed texts and
//! ground-truth marking for injected strings.
//!
//! A context is an ordered list of texts. Each text keeps a byte span back
//! into the raw document so rankings can be traced to exact source regions.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// How a raw document is split into texts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Fixed-size blocks of whitespace-delimited words; the last block may
    /// be shorter.
    Passage { words: usize },
    /// Split on terminal punctuation (`.`, `!`, `?`) followed by whitespace.
    Sentence,
    /// Split on blank lines.
    Paragraph,
}

impl Default for Granularity {
    fn default() -> Self {
        Granularity::Passage { words: 100 }
    }
}

impl Granularity {
    /// Parse a CLI/config spelling: `passage`, `passage:N`, `sentence`,
    /// `paragraph`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(rest) = spec.strip_prefix("passage") {
            let words = match rest.strip_prefix(':') {
                None if rest.is_empty() => 100,
                Some(n) => n
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad passage size {n:?}")))?,
                _ => return Err(Error::InvalidConfig(format!("bad granularity {spec:?}"))),
            };
            if words == 0 {
                return Err(Error::InvalidConfig("passage size must be >= 1".into()));
            }
            Ok(Granularity::Passage { words })
        } else {
            match spec {
                "sentence" => Ok(Granularity::Sentence),
                "paragraph" => Ok(Granularity::Paragraph),
                _ => Err(Error::InvalidConfig(format!("bad granularity {spec:?}"))),
            }
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::Passage { words } => write!(f, "passage:{words}"),
            Granularity::Sentence => write!(f, "sentence"),
            Granularity::Paragraph => write!(f, "paragraph"),
        }
    }
}

/// One text in a context: its position, content, and byte span in the raw
/// document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSegment {
    pub index: usize,
    pub content: String,
    /// Byte offsets `(start, end)` into the raw document; `raw[start..end]`
    /// equals `content`.
    pub char_span: (usize, usize),
}

/// An ordered set of texts carved out of one raw document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub segments: Vec<TextSegment>,
    pub raw: String,
    pub granularity: Granularity,
}

impl ContextDoc {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Contents of the texts at `indices`, in original order.
    pub fn contents(&self, indices: &[usize]) -> Vec<&str> {
        indices
            .iter()
            .map(|&i| self.segments[i].content.as_str())
            .collect()
    }
}

/// An instruction, a segmented context, and the output being traced back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceQuery {
    pub instruction: String,
    pub context: ContextDoc,
    pub output: String,
}

impl TraceQuery {
    pub fn new(instruction: impl Into<String>, context: ContextDoc, output: impl Into<String>) -> Result<Self> {
        let output = output.into();
        if output.trim().is_empty() {
            return Err(Error::InvalidConfig("output must be non-empty".into()));
        }
        Ok(TraceQuery {
            instruction: instruction.into(),
            context,
            output,
        })
    }
}

/// Split `raw` into texts per `granularity`.
///
/// Every returned segment satisfies `raw[span.0..span.1] == content`, spans
/// are ordered and non-overlapping, and no segment is blank.
pub fn segment(raw: &str, granularity: Granularity) -> Result<ContextDoc> {
    if raw.trim().is_empty() {
        return Err(Error::EmptyDocument);
    }
    let spans: Vec<(usize, usize)> = match granularity {
        Granularity::Passage { words } => {
            if words == 0 {
                return Err(Error::InvalidConfig("passage size must be >= 1".into()));
            }
            let word_spans = word_spans(raw);
            word_spans
                .chunks(words)
                .map(|chunk| (chunk[0].0, chunk[chunk.len() - 1].1))
                .collect()
        }
        Granularity::Sentence => sentence_spans(raw),
        Granularity::Paragraph => paragraph_spans(raw),
    };
    let segments = spans
        .into_iter()
        .filter(|&(s, e)| !raw[s..e].trim().is_empty())
        .enumerate()
        .map(|(index, (s, e))| TextSegment {
            index,
            content: raw[s..e].to_string(),
            char_span: (s, e),
        })
        .collect::<Vec<_>>();
    debug_assert!(!segments.is_empty());
    Ok(ContextDoc {
        segments,
        raw: raw.to_string(),
        granularity,
    })
}

/// Byte spans of maximal non-whitespace runs.
pub(crate) fn word_spans(raw: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in raw.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, raw.len()));
    }
    spans
}

fn sentence_spans(raw: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let bytes_len = raw.len();
    let mut chars = raw.char_indices().peekable();
    let mut start: Option<usize> = None;
    let mut in_terminal = false;
    while let Some((i, ch)) = chars.next() {
        if ch.is_whitespace() {
            if in_terminal {
                // Sentence ended at the terminal run before this whitespace.
                if let Some(s) = start.take() {
                    spans.push((s, i));
                }
                in_terminal = false;
            }
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        in_terminal = matches!(ch, '.' | '!' | '?');
        if in_terminal && chars.peek().is_none() {
            if let Some(s) = start.take() {
                spans.push((s, bytes_len));
            }
        }
    }
    if let Some(s) = start {
        // Trailing sentence without terminal punctuation.
        let end = raw[s..].trim_end().len() + s;
        spans.push((s, end));
    }
    spans
}

/// Spans of non-blank blocks separated by lines that are empty after
/// trimming. Offsets are absolute byte positions, trimmed of surrounding
/// whitespace within each block.
fn paragraph_spans(raw: &str) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut block_start: Option<usize> = None;
    let mut last_content_end = 0;
    let mut line_start = 0;
    for line in raw.split_inclusive('\n') {
        let line_body = line.strip_suffix('\n').map(|b| b.strip_suffix('\r').unwrap_or(b)).unwrap_or(line);
        let body_trimmed = line_body.trim();
        if body_trimmed.is_empty() {
            if let Some(s) = block_start.take() {
                blocks.push((s, last_content_end));
            }
        } else {
            let lead = line_body.len() - line_body.trim_start().len();
            if block_start.is_none() {
                block_start = Some(line_start + lead);
            }
            last_content_end = line_start + lead + body_trimmed.len();
        }
        line_start += line.len();
    }
    if let Some(s) = block_start {
        blocks.push((s, last_content_end));
    }
    blocks
}

/// Lowercased alphanumeric tokens of `text`; punctuation is stripped and
/// tokens that end up empty are dropped.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Indices of segments whose token set overlaps any injected string's
/// token set. Tokens are case-insensitive with punctuation stripped.
pub fn mark_ground_truth(doc: &ContextDoc, injected: &[String]) -> BTreeSet<usize> {
    let mut injected_tokens: BTreeSet<String> = BTreeSet::new();
    for s in injected {
        injected_tokens.extend(normalized_tokens(s));
    }
    if injected_tokens.is_empty() {
        return BTreeSet::new();
    }
    doc.segments
        .iter()
        .filter(|seg| {
            normalized_tokens(&seg.content)
                .iter()
                .any(|t| injected_tokens.contains(t))
        })
        .map(|seg| seg.index)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize, prefix: &str) -> String {
        (0..n).map(|i| format!("{prefix}{i:04}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn passage_tiling_250_words() {
        let raw = words(250, "w");
        let doc = segment(&raw, Granularity::Passage { words: 100 }).unwrap();
        assert_eq!(doc.len(), 3);
        let counts: Vec<usize> = doc
            .segments
            .iter()
            .map(|s| s.content.split_whitespace().count())
            .collect();
        assert_eq!(counts, vec![100, 100, 50]);
    }

    #[test]
    fn sentence_split_on_terminal_punctuation() {
        let doc = segment("A. B! C?", Granularity::Sentence).unwrap();
        let contents: Vec<&str> = doc.segments.iter().map(|s| s.content.as_str()).collect();
        assert_eq!(contents, vec!["A.", "B!", "C?"]);
    }

    #[test]
    fn paragraph_split_on_blank_lines() {
        let doc = segment("p1\n\np2", Granularity::Paragraph).unwrap();
        assert_eq!(doc.len(), 2);
        assert_eq!(doc.segments[0].content, "p1");
        assert_eq!(doc.segments[1].content, "p2");
    }

    #[test]
    fn paragraph_split_handles_padding_and_windows_lines() {
        let doc = segment("  p1 line\n \t\n\n p2 a\np2 b  \n", Granularity::Paragraph).unwrap();
        assert_eq!(doc.len(), 2);
        assert_eq!(doc.segments[0].content, "p1 line");
        assert_eq!(doc.segments[1].content, "p2 a\np2 b");
    }

    #[test]
    fn empty_document_rejected() {
        assert!(matches!(
            segment("   \n\t ", Granularity::Sentence),
            Err(Error::EmptyDocument)
        ));
    }

    #[test]
    fn spans_reproduce_content() {
        let raw = "One sentence here. Another one! And a third?  Trailing tail";
        for g in [
            Granularity::Passage { words: 3 },
            Granularity::Sentence,
            Granularity::Paragraph,
        ] {
            let doc = segment(raw, g).unwrap();
            for seg in &doc.segments {
                assert_eq!(&raw[seg.char_span.0..seg.char_span.1], seg.content);
            }
            // spans ordered and non-overlapping
            for pair in doc.segments.windows(2) {
                assert!(pair[0].char_span.1 <= pair[1].char_span.0);
            }
        }
    }

    #[test]
    fn segmentation_is_deterministic() {
        let raw = words(57, "tok");
        let a = segment(&raw, Granularity::Passage { words: 10 }).unwrap();
        let b = segment(&raw, Granularity::Passage { words: 10 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_single_passage() {
        // 3 passages of 5 words with disjoint vocab; injection inside passage 1.
        let raw = format!(
            "{} {} {}",
            words(5, "alpha"),
            "INJECT the payload XX now",
            words(5, "gamma")
        );
        let doc = segment(&raw, Granularity::Passage { words: 5 }).unwrap();
        let gamma = mark_ground_truth(&doc, &["INJECT the payload XX now".to_string()]);
        assert_eq!(gamma.into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn ground_truth_injection_spanning_two_passages() {
        let head = words(4, "left");
        let tail = words(4, "right");
        // "inject part one" ends passage 0, "inject part two" starts passage 1
        let raw = format!("{head} evil payload {tail}");
        let doc = segment(&raw, Granularity::Passage { words: 5 }).unwrap();
        let gamma = mark_ground_truth(&doc, &["evil payload".to_string()]);
        assert_eq!(gamma.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn ground_truth_empty_injections() {
        let raw = words(10, "w");
        let doc = segment(&raw, Granularity::Passage { words: 5 }).unwrap();
        assert!(mark_ground_truth(&doc, &[]).is_empty());
    }

    #[test]
    fn ground_truth_case_and_punctuation_insensitive() {
        let raw = "aaa bbb Needle, ccc";
        let doc = segment(raw, Granularity::Passage { words: 2 }).unwrap();
        let gamma = mark_ground_truth(&doc, &["NEEDLE!".to_string()]);
        assert_eq!(gamma.into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn ground_truth_monotone_under_more_injections() {
        let raw = words(30, "w");
        let doc = segment(&raw, Granularity::Passage { words: 10 }).unwrap();
        let g1 = mark_ground_truth(&doc, &["w0003".to_string()]);
        let g2 = mark_ground_truth(&doc, &["w0003".to_string(), "w0015".to_string()]);
        assert!(g1.is_subset(&g2));
    }
}
