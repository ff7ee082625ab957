//! Reasoning traces, JSONL ingestion, annotation extraction and the
//! length-based in-domain / held-out split.
//!
//! Token counts and annotation positions use whitespace-delimited units
//! unless a producer supplies `token_count` explicitly. Annotation positions
//! are measured in the marker-free text.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::marker;
use crate::{Error, Result};

/// Default in-domain length threshold (16K tokens).
pub const DEFAULT_SPLIT_THRESHOLD: u64 = 16_384;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub id: String,
    pub question: String,
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub answer: String,
    pub model_family: String,
    pub task: String,
    pub token_count: u64,
}

#[derive(Deserialize)]
struct RawTrace {
    id: Option<String>,
    question: Option<String>,
    reasoning: Option<String>,
    #[serde(default)]
    answer: Option<String>,
    model_family: Option<String>,
    task: Option<String>,
    token_count: Option<u64>,
}

impl ReasoningTrace {
    /// Grouping key used by the length baselines.
    pub fn group(&self) -> GroupKey {
        GroupKey {
            model_family: self.model_family.clone(),
            task: self.task.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// `(model_family, task)` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub model_family: String,
    pub task: String,
}

impl GroupKey {
    pub fn new(model_family: impl Into<String>, task: impl Into<String>) -> Self {
        Self {
            model_family: model_family.into(),
            task: task.into(),
        }
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.model_family, self.task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressAnnotation {
    /// Whitespace-token offset of the marker in the marker-free text.
    pub position_k: u64,
    pub value: u8,
}

impl ProgressAnnotation {
    pub fn fraction(&self) -> f64 {
        f64::from(self.value) / 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub clean_text: String,
    pub annotations: Vec<ProgressAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub in_domain: Vec<ReasoningTrace>,
    pub held_out: Vec<ReasoningTrace>,
    pub threshold_tokens: u64,
}

pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Running whitespace-token count over text appended piece by piece.
#[derive(Debug, Default, Clone, Copy)]
pub struct TokenCounter {
    count: u64,
    in_token: bool,
}

impl TokenCounter {
    pub fn push(&mut self, piece: &str) {
        for c in piece.chars() {
            if c.is_whitespace() {
                self.in_token = false;
            } else if !self.in_token {
                self.in_token = true;
                self.count += 1;
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

pub fn parse_trace_line(line: &str) -> Result<ReasoningTrace> {
    parse_trace_line_at(line, 1)
}

/// Parse one JSONL record; `line_no` is only used in error messages.
pub fn parse_trace_line_at(line: &str, line_no: usize) -> Result<ReasoningTrace> {
    let raw: RawTrace = serde_json::from_str(line).map_err(|source| Error::Parse {
        line: line_no,
        source,
    })?;
    let schema = |msg: &str| Error::Schema(format!("line {line_no}: {msg}"));

    let id = raw.id.filter(|s| !s.is_empty()).ok_or_else(|| schema("missing `id`"))?;
    let reasoning = raw
        .reasoning
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema("missing or empty `reasoning`"))?;
    let question = raw.question.ok_or_else(|| schema("missing `question`"))?;
    let model_family = raw
        .model_family
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema("missing or empty `model_family`"))?;
    let task = raw
        .task
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema("missing or empty `task`"))?;
    let token_count = match raw.token_count {
        Some(n) => n,
        None => count_tokens(&extract_annotations(&reasoning)?.clean_text),
    };
    if token_count == 0 {
        return Err(schema("token_count must be at least 1"));
    }

    Ok(ReasoningTrace {
        id,
        question,
        reasoning,
        answer: raw.answer.unwrap_or_default(),
        model_family,
        task,
        token_count,
    })
}

/// Read a JSONL trace file, skipping blank lines.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<ReasoningTrace>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_trace_line_at(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_traces<W: Write>(mut writer: W, traces: &[ReasoningTrace]) -> Result<()> {
    for t in traces {
        writeln!(writer, "{}", t.to_json_line())?;
    }
    Ok(())
}

/// Remove every `<progressbar>N</progressbar>` span from `reasoning`.
pub fn extract_annotations(reasoning: &str) -> Result<Extracted> {
    let spans = marker::find_spans(reasoning)?;
    let mut clean_text = String::with_capacity(reasoning.len());
    let mut counter = TokenCounter::default();
    let mut annotations = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for span in spans {
        let piece = &reasoning[cursor..span.start];
        clean_text.push_str(piece);
        counter.push(piece);
        annotations.push(ProgressAnnotation {
            position_k: counter.count(),
            value: span.value,
        });
        cursor = span.end;
    }
    clean_text.push_str(&reasoning[cursor..]);
    Ok(Extracted {
        clean_text,
        annotations,
    })
}

/// Partition traces into `token_count <= threshold` and the rest, keeping
/// input order on each side.
pub fn split_by_length(traces: &[ReasoningTrace], threshold: u64) -> Result<DatasetSplit> {
    if threshold == 0 {
        return Err(Error::Range("split threshold 0".into()));
    }
    let (in_domain, held_out) = traces
        .iter()
        .cloned()
        .partition(|t| t.token_count <= threshold);
    Ok(DatasetSplit {
        in_domain,
        held_out,
        threshold_tokens: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(id: &str, n: u64) -> ReasoningTrace {
        ReasoningTrace {
            id: id.into(),
            question: "q".into(),
            reasoning: "x".into(),
            answer: String::new(),
            model_family: "m".into(),
            task: "math".into(),
            token_count: n,
        }
    }

    #[test]
    fn parses_with_default_token_count() {
        let t = parse_trace_line(
            r#"{"id":"t1","question":"q","reasoning":"a b c","model_family":"m","task":"math"}"#,
        )
        .unwrap();
        assert_eq!(t.token_count, 3);
        assert_eq!(t.answer, "");
    }

    #[test]
    fn token_count_ignores_markers() {
        let t = parse_trace_line(
            r#"{"id":"t","question":"","reasoning":"a <progressbar>50</progressbar> b","model_family":"m","task":"x"}"#,
        )
        .unwrap();
        assert_eq!(t.token_count, 2);
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(
            parse_trace_line(r#"{"id":"t2","reasoning":""}"#),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_trace_line(r#"{"reasoning":"a","question":"","model_family":"m","task":"t"}"#),
            Err(Error::Schema(_))
        ));
        match parse_trace_line_at("{not json", 7) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extract_single_marker() {
        let e = extract_annotations("ab <progressbar>30</progressbar> cd").unwrap();
        assert_eq!(e.clean_text, "ab  cd");
        assert_eq!(
            e.annotations,
            vec![ProgressAnnotation {
                position_k: 1,
                value: 30
            }]
        );
    }

    #[test]
    fn extract_identity() {
        let e = extract_annotations("no markers here").unwrap();
        assert_eq!(e.clean_text, "no markers here");
        assert!(e.annotations.is_empty());
    }

    #[test]
    fn extract_errors() {
        assert!(matches!(
            extract_annotations("a <progressbar>101</progressbar>"),
            Err(Error::ValueRange { value: 101, offset: 2 })
        ));
        assert!(matches!(
            extract_annotations("a b <progressbar>12"),
            Err(Error::MalformedAnnotation { offset: 4, .. })
        ));
        // A dangling partial opener is plain text.
        assert_eq!(
            extract_annotations("a <progressb").unwrap().clean_text,
            "a <progressb"
        );
    }

    #[test]
    fn split_examples() {
        let traces = vec![trace("a", 10), trace("b", 20), trace("c", 30)];
        let s = split_by_length(&traces, 20).unwrap();
        assert_eq!(s.in_domain.len(), 2);
        assert_eq!(s.held_out[0].id, "c");
        assert!(split_by_length(&[], 5).unwrap().in_domain.is_empty());
        assert!(split_by_length(&traces, 0).is_err());
    }

    #[test]
    fn counter_matches_split_whitespace() {
        let mut c = TokenCounter::default();
        for piece in ["ab", "c d", " e", "f\n\n", "g"] {
            c.push(piece);
        }
        assert_eq!(c.count(), count_tokens("abc d ef\n\ng"));
    }
}
