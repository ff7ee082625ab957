//! Grammar of the inline `<progressbar>N</progressbar>` marker.
//!
//! The matcher is shared by the strict extractor in [`crate::trace`], the
//! masking and weighting passes in [`crate::annotate`] and the incremental
//! [`crate::stream`] parser. It works on bytes and never looks behind the
//! position it is asked about, so its answer for a prefix of the input is
//! either final or [`Match::Incomplete`].

pub const OPEN: &[u8] = b"<progressbar>";
pub const CLOSE: &[u8] = b"</progressbar>";

/// Longest body (whitespace and digits) accepted between the delimiters.
pub const MAX_BODY: usize = 32;

/// Upper bound on the bytes a matcher needs before it can decide.
pub const MAX_SPAN: usize = OPEN.len() + MAX_BODY + CLOSE.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanValue {
    Valid(u8),
    OutOfRange(u64),
    /// No digits between the delimiters.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    /// The byte at the queried position does not start a marker.
    NotMarker,
    /// The input ends before the marker is decided. `opened` is set once the
    /// full opening delimiter has been seen.
    Incomplete { opened: bool },
    /// A complete span of `len` bytes.
    Span { len: usize, value: SpanValue },
    /// The opening delimiter matched but the bytes diverge from the grammar.
    /// The first `consumed` bytes belong to the failed span; scanning resumes
    /// after them. A failed closing delimiter is not consumed, so its `<` can
    /// start a new marker.
    Malformed {
        consumed: usize,
        reason: &'static str,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Lead,
    Digits,
    Trail,
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

/// Match a marker starting at `buf[at]`.
pub fn match_at(buf: &[u8], at: usize) -> Match {
    for (i, &expected) in OPEN.iter().enumerate() {
        match buf.get(at + i) {
            None => return Match::Incomplete { opened: false },
            Some(&b) if b != expected => return Match::NotMarker,
            Some(_) => {}
        }
    }

    let body_start = at + OPEN.len();
    let mut p = body_start;
    let mut phase = Phase::Lead;
    let mut value: u64 = 0;
    loop {
        let Some(&b) = buf.get(p) else {
            return Match::Incomplete { opened: true };
        };
        if b == b'<' {
            for (i, &expected) in CLOSE.iter().enumerate() {
                match buf.get(p + i) {
                    None => return Match::Incomplete { opened: true },
                    Some(&c) if c != expected => {
                        return Match::Malformed {
                            consumed: p - at,
                            reason: "expected closing delimiter",
                        }
                    }
                    Some(_) => {}
                }
            }
            let len = p + CLOSE.len() - at;
            let value = if phase == Phase::Lead {
                SpanValue::Empty
            } else if value <= 100 {
                SpanValue::Valid(value as u8)
            } else {
                SpanValue::OutOfRange(value)
            };
            return Match::Span { len, value };
        }
        if p - body_start >= MAX_BODY {
            return Match::Malformed {
                consumed: p - at,
                reason: "marker body too long",
            };
        }
        match (phase, b) {
            (Phase::Lead, _) if is_ws(b) => {}
            (Phase::Lead | Phase::Digits, b'0'..=b'9') => {
                phase = Phase::Digits;
                value = value.saturating_mul(10).saturating_add(u64::from(b - b'0'));
            }
            (Phase::Digits | Phase::Trail, _) if is_ws(b) => phase = Phase::Trail,
            _ => {
                return Match::Malformed {
                    consumed: p - at,
                    reason: "marker body is not a base-10 integer",
                }
            }
        }
        p += 1;
    }
}

/// Render a marker for `value`.
pub fn render(value: u8) -> String {
    format!("<progressbar>{value}</progressbar>")
}

/// A located, well-formed marker span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerSpan {
    pub start: usize,
    pub end: usize,
    pub value: u8,
}

/// Locate every marker span in a complete text, failing on anything that
/// starts a marker but does not finish as a valid one.
pub fn find_spans(text: &str) -> crate::Result<Vec<MarkerSpan>> {
    use crate::Error;

    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut pos = 0;
    while let Some(rel) = bytes[pos..].iter().position(|&b| b == b'<') {
        let at = pos + rel;
        match match_at(bytes, at) {
            Match::NotMarker | Match::Incomplete { opened: false } => pos = at + 1,
            Match::Incomplete { opened: true } => {
                return Err(Error::MalformedAnnotation {
                    offset: at,
                    reason: "unterminated marker".into(),
                })
            }
            Match::Malformed { reason, .. } => {
                return Err(Error::MalformedAnnotation {
                    offset: at,
                    reason: reason.into(),
                })
            }
            Match::Span { len, value } => {
                let value = match value {
                    SpanValue::Valid(v) => v,
                    SpanValue::OutOfRange(v) => {
                        return Err(Error::ValueRange {
                            value: i64::try_from(v).unwrap_or(i64::MAX),
                            offset: at,
                        })
                    }
                    SpanValue::Empty => {
                        return Err(Error::MalformedAnnotation {
                            offset: at,
                            reason: "empty marker body".into(),
                        })
                    }
                };
                spans.push(MarkerSpan {
                    start: at,
                    end: at + len,
                    value,
                });
                pos = at + len;
            }
        }
    }
    Ok(spans)
}
