//! Incremental `<progressbar>` parser for model output streams.
//!
//! Bytes are fed in arbitrary chunks. Text that cannot start a marker is
//! emitted immediately; a possible marker prefix is held back until it is
//! decided. A well-formed marker becomes a single [`StreamEvent::Progress`].
//! Malformed or out-of-range markers yield a warning and pass through as text,
//! so a live stream never stalls on a bad span.
//!
//! After [`coalesce`] (merging adjacent text events) the event stream does not
//! depend on how the input was chunked.

use serde::Serialize;

use crate::marker::{match_at, Match, SpanValue};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    Text(Vec<u8>),
    Progress {
        value: u8,
        /// Byte offset of the span in the stream.
        offset: u64,
        /// The span as it appeared in the input.
        raw: Vec<u8>,
    },
    Warning {
        message: String,
        offset: u64,
    },
    End,
}

#[derive(Debug, Default)]
pub struct StreamParser {
    pending: Vec<u8>,
    /// Stream offset of `pending[0]`.
    offset: u64,
    finished: bool,
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn feed(&mut self, chunk: &[u8]) -> Result<Vec<StreamEvent>> {
        if self.finished {
            return Err(Error::Data("stream parser already finished".into()));
        }
        self.pending.extend_from_slice(chunk);
        Ok(self.drain(false))
    }

    /// Flush buffered bytes and end the stream. Further calls return nothing.
    pub fn finish(&mut self) -> Vec<StreamEvent> {
        if self.finished {
            return Vec::new();
        }
        let mut events = self.drain(true);
        events.push(StreamEvent::End);
        self.finished = true;
        events
    }

    fn drain(&mut self, last: bool) -> Vec<StreamEvent> {
        let buf = &self.pending;
        let base = self.offset;
        let mut events = Vec::new();
        let mut text = Vec::new();
        let flush = |text: &mut Vec<u8>, events: &mut Vec<StreamEvent>| {
            if !text.is_empty() {
                events.push(StreamEvent::Text(std::mem::take(text)));
            }
        };
        let mut i = 0;
        while i < buf.len() {
            let Some(rel) = buf[i..].iter().position(|&b| b == b'<') else {
                text.extend_from_slice(&buf[i..]);
                i = buf.len();
                break;
            };
            let at = i + rel;
            text.extend_from_slice(&buf[i..at]);
            let offset = base + at as u64;
            match match_at(buf, at) {
                Match::NotMarker => {
                    text.push(b'<');
                    i = at + 1;
                }
                Match::Incomplete { opened } => {
                    if !last {
                        i = at;
                        break;
                    }
                    if opened {
                        flush(&mut text, &mut events);
                        events.push(StreamEvent::Warning {
                            message: "unterminated progress marker".into(),
                            offset,
                        });
                    }
                    text.extend_from_slice(&buf[at..]);
                    i = buf.len();
                }
                Match::Malformed { consumed, reason } => {
                    flush(&mut text, &mut events);
                    events.push(StreamEvent::Warning {
                        message: reason.into(),
                        offset,
                    });
                    text.extend_from_slice(&buf[at..at + consumed]);
                    i = at + consumed;
                }
                Match::Span { len, value } => {
                    flush(&mut text, &mut events);
                    let raw = buf[at..at + len].to_vec();
                    match value {
                        SpanValue::Valid(value) => events.push(StreamEvent::Progress { value, offset, raw }),
                        SpanValue::OutOfRange(v) => {
                            events.push(StreamEvent::Warning {
                                message: format!("progress value {v} outside [0, 100]"),
                                offset,
                            });
                            text = raw;
                        }
                        SpanValue::Empty => {
                            events.push(StreamEvent::Warning {
                                message: "empty progress marker".into(),
                                offset,
                            });
                            text = raw;
                        }
                    }
                    i = at + len;
                }
            }
        }
        flush(&mut text, &mut events);
        self.pending.drain(..i);
        self.offset += i as u64;
        events
    }
}

/// Parse a complete input in one call.
pub fn parse_all(input: &[u8]) -> Vec<StreamEvent> {
    let mut p = StreamParser::new();
    let mut events = p.feed(input).expect("fresh parser");
    events.extend(p.finish());
    events
}

/// Merge adjacent text events.
pub fn coalesce(events: impl IntoIterator<Item = StreamEvent>) -> Vec<StreamEvent> {
    let mut out: Vec<StreamEvent> = Vec::new();
    for e in events {
        match (out.last_mut(), e) {
            (Some(StreamEvent::Text(acc)), StreamEvent::Text(t)) => acc.extend_from_slice(&t),
            (_, e) => out.push(e),
        }
    }
    out
}

/// Input bytes rebuilt from text payloads and raw progress spans.
pub fn reconstruct(events: &[StreamEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        match e {
            StreamEvent::Text(t) => out.extend_from_slice(t),
            StreamEvent::Progress { raw, .. } => out.extend_from_slice(raw),
            _ => {}
        }
    }
    out
}

/// JSON form of an event, one per output line.
#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord<'a> {
    Text { text: &'a str },
    Progress { value: u8, offset: u64, raw: &'a str },
    Warning { message: &'a str, offset: u64 },
    End,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(s: &str) -> StreamEvent {
        StreamEvent::Text(s.as_bytes().to_vec())
    }

    #[test]
    fn plain_text() {
        let mut p = StreamParser::new();
        assert_eq!(p.feed(b"abc").unwrap(), vec![text("abc")]);
    }

    #[test]
    fn marker_split_across_chunks() {
        let mut p = StreamParser::new();
        assert_eq!(p.feed(b"x<progressb").unwrap(), vec![text("x")]);
        let events = p.feed(b"ar>42</progressbar>y").unwrap();
        assert_eq!(
            events,
            vec![
                StreamEvent::Progress {
                    value: 42,
                    offset: 1,
                    raw: b"<progressbar>42</progressbar>".to_vec()
                },
                text("y")
            ]
        );
        assert_eq!(p.finish(), vec![StreamEvent::End]);
    }

    #[test]
    fn out_of_range_passes_through() {
        let events = parse_all(b"<progressbar>200</progressbar>");
        assert!(matches!(events[0], StreamEvent::Warning { offset: 0, .. }));
        assert_eq!(events[1], text("<progressbar>200</progressbar>"));
        assert_eq!(events[2], StreamEvent::End);
    }

    #[test]
    fn finish_flushes_partial_prefix() {
        let mut p = StreamParser::new();
        assert!(p.feed(b"<progressb").unwrap().is_empty());
        assert_eq!(p.finish(), vec![text("<progressb"), StreamEvent::End]);
        assert!(p.feed(b"x").is_err());
        assert!(p.finish().is_empty());

        let mut p = StreamParser::new();
        assert_eq!(p.finish(), vec![StreamEvent::End]);
    }

    #[test]
    fn unterminated_marker_warns_at_end() {
        let events = parse_all(b"a<progressbar>4");
        assert_eq!(events[0], text("a"));
        assert!(matches!(events[1], StreamEvent::Warning { offset: 1, .. }));
        assert_eq!(events[2], text("<progressbar>4"));
    }

    #[test]
    fn broken_close_can_start_a_marker() {
        let events = coalesce(parse_all(b"<progressbar>4<progressbar>2</progressbar>"));
        assert!(matches!(events[0], StreamEvent::Warning { .. }));
        assert_eq!(events[1], text("<progressbar>4"));
        assert!(matches!(events[2], StreamEvent::Progress { value: 2, offset: 14, .. }));
    }

    #[test]
    fn byte_at_a_time_matches_whole() {
        let input = b"a <progressbar> 10 </progressbar> b <progressbar>x</progressbar><progressbar>100</progressbar><";
        let whole = coalesce(parse_all(input));
        let mut p = StreamParser::new();
        let mut events = Vec::new();
        for b in input {
            events.extend(p.feed(std::slice::from_ref(b)).unwrap());
        }
        events.extend(p.finish());
        assert_eq!(coalesce(events), whole);
        assert_eq!(reconstruct(&whole), input.to_vec());
    }
}
