//! Progress-annotated corpus construction.
//!
//! A trace is split into segments, a `<progressbar>a_i</progressbar>` marker
//! is appended after each segment with `a_i` the floored cumulative share of
//! tokens, prior markers can be masked out on a cosine schedule, and every
//! token gets a loss weight (`gamma` inside marker spans, 1 elsewhere).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::marker::{self, MarkerSpan};
use crate::trace::{count_tokens, extract_annotations, ProgressAnnotation, ReasoningTrace, TokenCounter};
use crate::{Error, Result};

/// Loss weight for marker tokens used in the reference training setup.
pub const DEFAULT_GAMMA: f64 = 5.0;
pub const DEFAULT_RHO_MAX: f64 = 0.5;

/// Ordered spans whose concatenation is the source text; each holds at least
/// one whitespace token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    segments: Vec<String>,
}

impl Segmentation {
    pub fn new(segments: Vec<String>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Empty("segmentation has no segments".into()));
        }
        if let Some(i) = segments.iter().position(|s| count_tokens(s) == 0) {
            return Err(Error::Data(format!("segment {i} has no tokens")));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn lengths(&self) -> Vec<u64> {
        self.segments.iter().map(|s| count_tokens(s)).collect()
    }

    pub fn text(&self) -> String {
        self.segments.concat()
    }
}

pub trait Segmenter {
    fn segment(&self, text: &str) -> Result<Segmentation>;
}

/// Splits at blank-line paragraph breaks. The break belongs to the segment
/// before it, so segments concatenate back to the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlankLineSegmenter;

impl Segmenter for BlankLineSegmenter {
    fn segment(&self, text: &str) -> Result<Segmentation> {
        if text.is_empty() {
            return Err(Error::Empty("cannot segment empty text".into()));
        }
        let mut segments = Vec::new();
        let mut current = String::new();
        let mut has_content = false;
        let mut in_break = false;
        for line in text.split_inclusive('\n') {
            let blank = line.trim().is_empty();
            if blank {
                // A blank line only breaks once the previous line has ended.
                if has_content && current.ends_with('\n') {
                    in_break = true;
                }
            } else if in_break {
                segments.push(std::mem::take(&mut current));
                in_break = false;
            }
            if !blank {
                has_content = true;
            }
            current.push_str(line);
        }
        if !has_content {
            return Err(Error::Empty("text has no tokens".into()));
        }
        segments.push(current);
        Segmentation::new(segments)
    }
}

pub fn segment(reasoning: &str) -> Result<Segmentation> {
    BlankLineSegmenter.segment(reasoning)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotated {
    pub text: String,
    pub annotations: Vec<ProgressAnnotation>,
}

/// Append one marker after every segment with value
/// `floor(100 * cumulative_tokens / total_tokens)`.
pub fn insert_annotations(seg: &Segmentation) -> Annotated {
    let lengths = seg.lengths();
    let total: u64 = lengths.iter().sum();
    let mut text = String::new();
    let mut counter = TokenCounter::default();
    let mut cumulative = 0u64;
    let mut annotations = Vec::with_capacity(lengths.len());
    for (piece, len) in seg.segments().iter().zip(&lengths) {
        cumulative += len;
        let value = (100 * u128::from(cumulative) / u128::from(total)) as u8;
        text.push_str(piece);
        counter.push(piece);
        text.push_str(&marker::render(value));
        annotations.push(ProgressAnnotation {
            position_k: counter.count(),
            value,
        });
    }
    Annotated { text, annotations }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingSchedule {
    pub total_steps: u64,
    pub rho_max: f64,
}

impl MaskingSchedule {
    pub fn new(total_steps: u64, rho_max: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Range("total_steps 0".into()));
        }
        if !(0.0..=1.0).contains(&rho_max) {
            return Err(Error::Range(format!("rho_max {rho_max}")));
        }
        Ok(Self {
            total_steps,
            rho_max,
        })
    }

    pub fn rho(&self, step: u64) -> Result<f64> {
        cosine_rho(step, self)
    }
}

/// `rho(t) = rho_max / 2 * (1 - cos(pi * t / (T - 1)))`; `rho_max` when `T = 1`.
pub fn cosine_rho(step: u64, sched: &MaskingSchedule) -> Result<f64> {
    if step >= sched.total_steps {
        return Err(Error::Range(format!(
            "step {step} of {}",
            sched.total_steps
        )));
    }
    if sched.total_steps == 1 {
        return Ok(sched.rho_max);
    }
    if step == sched.total_steps - 1 {
        return Ok(sched.rho_max);
    }
    let t = step as f64 / (sched.total_steps - 1) as f64;
    Ok(0.5 * sched.rho_max * (1.0 - (std::f64::consts::PI * t).cos()))
}

/// Which marker spans may be dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// All spans except the last, which stays as the prediction target.
    #[default]
    KeepFinal,
    AllSpans,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskOutcome {
    pub text: String,
    pub eligible: usize,
    pub removed: usize,
}

/// Drop each eligible marker span independently with probability `rho`.
///
/// One uniform draw is taken per eligible span, in text order, from a
/// ChaCha8 stream seeded with `seed`.
pub fn mask_annotations(annotated: &str, rho: f64, seed: u64, policy: MaskPolicy) -> Result<MaskOutcome> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Range(format!("rho {rho}")));
    }
    let spans = marker::find_spans(annotated)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = spans.len().checked_sub(1);
    let mut text = String::with_capacity(annotated.len());
    let mut cursor = 0;
    let mut eligible = 0;
    let mut removed = 0;
    for (i, span) in spans.iter().enumerate() {
        if policy == MaskPolicy::KeepFinal && Some(i) == last {
            continue;
        }
        eligible += 1;
        if rng.random::<f64>() < rho {
            text.push_str(&annotated[cursor..span.start]);
            cursor = span.end;
            removed += 1;
        }
    }
    text.push_str(&annotated[cursor..]);
    Ok(MaskOutcome {
        text,
        eligible,
        removed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedToken {
    pub text: String,
    pub in_annotation: bool,
}

/// Whitespace tokens of marker-free text; each marker contributes three
/// tokens (opening delimiter, value, closing delimiter).
pub fn tokenize_annotated(text: &str) -> Result<Vec<AnnotatedToken>> {
    let spans = marker::find_spans(text)?;
    let mut tokens = Vec::new();
    let plain = |s: &str, out: &mut Vec<AnnotatedToken>| {
        out.extend(s.split_whitespace().map(|w| AnnotatedToken {
            text: w.to_string(),
            in_annotation: false,
        }))
    };
    let mut cursor = 0;
    for MarkerSpan { start, end, .. } in spans {
        plain(&text[cursor..start], &mut tokens);
        let inner = &text[start + marker::OPEN.len()..end - marker::CLOSE.len()];
        for part in [
            std::str::from_utf8(marker::OPEN).unwrap(),
            inner.trim(),
            std::str::from_utf8(marker::CLOSE).unwrap(),
        ] {
            tokens.push(AnnotatedToken {
                text: part.to_string(),
                in_annotation: true,
            });
        }
        cursor = end;
    }
    plain(&text[cursor..], &mut tokens);
    Ok(tokens)
}

/// `w_i = 1 + (gamma - 1) * [token i is inside a marker span]`.
pub fn loss_weights(tokens: &[AnnotatedToken], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(Error::Range(format!("gamma {gamma}")));
    }
    Ok(tokens
        .iter()
        .map(|t| if t.in_annotation { gamma } else { 1.0 })
        .collect())
}

/// One line of the annotated-corpus JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    #[serde(flatten)]
    pub trace: ReasoningTrace,
    pub annotations: Vec<ProgressAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<Vec<f64>>,
}

/// Strip any existing markers from `trace`, segment it and insert fresh ones.
pub fn annotate_trace(
    trace: &ReasoningTrace,
    segmenter: &dyn Segmenter,
    gamma: Option<f64>,
) -> Result<AnnotatedRecord> {
    let clean = extract_annotations(&trace.reasoning)?.clean_text;
    let seg = segmenter.segment(&clean)?;
    let annotated = insert_annotations(&seg);
    let loss_weights = gamma
        .map(|g| loss_weights(&tokenize_annotated(&annotated.text)?, g))
        .transpose()?;
    let mut out = trace.clone();
    out.reasoning = annotated.text;
    Ok(AnnotatedRecord {
        trace: out,
        annotations: annotated.annotations,
        loss_weights,
    })
}
