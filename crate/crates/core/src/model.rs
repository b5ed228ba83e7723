//! Token, request and trace data model, plus the line-delimited trace format.
//!
//! A trace file holds one request per line:
//!
//! ```text
//! {"session_id":"s0","turn":0,"segments":[{"kind":"body","tokens":[1,2,3],"shared_id":null}]}
//! ```
//!
//! Token IDs are opaque `u32` values. Segment kinds are metadata for the
//! generators and analyzers; the serve engine only reads the flattened token
//! stream and the positions of `marker` segments.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Token = u32;

/// An ordered token sequence.
pub type TokenSeq = Vec<Token>;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: field `{field}`: token value {value} exceeds 2^32-1")]
    TokenRange {
        line: usize,
        field: String,
        value: u64,
    },
    #[error("line {line}: field `kind`: unknown segment kind `{kind}`")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: field `turn`: turn {turn} of session `{session}` does not follow turn {previous}")]
    TurnOrder {
        line: usize,
        session: String,
        turn: u64,
        previous: u64,
    },
    #[error("line {line}: field `tokens`: marker segment must be the canonical {expected}-token marker")]
    BadMarker { line: usize, expected: usize },
    #[error("i/o error reading trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentKind {
    System,
    Header,
    History,
    Tool,
    Doc,
    Marker,
    Body,
    Other,
}

impl SegmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::System => "system",
            SegmentKind::Header => "header",
            SegmentKind::History => "history",
            SegmentKind::Tool => "tool",
            SegmentKind::Doc => "doc",
            SegmentKind::Marker => "marker",
            SegmentKind::Body => "body",
            SegmentKind::Other => "other",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegmentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "system" => SegmentKind::System,
            "header" => SegmentKind::Header,
            "history" => SegmentKind::History,
            "tool" => SegmentKind::Tool,
            "doc" => SegmentKind::Doc,
            "marker" => SegmentKind::Marker,
            "body" => SegmentKind::Body,
            "other" => SegmentKind::Other,
            _ => return Err(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub tokens: TokenSeq,
    /// Names a region shared across requests, when the generator knows it.
    pub shared_id: Option<String>,
}

impl Segment {
    pub fn new(kind: SegmentKind, tokens: TokenSeq) -> Self {
        Self {
            kind,
            tokens,
            shared_id: None,
        }
    }

    pub fn shared(kind: SegmentKind, tokens: TokenSeq, shared_id: impl Into<String>) -> Self {
        Self {
            kind,
            tokens,
            shared_id: Some(shared_id.into()),
        }
    }

    /// The canonical marker segment.
    pub fn marker() -> Self {
        Self::shared(
            SegmentKind::Marker,
            crate::chunker::canonical_marker().to_vec(),
            "marker",
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub session_id: String,
    pub turn_index: u64,
    pub segments: Vec<Segment>,
}

impl Request {
    pub fn new(session_id: impl Into<String>, turn_index: u64, segments: Vec<Segment>) -> Self {
        Self {
            session_id: session_id.into(),
            turn_index,
            segments,
        }
    }

    /// Flattened token count.
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute `[start, end)` spans of every marker segment.
    pub fn marker_spans(&self) -> Vec<(usize, usize)> {
        let (_, offsets) = flatten(self);
        self.segments
            .iter()
            .zip(offsets)
            .filter(|(s, _)| s.kind == SegmentKind::Marker && !s.is_empty())
            .map(|(s, start)| (start, start + s.len()))
            .collect()
    }

    /// Copy of this request with every marker segment removed.
    pub fn without_markers(&self) -> Self {
        Self {
            session_id: self.session_id.clone(),
            turn_index: self.turn_index,
            segments: self
                .segments
                .iter()
                .filter(|s| s.kind != SegmentKind::Marker)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub requests: Vec<Request>,
}

impl Trace {
    pub fn new(requests: Vec<Request>) -> Self {
        Self { requests }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.requests.iter().map(Request::len).sum()
    }
}

/// Concatenates a request's segments and returns each segment's absolute start.
pub fn flatten(request: &Request) -> (TokenSeq, Vec<usize>) {
    let mut tokens = Vec::with_capacity(request.len());
    let mut offsets = Vec::with_capacity(request.segments.len());
    for seg in &request.segments {
        offsets.push(tokens.len());
        tokens.extend_from_slice(&seg.tokens);
    }
    (tokens, offsets)
}

// Wire records. Field order here is the canonical serialization order.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    kind: String,
    tokens: Vec<u64>,
    shared_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestRecord {
    session_id: String,
    turn: u64,
    segments: Vec<SegmentRecord>,
}

#[derive(Serialize)]
struct SegmentOut<'a> {
    kind: &'static str,
    tokens: &'a [Token],
    shared_id: &'a Option<String>,
}

#[derive(Serialize)]
struct RequestOut<'a> {
    session_id: &'a str,
    turn: u64,
    segments: Vec<SegmentOut<'a>>,
}

fn request_from_record(line: usize, rec: RequestRecord) -> Result<Request, TraceError> {
    let mut segments = Vec::with_capacity(rec.segments.len());
    for seg in rec.segments {
        let kind = seg
            .kind
            .parse::<SegmentKind>()
            .map_err(|kind| TraceError::UnknownKind { line, kind })?;
        let mut tokens = Vec::with_capacity(seg.tokens.len());
        for value in seg.tokens {
            let tok = Token::try_from(value).map_err(|_| TraceError::TokenRange {
                line,
                field: "tokens".to_string(),
                value,
            })?;
            tokens.push(tok);
        }
        if kind == SegmentKind::Marker && tokens != crate::chunker::canonical_marker() {
            return Err(TraceError::BadMarker {
                line,
                expected: crate::chunker::MARKER_LEN,
            });
        }
        segments.push(Segment {
            kind,
            tokens,
            shared_id: seg.shared_id,
        });
    }
    Ok(Request {
        session_id: rec.session_id,
        turn_index: rec.turn,
        segments,
    })
}

/// Parses a line-delimited trace. Blank lines are skipped.
pub fn parse_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    let mut requests = Vec::new();
    let mut last_turn: HashMap<String, u64> = HashMap::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RequestRecord =
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let req = request_from_record(line_no, rec)?;
        if let Some(&previous) = last_turn.get(&req.session_id) {
            if req.turn_index <= previous {
                return Err(TraceError::TurnOrder {
                    line: line_no,
                    session: req.session_id,
                    turn: req.turn_index,
                    previous,
                });
            }
        }
        last_turn.insert(req.session_id.clone(), req.turn_index);
        requests.push(req);
    }
    Ok(Trace { requests })
}

pub fn parse_trace_str(text: &str) -> Result<Trace, TraceError> {
    parse_trace(text.as_bytes())
}

/// Serializes one request as a single canonical JSON line (no trailing newline).
pub fn serialize_request(request: &Request) -> String {
    let out = RequestOut {
        session_id: &request.session_id,
        turn: request.turn_index,
        segments: request
            .segments
            .iter()
            .map(|s| SegmentOut {
                kind: s.kind.as_str(),
                tokens: &s.tokens,
                shared_id: &s.shared_id,
            })
            .collect(),
    };
    serde_json::to_string(&out).expect("trace records always serialize")
}

/// Serializes a trace: one canonical line per request, each newline-terminated.
pub fn serialize_trace(trace: &Trace) -> String {
    let mut out = String::new();
    for req in &trace.requests {
        out.push_str(&serialize_request(req));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(tokens: &[u32]) -> Segment {
        Segment::new(SegmentKind::Body, tokens.to_vec())
    }

    #[test]
    fn empty_stream_parses_to_empty_trace() {
        let t = parse_trace_str("").unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn single_request_round_trip() {
        let line = r#"{"session_id":"s","turn":0,"segments":[{"kind":"body","tokens":[1,2,3],"shared_id":null}]}"#;
        let t = parse_trace_str(line).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.requests[0].len(), 3);
        assert_eq!(serialize_trace(&t), format!("{line}\n"));
    }

    #[test]
    fn token_out_of_range_is_range_error() {
        let line = r#"{"session_id":"s","turn":0,"segments":[{"kind":"body","tokens":[4294967296],"shared_id":null}]}"#;
        match parse_trace_str(line) {
            Err(TraceError::TokenRange { line, value, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(value, 1 << 32);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let text = concat!(
            r#"{"session_id":"s","turn":0,"segments":[]}"#,
            "\n",
            r#"{"session_id":"s","turn":1,"segments":[],"extra":1}"#,
            "\n"
        );
        let err = parse_trace_str(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("line 2:"), "{msg}");
        assert!(msg.contains("extra"), "{msg}");

        let err = parse_trace_str(r#"{"session_id":"s","segments":[]}"#).unwrap_err();
        assert!(err.to_string().contains("turn"), "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        let line = r#"{"session_id":"s","turn":0,"segments":[{"kind":"blob","tokens":[],"shared_id":null}]}"#;
        assert!(matches!(
            parse_trace_str(line),
            Err(TraceError::UnknownKind { line: 1, .. })
        ));
    }

    #[test]
    fn turn_order_enforced_per_session() {
        let text = concat!(
            r#"{"session_id":"a","turn":1,"segments":[]}"#,
            "\n",
            r#"{"session_id":"b","turn":0,"segments":[]}"#,
            "\n",
            r#"{"session_id":"a","turn":1,"segments":[]}"#,
            "\n"
        );
        assert!(matches!(
            parse_trace_str(text),
            Err(TraceError::TurnOrder { line: 3, .. })
        ));
    }

    #[test]
    fn non_canonical_marker_rejected() {
        let line = r#"{"session_id":"s","turn":0,"segments":[{"kind":"marker","tokens":[1,2],"shared_id":null}]}"#;
        assert!(matches!(
            parse_trace_str(line),
            Err(TraceError::BadMarker { .. })
        ));
    }

    #[test]
    fn flatten_offsets_are_prefix_sums() {
        let req = Request::new("s", 0, vec![body(&[1, 2, 3, 4, 5]), body(&[6; 7])]);
        let (tokens, offsets) = flatten(&req);
        assert_eq!(tokens.len(), 12);
        assert_eq!(offsets, vec![0, 5]);

        let empty = Request::new("s", 0, vec![]);
        let (tokens, offsets) = flatten(&empty);
        assert!(tokens.is_empty() && offsets.is_empty());
    }

    #[test]
    fn marker_spans_and_stripping() {
        let req = Request::new("s", 0, vec![body(&[1; 10]), Segment::marker(), body(&[2; 5])]);
        assert_eq!(req.marker_spans(), vec![(10, 74)]);
        let stripped = req.without_markers();
        assert_eq!(stripped.len(), 15);
        assert!(stripped.marker_spans().is_empty());
    }
}
