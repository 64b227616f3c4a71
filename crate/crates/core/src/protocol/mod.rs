//! Multi-turn transcript grammar and the tool dispatch wire format.
//!
//! A transcript fragment is a sequence of blocks separated by whitespace:
//!
//! ```text
//! <think>free text</think>
//! <tool_call>{"call_id":"1","tool_name":"camera_intrinsics","arguments":{}}</tool_call>
//! <tool_response>{"call_id":"1","result":{"fx":500.0,"fy":500.0,"cx":320.0,"cy":240.0}}</tool_response>
//! <answer>[{"label":"chair","bbox_3d":[0.4,0.0,2.0,1.0,1.0,1.0,0.0,0.0,0.0]}]</answer>
//! ```
//!
//! Tags are exact lowercase. `tool_call`, `tool_response` and `answer`
//! payloads are strict JSON; `think` payloads are kept verbatim up to the
//! first `</think>`. The canonical serialization has no whitespace inside
//! tags and one newline between blocks.

pub mod server;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::geometry::Box3D;
use crate::tools::{DepthQuery, DepthSample};

pub const CAMERA_INTRINSICS_TOOL: &str = "camera_intrinsics";
pub const DEPTH_SAMPLING_TOOL: &str = "depth_sampling";

/// The tool a call invokes, with its validated arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolInvocation {
    CameraIntrinsics,
    DepthSampling { queries: Vec<DepthQuery> },
}

impl ToolInvocation {
    pub fn tool_name(&self) -> &'static str {
        match self {
            Self::CameraIntrinsics => CAMERA_INTRINSICS_TOOL,
            Self::DepthSampling { .. } => DEPTH_SAMPLING_TOOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub call_id: String,
    pub invocation: ToolInvocation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthArgs {
    queries: Vec<DepthQuery>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptyArgs {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCall {
    call_id: String,
    tool_name: String,
    arguments: Value,
}

/// Reason a JSON payload is not a valid tool call.
#[derive(Debug)]
enum CallError {
    UnknownTool(String),
    Schema(String),
}

impl ToolCall {
    fn from_value(v: Value) -> Result<Self, CallError> {
        let raw: RawCall = serde_json::from_value(v).map_err(|e| CallError::Schema(e.to_string()))?;
        let invocation = match raw.tool_name.as_str() {
            CAMERA_INTRINSICS_TOOL => {
                serde_json::from_value::<EmptyArgs>(raw.arguments)
                    .map_err(|e| CallError::Schema(format!("camera_intrinsics arguments: {e}")))?;
                ToolInvocation::CameraIntrinsics
            }
            DEPTH_SAMPLING_TOOL => {
                let args: DepthArgs = serde_json::from_value(raw.arguments)
                    .map_err(|e| CallError::Schema(format!("depth_sampling arguments: {e}")))?;
                ToolInvocation::DepthSampling { queries: args.queries }
            }
            other => return Err(CallError::UnknownTool(other.to_string())),
        };
        Ok(Self { call_id: raw.call_id, invocation })
    }
}

impl Serialize for ToolCall {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(3))?;
        m.serialize_entry("call_id", &self.call_id)?;
        m.serialize_entry("tool_name", self.invocation.tool_name())?;
        match &self.invocation {
            ToolInvocation::CameraIntrinsics => m.serialize_entry("arguments", &serde_json::Map::new())?,
            ToolInvocation::DepthSampling { queries } => {
                m.serialize_entry("arguments", &DepthArgs { queries: queries.clone() })?
            }
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ToolCall {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        ToolCall::from_value(v).map_err(|e| match e {
            CallError::UnknownTool(t) => D::Error::custom(format!("unknown tool_name {t:?}")),
            CallError::Schema(m) => D::Error::custom(m),
        })
    }
}

/// Successful tool payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolResult {
    Intrinsics(CameraIntrinsics),
    DepthSamples { samples: Vec<Vec<DepthSample>> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolFailure {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToolOutcome {
    Result(ToolResult),
    Error(ToolFailure),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResponse {
    pub call_id: String,
    pub outcome: ToolOutcome,
}

impl ToolResponse {
    pub fn ok(call_id: impl Into<String>, result: ToolResult) -> Self {
        Self { call_id: call_id.into(), outcome: ToolOutcome::Result(result) }
    }

    pub fn error(call_id: impl Into<String>, kind: &str, message: impl Into<String>) -> Self {
        Self {
            call_id: call_id.into(),
            outcome: ToolOutcome::Error(ToolFailure { kind: kind.into(), message: message.into() }),
        }
    }

    pub fn result(&self) -> Option<&ToolResult> {
        match &self.outcome {
            ToolOutcome::Result(r) => Some(r),
            ToolOutcome::Error(_) => None,
        }
    }
}

impl Serialize for ToolResponse {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(2))?;
        m.serialize_entry("call_id", &self.call_id)?;
        match &self.outcome {
            ToolOutcome::Result(r) => m.serialize_entry("result", r)?,
            ToolOutcome::Error(e) => m.serialize_entry("error", e)?,
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ToolResponse {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            call_id: String,
            #[serde(default)]
            result: Option<ToolResult>,
            #[serde(default)]
            error: Option<ToolFailure>,
        }
        let raw = Raw::deserialize(d)?;
        let outcome = match (raw.result, raw.error) {
            (Some(r), None) => ToolOutcome::Result(r),
            (None, Some(e)) => ToolOutcome::Error(e),
            _ => return Err(D::Error::custom("exactly one of result/error must be present")),
        };
        Ok(Self { call_id: raw.call_id, outcome })
    }
}

/// One answered box; `label` names a category or instance reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerEntry {
    pub label: Option<String>,
    pub bbox_3d: Box3D,
}

impl Serialize for AnswerEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(None)?;
        if let Some(l) = &self.label {
            m.serialize_entry("label", l)?;
        }
        m.serialize_entry("bbox_3d", &self.bbox_3d)?;
        m.end()
    }
}

impl<'de> Deserialize<'de> for AnswerEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bare(Box3D),
            Labeled {
                #[serde(default)]
                label: Option<String>,
                bbox_3d: Box3D,
            },
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Bare(b) => AnswerEntry { label: None, bbox_3d: b },
            Raw::Labeled { label, bbox_3d } => AnswerEntry { label, bbox_3d },
        })
    }
}

/// Final JSON list of 9-DoF boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerBlock {
    pub boxes: Vec<AnswerEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Think(String),
    ToolCall(ToolCall),
    ToolResponse(ToolResponse),
    Answer(AnswerBlock),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseErrorKind {
    #[error("unbalanced tag <{0}>")]
    UnbalancedTag(String),
    #[error("unknown tag <{0}>")]
    UnknownTag(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("unknown tool_name {0:?}")]
    UnknownTool(String),
    #[error("text outside of a block")]
    StrayText,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

fn err(offset: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { offset, kind }
}

#[derive(Clone, Copy)]
enum Tag {
    Think,
    ToolCall,
    ToolResponse,
    Answer,
}

impl Tag {
    fn parse(name: &str) -> Option<Tag> {
        match name {
            "think" => Some(Tag::Think),
            "tool_call" => Some(Tag::ToolCall),
            "tool_response" => Some(Tag::ToolResponse),
            "answer" => Some(Tag::Answer),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::ToolCall => "tool_call",
            Tag::ToolResponse => "tool_response",
            Tag::Answer => "answer",
        }
    }
}

fn skip_ws(text: &str, mut pos: usize) -> usize {
    while let Some(c) = text[pos..].chars().next() {
        if !c.is_whitespace() {
            break;
        }
        pos += c.len_utf8();
    }
    pos
}

/// Splits a transcript fragment into typed blocks.
pub fn parse_turn(text: &str) -> Result<Vec<Block>, ParseError> {
    let mut blocks = Vec::new();
    let mut pos = skip_ws(text, 0);
    while pos < text.len() {
        let rest = &text[pos..];
        if !rest.starts_with('<') {
            return Err(err(pos, ParseErrorKind::StrayText));
        }
        let close = rest.find('>').ok_or_else(|| err(pos, ParseErrorKind::StrayText))?;
        let name = &rest[1..close];
        if let Some(stripped) = name.strip_prefix('/') {
            return Err(err(pos, ParseErrorKind::UnbalancedTag(stripped.to_string())));
        }
        let tag = Tag::parse(name).ok_or_else(|| err(pos, ParseErrorKind::UnknownTag(name.to_string())))?;
        let body = pos + close + 1;
        let end_tag = format!("</{}>", tag.name());
        let (block, next) = match tag {
            Tag::Think => {
                let len = text[body..]
                    .find(&end_tag)
                    .ok_or_else(|| err(pos, ParseErrorKind::UnbalancedTag(tag.name().into())))?;
                (Block::Think(text[body..body + len].to_string()), body + len + end_tag.len())
            }
            _ => {
                let start = skip_ws(text, body);
                let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
                let value = match stream.next() {
                    Some(Ok(v)) => v,
                    Some(Err(e)) => return Err(err(start, ParseErrorKind::MalformedPayload(e.to_string()))),
                    None => return Err(err(start, ParseErrorKind::MalformedPayload("empty payload".into()))),
                };
                let after = skip_ws(text, start + stream.byte_offset());
                if !text[after..].starts_with(&end_tag) {
                    return Err(err(pos, ParseErrorKind::UnbalancedTag(tag.name().into())));
                }
                let malformed = |m: String| err(start, ParseErrorKind::MalformedPayload(m));
                let block = match tag {
                    Tag::ToolCall => Block::ToolCall(ToolCall::from_value(value).map_err(|e| match e {
                        CallError::UnknownTool(t) => err(start, ParseErrorKind::UnknownTool(t)),
                        CallError::Schema(m) => malformed(m),
                    })?),
                    Tag::ToolResponse => {
                        Block::ToolResponse(serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?)
                    }
                    Tag::Answer => Block::Answer(serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?),
                    Tag::Think => unreachable!(),
                };
                (block, after + end_tag.len())
            }
        };
        blocks.push(block);
        pos = skip_ws(text, next);
    }
    Ok(blocks)
}

/// Canonical serialization; the inverse of [`parse_turn`].
pub fn serialize_blocks(blocks: &[Block]) -> String {
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let (tag, payload) = match b {
            Block::Think(t) => ("think", t.clone()),
            Block::ToolCall(c) => ("tool_call", to_json(c)),
            Block::ToolResponse(r) => ("tool_response", to_json(r)),
            Block::Answer(a) => ("answer", to_json(a)),
        };
        out.push('<');
        out.push_str(tag);
        out.push('>');
        out.push_str(&payload);
        out.push_str("</");
        out.push_str(tag);
        out.push('>');
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("protocol values serialize infallibly")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Point3D;
    use crate::geometry::Box2D;
    use proptest::prelude::*;

    #[test]
    fn minimal_call() {
        let text = r#"<tool_call>{"call_id":"1","tool_name":"camera_intrinsics","arguments":{}}</tool_call>"#;
        let blocks = parse_turn(text).unwrap();
        assert_eq!(
            blocks,
            vec![Block::ToolCall(ToolCall { call_id: "1".into(), invocation: ToolInvocation::CameraIntrinsics })]
        );
        assert_eq!(serialize_blocks(&blocks), text);
    }

    #[test]
    fn malformed_payload_offset() {
        let e = parse_turn("<tool_call>{bad").unwrap_err();
        assert_eq!(e.offset, 11);
        assert!(matches!(e.kind, ParseErrorKind::MalformedPayload(_)));
    }

    #[test]
    fn error_kinds() {
        let e = parse_turn("<think>abc").unwrap_err();
        assert_eq!(e, err(0, ParseErrorKind::UnbalancedTag("think".into())));
        let e = parse_turn("  <foo>x</foo>").unwrap_err();
        assert_eq!(e, err(2, ParseErrorKind::UnknownTag("foo".into())));
        let e = parse_turn("<Think>x</Think>").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::UnknownTag(_)));
        let e =
            parse_turn(r#"<tool_call>{"call_id":"1","tool_name":"teleport","arguments":{}}</tool_call>"#).unwrap_err();
        assert_eq!(e, err(11, ParseErrorKind::UnknownTool("teleport".into())));
        let e = parse_turn(r#"<answer>[]"#).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::UnbalancedTag(_)));
        let e = parse_turn("hello <think>x</think>").unwrap_err();
        assert_eq!(e, err(0, ParseErrorKind::StrayText));
        let e = parse_turn("</think>").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::UnbalancedTag(_)));
        let e =
            parse_turn(r#"<tool_call>{"call_id":"1","tool_name":"camera_intrinsics","arguments":{"x":1}}</tool_call>"#)
                .unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::MalformedPayload(_)));
    }

    #[test]
    fn response_needs_exactly_one_outcome() {
        let both = r#"<tool_response>{"call_id":"1","result":{"samples":[]},"error":{"kind":"x","message":"y"}}</tool_response>"#;
        assert!(parse_turn(both).is_err());
        let neither = r#"<tool_response>{"call_id":"1"}</tool_response>"#;
        assert!(parse_turn(neither).is_err());
    }

    #[test]
    fn answer_accepts_bare_arrays() {
        let blocks = parse_turn("<answer>[[1,2,3,1,1,1,0,0,0]]</answer>").unwrap();
        let Block::Answer(a) = &blocks[0] else { panic!() };
        assert_eq!(a.boxes[0].label, None);
        assert_eq!(a.boxes[0].bbox_3d.center, Point3D::new(1.0, 2.0, 3.0));
        assert_eq!(
            serialize_blocks(&blocks),
            r#"<answer>[{"bbox_3d":[1.0,2.0,3.0,1.0,1.0,1.0,0.0,0.0,0.0]}]</answer>"#
        );
    }

    #[test]
    fn empty_and_single_answer() {
        assert_eq!(serialize_blocks(&[]), "");
        let b = Box3D::axis_aligned(Point3D::new(0.4, 0.0, 2.0), [1.0; 3]).unwrap();
        let blocks =
            [Block::Answer(AnswerBlock { boxes: vec![AnswerEntry { label: Some("chair".into()), bbox_3d: b }] })];
        assert_eq!(
            serialize_blocks(&blocks),
            r#"<answer>[{"label":"chair","bbox_3d":[0.4,0.0,2.0,1.0,1.0,1.0,0.0,0.0,0.0]}]</answer>"#
        );
    }

    #[test]
    fn four_block_fragment_matches_golden() {
        let golden = include_str!("../../tests/fixtures/four_blocks.txt").trim_end_matches('\n');
        let blocks = parse_turn(golden).unwrap();
        assert_eq!(blocks.len(), 4);
        assert!(matches!(blocks[0], Block::Think(_)));
        assert!(matches!(blocks[1], Block::ToolCall(_)));
        assert!(matches!(blocks[2], Block::ToolResponse(_)));
        assert!(matches!(blocks[3], Block::Answer(_)));
        assert_eq!(serialize_blocks(&blocks), golden);
    }

    #[test]
    fn think_is_verbatim() {
        let text = "<think>  a <b> </thin\n</think>";
        let blocks = parse_turn(text).unwrap();
        assert_eq!(blocks, vec![Block::Think("  a <b> </thin\n".into())]);
    }

    pub(crate) fn arb_block() -> impl Strategy<Value = Block> {
        let finite = || -50.0f64..50.0;
        let id = "[a-z0-9_-]{1,8}";
        let think = "[ -~\n\t×−é]{0,40}"
            .prop_filter("no closing tag", |s: &String| !s.contains("</think>"))
            .prop_map(Block::Think);
        let bbox = (0.0f64..500.0, 0.0f64..500.0, 0.0f64..100.0, 0.0f64..100.0)
            .prop_map(|(u, v, w, h)| Box2D::new(u, v, u + w, v + h).unwrap());
        let query = ("[a-z ]{1,10}", bbox).prop_map(|(category, bbox_2d)| DepthQuery { category, bbox_2d });
        let call = (id, prop::collection::vec(query, 0..4), any::<bool>()).prop_map(|(call_id, queries, cam)| {
            let invocation =
                if cam { ToolInvocation::CameraIntrinsics } else { ToolInvocation::DepthSampling { queries } };
            Block::ToolCall(ToolCall { call_id, invocation })
        });
        let sample =
            (0u32..2000, 0u32..2000, 0.0f64..20.0).prop_map(|(u, v, z)| DepthSample { u: u as f64, v: v as f64, z });
        let samples = prop::collection::vec(prop::collection::vec(sample, 0..5), 0..3);
        let k = (1.0f64..2000.0, 1.0f64..2000.0, -10.0f64..2000.0, -10.0f64..2000.0)
            .prop_map(|(fx, fy, cx, cy)| CameraIntrinsics::new(fx, fy, cx, cy).unwrap());
        let result = prop_oneof![
            samples.prop_map(|samples| ToolOutcome::Result(ToolResult::DepthSamples { samples })),
            k.prop_map(|k| ToolOutcome::Result(ToolResult::Intrinsics(k))),
            ("[a-z_]{1,12}", "[ -~]{0,20}")
                .prop_map(|(kind, message)| ToolOutcome::Error(ToolFailure { kind, message })),
        ];
        let response =
            (id, result).prop_map(|(call_id, outcome)| Block::ToolResponse(ToolResponse { call_id, outcome }));
        let entry = (
            prop::option::of("[a-z]{1,8}"),
            (finite(), finite(), finite()),
            (0.01f64..5.0, 0.01f64..5.0, 0.01f64..5.0),
            (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0),
        )
            .prop_map(|(label, (x, y, z), (l, w, h), (a, b, c))| AnswerEntry {
                label,
                bbox_3d: Box3D::new(Point3D::new(x, y, z), [l, w, h], [a, b, c]).unwrap(),
            });
        let answer = prop::collection::vec(entry, 0..4).prop_map(|boxes| Block::Answer(AnswerBlock { boxes }));
        prop_oneof![think, call, response, answer]
    }

    proptest! {
        #[test]
        fn round_trip(blocks in prop::collection::vec(arb_block(), 0..6)) {
            let text = serialize_blocks(&blocks);
            let back = parse_turn(&text).unwrap();
            prop_assert_eq!(&back, &blocks);
            prop_assert_eq!(serialize_blocks(&back), text);
        }
    }

    #[test]
    fn depth_call_shape() {
        let call = ToolCall {
            call_id: "2".into(),
            invocation: ToolInvocation::DepthSampling {
                queries: vec![DepthQuery {
                    category: "chair".into(),
                    bbox_2d: Box2D::new(370.0, 190.0, 470.0, 290.0).unwrap(),
                }],
            },
        };
        assert_eq!(
            to_json(&call),
            r#"{"call_id":"2","tool_name":"depth_sampling","arguments":{"queries":[{"category":"chair","bbox_2d":[370,190,470,290]}]}}"#
        );
    }
}
