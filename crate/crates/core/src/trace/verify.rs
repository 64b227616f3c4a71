//! Re-derivation of every numeric step of a trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    chain_lines, normalized_gt_anchor, step_kind_of, Chain, DisplayPrecision, ReasoningTrace, Role, TargetChain, Task,
    TEMPLATE_VERSION, TRACE_FORMAT_VERSION,
};
use crate::camera::{back_project, normalized_axis_to_absolute, CameraIntrinsics};
use crate::geometry::{box2d_center, Box2D, Box3D};
use crate::protocol::{parse_turn, AnswerBlock, Block, ToolInvocation, ToolOutcome, ToolResult};
use crate::reasoner::mean_depth;
use crate::scene::Scene;
use crate::tools::{DepthQuery, DepthSample, SpatialTools};

/// Full-precision tolerance for the answer block, in meters or radians.
const ANSWER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Structure,
    Anchor,
    AnchorRounding,
    ToolCalls,
    ToolPayload,
    BoxCenter,
    MeanDepth,
    Backprojection,
    AnswerConsistency,
}

impl StepKind {
    pub const ALL: [StepKind; 9] = [
        StepKind::Structure,
        StepKind::Anchor,
        StepKind::AnchorRounding,
        StepKind::ToolCalls,
        StepKind::ToolPayload,
        StepKind::BoxCenter,
        StepKind::MeanDepth,
        StepKind::Backprojection,
        StepKind::AnswerConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StepKind::Structure => "structure",
            StepKind::Anchor => "anchor",
            StepKind::AnchorRounding => "anchor_rounding",
            StepKind::ToolCalls => "tool_calls",
            StepKind::ToolPayload => "tool_payload",
            StepKind::BoxCenter => "box_center",
            StepKind::MeanDepth => "mean_depth",
            StepKind::Backprojection => "backprojection",
            StepKind::AnswerConsistency => "answer_consistency",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub line: Option<String>,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub kind: StepKind,
    pub checks: usize,
    pub failures: usize,
    pub first_divergence: Option<Divergence>,
}

impl StepCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scene_id: String,
    pub task: Task,
    pub passed: bool,
    pub steps: Vec<StepCheck>,
}

impl VerificationReport {
    /// First failing step in [`StepKind::ALL`] order.
    pub fn first_failure(&self) -> Option<&StepCheck> {
        self.steps.iter().find(|s| !s.passed())
    }
}

struct Recorder {
    steps: BTreeMap<StepKind, StepCheck>,
}

impl Recorder {
    fn new() -> Self {
        let steps = StepKind::ALL
            .iter()
            .map(|k| (*k, StepCheck { kind: *k, checks: 0, failures: 0, first_divergence: None }))
            .collect();
        Self { steps }
    }

    fn check(&mut self, kind: StepKind, ok: bool, div: impl FnOnce() -> Divergence) -> bool {
        let s = self.steps.get_mut(&kind).unwrap();
        s.checks += 1;
        if !ok {
            s.failures += 1;
            if s.first_divergence.is_none() {
                s.first_divergence = Some(div());
            }
        }
        ok
    }

    fn fail(&mut self, kind: StepKind, line: Option<&str>, expected: impl Into<String>, found: impl Into<String>) {
        self.check(kind, false, || Divergence {
            line: line.map(str::to_string),
            expected: expected.into(),
            found: found.into(),
        });
    }

    fn finish(self, trace: &ReasoningTrace) -> VerificationReport {
        let steps: Vec<StepCheck> = self.steps.into_values().collect();
        VerificationReport {
            scene_id: trace.scene_id.clone(),
            task: trace.task,
            passed: steps.iter().all(StepCheck::passed),
            steps,
        }
    }
}

/// A number as written: value and count of decimals.
#[derive(Debug, Clone, PartialEq)]
struct Num {
    value: f64,
    decimals: usize,
    raw: String,
}

#[derive(Debug, Clone, PartialEq)]
struct ParsedLine {
    name: String,
    index: Option<usize>,
    label: Option<String>,
    skeleton: String,
    numbers: Vec<Num>,
}

fn parse_head(head: &str) -> Option<(String, Option<usize>, Option<String>)> {
    let name_end = head.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(head.len());
    if name_end == 0 || !head.starts_with(|c: char| c.is_ascii_alphabetic()) {
        return None;
    }
    let name = head[..name_end].to_string();
    let mut rest = &head[name_end..];
    let mut index = None;
    if let Some(r) = rest.strip_prefix('[') {
        let close = r.find(']')?;
        let digits = &r[..close];
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        index = Some(digits.parse().ok()?);
        rest = &r[close + 1..];
    }
    let mut label = None;
    if !rest.is_empty() {
        let inner = rest.strip_prefix(" (")?.strip_suffix(')')?;
        label = Some(inner.to_string());
    }
    Some((name, index, label))
}

fn parse_rhs(rhs: &str) -> Result<(String, Vec<Num>), String> {
    let chars: Vec<char> = rhs.chars().collect();
    let mut skeleton = String::new();
    let mut numbers = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let starts_number = c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(char::is_ascii_digit));
        if starts_number {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let mut decimals = 0;
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                let frac = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                decimals = i - frac;
                if decimals == 0 {
                    return Err(format!("number without fraction digits at column {start}"));
                }
            }
            let raw: String = chars[start..i].iter().collect();
            let value = raw.parse::<f64>().map_err(|e| format!("bad number {raw:?}: {e}"))?;
            numbers.push(Num { value, decimals, raw });
            skeleton.push('#');
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphabetic() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            if word != "round" {
                return Err(format!("unexpected word {word:?}"));
            }
            skeleton.push_str(&word);
        } else if " +−×/()[],=".contains(c) {
            skeleton.push(c);
            i += 1;
        } else {
            return Err(format!("unexpected character {c:?}"));
        }
    }
    if numbers.is_empty() {
        return Err("no numeric value".into());
    }
    Ok((skeleton, numbers))
}

fn parse_eq_line(line: &str) -> Result<ParsedLine, String> {
    let (head, rhs) = line.split_once(" = ").ok_or("missing ' = ' separator")?;
    let (name, index, label) = parse_head(head).ok_or_else(|| format!("unparsable left-hand side {head:?}"))?;
    let (skeleton, numbers) = parse_rhs(rhs)?;
    Ok(ParsedLine { name, index, label, skeleton, numbers })
}

fn think_text(blocks: &[Block]) -> String {
    blocks
        .iter()
        .filter_map(|b| match b {
            Block::Think(t) => Some(t.as_str()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Typed view of a well-formed trace.
struct Parsed {
    think: [String; 3],
    intrinsics: CameraIntrinsics,
    queries: Vec<DepthQuery>,
    samples: Vec<Vec<DepthSample>>,
    answer: AnswerBlock,
}

fn parse_structure(trace: &ReasoningTrace) -> Result<Parsed, String> {
    if trace.format_version != TRACE_FORMAT_VERSION {
        return Err(format!("format_version {}", trace.format_version));
    }
    if trace.header.template_version != TEMPLATE_VERSION {
        return Err(format!("template_version {}", trace.header.template_version));
    }
    if trace.header.display != DisplayPrecision::default() {
        return Err(format!("unsupported display precision {:?}", trace.header.display));
    }
    if trace.header.estimator != "gt_oracle" {
        return Err(format!("unsupported estimator {:?}", trace.header.estimator));
    }
    let roles: Vec<Role> = trace.turns.iter().map(|t| t.role).collect();
    use Role::*;
    if roles != [System, User, Assistant, Tool, Assistant, Tool, Assistant] {
        return Err(format!("turn roles {roles:?}"));
    }
    let blocks: Vec<Vec<Block>> = trace.turns[2..]
        .iter()
        .enumerate()
        .map(|(i, t)| parse_turn(&t.content).map_err(|e| format!("turn {}: {e}", i + 2)))
        .collect::<Result<_, _>>()?;
    let answers = blocks.iter().flatten().filter(|b| matches!(b, Block::Answer(_))).count();
    if answers != 1 {
        return Err(format!("{answers} answer blocks"));
    }
    let (intr_id, depth) = match (&blocks[0][..], &blocks[2][..]) {
        ([Block::Think(_), Block::ToolCall(c1)], [Block::Think(_), Block::ToolCall(c2)]) => {
            match (&c1.invocation, &c2.invocation) {
                (ToolInvocation::CameraIntrinsics, ToolInvocation::DepthSampling { queries }) => {
                    ((c1.call_id.clone()), (c2.call_id.clone(), queries.clone()))
                }
                _ => return Err("expected camera_intrinsics then depth_sampling calls".into()),
            }
        }
        _ => return Err("assistant turns must hold a think block and one tool call".into()),
    };
    let intrinsics = match &blocks[1][..] {
        [Block::ToolResponse(r)] if r.call_id == intr_id => match &r.outcome {
            ToolOutcome::Result(ToolResult::Intrinsics(k)) => *k,
            o => return Err(format!("intrinsics response holds {o:?}")),
        },
        _ => return Err("turn 3 must be the response to the intrinsics call".into()),
    };
    let samples = match &blocks[3][..] {
        [Block::ToolResponse(r)] if r.call_id == depth.0 => match &r.outcome {
            ToolOutcome::Result(ToolResult::DepthSamples { samples }) => samples.clone(),
            o => return Err(format!("depth response holds {o:?}")),
        },
        _ => return Err("turn 5 must be the response to the depth call".into()),
    };
    let answer = match &blocks[4][..] {
        [Block::Think(_), Block::Answer(a)] => a.clone(),
        _ => return Err("final turn must hold a think block and the answer".into()),
    };
    Ok(Parsed {
        think: [think_text(&blocks[0]), think_text(&blocks[2]), think_text(&blocks[4])],
        intrinsics,
        queries: depth.1,
        samples,
        answer,
    })
}

fn recompute_chain(trace: &ReasoningTrace, scene: &Scene, p: &Parsed) -> Result<Chain, String> {
    let targets = &trace.header.targets;
    if targets.is_empty() {
        return Err("header lists no targets".into());
    }
    if trace.task == Task::Grounding {
        if targets.len() != 1 {
            return Err(format!("grounding trace with {} targets", targets.len()));
        }
        let expr = scene.record.expressions.iter().find(|e| e.instance_id == targets[0]).map(|e| &e.text);
        if expr != trace.header.expression.as_ref() {
            return Err(format!("expression {:?} does not match the scene's {expr:?}", trace.header.expression));
        }
    }
    if p.samples.len() != targets.len() {
        return Err(format!("{} sample lists for {} targets", p.samples.len(), targets.len()));
    }
    let meta = scene.meta();
    let mut out = Vec::new();
    for (&id, samples) in targets.iter().zip(&p.samples) {
        let inst = scene.record.instance(id).ok_or_else(|| format!("no instance {id} in scene"))?;
        let norm = normalized_gt_anchor(scene, id).map_err(|e| format!("instance {id}: {e}"))?;
        let extents = [meta.width, meta.height, meta.width, meta.height];
        let mut abs = [0i64; 4];
        for j in 0..4 {
            abs[j] = normalized_axis_to_absolute(norm[j] as f64, extents[j]).map_err(|e| e.to_string())?;
        }
        let b = Box2D::new(abs[0] as f64, abs[1] as f64, abs[2] as f64, abs[3] as f64).map_err(|e| e.to_string())?;
        let (u_c, v_c) = box2d_center(&b);
        let z_bar = mean_depth(samples).ok_or_else(|| format!("instance {id} has no depth samples"))?;
        let center = back_project(u_c, v_c, z_bar, &p.intrinsics).map_err(|e| e.to_string())?;
        let g = &inst.box3d;
        out.push(TargetChain {
            label: inst.category.clone(),
            norm,
            abs,
            u_c,
            v_c,
            samples: samples.clone(),
            z_bar,
            center,
            dims: g.dims(),
            angles: [g.yaw, g.pitch, g.roll],
        });
    }
    Ok(Chain { meta, k: p.intrinsics, targets: out })
}

fn check_lines(rec: &mut Recorder, p: &Parsed, chain: &Chain, tolerance_ulps: u32) {
    let expected = chain_lines(chain);
    let mut by_key: BTreeMap<(&str, Option<usize>), (usize, ParsedLine, &str)> = BTreeMap::new();
    for l in &expected {
        let parsed =
            parse_eq_line(&l.text).unwrap_or_else(|e| panic!("rendered line {:?} breaks the grammar: {e}", l.text));
        by_key.insert((l.name, l.index), (l.turn, parsed, &l.text));
    }
    let mut seen: BTreeMap<(String, Option<usize>), usize> = BTreeMap::new();
    for (turn, text) in p.think.iter().enumerate() {
        for line in text.lines().filter(|l| l.contains('=')) {
            let found = match parse_eq_line(line) {
                Ok(f) => f,
                Err(e) => {
                    rec.fail(StepKind::Structure, Some(line), "equation line", format!("unparsable: {e}"));
                    continue;
                }
            };
            let Some(kind) = step_kind_of(&found.name) else {
                rec.fail(StepKind::Structure, Some(line), "known quantity name", found.name.clone());
                continue;
            };
            let key = (found.name.as_str(), found.index);
            let Some((exp_turn, exp, exp_text)) = by_key.get(&key) else {
                rec.fail(StepKind::Structure, Some(line), "no such line", "unexpected equation line");
                continue;
            };
            *seen.entry((found.name.clone(), found.index)).or_default() += 1;
            if *exp_turn != turn {
                rec.fail(
                    StepKind::Structure,
                    Some(line),
                    format!("assistant turn {exp_turn}"),
                    format!("assistant turn {turn}"),
                );
                continue;
            }
            if found.label != exp.label {
                rec.fail(kind, Some(line), format!("{:?}", exp.label), format!("{:?}", found.label));
                continue;
            }
            if found.skeleton != exp.skeleton || found.numbers.len() != exp.numbers.len() {
                rec.fail(StepKind::Structure, Some(line), exp_text.to_string(), line);
                continue;
            }
            for (e, f) in exp.numbers.iter().zip(&found.numbers) {
                let allowed = tolerance_ulps as f64 * 10f64.powi(-(e.decimals as i32)) + 1e-12;
                let ok = (e.value - f.value).abs() <= allowed;
                if !rec.check(kind, ok, || Divergence {
                    line: Some(line.to_string()),
                    expected: e.raw.clone(),
                    found: f.raw.clone(),
                }) {
                    break;
                }
            }
        }
    }
    for l in &expected {
        match seen.get(&(l.name.to_string(), l.index)).copied().unwrap_or(0) {
            1 => {}
            0 => rec.fail(StepKind::Structure, None, l.text.clone(), "missing line"),
            n => rec.fail(StepKind::Structure, Some(&l.text), "exactly one occurrence", format!("{n} occurrences")),
        }
    }
}

fn check_answer(rec: &mut Recorder, p: &Parsed, chain: &Chain) {
    let kind = StepKind::AnswerConsistency;
    if p.answer.boxes.len() != chain.targets.len() {
        rec.fail(kind, None, format!("{} boxes", chain.targets.len()), format!("{} boxes", p.answer.boxes.len()));
        return;
    }
    for (i, (entry, t)) in p.answer.boxes.iter().zip(&chain.targets).enumerate() {
        let label_ok = entry.label.as_deref() == Some(t.label.as_str());
        rec.check(kind, label_ok, || Divergence {
            line: None,
            expected: format!("label {:?} for box {}", t.label, i + 1),
            found: format!("{:?}", entry.label),
        });
        let Ok(want) = Box3D::new(t.center, t.dims, t.angles) else {
            rec.fail(kind, None, "valid expected box", format!("{:?}", t));
            continue;
        };
        let (w, f) = (want.to_array(), entry.bbox_3d.to_array());
        let ok = w.iter().zip(&f).all(|(a, b)| (a - b).abs() <= ANSWER_TOLERANCE);
        rec.check(kind, ok, || Divergence {
            line: None,
            expected: format!("box {} = {w:?}", i + 1),
            found: format!("{f:?}"),
        });
    }
}

/// Checks a trace against its scene. `tolerance_ulps` is the allowed
/// difference of every displayed number in units of its last shown digit.
pub fn verify_trace(trace: &ReasoningTrace, scene: &Scene, tolerance_ulps: u32) -> VerificationReport {
    let mut rec = Recorder::new();
    if trace.scene_id != scene.id() {
        rec.fail(StepKind::Structure, None, scene.id(), trace.scene_id.clone());
        return rec.finish(trace);
    }
    let parsed = match parse_structure(trace) {
        Ok(p) => p,
        Err(e) => {
            rec.fail(StepKind::Structure, None, "well-formed trace", e);
            return rec.finish(trace);
        }
    };
    let chain = match recompute_chain(trace, scene, &parsed) {
        Ok(c) => c,
        Err(e) => {
            rec.fail(StepKind::Structure, None, "consistent targets", e);
            return rec.finish(trace);
        }
    };
    rec.check(StepKind::Structure, true, || unreachable!());

    let k = scene.intrinsics();
    rec.check(StepKind::ToolPayload, parsed.intrinsics == k, || Divergence {
        line: None,
        expected: format!("{k:?}"),
        found: format!("{:?}", parsed.intrinsics),
    });
    let want_queries: Vec<DepthQuery> = chain
        .targets
        .iter()
        .map(|t| DepthQuery {
            category: t.label.clone(),
            bbox_2d: Box2D::new(t.abs[0] as f64, t.abs[1] as f64, t.abs[2] as f64, t.abs[3] as f64)
                .expect("ordered box"),
        })
        .collect();
    rec.check(StepKind::ToolCalls, parsed.queries == want_queries, || Divergence {
        line: None,
        expected: serde_json::to_string(&want_queries).unwrap_or_default(),
        found: serde_json::to_string(&parsed.queries).unwrap_or_default(),
    });
    match SpatialTools::ground_truth().depth_sampling(scene, &want_queries, &trace.header.sampling) {
        Ok(s) => {
            rec.check(StepKind::ToolPayload, s == parsed.samples, || Divergence {
                line: None,
                expected: serde_json::to_string(&s).unwrap_or_default(),
                found: serde_json::to_string(&parsed.samples).unwrap_or_default(),
            });
        }
        Err(e) => rec.fail(StepKind::ToolPayload, None, "depth samples", e.to_string()),
    }
    check_lines(&mut rec, &parsed, &chain, tolerance_ulps);
    check_answer(&mut rec, &parsed, &chain);
    rec.finish(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::serialize_blocks;
    use crate::synthetic::synthetic_scene;
    use crate::tools::SamplingConfig;
    use crate::trace::build_trace;

    fn detection(seed: u64, idx: usize) -> (Scene, ReasoningTrace) {
        let scene = synthetic_scene(seed, idx);
        let ids: Vec<u32> = scene.record.instances.iter().map(|i| i.instance_id).collect();
        let t = build_trace(&scene, Task::Detection, &ids, &SamplingConfig::default()).unwrap();
        (scene, t)
    }

    #[test]
    fn built_trace_verifies() {
        let (scene, t) = detection(11, 2);
        let r = verify_trace(&t, &scene, 0);
        assert!(r.passed, "{r:#?}");
    }

    #[test]
    fn perturbed_x_fails_backprojection() {
        let (scene, mut t) = detection(11, 2);
        let content = t.turns[6].content.clone();
        let start = content.find("X[1] = ").unwrap();
        let end = start + content[start..].find('\n').unwrap();
        let line = &content[start..end];
        let (lhs, value) = line.rsplit_once(" = ").unwrap();
        let bumped = format!("{lhs} = {}", crate::trace::fmt_meters(value.parse::<f64>().unwrap() + 0.05));
        t.turns[6].content = content.replacen(line, &bumped, 1);
        let r = verify_trace(&t, &scene, 0);
        assert!(!r.passed);
        let s = r.first_failure().unwrap();
        assert_eq!(s.kind, StepKind::Backprojection);
        let d = s.first_divergence.as_ref().unwrap();
        assert_eq!(d.expected, value);
        assert_ne!(d.found, d.expected);
    }

    #[test]
    fn answer_center_mismatch_fails() {
        let (scene, mut t) = detection(11, 2);
        let mut blocks = parse_turn(&t.turns[6].content).unwrap();
        let Block::Answer(a) = &mut blocks[1] else { panic!() };
        a.boxes[0].bbox_3d.center.x += 0.001;
        t.turns[6].content = serialize_blocks(&blocks);
        let r = verify_trace(&t, &scene, 0);
        assert_eq!(r.first_failure().unwrap().kind, StepKind::AnswerConsistency);
    }

    #[test]
    fn tolerance_absorbs_last_digit() {
        let (scene, mut t) = detection(11, 2);
        let content = t.turns[6].content.clone();
        let start = content.find("Z[1] = ").unwrap();
        let end = start + content[start..].find('\n').unwrap();
        let value: f64 = content[start + 7..end].parse().unwrap();
        let line = format!("Z[1] = {}", crate::trace::fmt_meters(value + 0.01));
        t.turns[6].content = content.replacen(&content[start..end], &line, 1);
        assert!(!verify_trace(&t, &scene, 0).passed);
        assert!(verify_trace(&t, &scene, 1).passed);
    }

    #[test]
    fn unparsable_line_is_structural() {
        let (scene, mut t) = detection(11, 2);
        t.turns[6].content = t.turns[6].content.replacen("Step 4:", "Step 4: Z = deep\n", 1);
        let r = verify_trace(&t, &scene, 0);
        let s = r.first_failure().unwrap();
        assert_eq!(s.kind, StepKind::Structure);
        assert_eq!(s.first_divergence.as_ref().unwrap().line.as_deref(), Some("Step 4: Z = deep"));
    }

    #[test]
    fn line_grammar() {
        let p = parse_eq_line("X[2] = (373.50 − 160) × 2.04 / 250 = -1.74").unwrap();
        assert_eq!(p.name, "X");
        assert_eq!(p.index, Some(2));
        assert_eq!(p.skeleton, "(# − #) × # / # = #");
        assert_eq!(p.numbers.iter().map(|n| n.value).collect::<Vec<_>>(), vec![373.5, 160.0, 2.04, 250.0, -1.74]);
        let b = parse_eq_line("box_norm[1] (trash can) = [1, 2, 3, 4]").unwrap();
        assert_eq!(b.label.as_deref(), Some("trash can"));
        assert!(parse_eq_line("X = 1.").is_err());
        assert!(parse_eq_line("X = sqrt(2)").is_err());
        assert!(parse_eq_line("X[a] = 1").is_err());
    }
}
