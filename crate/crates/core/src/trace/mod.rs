//! Multi-turn reasoning traces with machine-checkable equation lines.
//!
//! A trace is `system, user, assistant, tool, assistant, tool, assistant`.
//! The three assistant turns cover 2D grounding plus the intrinsics call,
//! the depth call, and the deduction plus the answer. Every line of think
//! text that contains `=` is an equation line:
//!
//! ```text
//! NAME[k] (label) = EXPR = VALUE
//! ```
//!
//! where the index and label are optional and `EXPR` uses only numbers,
//! `+ − × /`, parentheses, brackets, commas and `round`. Binary minus is
//! U+2212; an ASCII `-` only prefixes a negative literal. Numbers are shown
//! at a fixed display precision: integer pixels as integers, other pixel
//! quantities as integers when integral and with 2 decimals otherwise,
//! meters with 2 decimals and radians with 3, rounding half away from zero.
//! Tool payloads and the answer block carry full precision.

pub mod verify;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{absolute_axis_to_normalized, CameraIntrinsics, ImageMeta, Point3D};
use crate::protocol::{
    serialize_blocks, AnswerBlock, AnswerEntry, Block, ToolCall, ToolInvocation, ToolResponse, ToolResult,
};
use crate::provenance::Provenance;
use crate::reasoner::{run_pipeline, Anchor, AnchorBox, GtOracle, IntrinsicsSource, ReasonerError};
use crate::scene::Scene;
use crate::tools::{DepthQuery, DepthSample, SamplingConfig, SpatialTools};

pub use verify::{verify_trace, Divergence, StepCheck, StepKind, VerificationReport};

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const TEMPLATE_VERSION: u32 = 1;
pub const PIXEL_DECIMALS: usize = 2;
pub const METER_DECIMALS: usize = 2;
pub const RADIAN_DECIMALS: usize = 3;

const SYSTEM_PROMPT: &str = "You localize objects in 3D from a single RGB image. You may call two tools: \
camera_intrinsics (no arguments) returns fx, fy, cx, cy in pixels; depth_sampling (queries: list of \
{category, bbox_2d}) returns up to N metric depth samples [u, v, Z] inside each box. Reason step by step \
inside <think></think>, call tools with <tool_call></tool_call>, and give the final 9-DoF boxes \
[x, y, z, l, w, h, yaw, pitch, roll] in camera coordinates as a JSON list inside <answer></answer>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Grounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayPrecision {
    pub pixel_decimals: usize,
    pub meter_decimals: usize,
    pub radian_decimals: usize,
    pub rounding: String,
}

impl Default for DisplayPrecision {
    fn default() -> Self {
        Self {
            pixel_decimals: PIXEL_DECIMALS,
            meter_decimals: METER_DECIMALS,
            radian_decimals: RADIAN_DECIMALS,
            rounding: "half_away_from_zero".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub template_version: u32,
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub estimator: String,
    pub targets: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    pub display: DisplayPrecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub format_version: u32,
    pub scene_id: String,
    pub task: Task,
    pub header: TraceHeader,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("scene {scene}: no instance {id}")]
    UnknownTarget { scene: String, id: u32 },
    #[error("scene {0}: no target is visible with valid depth")]
    NoTargets(String),
    #[error("scene {scene}: grounding needs exactly one target, got {count}")]
    GroundingTargets { scene: String, count: usize },
    #[error("scene {scene}: no referring expression for instance {id}")]
    NoExpression { scene: String, id: u32 },
    #[error("scene {scene}: {source}")]
    Reasoner {
        scene: String,
        #[source]
        source: ReasonerError,
    },
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fixed-point rendering, half away from zero, never `-0`.
pub fn fmt_fixed(x: f64, decimals: usize) -> String {
    let m = 10f64.powi(decimals as i32);
    let mut r = (x * m).round() / m;
    if r == 0.0 {
        r = 0.0;
    }
    format!("{r:.decimals$}")
}

/// Pixel quantity: integer when integral, else [`PIXEL_DECIMALS`] decimals.
pub fn fmt_pixel(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        fmt_fixed(x, PIXEL_DECIMALS)
    }
}

pub fn fmt_meters(x: f64) -> String {
    fmt_fixed(x, METER_DECIMALS)
}

pub fn fmt_radians(x: f64) -> String {
    fmt_fixed(x, RADIAN_DECIMALS)
}

/// Every quantity of the chain for one target.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TargetChain {
    pub label: String,
    pub norm: [i64; 4],
    pub abs: [i64; 4],
    pub u_c: f64,
    pub v_c: f64,
    pub samples: Vec<DepthSample>,
    pub z_bar: f64,
    pub center: Point3D,
    pub dims: [f64; 3],
    pub angles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Chain {
    pub meta: ImageMeta,
    pub k: CameraIntrinsics,
    pub targets: Vec<TargetChain>,
}

/// One rendered equation line and the assistant turn (0, 1 or 2) it
/// belongs to.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EqLine {
    pub turn: usize,
    pub name: &'static str,
    pub index: Option<usize>,
    pub text: String,
}

pub(crate) fn step_kind_of(name: &str) -> Option<StepKind> {
    Some(match name {
        "box_norm" => StepKind::Anchor,
        "u_min" | "v_min" | "u_max" | "v_max" => StepKind::AnchorRounding,
        "f_x" | "f_y" | "c_x" | "c_y" => StepKind::ToolPayload,
        "u_c" | "v_c" => StepKind::BoxCenter,
        "Z_bar" => StepKind::MeanDepth,
        "X" | "Y" | "Z" => StepKind::Backprojection,
        "box3d" => StepKind::AnswerConsistency,
        _ => return None,
    })
}

pub(crate) fn chain_lines(chain: &Chain) -> Vec<EqLine> {
    let mut out = Vec::new();
    let mut push = |turn, name, index: Option<usize>, text: String| {
        out.push(EqLine { turn, name, index, text });
    };
    let (w, h) = (chain.meta.width, chain.meta.height);
    for (i, t) in chain.targets.iter().enumerate() {
        let k = i + 1;
        let n = t.norm;
        push(0, "box_norm", Some(k), format!("box_norm[{k}] ({}) = [{}, {}, {}, {}]", t.label, n[0], n[1], n[2], n[3]));
    }
    for (i, t) in chain.targets.iter().enumerate() {
        let k = i + 1;
        for (j, (name, extent)) in [("u_min", w), ("v_min", h), ("u_max", w), ("v_max", h)].into_iter().enumerate() {
            push(0, name, Some(k), format!("{name}[{k}] = round({} / 1000 × {extent}) = {}", t.norm[j], t.abs[j]));
        }
    }
    let kk = &chain.k;
    for (name, v) in [("f_x", kk.fx), ("f_y", kk.fy), ("c_x", kk.cx), ("c_y", kk.cy)] {
        push(1, name, None, format!("{name} = {}", fmt_pixel(v)));
    }
    for (i, t) in chain.targets.iter().enumerate() {
        let k = i + 1;
        let a = t.abs;
        push(2, "u_c", Some(k), format!("u_c[{k}] = ({} + {}) / 2 = {}", a[0], a[2], fmt_pixel(t.u_c)));
        push(2, "v_c", Some(k), format!("v_c[{k}] = ({} + {}) / 2 = {}", a[1], a[3], fmt_pixel(t.v_c)));
        let zs: Vec<String> = t.samples.iter().map(|s| fmt_meters(s.z)).collect();
        push(
            2,
            "Z_bar",
            Some(k),
            format!("Z_bar[{k}] = ({}) / {} = {}", zs.join(" + "), t.samples.len(), fmt_meters(t.z_bar)),
        );
        let z = fmt_meters(t.z_bar);
        push(
            2,
            "X",
            Some(k),
            format!(
                "X[{k}] = ({} − {}) × {z} / {} = {}",
                fmt_pixel(t.u_c),
                fmt_pixel(kk.cx),
                fmt_pixel(kk.fx),
                fmt_meters(t.center.x)
            ),
        );
        push(
            2,
            "Y",
            Some(k),
            format!(
                "Y[{k}] = ({} − {}) × {z} / {} = {}",
                fmt_pixel(t.v_c),
                fmt_pixel(kk.cy),
                fmt_pixel(kk.fy),
                fmt_meters(t.center.y)
            ),
        );
        push(2, "Z", Some(k), format!("Z[{k}] = {}", fmt_meters(t.center.z)));
    }
    for (i, t) in chain.targets.iter().enumerate() {
        let k = i + 1;
        let c = t.center;
        let parts: Vec<String> = [c.x, c.y, c.z]
            .iter()
            .chain(&t.dims)
            .map(|v| fmt_meters(*v))
            .chain(t.angles.iter().map(|a| fmt_radians(*a)))
            .collect();
        push(2, "box3d", Some(k), format!("box3d[{k}] ({}) = [{}]", t.label, parts.join(", ")));
    }
    out
}

fn lines_of(lines: &[EqLine], turn: usize, names: &[&str]) -> String {
    let mut s = String::new();
    for l in lines.iter().filter(|l| l.turn == turn && names.contains(&l.name)) {
        s.push_str(&l.text);
        s.push('\n');
    }
    s
}

fn think_texts(chain: &Chain, cfg: &SamplingConfig) -> [String; 3] {
    let lines = chain_lines(chain);
    let mut a = String::from(
        "Step 1: locate every target in the image and give its 2D box in normalized [0, 1000] coordinates.\n",
    );
    a += &lines_of(&lines, 0, &["box_norm"]);
    let _ = writeln!(
        a,
        "Convert the normalized boxes to pixels for the {} x {} image.",
        chain.meta.width, chain.meta.height
    );
    a += &lines_of(&lines, 0, &["u_min", "v_min", "u_max", "v_max"]);
    a += "Step 2: back-projection needs the focal lengths and principal point, so call the intrinsic tool.";

    let mut b = String::from("The intrinsic tool returned:\n");
    b += &lines_of(&lines, 1, &["f_x", "f_y", "c_x", "c_y"]);
    let _ = write!(
        b,
        "Step 3: sample up to {} metric depths inside each pixel box, discarding values below {} m.",
        cfg.n_points, cfg.min_depth
    );

    let mut c = String::from("Step 4: lift each 2D box center to 3D with the mean sampled depth.\n");
    let per_target: Vec<String> = (1..=chain.targets.len())
        .map(|k| {
            lines
                .iter()
                .filter(|l| l.turn == 2 && l.index == Some(k) && l.name != "box3d")
                .map(|l| format!("{}\n", l.text))
                .collect()
        })
        .collect();
    c += &per_target.concat();
    c += "Step 5: anchor each 3D box on its computed center with the extents and orientation of its category.\n";
    c += lines_of(&lines, 2, &["box3d"]).trim_end_matches('\n');
    [a, b, c]
}

/// Renders the seven turns of a trace from a fully computed chain.
pub(crate) fn render_turns(chain: &Chain, cfg: &SamplingConfig, user: String) -> Vec<Turn> {
    let [a, b, c] = think_texts(chain, cfg);
    let intr_call = ToolCall { call_id: "1".into(), invocation: ToolInvocation::CameraIntrinsics };
    let queries = chain
        .targets
        .iter()
        .map(|t| DepthQuery {
            category: t.label.clone(),
            bbox_2d: crate::geometry::Box2D::new(t.abs[0] as f64, t.abs[1] as f64, t.abs[2] as f64, t.abs[3] as f64)
                .expect("rounding keeps box order"),
        })
        .collect();
    let depth_call = ToolCall { call_id: "2".into(), invocation: ToolInvocation::DepthSampling { queries } };
    let intr_resp = ToolResponse::ok("1", ToolResult::Intrinsics(chain.k));
    let depth_resp = ToolResponse::ok(
        "2",
        ToolResult::DepthSamples { samples: chain.targets.iter().map(|t| t.samples.clone()).collect() },
    );
    let answer = AnswerBlock {
        boxes: chain
            .targets
            .iter()
            .map(|t| AnswerEntry {
                label: Some(t.label.clone()),
                bbox_3d: crate::geometry::Box3D::new(t.center, t.dims, t.angles).expect("valid deduced box"),
            })
            .collect(),
    };
    let turn = |role, blocks: Vec<Block>| Turn { role, content: serialize_blocks(&blocks) };
    vec![
        Turn { role: Role::System, content: SYSTEM_PROMPT.into() },
        Turn { role: Role::User, content: user },
        turn(Role::Assistant, vec![Block::Think(a), Block::ToolCall(intr_call)]),
        turn(Role::Tool, vec![Block::ToolResponse(intr_resp)]),
        turn(Role::Assistant, vec![Block::Think(b), Block::ToolCall(depth_call)]),
        turn(Role::Tool, vec![Block::ToolResponse(depth_resp)]),
        turn(Role::Assistant, vec![Block::Think(c), Block::Answer(answer)]),
    ]
}

pub(crate) fn user_prompt(scene: &Scene, task: Task, labels: &[String], expression: Option<&str>) -> String {
    let meta = scene.meta();
    match task {
        Task::Detection => {
            let cats: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
            format!(
                "<image> ({} x {} pixels)\nDetect every object of the following categories and output its 3D bounding box: {}.",
                meta.width,
                meta.height,
                cats.into_iter().collect::<Vec<_>>().join(", ")
            )
        }
        Task::Grounding => format!(
            "<image> ({} x {} pixels)\nFind the object described as \"{}\" and output its 3D bounding box.",
            meta.width,
            meta.height,
            expression.unwrap_or_default()
        ),
    }
}

/// Normalized GT anchor of an instance in per-mille coordinates.
pub(crate) fn normalized_gt_anchor(scene: &Scene, id: u32) -> Result<[i64; 4], crate::scene::SceneError> {
    let b = scene.gt_box2d(id)?;
    let m = scene.meta();
    Ok([
        absolute_axis_to_normalized(b.u_min, m.width),
        absolute_axis_to_normalized(b.v_min, m.height),
        absolute_axis_to_normalized(b.u_max, m.width),
        absolute_axis_to_normalized(b.v_max, m.height),
    ])
}

fn expression_for(scene: &Scene, id: u32) -> Option<&str> {
    scene.record.expressions.iter().find(|e| e.instance_id == id).map(|e| e.text.as_str())
}

/// Builds a trace for the given targets with the ground-truth tools and the
/// GT dimension oracle. Targets that do not project into the image or have
/// no valid depth sample are skipped with a warning.
pub fn build_trace(
    scene: &Scene,
    task: Task,
    targets: &[u32],
    cfg: &SamplingConfig,
) -> Result<ReasoningTrace, TraceError> {
    let sid = scene.id().to_string();
    if task == Task::Grounding && targets.len() != 1 {
        return Err(TraceError::GroundingTargets { scene: sid, count: targets.len() });
    }
    let expression = match task {
        Task::Grounding => Some(
            expression_for(scene, targets[0])
                .ok_or(TraceError::NoExpression { scene: sid.clone(), id: targets[0] })?
                .to_string(),
        ),
        Task::Detection => None,
    };
    let mut kept = Vec::new();
    let mut anchors = Vec::new();
    for &id in targets {
        let inst = scene.record.instance(id).ok_or(TraceError::UnknownTarget { scene: sid.clone(), id })?;
        match normalized_gt_anchor(scene, id) {
            Ok(n) => {
                kept.push(id);
                anchors.push(Anchor {
                    label: inst.category.clone(),
                    category: inst.category.clone(),
                    instance_id: Some(id),
                    bbox: AnchorBox::Normalized(n.map(|v| v as f64)),
                });
            }
            Err(e) => log::warn!("scene {sid}: skipping instance {id}: {e}"),
        }
    }
    if anchors.is_empty() {
        return Err(TraceError::NoTargets(sid));
    }
    let tools = SpatialTools::ground_truth();
    let out = run_pipeline(scene, &anchors, cfg, &tools, &GtOracle, IntrinsicsSource::Tool)
        .map_err(|source| TraceError::Reasoner { scene: sid.clone(), source })?;

    let mut chain = Chain { meta: scene.meta(), k: out.intrinsics, targets: Vec::new() };
    let mut final_ids = Vec::new();
    for (rec, id) in out.records.iter().zip(&kept) {
        let (Some(z_bar), Some(center), Some(est)) = (rec.z_bar, rec.center_hat, rec.estimate) else {
            log::warn!("scene {sid}: skipping instance {id}: no valid depth samples");
            continue;
        };
        let b = rec.bbox_2d;
        let AnchorBox::Normalized(n) = anchors[rec.index].bbox else { unreachable!() };
        chain.targets.push(TargetChain {
            label: rec.label.clone(),
            norm: n.map(|v| v as i64),
            abs: [b.u_min as i64, b.v_min as i64, b.u_max as i64, b.v_max as i64],
            u_c: rec.u_c,
            v_c: rec.v_c,
            samples: rec.samples.clone(),
            z_bar,
            center,
            dims: est.dims,
            angles: est.angles,
        });
        final_ids.push(*id);
    }
    if chain.targets.is_empty() {
        return Err(TraceError::NoTargets(sid));
    }
    let labels: Vec<String> = chain.targets.iter().map(|t| t.label.clone()).collect();
    let user = user_prompt(scene, task, &labels, expression.as_deref());
    Ok(ReasoningTrace {
        format_version: TRACE_FORMAT_VERSION,
        scene_id: sid,
        task,
        header: TraceHeader {
            template_version: TEMPLATE_VERSION,
            seed: cfg.seed,
            sampling: *cfg,
            estimator: "gt_oracle".into(),
            targets: final_ids,
            expression,
            display: DisplayPrecision::default(),
            provenance: None,
        },
        turns: render_turns(&chain, cfg, user),
    })
}

/// Detection: one trace per scene over all instances. Grounding: one trace
/// per referring expression.
pub fn build_corpus(scenes: &[Scene], task: Task, cfg: &SamplingConfig) -> Result<Vec<ReasoningTrace>, TraceError> {
    let mut out = Vec::new();
    for scene in scenes {
        match task {
            Task::Detection => {
                let ids: Vec<u32> = scene.record.instances.iter().map(|i| i.instance_id).collect();
                match build_trace(scene, task, &ids, cfg) {
                    Ok(t) => out.push(t),
                    Err(TraceError::NoTargets(s)) => log::warn!("scene {s}: no usable target, skipped"),
                    Err(e) => return Err(e),
                }
            }
            Task::Grounding => {
                for e in &scene.record.expressions {
                    match build_trace(scene, task, &[e.instance_id], cfg) {
                        Ok(t) => out.push(t),
                        Err(TraceError::NoTargets(s)) => {
                            log::warn!("scene {s}: expression {:?} has no usable target, skipped", e.text)
                        }
                        Err(err) => return Err(err),
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_traces_jsonl<W: Write>(traces: &[ReasoningTrace], mut w: W) -> io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces_jsonl<R: BufRead>(r: R) -> Result<Vec<ReasoningTrace>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ReasoningTrace =
            serde_json::from_str(&line).map_err(|e| TraceError::Jsonl { line: i + 1, message: e.to_string() })?;
        if t.format_version != TRACE_FORMAT_VERSION {
            return Err(TraceError::Jsonl {
                line: i + 1,
                message: format!("unsupported format_version {}", t.format_version),
            });
        }
        out.push(t);
    }
    Ok(out)
}
