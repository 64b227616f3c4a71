//! Detection F1, grounding accuracy and the camera-rescale sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{rescale_grid, RescaleFactor};
use crate::geometry::{iou_3d, Box3D};
use crate::provenance::Provenance;
use crate::reasoner::{
    run_pipeline, Anchor, CategoryPrior, DimensionEstimator, GtOracle, IntrinsicsSource, PredictedBox,
};
use crate::scene::Scene;
use crate::tools::{SamplingConfig, SpatialTools};
use crate::trace::Task;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("category set {path}: {message}")]
    CategorySet { path: String, message: String },
    #[error("category set is empty")]
    EmptyCategorySet,
}

/// Named list of categories to evaluate, such as the 8, 20 or 31 class
/// subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    pub label: String,
    pub categories: BTreeSet<String>,
}

impl CategorySet {
    pub fn new<I, S>(label: impl Into<String>, categories: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let categories: BTreeSet<String> = categories.into_iter().map(Into::into).collect();
        if categories.is_empty() {
            return Err(EvalError::EmptyCategorySet);
        }
        Ok(Self { label: label.into(), categories })
    }

    /// One category per line; blank lines and `#` comments are skipped.
    /// The label is the file stem.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::CategorySet { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let cats = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        Self::new(label, cats).map_err(|e| err(e.to_string()))
    }

    /// Every category with at least one instance in the scenes.
    pub fn from_scenes(label: impl Into<String>, scenes: &[Scene]) -> Result<Self, EvalError> {
        Self::new(label, scenes.iter().flat_map(|s| s.record.instances.iter().map(|i| i.category.clone())))
    }

    pub fn contains(&self, category: &str) -> bool {
        self.categories.contains(category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub category: String,
    pub box3d: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching within each category: candidate pairs are
/// taken by IoU descending, ties by `(pred, gt)` index, and accepted when
/// `iou >= tau` and both ends are unused.
///
/// # Panics
/// If `tau` is not in `(0, 1)`.
pub fn match_boxes(preds: &[LabeledBox], gts: &[LabeledBox], tau: f64) -> MatchResult {
    assert!(tau > 0.0 && tau < 1.0, "IoU threshold must lie in (0, 1), got {tau}");
    let mut cands = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            if pb.category == gb.category {
                let iou = iou_3d(&pb.box3d, &gb.box3d).iou;
                if iou >= tau {
                    cands.push(MatchPair { pred: p, gt: g, iou });
                }
            }
        }
    }
    cands.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in cands {
        if !used_p[c.pred] && !used_g[c.gt] {
            used_p[c.pred] = true;
            used_g[c.gt] = true;
            pairs.push(c);
        }
    }
    MatchResult {
        pairs,
        unmatched_preds: (0..preds.len()).filter(|i| !used_p[*i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|i| !used_g[*i]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn gt(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn preds(&self) -> usize {
        self.tp + self.fp
    }

    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.preds())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.gt())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub category_set: String,
    pub per_category: Vec<CategoryScore>,
    pub avg_f1: f64,
}

/// Corpus-wide per-category confusion counts; frames are matched one at a
/// time and their counts summed.
#[derive(Debug, Clone, Default)]
pub struct DetectionAccumulator {
    counts: BTreeMap<String, Counts>,
}

impl DetectionAccumulator {
    pub fn add_frame(&mut self, preds: &[LabeledBox], gts: &[LabeledBox], tau: f64) {
        let m = match_boxes(preds, gts, tau);
        for p in &m.pairs {
            self.counts.entry(preds[p.pred].category.clone()).or_default().tp += 1;
        }
        for &i in &m.unmatched_preds {
            self.counts.entry(preds[i].category.clone()).or_default().fp += 1;
        }
        for &i in &m.unmatched_gts {
            self.counts.entry(gts[i].category.clone()).or_default().fn_ += 1;
        }
    }

    pub fn merge(&mut self, other: &DetectionAccumulator) {
        for (k, c) in &other.counts {
            let e = self.counts.entry(k.clone()).or_default();
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
        }
    }

    pub fn counts(&self) -> &BTreeMap<String, Counts> {
        &self.counts
    }

    /// Scores categories of `set` that have ground truth, plus categories of
    /// `set` without ground truth but with predictions (F1 = 0). Categories
    /// with neither are left out of the average.
    pub fn report(&self, set: &CategorySet) -> DetectionReport {
        let per_category: Vec<CategoryScore> = set
            .categories
            .iter()
            .filter_map(|c| {
                let counts = self.counts.get(c).copied().unwrap_or_default();
                (counts.gt() > 0 || counts.preds() > 0).then(|| CategoryScore {
                    category: c.clone(),
                    counts,
                    precision: counts.precision(),
                    recall: counts.recall(),
                    f1: counts.f1(),
                })
            })
            .collect();
        let avg_f1 = if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(|s| s.f1).sum::<f64>() / per_category.len() as f64
        };
        DetectionReport { category_set: set.label.clone(), per_category, avg_f1 }
    }
}

/// Single-frame detection score.
pub fn detection_f1(preds: &[LabeledBox], gts: &[LabeledBox], tau: f64, set: &CategorySet) -> DetectionReport {
    let mut acc = DetectionAccumulator::default();
    acc.add_frame(preds, gts, tau);
    acc.report(set)
}

/// Fraction of queries whose prediction reaches `iou >= tau`; a missing
/// prediction is a miss and an empty query list scores 0.
///
/// # Panics
/// If the slices differ in length.
pub fn grounding_accuracy(preds: &[Option<Box3D>], gts: &[Box3D], tau: f64) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction slot per query");
    if gts.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| p.as_ref().is_some_and(|p| iou_3d(p, g).iou >= tau)).count();
    hits as f64 / gts.len() as f64
}

#[derive(Debug, Clone)]
pub enum EstimatorChoice {
    GtOracle,
    CategoryPrior(CategoryPrior),
}

impl EstimatorChoice {
    fn as_dyn(&self) -> &dyn DimensionEstimator {
        match self {
            EstimatorChoice::GtOracle => &GtOracle,
            EstimatorChoice::CategoryPrior(p) => p,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorChoice::GtOracle => "gt_oracle",
            EstimatorChoice::CategoryPrior(_) => "category_prior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicsMode {
    /// Intrinsics come from the tool on the rescaled scene.
    Tool,
    /// Intrinsics stay at their unscaled values while the image rescales.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sampling: SamplingConfig,
    pub estimator: EstimatorChoice,
    pub intrinsics: IntrinsicsMode,
    pub tau: f64,
    /// Categories scored for detection; `None` uses every category in the
    /// corpus.
    pub category_set: Option<CategorySet>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            estimator: EstimatorChoice::GtOracle,
            intrinsics: IntrinsicsMode::Tool,
            tau: DEFAULT_IOU_THRESHOLD,
            category_set: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene_id: String,
    pub message: String,
}

/// Score of one task over a corpus at one camera scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub metric: f64,
    pub scenes: usize,
    /// Detection: GT instances; grounding: queries.
    pub targets: usize,
    pub detection: Option<DetectionReport>,
    pub failures: Vec<SceneFailure>,
}

struct SceneOutcome {
    detection: DetectionAccumulator,
    grounding: Vec<(Option<Box3D>, Box3D)>,
}

fn scene_outcome(scene: &Scene, task: Task, s: RescaleFactor, cfg: &PipelineConfig) -> Result<SceneOutcome, String> {
    let view = scene.rescaled(s);
    let intrinsics = match cfg.intrinsics {
        IntrinsicsMode::Tool => IntrinsicsSource::Tool,
        IntrinsicsMode::Frozen => IntrinsicsSource::Frozen(scene.intrinsics()),
    };
    let tools = SpatialTools::ground_truth();
    let run = |anchors: &[Anchor]| -> Result<Vec<PredictedBox>, String> {
        if anchors.is_empty() {
            return Ok(Vec::new());
        }
        run_pipeline(&view, anchors, &cfg.sampling, &tools, cfg.estimator.as_dyn(), intrinsics)
            .map(|o| o.boxes)
            .map_err(|e| e.to_string())
    };
    let mut out = SceneOutcome { detection: DetectionAccumulator::default(), grounding: Vec::new() };
    match task {
        Task::Detection => {
            let anchors: Vec<Anchor> =
                scene.record.instances.iter().filter_map(|i| Anchor::from_gt(&view, i.instance_id).ok()).collect();
            let preds: Vec<LabeledBox> =
                run(&anchors)?.into_iter().map(|p| LabeledBox { category: p.category, box3d: p.box3d }).collect();
            let gts: Vec<LabeledBox> = scene
                .record
                .instances
                .iter()
                .map(|i| LabeledBox { category: i.category.clone(), box3d: i.box3d })
                .collect();
            out.detection.add_frame(&preds, &gts, cfg.tau);
        }
        Task::Grounding => {
            let mut anchors = Vec::new();
            let mut gts = Vec::new();
            for e in &scene.record.expressions {
                let inst = scene.record.instance(e.instance_id).expect("validated expression");
                gts.push(inst.box3d);
                if let Ok(mut a) = Anchor::from_gt(&view, e.instance_id) {
                    a.label = e.text.clone();
                    anchors.push((gts.len() - 1, a));
                }
            }
            let plain: Vec<Anchor> = anchors.iter().map(|(_, a)| a.clone()).collect();
            let boxes = run(&plain)?;
            let mut preds = vec![None; gts.len()];
            for b in boxes {
                preds[anchors[b.index].0] = Some(b.box3d);
            }
            out.grounding = preds.into_iter().zip(gts).collect();
        }
    }
    Ok(out)
}

/// Runs the pipeline on every scene viewed at scale `s` and scores it.
pub fn evaluate(scenes: &[Scene], task: Task, s: RescaleFactor, cfg: &PipelineConfig) -> TaskScore {
    let outcomes: Vec<(String, Result<SceneOutcome, String>)> =
        scenes.par_iter().map(|scene| (scene.id().to_string(), scene_outcome(scene, task, s, cfg))).collect();
    let mut failures = Vec::new();
    let mut det = DetectionAccumulator::default();
    let mut ground = Vec::new();
    let mut ok_scenes = 0;
    for (scene_id, o) in outcomes {
        match o {
            Ok(o) => {
                ok_scenes += 1;
                det.merge(&o.detection);
                ground.extend(o.grounding);
            }
            Err(message) => {
                log::warn!("scene {scene_id} at scale {}: {message}", s.value());
                failures.push(SceneFailure { scene_id, message });
            }
        }
    }
    match task {
        Task::Detection => {
            let set = match &cfg.category_set {
                Some(set) => set.clone(),
                None => CategorySet {
                    label: "all".into(),
                    categories: scenes
                        .iter()
                        .flat_map(|s| s.record.instances.iter().map(|i| i.category.clone()))
                        .collect(),
                },
            };
            let report = det.report(&set);
            TaskScore {
                metric: report.avg_f1,
                scenes: ok_scenes,
                targets: det.counts().values().map(Counts::gt).sum(),
                detection: Some(report),
                failures,
            }
        }
        Task::Grounding => {
            let (preds, gts): (Vec<Option<Box3D>>, Vec<Box3D>) = ground.into_iter().unzip();
            TaskScore {
                metric: grounding_accuracy(&preds, &gts, cfg.tau),
                scenes: ok_scenes,
                targets: gts.len(),
                detection: None,
                failures,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub factor: f64,
    pub metric: f64,
    pub scenes: usize,
    pub targets: usize,
    pub failures: Vec<SceneFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub task: Task,
    pub metric_name: String,
    pub method: String,
    pub entries: Vec<SweepEntry>,
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Detection => "avg_f1@0.25",
        Task::Grounding => "acc@0.25",
    }
}

/// Evaluates the corpus at each of the eleven factors 0.5 to 1.5.
pub fn rescale_sweep(scenes: &[Scene], task: Task, cfg: &PipelineConfig) -> SweepReport {
    let entries = rescale_grid()
        .into_iter()
        .map(|s| {
            let score = evaluate(scenes, task, s, cfg);
            SweepEntry {
                factor: s.value(),
                metric: score.metric,
                scenes: score.scenes,
                targets: score.targets,
                failures: score.failures,
            }
        })
        .collect();
    let intr = match cfg.intrinsics {
        IntrinsicsMode::Tool => "tool intrinsics",
        IntrinsicsMode::Frozen => "frozen intrinsics",
    };
    SweepReport {
        provenance: None,
        task,
        metric_name: metric_name(task).into(),
        method: format!("{} ({intr})", cfg.estimator.name()),
        entries,
    }
}

/// Plain-text table, one row per report, metric in percent:
///
/// ```text
/// Method                      0.5    0.6  ...    1.5
/// gt_oracle (tool intrinsics) 61.25  61.25 ...  61.25
/// ```
pub fn format_sweep_table(reports: &[&SweepReport]) -> String {
    let factors: Vec<f64> = reports
        .first()
        .map(|r| r.entries.iter().map(|e| e.factor).collect())
        .unwrap_or_else(|| rescale_grid().into_iter().map(RescaleFactor::value).collect());
    let name_w = reports.iter().map(|r| r.method.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Method");
    for f in &factors {
        let _ = write!(out, " {:>6}", format!("{f:.1}"));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<name_w$}", r.method);
        for e in &r.entries {
            let _ = write!(out, " {:>6.2}", e.metric * 100.0);
        }
        out.push('\n');
    }
    out
}
