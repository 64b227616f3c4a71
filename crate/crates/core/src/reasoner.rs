//! Deterministic executor of the five-step geometric chain.
//!
//! 1. normalized anchors are converted to pixels,
//! 2. intrinsics are fetched from the intrinsic tool,
//! 3. depths are sampled inside every anchor with one tool call,
//! 4. each anchor's center is lifted with the mean sampled depth,
//! 5. an estimator supplies extents and angles around the lifted center.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{back_project, normalized_axis_to_absolute, CameraIntrinsics, Point3D};
use crate::geometry::{box2d_center, Box2D, Box3D};
use crate::scene::Scene;
use crate::tools::{DepthQuery, DepthSample, SamplingConfig, SpatialTools, ToolError};

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("no anchors given")]
    EmptyAnchors,
    #[error("anchor {index}: {reason}")]
    InvalidAnchor { index: usize, reason: String },
    #[error("target {index}: {source}")]
    Tool {
        index: usize,
        #[source]
        source: ToolError,
    },
    #[error("target {index}: estimator failed: {reason}")]
    Estimator { index: usize, reason: String },
    #[error("configuration: {0}")]
    Config(String),
}

/// Anchor box as supplied: already in pixels or in per-mille normalized
/// coordinates `[0, 1000]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorBox {
    Absolute(Box2D),
    Normalized([f64; 4]),
}

/// One target: a category or expression label and its 2D anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub label: String,
    /// Query category sent to the depth tool.
    pub category: String,
    /// Ground-truth instance the anchor refers to, when known.
    pub instance_id: Option<u32>,
    pub bbox: AnchorBox,
}

impl Anchor {
    /// Anchor at the instance's projected GT box in the scene's pixel space.
    pub fn from_gt(scene: &Scene, instance_id: u32) -> Result<Self, crate::scene::SceneError> {
        let bbox = scene.gt_box2d(instance_id)?;
        let inst = scene.record.instance(instance_id).expect("gt_box2d checked the instance");
        Ok(Self {
            label: inst.category.clone(),
            category: inst.category.clone(),
            instance_id: Some(instance_id),
            bbox: AnchorBox::Absolute(bbox),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    GtOracle,
    CategoryPrior,
}

/// Extents in meters and angles in radians for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub dims: [f64; 3],
    pub angles: [f64; 3],
    pub source: EstimateSource,
    /// Set when a category prior fell back to the global median.
    #[serde(default)]
    pub unknown_category: bool,
}

pub trait DimensionEstimator: Send + Sync {
    fn estimate(&self, scene: &Scene, anchor: &Anchor) -> Result<DimensionEstimate, String>;
}

/// Reads extents and angles from the referenced GT instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct GtOracle;

impl DimensionEstimator for GtOracle {
    fn estimate(&self, scene: &Scene, anchor: &Anchor) -> Result<DimensionEstimate, String> {
        let id = anchor.instance_id.ok_or("gt oracle needs an instance id")?;
        let inst = scene.record.instance(id).ok_or_else(|| format!("no instance {id}"))?;
        let b = &inst.box3d;
        Ok(DimensionEstimate {
            dims: b.dims(),
            angles: [b.yaw, b.pitch, b.roll],
            source: EstimateSource::GtOracle,
            unknown_category: false,
        })
    }
}

/// Per-category median extents with zero angles.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrior {
    table: BTreeMap<String, [f64; 3]>,
    global: [f64; 3],
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn median_dims(rows: &[[f64; 3]]) -> [f64; 3] {
    std::array::from_fn(|j| median(&mut rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
}

#[derive(Deserialize)]
struct PriorRow {
    category: String,
    l: f64,
    w: f64,
    h: f64,
}

impl CategoryPrior {
    /// Builds medians from `(category, [l, w, h])` observations.
    pub fn from_observations<'a>(rows: impl IntoIterator<Item = (&'a str, [f64; 3])>) -> Result<Self, ReasonerError> {
        let mut by_cat: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
        let mut all = Vec::new();
        for (cat, dims) in rows {
            if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
                return Err(ReasonerError::Config(format!("non-positive prior extents for {cat}: {dims:?}")));
            }
            by_cat.entry(cat.to_string()).or_default().push(dims);
            all.push(dims);
        }
        if all.is_empty() {
            return Err(ReasonerError::Config("empty category prior table".into()));
        }
        let table = by_cat.iter().map(|(k, v)| (k.clone(), median_dims(v))).collect();
        Ok(Self { table, global: median_dims(&all) })
    }

    /// Medians over every instance of the given scenes.
    pub fn from_scenes(scenes: &[Scene]) -> Result<Self, ReasonerError> {
        Self::from_observations(
            scenes.iter().flat_map(|s| s.record.instances.iter()).map(|i| (i.category.as_str(), i.box3d.dims())),
        )
    }

    /// Reads a `category,l,w,h` CSV of observations.
    pub fn from_csv(path: &Path) -> Result<Self, ReasonerError> {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| ReasonerError::Config(format!("{}: {e}", path.display())))?;
        let rows: Vec<PriorRow> = reader
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| ReasonerError::Config(format!("{}: {e}", path.display())))?;
        Self::from_observations(rows.iter().map(|r| (r.category.as_str(), [r.l, r.w, r.h])))
    }

    pub fn table(&self) -> &BTreeMap<String, [f64; 3]> {
        &self.table
    }

    pub fn global(&self) -> [f64; 3] {
        self.global
    }

    pub fn lookup(&self, category: &str) -> DimensionEstimate {
        let (dims, unknown) = match self.table.get(category) {
            Some(d) => (*d, false),
            None => (self.global, true),
        };
        DimensionEstimate { dims, angles: [0.0; 3], source: EstimateSource::CategoryPrior, unknown_category: unknown }
    }
}

impl DimensionEstimator for CategoryPrior {
    fn estimate(&self, _scene: &Scene, anchor: &Anchor) -> Result<DimensionEstimate, String> {
        Ok(self.lookup(&anchor.category))
    }
}

pub fn estimate_dims_category_prior(category: &str, priors: &CategoryPrior) -> DimensionEstimate {
    priors.lookup(category)
}

/// Where step 2 takes the intrinsics from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntrinsicsSource {
    /// Call the intrinsic tool on the scene as presented.
    Tool,
    /// Use fixed values regardless of the scene (ablation).
    Frozen(CameraIntrinsics),
}

/// Audit record of every intermediate quantity for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeductionRecord {
    pub index: usize,
    pub label: String,
    pub category: String,
    pub instance_id: Option<u32>,
    pub normalized: Option<[f64; 4]>,
    pub bbox_2d: Box2D,
    pub u_c: f64,
    pub v_c: f64,
    pub samples: Vec<DepthSample>,
    pub z_bar: Option<f64>,
    pub center_hat: Option<Point3D>,
    pub no_depth: bool,
    pub estimate: Option<DimensionEstimate>,
}

/// A predicted box and the anchor it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedBox {
    pub index: usize,
    pub label: String,
    pub category: String,
    pub instance_id: Option<u32>,
    pub box3d: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub intrinsics: CameraIntrinsics,
    pub boxes: Vec<PredictedBox>,
    pub records: Vec<DeductionRecord>,
}

/// Arithmetic mean with a left-to-right sum.
pub fn mean_depth(samples: &[DepthSample]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    Some(samples.iter().fold(0.0, |acc, s| acc + s.z) / samples.len() as f64)
}

fn resolve_anchor(scene: &Scene, index: usize, anchor: &Anchor) -> Result<Box2D, ReasonerError> {
    let invalid = |reason: String| ReasonerError::InvalidAnchor { index, reason };
    let meta = scene.meta();
    let b = match anchor.bbox {
        AnchorBox::Absolute(b) => b,
        AnchorBox::Normalized(n) => {
            let conv = |v: f64, extent: u32| {
                normalized_axis_to_absolute(v, extent).map(|p| p as f64).map_err(|e| invalid(e.to_string()))
            };
            Box2D::new(
                conv(n[0], meta.width)?,
                conv(n[1], meta.height)?,
                conv(n[2], meta.width)?,
                conv(n[3], meta.height)?,
            )
            .map_err(|e| invalid(e.to_string()))?
        }
    };
    // A rescaled view presents the source extent times the scale, which can
    // exceed the rounded image size by up to half a pixel.
    let lattice = scene.lattice();
    let max_u = (meta.width as f64).max(lattice.meta.width as f64 * lattice.scale) + 1e-6;
    let max_v = (meta.height as f64).max(lattice.meta.height as f64 * lattice.scale) + 1e-6;
    if b.u_min < 0.0 || b.v_min < 0.0 || b.u_max > max_u || b.v_max > max_v {
        return Err(invalid(format!("box {:?} outside the {}x{} image", b.to_array(), meta.width, meta.height)));
    }
    Ok(b)
}

/// Runs steps 1 to 5 for every anchor.
pub fn run_pipeline(
    scene: &Scene,
    anchors: &[Anchor],
    cfg: &SamplingConfig,
    tools: &SpatialTools,
    estimator: &dyn DimensionEstimator,
    intrinsics: IntrinsicsSource,
) -> Result<PipelineOutput, ReasonerError> {
    if anchors.is_empty() {
        return Err(ReasonerError::EmptyAnchors);
    }
    let boxes_2d =
        anchors.iter().enumerate().map(|(i, a)| resolve_anchor(scene, i, a)).collect::<Result<Vec<_>, _>>()?;

    let k = match intrinsics {
        IntrinsicsSource::Tool => tools.camera_intrinsics(scene),
        IntrinsicsSource::Frozen(k) => k,
    };

    let queries: Vec<DepthQuery> =
        anchors.iter().zip(&boxes_2d).map(|(a, b)| DepthQuery { category: a.category.clone(), bbox_2d: *b }).collect();
    let samples = tools.depth_sampling(scene, &queries, cfg).map_err(|e| {
        let index = match &e {
            ToolError::InvalidQuery { index, .. } | ToolError::Provider { index, .. } => *index,
            ToolError::InvalidConfig(_) => 0,
        };
        ReasonerError::Tool { index, source: e }
    })?;

    let mut boxes = Vec::new();
    let mut records = Vec::with_capacity(anchors.len());
    for (index, ((anchor, b), samples)) in anchors.iter().zip(&boxes_2d).zip(samples).enumerate() {
        let (u_c, v_c) = box2d_center(b);
        let z_bar = mean_depth(&samples);
        let mut record = DeductionRecord {
            index,
            label: anchor.label.clone(),
            category: anchor.category.clone(),
            instance_id: anchor.instance_id,
            normalized: match anchor.bbox {
                AnchorBox::Normalized(n) => Some(n),
                AnchorBox::Absolute(_) => None,
            },
            bbox_2d: *b,
            u_c,
            v_c,
            samples,
            z_bar,
            center_hat: None,
            no_depth: z_bar.is_none(),
            estimate: None,
        };
        if let Some(z) = z_bar {
            let center =
                back_project(u_c, v_c, z, &k).map_err(|e| ReasonerError::Estimator { index, reason: e.to_string() })?;
            let est = estimator.estimate(scene, anchor).map_err(|reason| ReasonerError::Estimator { index, reason })?;
            let box3d = Box3D::new(center, est.dims, est.angles)
                .map_err(|e| ReasonerError::Estimator { index, reason: e.to_string() })?;
            record.center_hat = Some(center);
            record.estimate = Some(est);
            boxes.push(PredictedBox {
                index,
                label: anchor.label.clone(),
                category: anchor.category.clone(),
                instance_id: anchor.instance_id,
                box3d,
            });
        } else {
            log::warn!("scene {} target {index} ({}): no valid depth samples", scene.id(), anchor.label);
        }
        records.push(record);
    }
    Ok(PipelineOutput { intrinsics: k, boxes, records })
}

/// Writes one JSON record per line.
pub fn write_records_jsonl<W: Write>(records: &[DeductionRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::camera::{ImageMeta, RescaleFactor};
    use crate::scene::{DepthRaster, InstanceGT, MaskRaster, SceneRecord, SCENE_FORMAT_VERSION};

    /// 640x480 scene, depth 2.0 inside [370,470)x[190,290) where the mask is set.
    fn fixture(depth_inside: f32) -> Scene {
        let (w, h) = (640u32, 480u32);
        let mut d = vec![5.0f32; (w * h) as usize];
        let mut m = vec![0u8; (w * h) as usize];
        for v in 190..290 {
            for u in 370..470 {
                d[(v * w + u) as usize] = depth_inside;
                m[(v * w + u) as usize] = 1;
            }
        }
        let record = SceneRecord {
            format_version: SCENE_FORMAT_VERSION,
            scene_id: "s".into(),
            meta: ImageMeta::new(w, h).unwrap(),
            intrinsics: CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap(),
            depth_path: "depth.raw".into(),
            instances: vec![InstanceGT {
                instance_id: 1,
                category: "chair".into(),
                box3d: Box3D::axis_aligned(Point3D::new(0.4, 0.0, 2.0), [1.0; 3]).unwrap(),
                mask_path: "mask_1.raw".into(),
            }],
            expressions: vec![],
        };
        let masks = BTreeMap::from([(1, MaskRaster::new(w, h, m).unwrap())]);
        Scene::new(record, DepthRaster::new(w, h, d).unwrap(), masks).unwrap()
    }

    fn anchor(b: Box2D) -> Anchor {
        Anchor { label: "chair".into(), category: "chair".into(), instance_id: Some(1), bbox: AnchorBox::Absolute(b) }
    }

    fn run(scene: &Scene, anchors: &[Anchor]) -> PipelineOutput {
        let cfg = SamplingConfig { n_points: 3, ..SamplingConfig::default() };
        run_pipeline(scene, anchors, &cfg, &SpatialTools::ground_truth(), &GtOracle, IntrinsicsSource::Tool).unwrap()
    }

    #[test]
    fn direct_substitution() {
        let scene = fixture(2.0);
        let out = run(&scene, &[anchor(Box2D::new(370.0, 190.0, 470.0, 290.0).unwrap())]);
        let r = &out.records[0];
        assert_eq!((r.u_c, r.v_c), (420.0, 240.0));
        assert_eq!(r.samples.len(), 3);
        assert_eq!(r.z_bar, Some(2.0));
        assert_eq!(out.boxes[0].box3d.to_array(), [0.4, 0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.center_hat, Some(out.boxes[0].box3d.center));
    }

    #[test]
    fn half_scale_gives_same_box() {
        let scene = fixture(2.0);
        let b = Box2D::new(370.0, 190.0, 470.0, 290.0).unwrap();
        let base = run(&scene, &[anchor(b)]);
        let half = scene.rescaled(RescaleFactor::new(0.5).unwrap());
        let out = run(&half, &[anchor(b.scaled(0.5))]);
        let (p, q) = (base.boxes[0].box3d.to_array(), out.boxes[0].box3d.to_array());
        for (x, y) in p.iter().zip(&q) {
            assert!((x - y).abs() <= 1e-9, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn zero_depth_target_is_flagged() {
        let scene = fixture(0.05);
        let out = run(&scene, &[anchor(Box2D::new(370.0, 190.0, 470.0, 290.0).unwrap())]);
        assert!(out.boxes.is_empty());
        assert!(out.records[0].no_depth);
        assert_eq!(out.records[0].z_bar, None);
    }

    #[test]
    fn normalized_anchor_and_errors() {
        let scene = fixture(2.0);
        let a = Anchor {
            bbox: AnchorBox::Normalized([578.125, 395.833, 734.375, 604.167]),
            ..anchor(Box2D::new(0., 0., 1., 1.).unwrap())
        };
        let out = run(&scene, &[a]);
        assert_eq!(out.records[0].bbox_2d.to_array(), [370.0, 190.0, 470.0, 290.0]);
        let cfg = SamplingConfig::default();
        let tools = SpatialTools::ground_truth();
        assert!(matches!(
            run_pipeline(&scene, &[], &cfg, &tools, &GtOracle, IntrinsicsSource::Tool),
            Err(ReasonerError::EmptyAnchors)
        ));
        let outside = anchor(Box2D::new(600.0, 0.0, 700.0, 10.0).unwrap());
        assert!(matches!(
            run_pipeline(&scene, &[outside], &cfg, &tools, &GtOracle, IntrinsicsSource::Tool),
            Err(ReasonerError::InvalidAnchor { index: 0, .. })
        ));
    }

    #[test]
    fn category_prior_medians() {
        let obs: Vec<(&str, [f64; 3])> = vec![
            ("chair", [1.0, 2.0, 3.0]),
            ("chair", [3.0, 1.0, 1.0]),
            ("chair", [2.0, 5.0, 2.0]),
            ("table", [4.0, 4.0, 1.0]),
            ("table", [2.0, 2.0, 2.0]),
            ("lamp", [0.5, 0.5, 1.5]),
            ("lamp", [0.3, 0.4, 1.0]),
        ];
        let p = CategoryPrior::from_observations(obs.iter().copied()).unwrap();
        // Brute force: for each category and axis, the value with as many
        // observations below as above (or the midpoint of the two middle ones).
        let brute = |vals: Vec<f64>| -> f64 {
            let mut cands: Vec<f64> = vals.clone();
            cands.sort_by(f64::total_cmp);
            let n = cands.len();
            let lo = cands.iter().copied().find(|c| vals.iter().filter(|v| *v <= c).count() * 2 >= n).unwrap();
            let hi = cands.iter().copied().find(|c| vals.iter().filter(|v| *v <= c).count() * 2 > n).unwrap();
            if n % 2 == 1 {
                lo
            } else {
                (lo + hi) / 2.0
            }
        };
        for cat in ["chair", "table", "lamp"] {
            for j in 0..3 {
                let vals: Vec<f64> = obs.iter().filter(|(c, _)| *c == cat).map(|(_, d)| d[j]).collect();
                assert_eq!(p.table()[cat][j], brute(vals), "{cat} axis {j}");
            }
        }
        let g: Vec<f64> = obs.iter().map(|(_, d)| d[0]).collect();
        assert_eq!(p.global()[0], brute(g));

        let e = p.lookup("table");
        assert_eq!(e.dims, [3.0, 3.0, 1.5]);
        assert!(!e.unknown_category);
        let u = estimate_dims_category_prior("sofa", &p);
        assert!(u.unknown_category);
        assert_eq!(u.dims, p.global());
        assert_eq!(u.angles, [0.0; 3]);
        assert!(matches!(CategoryPrior::from_observations(std::iter::empty()), Err(ReasonerError::Config(_))));
    }

    #[test]
    fn mean_depth_ignores_order() {
        let s = |z| DepthSample { u: 0.0, v: 0.0, z };
        assert_eq!(mean_depth(&[]), None);
        assert_eq!(mean_depth(&[s(1.0), s(2.0), s(4.0)]), mean_depth(&[s(4.0), s(1.0), s(2.0)]));
    }
}
