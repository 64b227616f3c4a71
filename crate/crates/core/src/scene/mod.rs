//! Per-frame scene bundles.
//!
//! A bundle is one directory holding `scene.json` (metadata, intrinsics,
//! instances, expressions) plus a `depth.raw` raster and one `mask_<id>.raw`
//! per instance (see [`raster`] for the container format).

pub mod ingest;
pub mod raster;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_point, CameraIntrinsics, ImageMeta, RescaleFactor};
use crate::geometry::{Box2D, Box3D};
pub use raster::{DepthRaster, MaskRaster};

pub const SCENE_FILE: &str = "scene.json";
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{field}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch { field: String, expected: String, found: String },
    #[error("instances: duplicate instance_id {0}")]
    DuplicateInstance(u32),
    #[error("expressions[{index}]: references absent instance_id {instance_id}")]
    DanglingExpression { index: usize, instance_id: u32 },
    #[error("{field}: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("box is not visible in the image: {0}")]
    NotVisible(String),
    #[error("bundle for scene {0} is a virtual rescale and cannot be written")]
    VirtualScene(String),
}

impl SceneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            SceneError::MissingFile(path.to_path_buf())
        } else {
            SceneError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Ground-truth object annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceGT {
    pub instance_id: u32,
    pub category: String,
    pub box3d: Box3D,
    pub mask_path: String,
}

/// A referring expression naming one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expression {
    pub instance_id: u32,
    pub text: String,
}

/// Contents of `scene.json`. Keys are written in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub format_version: u32,
    pub scene_id: String,
    pub meta: ImageMeta,
    pub intrinsics: CameraIntrinsics,
    pub depth_path: String,
    pub instances: Vec<InstanceGT>,
    #[serde(default)]
    pub expressions: Vec<Expression>,
}

impl SceneRecord {
    pub fn instance(&self, id: u32) -> Option<&InstanceGT> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    /// Checks the record-level invariants: unique ids, non-empty categories
    /// and referential integrity of expressions.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.format_version != SCENE_FORMAT_VERSION {
            return Err(SceneError::InvalidField {
                field: "format_version".into(),
                reason: format!("unsupported version {}", self.format_version),
            });
        }
        if self.scene_id.is_empty() {
            return Err(SceneError::InvalidField { field: "scene_id".into(), reason: "must be non-empty".into() });
        }
        let mut seen = BTreeSet::new();
        for (i, inst) in self.instances.iter().enumerate() {
            if !seen.insert(inst.instance_id) {
                return Err(SceneError::DuplicateInstance(inst.instance_id));
            }
            if inst.category.trim().is_empty() {
                return Err(SceneError::InvalidField {
                    field: format!("instances[{i}].category"),
                    reason: "must be non-empty".into(),
                });
            }
        }
        for (index, e) in self.expressions.iter().enumerate() {
            if !seen.contains(&e.instance_id) {
                return Err(SceneError::DanglingExpression { index, instance_id: e.instance_id });
            }
        }
        Ok(())
    }
}

/// Relationship between the pixel space a scene presents and the pixel
/// lattice its rasters are stored in.
///
/// A presented pixel `p` corresponds to raster pixel `p / scale`. Loaded
/// bundles have `scale == 1`; [`Scene::rescaled`] produces views with other
/// scales that share the original rasters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelLattice {
    pub scale: f64,
    pub intrinsics: CameraIntrinsics,
    pub meta: ImageMeta,
}

/// A validated scene with its rasters loaded.
#[derive(Debug, Clone)]
pub struct Scene {
    pub record: SceneRecord,
    depth: Arc<DepthRaster>,
    masks: BTreeMap<u32, Arc<MaskRaster>>,
    lattice: PixelLattice,
}

impl Scene {
    pub fn new(record: SceneRecord, depth: DepthRaster, masks: BTreeMap<u32, MaskRaster>) -> Result<Self, SceneError> {
        record.validate()?;
        let (w, h) = (record.meta.width, record.meta.height);
        if depth.width() != w || depth.height() != h {
            return Err(SceneError::DimensionMismatch {
                field: "depth".into(),
                expected: format!("{w}x{h}"),
                found: format!("{}x{}", depth.width(), depth.height()),
            });
        }
        for inst in &record.instances {
            let m = masks.get(&inst.instance_id).ok_or_else(|| SceneError::InvalidField {
                field: format!("mask_{}", inst.instance_id),
                reason: "no mask raster for instance".into(),
            })?;
            if m.width() != w || m.height() != h {
                return Err(SceneError::DimensionMismatch {
                    field: format!("mask_{}", inst.instance_id),
                    expected: format!("{w}x{h}"),
                    found: format!("{}x{}", m.width(), m.height()),
                });
            }
        }
        let lattice = PixelLattice { scale: 1.0, intrinsics: record.intrinsics, meta: record.meta };
        Ok(Self {
            record,
            depth: Arc::new(depth),
            masks: masks.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            lattice,
        })
    }

    pub fn id(&self) -> &str {
        &self.record.scene_id
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.record.intrinsics
    }

    pub fn meta(&self) -> ImageMeta {
        self.record.meta
    }

    pub fn lattice(&self) -> &PixelLattice {
        &self.lattice
    }

    pub fn depth(&self) -> &Arc<DepthRaster> {
        &self.depth
    }

    pub fn mask(&self, instance_id: u32) -> Option<&Arc<MaskRaster>> {
        self.masks.get(&instance_id)
    }

    pub fn masks(&self) -> impl Iterator<Item = (u32, &Arc<MaskRaster>)> {
        self.masks.iter().map(|(k, v)| (*k, v))
    }

    /// View of this scene under a camera rescale: intrinsics and image size
    /// are multiplied by `s`, metric depth and 3D boxes stay unchanged, and
    /// the rasters are shared. Composes with earlier rescales.
    pub fn rescaled(&self, s: RescaleFactor) -> Scene {
        let mut record = self.record.clone();
        record.intrinsics = record.intrinsics.scaled(s);
        record.meta = record.meta.scaled(s);
        Scene {
            record,
            depth: Arc::clone(&self.depth),
            masks: self.masks.clone(),
            lattice: PixelLattice { scale: self.lattice.scale * s.value(), ..self.lattice },
        }
    }

    /// Physically resized copy: rasters are nearest-neighbour resampled to
    /// the rescaled image size, so the result is a regular bundle.
    pub fn resampled(&self, s: RescaleFactor) -> Result<Scene, SceneError> {
        let view = self.rescaled(s);
        let meta = view.record.meta;
        let depth = raster::resample_depth(&self.depth, meta.width, meta.height);
        let masks = self.masks.iter().map(|(k, m)| (*k, raster::resample_mask(m, meta.width, meta.height))).collect();
        Scene::new(view.record, depth, masks)
    }

    /// GT 2D box of an instance in the presented pixel space: projected in
    /// the raster lattice, then mapped through the lattice scale.
    pub fn gt_box2d(&self, instance_id: u32) -> Result<Box2D, SceneError> {
        let inst = self.record.instance(instance_id).ok_or_else(|| SceneError::InvalidField {
            field: "instance_id".into(),
            reason: format!("no instance {instance_id}"),
        })?;
        let b = project_box_to_2d(&inst.box3d, &self.lattice.intrinsics, &self.lattice.meta)?;
        Ok(if self.lattice.scale == 1.0 { b } else { b.scaled(self.lattice.scale) })
    }
}

/// Projects a 3D box into the image: corners in front of the camera are
/// projected, their pixel bound is clamped to `[0, W] x [0, H]` and rounded
/// outward.
pub fn project_box_to_2d(b: &Box3D, k: &CameraIntrinsics, meta: &ImageMeta) -> Result<Box2D, SceneError> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for corner in b.corners().iter().filter(|c| c.z > 0.0) {
        let (u, v) = project_point(corner, k).expect("corner is in front of the camera");
        lo = [lo[0].min(u), lo[1].min(v)];
        hi = [hi[0].max(u), hi[1].max(v)];
        any = true;
    }
    if !any {
        return Err(SceneError::NotVisible("all corners are behind the camera".into()));
    }
    let (w, h) = (meta.width as f64, meta.height as f64);
    let u_min = lo[0].clamp(0.0, w).floor();
    let v_min = lo[1].clamp(0.0, h).floor();
    let u_max = hi[0].clamp(0.0, w).ceil();
    let v_max = hi[1].clamp(0.0, h).ceil();
    if u_min >= u_max || v_min >= v_max {
        return Err(SceneError::NotVisible("projection lies outside the image".into()));
    }
    Ok(Box2D::new(u_min, v_min, u_max, v_max).expect("clamped bound is ordered"))
}

/// Loads and validates a bundle directory.
pub fn load_scene(dir: &Path) -> Result<Scene, SceneError> {
    let path = dir.join(SCENE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SceneError::io(&path, e))?;
    let record: SceneRecord =
        serde_json::from_str(&text).map_err(|e| SceneError::Json { path: path.clone(), message: e.to_string() })?;
    record.validate()?;
    let depth = raster::read_depth(&dir.join(&record.depth_path))?;
    let mut masks = BTreeMap::new();
    for inst in &record.instances {
        masks.insert(inst.instance_id, raster::read_mask(&dir.join(&inst.mask_path))?);
    }
    Scene::new(record, depth, masks)
}

/// Writes a bundle directory, creating it if needed.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<(), SceneError> {
    if scene.lattice.scale != 1.0 {
        return Err(SceneError::VirtualScene(scene.id().to_string()));
    }
    fs::create_dir_all(dir).map_err(|e| SceneError::io(dir, e))?;
    let path = dir.join(SCENE_FILE);
    let mut text = serde_json::to_string_pretty(&scene.record)
        .map_err(|e| SceneError::Json { path: path.clone(), message: e.to_string() })?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| SceneError::io(&path, e))?;
    raster::write_depth(&dir.join(&scene.record.depth_path), &scene.depth)?;
    for inst in &scene.record.instances {
        raster::write_mask(&dir.join(&inst.mask_path), &scene.masks[&inst.instance_id])?;
    }
    Ok(())
}

/// Finds every bundle directly below `root`, keyed by scene id.
pub fn index_scenes(root: &Path) -> Result<BTreeMap<String, PathBuf>, SceneError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| SceneError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| SceneError::io(root, e))?;
        let dir = entry.path();
        let file = dir.join(SCENE_FILE);
        if !file.is_file() {
            continue;
        }
        #[derive(Deserialize)]
        struct Head {
            scene_id: String,
        }
        let text = fs::read_to_string(&file).map_err(|e| SceneError::io(&file, e))?;
        let head: Head =
            serde_json::from_str(&text).map_err(|e| SceneError::Json { path: file.clone(), message: e.to_string() })?;
        out.insert(head.scene_id, dir);
    }
    Ok(out)
}

/// Loads every bundle below `root`, ordered by scene id.
pub fn load_corpus(root: &Path) -> Result<Vec<Scene>, SceneError> {
    index_scenes(root)?.values().map(|dir| load_scene(dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Point3D;

    fn k0() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn meta0() -> ImageMeta {
        ImageMeta::new(640, 480).unwrap()
    }

    #[test]
    fn project_unit_cube() {
        let b = Box3D::axis_aligned(Point3D::new(0.0, 0.0, 5.0), [1.0; 3]).unwrap();
        let r = project_box_to_2d(&b, &k0(), &meta0()).unwrap();
        // Near face at Z = 4.5 spans 320 +- 250 / 4.5 px.
        assert_eq!(r.to_array(), [264.0, 184.0, 376.0, 296.0]);
    }

    #[test]
    fn project_behind_camera() {
        let b = Box3D::axis_aligned(Point3D::new(0.0, 0.0, -5.0), [1.0; 3]).unwrap();
        assert!(matches!(project_box_to_2d(&b, &k0(), &meta0()), Err(SceneError::NotVisible(_))));
    }

    #[test]
    fn project_clamps_to_image() {
        let b = Box3D::axis_aligned(Point3D::new(0.6, 0.0, 1.0), [1.0; 3]).unwrap();
        let r = project_box_to_2d(&b, &k0(), &meta0()).unwrap();
        assert_eq!(r.u_max, 640.0);
        assert!(r.u_min >= 0.0 && r.v_min >= 0.0 && r.v_max <= 480.0);
    }

    fn record() -> SceneRecord {
        SceneRecord {
            format_version: SCENE_FORMAT_VERSION,
            scene_id: "s".into(),
            meta: ImageMeta::new(2, 2).unwrap(),
            intrinsics: k0(),
            depth_path: "depth.raw".into(),
            instances: vec![InstanceGT {
                instance_id: 3,
                category: "chair".into(),
                box3d: Box3D::axis_aligned(Point3D::new(0.0, 0.0, 2.0), [1.0; 3]).unwrap(),
                mask_path: "mask_3.raw".into(),
            }],
            expressions: vec![Expression { instance_id: 3, text: "the chair".into() }],
        }
    }

    #[test]
    fn record_validation() {
        assert!(record().validate().is_ok());
        let mut r = record();
        r.expressions[0].instance_id = 9;
        assert!(matches!(r.validate(), Err(SceneError::DanglingExpression { index: 0, instance_id: 9 })));
        let mut r = record();
        r.instances.push(r.instances[0].clone());
        assert!(matches!(r.validate(), Err(SceneError::DuplicateInstance(3))));
        let mut r = record();
        r.instances[0].category = " ".into();
        assert!(matches!(r.validate(), Err(SceneError::InvalidField { .. })));
    }

    #[test]
    fn scene_rejects_wrong_raster_size() {
        let depth = DepthRaster::new(3, 1, vec![1.0; 3]).unwrap();
        let masks = BTreeMap::from([(3, MaskRaster::new(2, 2, vec![1; 4]).unwrap())]);
        assert!(matches!(Scene::new(record(), depth, masks), Err(SceneError::DimensionMismatch { .. })));
    }

    #[test]
    fn rescaled_view_keeps_rasters() {
        let depth = DepthRaster::new(2, 2, vec![1.0; 4]).unwrap();
        let masks = BTreeMap::from([(3, MaskRaster::new(2, 2, vec![1; 4]).unwrap())]);
        let s = Scene::new(record(), depth, masks).unwrap();
        let v = s.rescaled(RescaleFactor::new(2.0).unwrap());
        assert_eq!(v.meta(), ImageMeta::new(4, 4).unwrap());
        assert_eq!(v.intrinsics().fx, 1000.0);
        assert_eq!(v.lattice().scale, 2.0);
        assert_eq!(v.depth().width(), 2);
        assert_eq!(v.record.instances, s.record.instances);
        assert!(matches!(save_scene(&v, Path::new("/nonexistent")), Err(SceneError::VirtualScene(_))));
        let r = s.resampled(RescaleFactor::new(2.0).unwrap()).unwrap();
        assert_eq!(r.depth().width(), 4);
        assert_eq!(r.lattice().scale, 1.0);
    }
}
