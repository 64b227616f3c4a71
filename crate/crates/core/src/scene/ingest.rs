//! Conversion of a flat CSV + image-list layout into scene bundles.
//!
//! Input directory layout:
//!
//! ```text
//! frames.csv       scene_id,width,height,fx,fy,cx,cy,depth,depth_scale
//! instances.csv    scene_id,instance_id,category,x,y,z,l,w,h,yaw,pitch,roll,mask
//! expressions.csv  scene_id,instance_id,text            (optional)
//! ```
//!
//! `depth` and `mask` are paths relative to the input directory. A `.raw`
//! path is read as a GAR1 raster; anything else is decoded as an image. Depth
//! images must be single-channel 16-bit (ScanNet style) and are multiplied by
//! `depth_scale` to obtain meters; mask images are 8-bit, nonzero inside.
//! Each `frames.csv` row is one target frame; no frame selection is done.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::raster::{self, DepthRaster, MaskRaster};
use super::{save_scene, Expression, InstanceGT, Scene, SceneError, SceneRecord, SCENE_FORMAT_VERSION};
use crate::camera::{CameraIntrinsics, ImageMeta, Point3D, RescaleFactor};
use crate::geometry::Box3D;

#[derive(Debug, Deserialize)]
struct FrameRow {
    scene_id: String,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    depth: String,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    0.001
}

#[derive(Debug, Deserialize)]
struct InstanceRow {
    scene_id: String,
    instance_id: u32,
    category: String,
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
    pitch: f64,
    roll: f64,
    mask: String,
}

#[derive(Debug, Deserialize)]
struct ExpressionRow {
    scene_id: String,
    instance_id: u32,
    text: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Only convert this frame.
    pub frame: Option<String>,
    /// Physically resize every bundle by this factor.
    pub rescale: Option<RescaleFactor>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SceneError> {
    let file = File::open(path).map_err(|e| SceneError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| SceneError::InvalidField {
                field: format!("{}:{}", path.display(), i + 2),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "raw")
}

fn image_error(path: &Path, e: image::ImageError) -> SceneError {
    SceneError::MalformedHeader { path: path.to_path_buf(), reason: e.to_string() }
}

fn load_depth(path: &Path, scale: f64) -> Result<DepthRaster, SceneError> {
    if is_raw(path) {
        return raster::read_depth(path);
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => SceneError::io(path, io),
        e => image_error(path, e),
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(SceneError::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("depth image must be 16-bit single channel, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|d| (d as f64 * scale) as f32).collect();
    DepthRaster::new(w, h, values)
}

fn load_mask(path: &Path) -> Result<MaskRaster, SceneError> {
    if is_raw(path) {
        return raster::read_mask(path);
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => SceneError::io(path, io),
        e => image_error(path, e),
    })?;
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|m| u8::from(m != 0)).collect();
    MaskRaster::new(w, h, values)
}

/// Builds one scene per `frames.csv` row from the files in `input`.
pub fn read_csv_layout(input: &Path, opts: &IngestOptions) -> Result<Vec<Scene>, SceneError> {
    let frames: Vec<FrameRow> = read_rows(&input.join("frames.csv"))?;
    let instances: Vec<InstanceRow> = read_rows(&input.join("instances.csv"))?;
    let expr_path = input.join("expressions.csv");
    let expressions: Vec<ExpressionRow> = if expr_path.exists() { read_rows(&expr_path)? } else { Vec::new() };

    let mut by_scene: BTreeMap<&str, Vec<&InstanceRow>> = BTreeMap::new();
    for row in &instances {
        by_scene.entry(row.scene_id.as_str()).or_default().push(row);
    }
    let mut exprs_by_scene: BTreeMap<&str, Vec<&ExpressionRow>> = BTreeMap::new();
    for row in &expressions {
        exprs_by_scene.entry(row.scene_id.as_str()).or_default().push(row);
    }

    let mut scenes = Vec::new();
    for frame in frames.iter().filter(|f| opts.frame.as_ref().is_none_or(|id| *id == f.scene_id)) {
        let field = |name: &str| format!("frames.csv[{}].{name}", frame.scene_id);
        let meta = ImageMeta::new(frame.width, frame.height)
            .map_err(|e| SceneError::InvalidField { field: field("width"), reason: e.to_string() })?;
        let intrinsics = CameraIntrinsics::new(frame.fx, frame.fy, frame.cx, frame.cy)
            .map_err(|e| SceneError::InvalidField { field: field("fx"), reason: e.to_string() })?;
        let depth = load_depth(&input.join(&frame.depth), frame.depth_scale)?;

        let mut insts = Vec::new();
        let mut masks = BTreeMap::new();
        for row in by_scene.get(frame.scene_id.as_str()).into_iter().flatten() {
            let box3d =
                Box3D::new(Point3D::new(row.x, row.y, row.z), [row.l, row.w, row.h], [row.yaw, row.pitch, row.roll])
                    .map_err(|e| SceneError::InvalidField {
                        field: format!("instances.csv[{}:{}]", row.scene_id, row.instance_id),
                        reason: e.to_string(),
                    })?;
            masks.insert(row.instance_id, load_mask(&input.join(&row.mask))?);
            insts.push(InstanceGT {
                instance_id: row.instance_id,
                category: row.category.clone(),
                box3d,
                mask_path: format!("mask_{}.raw", row.instance_id),
            });
        }
        let exprs = exprs_by_scene
            .get(frame.scene_id.as_str())
            .into_iter()
            .flatten()
            .map(|r| Expression { instance_id: r.instance_id, text: r.text.clone() })
            .collect();

        let record = SceneRecord {
            format_version: SCENE_FORMAT_VERSION,
            scene_id: frame.scene_id.clone(),
            meta,
            intrinsics,
            depth_path: "depth.raw".into(),
            instances: insts,
            expressions: exprs,
        };
        let scene = Scene::new(record, depth, masks)?;
        scenes.push(match opts.rescale {
            Some(s) => scene.resampled(s)?,
            None => scene,
        });
    }
    if let Some(id) = &opts.frame {
        if scenes.is_empty() {
            return Err(SceneError::InvalidField {
                field: "frame".into(),
                reason: format!("no frame {id} in frames.csv"),
            });
        }
    }
    Ok(scenes)
}

/// Reads the CSV layout and writes one bundle per frame below `output`.
pub fn ingest(input: &Path, output: &Path, opts: &IngestOptions) -> Result<Vec<PathBuf>, SceneError> {
    let scenes = read_csv_layout(input, opts)?;
    let mut written = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let dir = output.join(scene.id());
        save_scene(scene, &dir)?;
        written.push(dir);
    }
    Ok(written)
}
