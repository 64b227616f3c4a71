//! The two spatial tools: camera intrinsic retrieval and multi-point metric
//! depth sampling, over pluggable depth and mask providers.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::geometry::{iou_2d, serialize_pixel, Box2D};
use crate::scene::{DepthRaster, MaskRaster, Scene};

/// Slack for query boxes that touch the right or bottom image edge after a
/// rescale rounded the image size down.
const BOUNDS_EPS: f64 = 1e-6;
/// Lattice coordinates within this distance of an integer snap to it.
const SNAP_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("query {index}: {reason}")]
    InvalidQuery { index: usize, reason: String },
    #[error("query {index}: provider failed: {message}")]
    Provider { index: usize, message: String },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ProviderError(pub String);

/// One sampled `(u, v, Z)` triplet. Pixel coordinates are in the scene's
/// presented pixel space; `z` is in meters at full precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Serialize for DepthSample {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeTuple;
        struct Px(f64);
        impl Serialize for Px {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                serialize_pixel(self.0, s)
            }
        }
        let mut t = s.serialize_tuple(3)?;
        t.serialize_element(&Px(self.u))?;
        t.serialize_element(&Px(self.v))?;
        t.serialize_element(&self.z)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for DepthSample {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [u, v, z] = <[f64; 3]>::deserialize(d)?;
        if !(u.is_finite() && v.is_finite() && z.is_finite() && z >= 0.0) {
            return Err(D::Error::custom(format!("invalid depth sample [{u}, {v}, {z}]")));
        }
        Ok(Self { u, v, z })
    }
}

/// A `(category, bbox_2d)` query for the depth sampling tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthQuery {
    pub category: String,
    pub bbox_2d: Box2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_points: usize,
    pub min_depth: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n_points: 5, min_depth: 0.1, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), ToolError> {
        if self.n_points == 0 {
            return Err(ToolError::InvalidConfig("n_points must be at least 1".into()));
        }
        if !(self.min_depth.is_finite() && self.min_depth >= 0.0) {
            return Err(ToolError::InvalidConfig(format!("min_depth must be finite and >= 0, got {}", self.min_depth)));
        }
        Ok(())
    }
}

/// Supplies the dense metric depth map of a scene, in the scene's raster
/// lattice.
pub trait DepthProvider: Send + Sync {
    fn depth_map(&self, scene: &Scene) -> Result<Arc<DepthRaster>, ProviderError>;
}

/// Supplies the object mask for a category prompted by a box. The box is
/// given in the raster lattice. `Ok(None)` means no object was found.
pub trait MaskProvider: Send + Sync {
    fn mask(&self, scene: &Scene, category: &str, bbox: &Box2D) -> Result<Option<Arc<MaskRaster>>, ProviderError>;
}

/// Depth straight from the scene bundle.
#[derive(Debug, Clone, Copy, Default)]
pub struct GtDepth;

impl DepthProvider for GtDepth {
    fn depth_map(&self, scene: &Scene) -> Result<Arc<DepthRaster>, ProviderError> {
        Ok(Arc::clone(scene.depth()))
    }
}

/// Ground-truth instance masks. Picks the instance of the prompted category
/// whose mask bound overlaps the prompt box most (ties go to the lower
/// instance id).
#[derive(Debug, Clone, Copy, Default)]
pub struct GtMasks;

impl MaskProvider for GtMasks {
    fn mask(&self, scene: &Scene, category: &str, bbox: &Box2D) -> Result<Option<Arc<MaskRaster>>, ProviderError> {
        let mut best: Option<(f64, &Arc<MaskRaster>)> = None;
        for inst in scene.record.instances.iter().filter(|i| i.category == category) {
            let Some(mask) = scene.mask(inst.instance_id) else { continue };
            let Some([a, b, c, d]) = mask.bounds() else { continue };
            let mb = Box2D::new(a as f64, b as f64, c as f64, d as f64).expect("ordered bound");
            let overlap = iou_2d(&mb, bbox);
            if overlap > 0.0 && best.is_none_or(|(o, _)| overlap > o) {
                best = Some((overlap, mask));
            }
        }
        Ok(best.map(|(_, m)| Arc::clone(m)))
    }
}

/// The tool library bound to a pair of providers.
#[derive(Clone)]
pub struct SpatialTools {
    depth: Arc<dyn DepthProvider>,
    masks: Arc<dyn MaskProvider>,
}

impl std::fmt::Debug for SpatialTools {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpatialTools").finish_non_exhaustive()
    }
}

impl Default for SpatialTools {
    fn default() -> Self {
        Self::ground_truth()
    }
}

impl SpatialTools {
    pub fn new(depth: Arc<dyn DepthProvider>, masks: Arc<dyn MaskProvider>) -> Self {
        Self { depth, masks }
    }

    /// Tools backed by the bundle's own depth raster and instance masks.
    pub fn ground_truth() -> Self {
        Self::new(Arc::new(GtDepth), Arc::new(GtMasks))
    }

    pub fn camera_intrinsics(&self, scene: &Scene) -> CameraIntrinsics {
        camera_intrinsic_tool(scene)
    }

    /// Samples up to `cfg.n_points` valid depth pixels per query.
    ///
    /// Valid pixels lie inside the query box and the provider mask and have
    /// depth `>= cfg.min_depth`. When more are available, `n_points` of them
    /// are drawn uniformly without replacement with an RNG seeded from
    /// `cfg.seed`, the category and the query box, so results do not depend on
    /// the other queries. Output is sorted by `(v, u)`.
    pub fn depth_sampling(
        &self,
        scene: &Scene,
        queries: &[DepthQuery],
        cfg: &SamplingConfig,
    ) -> Result<Vec<Vec<DepthSample>>, ToolError> {
        cfg.validate()?;
        let depth = self.depth.depth_map(scene).map_err(|e| ToolError::Provider { index: 0, message: e.0 })?;
        let lattice = scene.lattice();
        if depth.width() != lattice.meta.width || depth.height() != lattice.meta.height {
            return Err(ToolError::Provider {
                index: 0,
                message: format!(
                    "depth map is {}x{}, scene lattice is {}x{}",
                    depth.width(),
                    depth.height(),
                    lattice.meta.width,
                    lattice.meta.height
                ),
            });
        }
        queries.iter().enumerate().map(|(index, q)| self.sample_query(scene, &depth, index, q, cfg)).collect()
    }

    fn sample_query(
        &self,
        scene: &Scene,
        depth: &DepthRaster,
        index: usize,
        query: &DepthQuery,
        cfg: &SamplingConfig,
    ) -> Result<Vec<DepthSample>, ToolError> {
        let lattice = scene.lattice();
        let scale = lattice.scale;
        let meta = scene.meta();
        let max_u = (meta.width as f64).max(scale * lattice.meta.width as f64) + BOUNDS_EPS;
        let max_v = (meta.height as f64).max(scale * lattice.meta.height as f64) + BOUNDS_EPS;
        let b = &query.bbox_2d;
        if b.u_min < -BOUNDS_EPS || b.v_min < -BOUNDS_EPS || b.u_max > max_u || b.v_max > max_v {
            return Err(ToolError::InvalidQuery {
                index,
                reason: format!("bbox {:?} outside image {}x{}", b.to_array(), meta.width, meta.height),
            });
        }
        let snap = |c: f64| {
            let x = c / scale;
            if (x - x.round()).abs() < SNAP_EPS {
                x.round()
            } else {
                x
            }
        };
        let src = Box2D::new(snap(b.u_min), snap(b.v_min), snap(b.u_max), snap(b.v_max))
            .map_err(|e| ToolError::InvalidQuery { index, reason: e.to_string() })?;

        let mask =
            self.masks.mask(scene, &query.category, &src).map_err(|e| ToolError::Provider { index, message: e.0 })?;
        let Some(mask) = mask else { return Ok(Vec::new()) };
        if mask.width() != depth.width() || mask.height() != depth.height() {
            return Err(ToolError::Provider {
                index,
                message: format!(
                    "mask is {}x{}, depth is {}x{}",
                    mask.width(),
                    mask.height(),
                    depth.width(),
                    depth.height()
                ),
            });
        }

        let (w, h) = (depth.width(), depth.height());
        let u0 = src.u_min.ceil().max(0.0) as u32;
        let v0 = src.v_min.ceil().max(0.0) as u32;
        let u1 = (src.u_max.ceil().max(0.0) as u32).min(w);
        let v1 = (src.v_max.ceil().max(0.0) as u32).min(h);
        // Row-major scan, so candidates are already ordered by (v, u).
        let mut candidates: Vec<(u32, u32, f64)> = Vec::new();
        for v in v0..v1 {
            for u in u0..u1 {
                if !mask.contains(u, v) {
                    continue;
                }
                let z = depth.get(u, v) as f64;
                if z >= cfg.min_depth && z > 0.0 {
                    candidates.push((u, v, z));
                }
            }
        }
        if candidates.len() > cfg.n_points {
            let mut rng = ChaCha8Rng::from_seed(query_seed(cfg.seed, &query.category, &src));
            let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), cfg.n_points).into_vec();
            picked.sort_unstable();
            candidates = picked.into_iter().map(|i| candidates[i]).collect();
        }
        Ok(candidates
            .into_iter()
            .map(|(u, v, z)| DepthSample { u: u as f64 * scale, v: v as f64 * scale, z })
            .collect())
    }
}

fn query_seed(seed: u64, category: &str, src: &Box2D) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(category.as_bytes());
    h.update([0u8]);
    for c in src.to_array() {
        h.update(c.to_bits().to_le_bytes());
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

/// Returns the scene's stored intrinsics verbatim.
pub fn camera_intrinsic_tool(scene: &Scene) -> CameraIntrinsics {
    scene.intrinsics()
}

/// Depth sampling with the ground-truth providers.
pub fn depth_sampling_tool(
    scene: &Scene,
    queries: &[DepthQuery],
    cfg: &SamplingConfig,
) -> Result<Vec<Vec<DepthSample>>, ToolError> {
    SpatialTools::ground_truth().depth_sampling(scene, queries, cfg)
}
