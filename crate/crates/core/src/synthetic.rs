//! Deterministic ray-cast scenes for tests, fixtures and the sweep.
//!
//! Each scene holds one to three oriented boxes in front of a flat back
//! wall. Depth is the ray-cast distance along the optical axis; each mask is
//! the set of pixels where its box is the nearest surface. A small fraction
//! of object pixels is corrupted to invalid (0) or near-zero depth so the
//! depth filter has something to reject.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{back_project, CameraIntrinsics, ImageMeta};
use crate::geometry::Box3D;
use crate::scene::{DepthRaster, Expression, InstanceGT, MaskRaster, Scene, SceneRecord, SCENE_FORMAT_VERSION};

pub const SYNTH_WIDTH: u32 = 320;
pub const SYNTH_HEIGHT: u32 = 240;
const WALL_DEPTH: f64 = 8.0;
const MIN_MASK_PIXELS: usize = 60;

/// Category name and nominal `[l, w, h]` in meters.
pub const SYNTH_CATEGORIES: [(&str, [f64; 3]); 8] = [
    ("chair", [0.6, 0.6, 0.9]),
    ("table", [1.4, 0.8, 0.75]),
    ("lamp", [0.4, 0.4, 1.4]),
    ("sofa", [1.8, 0.9, 0.8]),
    ("cabinet", [1.0, 0.5, 1.6]),
    ("bed", [1.9, 1.5, 0.6]),
    ("monitor", [0.6, 0.25, 0.45]),
    ("trash can", [0.35, 0.35, 0.5]),
];

fn ray_hit(b: &Box3D, dir: [f64; 3]) -> Option<f64> {
    let r = b.rotation();
    let c = [b.center.x, b.center.y, b.center.z];
    let o = r.transpose_mul_vec([-c[0], -c[1], -c[2]]);
    let d = r.transpose_mul_vec(dir);
    let h = b.half_extents();
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let a = (-h[k] - o[k]) / d[k];
        let bb = (h[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn bounding_radius(b: &Box3D) -> f64 {
    let [x, y, z] = b.half_extents();
    (x * x + y * y + z * z).sqrt()
}

fn place_boxes(rng: &mut ChaCha8Rng, k: &CameraIntrinsics, n: usize) -> Vec<(usize, Box3D)> {
    let mut out: Vec<(usize, Box3D)> = Vec::new();
    let mut attempts = 0;
    while out.len() < n && attempts < 200 {
        attempts += 1;
        let cat = rng.gen_range(0..SYNTH_CATEGORIES.len());
        let nominal = SYNTH_CATEGORIES[cat].1;
        let dims = nominal.map(|d| d * rng.gen_range(0.85..1.15));
        let u = rng.gen_range(60.0..(SYNTH_WIDTH as f64 - 60.0));
        let v = rng.gen_range(50.0..(SYNTH_HEIGHT as f64 - 50.0));
        let z = rng.gen_range(2.5..6.0);
        let center = back_project(u, v, z, k).expect("positive depth");
        let angles = [
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ];
        let b = Box3D::new(center, dims, angles).expect("valid synthetic box");
        if center.z - bounding_radius(&b) < 0.5 {
            continue;
        }
        let clear = out.iter().all(|(_, o)| {
            let d =
                ((o.center.x - center.x).powi(2) + (o.center.y - center.y).powi(2) + (o.center.z - center.z).powi(2))
                    .sqrt();
            d > bounding_radius(o) + bounding_radius(&b)
        });
        if clear {
            out.push((cat, b));
        }
    }
    out
}

fn render(k: &CameraIntrinsics, boxes: &[(usize, Box3D)], rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<Vec<u8>>) {
    let (w, h) = (SYNTH_WIDTH as usize, SYNTH_HEIGHT as usize);
    let mut depth = vec![WALL_DEPTH as f32; w * h];
    let mut masks = vec![vec![0u8; w * h]; boxes.len()];
    for v in 0..h {
        for u in 0..w {
            let dir = [(u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0];
            let nearest = boxes
                .iter()
                .enumerate()
                .filter_map(|(i, (_, b))| ray_hit(b, dir).map(|t| (i, t)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let px = v * w + u;
            if let Some((i, t)) = nearest {
                masks[i][px] = 1;
                let roll: f64 = rng.gen();
                depth[px] = if roll < 0.03 {
                    0.0
                } else if roll < 0.05 {
                    0.05
                } else {
                    t as f32
                };
            }
        }
    }
    (depth, masks)
}

/// Scene `index` of the corpus generated from `seed`.
pub fn synthetic_scene(seed: u64, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let f = rng.gen_range(220.0..280.0);
    let k = CameraIntrinsics::new(
        f,
        f * rng.gen_range(0.98..1.02),
        SYNTH_WIDTH as f64 / 2.0 + rng.gen_range(-4.0..4.0),
        SYNTH_HEIGHT as f64 / 2.0 + rng.gen_range(-4.0..4.0),
    )
    .expect("valid synthetic intrinsics");
    loop {
        let n = rng.gen_range(1..=3);
        let boxes = place_boxes(&mut rng, &k, n);
        if boxes.is_empty() {
            continue;
        }
        let (depth, masks) = render(&k, &boxes, &mut rng);
        if masks.iter().any(|m| m.iter().filter(|x| **x != 0).count() < MIN_MASK_PIXELS) {
            continue;
        }
        return assemble(index, k, &boxes, depth, masks);
    }
}

fn assemble(
    index: usize,
    k: CameraIntrinsics,
    boxes: &[(usize, Box3D)],
    depth: Vec<f32>,
    masks: Vec<Vec<u8>>,
) -> Scene {
    let (w, h) = (SYNTH_WIDTH, SYNTH_HEIGHT);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|a, b| boxes[*a].1.center.x.total_cmp(&boxes[*b].1.center.x));
    let mut instances = Vec::new();
    let mut expressions = Vec::new();
    let mut rasters = BTreeMap::new();
    for (i, (cat, b)) in boxes.iter().enumerate() {
        let id = i as u32 + 1;
        let category = SYNTH_CATEGORIES[*cat].0.to_string();
        let rank = order.iter().position(|o| *o == i).unwrap();
        let place = match (rank, boxes.len()) {
            (_, 1) => "in view".to_string(),
            (0, _) => "furthest to the left".to_string(),
            (r, n) if r + 1 == n => "furthest to the right".to_string(),
            _ => "in the middle".to_string(),
        };
        expressions.push(Expression { instance_id: id, text: format!("the {category} {place}") });
        instances.push(InstanceGT { instance_id: id, category, box3d: *b, mask_path: format!("mask_{id}.raw") });
        rasters.insert(id, MaskRaster::new(w, h, masks[i].clone()).expect("sized mask"));
    }
    let record = SceneRecord {
        format_version: SCENE_FORMAT_VERSION,
        scene_id: format!("synth_{index:04}"),
        meta: ImageMeta::new(w, h).expect("nonzero size"),
        intrinsics: k,
        depth_path: "depth.raw".into(),
        instances,
        expressions,
    };
    Scene::new(record, DepthRaster::new(w, h, depth).expect("valid depth"), rasters)
        .expect("synthetic scene is consistent")
}

/// The first `n` scenes for `seed`.
pub fn synthetic_corpus(seed: u64, n: usize) -> Vec<Scene> {
    (0..n).map(|i| synthetic_scene(seed, i)).collect()
}
