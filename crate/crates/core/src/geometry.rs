//! 2D pixel boxes, 9-DoF oriented 3D boxes, and intersection-over-union.
//!
//! Rotation convention: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, i.e. intrinsic
//! yaw about Z, then pitch about the new Y, then roll about the new X.
//! Extents `l`, `w`, `h` lie along the box-local x, y and z axes.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::camera::Point3D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid 2D box [{0}, {1}, {2}, {3}]: need finite min <= max")]
    InvalidBox2D(f64, f64, f64, f64),
    #[error("invalid 3D box: {0}")]
    InvalidBox3D(String),
}

/// Writes a pixel coordinate as a JSON integer when it is integral and as a
/// real otherwise.
pub(crate) fn serialize_pixel<S: Serializer>(x: f64, s: S) -> Result<S::Ok, S::Error> {
    if x.fract() == 0.0 && x.abs() < 9.007_199_254_740_992e15 {
        s.serialize_i64(x as i64)
    } else {
        s.serialize_f64(x)
    }
}

/// Axis-aligned pixel rectangle `[u_min, v_min, u_max, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl Box2D {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Result<Self, GeometryError> {
        let finite = [u_min, v_min, u_max, v_max].iter().all(|c| c.is_finite());
        if !finite || u_min > u_max || v_min > v_max {
            return Err(GeometryError::InvalidBox2D(u_min, v_min, u_max, v_max));
        }
        Ok(Self { u_min, v_min, u_max, v_max })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Multiplies every coordinate by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { u_min: self.u_min * s, v_min: self.v_min * s, u_max: self.u_max * s, v_max: self.v_max * s }
    }
}

impl Serialize for Box2D {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(4))?;
        for c in self.to_array() {
            seq.serialize_element(&PixelValue(c))?;
        }
        seq.end()
    }
}

struct PixelValue(f64);

impl Serialize for PixelValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_pixel(self.0, s)
    }
}

impl<'de> Deserialize<'de> for Box2D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [a, b, c, e] = <[f64; 4]>::deserialize(d)?;
        Box2D::new(a, b, c, e).map_err(D::Error::custom)
    }
}

/// Center of a 2D box: `((u_min + u_max) / 2, (v_min + v_max) / 2)`.
pub fn box2d_center(b: &Box2D) -> (f64, f64) {
    ((b.u_min + b.u_max) / 2.0, (b.v_min + b.v_max) / 2.0)
}

/// Axis-aligned rectangle IoU; zero when the union has zero area.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.u_max.min(b.u_max) - a.u_min.max(b.u_min)).max(0.0);
    let ih = (a.v_max.min(b.v_max) - a.v_min.max(b.v_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Wraps an angle into `(-pi, pi]`. Values already in range are returned
/// unchanged, so the map is idempotent.
pub fn canonical_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// 9-DoF oriented box `[X_c, Y_c, Z_c, l, w, h, yaw, pitch, roll]` in the
/// camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Point3D,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Box3D {
    pub fn new(center: Point3D, dims: [f64; 3], angles: [f64; 3]) -> Result<Self, GeometryError> {
        if !center.is_finite() {
            return Err(GeometryError::InvalidBox3D(format!("non-finite center {center:?}")));
        }
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(GeometryError::InvalidBox3D(format!("extents must be positive, got {dims:?}")));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(GeometryError::InvalidBox3D(format!("non-finite angles {angles:?}")));
        }
        Ok(Self {
            center,
            l: dims[0],
            w: dims[1],
            h: dims[2],
            yaw: canonical_angle(angles[0]),
            pitch: canonical_angle(angles[1]),
            roll: canonical_angle(angles[2]),
        })
    }

    /// Axis-aligned box with zero angles.
    pub fn axis_aligned(center: Point3D, dims: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(center, dims, [0.0; 3])
    }

    pub fn from_array(a: [f64; 9]) -> Result<Self, GeometryError> {
        Self::new(Point3D::new(a[0], a[1], a[2]), [a[3], a[4], a[5]], [a[6], a[7], a[8]])
    }

    pub fn to_array(&self) -> [f64; 9] {
        [self.center.x, self.center.y, self.center.z, self.l, self.w, self.h, self.yaw, self.pitch, self.roll]
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    pub fn half_extents(&self) -> [f64; 3] {
        [self.l / 2.0, self.w / 2.0, self.h / 2.0]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Same box with pitch and roll zeroed.
    pub fn yaw_only(&self) -> Self {
        Self { pitch: 0.0, roll: 0.0, ..*self }
    }

    /// Box-to-camera rotation; column `j` is the camera-frame direction of
    /// local axis `j`.
    pub fn rotation(&self) -> Mat3 {
        rotation_zyx(self.yaw, self.pitch, self.roll)
    }

    /// The eight corners in Gray-code order over the local sign lattice:
    /// `(-,-,-) (+,-,-) (+,+,-) (-,+,-) (-,+,+) (+,+,+) (+,-,+) (-,-,+)`.
    pub fn corners(&self) -> [Point3D; 8] {
        let r = self.rotation();
        let [hx, hy, hz] = self.half_extents();
        let c = [self.center.x, self.center.y, self.center.z];
        GRAY_SIGNS.map(|[sx, sy, sz]| {
            let local = [sx * hx, sy * hy, sz * hz];
            let p = add(c, r.mul_vec(local));
            Point3D::new(p[0], p[1], p[2])
        })
    }

    /// Whether `p` lies inside or on the surface of the box.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        BoxFrame::new(self).contains(p)
    }

    fn center_array(&self) -> [f64; 3] {
        [self.center.x, self.center.y, self.center.z]
    }

    /// World-frame axis-aligned bound as `(min, max)`.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.corners() {
            for (i, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        (lo, hi)
    }

    /// Outward face planes `(n, d)` with `n . p <= d` for interior points.
    fn half_spaces(&self) -> [([f64; 3], f64); 6] {
        let r = self.rotation();
        let c = self.center_array();
        let half = self.half_extents();
        let mut out = [([0.0; 3], 0.0); 6];
        for axis in 0..3 {
            let n = r.column(axis);
            let nc = dot(n, c);
            out[2 * axis] = (n, nc + half[axis]);
            out[2 * axis + 1] = (neg(n), -nc + half[axis]);
        }
        out
    }

    fn faces(&self) -> Vec<Vec<[f64; 3]>> {
        let k = self.corners().map(|p| [p.x, p.y, p.z]);
        // Indices into the Gray-code corner order.
        const FACES: [[usize; 4]; 6] = [
            [0, 1, 2, 3], // z-
            [4, 5, 6, 7], // z+
            [0, 3, 4, 7], // x-
            [1, 2, 5, 6], // x+
            [0, 1, 6, 7], // y-
            [2, 3, 4, 5], // y+
        ];
        FACES
            .iter()
            .map(|f| {
                // Reorder into a cyclic polygon around the face.
                let pts: Vec<[f64; 3]> = f.iter().map(|&i| k[i]).collect();
                cyclic_order(pts)
            })
            .collect()
    }
}

/// Precomputed rotation for repeated point-in-box tests.
struct BoxFrame {
    rotation: Mat3,
    center: [f64; 3],
    half: [f64; 3],
}

impl BoxFrame {
    fn new(b: &Box3D) -> Self {
        Self { rotation: b.rotation(), center: b.center_array(), half: b.half_extents() }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let local = self.rotation.transpose_mul_vec(sub(p, self.center));
        local[0].abs() <= self.half[0] && local[1].abs() <= self.half[1] && local[2].abs() <= self.half[2]
    }
}

const GRAY_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0],
];

impl Serialize for Box3D {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Box3D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 9]>::deserialize(d)?;
        Box3D::from_array(a).map_err(D::Error::custom)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(m)
    }

    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
    }

    pub fn transpose_mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_zyx(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    let (sz, cz) = yaw.sin_cos();
    let (sy, cy) = pitch.sin_cos();
    let (sx, cx) = roll.sin_cos();
    let rz = Mat3([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]]);
    let ry = Mat3([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]]);
    let rx = Mat3([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]]);
    rz.mul(&ry).mul(&rx)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn neg(a: [f64; 3]) -> [f64; 3] {
    [-a[0], -a[1], -a[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Intersection and union volumes of two boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUResult {
    pub iou: f64,
    pub intersection_volume: f64,
    pub union_volume: f64,
}

impl IoUResult {
    fn from_volumes(inter: f64, union: f64) -> Self {
        let inter = inter.clamp(0.0, union.max(0.0));
        let iou = if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 };
        Self { iou, intersection_volume: inter, union_volume: union }
    }
}

/// Whether IoU uses all three angles or only yaw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    #[default]
    Full,
    YawOnly,
}

/// Exact oriented-box IoU.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> IoUResult {
    // Evaluate in a canonical argument order so the result is bit-for-bit
    // symmetric.
    let (first, second) = if box_order(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let inter = intersection_volume(first, second);
    let union = a.volume() + b.volume() - inter;
    IoUResult::from_volumes(inter, union)
}

pub fn iou_3d_with_mode(a: &Box3D, b: &Box3D, mode: IouMode) -> IoUResult {
    match mode {
        IouMode::Full => iou_3d(a, b),
        IouMode::YawOnly => iou_3d(&a.yaw_only(), &b.yaw_only()),
    }
}

fn box_order(a: &Box3D, b: &Box3D) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    // Separating-axis rejection on world AABBs first.
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    if (0..3).any(|i| ahi[i] <= blo[i] || bhi[i] <= alo[i]) {
        return 0.0;
    }
    let scale = a.dims().into_iter().chain(b.dims()).fold(0.0f64, f64::max);
    let eps = 1e-12 * scale.max(1.0);
    let mut poly = ConvexPolytope { faces: a.faces() };
    for (n, d) in b.half_spaces() {
        poly = poly.clip(n, d, eps);
        if poly.faces.len() < 4 {
            return 0.0;
        }
    }
    poly.volume()
}

/// Convex polytope stored as a list of planar convex faces, each a cyclic
/// vertex loop.
struct ConvexPolytope {
    faces: Vec<Vec<[f64; 3]>>,
}

impl ConvexPolytope {
    /// Keeps the part with `n . p <= d`, closing the cut with a cap face.
    fn clip(&self, n: [f64; 3], d: f64, eps: f64) -> ConvexPolytope {
        let mut faces = Vec::with_capacity(self.faces.len() + 1);
        let mut cap: Vec<[f64; 3]> = Vec::new();
        let mut face_on_plane = false;
        for face in &self.faces {
            let dist: Vec<f64> = face.iter().map(|p| dot(n, *p) - d).collect();
            if dist.iter().all(|&s| s.abs() <= eps) {
                // Already closed by an existing face.
                face_on_plane = true;
                faces.push(face.clone());
                continue;
            }
            if dist.iter().all(|&s| s <= eps) {
                for (p, s) in face.iter().zip(&dist) {
                    if s.abs() <= eps {
                        cap.push(*p);
                    }
                }
                faces.push(face.clone());
                continue;
            }
            if dist.iter().all(|&s| s >= -eps) {
                for (p, s) in face.iter().zip(&dist) {
                    if s.abs() <= eps {
                        cap.push(*p);
                    }
                }
                continue;
            }
            let mut out = Vec::with_capacity(face.len() + 1);
            for i in 0..face.len() {
                let j = (i + 1) % face.len();
                let (p, q) = (face[i], face[j]);
                let (sp, sq) = (dist[i], dist[j]);
                if sp <= eps {
                    out.push(p);
                    if sp.abs() <= eps {
                        cap.push(p);
                    }
                }
                if (sp < -eps && sq > eps) || (sp > eps && sq < -eps) {
                    let x = lerp(p, q, sp / (sp - sq));
                    out.push(x);
                    cap.push(x);
                }
            }
            if out.len() >= 3 {
                faces.push(out);
            }
        }
        let cap = dedup_points(cap, eps.max(1e-12));
        if !face_on_plane && cap.len() >= 3 {
            faces.push(cyclic_order(cap));
        }
        ConvexPolytope { faces }
    }

    fn volume(&self) -> f64 {
        let (sum, count) = self.faces.iter().flatten().fold(([0.0; 3], 0usize), |(s, c), p| (add(s, *p), c + 1));
        if count == 0 {
            return 0.0;
        }
        let inv = 1.0 / count as f64;
        let centroid = [sum[0] * inv, sum[1] * inv, sum[2] * inv];
        let mut vol = 0.0;
        for face in &self.faces {
            let a = sub(face[0], centroid);
            for w in face[1..].windows(2) {
                let b = sub(w[0], centroid);
                let c = sub(w[1], centroid);
                vol += dot(a, cross(b, c)).abs();
            }
        }
        vol / 6.0
    }
}

fn dedup_points(pts: Vec<[f64; 3]>, eps: f64) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(pts.len());
    for p in pts {
        if !out.iter().any(|q| {
            let d = sub(p, *q);
            dot(d, d).sqrt() <= eps * 10.0
        }) {
            out.push(p);
        }
    }
    out
}

/// Orders coplanar points of a convex polygon cyclically around their
/// centroid.
fn cyclic_order(mut pts: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    if pts.len() < 3 {
        return pts;
    }
    let n = pts.len() as f64;
    let c = pts.iter().fold([0.0; 3], |s, p| add(s, *p));
    let c = [c[0] / n, c[1] / n, c[2] / n];
    // Plane normal from the largest cross product among point pairs.
    let mut normal = [0.0; 3];
    let mut best = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let cr = cross(sub(pts[i], c), sub(pts[j], c));
            let m = dot(cr, cr);
            if m > best {
                best = m;
                normal = cr;
            }
        }
    }
    if best == 0.0 {
        return pts;
    }
    let e1 = {
        let v = sub(pts[0], c);
        let len = dot(v, v).sqrt();
        [v[0] / len, v[1] / len, v[2] / len]
    };
    let nl = dot(normal, normal).sqrt();
    let nn = [normal[0] / nl, normal[1] / nl, normal[2] / nl];
    let e2 = cross(nn, e1);
    pts.sort_by(|p, q| {
        let ap = dot(sub(*p, c), e2).atan2(dot(sub(*p, c), e1));
        let aq = dot(sub(*q, c), e2).atan2(dot(sub(*q, c), e1));
        ap.total_cmp(&aq)
    });
    pts
}

/// Monte-Carlo IoU: uniform samples in the joint axis-aligned bound of the
/// two boxes. Deterministic for a fixed seed.
pub fn iou_3d_mc_oracle(a: &Box3D, b: &Box3D, n_samples: u64, seed: u64) -> IoUResult {
    let n_samples = n_samples.max(1);
    let (alo, ahi) = a.aabb();
    let (blo, bhi) = b.aabb();
    let lo = [alo[0].min(blo[0]), alo[1].min(blo[1]), alo[2].min(blo[2])];
    let hi = [ahi[0].max(bhi[0]), ahi[1].max(bhi[1]), ahi[2].max(bhi[2])];
    let bound_vol = (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);

    let (fa, fb) = (BoxFrame::new(a), BoxFrame::new(b));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..n_samples {
        let p = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1]), rng.gen_range(lo[2]..=hi[2])];
        let (ia, ib) = (fa.contains(p), fb.contains(p));
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    let per = bound_vol / n_samples as f64;
    let inter = both as f64 * per;
    let union = either as f64 * per;
    IoUResult {
        iou: if either > 0 { both as f64 / either as f64 } else { 0.0 },
        intersection_volume: inter,
        union_volume: union,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_cube(x: f64, y: f64, z: f64) -> Box3D {
        Box3D::axis_aligned(Point3D::new(x, y, z), [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn box2d_center_examples() {
        let c = box2d_center(&Box2D::new(100.0, 200.0, 300.0, 400.0).unwrap());
        assert_eq!(c, (200.0, 300.0));
        assert_eq!(box2d_center(&Box2D::new(0.0, 0.0, 0.0, 0.0).unwrap()), (0.0, 0.0));
        assert_eq!(box2d_center(&Box2D::new(5.0, 7.0, 6.0, 9.0).unwrap()), (5.5, 8.0));
    }

    #[test]
    fn box2d_validation_and_serde() {
        assert!(Box2D::new(5.0, 0.0, 4.0, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        let b = Box2D::new(1.0, 2.0, 3.5, 4.0).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3.5,4]");
        let back: Box2D = serde_json::from_str("[1,2,3.5,4]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<Box2D>("[3,2,1,4]").is_err());
    }

    #[test]
    fn iou_2d_examples() {
        let a = Box2D::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou_2d(&a, &a), 1.0);
        let b = Box2D::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((iou_2d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let z = Box2D::new(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(iou_2d(&z, &z), 0.0);
    }

    #[test]
    fn canonical_angles() {
        assert_eq!(canonical_angle(PI), PI);
        assert!((canonical_angle(-PI) - PI).abs() < 1e-15);
        assert!((canonical_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(canonical_angle(0.3), 0.3);
        for a in [-10.0, -3.5, 4.0, 7.0, 100.0] {
            let c = canonical_angle(a);
            assert!(c > -PI && c <= PI);
            assert_eq!(canonical_angle(c), c);
        }
    }

    #[test]
    fn box3d_validation() {
        let c = Point3D::new(0.0, 0.0, 0.0);
        assert!(Box3D::new(c, [0.0, 1.0, 1.0], [0.0; 3]).is_err());
        assert!(Box3D::new(c, [1.0, -1.0, 1.0], [0.0; 3]).is_err());
        assert!(Box3D::new(c, [1.0, 1.0, 1.0], [f64::NAN, 0.0, 0.0]).is_err());
        assert!(serde_json::from_str::<Box3D>("[0,0,0,1,1,0,0,0,0]").is_err());
        let b: Box3D = serde_json::from_str("[1,2,3,1,1,1,0,0,0]").unwrap();
        assert_eq!(b.center, Point3D::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn corners_axis_aligned() {
        let b = Box3D::axis_aligned(Point3D::new(0.0, 0.0, 0.0), [2.0, 2.0, 2.0]).unwrap();
        let k = b.corners();
        for (p, s) in k.iter().zip(GRAY_SIGNS) {
            assert_eq!([p.x, p.y, p.z], s);
        }
    }

    #[test]
    fn corners_quarter_turn_swaps_extents() {
        let b = Box3D::new(Point3D::new(0.0, 0.0, 0.0), [2.0, 4.0, 6.0], [PI / 2.0, 0.0, 0.0]).unwrap();
        let mut got: Vec<[i64; 3]> =
            b.corners().iter().map(|p| [p.x.round() as i64, p.y.round() as i64, p.z.round() as i64]).collect();
        for p in b.corners() {
            assert!((p.x.abs() - 2.0).abs() < 1e-12);
            assert!((p.y.abs() - 1.0).abs() < 1e-12);
            assert!((p.z.abs() - 3.0).abs() < 1e-12);
        }
        got.sort();
        got.dedup();
        assert_eq!(got.len(), 8);
    }

    #[test]
    fn iou_analytic_cases() {
        let a = unit_cube(0.0, 0.0, 0.0);
        let r = iou_3d(&a, &a);
        assert!((r.iou - 1.0).abs() < 1e-12);
        assert_eq!(iou_3d(&a, &unit_cube(10.0, 0.0, 0.0)).iou, 0.0);
        let r = iou_3d(&a, &unit_cube(0.5, 0.0, 0.0));
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-9, "{r:?}");
        assert!((r.intersection_volume - 0.5).abs() < 1e-12);
        assert!((r.union_volume - 1.5).abs() < 1e-12);
    }

    #[test]
    fn iou_face_touching_is_zero() {
        let r = iou_3d(&unit_cube(0.0, 0.0, 0.0), &unit_cube(1.0, 0.0, 0.0));
        assert!(r.iou.abs() < 1e-9);
    }

    #[test]
    fn iou_containment() {
        let a = Box3D::new(Point3D::new(0.3, -0.2, 4.0), [2.0, 3.0, 1.5], [0.4, 0.2, -0.1]).unwrap();
        let b = Box3D::new(a.center, [1.0, 1.5, 0.5], [0.4, 0.2, -0.1]).unwrap();
        let r = iou_3d(&a, &b);
        assert!((r.intersection_volume - b.volume()).abs() <= 1e-9 * b.volume());
        assert!((r.iou - b.volume() / a.volume()).abs() < 1e-9);
    }

    #[test]
    fn iou_yawed_cube_matches_oracle() {
        let a = unit_cube(0.0, 0.0, 0.0);
        let b = Box3D::new(a.center, [1.0; 3], [PI / 4.0, 0.0, 0.0]).unwrap();
        let exact = iou_3d(&a, &b);
        let mc = iou_3d_mc_oracle(&a, &b, 1_000_000, 7);
        assert!((exact.iou - mc.iou).abs() <= 0.01, "{exact:?} vs {mc:?}");
        // Octagon overlap area: 2 (sqrt 2 - 1) for unit squares.
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert!((exact.intersection_volume - inter).abs() < 1e-9);
    }

    #[test]
    fn yaw_only_mode_ignores_pitch_roll() {
        let a = unit_cube(0.0, 0.0, 0.0);
        let b = Box3D::new(a.center, [1.0; 3], [0.0, 0.5, 0.3]).unwrap();
        assert!(iou_3d(&a, &b).iou < 0.99);
        assert!((iou_3d_with_mode(&a, &b, IouMode::YawOnly).iou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_oracle_cases() {
        let a = unit_cube(0.0, 0.0, 0.0);
        assert!((iou_3d_mc_oracle(&a, &a, 100_000, 1).iou - 1.0).abs() <= 0.01);
        assert_eq!(iou_3d_mc_oracle(&a, &unit_cube(10.0, 0.0, 0.0), 100_000, 1).iou, 0.0);
        let r = iou_3d_mc_oracle(&a, &unit_cube(0.5, 0.0, 0.0), 1_000_000, 3);
        assert!((r.iou - 1.0 / 3.0).abs() <= 0.01);
        assert_eq!(
            iou_3d_mc_oracle(&a, &unit_cube(0.5, 0.0, 0.0), 1000, 9),
            iou_3d_mc_oracle(&a, &unit_cube(0.5, 0.0, 0.0), 1000, 9)
        );
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -2.0..2.0f64,
            -2.0..2.0f64,
            1.0..6.0f64,
            0.2..2.5f64,
            0.2..2.5f64,
            0.2..2.5f64,
            -PI..PI,
            -1.0..1.0f64,
            -1.0..1.0f64,
        )
            .prop_map(|(x, y, z, l, w, h, a, b, c)| Box3D::new(Point3D::new(x, y, z), [l, w, h], [a, b, c]).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_3d(&a, &b);
            let ba = iou_3d(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab.iou));
            prop_assert!(ab.union_volume >= ab.intersection_volume);
            prop_assert!(ab.intersection_volume >= 0.0);
        }

        #[test]
        fn iou_rigid_invariance(a in arb_box(), b in arb_box(),
                                yaw in -PI..PI, t in prop::array::uniform3(-3.0..3.0f64)) {
            // Yaw about the camera Z axis composes with the box yaw exactly.
            let r = rotation_zyx(yaw, 0.0, 0.0);
            let moved = |bx: &Box3D| {
                let c = r.mul_vec([bx.center.x, bx.center.y, bx.center.z]);
                Box3D::new(
                    Point3D::new(c[0] + t[0], c[1] + t[1], c[2] + t[2]),
                    bx.dims(),
                    [bx.yaw + yaw, bx.pitch, bx.roll],
                ).unwrap()
            };
            let before = iou_3d(&a, &b).iou;
            let after = iou_3d(&moved(&a), &moved(&b)).iou;
            prop_assert!((before - after).abs() <= 1e-9, "{} vs {}", before, after);
        }
    }
}
