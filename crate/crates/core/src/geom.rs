//! Box, embedding and pinhole-camera primitives shared by every stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid box ({x}, {y}, {w}, {h}): width and height must be positive and finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate input: zero-norm vector under cosine metric")]
    ZeroNorm,
    #[error("non-finite embedding entry at position {0}")]
    NonFinite(usize),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("ground-plane normal must have unit length, got norm {0}")]
    NonUnitNormal(f64),
}

/// Axis-aligned box, top-left origin, area `w * h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(GeomError::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeomError> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Smallest box containing both.
    pub fn union_rect(&self, other: &BBox) -> BBox {
        let x1 = self.x.min(other.x);
        let y1 = self.y.min(other.y);
        let x2 = self.right().max(other.right());
        let y2 = self.bottom().max(other.bottom());
        BBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
    }

    /// Intersects with `[0, width] x [0, height]`. `None` when nothing of
    /// the box remains inside the image.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.right().min(width);
        let y2 = self.bottom().min(height);
        BBox::from_corners(x1, y1, x2, y2).ok()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    // min() keeps the result exactly symmetric and <= 1 under rounding
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric '{other}' (expected euclidean or cosine)")),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// A single crop or track embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, GeomError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = GeomError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn embedding_distance(u: &Embedding, v: &Embedding, metric: Metric) -> Result<f64, GeomError> {
    slice_distance(u.as_slice(), v.as_slice(), metric)
}

pub fn slice_distance(u: &[f64], v: &[f64], metric: Metric) -> Result<f64, GeomError> {
    if u.len() != v.len() {
        return Err(GeomError::DimensionMismatch(u.len(), v.len()));
    }
    match metric {
        Metric::Euclidean => Ok(squared_euclidean(u, v).sqrt()),
        Metric::Cosine => {
            let nu = dot(u, u).sqrt();
            let nv = dot(v, v).sqrt();
            if nu == 0.0 || nv == 0.0 {
                return Err(GeomError::ZeroNorm);
            }
            Ok((1.0 - dot(u, v) / (nu * nv)).max(0.0))
        }
    }
}

/// Squared L2 distance. Four independent accumulators so the loop
/// vectorizes; callers comparing against this value must use the same
/// function.
#[inline]
pub fn squared_euclidean(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = [0.0f64; 4];
    let mut cu = u.chunks_exact(4);
    let mut cv = v.chunks_exact(4);
    for (a, b) in (&mut cu).zip(&mut cv) {
        for lane in 0..4 {
            let d = a[lane] - b[lane];
            acc[lane] += d * d;
        }
    }
    let mut tail = 0.0;
    for (a, b) in cu.remainder().iter().zip(cv.remainder()) {
        let d = a - b;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = [0.0f64; 4];
    let mut cu = u.chunks_exact(4);
    let mut cv = v.chunks_exact(4);
    for (a, b) in (&mut cu).zip(&mut cv) {
        for lane in 0..4 {
            acc[lane] += a[lane] * b[lane];
        }
    }
    let mut tail = 0.0;
    for (a, b) in cu.remainder().iter().zip(cv.remainder()) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Camera-frame point in meters: x right, y down, z forward.
pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: u32,
    pub image_h: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_w: u32, image_h: u32) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy, image_w, image_h };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let inside = |c: f64, size: u32| c >= 0.0 && c < size as f64;
        if !inside(self.cx, self.image_w) || !inside(self.cy, self.image_h) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.image_w, self.image_h
            )));
        }
        Ok(())
    }

    /// Direction of the viewing ray through `pixel`, scaled so that z = 1.
    pub fn ray(&self, pixel: (f64, f64)) -> Point3 {
        [(pixel.0 - self.cx) / self.fx, (pixel.1 - self.cy) / self.fy, 1.0]
    }

    /// Pinhole projection of a point in front of the camera.
    pub fn project(&self, p: Point3) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

pub fn backproject(pixel: (f64, f64), depth: f64, k: &CameraIntrinsics) -> Result<Point3, GeomError> {
    // also rejects NaN
    if depth.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(GeomError::NonPositiveDepth(depth));
    }
    let r = k.ray(pixel);
    Ok([depth * r[0], depth * r[1], depth])
}

/// Plane with `height(P) = normal . P + offset`, normal pointing up
/// (negative y in the camera frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: Point3,
    pub offset: f64,
}

impl GroundPlane {
    pub fn new(normal: Point3, offset: f64) -> Result<Self, GeomError> {
        let plane = Self { normal, offset };
        plane.validate()?;
        Ok(plane)
    }

    /// Flat ground `camera_height` meters below a level camera.
    pub fn level(camera_height: f64) -> Self {
        Self { normal: [0.0, -1.0, 0.0], offset: camera_height }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let norm = dot(&self.normal, &self.normal).sqrt();
        if (norm - 1.0).abs().is_nan() || (norm - 1.0).abs() > 1e-9 || !self.offset.is_finite() {
            return Err(GeomError::NonUnitNormal(norm));
        }
        Ok(())
    }
}

pub fn height_above_plane(p: Point3, plane: &GroundPlane) -> f64 {
    plane.normal[0] * p[0] + plane.normal[1] * p[1] + plane.normal[2] * p[2] + plane.offset
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Counts unit cells of the integer grid covered by both / either box.
    fn grid_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bb: &BBox, px: i32, py: i32| {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            cx > bb.x && cx < bb.right() && cy > bb.y && cy < bb.bottom()
        };
        let (mut inter, mut union) = (0u32, 0u32);
        for py in -5..40 {
            for px in -5..40 {
                let (ia, ib) = (inside(a, px, py), inside(b, px, py));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
        let b = bx(5.0, 0.0, 10.0, 10.0);
        let oracle = grid_iou(&a, &b);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0, 0, 0, 4]").is_err());
    }

    #[test]
    fn distance_examples() {
        let u = Embedding::new(vec![1.0, 0.0]).unwrap();
        let v = Embedding::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(embedding_distance(&u, &u, Metric::Euclidean).unwrap(), 0.0);
        assert_eq!(embedding_distance(&u, &u, Metric::Cosine).unwrap(), 0.0);
        assert!((embedding_distance(&u, &v, Metric::Euclidean).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(embedding_distance(&u, &v, Metric::Cosine).unwrap(), 1.0);
        let z = Embedding::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(embedding_distance(&u, &z, Metric::Cosine), Err(GeomError::ZeroNorm));
        let w = Embedding::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(
            embedding_distance(&u, &w, Metric::Euclidean),
            Err(GeomError::DimensionMismatch(2, 3))
        );
        assert!(Embedding::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn squared_euclidean_handles_tails() {
        let u: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let v = vec![0.0; 7];
        assert_eq!(squared_euclidean(&u, &v), 91.0);
    }

    fn kitti() -> CameraIntrinsics {
        CameraIntrinsics::new(721.5, 721.5, 609.6, 172.9, 1242, 375).unwrap()
    }

    #[test]
    fn backproject_examples() {
        let k = kitti();
        assert_eq!(backproject((k.cx, k.cy), 5.0, &k).unwrap(), [0.0, 0.0, 5.0]);
        let close = |p: Point3, q: Point3| p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12);
        assert!(close(backproject((k.cx + k.fx, k.cy), 2.0, &k).unwrap(), [2.0, 0.0, 2.0]));
        assert!(close(backproject((k.cx, k.cy + k.fy), 1.0, &k).unwrap(), [0.0, 1.0, 1.0]));
        assert!(matches!(backproject((0.0, 0.0), 0.0, &k), Err(GeomError::NonPositiveDepth(_))));
        assert!(backproject((0.0, 0.0), -1.0, &k).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn height_examples() {
        let plane = GroundPlane::new([0.0, -1.0, 0.0], 1.7).unwrap();
        assert_eq!(height_above_plane([0.0, 0.0, 5.0], &plane), 1.7);
        assert_eq!(height_above_plane([0.0, 1.7, 5.0], &plane), 0.0);
        assert!(GroundPlane::new([0.0, -2.0, 0.0], 1.7).is_err());
        let tilted = GroundPlane::new([0.0, -0.8, 0.6], 0.0).unwrap();
        assert_eq!(height_above_plane([0.6, 0.6, 0.8], &tilted), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn euclidean_triangle_inequality(
            a in prop::collection::vec(-10.0..10.0f64, 6),
            b in prop::collection::vec(-10.0..10.0f64, 6),
            c in prop::collection::vec(-10.0..10.0f64, 6),
        ) {
            let d = |u: &[f64], v: &[f64]| slice_distance(u, v, Metric::Euclidean).unwrap();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        }

        #[test]
        fn backproject_then_project_is_identity(
            u in 0.0..1242.0f64, v in 0.0..375.0f64, depth in 0.5..80.0f64,
        ) {
            let k = kitti();
            let p = backproject((u, v), depth, &k).unwrap();
            let (pu, pv) = k.project(p);
            prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }
    }
}
