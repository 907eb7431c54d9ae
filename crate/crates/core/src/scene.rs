//! Point clouds, oriented boxes and scenes.
//!
//! Everything lives in the lidar frame: `x` forward, `y` left, `z` up. Boxes
//! are 7-DoF (center, length/width/height, yaw about `z`), with `length`
//! measured along the heading direction.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default car prior (length, width, height) in meters.
pub const CAR_DIMS: [f64; 3] = [3.9, 1.6, 1.56];

/// Class names understood by the detection text format; the index is the class id.
pub const CLASS_NAMES: [&str; 5] = ["Car", "Pedestrian", "Cyclist", "Van", "Truck"];

/// Name written for boxes without a class id.
pub const UNLABELED_CLASS: &str = "Object";

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t <= -PI {
        t += two_pi;
    }
    if t > PI {
        t -= two_pi;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in `[0, 1]`.
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.r]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.r.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Range(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::xyz).collect()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Axis-aligned half-open region `[min, max)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds3 {
    /// Point-cloud range used for KITTI cars.
    pub const KITTI: Bounds3 = Bounds3 {
        min: [0.0, -40.0, -3.0],
        max: [70.4, 40.0, 1.0],
    };

    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Range(format!(
                    "axis {axis} bounds [{lo}, {hi}) are not well ordered"
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }
}

/// Oriented 3D box with optional detection score and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(length, width, height)`; length runs along the heading.
    pub dims: [f64; 3],
    /// Heading about `z`, kept in `(-pi, pi]`.
    pub yaw: f64,
    pub score: Option<f64>,
    pub class_id: Option<u32>,
}

impl Box3D {
    /// Builds a box, normalizing the yaw. Dimensions must be positive and all values finite.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        if !center.iter().chain(dims.iter()).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::Range("box has a non-finite field".into()));
        }
        if dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::Range(format!("box dims {dims:?} must be positive")));
        }
        Ok(Self {
            center,
            dims,
            yaw: normalize_yaw(yaw),
            score: None,
            class_id: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn length(&self) -> f64 {
        self.dims[0]
    }

    pub fn width(&self) -> f64 {
        self.dims[1]
    }

    pub fn height(&self) -> f64 {
        self.dims[2]
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.center.iter().chain(self.dims.iter()).all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.score.is_none_or(f64::is_finite)
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.dims[0];
        let hw = 0.5 * self.dims[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| {
            [
                self.center[0] + c * u - s * v,
                self.center[1] + s * u + c * v,
            ]
        })
    }

    /// All eight corners: the BEV footprint at the bottom face, then at the top face.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let z0 = self.center[2] - 0.5 * self.dims[2];
        let z1 = self.center[2] + 0.5 * self.dims[2];
        let mut out = [[0.0; 3]; 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = [c[0], c[1], z0];
            out[i + 4] = [c[0], c[1], z1];
        }
        out
    }

    /// Expresses a world point in the box frame (origin at the center, `x` along the heading).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }

    /// Closed containment test: points on a face count as inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.dims[0]
            && l[1].abs() <= 0.5 * self.dims[1]
            && l[2].abs() <= 0.5 * self.dims[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub gt_boxes: Vec<Box3D>,
    pub range_bounds: Bounds3,
}

impl Scene {
    pub fn new(cloud: PointCloud, gt_boxes: Vec<Box3D>, range_bounds: Bounds3) -> Result<Self> {
        range_bounds.validate()?;
        if let Some(i) = gt_boxes
            .iter()
            .position(|b| !range_bounds.contains(b.center))
        {
            return Err(Error::Range(format!("gt box {i} center lies outside the scene range")));
        }
        Ok(Self {
            cloud,
            gt_boxes,
            range_bounds,
        })
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub n_objects: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
    pub range_bounds: Bounds3,
    pub object_dims: [f64; 3],
    /// Height of the object centers.
    pub object_z: f64,
    /// Minimum BEV distance between object centers; best effort.
    pub min_separation: f64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 8,
            points_per_object: 200,
            clutter_points: 500,
            range_bounds: Bounds3::KITTI,
            object_dims: CAR_DIMS,
            object_z: -1.0,
            min_separation: 5.0,
        }
    }
}

/// Surface samples sit this far inside each face, so they stay inside their box
/// after floating-point rotation.
const SURFACE_INSET: f64 = 0.01;
const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Synthetic scene with car-sized objects on the KITTI range.
pub fn generate_synthetic_scene(
    seed: u64,
    n_objects: usize,
    points_per_object: usize,
    clutter_points: usize,
) -> Scene {
    let cfg = SyntheticSceneConfig {
        n_objects,
        points_per_object,
        clutter_points,
        ..SyntheticSceneConfig::default()
    };
    generate_scene(&cfg, seed).expect("default synthetic scene config is valid")
}

/// Deterministic scene: `points_per_object` surface points per object followed by
/// `clutter_points` uniform points over the range.
pub fn generate_scene(cfg: &SyntheticSceneConfig, seed: u64) -> Result<Scene> {
    cfg.range_bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.range_bounds;
    let [l, w, h] = cfg.object_dims;
    if !(l > 0.0 && w > 0.0 && h > 0.0) {
        return Err(Error::Config("object dims must be positive".into()));
    }
    if !(cfg.object_z >= b.min[2] && cfg.object_z < b.max[2]) {
        return Err(Error::Config("object_z outside the scene range".into()));
    }
    let margin = 0.5 * (l * l + w * w).sqrt();
    let lo = [b.min[0] + margin, b.min[1] + margin];
    let hi = [b.max[0] - margin, b.max[1] - margin];
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return Err(Error::Config("scene range too small for the object size".into()));
    }

    let mut boxes: Vec<Box3D> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let mut candidate = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
            let yaw = rng.random_range(-PI..PI);
            candidate = Some((c, yaw));
            let clear = boxes.iter().all(|o| {
                let d = ((o.center[0] - c[0]).powi(2) + (o.center[1] - c[1]).powi(2)).sqrt();
                d >= cfg.min_separation
            });
            if clear {
                break;
            }
        }
        let (c, yaw) = candidate.expect("at least one placement attempt");
        let bx = Box3D::new([c[0], c[1], cfg.object_z], cfg.object_dims, yaw)?.with_class(0);
        boxes.push(bx);
    }

    let mut points = Vec::with_capacity(cfg.n_objects * cfg.points_per_object + cfg.clutter_points);
    for bx in &boxes {
        for _ in 0..cfg.points_per_object {
            let local = sample_box_surface(&mut rng, bx.dims);
            let p = bx.to_world(local);
            points.push(Point::new(p[0], p[1], p[2], rng.random_range(0.0..1.0)));
        }
    }
    for _ in 0..cfg.clutter_points {
        points.push(Point::new(
            rng.random_range(b.min[0]..b.max[0]),
            rng.random_range(b.min[1]..b.max[1]),
            rng.random_range(b.min[2]..b.max[2]),
            rng.random_range(0.0..1.0),
        ));
    }
    // Surface points of boxes near the range edge may poke outside it.
    points.retain(|p| b.contains(p.xyz()));
    Scene::new(PointCloud::new(points)?, boxes, b)
}

/// Uniform sample on the (inset) surface of a box in local coordinates, faces
/// weighted by area.
fn sample_box_surface(rng: &mut impl Rng, dims: [f64; 3]) -> [f64; 3] {
    let half = dims.map(|d| (0.5 * d - SURFACE_INSET).max(0.25 * d));
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total = areas.iter().sum::<f64>();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, &area) in areas.iter().enumerate() {
        if pick < area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = if a == axis {
            sign * half[a]
        } else {
            rng.random_range(-half[a]..half[a])
        };
    }
    p
}

/// Keeps the points inside the scene's half-open range.
pub fn clip_to_range(scene: &Scene) -> Scene {
    let b = scene.range_bounds;
    let points = scene
        .cloud
        .points()
        .iter()
        .copied()
        .filter(|p| b.contains(p.xyz()))
        .collect();
    Scene {
        cloud: PointCloud { points },
        gt_boxes: scene.gt_boxes.clone(),
        range_bounds: b,
    }
}

fn class_name(class_id: Option<u32>) -> String {
    match class_id {
        None => UNLABELED_CLASS.to_string(),
        Some(id) => CLASS_NAMES
            .get(id as usize)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("class{id}")),
    }
}

fn class_id(name: &str) -> Option<Option<u32>> {
    if name == UNLABELED_CLASS {
        return Some(None);
    }
    if let Some(i) = CLASS_NAMES.iter().position(|&n| n == name) {
        return Some(Some(i as u32));
    }
    name.strip_prefix("class")
        .and_then(|s| s.parse::<u32>().ok())
        .map(Some)
}

/// Renders boxes in the line format `class cx cy cz l w h yaw [score]`.
///
/// Floats use Rust's shortest round-trip representation.
pub fn format_detections(boxes: &[Box3D]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = write!(
            out,
            "{} {} {} {} {} {} {} {}",
            class_name(b.class_id),
            b.center[0],
            b.center[1],
            b.center[2],
            b.dims[0],
            b.dims[1],
            b.dims[2],
            b.yaw
        );
        if let Some(s) = b.score {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<Box3D>> {
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 8 && tokens.len() != 9 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 8 or 9 fields, found {}", tokens.len()),
            });
        }
        let class = class_id(tokens[0]).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("unknown class name {:?}", tokens[0]),
        })?;
        let mut vals = [0.0f64; 8];
        for (k, tok) in tokens[1..].iter().enumerate() {
            vals[k] = tok.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("field {} ({tok:?}): {e}", k + 2),
            })?;
            if !vals[k].is_finite() {
                return Err(Error::Range(format!(
                    "line {line_no}: field {} is not finite",
                    k + 2
                )));
            }
        }
        let mut b = Box3D::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], vals[6])
            .map_err(|e| match e {
                Error::Range(m) => Error::Range(format!("line {line_no}: {m}")),
                other => other,
            })?;
        b.class_id = class;
        if tokens.len() == 9 {
            b.score = Some(vals[7]);
        }
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Box3D>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

pub fn write_detections(path: impl AsRef<Path>, boxes: &[Box3D]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_detections(boxes)).map_err(|e| Error::io(path, e))
}

/// Renders points one per line as `x y z reflectance`.
pub fn format_points(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {} {}", p.x, p.y, p.z, p.r);
    }
    out
}

/// Parses `x y z reflectance` lines; blank lines and `#` comments are skipped.
pub fn parse_points(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 4 fields, found {}", tokens.len()),
            });
        }
        let mut v = [0.0f64; 4];
        for (k, tok) in tokens.iter().enumerate() {
            v[k] = tok.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("field {} ({tok:?}): {e}", k + 1),
            })?;
        }
        points.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    PointCloud::new(points)
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn points_parse_with_comments_and_reject_bad_rows() {
        let cloud = parse_points("# header\n1 2 3 0.5\n\n4 5 6 1 # trailing\n").unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points()[1].as_array(), [4.0, 5.0, 6.0, 1.0]);
        assert_eq!(parse_points(&format_points(&cloud)).unwrap(), cloud);
        assert!(matches!(parse_points("1 2 3"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_points("1 2 x 0"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_points("1 2 inf 0"), Err(Error::Range(_))));
    }

    #[test]
    fn clutter_only_scene() {
        let s = generate_synthetic_scene(7, 0, 0, 100);
        assert_eq!(s.cloud.len(), 100);
        assert!(s.gt_boxes.is_empty());
    }

    #[test]
    fn point_counts_add_up() {
        let s = generate_synthetic_scene(7, 2, 200, 50);
        assert_eq!(s.cloud.len(), 450);
        assert_eq!(s.gt_boxes.len(), 2);
        for b in &s.gt_boxes {
            assert_eq!(b.dims, CAR_DIMS);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_scene(11, 3, 50, 20);
        let b = generate_synthetic_scene(11, 3, 50, 20);
        assert_eq!(a, b);
        let bytes = |s: &Scene| {
            let mut t = format_detections(&s.gt_boxes);
            for p in s.cloud.points() {
                t.push_str(&format!("{:?}\n", p.as_array().map(f64::to_bits)));
            }
            t
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(a, generate_synthetic_scene(12, 3, 50, 20));
    }

    #[test]
    fn object_points_lie_in_their_boxes() {
        let s = generate_synthetic_scene(3, 4, 100, 0);
        for (k, b) in s.gt_boxes.iter().enumerate() {
            for p in &s.cloud.points()[k * 100..(k + 1) * 100] {
                assert!(b.contains(p.xyz()));
            }
        }
    }

    #[test]
    fn parse_single_line() {
        let boxes = parse_detections("Car 1.0 2.0 -1.0 3.9 1.6 1.56 0.0 0.9\n").unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert_eq!(b.center, [1.0, 2.0, -1.0]);
        assert_eq!(b.dims, [3.9, 1.6, 1.56]);
        assert_eq!(b.yaw, 0.0);
        assert_eq!(b.score, Some(0.9));
        assert_eq!(b.class_id, Some(0));
    }

    #[test]
    fn empty_input_is_empty_list() {
        assert!(parse_detections("").unwrap().is_empty());
        let dir = std::env::temp_dir().join(format!("br-empty-{}", std::process::id()));
        std::fs::write(&dir, "").unwrap();
        assert!(read_detections(&dir).unwrap().is_empty());
        std::fs::remove_file(&dir).unwrap();
    }

    #[test]
    fn malformed_lines_name_their_line() {
        let err = parse_detections("Car 1 2 3 4 5 6 0\nCar 1 2 x 4 5 6 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_detections("Car 1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_detections("Car 1 2 inf 4 5 6 0\n").unwrap_err();
        assert!(matches!(err, Error::Range(_)));
        let err = parse_detections("Car 1 2 NaN 4 5 6 0 0.5\n").unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn clip_removes_far_points_and_keeps_lower_edge() {
        let cloud = PointCloud::new(vec![
            Point::new(75.0, 0.0, 0.0, 0.1),
            Point::new(0.0, 0.0, 0.0, 0.2),
            Point::new(70.4, 0.0, 0.0, 0.3),
            Point::new(10.0, -40.0, -3.0, 0.4),
        ])
        .unwrap();
        let s = Scene::new(cloud, vec![], Bounds3::KITTI).unwrap();
        let c = clip_to_range(&s);
        let xs: Vec<f64> = c.cloud.points().iter().map(|p| p.r).collect();
        assert_eq!(xs, vec![0.2, 0.4]);
        assert_eq!(clip_to_range(&c), c);
    }

    #[test]
    fn clip_is_identity_inside() {
        let s = generate_synthetic_scene(5, 3, 40, 40);
        assert_eq!(clip_to_range(&s), s);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0; 3], f64::INFINITY).is_err());
    }

    #[test]
    fn yaw_range_edges() {
        assert_eq!(normalize_yaw(PI), PI);
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(0.5) - 0.5).abs() < 1e-15);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            prop::array::uniform3(-50.0f64..50.0),
            prop::array::uniform3(0.1f64..10.0),
            -10.0f64..10.0,
            prop::option::of(0.0f64..1.0),
            prop::option::of(0u32..5),
        )
            .prop_map(|(c, d, yaw, score, class)| {
                let mut b = Box3D::new(c, d, yaw).unwrap();
                b.score = score;
                b.class_id = class;
                b
            })
    }

    proptest! {
        #[test]
        fn yaw_normalization_is_periodic(theta in -1e3f64..1e3) {
            let a = normalize_yaw(theta);
            let b = normalize_yaw(a + 2.0 * PI);
            prop_assert!(a > -PI && a <= PI);
            prop_assert!((a - b).abs() < 1e-12 || (a.abs() - PI).abs() < 1e-12 && (b.abs() - PI).abs() < 1e-12);
        }

        #[test]
        fn text_format_round_trips(boxes in prop::collection::vec(arb_box(), 0..100)) {
            let parsed = parse_detections(&format_detections(&boxes)).unwrap();
            prop_assert_eq!(parsed, boxes);
        }

        #[test]
        fn clipping_is_idempotent(seed in 0u64..1000) {
            let mut s = generate_synthetic_scene(seed, 2, 30, 30);
            s.range_bounds = Bounds3::new([10.0, -20.0, -2.0], [50.0, 20.0, 0.0]).unwrap();
            let once = clip_to_range(&s);
            prop_assert_eq!(clip_to_range(&once), once);
        }
    }
}
