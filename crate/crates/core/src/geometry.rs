//! Planar polyline interfaces, per-segment frames and point-to-interface distances.
//!
//! All coordinates are in mm.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point or vector, `[x, y]`.
pub type Point = [f64; 2];

/// Segments shorter than this are rejected as degenerate.
pub const MIN_SEGMENT_LENGTH: f64 = 1e-12;

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub(crate) fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

/// Ordered polyline describing an observed or simulated interface.
///
/// Segments are the consecutive node pairs `(i, i + 1)`, plus the closing
/// segment `(n - 1, 0)` when `closed` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMesh")]
pub struct InterfaceMesh {
    nodes: Vec<Point>,
    closed: bool,
}

#[derive(Deserialize)]
struct RawMesh {
    nodes: Vec<Point>,
    #[serde(default)]
    closed: bool,
}

impl TryFrom<RawMesh> for InterfaceMesh {
    type Error = Error;

    fn try_from(raw: RawMesh) -> Result<Self> {
        InterfaceMesh::new(raw.nodes, raw.closed)
    }
}

impl InterfaceMesh {
    pub fn new(nodes: Vec<Point>, closed: bool) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidMesh(format!(
                "need at least 2 nodes, got {}",
                nodes.len()
            )));
        }
        if let Some(p) = nodes.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidMesh(format!("non-finite node {p:?}")));
        }
        let mesh = InterfaceMesh { nodes, closed };
        for (index, (a, b)) in mesh.segments().enumerate() {
            let length = norm(sub(b, a));
            if length <= MIN_SEGMENT_LENGTH {
                return Err(Error::DegenerateSegment { index, length });
            }
        }
        Ok(mesh)
    }

    /// Open polyline through `nodes`.
    pub fn open(nodes: Vec<Point>) -> Result<Self> {
        Self::new(nodes, false)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn segment_count(&self) -> usize {
        if self.closed {
            self.nodes.len()
        } else {
            self.nodes.len() - 1
        }
    }

    /// Iterator over segment end points.
    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.nodes.len();
        (0..self.segment_count()).map(move |i| (self.nodes[i], self.nodes[(i + 1) % n]))
    }

    /// Total polyline length.
    pub fn arc_length(&self) -> f64 {
        self.segments().map(|(a, b)| norm(sub(b, a))).sum()
    }

    /// Same connectivity, new node positions.
    pub fn with_nodes(&self, nodes: Vec<Point>) -> Result<Self> {
        if nodes.len() != self.nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.nodes.len(),
                got: nodes.len(),
            });
        }
        Self::new(nodes, self.closed)
    }

    /// Rigid translation of every node.
    pub fn translated(&self, offset: Point) -> Result<Self> {
        self.with_nodes(
            self.nodes
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1]])
                .collect(),
        )
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Center, unit normal and length of one mesh segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentFrame {
    pub center: Point,
    pub normal: Point,
    pub length: f64,
}

/// Frames of every segment, in segment order.
///
/// The normal of a segment with unit tangent `(tx, ty)` is `(-ty, tx)`: for
/// an interface ordered left to right over a floor-attached solid this points
/// out of the solid into the surrounding fluid.
pub fn compute_frames(mesh: &InterfaceMesh) -> Result<Vec<SegmentFrame>> {
    mesh.segments()
        .enumerate()
        .map(|(index, (a, b))| {
            let t = sub(b, a);
            let length = norm(t);
            if length <= MIN_SEGMENT_LENGTH {
                return Err(Error::DegenerateSegment { index, length });
            }
            Ok(SegmentFrame {
                center: [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
                normal: [-t[1] / length, t[0] / length],
                length,
            })
        })
        .collect()
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let e = sub(b, a);
    let len2 = dot(e, e);
    let s = if len2 > 0.0 {
        (dot(sub(p, a), e) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(sub(p, [a[0] + s * e[0], a[1] + s * e[1]]))
}

/// Minimum Euclidean distance from `point` to any segment of `mesh`.
pub fn closest_point_distance(mesh: &InterfaceMesh, point: Point) -> f64 {
    mesh.segments()
        .map(|(a, b)| point_segment_distance(point, a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Signed ray parameters `t` at which `point + t * direction` meets `[a, b]`.
fn line_segment_hits(point: Point, direction: Point, a: Point, b: Point) -> Option<f64> {
    let e = sub(b, a);
    let ap = sub(a, point);
    let denom = cross(direction, e);
    let tol = 1e-12;
    if denom.abs() > tol * norm(e) {
        let t = cross(ap, e) / denom;
        let s = cross(ap, direction) / denom;
        if (-tol..=1.0 + tol).contains(&s) {
            return Some(t.abs());
        }
        return None;
    }
    // Parallel: only a collinear segment can be hit.
    if cross(ap, direction).abs() > tol * norm(e).max(1.0) {
        return None;
    }
    let ta = dot(sub(a, point), direction);
    let tb = dot(sub(b, point), direction);
    if ta.min(tb) <= 0.0 && ta.max(tb) >= 0.0 {
        Some(0.0)
    } else {
        Some(ta.abs().min(tb.abs()))
    }
}

/// Distance along the line `point ± t * direction` to the nearest crossing
/// with the mesh. Both senses of `direction` are searched.
pub fn ray_cast_distance(mesh: &InterfaceMesh, point: Point, direction: Point) -> Result<f64> {
    let len = norm(direction);
    if (len - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidMeasurementSpec(format!(
            "direction {direction:?} is not a unit vector"
        )));
    }
    mesh.segments()
        .filter_map(|(a, b)| line_segment_hits(point, direction, a, b))
        .reduce(f64::min)
        .ok_or(Error::NoIntersection { point, index: None })
}

/// Measurement points on the observed interface with their ray directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct MeasurementSpec {
    points: Vec<Point>,
    directions: Vec<Point>,
}

#[derive(Deserialize)]
struct RawSpec {
    points: Vec<Point>,
    directions: Vec<Point>,
}

impl TryFrom<RawSpec> for MeasurementSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        MeasurementSpec::new(raw.points, raw.directions)
    }
}

impl MeasurementSpec {
    pub fn new(points: Vec<Point>, directions: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasurementSpec("no measurement points".into()));
        }
        if points.len() != directions.len() {
            return Err(Error::InvalidMeasurementSpec(format!(
                "{} points but {} directions",
                points.len(),
                directions.len()
            )));
        }
        if let Some(d) = directions.iter().find(|d| (norm(**d) - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidMeasurementSpec(format!(
                "direction {d:?} is not a unit vector"
            )));
        }
        Ok(MeasurementSpec { points, directions })
    }

    /// `count` measurement points at segment centers spread evenly along
    /// `observed`, each looking along its segment normal.
    pub fn along_normals(observed: &InterfaceMesh, count: usize) -> Result<Self> {
        let frames = compute_frames(observed)?;
        if count == 0 || count > frames.len() {
            return Err(Error::InvalidMeasurementSpec(format!(
                "cannot place {count} points on {} segments",
                frames.len()
            )));
        }
        let picks: Vec<&SegmentFrame> = (0..count)
            .map(|k| &frames[((2 * k + 1) * frames.len()) / (2 * count)])
            .collect();
        Self::new(
            picks.iter().map(|f| f.center).collect(),
            picks.iter().map(|f| f.normal).collect(),
        )
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn directions(&self) -> &[Point] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(a: Point, b: Point) -> InterfaceMesh {
        InterfaceMesh::open(vec![a, b]).unwrap()
    }

    #[test]
    fn horizontal_segment_frame() {
        let f = compute_frames(&seg([0.0, 0.0], [1.0, 0.0])).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].center, [0.5, 0.0]);
        assert_eq!(f[0].normal, [0.0, 1.0]);
        assert_eq!(f[0].length, 1.0);
    }

    #[test]
    fn vertical_and_diagonal_normals() {
        let f = compute_frames(&seg([0.0, 0.0], [0.0, 1.0])).unwrap();
        assert_eq!(f[0].normal, [-1.0, 0.0]);

        let f = compute_frames(&seg([0.0, 0.0], [1.0, 1.0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f[0].normal[0] + h).abs() < 1e-15);
        assert!((f[0].normal[1] - h).abs() < 1e-15);
        assert!((norm(f[0].normal) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_meshes() {
        assert!(matches!(
            InterfaceMesh::open(vec![[0.0, 0.0]]),
            Err(Error::InvalidMesh(_))
        ));
        assert!(matches!(
            InterfaceMesh::open(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]),
            Err(Error::DegenerateSegment { index: 1, .. })
        ));
    }

    #[test]
    fn mesh_json_round_trip() {
        let m: InterfaceMesh =
            serde_json::from_str(r#"{"nodes": [[0,0],[1,0.5]], "closed": false}"#).unwrap();
        assert_eq!(m.nodes(), &[[0.0, 0.0], [1.0, 0.5]]);
        let back: InterfaceMesh = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<InterfaceMesh>(r#"{"nodes": [[0,0],[0,0]]}"#).is_err());
    }

    #[test]
    fn closed_mesh_has_wraparound_segment() {
        let m = InterfaceMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], true).unwrap();
        assert_eq!(m.segment_count(), 3);
        assert!((m.arc_length() - (2.0 + 2f64.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn ray_cast_examples() {
        let m = seg([0.0, 1.0], [1.0, 1.0]);
        assert_eq!(ray_cast_distance(&m, [0.5, 0.5], [0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(ray_cast_distance(&m, [0.25, 1.0], [0.0, 1.0]).unwrap(), 0.0);
        let m = seg([2.0, -1.0], [2.0, 1.0]);
        assert_eq!(ray_cast_distance(&m, [0.0, 0.0], [1.0, 0.0]).unwrap(), 2.0);
        // the opposite sense is searched too
        assert_eq!(ray_cast_distance(&m, [0.0, 0.0], [-1.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn ray_cast_misses() {
        let m = seg([2.0, 1.0], [2.0, 3.0]);
        assert!(matches!(
            ray_cast_distance(&m, [0.0, 0.0], [1.0, 0.0]),
            Err(Error::NoIntersection { .. })
        ));
    }

    #[test]
    fn ray_cast_collinear_segment() {
        let m = seg([2.0, 0.0], [3.0, 0.0]);
        assert_eq!(ray_cast_distance(&m, [0.0, 0.0], [1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(ray_cast_distance(&m, [2.5, 0.0], [1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn closest_point_examples() {
        let m = seg([-1.0, 0.0], [1.0, 0.0]);
        assert_eq!(closest_point_distance(&m, [0.0, 1.0]), 1.0);
        assert!((closest_point_distance(&m, [2.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn zigzag(n: usize, seed: u64) -> InterfaceMesh {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nodes = (0..=n)
            .map(|i| [i as f64 * 0.1, rng.random_range(-1.0..1.0)])
            .collect();
        InterfaceMesh::open(nodes).unwrap()
    }

    #[test]
    fn closest_point_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mesh = zigzag(100, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = [rng.random_range(-1.0..11.0), rng.random_range(-2.0..2.0)];
            // independent oracle: dense sampling is too coarse, so project by hand
            let mut best = f64::INFINITY;
            for w in mesh.nodes().windows(2) {
                let (a, b) = (w[0], w[1]);
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let s = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / (ex * ex + ey * ey))
                    .clamp(0.0, 1.0);
                let d = ((p[0] - a[0] - s * ex).powi(2) + (p[1] - a[1] - s * ey).powi(2)).sqrt();
                best = best.min(d);
            }
            assert!((closest_point_distance(&mesh, p) - best).abs() <= 1e-12);
        }
    }

    #[test]
    fn frames_sum_to_arc_length() {
        let mesh = zigzag(50, 9);
        let total: f64 = compute_frames(&mesh).unwrap().iter().map(|f| f.length).sum();
        assert!((total - mesh.arc_length()).abs() <= 1e-12 * mesh.arc_length());
    }

    #[test]
    fn measurement_spec_validation() {
        assert!(MeasurementSpec::new(vec![], vec![]).is_err());
        assert!(MeasurementSpec::new(vec![[0.0, 0.0]], vec![]).is_err());
        assert!(MeasurementSpec::new(vec![[0.0, 0.0]], vec![[1.0, 1.0]]).is_err());
        let spec = MeasurementSpec::along_normals(&zigzag(20, 1), 5).unwrap();
        assert_eq!(spec.len(), 5);
    }

    proptest! {
        #[test]
        fn closest_distance_is_one_lipschitz(
            seed in 0u64..50,
            x1 in -1.0f64..6.0, y1 in -2.0f64..2.0,
            x2 in -1.0f64..6.0, y2 in -2.0f64..2.0,
        ) {
            let mesh = zigzag(40, seed);
            let d1 = closest_point_distance(&mesh, [x1, y1]);
            let d2 = closest_point_distance(&mesh, [x2, y2]);
            prop_assert!((d1 - d2).abs() <= norm([x1 - x2, y1 - y2]) + 1e-12);
        }

        #[test]
        fn ray_cast_dominates_closest_distance(
            seed in 0u64..50,
            x in 0.5f64..3.5, y in -2.0f64..2.0, angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let mesh = zigzag(40, seed);
            let dir = [angle.cos(), angle.sin()];
            if let Ok(d) = ray_cast_distance(&mesh, [x, y], dir) {
                prop_assert!(d + 1e-12 >= closest_point_distance(&mesh, [x, y]));
            }
        }

        #[test]
        fn zero_distance_iff_on_segment(seed in 0u64..50, seg_idx in 0usize..40, s in 0.0f64..1.0, off in 1e-6f64..1e-2) {
            let mesh = zigzag(40, seed);
            let (a, b) = mesh.segments().nth(seg_idx).unwrap();
            let on = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            prop_assert!(closest_point_distance(&mesh, on) <= 1e-12);
            // lift off the whole polyline vertically beyond its range
            let above = [on[0], 1.0 + off];
            prop_assert!(closest_point_distance(&mesh, above) > 1e-12);
        }
    }
}
