//! LiDAR depth association on the panoramic sphere.
//!
//! Accumulated scans are projected onto the sphere as (azimuth, elevation,
//! depth) entries indexed by a 2-D k-d tree. A visual feature queries its
//! three nearest depth entries by true angular distance; the depth at the
//! feature direction comes from intersecting the feature ray with the plane
//! through those three points. Features whose neighbors spread too far in
//! space (depth blur from accumulation) or whose plane intersection lands
//! behind the sphere center are rejected.

use crate::error::Error;
use crate::geometry::{Pose, Vec3};
use crate::Result;

/// Angular search radius for neighbor queries (radians).
pub const SEARCH_RADIUS: f64 = 0.1;
/// Default maximum spatial spread among the neighbor points (meters).
pub const DEFAULT_BLUR_THRESHOLD: f64 = 0.5;
/// Azimuth band around ±π whose entries are duplicated across the seam.
const SEAM_BAND: f64 = 0.05;

/// Accumulated LiDAR points in world coordinates, tagged by source scan.
#[derive(Debug, Clone, Default)]
pub struct WorldCloud {
    pub points: Vec<Vec3>,
    pub source_frame: Vec<usize>,
}

impl WorldCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Union of the last `horizon` scans transformed into world coordinates.
///
/// `scans` pairs each scan's sensor pose (world-from-sensor) with its
/// sensor-frame points; the source-frame index of each retained point is its
/// scan's position in the input list.
pub fn accumulate(scans: &[(Pose, Vec<Vec3>)], horizon: usize) -> WorldCloud {
    let mut cloud = WorldCloud::default();
    let start = scans.len().saturating_sub(horizon.max(1));
    for (idx, (pose, points)) in scans.iter().enumerate().skip(start) {
        for p in points {
            cloud.points.push(pose.transform(p));
            cloud.source_frame.push(idx);
        }
    }
    cloud
}

/// One depth entry on the sphere.
#[derive(Debug, Clone, Copy)]
pub struct DepthEntry {
    /// Unit direction from the sphere center, panoramic frame.
    pub direction: Vec3,
    pub azimuth: f64,
    pub elevation: f64,
    /// Euclidean distance from the sphere center, meters.
    pub depth: f64,
    pub source_frame: usize,
}

/// Why an association was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionReason {
    None,
    Blur,
    NoNeighbors,
    Behind,
}

/// Depth assigned to one visual feature.
#[derive(Debug, Clone, Copy)]
pub struct FeatureDepth {
    pub depth: f64,
    pub valid: bool,
    pub rejection_reason: RejectionReason,
    /// Supporting plane (unit normal, offset) in the panoramic frame: points
    /// q on the plane satisfy `normal · q = offset`. Present whenever three
    /// neighbors were found, so callers can re-intersect other rays.
    pub plane: Option<(Vec3, f64)>,
}

impl FeatureDepth {
    fn rejected(reason: RejectionReason) -> Self {
        FeatureDepth {
            depth: 0.0,
            valid: false,
            rejection_reason: reason,
            plane: None,
        }
    }
}

// 2-D k-d tree over (azimuth, elevation); build once, box queries only.
#[derive(Debug, Clone)]
struct KdNode {
    point: [f64; 2],
    entry: u32,
    left: i32,
    right: i32,
}

#[derive(Debug, Clone, Default)]
struct KdTree2 {
    nodes: Vec<KdNode>,
    root: i32,
}

impl KdTree2 {
    fn build(points: &[([f64; 2], u32)]) -> Self {
        let mut tree = KdTree2 {
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let mut items: Vec<([f64; 2], u32)> = points.to_vec();
        let n = items.len();
        if n > 0 {
            tree.root = tree.build_rec(&mut items, 0, n, 0);
        }
        tree
    }

    fn build_rec(
        &mut self,
        items: &mut [([f64; 2], u32)],
        lo: usize,
        hi: usize,
        axis: usize,
    ) -> i32 {
        if lo >= hi {
            return -1;
        }
        let mid = (lo + hi) / 2;
        items[lo..hi].select_nth_unstable_by(mid - lo, |a, b| {
            a.0[axis]
                .partial_cmp(&b.0[axis])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let (point, entry) = items[mid];
        let idx = self.nodes.len() as i32;
        self.nodes.push(KdNode {
            point,
            entry,
            left: -1,
            right: -1,
        });
        let left = self.build_rec(items, lo, mid, 1 - axis);
        let right = self.build_rec(items, mid + 1, hi, 1 - axis);
        self.nodes[idx as usize].left = left;
        self.nodes[idx as usize].right = right;
        idx
    }

    /// Collect all entries whose key lies in the axis-aligned box.
    fn range(&self, min: [f64; 2], max: [f64; 2], out: &mut Vec<u32>) {
        self.range_rec(self.root, min, max, 0, out);
    }

    fn range_rec(&self, node: i32, min: [f64; 2], max: [f64; 2], axis: usize, out: &mut Vec<u32>) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        if n.point[0] >= min[0]
            && n.point[0] <= max[0]
            && n.point[1] >= min[1]
            && n.point[1] <= max[1]
        {
            out.push(n.entry);
        }
        if n.point[axis] >= min[axis] {
            self.range_rec(n.left, min, max, 1 - axis, out);
        }
        if n.point[axis] <= max[axis] {
            self.range_rec(n.right, min, max, 1 - axis, out);
        }
    }
}

/// Accumulated LiDAR depths projected onto the panoramic sphere, indexed for
/// angular nearest-neighbor queries. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SphericalDepthMap {
    entries: Vec<DepthEntry>,
    tree: KdTree2,
}

/// Re-express a world cloud in the panoramic frame of `sphere_pose`
/// (world-from-panoramic) and index it on the sphere.
///
/// Points closer than 1e-6 m to the sphere center are dropped; entries within
/// 0.05 rad of the ±π azimuth seam are inserted twice so box queries that
/// cross the seam still see them.
pub fn project_to_sphere(cloud: &WorldCloud, sphere_pose: &Pose) -> SphericalDepthMap {
    let inv = sphere_pose.inverse();
    let mut entries = Vec::with_capacity(cloud.points.len());
    let mut keyed: Vec<([f64; 2], u32)> = Vec::with_capacity(cloud.points.len() + 64);
    for (p, &src) in cloud.points.iter().zip(cloud.source_frame.iter()) {
        let q = inv.transform(p);
        let depth = q.norm();
        if depth < 1e-6 {
            continue;
        }
        let direction = q / depth;
        let azimuth = direction.y.atan2(direction.x);
        let elevation = direction.z.clamp(-1.0, 1.0).asin();
        let id = entries.len() as u32;
        entries.push(DepthEntry {
            direction,
            azimuth,
            elevation,
            depth,
            source_frame: src,
        });
        keyed.push(([azimuth, elevation], id));
        if azimuth > std::f64::consts::PI - SEAM_BAND {
            keyed.push(([azimuth - std::f64::consts::TAU, elevation], id));
        } else if azimuth < -std::f64::consts::PI + SEAM_BAND {
            keyed.push(([azimuth + std::f64::consts::TAU, elevation], id));
        }
    }
    let tree = KdTree2::build(&keyed);
    SphericalDepthMap { entries, tree }
}

impl SphericalDepthMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DepthEntry] {
        &self.entries
    }

    /// The `k` nearest entries to `direction` by true angular distance, among
    /// entries within `max_angle` radians, as `(entry index, angle)` pairs.
    ///
    /// Exact with respect to a brute-force angular scan: the box query covers
    /// the angular cap's bounding box (full azimuth range once the cap touches
    /// a pole), wraps across the ±π seam, deduplicates seam copies and
    /// re-ranks candidates by great-circle angle.
    pub fn nearest_k_within(&self, direction: &Vec3, k: usize, max_angle: f64) -> Vec<(usize, f64)> {
        if self.entries.is_empty() || k == 0 {
            return Vec::new();
        }
        let d = direction.normalize();
        let az = d.y.atan2(d.x);
        let el = d.z.clamp(-1.0, 1.0).asin();

        let el_min = el - max_angle;
        let el_max = el + max_angle;
        let half = std::f64::consts::FRAC_PI_2;
        let d_az = if el.abs() + max_angle >= half {
            std::f64::consts::PI
        } else {
            (max_angle.sin() / el.cos()).clamp(-1.0, 1.0).asin()
        };

        let mut ids: Vec<u32> = Vec::new();
        self.tree
            .range([az - d_az, el_min], [az + d_az, el_max], &mut ids);
        // A box reaching past ±π wraps to the far side of the seam.
        if az - d_az < -std::f64::consts::PI {
            self.tree.range(
                [az - d_az + std::f64::consts::TAU, el_min],
                [std::f64::consts::PI + SEAM_BAND, el_max],
                &mut ids,
            );
        }
        if az + d_az > std::f64::consts::PI {
            self.tree.range(
                [-std::f64::consts::PI - SEAM_BAND, el_min],
                [az + d_az - std::f64::consts::TAU, el_max],
                &mut ids,
            );
        }
        ids.sort_unstable();
        ids.dedup();

        let mut found: Vec<(usize, f64)> = ids
            .into_iter()
            .filter_map(|id| {
                let e = &self.entries[id as usize];
                let ang = e.direction.dot(&d).clamp(-1.0, 1.0).acos();
                (ang <= max_angle).then_some((id as usize, ang))
            })
            .collect();
        found.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        found.truncate(k);
        found
    }

    /// Debug export: one `(azimuth, elevation, depth)` row per entry.
    pub fn to_rows(&self) -> Vec<[f64; 3]> {
        self.entries
            .iter()
            .map(|e| [e.azimuth, e.elevation, e.depth])
            .collect()
    }
}

/// Associate a feature direction with a LiDAR depth.
///
/// Finds the three nearest entries by angular distance. Rejects with
/// `NoNeighbors` when fewer than three entries lie within the search radius,
/// with `Blur` when the maximum pairwise spatial distance among the three
/// exceeds `blur_threshold`, and with `Behind` when the feature ray meets the
/// neighbor plane at non-positive depth.
pub fn associate(
    feature_direction: &Vec3,
    map: &SphericalDepthMap,
    blur_threshold: f64,
) -> FeatureDepth {
    let neighbors = map.nearest_k_within(feature_direction, 3, SEARCH_RADIUS);
    if neighbors.len() < 3 {
        return FeatureDepth::rejected(RejectionReason::NoNeighbors);
    }
    let pts: Vec<Vec3> = neighbors
        .iter()
        .map(|&(id, _)| {
            let e = &map.entries[id];
            e.direction * e.depth
        })
        .collect();

    let normal = (pts[1] - pts[0]).cross(&(pts[2] - pts[0]));
    let d = feature_direction.normalize();
    let n_norm = normal.norm();
    if n_norm < 1e-12 {
        return FeatureDepth::rejected(RejectionReason::NoNeighbors);
    }
    let n_hat = normal / n_norm;
    let denom = n_hat.dot(&d);
    if denom.abs() < 1e-12 {
        return FeatureDepth::rejected(RejectionReason::Behind);
    }
    let offset = n_hat.dot(&pts[0]);
    let depth = offset / denom;

    let max_spread = (pts[0] - pts[1])
        .norm()
        .max((pts[0] - pts[2]).norm())
        .max((pts[1] - pts[2]).norm());
    if max_spread > blur_threshold {
        return FeatureDepth {
            depth: 0.0,
            valid: false,
            rejection_reason: RejectionReason::Blur,
            plane: Some((n_hat, offset)),
        };
    }
    if depth <= 0.0 {
        return FeatureDepth {
            depth: 0.0,
            valid: false,
            rejection_reason: RejectionReason::Behind,
            plane: Some((n_hat, offset)),
        };
    }
    FeatureDepth {
        depth,
        valid: true,
        rejection_reason: RejectionReason::None,
        plane: Some((n_hat, offset)),
    }
}

/// Intersect an arbitrary ray with a supporting plane returned by
/// [`associate`]; yields the distance along the ray, if positive.
pub fn intersect_ray_with_plane(origin: &Vec3, dir: &Vec3, plane: &(Vec3, f64)) -> Result<f64> {
    let (n, offset) = plane;
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return Err(Error::DegeneratePlane);
    }
    let t = (offset - n.dot(origin)) / denom;
    if t <= 0.0 {
        return Err(Error::DegeneratePlane);
    }
    Ok(t)
}
