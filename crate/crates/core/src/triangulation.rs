//! Triangulation on the panoramic sphere model.
//!
//! The naive route intersects rays from the sphere centers, which is biased
//! whenever a camera center is offset from the sphere center. The compensated
//! route exploits that for each view the camera center, sphere center, sphere
//! point and target point are coplanar: intersecting those per-view planes
//! recovers the point seen by the physical cameras. A closed-form
//! least-squares ray intersection serves as the independent oracle.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::geometry::Vec3;
use crate::geometry::Pose;
use crate::Result;

/// One feature observation expressed on the panoramic sphere of one frame.
#[derive(Debug, Clone, Copy)]
pub struct SphereObservation {
    /// World-from-panoramic-frame pose of the observing frame.
    pub frame_pose: Pose,
    /// Sphere point in the panoramic frame, `|u_s| = r`.
    pub u_s: Vec3,
    /// Observing camera center in the panoramic frame (`|c| < r`).
    pub camera_center: Vec3,
    pub camera_index: usize,
}

impl SphereObservation {
    /// Sphere radius implied by the observation.
    pub fn radius(&self) -> f64 {
        self.u_s.norm()
    }

    /// Sphere center in world coordinates.
    pub fn sphere_center_w(&self) -> Vec3 {
        self.frame_pose.translation
    }

    /// Sphere point in world coordinates.
    pub fn sphere_point_w(&self) -> Vec3 {
        self.frame_pose.transform(&self.u_s)
    }

    /// Camera center in world coordinates.
    pub fn camera_center_w(&self) -> Vec3 {
        self.frame_pose.transform(&self.camera_center)
    }

    /// Direction of the sphere-center ray in world coordinates.
    pub fn sphere_ray_dir_w(&self) -> Vec3 {
        (self.sphere_point_w() - self.sphere_center_w()).normalize()
    }

    /// The true camera ray in world coordinates: origin at the camera center,
    /// direction through the sphere point.
    pub fn camera_ray_w(&self) -> (Vec3, Vec3) {
        let o = self.camera_center_w();
        let d = (self.sphere_point_w() - o).normalize();
        (o, d)
    }
}

/// Result of a triangulation.
#[derive(Debug, Clone, Copy)]
pub struct TriangulatedPoint {
    /// Position in world coordinates.
    pub position: Vec3,
    /// Whether the extrinsic compensation was applied.
    pub compensated: bool,
    /// RMS point-to-ray distance (two-view) or smallest singular value of the
    /// normalized plane system (multi-view). Zero for exact solutions.
    pub residual: f64,
    /// Set when a degeneracy gate forced a fallback or a rank-deficient solve.
    pub degenerate: bool,
}

/// The per-pair geometric quantities behind the compensation.
#[derive(Debug, Clone, Copy)]
pub struct CompensationGeometry {
    /// Plane normal of view 1 (world frame, unnormalized cross product).
    pub n1: Vec3,
    /// Plane normal of view 2 (world frame, unnormalized cross product).
    pub n2: Vec3,
    /// Plane intersection direction `n1 × n2` (world frame, unnormalized).
    pub m: Vec3,
    /// Angle at the sphere point between the sphere ray and the camera ray.
    pub alpha: f64,
    /// Angle between the chosen intersection direction and the sphere ray.
    pub gamma: f64,
    /// Depth of the compensable base point along the first sphere ray.
    pub lambda_p_prime: f64,
    /// Length of the applied correction.
    pub lambda_pp_prime: f64,
}

fn rms_ray_distance(p: &Vec3, rays: &[(Vec3, Vec3)]) -> f64 {
    let sum: f64 = rays
        .iter()
        .map(|(o, d)| {
            let w = p - o;
            (w.norm_squared() - w.dot(d).powi(2)).max(0.0)
        })
        .sum();
    (sum / rays.len() as f64).sqrt()
}

/// Midpoint-of-common-perpendicular triangulation from the sphere centers.
///
/// Returns the point plus the depth of the point along the first sphere ray
/// (the distance from the first sphere center measured along that ray).
pub fn triangulate_naive(
    obs1: &SphereObservation,
    obs2: &SphereObservation,
) -> Result<(TriangulatedPoint, f64)> {
    let o1 = obs1.sphere_center_w();
    let o2 = obs2.sphere_center_w();
    let d1 = obs1.sphere_ray_dir_w();
    let d2 = obs2.sphere_ray_dir_w();

    let cross = d1.cross(&d2);
    if cross.norm() < 1e-6 {
        return Err(Error::DegenerateBaseline);
    }
    let w0 = o1 - o2;
    let b = d1.dot(&d2);
    let d = d1.dot(&w0);
    let e = d2.dot(&w0);
    let den = 1.0 - b * b;
    let s = (b * e - d) / den;
    let t = (e - b * d) / den;
    let p1 = o1 + d1 * s;
    let p2 = o2 + d2 * t;
    let mid = (p1 + p2) * 0.5;
    let depth_along_first = (mid - o1).dot(&d1);
    let point = TriangulatedPoint {
        position: mid,
        compensated: false,
        residual: rms_ray_distance(&mid, &[(o1, d1), (o2, d2)]),
        degenerate: false,
    };
    Ok((point, depth_along_first))
}

/// World-frame normal of the plane through the sphere center, the camera
/// center and the sphere point of one observation (unnormalized cross
/// product).
///
/// Degenerate when the camera sits at the sphere center (`|c| < 1e-6·r`) or
/// when the camera center direction is parallel to the bearing; callers fall
/// back to the uncompensated result in that case.
pub fn plane_normal(obs: &SphereObservation) -> Result<Vec3> {
    let r = obs.radius();
    if obs.camera_center.norm() < 1e-6 * r {
        return Err(Error::DegeneratePlane);
    }
    let s = obs.sphere_center_w();
    let n = (obs.camera_center_w() - s).cross(&(obs.sphere_point_w() - s));
    if n.norm() < 1e-12 * r * r {
        return Err(Error::DegeneratePlane);
    }
    Ok(n)
}

/// Depth correction scale: `λ · sin(α) / sin(α + γ)`.
pub fn compensation_depth_residual(alpha: f64, gamma: f64, lambda_p_prime: f64) -> f64 {
    lambda_p_prime * alpha.sin() / (alpha + gamma).sin()
}

/// Correct a naive two-view triangulation for the camera-center offsets.
///
/// The two per-view planes (camera center, sphere center, sphere point) both
/// contain the point seen by the physical cameras, so the corrected point lies
/// on their intersection line. The base point on that line is found along the
/// first sphere ray, and the correction length follows the depth-residual
/// scale evaluated at the pair of plane angles. The sign of the intersection
/// direction is not fixed by the construction; both it and the angle branch
/// are resolved by minimizing the summed squared distance to the two observed
/// camera rays. Falls back to the naive point (flagged) on any degeneracy.
pub fn compensate_two_view(
    obs1: &SphereObservation,
    obs2: &SphereObservation,
    naive: &TriangulatedPoint,
    naive_depth: f64,
) -> TriangulatedPoint {
    let fallback = |degenerate: bool| TriangulatedPoint {
        compensated: false,
        degenerate,
        ..*naive
    };

    match compensation_geometry(obs1, obs2, naive_depth) {
        Ok((geom, point)) => {
            let _ = geom;
            point
        }
        Err(Error::DegeneratePlane) => fallback(false),
        Err(_) => fallback(true),
    }
}

/// Full compensation with the intermediate geometry exposed.
pub fn compensation_geometry(
    obs1: &SphereObservation,
    obs2: &SphereObservation,
    naive_depth: f64,
) -> Result<(CompensationGeometry, TriangulatedPoint)> {
    let r = obs1.radius();
    let n1 = plane_normal(obs1)?;
    let n2 = plane_normal(obs2)?;
    let m = n1.cross(&n2);
    if m.norm() < 1e-9 {
        return Err(Error::DegeneratePlane);
    }
    let m_hat = m.normalize();
    let n2_hat = n2.normalize();

    let s1 = obs1.sphere_center_w();
    let s2 = obs2.sphere_center_w();
    let ds1 = obs1.sphere_ray_dir_w();

    // Base point: first sphere ray ∩ second plane, which lies on the plane
    // intersection line because the ray lies inside the first plane.
    let den = n2_hat.dot(&ds1);
    if den.abs() < 1e-12 {
        return Err(Error::DegenerateBaseline);
    }
    let lambda_c = n2_hat.dot(&(s2 - s1)) / den;
    // Conditioning gates: the base point must be in front, not effectively at
    // the sphere surface, and not orders of magnitude beyond the scene scale.
    let baseline = (s2 - s1).norm();
    let scale = naive_depth.abs() + baseline;
    if lambda_c <= 0.0 || (lambda_c - r).abs() < 0.05 * r || (lambda_c - r).abs() > 100.0 * scale {
        return Err(Error::DegenerateBaseline);
    }
    let base_point = s1 + ds1 * lambda_c;

    // Angle at the sphere point between the sphere ray and the camera ray,
    // from cross/dot products for stability at small angles.
    let v_su = obs1.sphere_point_w() - s1;
    let v_cu = v_su - (obs1.camera_center_w() - s1);
    let nsu = v_su.norm();
    let ncu = v_cu.norm();
    let sin_a = v_su.cross(&v_cu).norm() / (nsu * ncu);
    let cos_a = v_su.dot(&v_cu) / (nsu * ncu);
    let alpha = sin_a.atan2(cos_a);

    let cam_rays = [obs1.camera_ray_w(), obs2.camera_ray_w()];
    let base_len = (lambda_c - r).abs() * sin_a;

    let mut best: Option<(f64, Vec3, f64, f64)> = None;
    for sigma in [1.0, -1.0] {
        let dir = m_hat * sigma;
        let sin_g = dir.cross(&ds1).norm();
        let cos_g = dir.dot(&ds1);
        let gamma = sin_g.atan2(cos_g);
        let sin_ag = sin_a * cos_g + cos_a * sin_g;
        if sin_ag.abs() < 1e-9 {
            continue;
        }
        let lambda_pp = (base_len / sin_ag).abs();
        for tau in [1.0, -1.0] {
            let candidate = base_point + m_hat * (tau * lambda_pp);
            let cost: f64 = cam_rays
                .iter()
                .map(|(o, d)| {
                    let w = candidate - o;
                    (w.norm_squared() - w.dot(d).powi(2)).max(0.0)
                })
                .sum();
            if best.map_or(true, |(c, ..)| cost < c) {
                best = Some((cost, candidate, gamma, lambda_pp));
            }
        }
    }
    let (_, position, gamma, lambda_pp) = best.ok_or(Error::DegenerateBaseline)?;

    let geom = CompensationGeometry {
        n1,
        n2,
        m,
        alpha,
        gamma,
        lambda_p_prime: lambda_c,
        lambda_pp_prime: lambda_pp,
    };
    let point = TriangulatedPoint {
        position,
        compensated: true,
        residual: rms_ray_distance(&position, &cam_rays),
        degenerate: false,
    };
    Ok((geom, point))
}

/// Multi-view triangulation by intersecting the per-view planes.
///
/// Each observation contributes the plane through its camera center, sphere
/// center and sphere point, transported to world coordinates by the frame
/// pose. The stacked system is solved by SVD; with exactly two independent
/// planes (the generic two-view case) the remaining free direction along the
/// plane-intersection line is resolved by least squares against the observed
/// camera rays and the result is flagged rank-deficient.
pub fn triangulate_multiview(observations: &[&SphereObservation]) -> Result<TriangulatedPoint> {
    let mut rows: Vec<(Vec3, f64)> = Vec::new();
    let mut rays: Vec<(Vec3, Vec3)> = Vec::new();
    for obs in observations {
        rays.push(obs.camera_ray_w());
        if let Ok(n) = plane_normal(obs) {
            let nh = n.normalize();
            rows.push((nh, nh.dot(&obs.sphere_center_w())));
        }
    }
    if rows.len() < 2 {
        return Err(Error::Underdetermined);
    }

    let n = rows.len();
    // Normal-equation form keeps the spectral analysis 3×3 regardless of the
    // number of planes, so the two-plane null direction is always available.
    let mut ata = crate::geometry::Mat3::zeros();
    let mut atb = Vec3::zeros();
    for (nh, rhs) in &rows {
        ata += nh * nh.transpose();
        atb += nh * *rhs;
    }
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sv: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    if sv[1] < 1e-9 * sv[0].max(1.0) {
        return Err(Error::Underdetermined);
    }
    let rank_deficient = sv[2] < 1e-7 * sv[0];

    let mut position = Vec3::zeros();
    for k in 0..3 {
        if k == 2 && rank_deficient {
            break;
        }
        let q: Vec3 = eig.eigenvectors.column(order[k]).into();
        position += q * (q.dot(&atb) / eig.eigenvalues[order[k]]);
    }
    if rank_deficient {
        // Resolve the free direction along the plane-intersection line by
        // 1-D least squares against the observed camera rays.
        let free: Vec3 = eig.eigenvectors.column(order[2]).into();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for (o, d) in &rays {
            let fperp = free - d * free.dot(d);
            let w0 = position - o;
            let wperp = w0 - d * w0.dot(d);
            quad += fperp.norm_squared();
            lin += 2.0 * wperp.dot(&fperp);
        }
        if quad > 1e-12 {
            position -= free * (lin / (2.0 * quad));
        }
    }

    // Residual: smallest singular value of the row-normalized homogeneous
    // system [n̂ | −n̂·S].
    let mut h = DMatrix::<f64>::zeros(n, 4);
    for (i, (nh, rhs)) in rows.iter().enumerate() {
        let row = nalgebra::RowVector4::new(nh.x, nh.y, nh.z, -rhs);
        let norm = row.norm();
        h.row_mut(i).copy_from(&(row / norm));
    }
    let hsv = h.svd(false, false);
    let residual = hsv
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .max(0.0);

    Ok(TriangulatedPoint {
        position,
        compensated: true,
        residual,
        degenerate: rank_deficient,
    })
}

/// Closed-form least-squares intersection of rays: the point minimizing the
/// summed squared point-to-line distance. This is the verification oracle for
/// the compensated triangulation routes.
pub fn oracle_ray_intersection(rays: &[(Vec3, Vec3)]) -> Result<Vec3> {
    if rays.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: rays.len(),
        });
    }
    let mut a = crate::geometry::Mat3::zeros();
    let mut b = Vec3::zeros();
    for (o, d) in rays {
        let dh = d.normalize();
        let proj = crate::geometry::Mat3::identity() - dh * dh.transpose();
        a += proj;
        b += proj * o;
    }
    // All-parallel rays leave the matrix rank-deficient along the direction.
    let svd = a.svd(false, false);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max();
    if smin < 1e-9 * smax.max(1.0) {
        return Err(Error::ParallelRays);
    }
    a.lu()
        .solve(&b)
        .ok_or(Error::ParallelRays)
}
