//! Trajectory evaluation: rigid alignment (no scale) followed by the RMSE of
//! translational residuals.

use nalgebra::Matrix3;

use crate::error::Error;
use crate::geometry::{Pose, Rotation, Vec3};
use crate::Result;

/// One timestamped pose of a trajectory file.
#[derive(Debug, Clone, Copy)]
pub struct TrajPoint {
    pub t: f64,
    pub pose: Pose,
}

/// Best rigid transform (rotation + translation, no scale) mapping `src`
/// points onto `dst` in the least-squares sense.
pub fn umeyama_alignment(src: &[Vec3], dst: &[Vec3]) -> Result<Pose> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Alignment(format!(
            "need >= 3 matched points, got {} / {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s: Vec3 = src.iter().sum::<Vec3>() / n;
    let mu_d: Vec3 = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        h += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Alignment("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Alignment("svd failed".into()))?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).scale_mut(-1.0);
        r = u * v_t;
    }
    let q = Rotation::from_matrix(&r);
    let t = mu_d - q * mu_s;
    Ok(Pose::new(q, t))
}

#[derive(Debug, Clone)]
pub struct AteReport {
    /// Root-mean-square translational error after alignment, meters.
    pub rmse: f64,
    /// Per-matched-pose `(timestamp, translational error)` rows.
    pub per_pose: Vec<(f64, f64)>,
    pub matched: usize,
    /// The rigid transform that aligned the estimate onto the truth.
    pub alignment: Pose,
}

/// Absolute trajectory error: associate estimate and truth poses by nearest
/// timestamp (within `max_dt`), rigidly align the estimate onto the truth,
/// and report the RMSE of the translational residuals.
pub fn evaluate_ate(estimate: &[TrajPoint], truth: &[TrajPoint], max_dt: f64) -> Result<AteReport> {
    let mut est_pts = Vec::new();
    let mut tru_pts = Vec::new();
    let mut stamps = Vec::new();
    let mut j = 0usize;
    for e in estimate {
        // truth is time-ordered; advance to the nearest timestamp
        while j + 1 < truth.len()
            && (truth[j + 1].t - e.t).abs() <= (truth[j].t - e.t).abs()
        {
            j += 1;
        }
        if truth.is_empty() || (truth[j].t - e.t).abs() > max_dt {
            continue;
        }
        est_pts.push(e.pose.translation);
        tru_pts.push(truth[j].pose.translation);
        stamps.push(e.t);
    }
    if est_pts.len() < 3 {
        return Err(Error::Alignment(format!(
            "only {} poses matched within {max_dt} s",
            est_pts.len()
        )));
    }
    let alignment = umeyama_alignment(&est_pts, &tru_pts)?;
    let mut sum_sq = 0.0;
    let mut per_pose = Vec::with_capacity(est_pts.len());
    for ((e, t), &stamp) in est_pts.iter().zip(tru_pts.iter()).zip(stamps.iter()) {
        let err = (alignment.transform(e) - t).norm();
        sum_sq += err * err;
        per_pose.push((stamp, err));
    }
    Ok(AteReport {
        rmse: (sum_sq / est_pts.len() as f64).sqrt(),
        matched: est_pts.len(),
        per_pose,
        alignment,
    })
}
