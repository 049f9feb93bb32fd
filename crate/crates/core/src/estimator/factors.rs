//! Residuals and analytic Jacobians of the sliding-window factors.
//!
//! Error-state convention per frame, 15 columns in the order
//! `[δp, δθ, δv, δba, δbg]`, with `δθ` a right-multiplicative body-frame
//! perturbation (`q ← q ⊗ Exp(δθ)`) and `δp` additive in the world frame.
//! Inverse depths are optimized through their logarithm.

use nalgebra::{SMatrix, SVector, Vector2};

use crate::geometry::{
    skew, so3_left_jacobian_inv, so3_log, so3_right_jacobian, so3_right_jacobian_inv, Mat3, Pose,
    Rotation, Vec3,
};

use super::preintegration::Preintegration;

/// IMU state of one frame.
#[derive(Debug, Clone, Copy)]
pub struct ImuFrameState {
    pub t: f64,
    /// Position of the body in the world frame.
    pub p: Vec3,
    /// Velocity of the body in the world frame.
    pub v: Vec3,
    /// World-from-body attitude.
    pub q: Rotation,
    pub ba: Vec3,
    pub bg: Vec3,
}

impl ImuFrameState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }

    /// Apply an error-state step `[δp, δθ, δv, δba, δbg]`.
    pub fn retract(&self, d: &SVector<f64, 15>) -> ImuFrameState {
        let mut q = self.q * crate::geometry::so3_exp(&Vec3::new(d[3], d[4], d[5]));
        q.renormalize();
        ImuFrameState {
            t: self.t,
            p: self.p + Vec3::new(d[0], d[1], d[2]),
            v: self.v + Vec3::new(d[6], d[7], d[8]),
            q,
            ba: self.ba + Vec3::new(d[9], d[10], d[11]),
            bg: self.bg + Vec3::new(d[12], d[13], d[14]),
        }
    }
}

pub type Vector15 = SVector<f64, 15>;
pub type Mat15 = SMatrix<f64, 15, 15>;

/// Unwhitened preintegration residual between two consecutive frames:
/// `[r_p, r_θ, r_v, r_ba, r_bg]`. Zero when the states are exactly consistent
/// with the integrated IMU motion.
pub fn imu_residual(
    state_i: &ImuFrameState,
    state_j: &ImuFrameState,
    preint: &Preintegration,
    gravity: &Vec3,
) -> Vector15 {
    let dt = preint.duration;
    let (dp, dv, dq) = preint.corrected(&state_i.ba, &state_i.bg);
    let ri_inv = state_i.q.inverse();

    let s_p = state_j.p - state_i.p - state_i.v * dt - gravity * (0.5 * dt * dt);
    let s_v = state_j.v - state_i.v - gravity * dt;
    let r_p = ri_inv * s_p - dp;
    let r_v = ri_inv * s_v - dv;
    let r_q = so3_log(&(dq.inverse() * (ri_inv * state_j.q)));
    let r_ba = state_j.ba - state_i.ba;
    let r_bg = state_j.bg - state_i.bg;

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_p);
    r.fixed_rows_mut::<3>(3).copy_from(&r_q);
    r.fixed_rows_mut::<3>(6).copy_from(&r_v);
    r.fixed_rows_mut::<3>(9).copy_from(&r_ba);
    r.fixed_rows_mut::<3>(12).copy_from(&r_bg);
    r
}

/// Analytic Jacobians of [`imu_residual`] with respect to the error states of
/// frames `i` and `j`.
pub fn imu_jacobians(
    state_i: &ImuFrameState,
    state_j: &ImuFrameState,
    preint: &Preintegration,
    gravity: &Vec3,
) -> (Mat15, Mat15) {
    let dt = preint.duration;
    let ri_inv_m = state_i.q.inverse().to_rotation_matrix().into_inner();

    let s_p = state_j.p - state_i.p - state_i.v * dt - gravity * (0.5 * dt * dt);
    let s_v = state_j.v - state_i.v - gravity * dt;

    let (_, _, dq) = preint.corrected(&state_i.ba, &state_i.bg);
    let r_q = so3_log(&(dq.inverse() * (state_i.q.inverse() * state_j.q)));
    let jl_inv = so3_left_jacobian_inv(&r_q);
    let jr_inv = so3_right_jacobian_inv(&r_q);
    let corr_m = dq.to_rotation_matrix().into_inner();
    // Jacobian of the bias correction applied through the exponential
    let w = preint.j_q_bg * (state_i.bg - preint.bias_gyro);
    let corr_jr = so3_right_jacobian(&w);

    let mut ji = Mat15::zeros();
    // r_p rows
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-ri_inv_m));
    ji.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&skew(&(ri_inv_m * s_p)));
    ji.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&(-ri_inv_m * dt));
    ji.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-preint.j_p_ba));
    ji.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-preint.j_p_bg));
    // r_θ rows
    ji.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-jl_inv * corr_m.transpose()));
    ji.fixed_view_mut::<3, 3>(3, 12)
        .copy_from(&(-jl_inv * corr_jr * preint.j_q_bg));
    // r_v rows
    ji.fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&skew(&(ri_inv_m * s_v)));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-ri_inv_m));
    ji.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-preint.j_v_ba));
    ji.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-preint.j_v_bg));
    // bias random-walk rows
    ji.fixed_view_mut::<3, 3>(9, 9).copy_from(&(-Mat3::identity()));
    ji.fixed_view_mut::<3, 3>(12, 12).copy_from(&(-Mat3::identity()));

    let mut jj = Mat15::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&ri_inv_m);
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);
    jj.fixed_view_mut::<3, 3>(6, 6).copy_from(&ri_inv_m);
    jj.fixed_view_mut::<3, 3>(9, 9).copy_from(&Mat3::identity());
    jj.fixed_view_mut::<3, 3>(12, 12).copy_from(&Mat3::identity());

    (ji, jj)
}

/// One bearing observation already lifted to the panoramic sphere: the unit
/// direction along the true camera ray and the observing camera's center,
/// both in the panoramic model frame.
#[derive(Debug, Clone, Copy)]
pub struct BearingObs {
    pub dir: Vec3,
    pub camera_center: Vec3,
    pub camera_index: usize,
    /// The sphere point the observation was lifted to (`|u_s| = r`).
    pub u_s: Vec3,
}

/// Spherical reprojection factor between a feature's host frame and one
/// target frame.
#[derive(Debug, Clone, Copy)]
pub struct VisualFactor {
    pub feature: usize,
    pub host: usize,
    pub target: usize,
    pub obs_host: BearingObs,
    pub obs_target: BearingObs,
}

/// Orthonormal basis of the plane orthogonal to a unit vector.
pub fn tangent_basis(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = d.cross(&helper).normalize();
    let b2 = d.cross(&b1);
    (b1, b2)
}

/// Evaluation of one visual factor: residual, Jacobians, and a validity flag
/// (false when the predicted point lies behind the observing camera).
pub struct VisualEval {
    pub residual: Vector2<f64>,
    /// Jacobian w.r.t. the host frame error state.
    pub j_host: SMatrix<f64, 2, 15>,
    /// Jacobian w.r.t. the target frame error state.
    pub j_target: SMatrix<f64, 2, 15>,
    /// Jacobian w.r.t. the feature's log-inverse-depth.
    pub j_depth: Vector2<f64>,
    /// Jacobian w.r.t. the panoramic-model-to-body extrinsic `[δt, δθ]`.
    pub j_extrinsic: SMatrix<f64, 2, 6>,
    pub active: bool,
}

/// Predict the feature bearing in the target frame and project the difference
/// to the observed bearing onto its tangent plane.
///
/// The feature's point is reconstructed along the host observation's camera
/// ray at distance `1/λ` from the host camera center; the prediction subtracts
/// the target camera center before normalizing, so both sides live on true
/// camera rays.
pub fn visual_residual(
    host_state: &ImuFrameState,
    target_state: &ImuFrameState,
    extrinsic: &Pose,
    factor: &VisualFactor,
    log_inv_depth: f64,
) -> VisualEval {
    let depth = (-log_inv_depth).exp();
    let e_r = extrinsic.rotation.to_rotation_matrix().into_inner();
    let e_t = extrinsic.translation;
    let rh = host_state.q.to_rotation_matrix().into_inner();
    let rt_inv = target_state.q.inverse().to_rotation_matrix().into_inner();

    // host panoramic frame -> world
    let x_h = factor.obs_host.camera_center + factor.obs_host.dir * depth;
    let y_h = e_r * x_h + e_t; // host body frame
    let x_w = rh * y_h + host_state.p;
    // world -> target panoramic frame
    let y_t = rt_inv * (x_w - target_state.p); // target body frame
    let x_t = e_r.transpose() * (y_t - e_t);

    let v = x_t - factor.obs_target.camera_center;
    let vn = v.norm();
    let d_obs = factor.obs_target.dir;
    let (b1, b2) = tangent_basis(&d_obs);

    let mut eval = VisualEval {
        residual: Vector2::zeros(),
        j_host: SMatrix::zeros(),
        j_target: SMatrix::zeros(),
        j_depth: Vector2::zeros(),
        j_extrinsic: SMatrix::zeros(),
        active: true,
    };
    if vn < 1e-9 {
        eval.active = false;
        return eval;
    }
    let d_pred = v / vn;
    // behind the observing camera: deactivate for this iteration
    if d_pred.dot(&d_obs) < -0.7 {
        eval.active = false;
        return eval;
    }
    eval.residual = Vector2::new(b1.dot(&(d_pred - d_obs)), b2.dot(&(d_pred - d_obs)));

    // chain rule: r = B^T (v/|v|), dv -> d r
    let proj = (Mat3::identity() - d_pred * d_pred.transpose()) / vn;
    let b_mat = SMatrix::<f64, 2, 3>::from_rows(&[b1.transpose(), b2.transpose()]);
    let dr_dv = b_mat * proj;

    let m_tw = e_r.transpose() * rt_inv; // world -> target model
    // host side
    let dv_dph = m_tw;
    let dv_dth = -m_tw * rh * skew(&y_h);
    let dv_du = m_tw * rh * e_r * (factor.obs_host.dir * (-depth));
    // target side
    let w_t = rt_inv * (x_w - target_state.p);
    let dv_dpt = -m_tw;
    let dv_dtt = e_r.transpose() * skew(&w_t);
    // extrinsic [δt, δθ] with E ← (E_R Exp(δθ), E_t + δt)
    let dv_det = e_r.transpose() * (rt_inv * rh - Mat3::identity());
    let dv_deth = -m_tw * rh * e_r * skew(&x_h) + skew(&x_t);

    eval.j_host
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dr_dv * dv_dph));
    eval.j_host
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(dr_dv * dv_dth));
    eval.j_target
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dr_dv * dv_dpt));
    eval.j_target
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(dr_dv * dv_dtt));
    eval.j_depth = dr_dv * dv_du;
    eval.j_extrinsic
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dr_dv * dv_det));
    eval.j_extrinsic
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(dr_dv * dv_deth));
    eval
}

/// Whitened LiDAR depth prior on a feature: `(1/λ − depth) / σ`.
pub fn depth_prior_residual(inv_depth: f64, lidar_depth: f64, sigma: f64) -> f64 {
    (1.0 / inv_depth - lidar_depth) / sigma
}

/// The same prior parameterized by log-inverse-depth, with its derivative.
pub fn depth_prior_residual_log(log_inv_depth: f64, lidar_depth: f64, sigma: f64) -> (f64, f64) {
    let depth = (-log_inv_depth).exp();
    ((depth - lidar_depth) / sigma, -depth / sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::preintegration::{preintegrate, ImuNoise};
    use crate::geometry::rotate_axis_angle;
    use crate::sim::{ImuSample, GRAVITY};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_noise() -> ImuNoise {
        ImuNoise {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
        }
    }

    fn random_state(rng: &mut impl Rng, t: f64) -> ImuFrameState {
        let axis = Vec3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        )
        .normalize();
        ImuFrameState {
            t,
            p: Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 3.0,
            v: Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
            q: rotate_axis_angle(axis, rng.gen::<f64>() * 2.0).unwrap(),
            ba: Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 0.05,
            bg: Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 0.01,
        }
    }

    fn sine_segment(duration: f64, hz: f64) -> Vec<ImuSample> {
        let n = (duration * hz) as usize;
        (0..=n)
            .map(|k| {
                let t = k as f64 / hz;
                ImuSample {
                    t,
                    gyro: Vec3::new(
                        0.3 * (1.3 * t).sin(),
                        0.2 * (0.9 * t).cos(),
                        0.25 * (1.7 * t).sin(),
                    ),
                    accel: Vec3::new(
                        0.5 * (1.1 * t).sin(),
                        0.4 * (0.7 * t).cos(),
                        9.81 + 0.3 * (1.9 * t).sin(),
                    ),
                }
            })
            .collect()
    }

    /// Integrate the segment exactly (fine midpoint) from a given initial
    /// state under gravity, to create a consistent pair of states.
    fn propagate(state: &ImuFrameState, samples: &[ImuSample]) -> ImuFrameState {
        let mut q = state.q;
        let mut p = state.p;
        let mut v = state.v;
        for w in samples.windows(2) {
            let dt = w[1].t - w[0].t;
            let wm = (w[0].gyro + w[1].gyro) * 0.5 - state.bg;
            let q1 = q * crate::geometry::so3_exp(&(wm * dt));
            let a0 = q * (w[0].accel - state.ba) + GRAVITY;
            let a1 = q1 * (w[1].accel - state.ba) + GRAVITY;
            let am = (a0 + a1) * 0.5;
            p += v * dt + am * (0.5 * dt * dt);
            v += am * dt;
            q = q1;
        }
        ImuFrameState {
            t: state.t + samples.last().unwrap().t - samples[0].t,
            p,
            v,
            q,
            ba: state.ba,
            bg: state.bg,
        }
    }

    #[test]
    fn residual_zero_for_consistent_states() {
        let samples = sine_segment(0.5, 1000.0);
        let preint = preintegrate(&samples, Vec3::zeros(), Vec3::zeros(), &no_noise()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut si = random_state(&mut rng, 0.0);
        si.ba = Vec3::zeros();
        si.bg = Vec3::zeros();
        let sj = propagate(&si, &samples);
        let r = imu_residual(&si, &sj, &preint, &GRAVITY);
        assert!(r.norm() < 1e-8, "residual {r}");
    }

    #[test]
    fn position_perturbation_appears_rotated_into_frame_i() {
        let samples = sine_segment(0.4, 1000.0);
        let preint = preintegrate(&samples, Vec3::zeros(), Vec3::zeros(), &no_noise()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut si = random_state(&mut rng, 0.0);
        si.ba = Vec3::zeros();
        si.bg = Vec3::zeros();
        let sj = propagate(&si, &samples);
        let mut sj_perturbed = sj;
        sj_perturbed.p += Vec3::new(0.1, 0.0, 0.0);
        let r = imu_residual(&si, &sj_perturbed, &preint, &GRAVITY);
        let expected = si.q.inverse() * Vec3::new(0.1, 0.0, 0.0);
        assert!((Vec3::new(r[0], r[1], r[2]) - expected).norm() < 1e-10);
    }

    #[test]
    fn equal_biases_zero_bias_residual() {
        let samples = sine_segment(0.3, 500.0);
        let preint = preintegrate(&samples, Vec3::zeros(), Vec3::zeros(), &no_noise()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let si = random_state(&mut rng, 0.0);
        let mut sj = random_state(&mut rng, 0.3);
        sj.ba = si.ba;
        sj.bg = si.bg;
        let r = imu_residual(&si, &sj, &preint, &GRAVITY);
        assert!(r.fixed_rows::<6>(9).norm() < 1e-15);
    }

    fn fd_imu_jacobian(
        si: &ImuFrameState,
        sj: &ImuFrameState,
        preint: &Preintegration,
        wrt_i: bool,
    ) -> Mat15 {
        let mut j = Mat15::zeros();
        let h = 1e-6;
        for col in 0..15 {
            let mut dp = Vector15::zeros();
            dp[col] = h;
            let mut dm = Vector15::zeros();
            dm[col] = -h;
            let (rp, rm) = if wrt_i {
                (
                    imu_residual(&si.retract(&dp), sj, preint, &GRAVITY),
                    imu_residual(&si.retract(&dm), sj, preint, &GRAVITY),
                )
            } else {
                (
                    imu_residual(si, &sj.retract(&dp), preint, &GRAVITY),
                    imu_residual(si, &sj.retract(&dm), preint, &GRAVITY),
                )
            };
            j.set_column(col, &((rp - rm) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn imu_jacobians_match_finite_differences() {
        let samples = sine_segment(0.4, 500.0);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for trial in 0..20 {
            let si = random_state(&mut rng, 0.0);
            let sj = random_state(&mut rng, 0.4);
            let preint = preintegrate(&samples, si.ba * 0.5, si.bg * 0.5, &no_noise()).unwrap();
            let (ji, jj) = imu_jacobians(&si, &sj, &preint, &GRAVITY);
            let fdi = fd_imu_jacobian(&si, &sj, &preint, true);
            let fdj = fd_imu_jacobian(&si, &sj, &preint, false);
            let scale_i = ji.norm().max(1.0);
            let scale_j = jj.norm().max(1.0);
            assert!(
                (ji - fdi).norm() / scale_i < 1e-4,
                "trial {trial} J_i rel err {}",
                (ji - fdi).norm() / scale_i
            );
            assert!(
                (jj - fdj).norm() / scale_j < 1e-4,
                "trial {trial} J_j rel err {}",
                (jj - fdj).norm() / scale_j
            );
        }
    }

    fn toy_factor(rng: &mut impl Rng) -> (ImuFrameState, ImuFrameState, Pose, VisualFactor, f64) {
        let host = random_state(rng, 0.0);
        let mut target = random_state(rng, 0.1);
        target.p = host.p + Vec3::new(rng.gen::<f64>() + 0.5, rng.gen::<f64>(), rng.gen::<f64>());
        let extrinsic = Pose::new(
            rotate_axis_angle(Vec3::new(0.1, 0.2, 0.97).normalize(), 0.2).unwrap(),
            Vec3::new(0.05, 0.0, 0.1),
        );
        // a world point in front of both frames
        let x_w = host.p + Vec3::new(2.0 + rng.gen::<f64>() * 4.0, rng.gen::<f64>(), rng.gen::<f64>());
        let ch = Vec3::new(0.2, 0.05, -0.03);
        let ct = Vec3::new(-0.1, 0.15, 0.02);
        let model_from_world = |s: &ImuFrameState| {
            Pose::new(s.q, s.p).compose(&extrinsic).inverse()
        };
        let x_h = model_from_world(&host).transform(&x_w);
        let x_t = model_from_world(&target).transform(&x_w);
        let dir_h = (x_h - ch).normalize();
        let dir_t = (x_t - ct).normalize();
        let depth = (x_h - ch).norm();
        let factor = VisualFactor {
            feature: 0,
            host: 0,
            target: 1,
            obs_host: BearingObs {
                dir: dir_h,
                camera_center: ch,
                camera_index: 0,
                u_s: ch + dir_h * 0.9,
            },
            obs_target: BearingObs {
                dir: dir_t,
                camera_center: ct,
                camera_index: 1,
                u_s: ct + dir_t * 0.9,
            },
        };
        (host, target, extrinsic, factor, (1.0 / depth).ln())
    }

    #[test]
    fn visual_residual_zero_at_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let (host, target, extr, factor, log_inv_depth) = toy_factor(&mut rng);
            let eval = visual_residual(&host, &target, &extr, &factor, log_inv_depth);
            assert!(eval.active);
            assert!(eval.residual.norm() < 1e-9, "residual {}", eval.residual.norm());
        }
    }

    #[test]
    fn visual_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let h = 1e-6;
        for trial in 0..100 {
            let (mut host, mut target, extr, factor, mut u) = toy_factor(&mut rng);
            // move off the optimum so the residual and jacobians are generic
            host.p += Vec3::new(0.02, -0.01, 0.015);
            target.q = target.q * rotate_axis_angle(Vec3::y(), 0.02).unwrap();
            u += 0.05;
            let eval = visual_residual(&host, &target, &extr, &factor, u);
            assert!(eval.active);

            // host and target frame blocks (only p and θ are nonzero)
            for col in 0..6 {
                let mut dp = Vector15::zeros();
                dp[col] = h;
                let mut dm = Vector15::zeros();
                dm[col] = -h;
                let rp = visual_residual(&host.retract(&dp), &target, &extr, &factor, u).residual;
                let rm = visual_residual(&host.retract(&dm), &target, &extr, &factor, u).residual;
                let fd = (rp - rm) / (2.0 * h);
                let an = eval.j_host.column(col);
                assert!(
                    (fd - an).norm() < 1e-4 * an.norm().max(1e-3),
                    "trial {trial} host col {col}: fd {fd:?} an {an:?}"
                );
            }
            for col in 0..6 {
                let mut dp = Vector15::zeros();
                dp[col] = h;
                let mut dm = Vector15::zeros();
                dm[col] = -h;
                let rp = visual_residual(&host, &target.retract(&dp), &extr, &factor, u).residual;
                let rm = visual_residual(&host, &target.retract(&dm), &extr, &factor, u).residual;
                let fd = (rp - rm) / (2.0 * h);
                let an = eval.j_target.column(col);
                assert!(
                    (fd - an).norm() < 1e-4 * an.norm().max(1e-3),
                    "trial {trial} target col {col}"
                );
            }
            // depth
            let rp = visual_residual(&host, &target, &extr, &factor, u + h).residual;
            let rm = visual_residual(&host, &target, &extr, &factor, u - h).residual;
            let fd = (rp - rm) / (2.0 * h);
            assert!((fd - eval.j_depth).norm() < 1e-4 * eval.j_depth.norm().max(1e-3));
            // extrinsic
            for col in 0..6 {
                let mut delta = [0.0; 6];
                delta[col] = h;
                let perturb = |sign: f64| {
                    let dt = Vec3::new(delta[0], delta[1], delta[2]) * sign;
                    let dth = Vec3::new(delta[3], delta[4], delta[5]) * sign;
                    Pose::new(
                        extr.rotation * crate::geometry::so3_exp(&dth),
                        extr.translation + dt,
                    )
                };
                let rp = visual_residual(&host, &target, &perturb(1.0), &factor, u).residual;
                let rm = visual_residual(&host, &target, &perturb(-1.0), &factor, u).residual;
                let fd = (rp - rm) / (2.0 * h);
                let an = eval.j_extrinsic.column(col);
                assert!(
                    (fd - an).norm() < 1e-4 * an.norm().max(1e-3),
                    "trial {trial} extrinsic col {col}"
                );
            }
        }
    }

    #[test]
    fn depth_prior_examples() {
        assert_relative_eq!(depth_prior_residual(0.1, 10.0, 1.0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(depth_prior_residual(0.2, 10.0, 1.0), -5.0, epsilon = 1e-12);
        // whitened residual scales inversely with sigma
        assert_relative_eq!(
            depth_prior_residual(0.2, 10.0, 0.5),
            2.0 * depth_prior_residual(0.2, 10.0, 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn depth_prior_log_derivative_matches_fd() {
        let (r, dr) = depth_prior_residual_log(-1.7, 4.0, 0.3);
        let h = 1e-7;
        let (rp, _) = depth_prior_residual_log(-1.7 + h, 4.0, 0.3);
        let (rm, _) = depth_prior_residual_log(-1.7 - h, 4.0, 0.3);
        assert_relative_eq!((rp - rm) / (2.0 * h), dr, epsilon = 1e-5);
        assert_relative_eq!(r, ((1.7f64).exp() - 4.0) / 0.3, epsilon = 1e-10);
    }

    #[test]
    fn gauge_invariance_under_rigid_world_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let samples = sine_segment(0.4, 500.0);
        let preint = preintegrate(&samples, Vec3::zeros(), Vec3::zeros(), &no_noise()).unwrap();
        let (host, target, extr, factor, u) = toy_factor(&mut rng);

        let r_imu = imu_residual(&host, &target, &preint, &GRAVITY);
        let r_vis = visual_residual(&host, &target, &extr, &factor, u).residual;

        let xform = Pose::new(
            rotate_axis_angle(Vec3::new(0.4, -0.3, 0.86).normalize(), 1.1).unwrap(),
            Vec3::new(10.0, -4.0, 2.0),
        );
        let map = |s: &ImuFrameState| ImuFrameState {
            t: s.t,
            p: xform.transform(&s.p),
            v: xform.rotation * s.v,
            q: xform.rotation * s.q,
            ba: s.ba,
            bg: s.bg,
        };
        let g2 = xform.rotation * GRAVITY;
        let r_imu2 = imu_residual(&map(&host), &map(&target), &preint, &g2);
        let r_vis2 = visual_residual(&map(&host), &map(&target), &extr, &factor, u).residual;
        assert!((r_imu - r_imu2).norm() < 1e-10, "imu changed {}", (r_imu - r_imu2).norm());
        assert!((r_vis - r_vis2).norm() < 1e-10);
    }
}
