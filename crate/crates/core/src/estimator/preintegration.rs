//! Midpoint IMU preintegration with first-order bias Jacobians and noise
//! covariance propagation.
//!
//! Measurements between two frames are integrated in the first frame's body
//! frame into relative motion deltas (Δp, Δv, Δq) that do not depend on the
//! absolute states. The stored bias Jacobians are the exact first-order
//! derivatives of the discrete integration map, so residuals built on top of
//! them differentiate cleanly.

use nalgebra::SMatrix;

use crate::error::Error;
use crate::geometry::{skew, so3_exp, so3_right_jacobian, Mat3, Rotation, Vec3};
use crate::sim::ImuSample;
use crate::Result;

pub type Mat15 = SMatrix<f64, 15, 15>;

/// Continuous-time IMU noise densities used for covariance propagation.
#[derive(Debug, Clone, Copy)]
pub struct ImuNoise {
    /// Gyro white noise density, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer white noise density, m/s²/√Hz.
    pub accel_noise: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub gyro_bias_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_bias_walk: f64,
}

impl ImuNoise {
    /// Floor applied to zero densities so noiseless simulations still yield
    /// an invertible, reasonably conditioned covariance.
    fn floored(&self) -> ImuNoise {
        ImuNoise {
            gyro_noise: self.gyro_noise.max(2e-6),
            accel_noise: self.accel_noise.max(2e-5),
            gyro_bias_walk: self.gyro_bias_walk.max(1e-8),
            accel_bias_walk: self.accel_bias_walk.max(1e-7),
        }
    }
}

/// Preintegrated IMU motion between two frames.
#[derive(Debug, Clone)]
pub struct Preintegration {
    pub delta_p: Vec3,
    pub delta_v: Vec3,
    pub delta_q: Rotation,
    pub duration: f64,
    /// Accelerometer / gyro bias at the linearization point.
    pub bias_accel: Vec3,
    pub bias_gyro: Vec3,
    pub j_p_ba: Mat3,
    pub j_p_bg: Mat3,
    pub j_v_ba: Mat3,
    pub j_v_bg: Mat3,
    /// Right-tangent Jacobian of Δq with respect to the gyro bias.
    pub j_q_bg: Mat3,
    /// Error-state covariance, layout [δp, δθ, δv, δba, δbg].
    pub covariance: Mat15,
}

/// Integrate an IMU segment with the midpoint rule at the given bias
/// linearization point. Timestamps must be strictly increasing and at least
/// two samples are required.
pub fn preintegrate(
    samples: &[ImuSample],
    bias_accel: Vec3,
    bias_gyro: Vec3,
    noise: &ImuNoise,
) -> Result<Preintegration> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    for pair in samples.windows(2) {
        if pair[1].t <= pair[0].t {
            return Err(Error::NonMonotonicTimestamps);
        }
    }
    let noise = noise.floored();

    let mut delta_p = Vec3::zeros();
    let mut delta_v = Vec3::zeros();
    let mut delta_q = Rotation::identity();
    let mut j_p_ba = Mat3::zeros();
    let mut j_p_bg = Mat3::zeros();
    let mut j_v_ba = Mat3::zeros();
    let mut j_v_bg = Mat3::zeros();
    let mut j_q_bg = Mat3::zeros();
    let mut cov = Mat15::zeros();

    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.t - s0.t;
        let dt2 = dt * dt;

        let omega_mid = (s0.gyro + s1.gyro) * 0.5 - bias_gyro;
        let dtheta = omega_mid * dt;
        let step_rot = so3_exp(&dtheta);
        let jr = so3_right_jacobian(&dtheta);

        let r0 = delta_q.to_rotation_matrix().into_inner();
        let mut delta_q_next = delta_q * step_rot;
        delta_q_next.renormalize();
        let r1 = delta_q_next.to_rotation_matrix().into_inner();
        let e_mat = step_rot.to_rotation_matrix().into_inner();

        let a0 = s0.accel - bias_accel;
        let a1 = s1.accel - bias_accel;
        let u0 = r0 * a0;
        let u1 = r1 * a1;
        let a_mid = (u0 + u1) * 0.5;

        // exact first-order bias Jacobians of the discrete map
        let j_q_bg_next = e_mat.transpose() * j_q_bg - jr * dt;
        let du0_dba = -r0;
        let du1_dba = -r1;
        let du0_dbg = -r0 * skew(&a0) * j_q_bg;
        let du1_dbg = -r1 * skew(&a1) * j_q_bg_next;
        let da_dba = (du0_dba + du1_dba) * 0.5;
        let da_dbg = (du0_dbg + du1_dbg) * 0.5;

        // error-state transition, layout [δp, δθ, δv, δba, δbg]
        let da_dth = (-r0 * skew(&a0) - r1 * skew(&a1) * e_mat.transpose()) * 0.5;
        let mut a = Mat15::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(da_dth * (0.5 * dt2)));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(Mat3::identity() * dt));
        a.fixed_view_mut::<3, 3>(0, 9).copy_from(&(da_dba * (0.5 * dt2)));
        a.fixed_view_mut::<3, 3>(0, 12).copy_from(&(da_dbg * (0.5 * dt2)));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&e_mat.transpose());
        a.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-jr * dt));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(da_dth * dt));
        a.fixed_view_mut::<3, 3>(6, 9).copy_from(&(da_dba * dt));
        a.fixed_view_mut::<3, 3>(6, 12).copy_from(&(da_dbg * dt));

        cov = a * cov * a.transpose();

        // additive noise: white accel/gyro (sampled variance σ²/dt) and the
        // bias random walks (variance σ_b²·dt)
        let var_a = noise.accel_noise * noise.accel_noise / dt;
        let var_g = noise.gyro_noise * noise.gyro_noise / dt;
        let gyro_to_theta = jr * dt; // per averaged gyro sample pair
        let gyro_to_u1 = r1 * skew(&a1) * jr * dt;

        let mut add = Mat15::zeros();
        // δθ noise: (Jr dt) n_g_avg with Var(n_g_avg) = var_g / 2
        let qtt = gyro_to_theta * gyro_to_theta.transpose() * (var_g * 0.5);
        add.fixed_view_mut::<3, 3>(3, 3).copy_from(&qtt);
        // δv noise: 0.5 dt (R0 n_a0 + R1 n_a1) plus gyro coupling through u1
        let qv = (r0 * r0.transpose() + r1 * r1.transpose()) * (0.25 * dt2 * var_a)
            + gyro_to_u1 * gyro_to_u1.transpose() * (0.25 * dt2 * var_g * 0.5);
        add.fixed_view_mut::<3, 3>(6, 6).copy_from(&qv);
        // δp noise: 0.5 dt · (δv noise)
        add.fixed_view_mut::<3, 3>(0, 0).copy_from(&(qv * (0.25 * dt2)));
        let qp_v = qv * (0.5 * dt);
        add.fixed_view_mut::<3, 3>(0, 6).copy_from(&qp_v);
        add.fixed_view_mut::<3, 3>(6, 0).copy_from(&qp_v.transpose());
        // bias random walks
        let wa = noise.accel_bias_walk * noise.accel_bias_walk * dt;
        let wg = noise.gyro_bias_walk * noise.gyro_bias_walk * dt;
        add.fixed_view_mut::<3, 3>(9, 9).copy_from(&(Mat3::identity() * wa));
        add.fixed_view_mut::<3, 3>(12, 12).copy_from(&(Mat3::identity() * wg));

        cov += add;

        // state update (position uses the pre-update velocity)
        delta_p += delta_v * dt + a_mid * (0.5 * dt2);
        delta_v += a_mid * dt;
        delta_q = delta_q_next;
        j_p_ba += j_v_ba * dt + da_dba * (0.5 * dt2);
        j_p_bg += j_v_bg * dt + da_dbg * (0.5 * dt2);
        j_v_ba += da_dba * dt;
        j_v_bg += da_dbg * dt;
        j_q_bg = j_q_bg_next;
    }

    // keep the covariance numerically symmetric positive definite
    cov = (cov + cov.transpose()) * 0.5;
    for i in 0..15 {
        cov[(i, i)] += 1e-16;
    }

    Ok(Preintegration {
        delta_p,
        delta_v,
        delta_q,
        duration: samples.last().unwrap().t - samples[0].t,
        bias_accel,
        bias_gyro,
        j_p_ba,
        j_p_bg,
        j_v_ba,
        j_v_bg,
        j_q_bg,
        covariance: cov,
    })
}

impl Preintegration {
    /// Deltas corrected to first order for a bias different from the
    /// linearization point.
    pub fn corrected(&self, bias_accel: &Vec3, bias_gyro: &Vec3) -> (Vec3, Vec3, Rotation) {
        let dba = bias_accel - self.bias_accel;
        let dbg = bias_gyro - self.bias_gyro;
        let dp = self.delta_p + self.j_p_ba * dba + self.j_p_bg * dbg;
        let dv = self.delta_v + self.j_v_ba * dba + self.j_v_bg * dbg;
        let mut dq = self.delta_q * so3_exp(&(self.j_q_bg * dbg));
        dq.renormalize();
        (dp, dv, dq)
    }

    /// Square root of the information matrix (inverse covariance).
    pub fn sqrt_information(&self) -> Mat15 {
        let info = self
            .covariance
            .try_inverse()
            .unwrap_or_else(Mat15::identity);
        let sym = (info + info.transpose()) * 0.5;
        match sym.cholesky() {
            Some(c) => c.l().transpose(),
            None => {
                // fall back to a diagonal weighting
                let mut w = Mat15::zeros();
                for i in 0..15 {
                    w[(i, i)] = (1.0 / self.covariance[(i, i)].max(1e-18)).sqrt();
                }
                w
            }
        }
    }
}
