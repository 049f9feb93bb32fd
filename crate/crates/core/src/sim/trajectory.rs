//! Analytic ground-truth trajectories with exact first and second time
//! derivatives, computed with second-order dual numbers so every trajectory
//! kind is twice differentiable by construction.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{rotate_axis_angle, Pose, Vec3};
use crate::Result;

/// Scalar carrying its value and first two time derivatives.
#[derive(Debug, Clone, Copy)]
struct Dual2 {
    v: f64,
    d1: f64,
    d2: f64,
}

impl Dual2 {
    fn var(t: f64) -> Self {
        Dual2 { v: t, d1: 1.0, d2: 0.0 }
    }

    fn con(c: f64) -> Self {
        Dual2 { v: c, d1: 0.0, d2: 0.0 }
    }

    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Dual2 {
            v: s,
            d1: c * self.d1,
            d2: c * self.d2 - s * self.d1 * self.d1,
        }
    }

    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Dual2 {
            v: c,
            d1: -s * self.d1,
            d2: -s * self.d2 - c * self.d1 * self.d1,
        }
    }

    fn ln(self) -> Self {
        Dual2 {
            v: self.v.ln(),
            d1: self.d1 / self.v,
            d2: self.d2 / self.v - (self.d1 * self.d1) / (self.v * self.v),
        }
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual2 {
            v: e,
            d1: e * self.d1,
            d2: e * (self.d2 + self.d1 * self.d1),
        }
    }

    fn powi(self, n: i32) -> Self {
        let vp = self.v.powi(n - 2);
        let nn = n as f64;
        Dual2 {
            v: vp * self.v * self.v,
            d1: nn * vp * self.v * self.d1,
            d2: nn * vp * (self.v * self.d2 + (nn - 1.0) * self.d1 * self.d1),
        }
    }
}

impl std::ops::Add for Dual2 {
    type Output = Dual2;
    fn add(self, o: Dual2) -> Dual2 {
        Dual2 {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
        }
    }
}

impl std::ops::Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, o: Dual2) -> Dual2 {
        Dual2 {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        }
    }
}

impl std::ops::Mul<f64> for Dual2 {
    type Output = Dual2;
    fn mul(self, k: f64) -> Dual2 {
        Dual2 {
            v: self.v * k,
            d1: self.d1 * k,
            d2: self.d2 * k,
        }
    }
}

/// Trajectory shapes available to scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Line,
    Circle,
    FigureEight,
    SquareLoop,
    StairsHelix,
}

/// Analytic trajectory description plus the sensor sample rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Characteristic size in meters (radius / half-amplitude / half-side).
    pub size: f64,
    /// Seconds per revolution (ignored by `line`, which moves at `size`/period m/s).
    pub period: f64,
    pub duration: f64,
    pub imu_hz: f64,
    pub cam_hz: f64,
    pub lidar_hz: f64,
    /// Yaw follows the horizontal velocity direction when true; fixed zero yaw
    /// otherwise.
    #[serde(default = "default_true")]
    pub yaw_follow: bool,
    /// Vertical climb per period for `stairs_helix`, meters.
    #[serde(default)]
    pub climb: f64,
}

fn default_true() -> bool {
    true
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.period > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidScenario(
                "trajectory size, period and duration must be positive".into(),
            ));
        }
        if !(self.imu_hz > 0.0 && self.cam_hz > 0.0 && self.lidar_hz > 0.0) {
            return Err(Error::InvalidScenario("sample rates must be positive".into()));
        }
        Ok(())
    }

    /// Position with exact first and second derivatives at time `t`.
    fn position_dual(&self, t: f64) -> [Dual2; 3] {
        let tt = Dual2::var(t);
        let omega = std::f64::consts::TAU / self.period;
        let theta = tt * omega;
        let a = self.size;
        match self.kind {
            TrajectoryKind::Line => {
                let speed = a / self.period;
                [tt * speed, Dual2::con(0.0), Dual2::con(0.0)]
            }
            TrajectoryKind::Circle => [theta.cos() * a, theta.sin() * a, Dual2::con(0.0)],
            TrajectoryKind::FigureEight => {
                // Gerono lemniscate: smooth, passes through the origin.
                [
                    theta.sin() * a,
                    (theta.sin() * theta.cos()) * a,
                    Dual2::con(0.0),
                ]
            }
            TrajectoryKind::SquareLoop => {
                // Superellipse |x|^8 + |y|^8 = a^8 in polar form: analytic and
                // C-infinity, with nearly straight sides and rounded corners.
                let c8 = theta.cos().powi(8);
                let s8 = theta.sin().powi(8);
                let rho = ((c8 + s8).ln() * (-1.0 / 8.0)).exp() * a;
                [rho * theta.cos(), rho * theta.sin(), Dual2::con(0.0)]
            }
            TrajectoryKind::StairsHelix => {
                let climb_rate = self.climb / self.period;
                [theta.cos() * a, theta.sin() * a, tt * climb_rate]
            }
        }
    }
}

/// One ground-truth sample: pose, world velocity, body angular rate and body
/// specific force (what an ideal IMU measures under gravity).
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub pose: Pose,
    pub velocity: Vec3,
    pub angular_rate_body: Vec3,
    pub specific_force_body: Vec3,
}

/// World-frame gravity used throughout the simulator.
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

/// Evaluate the analytic trajectory at `t ∈ [0, duration]`.
pub fn sample_trajectory(spec: &TrajectorySpec, t: f64) -> Result<TrajectorySample> {
    if !(0.0..=spec.duration).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            duration: spec.duration,
        });
    }
    let p = spec.position_dual(t);
    let position = Vec3::new(p[0].v, p[1].v, p[2].v);
    let velocity = Vec3::new(p[0].d1, p[1].d1, p[2].d1);
    let accel = Vec3::new(p[0].d2, p[1].d2, p[2].d2);

    let (yaw, yaw_rate) = if spec.yaw_follow {
        let vx = p[0].d1;
        let vy = p[1].d1;
        let v2 = vx * vx + vy * vy;
        if v2 < 1e-12 {
            (0.0, 0.0)
        } else {
            (vy.atan2(vx), (vx * p[1].d2 - vy * p[0].d2) / v2)
        }
    } else {
        (0.0, 0.0)
    };

    let rotation = rotate_axis_angle(Vec3::z(), yaw).expect("z axis");
    let pose = Pose::new(rotation, position);
    // Yaw-only orientation: the body angular rate is the yaw rate about body z.
    let angular_rate_body = Vec3::new(0.0, 0.0, yaw_rate);
    let specific_force_body = rotation.inverse() * (accel - GRAVITY);

    Ok(TrajectorySample {
        pose,
        velocity,
        angular_rate_body,
        specific_force_body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(kind: TrajectoryKind) -> TrajectorySpec {
        TrajectorySpec {
            kind,
            size: 3.0,
            period: 12.0,
            duration: 24.0,
            imu_hz: 200.0,
            cam_hz: 10.0,
            lidar_hz: 10.0,
            yaw_follow: true,
            climb: 1.5,
        }
    }

    #[test]
    fn line_has_zero_specific_force_beyond_gravity() {
        let mut s = spec(TrajectoryKind::Line);
        s.yaw_follow = false;
        let sample = sample_trajectory(&s, 5.0).unwrap();
        assert!(sample.angular_rate_body.norm() < 1e-15);
        let expected = -GRAVITY;
        assert!((sample.specific_force_body - expected).norm() < 1e-12);
    }

    #[test]
    fn circle_centripetal_magnitude() {
        let s = spec(TrajectoryKind::Circle);
        let omega = std::f64::consts::TAU / s.period;
        let sample = sample_trajectory(&s, 3.0).unwrap();
        // subtract gravity contribution in the world frame
        let accel_world = sample.pose.rotation * sample.specific_force_body + GRAVITY;
        assert_relative_eq!(accel_world.norm(), s.size * omega * omega, epsilon = 1e-10);
        // gyro is the constant revolution rate
        assert_relative_eq!(sample.angular_rate_body.z, omega, epsilon = 1e-10);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let s = spec(TrajectoryKind::Circle);
        assert!(matches!(
            sample_trajectory(&s, s.duration + 1e-9),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            sample_trajectory(&s, -1e-9),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    /// Finite-difference oracle: velocity and acceleration from the positions
    /// alone, yaw rate from the yaw samples.
    fn fd_check(kind: TrajectoryKind) {
        let s = spec(kind);
        let h = 1e-5;
        for &t in &[1.0, 4.3, 7.7, 11.2, 15.9, 21.4] {
            let sample = sample_trajectory(&s, t).unwrap();
            let pm = sample_trajectory(&s, t - h).unwrap().pose.translation;
            let pp = sample_trajectory(&s, t + h).unwrap().pose.translation;
            let p0 = sample.pose.translation;
            let v_fd = (pp - pm) / (2.0 * h);
            let a_fd = (pp - 2.0 * p0 + pm) / (h * h);
            assert!(
                (v_fd - sample.velocity).norm() < 1e-6,
                "{kind:?} velocity fd {}",
                (v_fd - sample.velocity).norm()
            );
            let accel_world = sample.pose.rotation * sample.specific_force_body + GRAVITY;
            assert!(
                (a_fd - accel_world).norm() < 2e-4,
                "{kind:?} accel fd {}",
                (a_fd - accel_world).norm()
            );
            // angular rate via relative rotation of nearby poses
            let qm = sample_trajectory(&s, t - h).unwrap().pose.rotation;
            let qp = sample_trajectory(&s, t + h).unwrap().pose.rotation;
            let w_fd = (qm.inverse() * qp).scaled_axis() / (2.0 * h);
            assert!(
                (w_fd - sample.angular_rate_body).norm() < 1e-5,
                "{kind:?} gyro fd {}",
                (w_fd - sample.angular_rate_body).norm()
            );
        }
    }

    #[test]
    fn finite_differences_agree_circle() {
        fd_check(TrajectoryKind::Circle);
    }

    #[test]
    fn finite_differences_agree_figure_eight() {
        fd_check(TrajectoryKind::FigureEight);
    }

    #[test]
    fn finite_differences_agree_square_loop() {
        fd_check(TrajectoryKind::SquareLoop);
    }

    #[test]
    fn finite_differences_agree_stairs_helix() {
        fd_check(TrajectoryKind::StairsHelix);
    }

    #[test]
    fn square_loop_stays_near_square() {
        let s = spec(TrajectoryKind::SquareLoop);
        for k in 0..100 {
            let t = s.period * k as f64 / 100.0;
            let p = sample_trajectory(&s, t).unwrap().pose.translation;
            let linf = p.x.abs().max(p.y.abs());
            assert!(linf <= s.size + 1e-9);
            assert!(linf >= s.size * 0.84, "superellipse radius too small: {linf}");
        }
    }

    #[test]
    fn helix_climbs_linearly() {
        let s = spec(TrajectoryKind::StairsHelix);
        let p0 = sample_trajectory(&s, 0.0).unwrap().pose.translation;
        let p1 = sample_trajectory(&s, s.period).unwrap().pose.translation;
        assert_relative_eq!(p1.z - p0.z, s.climb, epsilon = 1e-12);
    }
}
