//! Sensor stream synthesis: IMU samples, per-camera feature tracks, LiDAR
//! scans against the room surfaces, and the LiDAR-odometry substitute.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{rotate_axis_angle, Pose, Vec3};
use crate::rig::PanoramicModel;
use crate::Result;

use super::{
    sample_trajectory, stream_rng, Scenario, SEED_IMU, SEED_LIDAR, SEED_ODOM, SEED_TRACKS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObs {
    pub t: f64,
    pub frame: usize,
    pub camera: usize,
    /// Feature id; equals the ground-truth landmark id (no mistracking).
    pub feature_id: u64,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct LidarScan {
    pub t: f64,
    /// Points in the sensor (body) frame.
    pub points: Vec<Vec3>,
}

/// Relative pose between consecutive keyframes as a LiDAR-odometry substitute.
#[derive(Debug, Clone, Copy)]
pub struct OdomEdge {
    pub t_from: f64,
    pub t_to: f64,
    /// Body-frame relative pose taking frame `t_from` into `t_to`.
    pub relative: Pose,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(normal(rng), normal(rng), normal(rng))
}

/// Camera frame timestamps of the scenario.
pub fn frame_times(scenario: &Scenario) -> Vec<f64> {
    let dt = 1.0 / scenario.trajectory.cam_hz;
    let n = (scenario.trajectory.duration / dt).floor() as usize;
    (0..=n)
        .map(|k| k as f64 * dt)
        .filter(|t| *t <= scenario.trajectory.duration)
        .collect()
}

/// LiDAR scan timestamps of the scenario (dropout windows removed).
pub fn scan_times(scenario: &Scenario) -> Vec<f64> {
    let dt = 1.0 / scenario.trajectory.lidar_hz;
    let n = (scenario.trajectory.duration / dt).floor() as usize;
    (0..=n)
        .map(|k| k as f64 * dt)
        .filter(|t| *t <= scenario.trajectory.duration && !scenario.noise.in_dropout(*t))
        .collect()
}

/// Synthesize the IMU stream: analytic gyro/specific force plus white noise
/// and a bias random walk.
pub fn render_imu(scenario: &Scenario) -> Result<Vec<ImuSample>> {
    let mut rng = stream_rng(scenario.seed, SEED_IMU);
    let spec = &scenario.trajectory;
    let dt = 1.0 / spec.imu_hz;
    let sqrt_hz = spec.imu_hz.sqrt();
    let n = (spec.duration / dt).floor() as usize;
    let mut gyro_bias = Vec3::zeros();
    let mut accel_bias = Vec3::zeros();
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        if t > spec.duration {
            break;
        }
        let s = sample_trajectory(spec, t)?;
        let gyro_noise = normal3(&mut rng) * (scenario.noise.gyro_noise * sqrt_hz);
        let accel_noise = normal3(&mut rng) * (scenario.noise.accel_noise * sqrt_hz);
        gyro_bias += normal3(&mut rng) * (scenario.noise.gyro_bias_walk * dt.sqrt());
        accel_bias += normal3(&mut rng) * (scenario.noise.accel_bias_walk * dt.sqrt());
        out.push(ImuSample {
            t,
            gyro: s.angular_rate_body + gyro_noise + gyro_bias,
            accel: s.specific_force_body + accel_noise + accel_bias,
        });
    }
    Ok(out)
}

/// Render per-camera feature tracks: every landmark inside a camera's field of
/// view yields a pixel observation with optional noise, capped by the
/// per-camera feature budget (lowest landmark ids first, for determinism).
pub fn render_tracks(
    scenario: &Scenario,
    rig: &PanoramicModel,
    landmarks: &[Vec3],
) -> Result<Vec<TrackObs>> {
    let mut rng = stream_rng(scenario.seed, SEED_TRACKS);
    let body_from_model = scenario.rig.body_from_model_pose();
    let times = frame_times(scenario);
    let mut out = Vec::new();
    for (frame, &t) in times.iter().enumerate() {
        let body = sample_trajectory(&scenario.trajectory, t)?.pose;
        let world_from_model = body.compose(&body_from_model);
        let model_from_world = world_from_model.inverse();
        for cam in 0..rig.camera_count() {
            let intr = rig.intrinsics(cam)?;
            let extr = rig.extrinsics(cam)?;
            let cam_from_model = Pose::new(extr.rotation, extr.translation).inverse();
            let mut count = 0;
            for (id, lm) in landmarks.iter().enumerate() {
                if count >= scenario.feature_budget_per_camera {
                    break;
                }
                let p_model = model_from_world.transform(lm);
                let p_cam = cam_from_model.transform(&p_model);
                let Ok(px) = intr.project_to_pixel(&p_cam) else {
                    continue;
                };
                let sigma_px = scenario.noise.bearing_sigma * intr.focal;
                let mut u = px.x + sigma_px * normal(&mut rng);
                let mut v = px.y + sigma_px * normal(&mut rng);
                if scenario.noise.pixel_outlier_rate > 0.0
                    && rng.gen::<f64>() < scenario.noise.pixel_outlier_rate
                {
                    // replace by a uniform in-circle pixel
                    let r = intr.focal * intr.fov_half_angle * rng.gen::<f64>().sqrt();
                    let a = rng.gen::<f64>() * std::f64::consts::TAU;
                    u = intr.principal_point[0] + r * a.cos();
                    v = intr.principal_point[1] + r * a.sin();
                }
                out.push(TrackObs {
                    t,
                    frame,
                    camera: cam,
                    feature_id: id as u64,
                    pixel: [u, v],
                });
                count += 1;
            }
        }
    }
    Ok(out)
}

/// Direction of a scan ray in the sensor frame.
fn scan_ray(azimuth: f64, elevation: f64) -> Vec3 {
    let (saz, caz) = azimuth.sin_cos();
    let (sel, cel) = elevation.sin_cos();
    Vec3::new(cel * caz, cel * saz, sel)
}

/// First intersection of a ray from inside the room with its six surfaces.
fn ray_room_exit(origin: &Vec3, dir: &Vec3, extent: &super::RoomExtent) -> Option<f64> {
    let mut t_hit = f64::INFINITY;
    let planes = [
        (Vec3::x(), extent.half_x),
        (-Vec3::x(), extent.half_x),
        (Vec3::y(), extent.half_y),
        (-Vec3::y(), extent.half_y),
        (Vec3::z(), extent.z_max),
        (-Vec3::z(), -extent.z_min),
    ];
    for (n, d) in planes {
        let denom = n.dot(dir);
        if denom <= 1e-12 {
            continue;
        }
        let t = (d - n.dot(origin)) / denom;
        if t > 1e-9 && t < t_hit {
            t_hit = t;
        }
    }
    t_hit.is_finite().then_some(t_hit)
}

/// Synthesize LiDAR scans by casting a ring pattern against the room surfaces
/// and adding range noise. Points are returned in the sensor (body) frame.
pub fn render_lidar(scenario: &Scenario) -> Result<Vec<LidarScan>> {
    let mut rng = stream_rng(scenario.seed, SEED_LIDAR);
    let noise = &scenario.noise;
    let extent = scenario.landmarks.extent;
    let mut scans = Vec::new();
    for t in scan_times(scenario) {
        let body = sample_trajectory(&scenario.trajectory, t)?.pose;
        let origin = body.translation;
        let mut points = Vec::with_capacity(noise.lidar_rings * noise.lidar_points_per_ring);
        for ring in 0..noise.lidar_rings {
            let f = ring as f64 / (noise.lidar_rings - 1).max(1) as f64;
            let elevation =
                (noise.lidar_elev_min_deg + f * (noise.lidar_elev_max_deg - noise.lidar_elev_min_deg))
                    .to_radians();
            for step in 0..noise.lidar_points_per_ring {
                let azimuth = std::f64::consts::TAU * step as f64 / noise.lidar_points_per_ring as f64;
                let d_body = scan_ray(azimuth, elevation);
                let d_world = body.rotate(&d_body);
                let Some(range) = ray_room_exit(&origin, &d_world, &extent) else {
                    continue;
                };
                if range > noise.lidar_max_range {
                    continue;
                }
                let measured = range + noise.lidar_range_sigma * normal(&mut rng);
                points.push(d_body * measured);
            }
        }
        scans.push(LidarScan { t, points });
    }
    Ok(scans)
}

/// Ground-truth relative poses between consecutive keyframes, perturbed by the
/// configured odometry noise; edges inside dropout windows are dropped.
pub fn synth_lidar_odometry(scenario: &Scenario, keyframe_times: &[f64]) -> Result<Vec<OdomEdge>> {
    let mut rng = stream_rng(scenario.seed, SEED_ODOM);
    let mut out = Vec::new();
    for pair in keyframe_times.windows(2) {
        let (t0, t1) = (pair[0], pair[1]);
        // noise is consumed before the dropout check so dropout windows do not
        // shift the noise sequence of later edges
        let trans_noise = normal3(&mut rng) * scenario.noise.odom_trans_sigma;
        let rot_noise = normal3(&mut rng) * scenario.noise.odom_rot_sigma;
        if scenario.noise.in_dropout(t0) || scenario.noise.in_dropout(t1) {
            continue;
        }
        let p0 = sample_trajectory(&scenario.trajectory, t0)?.pose;
        let p1 = sample_trajectory(&scenario.trajectory, t1)?.pose;
        let mut rel = p0.between(&p1);
        rel.translation += trans_noise;
        let dq = if rot_noise.norm() > 0.0 {
            rotate_axis_angle(rot_noise.normalize(), rot_noise.norm()).expect("unit axis")
        } else {
            crate::geometry::Rotation::identity()
        };
        rel.rotation = rel.rotation * dq;
        out.push(OdomEdge {
            t_from: t0,
            t_to: t1,
            relative: rel,
        });
    }
    Ok(out)
}
