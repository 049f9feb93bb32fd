//! Deterministic ground-truth world: analytic trajectories inside a walled
//! room, landmarks painted on the walls, multi-fisheye track rendering, IMU
//! and LiDAR synthesis, LiDAR-odometry synthesis, and ATE evaluation.
//!
//! Everything is a pure function of (scenario, seed): fixed seeds give
//! bit-identical streams.

mod eval;
mod sensors;
mod trajectory;

pub use eval::{evaluate_ate, umeyama_alignment, AteReport, TrajPoint};
pub use sensors::{
    frame_times, render_imu, render_lidar, render_tracks, scan_times, synth_lidar_odometry,
    ImuSample, LidarScan, OdomEdge, TrackObs,
};
pub use trajectory::{
    sample_trajectory, TrajectoryKind, TrajectorySample, TrajectorySpec, GRAVITY,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::Vec3;
use crate::rig::RigConfig;
use crate::Result;

// Per-stream seed tags so streams stay independent under one scenario seed.
const SEED_LANDMARKS: u64 = 0x4c414e44;
pub(crate) const SEED_IMU: u64 = 0x494d5500;
pub(crate) const SEED_TRACKS: u64 = 0x54524143;
pub(crate) const SEED_LIDAR: u64 = 0x4c494441;
pub(crate) const SEED_ODOM: u64 = 0x4f444f4d;
pub(crate) const SEED_LOOP: u64 = 0x4c4f4f50;

pub(crate) fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(tag))
}

/// Axis-aligned room: four walls, floor and ceiling enclose the trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoomExtent {
    pub half_x: f64,
    pub half_y: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl RoomExtent {
    pub fn contains(&self, p: &Vec3) -> bool {
        p.x.abs() < self.half_x && p.y.abs() < self.half_y && p.z > self.z_min && p.z < self.z_max
    }
}

/// Landmarks sampled on the room walls. Azimuth sectors listed in
/// `masked_sectors` (degrees, start ≤ end, relative to the room center) hold
/// no landmarks, emulating texture-less regions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkField {
    /// Landmarks per square meter of wall.
    pub density: f64,
    pub extent: RoomExtent,
    #[serde(default)]
    pub masked_sectors: Vec<[f64; 2]>,
}

impl LandmarkField {
    fn masked(&self, p: &Vec3) -> bool {
        let az = p.y.atan2(p.x).to_degrees();
        self.masked_sectors
            .iter()
            .any(|s| az >= s[0] && az <= s[1])
    }

    /// Deterministically sample the landmark positions.
    pub fn sample(&self, seed: u64) -> Vec<Vec3> {
        let mut rng = stream_rng(seed, SEED_LANDMARKS);
        let e = &self.extent;
        let h = e.z_max - e.z_min;
        let walls = [
            (2.0 * e.half_y * h, 0usize), // +x
            (2.0 * e.half_y * h, 1),      // -x
            (2.0 * e.half_x * h, 2),      // +y
            (2.0 * e.half_x * h, 3),      // -y
        ];
        let total_area: f64 = walls.iter().map(|w| w.0).sum();
        let count = (self.density * total_area).round() as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let pick = rng.gen::<f64>() * total_area;
            let mut acc = 0.0;
            let mut wall = 0;
            for (area, idx) in &walls {
                acc += area;
                if pick <= acc {
                    wall = *idx;
                    break;
                }
            }
            let a = rng.gen::<f64>() * 2.0 - 1.0;
            let z = e.z_min + rng.gen::<f64>() * h;
            let p = match wall {
                0 => Vec3::new(e.half_x, a * e.half_y, z),
                1 => Vec3::new(-e.half_x, a * e.half_y, z),
                2 => Vec3::new(a * e.half_x, e.half_y, z),
                _ => Vec3::new(a * e.half_x, -e.half_y, z),
            };
            if !self.masked(&p) {
                out.push(p);
            }
        }
        out
    }
}

/// All noise magnitudes driving the simulator. Zero sigmas give exact streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Feature bearing noise, radians (applied in pixel space as focal·σ).
    pub bearing_sigma: f64,
    /// Probability that a track observation is replaced by a random in-view pixel.
    #[serde(default)]
    pub pixel_outlier_rate: f64,
    /// Gyro white noise density, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer white noise density, m/s²/√Hz.
    pub accel_noise: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub gyro_bias_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_bias_walk: f64,
    pub lidar_range_sigma: f64,
    pub lidar_max_range: f64,
    pub lidar_rings: usize,
    pub lidar_points_per_ring: usize,
    pub lidar_elev_min_deg: f64,
    pub lidar_elev_max_deg: f64,
    /// Per-edge LiDAR odometry noise.
    pub odom_trans_sigma: f64,
    pub odom_rot_sigma: f64,
    /// Time windows `[start, end]` with no LiDAR scans or odometry.
    #[serde(default)]
    pub odom_dropouts: Vec<[f64; 2]>,
    pub loop_trans_sigma: f64,
    pub loop_rot_sigma: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            bearing_sigma: 0.0,
            pixel_outlier_rate: 0.0,
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            lidar_range_sigma: 0.0,
            lidar_max_range: 30.0,
            lidar_rings: 16,
            lidar_points_per_ring: 180,
            lidar_elev_min_deg: -30.0,
            lidar_elev_max_deg: 30.0,
            odom_trans_sigma: 0.0,
            odom_rot_sigma: 0.0,
            odom_dropouts: Vec::new(),
            loop_trans_sigma: 0.0,
            loop_rot_sigma: 0.0,
        }
    }

    pub fn in_dropout(&self, t: f64) -> bool {
        self.odom_dropouts.iter().any(|w| t >= w[0] && t <= w[1])
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.bearing_sigma,
            self.gyro_noise,
            self.accel_noise,
            self.gyro_bias_walk,
            self.accel_bias_walk,
            self.lidar_range_sigma,
            self.odom_trans_sigma,
            self.odom_rot_sigma,
            self.loop_trans_sigma,
            self.loop_rot_sigma,
        ];
        if sigmas.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(Error::InvalidScenario("noise sigmas must be >= 0".into()));
        }
        if self.lidar_rings < 2 || self.lidar_points_per_ring < 8 {
            return Err(Error::InvalidScenario("LiDAR pattern too sparse".into()));
        }
        Ok(())
    }
}

/// Complete scenario: trajectory, world, rig, noise and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Per-camera cap on rendered feature tracks per frame.
    pub feature_budget_per_camera: usize,
    pub trajectory: TrajectorySpec,
    pub landmarks: LandmarkField,
    pub noise: NoiseModel,
    pub rig: RigConfig,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.noise.validate()?;
        self.rig
            .build()
            .map_err(|e| Error::InvalidScenario(format!("rig: {e}")))?;
        if self.feature_budget_per_camera == 0 {
            return Err(Error::InvalidScenario("feature budget must be >= 1".into()));
        }
        // the trajectory must stay inside the room
        let n = 64;
        for k in 0..=n {
            let t = self.trajectory.duration * k as f64 / n as f64;
            let p = sample_trajectory(&self.trajectory, t)?.pose.translation;
            if !self.landmarks.extent.contains(&p) {
                return Err(Error::InvalidScenario(format!(
                    "trajectory leaves the room at t = {t:.2}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(s).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    /// Look up a bundled scenario by name, or load a TOML file at the path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(s) = Self::builtin(name_or_path) {
            return Ok(s);
        }
        let p = std::path::Path::new(name_or_path);
        if p.exists() {
            Self::load(p)
        } else {
            Err(Error::Config(format!(
                "scenario '{name_or_path}' is neither a bundled name ({}) nor an existing file",
                Self::BUILTIN_NAMES.join(", ")
            )))
        }
    }

    pub const BUILTIN_NAMES: [&'static str; 4] =
        ["square_loop", "figure_eight", "stairs_helix", "masked_texture"];

    /// Bundled example scenarios.
    pub fn builtin(name: &str) -> Option<Self> {
        let rig = RigConfig::example_four_camera();
        let mut noise = NoiseModel::noiseless();
        noise.bearing_sigma = 1e-3;
        noise.gyro_noise = 2e-4;
        noise.accel_noise = 2e-3;
        noise.gyro_bias_walk = 1e-6;
        noise.accel_bias_walk = 1e-5;
        noise.lidar_range_sigma = 0.02;
        noise.odom_trans_sigma = 0.02;
        noise.odom_rot_sigma = 0.003;
        noise.loop_trans_sigma = 0.02;
        noise.loop_rot_sigma = 0.003;
        noise.lidar_rings = 24;
        noise.lidar_points_per_ring = 240;

        let room = RoomExtent {
            half_x: 8.0,
            half_y: 8.0,
            z_min: -2.0,
            z_max: 4.0,
        };

        match name {
            "square_loop" => Some(Scenario {
                name: name.into(),
                rig: rig.clone(),
                seed: 1,
                feature_budget_per_camera: 20,
                trajectory: TrajectorySpec {
                    kind: TrajectoryKind::SquareLoop,
                    size: 4.0,
                    period: 24.0,
                    duration: 24.0,
                    imu_hz: 400.0,
                    cam_hz: 10.0,
                    lidar_hz: 10.0,
                    yaw_follow: true,
                    climb: 0.0,
                },
                landmarks: LandmarkField {
                    density: 0.6,
                    extent: room,
                    masked_sectors: Vec::new(),
                },
                noise: NoiseModel {
                    bearing_sigma: 2e-3,
                    odom_trans_sigma: 0.06,
                    odom_rot_sigma: 0.006,
                    ..noise
                },
            }),
            "figure_eight" => Some(Scenario {
                name: name.into(),
                rig: rig.clone(),
                seed: 2,
                feature_budget_per_camera: 20,
                trajectory: TrajectorySpec {
                    kind: TrajectoryKind::FigureEight,
                    size: 3.0,
                    period: 12.0,
                    duration: 12.0,
                    imu_hz: 400.0,
                    cam_hz: 10.0,
                    lidar_hz: 10.0,
                    yaw_follow: true,
                    climb: 0.0,
                },
                landmarks: LandmarkField {
                    density: 0.8,
                    extent: room,
                    masked_sectors: Vec::new(),
                },
                noise,
            }),
            "stairs_helix" => Some(Scenario {
                name: name.into(),
                rig: rig.clone(),
                seed: 3,
                feature_budget_per_camera: 20,
                trajectory: TrajectorySpec {
                    kind: TrajectoryKind::StairsHelix,
                    size: 2.5,
                    period: 10.0,
                    duration: 20.0,
                    imu_hz: 400.0,
                    cam_hz: 10.0,
                    lidar_hz: 10.0,
                    yaw_follow: true,
                    climb: 1.2,
                },
                landmarks: LandmarkField {
                    density: 0.8,
                    extent: RoomExtent {
                        half_x: 7.0,
                        half_y: 7.0,
                        z_min: -2.0,
                        z_max: 6.0,
                    },
                    masked_sectors: Vec::new(),
                },
                // LiDAR degradation: long dropout windows starve the depth
                // association and the odometry chain.
                noise: NoiseModel {
                    odom_dropouts: vec![[3.0, 8.0], [11.0, 16.0]],
                    odom_trans_sigma: 0.05,
                    odom_rot_sigma: 0.005,
                    ..noise
                },
            }),
            "masked_texture" => Some(Scenario {
                name: name.into(),
                rig: rig.clone(),
                seed: 4,
                feature_budget_per_camera: 20,
                trajectory: TrajectorySpec {
                    kind: TrajectoryKind::Circle,
                    size: 3.0,
                    period: 16.0,
                    duration: 16.0,
                    imu_hz: 400.0,
                    cam_hz: 10.0,
                    lidar_hz: 10.0,
                    yaw_follow: false,
                    climb: 0.0,
                },
                // camera 0 faces +x with a 70° half field of view; the masked
                // sector removes every landmark it could see.
                landmarks: LandmarkField {
                    density: 0.8,
                    extent: room,
                    masked_sectors: vec![[-85.0, 85.0]],
                },
                noise: NoiseModel {
                    odom_trans_sigma: 0.08,
                    odom_rot_sigma: 0.008,
                    ..noise
                },
            }),
            _ => None,
        }
    }
}
