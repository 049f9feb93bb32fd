//! Fisheye camera models, rig extrinsics, and the panoramic feature model
//! that lifts per-camera bearings onto one normalized sphere.
//!
//! Every camera `i` carries a rigid transform `(R_i, t_i)` into the panoramic
//! model frame. A bearing `u_c` observed by camera `i` maps to the sphere
//! point `u_s = λ R_i u_c + t_i` with `λ > 0` chosen so that `|u_s| = r`.
//! The positive root exists and is unique whenever `|t_i| < r`, which the rig
//! enforces at construction.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{Pose, Rotation, Vec3};
use crate::Result;

/// Equidistant (θ-linear) fisheye intrinsics: radial pixel distance from the
/// principal point equals `focal × incidence angle`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FisheyeIntrinsics {
    /// Focal scale in pixels per radian.
    pub focal: f64,
    /// Principal point (u, v) in pixels.
    pub principal_point: [f64; 2],
    /// Half field of view in radians; rays beyond this incidence angle are out of view.
    pub fov_half_angle: f64,
    /// Image size (width, height) in pixels.
    pub image_size: [u32; 2],
}

impl FisheyeIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.focal <= 0.0 {
            return Err(Error::InvalidRig(format!("focal must be > 0, got {}", self.focal)));
        }
        let max_fov = std::f64::consts::FRAC_PI_2 + 0.35;
        if self.fov_half_angle <= 0.0 || self.fov_half_angle > max_fov {
            return Err(Error::InvalidRig(format!(
                "fov_half_angle must be in (0, {max_fov:.3}], got {}",
                self.fov_half_angle
            )));
        }
        Ok(())
    }

    /// Project a camera-frame point to pixel coordinates.
    ///
    /// The point must be within the field of view; points behind the camera or
    /// beyond the fisheye circle return [`Error::OutOfView`].
    pub fn project_to_pixel(&self, point: &Vec3) -> Result<Vector2<f64>> {
        let n = point.norm();
        if n < 1e-12 {
            return Err(Error::OutOfView);
        }
        let theta = (point.z / n).clamp(-1.0, 1.0).acos();
        if theta > self.fov_half_angle {
            return Err(Error::OutOfView);
        }
        let rxy = (point.x * point.x + point.y * point.y).sqrt();
        let (dir_x, dir_y) = if rxy < 1e-15 {
            (0.0, 0.0)
        } else {
            (point.x / rxy, point.y / rxy)
        };
        let radius = self.focal * theta;
        let px = Vector2::new(
            self.principal_point[0] + radius * dir_x,
            self.principal_point[1] + radius * dir_y,
        );
        if px.x < 0.0
            || px.y < 0.0
            || px.x > self.image_size[0] as f64
            || px.y > self.image_size[1] as f64
        {
            return Err(Error::OutOfView);
        }
        Ok(px)
    }

    /// Invert the projection: pixel to unit bearing in the camera frame.
    ///
    /// Pixels outside the image bounds or beyond the fisheye circle
    /// (`radius > focal × fov_half_angle`) are rejected.
    pub fn unproject_to_bearing(&self, pixel: &Vector2<f64>) -> Result<Vec3> {
        if pixel.x < 0.0
            || pixel.y < 0.0
            || pixel.x > self.image_size[0] as f64
            || pixel.y > self.image_size[1] as f64
        {
            return Err(Error::OutOfImage);
        }
        let dx = pixel.x - self.principal_point[0];
        let dy = pixel.y - self.principal_point[1];
        let radius = (dx * dx + dy * dy).sqrt();
        let theta = radius / self.focal;
        if theta > self.fov_half_angle {
            return Err(Error::OutOfImage);
        }
        if radius < 1e-15 {
            return Ok(Vec3::z());
        }
        let s = theta.sin();
        Ok(Vec3::new(s * dx / radius, s * dy / radius, theta.cos()))
    }
}

/// Pose of camera `i` expressed in the panoramic model frame.
#[derive(Debug, Clone, Copy)]
pub struct CameraExtrinsics {
    /// Camera-to-model rotation; the camera's optical axis is `rotation * ẑ`.
    pub rotation: Rotation,
    /// Camera center in the model frame. Must satisfy `|translation| < r`.
    pub translation: Vec3,
}

impl CameraExtrinsics {
    /// Optical axis of the camera expressed in the model frame.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }
}

/// A feature lifted onto the panoramic sphere.
#[derive(Debug, Clone, Copy)]
pub struct SphereFeature {
    /// Sphere point with `|u_s| = r`, in the panoramic model frame.
    pub u_s: Vec3,
    /// Index of the observing camera.
    pub camera_index: usize,
    /// Positive scale solving `u_s = λ R_i u_c + t_i`.
    pub lambda_scale: f64,
}

/// The panoramic visual feature model: a sphere of radius `r` with one or more
/// fisheye cameras rigidly attached inside it.
#[derive(Debug, Clone)]
pub struct PanoramicModel {
    radius: f64,
    cameras: Vec<(FisheyeIntrinsics, CameraExtrinsics)>,
}

impl PanoramicModel {
    /// Build a model, validating the invariants that make the sphere lift
    /// well-posed: `r > 0`, at least one camera, `focal > 0`, and `|t_i| < r`
    /// for every camera.
    pub fn new(radius: f64, cameras: Vec<(FisheyeIntrinsics, CameraExtrinsics)>) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::InvalidRig(format!("sphere radius must be > 0, got {radius}")));
        }
        if cameras.is_empty() {
            return Err(Error::InvalidRig("rig needs at least one camera".into()));
        }
        for (i, (intr, extr)) in cameras.iter().enumerate() {
            intr.validate()?;
            let d = extr.translation.norm();
            if d >= radius {
                return Err(Error::InvalidRig(format!(
                    "camera {i} center offset {d} must be < sphere radius {radius}"
                )));
            }
        }
        Ok(PanoramicModel { radius, cameras })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn intrinsics(&self, camera_index: usize) -> Result<&FisheyeIntrinsics> {
        self.cameras
            .get(camera_index)
            .map(|(i, _)| i)
            .ok_or(Error::CameraIndex(camera_index))
    }

    pub fn extrinsics(&self, camera_index: usize) -> Result<&CameraExtrinsics> {
        self.cameras
            .get(camera_index)
            .map(|(_, e)| e)
            .ok_or(Error::CameraIndex(camera_index))
    }

    /// Camera center `t_i` in the model frame.
    pub fn camera_center(&self, camera_index: usize) -> Result<Vec3> {
        Ok(self.extrinsics(camera_index)?.translation)
    }

    /// Lift a camera-frame bearing onto the sphere: the unique `λ > 0` with
    /// `|λ R_i u_c + t_i| = r`.
    ///
    /// Scale-invariant in the direction of `u_c`: scaling the bearing by `k`
    /// scales `λ` by `1/k` and leaves `u_s` unchanged.
    pub fn camera_to_sphere(&self, u_c: &Vec3, camera_index: usize) -> Result<SphereFeature> {
        let extr = self.extrinsics(camera_index)?;
        let d = extr.rotation * u_c;
        let a = d.norm_squared();
        if a < 1e-24 {
            return Err(Error::InvalidRig("zero-norm bearing".into()));
        }
        let t = extr.translation;
        let b = d.dot(&t);
        let c = t.norm_squared() - self.radius * self.radius;
        // aλ² + 2bλ + c = 0 with c < 0 guaranteed at construction, so the
        // discriminant is positive and exactly one root is positive.
        let disc = (b * b - a * c).sqrt();
        let lambda = (-b + disc) / a;
        let u_s = d * lambda + t;
        Ok(SphereFeature {
            u_s,
            camera_index,
            lambda_scale: lambda,
        })
    }

    /// Pick the camera whose field of view contains the given model-frame
    /// direction, minimizing the angle to the optical axis as seen from that
    /// camera's center. Ties break to the lowest index.
    pub fn assign_direction_to_camera(&self, direction: &Vec3) -> Result<usize> {
        let target = direction.normalize() * self.radius;
        let mut best: Option<(f64, usize)> = None;
        for (idx, (intr, extr)) in self.cameras.iter().enumerate() {
            let w = target - extr.translation;
            let n = w.norm();
            if n < 1e-12 {
                continue;
            }
            let cosang = (w.dot(&extr.optical_axis()) / n).clamp(-1.0, 1.0);
            let ang = cosang.acos();
            if ang <= intr.fov_half_angle {
                match best {
                    Some((best_ang, _)) if best_ang <= ang => {}
                    _ => best = Some((ang, idx)),
                }
            }
        }
        best.map(|(_, idx)| idx).ok_or(Error::NotCovered)
    }
}

// ---------------------------------------------------------------------------
// Rig configuration file.
// ---------------------------------------------------------------------------

/// On-disk rig description (TOML). See `RigConfig::example_four_camera` for a
/// complete four-camera layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigConfig {
    /// Panoramic sphere radius in meters.
    pub radius: f64,
    /// Rig-to-body extrinsic: translation (m) and rotation quaternion (w,x,y,z)
    /// mapping panoramic-model coordinates into body (IMU) coordinates.
    pub body_from_model: TransformConfig,
    pub cameras: Vec<CameraConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformConfig {
    pub translation: [f64; 3],
    pub rotation_wxyz: [f64; 4],
}

impl TransformConfig {
    pub fn identity() -> Self {
        TransformConfig {
            translation: [0.0; 3],
            rotation_wxyz: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::from_parts(
            self.rotation_wxyz[0],
            self.rotation_wxyz[1],
            self.rotation_wxyz[2],
            self.rotation_wxyz[3],
            Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }

    pub fn from_pose(p: &Pose) -> Self {
        TransformConfig {
            translation: [p.translation.x, p.translation.y, p.translation.z],
            rotation_wxyz: [p.rotation.w, p.rotation.i, p.rotation.j, p.rotation.k],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraConfig {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub image_size: [u32; 2],
    pub fov_half_angle_deg: f64,
    /// Camera center in the panoramic model frame (meters).
    pub translation: [f64; 3],
    /// Camera-to-model rotation quaternion (w, x, y, z).
    pub rotation_wxyz: [f64; 4],
}

impl RigConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("rig: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("rig config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn build(&self) -> Result<PanoramicModel> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                let intr = FisheyeIntrinsics {
                    focal: c.focal,
                    principal_point: c.principal_point,
                    fov_half_angle: c.fov_half_angle_deg.to_radians(),
                    image_size: c.image_size,
                };
                let q = Rotation::from_quaternion(nalgebra::Quaternion::new(
                    c.rotation_wxyz[0],
                    c.rotation_wxyz[1],
                    c.rotation_wxyz[2],
                    c.rotation_wxyz[3],
                ));
                let extr = CameraExtrinsics {
                    rotation: q,
                    translation: Vec3::new(c.translation[0], c.translation[1], c.translation[2]),
                };
                (intr, extr)
            })
            .collect();
        PanoramicModel::new(self.radius, cameras)
    }

    /// Panoramic-model-to-body extrinsic as a pose.
    pub fn body_from_model_pose(&self) -> Pose {
        self.body_from_model.to_pose()
    }

    /// Four outward-facing fisheye cameras spaced 90° in yaw around the
    /// sphere, each offset radially from the sphere center.
    pub fn example_four_camera() -> Self {
        let mut cameras = Vec::new();
        for i in 0..4 {
            let phi = std::f64::consts::FRAC_PI_2 * i as f64;
            let (s, c) = phi.sin_cos();
            // Optical axis along (c, s, 0); camera x tangential, y up.
            let x_axis = Vec3::new(-s, c, 0.0);
            let y_axis = Vec3::new(0.0, 0.0, 1.0);
            let z_axis = Vec3::new(c, s, 0.0);
            let m = nalgebra::Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
            let q = Rotation::from_matrix(&m);
            cameras.push(CameraConfig {
                focal: 300.0,
                principal_point: [384.0, 384.0],
                image_size: [768, 768],
                fov_half_angle_deg: 70.0,
                translation: [0.25 * c, 0.25 * s, 0.0],
                rotation_wxyz: [q.w, q.i, q.j, q.k],
            });
        }
        RigConfig {
            radius: 1.0,
            body_from_model: TransformConfig {
                translation: [0.05, 0.0, 0.10],
                rotation_wxyz: [1.0, 0.0, 0.0, 0.0],
            },
            cameras,
        }
    }
}
