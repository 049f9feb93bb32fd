//! End-to-end pipeline: sensor streams in, trajectory and metrics out.
//!
//! The run loop mirrors the system layout: tracks are lifted onto the
//! panoramic sphere, LiDAR clouds accumulated in the odometry frame supply
//! feature depth priors, features without depth are triangulated (with or
//! without extrinsic compensation), the sliding window is optimized per
//! frame, and a global pose graph fuses the visual-inertial odometry with the
//! LiDAR odometry and loop closures.
//!
//! Reports are split into a deterministic `metrics.txt` (byte-identical for
//! identical config + seed) and a wall-clock `timings.txt` sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::depth::{self, accumulate, associate, project_to_sphere};
use crate::error::Error;
use crate::estimator::{
    optimize_window, preintegrate, BearingObs, FeatureKey, ImuFrameState, ImuNoise, SolverConfig,
    WindowState,
};
use crate::geometry::{Pose, Vec3};
use crate::pose_graph::{
    propose_loops, FactorKind, GraphNode, PoseGraph, RelativePoseFactor, CHI2_GATE_6DOF,
};
use crate::rig::PanoramicModel;
use crate::sim::{
    evaluate_ate, render_imu, render_lidar, render_tracks, sample_trajectory, stream_rng,
    synth_lidar_odometry, ImuSample, LidarScan, OdomEdge, Scenario, TrackObs, TrajPoint,
};
use crate::streams;
use crate::triangulation::{
    compensate_two_view, triangulate_multiview, triangulate_naive, SphereObservation,
};
use crate::Result;

/// Which cameras feed the estimator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CameraSelection {
    All,
    Subset(Vec<usize>),
}

impl CameraSelection {
    pub fn contains(&self, cam: usize) -> bool {
        match self {
            CameraSelection::All => true,
            CameraSelection::Subset(v) => v.contains(&cam),
        }
    }

    pub fn label(&self) -> String {
        match self {
            CameraSelection::All => "all".into(),
            CameraSelection::Subset(v) => v
                .iter()
                .map(|c| format!("camera{c}"))
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(CameraSelection::All);
        }
        let list: std::result::Result<Vec<usize>, _> =
            s.split(',').map(|tok| tok.trim().parse::<usize>()).collect();
        let list = list.map_err(|e| Error::Config(format!("bad camera list '{s}': {e}")))?;
        if list.is_empty() {
            return Err(Error::Config("camera subset must be non-empty".into()));
        }
        Ok(CameraSelection::Subset(list))
    }
}

/// Feature toggles of one run.
#[derive(Debug, Clone)]
pub struct RunToggles {
    pub cameras: CameraSelection,
    pub compensation: bool,
    pub loop_closure: bool,
    pub depth_association: bool,
}

impl Default for RunToggles {
    fn default() -> Self {
        RunToggles {
            cameras: CameraSelection::All,
            compensation: true,
            loop_closure: true,
            depth_association: true,
        }
    }
}

/// Pipeline-level parameters not owned by the solver or the scenario.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// Information sigmas of visual-inertial odometry graph edges.
    pub vio_trans_sigma: f64,
    pub vio_rot_sigma: f64,
    /// Sigma of LiDAR depth priors on features.
    pub depth_prior_sigma: f64,
    pub loop_radius: f64,
    pub loop_min_gap: usize,
    /// Scan accumulation horizon, in scans.
    pub accumulation_horizon: usize,
    pub blur_threshold: f64,
    /// Minimum translation between host and newest observation before a
    /// feature is triangulated, meters.
    pub min_baseline: f64,
    /// Optimize once at the end over all frames instead of sliding.
    pub batch_mode: bool,
    /// Dump the spherical depth map every N frames (debug).
    pub dump_depth_map_every: Option<usize>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            vio_trans_sigma: 0.002,
            vio_rot_sigma: 0.0005,
            depth_prior_sigma: 0.3,
            loop_radius: 2.0,
            loop_min_gap: 60,
            accumulation_horizon: 5,
            blur_threshold: depth::DEFAULT_BLUR_THRESHOLD,
            min_baseline: 0.3,
            batch_mode: false,
            dump_depth_map_every: None,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub solver: SolverConfig,
    pub params: PipelineParams,
    pub toggles: RunToggles,
}

/// In-memory sensor streams.
#[derive(Debug, Clone)]
pub struct Streams {
    pub imu: Vec<ImuSample>,
    pub tracks: Vec<TrackObs>,
    pub scans: Vec<LidarScan>,
    pub odometry: Vec<OdomEdge>,
    pub truth: Vec<TrajPoint>,
}

impl Streams {
    /// Synthesize all five streams from the scenario.
    pub fn synthesize(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let rig = scenario.rig.build()?;
        let landmarks = scenario.landmarks.sample(scenario.seed);
        let imu = render_imu(scenario)?;
        let tracks = render_tracks(scenario, &rig, &landmarks)?;
        let scans = render_lidar(scenario)?;
        let frame_times = crate::sim::frame_times(scenario);
        let odometry = synth_lidar_odometry(scenario, &frame_times)?;
        let truth = frame_times
            .iter()
            .map(|&t| {
                sample_trajectory(&scenario.trajectory, t).map(|s| TrajPoint { t, pose: s.pose })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Streams {
            imu,
            tracks,
            scans,
            odometry,
            truth,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        streams::write_imu(&dir.join("imu.txt"), &self.imu)?;
        streams::write_tracks(&dir.join("tracks.txt"), &self.tracks)?;
        streams::write_scans(&dir.join("scans.txt"), &self.scans)?;
        streams::write_odometry(&dir.join("lidar_odom.txt"), &self.odometry)?;
        streams::write_trajectory(&dir.join("truth.txt"), &self.truth)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Streams {
            imu: streams::read_imu(&dir.join("imu.txt"))?,
            tracks: streams::read_tracks(&dir.join("tracks.txt"))?,
            scans: streams::read_scans(&dir.join("scans.txt"))?,
            odometry: streams::read_odometry(&dir.join("lidar_odom.txt"))?,
            truth: streams::read_trajectory(&dir.join("truth.txt"))?,
        })
    }
}

/// Wall-clock stage timings, milliseconds per frame.
#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub lift_ms: Vec<f64>,
    pub depth_ms: Vec<f64>,
    pub triangulate_ms: Vec<f64>,
    pub optimize_ms: Vec<f64>,
    pub graph_ms: f64,
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v[v.len() / 2]
}

impl StageTimings {
    /// Per-frame visual front-end time: sphere lifting, depth-map build and
    /// association, and triangulation (the stages that scale with cameras),
    /// excluding the window optimization back-end.
    pub fn visual_frontend_median_ms(&self) -> f64 {
        let combined: Vec<f64> = self
            .lift_ms
            .iter()
            .zip(self.depth_ms.iter())
            .zip(self.triangulate_ms.iter())
            .map(|((a, b), c)| a + b + c)
            .collect();
        median(&combined)
    }
}

/// Outcome of one full pipeline run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario_name: String,
    pub seed: u64,
    pub config_digest: String,
    pub frames: usize,
    pub diverged: bool,
    pub ate_rmse: Option<f64>,
    pub ate_rmse_vio: Option<f64>,
    pub per_pose_errors: Vec<(f64, f64)>,
    pub triangulation_rmse: Option<f64>,
    pub triangulation_count: usize,
    pub compensation_applied: usize,
    pub compensation_mean_shift: f64,
    pub features_tracked: usize,
    pub features_initialized: usize,
    pub depth_valid: usize,
    pub depth_pruned: usize,
    pub depth_blur: usize,
    pub depth_no_neighbors: usize,
    pub depth_behind: usize,
    pub loops_proposed: usize,
    pub loops_accepted: usize,
    pub vio_trajectory: Vec<TrajPoint>,
    pub final_trajectory: Vec<TrajPoint>,
    pub solver_rows: Vec<(usize, usize, f64, bool)>,
    pub timings: StageTimings,
}

impl RunReport {
    /// Deterministic key-value metrics block (no timings).
    pub fn metrics_text(&self) -> String {
        let fmt_opt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.9}"),
            None => "fail".into(),
        };
        let mut lines = vec![
            format!("scenario = {}", self.scenario_name),
            format!("seed = {}", self.seed),
            format!("config_digest = {}", self.config_digest),
            format!("frames = {}", self.frames),
            format!("diverged = {}", self.diverged),
            format!("ate_rmse = {}", fmt_opt(&self.ate_rmse)),
            format!("ate_rmse_vio = {}", fmt_opt(&self.ate_rmse_vio)),
            format!("triangulation_rmse = {}", fmt_opt(&self.triangulation_rmse)),
            format!("triangulation_count = {}", self.triangulation_count),
            format!("compensation_applied = {}", self.compensation_applied),
            format!(
                "compensation_mean_shift = {:.9}",
                self.compensation_mean_shift
            ),
            format!("features_tracked = {}", self.features_tracked),
            format!("features_initialized = {}", self.features_initialized),
            format!("depth_valid = {}", self.depth_valid),
            format!("depth_pruned = {}", self.depth_pruned),
            format!("depth_blur = {}", self.depth_blur),
            format!("depth_no_neighbors = {}", self.depth_no_neighbors),
            format!("depth_behind = {}", self.depth_behind),
            format!("loops_proposed = {}", self.loops_proposed),
            format!("loops_accepted = {}", self.loops_accepted),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn timings_text(&self) -> String {
        format!(
            "lift_ms_median = {:.4}\ndepth_ms_median = {:.4}\ntriangulate_ms_median = {:.4}\noptimize_ms_median = {:.4}\nvisual_frontend_ms_median = {:.4}\ngraph_ms_total = {:.4}\n",
            median(&self.timings.lift_ms),
            median(&self.timings.depth_ms),
            median(&self.timings.triangulate_ms),
            median(&self.timings.optimize_ms),
            self.timings.visual_frontend_median_ms(),
            self.timings.graph_ms,
        )
    }

    /// Write all artifacts of the run into a directory.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        streams::write_trajectory(&dir.join("trajectory.txt"), &self.final_trajectory)?;
        streams::write_trajectory(&dir.join("trajectory_vio.txt"), &self.vio_trajectory)?;
        let write = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p.display().to_string(), e))
        };
        write("metrics.txt", &self.metrics_text())?;
        write("timings.txt", &self.timings_text())?;
        let mut err_rows = String::from("# t translational_error\n");
        for (t, e) in &self.per_pose_errors {
            err_rows.push_str(&format!("{t} {e}\n"));
        }
        write("ate_errors.txt", &err_rows)?;
        let mut log = String::from("# frame iteration cost accepted\n");
        for (frame, iter, cost, accepted) in &self.solver_rows {
            log.push_str(&format!("{frame} {iter} {cost} {}\n", *accepted as u8));
        }
        write("solver_log.txt", &log)?;
        Ok(())
    }
}

/// SHA-256 digest of the run configuration.
pub fn config_digest(config: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(config.scenario.to_toml_string().as_bytes());
    h.update(config.solver.to_toml_string().as_bytes());
    h.update(
        format!(
            "cameras={} compensation={} loop={} depth={} batch={}",
            config.toggles.cameras.label(),
            config.toggles.compensation,
            config.toggles.loop_closure,
            config.toggles.depth_association,
            config.params.batch_mode,
        )
        .as_bytes(),
    );
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lifted track observations of one frame.
struct FrameObs {
    t: f64,
    obs: Vec<(FeatureKey, BearingObs)>,
}

fn lift_tracks(
    tracks: &[TrackObs],
    rig: &PanoramicModel,
    cameras: &CameraSelection,
) -> Result<Vec<FrameObs>> {
    let mut frames: Vec<FrameObs> = Vec::new();
    for obs in tracks {
        while frames.len() <= obs.frame {
            frames.push(FrameObs {
                t: obs.t,
                obs: Vec::new(),
            });
        }
        frames[obs.frame].t = obs.t;
        if !cameras.contains(obs.camera) {
            continue;
        }
        let intr = rig.intrinsics(obs.camera)?;
        let Ok(bearing) =
            intr.unproject_to_bearing(&nalgebra::Vector2::new(obs.pixel[0], obs.pixel[1]))
        else {
            continue; // pixel outside the fisheye circle
        };
        let feature = rig.camera_to_sphere(&bearing, obs.camera)?;
        let c = rig.camera_center(obs.camera)?;
        let dir = (feature.u_s - c).normalize();
        frames[obs.frame].obs.push((
            (obs.camera, obs.feature_id),
            BearingObs {
                dir,
                camera_center: c,
                camera_index: obs.camera,
                u_s: feature.u_s,
            },
        ));
    }
    Ok(frames)
}

/// Predict the next frame state by midpoint integration of the IMU segment.
fn propagate_state(state: &ImuFrameState, seg: &[ImuSample], t1: f64) -> ImuFrameState {
    let mut q = state.q;
    let mut p = state.p;
    let mut v = state.v;
    for w in seg.windows(2) {
        let dt = w[1].t - w[0].t;
        let wm = (w[0].gyro + w[1].gyro) * 0.5 - state.bg;
        let q1 = q * crate::geometry::so3_exp(&(wm * dt));
        let a0 = q * (w[0].accel - state.ba) + crate::sim::GRAVITY;
        let a1 = q1 * (w[1].accel - state.ba) + crate::sim::GRAVITY;
        let am = (a0 + a1) * 0.5;
        p += v * dt + am * (0.5 * dt * dt);
        v += am * dt;
        q = q1;
    }
    ImuFrameState {
        t: t1,
        p,
        v,
        q,
        ba: state.ba,
        bg: state.bg,
    }
}

/// Run the full pipeline on the given streams.
pub fn run(config: &RunConfig, streams_in: &Streams) -> Result<RunReport> {
    let scenario = &config.scenario;
    let rig = scenario.rig.build()?;
    let extrinsic = scenario.rig.body_from_model_pose();
    let landmarks = scenario.landmarks.sample(scenario.seed);
    let digest = config_digest(config);

    let frames = lift_tracks(&streams_in.tracks, &rig, &config.toggles.cameras)?;
    let frame_times: Vec<f64> = streams_in.truth.iter().map(|p| p.t).collect();
    let n_frames = frame_times.len();
    if n_frames < 3 {
        return Err(Error::InvalidScenario("too few frames".into()));
    }

    let imu_noise = ImuNoise {
        gyro_noise: scenario.noise.gyro_noise,
        accel_noise: scenario.noise.accel_noise,
        gyro_bias_walk: scenario.noise.gyro_bias_walk,
        accel_bias_walk: scenario.noise.accel_bias_walk,
    };

    // odometry edges indexed by their destination frame
    let mut odom_by_dest: BTreeMap<usize, &OdomEdge> = BTreeMap::new();
    for e in &streams_in.odometry {
        if let Some(k) = frame_times.iter().position(|&t| (t - e.t_to).abs() < 1e-9) {
            odom_by_dest.insert(k, e);
        }
    }

    // gauge: start at the true initial pose; initial velocity from the first
    // odometry edge when available
    let init_pose = streams_in.truth[0].pose;
    let dt_frame = frame_times[1] - frame_times[0];
    let init_v = match odom_by_dest.get(&1) {
        Some(e) => {
            // the edge gives the mean velocity over [t0, t1]; shift it back to
            // t0 with the measured initial acceleration
            let v_mean = init_pose.rotation * (e.relative.translation / dt_frame);
            let a0 = streams_in
                .imu
                .first()
                .map(|s0| init_pose.rotation * s0.accel + crate::sim::GRAVITY)
                .unwrap_or_else(Vec3::zeros);
            v_mean - a0 * (0.5 * dt_frame)
        }
        None => Vec3::zeros(),
    };
    let first = ImuFrameState {
        t: frame_times[0],
        p: init_pose.translation,
        v: init_v,
        q: init_pose.rotation,
        ba: Vec3::zeros(),
        bg: Vec3::zeros(),
    };

    let mut window = WindowState::new(first, extrinsic);
    if let Some(f0) = frames.first() {
        for (key, obs) in &f0.obs {
            window.add_observation(0, *key, *obs);
        }
    }

    // scans are registered with the estimator's own poses: the freshest
    // window estimate when the frame is still in the window, the frozen
    // keyframe pose afterwards
    let mut scans_iter = streams_in.scans.iter().peekable();
    let mut placed_scans: Vec<(usize, Vec<Vec3>)> = Vec::new();

    let mut timings = StageTimings::default();
    let mut solver_rows: Vec<(usize, usize, f64, bool)> = Vec::new();
    let mut vio_keyframes: Vec<TrajPoint> = vec![TrajPoint {
        t: frame_times[0],
        pose: init_pose,
    }];
    let mut vio_edges: Vec<(usize, Pose)> = Vec::new(); // (dest frame, relative)
    let mut diverged = false;

    // statistics
    let mut tri_errors: Vec<f64> = Vec::new();
    let mut comp_shifts: Vec<f64> = Vec::new();
    let mut depth_valid = 0usize;
    let mut depth_pruned = 0usize;
    let mut depth_blur = 0usize;
    let mut depth_no_neighbors = 0usize;
    let mut depth_behind = 0usize;
    let mut features_seen: std::collections::BTreeSet<FeatureKey> = Default::default();
    let mut features_initialized = 0usize;

    // window frame index of pipeline frame k is k - first_window_frame
    let mut first_window_frame = 0usize;

    for k in 1..n_frames {
        let t0 = frame_times[k - 1];
        let t1 = frame_times[k];

        let seg: Vec<ImuSample> = streams_in
            .imu
            .iter()
            .filter(|s| s.t >= t0 - 1e-9 && s.t <= t1 + 1e-9)
            .cloned()
            .collect();
        if seg.len() < 2 {
            return Err(Error::Estimator(format!(
                "no IMU samples between frames {} and {}",
                k - 1,
                k
            )));
        }
        let last_state = *window.frames.last().expect("window non-empty");
        let preint = preintegrate(&seg, last_state.ba, last_state.bg, &imu_noise)?;
        let predicted = propagate_state(&last_state, &seg, t1);
        let rel_pred = last_state.pose().between(&predicted.pose());

        // grow the window
        let capacity = if config.params.batch_mode {
            usize::MAX
        } else {
            config.solver.window_size
        };
        let before_len = window.len();
        window.push_frame(predicted, preint, capacity)?;
        if window.len() <= before_len {
            first_window_frame += 1;
        }
        let wk = k - first_window_frame;

        // lift this frame's observations
        let t_lift = Instant::now();
        if let Some(fo) = frames.get(k) {
            for (key, obs) in &fo.obs {
                features_seen.insert(*key);
                window.add_observation(wk, *key, *obs);
            }
        }
        timings.lift_ms.push(t_lift.elapsed().as_secs_f64() * 1e3);

        // depth association for features hosted in this frame
        let t_depth = Instant::now();
        if config.toggles.depth_association {
            while let Some(s) = scans_iter.peek() {
                if s.t > t1 + 1e-9 {
                    break;
                }
                let s = scans_iter.next().expect("peeked");
                let fi = frame_times
                    .iter()
                    .position(|&t| (t - s.t).abs() < 0.5 * dt_frame)
                    .unwrap_or(k)
                    .min(k);
                placed_scans.push((fi, s.points.clone()));
            }
            if !placed_scans.is_empty() {
                // resolve each retained scan's pose from the newest estimates
                let body_pose_of = |frame: usize| -> Pose {
                    if frame >= first_window_frame {
                        window.frames[frame - first_window_frame].pose()
                    } else {
                        vio_keyframes[frame].pose
                    }
                };
                let start = placed_scans
                    .len()
                    .saturating_sub(config.params.accumulation_horizon);
                let recent: Vec<(Pose, Vec<Vec3>)> = placed_scans[start..]
                    .iter()
                    .map(|(fi, pts)| (body_pose_of(*fi), pts.clone()))
                    .collect();
                let cloud = accumulate(&recent, config.params.accumulation_horizon);
                let sphere_pose = body_pose_of(k).compose(&extrinsic);
                let map = project_to_sphere(&cloud, &sphere_pose);
                let planarity_tol = 0.02 + 4.0 * scenario.noise.lidar_range_sigma;
                let host_poses: Vec<Pose> =
                    (0..window.frames.len()).map(|i| window.frames[i].pose().compose(&window.extrinsic)).collect();
                for f in window.features.iter_mut() {
                    if f.depth_prior.is_some() || f.depth_rejected {
                        continue;
                    }
                    // associate through this frame's observation of the feature
                    let Some(&obs) = f.observations.get(&wk) else {
                        continue;
                    };
                    let dir = obs.u_s.normalize();
                    let fd = associate(&dir, &map, config.params.blur_threshold);
                    match fd.rejection_reason {
                        depth::RejectionReason::None => {
                            // re-intersect along the true camera ray for an
                            // unbiased camera-frame depth
                            let Some(plane) = fd.plane else { continue };
                            let Ok(d) = depth::intersect_ray_with_plane(
                                &obs.camera_center,
                                &obs.dir,
                                &plane,
                            ) else {
                                depth_behind += 1;
                                continue;
                            };
                            // grazing intersections amplify plane errors
                            if plane.0.dot(&obs.dir).abs() < 0.35 {
                                depth_blur += 1;
                                continue;
                            }
                            // guard against surface folds (wall corners): two
                            // extra neighbors must lie on the same plane
                            let neighbors =
                                map.nearest_k_within(&dir, 5, depth::SEARCH_RADIUS);
                            let planar = neighbors.len() >= 5
                                && neighbors.iter().skip(3).all(|&(id, _)| {
                                    let e = &map.entries()[id];
                                    let p = e.direction * e.depth;
                                    (plane.0.dot(&p) - plane.1).abs() < planarity_tol
                                });
                            let ranges: Vec<f64> = neighbors
                                .iter()
                                .take(3)
                                .map(|&(id, _)| map.entries()[id].depth)
                                .collect();
                            let rmin = ranges.iter().cloned().fold(f64::INFINITY, f64::min);
                            let rmax = ranges.iter().cloned().fold(0.0f64, f64::max);
                            let band_ok = fd.depth >= rmin - 0.3 && fd.depth <= rmax + 0.3;
                            if !(planar && band_ok) {
                                depth_blur += 1;
                                continue;
                            }
                            // convert the frame-local depth to the host frame
                            let p_world =
                                host_poses[wk].transform(&(obs.camera_center + obs.dir * d));
                            let host_obs = f.observations[&f.host];
                            let p_host = host_poses[f.host].inverse().transform(&p_world);
                            let d_host = (p_host - host_obs.camera_center).dot(&host_obs.dir);
                            if d_host <= 0.2 {
                                depth_behind += 1;
                                continue;
                            }
                            depth_valid += 1;
                            // provisional: initialization only (negligible
                            // weight) until triangulation confirms it
                            f.depth_prior = Some((d_host, 1e3));
                            f.prior_confirmed = false;
                            if !f.initialized {
                                f.log_inv_depth = -d_host.ln();
                                f.initialized = true;
                                features_initialized += 1;
                            }
                        }
                        depth::RejectionReason::Blur => depth_blur += 1,
                        depth::RejectionReason::NoNeighbors => depth_no_neighbors += 1,
                        depth::RejectionReason::Behind => depth_behind += 1,
                    }
                }
                if let Some(every) = config.params.dump_depth_map_every {
                    if every > 0 && k % every == 0 {
                        let _ = map.to_rows();
                    }
                }
            }
        }
        timings.depth_ms.push(t_depth.elapsed().as_secs_f64() * 1e3);

        // triangulate uninitialized features with enough baseline
        let t_tri = Instant::now();
        triangulate_pending(
            &mut window,
            config,
            &landmarks,
            &mut tri_errors,
            &mut comp_shifts,
            &mut features_initialized,
        );
        timings.triangulate_ms.push(t_tri.elapsed().as_secs_f64() * 1e3);

        // optimize (deferred to the last frame in batch mode)
        let t_opt = Instant::now();
        let do_optimize = !config.params.batch_mode || k == n_frames - 1;
        if do_optimize {
            let solver = if config.params.batch_mode {
                SolverConfig {
                    max_iterations: 40,
                    ..config.solver.clone()
                }
            } else {
                config.solver.clone()
            };
            let report = optimize_window(&mut window, &solver)?;
            for rec in &report.lm.iterations {
                solver_rows.push((k, rec.iteration, rec.cost, rec.accepted));
            }
            if report.diverged {
                diverged = true;
            }
            // confirm or prune depth priors against an independent multi-view
            // triangulation (wrong-wall associations near surface folds)
            let model_poses: Vec<Pose> =
                (0..window.len()).map(|i| window.model_pose(i)).collect();
            for f in window.features.iter_mut() {
                let Some((d_prior, sigma)) = f.depth_prior else {
                    continue;
                };
                if f.prior_confirmed || f.observations.len() < 4 {
                    continue;
                }
                let obs_all: Vec<SphereObservation> = f
                    .observations
                    .iter()
                    .map(|(&i, o)| SphereObservation {
                        frame_pose: model_poses[i],
                        u_s: o.u_s,
                        camera_center: o.camera_center,
                        camera_index: o.camera_index,
                    })
                    .collect();
                let span = (obs_all.first().unwrap().frame_pose.translation
                    - obs_all.last().unwrap().frame_pose.translation)
                    .norm();
                if span < 0.8 {
                    continue;
                }
                let refs: Vec<&SphereObservation> = obs_all.iter().collect();
                let Ok(tri) = triangulate_multiview(&refs) else {
                    continue;
                };
                let host_obs = f.observations[&f.host];
                let x_host = model_poses[f.host].inverse().transform(&tri.position);
                let d_tri = (x_host - host_obs.camera_center).dot(&host_obs.dir);
                let _ = sigma;
                let tri_sigma =
                    (d_tri * d_tri / span) * scenario.noise.bearing_sigma.max(3e-4) * 1.5;
                if d_tri <= 0.2 {
                    continue;
                }
                let dev = (d_tri - d_prior).abs();
                if dev <= (5.0 * tri_sigma).max(0.1) {
                    f.depth_prior = Some((d_prior, config.params.depth_prior_sigma));
                    f.prior_confirmed = true;
                } else if dev > (5.0 * tri_sigma).max(0.3) {
                    f.depth_prior = None;
                    f.depth_rejected = true;
                    depth_pruned += 1;
                }
                // otherwise stay provisional and re-check next frame
            }
        }
        timings.optimize_ms.push(t_opt.elapsed().as_secs_f64() * 1e3);

        // record the newest pose and the VIO edge between the last two frames
        let n_win = window.len();
        let newest = window.frames[n_win - 1];
        vio_keyframes.push(TrajPoint {
            t: t1,
            pose: newest.pose(),
        });
        if n_win >= 2 {
            let prev = window.frames[n_win - 2];
            vio_edges.push((k, prev.pose().between(&newest.pose())));
        } else {
            vio_edges.push((k, rel_pred));
        }

        if diverged {
            break;
        }
    }

    // in batch mode the optimized window holds every frame: export it directly
    if config.params.batch_mode && !diverged {
        vio_keyframes = window
            .frames
            .iter()
            .map(|f| TrajPoint {
                t: f.t,
                pose: f.pose(),
            })
            .collect();
        vio_edges = (1..window.len())
            .map(|i| {
                (
                    i,
                    window.frames[i - 1].pose().between(&window.frames[i].pose()),
                )
            })
            .collect();
    }

    // ------------------------------------------------------------------
    // global pose graph
    // ------------------------------------------------------------------
    let t_graph = Instant::now();
    let mut graph = PoseGraph::new();
    let mut chain_pose = init_pose;
    graph.add_keyframe(GraphNode {
        id: 0,
        pose: chain_pose,
        timestamp: frame_times[0],
    })?;
    let processed = vio_keyframes.len();
    for (k, rel) in &vio_edges {
        chain_pose = chain_pose.compose(rel);
        graph.add_keyframe(GraphNode {
            id: *k as u64,
            pose: chain_pose,
            timestamp: frame_times[*k],
        })?;
        graph.add_factor(RelativePoseFactor::from_sigmas(
            (*k - 1) as u64,
            *k as u64,
            *rel,
            config.params.vio_trans_sigma,
            config.params.vio_rot_sigma,
            FactorKind::Vio,
        )?)?;
    }
    for (dest, edge) in &odom_by_dest {
        if *dest >= processed {
            continue;
        }
        graph.add_factor(RelativePoseFactor::from_sigmas(
            (*dest - 1) as u64,
            *dest as u64,
            edge.relative,
            scenario.noise.odom_trans_sigma.max(1e-3),
            scenario.noise.odom_rot_sigma.max(2e-4),
            FactorKind::LidarOdom,
        )?)?;
    }

    let mut loops_proposed = 0;
    let mut loops_accepted = 0;
    if config.toggles.loop_closure && !diverged {
        let positions: Vec<Vec3> = graph.nodes().iter().map(|n| n.pose.translation).collect();
        let candidates = propose_loops(
            &positions,
            config.params.loop_radius,
            config.params.loop_min_gap,
        );
        loops_proposed = candidates.len();
        let mut rng = stream_rng(scenario.seed, crate::sim::SEED_LOOP);
        for (i, j) in candidates {
            let ti = graph.nodes()[i].timestamp;
            let tj = graph.nodes()[j].timestamp;
            let pi = sample_trajectory(&scenario.trajectory, ti)?.pose;
            let pj = sample_trajectory(&scenario.trajectory, tj)?.pose;
            let mut rel = pi.between(&pj);
            use rand_distr::Distribution;
            let mut n3 = || {
                Vec3::new(
                    rand_distr::StandardNormal.sample(&mut rng),
                    rand_distr::StandardNormal.sample(&mut rng),
                    rand_distr::StandardNormal.sample(&mut rng),
                )
            };
            rel.translation += n3() * scenario.noise.loop_trans_sigma;
            let rot_noise = n3() * scenario.noise.loop_rot_sigma;
            if rot_noise.norm() > 0.0 {
                rel.rotation *= crate::geometry::so3_exp(&rot_noise);
            }
            let ids = (graph.nodes()[i].id, graph.nodes()[j].id);
            graph.add_factor(RelativePoseFactor::from_sigmas(
                ids.0,
                ids.1,
                rel,
                scenario.noise.loop_trans_sigma.max(1e-3),
                scenario.noise.loop_rot_sigma.max(2e-4),
                FactorKind::Loop,
            )?)?;
        }
        let (_, rejected) = graph.optimize_with_loop_gating(
            &crate::lm::LmConfig {
                max_iterations: 30,
                ..Default::default()
            },
            CHI2_GATE_6DOF,
        )?;
        loops_accepted = loops_proposed - rejected;
    } else {
        graph.optimize(&crate::lm::LmConfig {
            max_iterations: 30,
            ..Default::default()
        })?;
    }
    timings.graph_ms = t_graph.elapsed().as_secs_f64() * 1e3;

    let final_trajectory = graph.export();

    // ------------------------------------------------------------------
    // evaluation
    // ------------------------------------------------------------------
    let max_dt = 0.5 * dt_frame;
    let ate = evaluate_ate(&final_trajectory, &streams_in.truth, max_dt).ok();
    let ate_vio = evaluate_ate(&vio_keyframes, &streams_in.truth, max_dt).ok();

    let triangulation_rmse = if tri_errors.is_empty() {
        None
    } else {
        Some((tri_errors.iter().map(|e| e * e).sum::<f64>() / tri_errors.len() as f64).sqrt())
    };
    let compensation_mean_shift = if comp_shifts.is_empty() {
        0.0
    } else {
        comp_shifts.iter().sum::<f64>() / comp_shifts.len() as f64
    };

    Ok(RunReport {
        scenario_name: scenario.name.clone(),
        seed: scenario.seed,
        config_digest: digest,
        frames: processed,
        diverged,
        ate_rmse: ate.as_ref().map(|a| a.rmse),
        ate_rmse_vio: ate_vio.as_ref().map(|a| a.rmse),
        per_pose_errors: ate.map(|a| a.per_pose).unwrap_or_default(),
        triangulation_rmse,
        triangulation_count: tri_errors.len(),
        compensation_applied: comp_shifts.len(),
        compensation_mean_shift,
        features_tracked: features_seen.len(),
        features_initialized,
        depth_valid,
        depth_pruned,
        depth_blur,
        depth_no_neighbors,
        depth_behind,
        loops_proposed,
        loops_accepted,
        vio_trajectory: vio_keyframes,
        final_trajectory,
        solver_rows,
        timings,
    })
}

/// Triangulate features that have no depth yet, once they carry enough
/// baseline, recording error statistics against the ground-truth landmark
/// field (`feature id == landmark index`).
fn triangulate_pending(
    window: &mut WindowState,
    config: &RunConfig,
    landmarks: &[Vec3],
    tri_errors: &mut Vec<f64>,
    comp_shifts: &mut Vec<f64>,
    features_initialized: &mut usize,
) {
    let model_poses: Vec<Pose> = (0..window.len()).map(|i| window.model_pose(i)).collect();
    for f in window.features.iter_mut() {
        if f.initialized || f.observations.len() < 2 {
            continue;
        }
        let frames_obs: Vec<(usize, BearingObs)> =
            f.observations.iter().map(|(&i, &o)| (i, o)).collect();
        let (first_f, first_o) = frames_obs[0];
        let (last_f, last_o) = *frames_obs.last().expect("non-empty");
        let baseline = (model_poses[first_f].translation - model_poses[last_f].translation).norm();
        if baseline < config.params.min_baseline {
            continue;
        }
        let to_sphere_obs = |fi: usize, o: &BearingObs| SphereObservation {
            frame_pose: model_poses[fi],
            u_s: o.u_s,
            camera_center: o.camera_center,
            camera_index: o.camera_index,
        };
        let obs_first = to_sphere_obs(first_f, &first_o);
        let obs_last = to_sphere_obs(last_f, &last_o);
        let Ok((naive, naive_depth)) = triangulate_naive(&obs_first, &obs_last) else {
            continue;
        };
        let point = if config.toggles.compensation {
            let all: Vec<SphereObservation> = frames_obs
                .iter()
                .map(|(fi, o)| to_sphere_obs(*fi, o))
                .collect();
            let refs: Vec<&SphereObservation> = all.iter().collect();
            match triangulate_multiview(&refs) {
                Ok(p) => p,
                Err(_) => compensate_two_view(&obs_first, &obs_last, &naive, naive_depth),
            }
        } else {
            naive
        };
        // host-frame depth along the observed camera ray
        let host_obs = f.observations[&f.host];
        let x_model = model_poses[f.host].inverse().transform(&point.position);
        let depth = (x_model - host_obs.camera_center).dot(&host_obs.dir);
        if !(0.2..=100.0).contains(&depth) {
            continue;
        }
        if point.compensated {
            // the applied-correction statistic uses only pairs where the naive
            // point is itself sane, so baseline-degenerate blowups of the
            // uncompensated route do not dominate the mean
            let naive_depth_host =
                (model_poses[f.host].inverse().transform(&naive.position) - host_obs.camera_center)
                    .dot(&host_obs.dir);
            if (0.2..=100.0).contains(&naive_depth_host) {
                comp_shifts.push((point.position - naive.position).norm());
            }
        }
        if let Some(lm) = landmarks.get(f.key.1 as usize) {
            tri_errors.push((point.position - lm).norm());
        }
        f.log_inv_depth = -depth.ln();
        f.initialized = true;
        *features_initialized += 1;
    }
}

// ---------------------------------------------------------------------------
// ablation sweep
// ---------------------------------------------------------------------------

/// Which toggles an ablation sweeps over.
#[derive(Debug, Clone, Default)]
pub struct AblationAxes {
    pub compensation: bool,
    pub cameras: bool,
    pub loop_closure: bool,
    pub depth_association: bool,
}

impl AblationAxes {
    pub fn parse(s: &str) -> Result<Self> {
        let mut axes = AblationAxes::default();
        for tok in s.split(',') {
            match tok.trim() {
                "compensation" => axes.compensation = true,
                "cameras" => axes.cameras = true,
                "loop" => axes.loop_closure = true,
                "depth" => axes.depth_association = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation axis '{other}' (expected compensation, cameras, loop, depth)"
                    )))
                }
            }
        }
        Ok(axes)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub ate_rmse: Option<f64>,
    pub triangulation_rmse: Option<f64>,
    pub visual_frontend_ms: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table_text(&self) -> String {
        let mut out =
            String::from("# configuration | ate_rmse | triangulation_rmse | visual_frontend_ms\n");
        for r in &self.rows {
            let fmt = |v: &Option<f64>| match v {
                Some(x) => format!("{x:.6}"),
                None => "fail".into(),
            };
            out.push_str(&format!(
                "{} | {} | {} | {:.4}\n",
                r.label,
                if r.diverged {
                    "fail".into()
                } else {
                    fmt(&r.ate_rmse)
                },
                fmt(&r.triangulation_rmse),
                r.visual_frontend_ms,
            ));
        }
        out
    }
}

/// Run the cross product of the requested toggle axes. A failing
/// configuration yields a "fail" row without aborting the sweep.
pub fn ablate(base: &RunConfig, streams_in: &Streams, axes: &AblationAxes) -> AblationReport {
    let n_cams = base.scenario.rig.cameras.len();
    let camera_values: Vec<CameraSelection> = if axes.cameras {
        let mut v: Vec<CameraSelection> = (0..n_cams)
            .map(|c| CameraSelection::Subset(vec![c]))
            .collect();
        v.push(CameraSelection::All);
        v
    } else {
        vec![base.toggles.cameras.clone()]
    };
    let comp_values = if axes.compensation {
        vec![false, true]
    } else {
        vec![base.toggles.compensation]
    };
    let loop_values = if axes.loop_closure {
        vec![false, true]
    } else {
        vec![base.toggles.loop_closure]
    };
    let depth_values = if axes.depth_association {
        vec![false, true]
    } else {
        vec![base.toggles.depth_association]
    };

    let mut rows = Vec::new();
    for cameras in &camera_values {
        for &compensation in &comp_values {
            for &loop_closure in &loop_values {
                for &depth_association in &depth_values {
                    let mut label = cameras.label();
                    if axes.compensation {
                        label += if compensation {
                            " | w/ compensation"
                        } else {
                            " | w/o compensation"
                        };
                    }
                    if axes.loop_closure {
                        label += if loop_closure { " | w/ loop" } else { " | w/o loop" };
                    }
                    if axes.depth_association {
                        label += if depth_association {
                            " | w/ depth"
                        } else {
                            " | w/o depth"
                        };
                    }
                    let cfg = RunConfig {
                        toggles: RunToggles {
                            cameras: cameras.clone(),
                            compensation,
                            loop_closure,
                            depth_association,
                        },
                        ..base.clone()
                    };
                    let row = match run(&cfg, streams_in) {
                        Ok(report) => AblationRow {
                            label,
                            ate_rmse: if report.diverged {
                                None
                            } else {
                                report.ate_rmse
                            },
                            triangulation_rmse: report.triangulation_rmse,
                            visual_frontend_ms: report.timings.visual_frontend_median_ms(),
                            diverged: report.diverged,
                        },
                        Err(_) => AblationRow {
                            label,
                            ate_rmse: None,
                            triangulation_rmse: None,
                            visual_frontend_ms: 0.0,
                            diverged: true,
                        },
                    };
                    rows.push(row);
                }
            }
        }
    }
    AblationReport { rows }
}

/// Simulate streams and write them under `out/streams`.
pub fn simulate_to_dir(scenario: &Scenario, out: &Path) -> Result<PathBuf> {
    let dir = out.join("streams");
    let streams = Streams::synthesize(scenario)?;
    streams.write(&dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::NoiseModel;

    fn quick_scenario() -> Scenario {
        let mut s = Scenario::builtin("figure_eight").unwrap();
        s.trajectory.duration = 5.0;
        s.feature_budget_per_camera = 12;
        s
    }

    fn quick_config(s: &Scenario) -> RunConfig {
        RunConfig {
            scenario: s.clone(),
            solver: SolverConfig::default(),
            params: PipelineParams {
                loop_min_gap: 1000, // no loops on the short arc
                ..Default::default()
            },
            toggles: RunToggles::default(),
        }
    }

    #[test]
    fn noiseless_run_tracks_ground_truth_closely() {
        let mut s = quick_scenario();
        s.noise = NoiseModel::noiseless();
        let cfg = quick_config(&s);
        let streams = Streams::synthesize(&s).unwrap();
        let report = run(&cfg, &streams).unwrap();
        assert!(!report.diverged);
        let ate = report.ate_rmse.expect("ate computed");
        assert!(ate < 1e-4, "noiseless ATE {ate}");
        assert!(report.features_initialized > 20);
    }

    #[test]
    fn noisy_run_stays_bounded() {
        let s = quick_scenario();
        let cfg = quick_config(&s);
        let streams = Streams::synthesize(&s).unwrap();
        let report = run(&cfg, &streams).unwrap();
        assert!(!report.diverged);
        let ate = report.ate_rmse.expect("ate computed");
        assert!(ate < 0.2, "noisy ATE {ate}");
        assert!(report.depth_valid > 0, "depth association inactive");
    }

    #[test]
    fn run_is_deterministic() {
        let s = quick_scenario();
        let cfg = quick_config(&s);
        let streams = Streams::synthesize(&s).unwrap();
        let a = run(&cfg, &streams).unwrap();
        let b = run(&cfg, &streams).unwrap();
        assert_eq!(a.metrics_text(), b.metrics_text());
        assert_eq!(a.final_trajectory.len(), b.final_trajectory.len());
        for (x, y) in a.final_trajectory.iter().zip(b.final_trajectory.iter()) {
            assert_eq!(x.pose.translation, y.pose.translation);
        }
    }

    #[test]
    fn stream_files_round_trip_through_disk() {
        let s = quick_scenario();
        let streams = Streams::synthesize(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        streams.write(dir.path()).unwrap();
        let loaded = Streams::load(dir.path()).unwrap();
        assert_eq!(loaded.imu.len(), streams.imu.len());
        assert_eq!(loaded.tracks.len(), streams.tracks.len());
        assert_eq!(loaded.truth.len(), streams.truth.len());
        let cfg = quick_config(&s);
        let a = run(&cfg, &streams).unwrap();
        let b = run(&cfg, &loaded).unwrap();
        assert_eq!(a.metrics_text(), b.metrics_text());
    }

    #[test]
    fn compensation_toggle_changes_triangulation() {
        let s = quick_scenario();
        let streams = Streams::synthesize(&s).unwrap();
        let mut cfg = quick_config(&s);
        cfg.toggles.depth_association = false; // force the triangulation path
        let with = run(&cfg, &streams).unwrap();
        cfg.toggles.compensation = false;
        let without = run(&cfg, &streams).unwrap();
        assert!(with.compensation_applied > 0);
        assert_eq!(without.compensation_applied, 0);
        let (a, b) = (
            with.triangulation_rmse.unwrap(),
            without.triangulation_rmse.unwrap(),
        );
        assert!(
            a < b,
            "compensated triangulation RMSE {a} should beat naive {b}"
        );
    }

    #[test]
    fn ablation_cross_product_size() {
        let mut s = quick_scenario();
        s.trajectory.duration = 3.0;
        let cfg = quick_config(&s);
        let streams = Streams::synthesize(&s).unwrap();
        let axes = AblationAxes {
            compensation: true,
            ..Default::default()
        };
        let report = ablate(&cfg, &streams, &axes);
        assert_eq!(report.rows.len(), 2);
        let axes = AblationAxes {
            compensation: true,
            cameras: true,
            ..Default::default()
        };
        let report = ablate(&cfg, &streams, &axes);
        assert_eq!(report.rows.len(), 10);
    }

    #[test]
    fn digest_changes_with_toggles() {
        let s = quick_scenario();
        let cfg = quick_config(&s);
        let d1 = config_digest(&cfg);
        let mut cfg2 = cfg.clone();
        cfg2.toggles.compensation = false;
        assert_ne!(d1, config_digest(&cfg2));
        assert_eq!(d1.len(), 64);
    }
}
