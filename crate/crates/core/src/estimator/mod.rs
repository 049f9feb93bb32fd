//! Sliding-window visual-inertial estimator on the panoramic model.
//!
//! The window state couples per-frame IMU states, the panoramic-model-to-body
//! extrinsic and per-feature log-inverse-depths. IMU preintegration factors,
//! spherical reprojection factors and LiDAR depth priors are minimized by
//! Levenberg-Marquardt; the gauge is fixed by a prior on the oldest frame's
//! pose and velocity, which moves with the window as frames slide out.

pub mod factors;
pub mod preintegration;

pub use factors::{
    depth_prior_residual, depth_prior_residual_log, imu_jacobians, imu_residual, visual_residual,
    BearingObs, ImuFrameState, VisualFactor,
};
pub use preintegration::{preintegrate, ImuNoise, Preintegration};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{so3_exp, so3_log, so3_right_jacobian_inv, Pose, Vec3};
use crate::lm::{minimize, LmConfig, LmProblem, LmReport};
use crate::Result;

/// Feature identity: (camera index, track id). Tracks are never merged across
/// cameras.
pub type FeatureKey = (usize, u64);

/// One tracked feature inside the window.
#[derive(Debug, Clone)]
pub struct Feature {
    pub key: FeatureKey,
    /// Window index of the host (first observing) frame.
    pub host: usize,
    /// Logarithm of the inverse depth along the host camera ray.
    pub log_inv_depth: f64,
    pub initialized: bool,
    /// LiDAR depth prior `(camera-ray depth, sigma)` when associated.
    pub depth_prior: Option<(f64, f64)>,
    /// Set when a prior was pruned as inconsistent; blocks re-association.
    pub depth_rejected: bool,
    /// Provisional priors carry an inflated sigma until triangulation
    /// confirms them.
    pub prior_confirmed: bool,
    /// Observations keyed by window frame index.
    pub observations: BTreeMap<usize, BearingObs>,
}

impl Feature {
    pub fn depth(&self) -> f64 {
        (-self.log_inv_depth).exp()
    }
}

/// Gauge prior values for the oldest frame.
#[derive(Debug, Clone, Copy)]
pub struct AnchorPrior {
    pub p: Vec3,
    pub q: crate::geometry::Rotation,
    pub v: Vec3,
    pub ba: Vec3,
    pub bg: Vec3,
}

impl AnchorPrior {
    pub fn from_state(s: &ImuFrameState) -> Self {
        AnchorPrior {
            p: s.p,
            q: s.q,
            v: s.v,
            ba: s.ba,
            bg: s.bg,
        }
    }
}

/// The sliding-window optimization state.
#[derive(Debug, Clone)]
pub struct WindowState {
    pub frames: Vec<ImuFrameState>,
    /// Panoramic-model-to-body extrinsic.
    pub extrinsic: Pose,
    pub features: Vec<Feature>,
    /// Preintegrated IMU between consecutive frames (`frames.len() - 1`).
    pub preints: Vec<Preintegration>,
    pub anchor: AnchorPrior,
}

/// Solver configuration (TOML-loadable).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub window_size: usize,
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_increase: f64,
    pub lambda_decrease: f64,
    /// Huber threshold on whitened visual residuals.
    pub huber_threshold: f64,
    /// Bearing noise used to whiten visual residuals, radians.
    pub bearing_sigma: f64,
    pub anchor_pos_sigma: f64,
    pub anchor_rot_sigma: f64,
    pub anchor_vel_sigma: f64,
    /// Weak priors keeping the bias block well-conditioned.
    pub bias_accel_prior_sigma: f64,
    pub bias_gyro_prior_sigma: f64,
    /// Optimize the panoramic-model-to-body extrinsic (off by default).
    pub optimize_extrinsic: bool,
    pub cost_tolerance: f64,
    pub relative_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            window_size: 10,
            max_iterations: 25,
            initial_lambda: 1e-6,
            lambda_increase: 8.0,
            lambda_decrease: 0.35,
            huber_threshold: 1.0,
            bearing_sigma: 1e-3,
            anchor_pos_sigma: 1e-6,
            anchor_rot_sigma: 1e-6,
            anchor_vel_sigma: 1.0,
            bias_accel_prior_sigma: 0.5,
            bias_gyro_prior_sigma: 0.05,
            optimize_extrinsic: false,
            cost_tolerance: 1e-12,
            relative_tolerance: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("solver config: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("solver config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    fn lm_config(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.max_iterations,
            initial_lambda: self.initial_lambda,
            lambda_decrease: self.lambda_decrease,
            lambda_increase: self.lambda_increase,
            max_lambda: 1e12,
            cost_tolerance: self.cost_tolerance,
            relative_tolerance: self.relative_tolerance,
        }
    }
}

impl WindowState {
    pub fn new(first_frame: ImuFrameState, extrinsic: Pose) -> Self {
        WindowState {
            anchor: AnchorPrior::from_state(&first_frame),
            frames: vec![first_frame],
            extrinsic,
            features: Vec::new(),
            preints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// World-from-panoramic-model pose of a window frame.
    pub fn model_pose(&self, frame: usize) -> Pose {
        self.frames[frame].pose().compose(&self.extrinsic)
    }

    /// Record an observation; creates the feature (uninitialized) on first
    /// sight.
    pub fn add_observation(&mut self, frame: usize, key: FeatureKey, obs: BearingObs) {
        if let Some(f) = self.features.iter_mut().find(|f| f.key == key) {
            f.observations.insert(frame, obs);
        } else {
            let mut observations = BTreeMap::new();
            observations.insert(frame, obs);
            self.features.push(Feature {
                key,
                host: frame,
                log_inv_depth: 0.0,
                initialized: false,
                depth_prior: None,
                depth_rejected: false,
                prior_confirmed: false,
                observations,
            });
        }
    }

    /// Reconstruct a feature's world point at the current estimate.
    pub fn feature_world_point(&self, feature: &Feature) -> Option<Vec3> {
        if !feature.initialized {
            return None;
        }
        let obs = feature.observations.get(&feature.host)?;
        let x_model = obs.camera_center + obs.dir * feature.depth();
        Some(self.model_pose(feature.host).transform(&x_model))
    }

    /// Append a frame (with the preintegration that links it to the previous
    /// frame) and slide the window if it exceeds `capacity`: the oldest frame
    /// is dropped, features hosted there are re-anchored to their next-oldest
    /// observation (preserving the world point at the current estimate), and
    /// the gauge prior moves to the new oldest frame.
    pub fn push_frame(
        &mut self,
        frame: ImuFrameState,
        preint: Preintegration,
        capacity: usize,
    ) -> Result<()> {
        self.frames.push(frame);
        self.preints.push(preint);
        if self.frames.len() > capacity {
            self.drop_oldest()?;
        }
        Ok(())
    }

    fn drop_oldest(&mut self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Estimator("cannot drop the only frame".into()));
        }
        let mut kept = Vec::with_capacity(self.features.len());
        for mut f in std::mem::take(&mut self.features) {
            if f.host == 0 {
                let world = self.feature_world_point(&f);
                // the prior depth lives on the old host ray: carry its implied
                // 3-D point into the new host frame
                let prior_world = f.depth_prior.and_then(|(d, _)| {
                    f.observations.get(&0).map(|obs| {
                        self.model_pose(0)
                            .transform(&(obs.camera_center + obs.dir * d))
                    })
                });
                f.observations.remove(&0);
                match f.observations.keys().next().copied() {
                    None => continue, // observed only in the dropped frame
                    Some(new_host) => {
                        f.host = new_host;
                        let new_host_inv = self.model_pose(new_host).inverse();
                        let obs = f.observations[&new_host];
                        if let Some((_, sigma)) = f.depth_prior {
                            f.depth_prior = prior_world.and_then(|p_w| {
                                let x_model = new_host_inv.transform(&p_w);
                                let d = (x_model - obs.camera_center).dot(&obs.dir);
                                (d > 1e-3).then_some((d, sigma))
                            });
                        }
                        if let (Some(x_w), true) = (world, f.initialized) {
                            let x_model = new_host_inv.transform(&x_w);
                            let depth = (x_model - obs.camera_center).dot(&obs.dir);
                            if depth <= 1e-3 {
                                continue; // re-anchored point behind the camera
                            }
                            f.log_inv_depth = -depth.ln();
                        } else {
                            f.initialized = false;
                        }
                    }
                }
            } else {
                f.observations.remove(&0);
            }
            // shift window indices down by one
            f.host -= 1;
            f.observations = f
                .observations
                .iter()
                .map(|(&k, &v)| (k - 1, v))
                .collect();
            if f.observations.is_empty() {
                continue;
            }
            kept.push(f);
        }
        self.features = kept;
        self.frames.remove(0);
        self.preints.remove(0);
        self.anchor = AnchorPrior::from_state(&self.frames[0]);
        Ok(())
    }
}

/// Outcome of one window optimization.
#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub lm: LmReport,
    /// Visual factors deactivated (behind-camera) at the final iterate.
    pub deactivated: usize,
    /// Set when the solve produced non-finite states.
    pub diverged: bool,
}

/// Optimize the window in place.
pub fn optimize_window(window: &mut WindowState, config: &SolverConfig) -> Result<OptimizeReport> {
    if window.frames.len() < 2 {
        return Err(Error::Estimator("window needs at least two frames".into()));
    }
    if window.preints.len() != window.frames.len() - 1 {
        return Err(Error::Estimator(format!(
            "{} preintegrations for {} frames",
            window.preints.len(),
            window.frames.len()
        )));
    }
    let snapshot = window.clone();
    let problem = WindowProblem::new(&snapshot, config);
    let initial = problem.state_of(&snapshot);
    let (solution, lm) = minimize(&problem, initial, &config.lm_config());
    problem.write_back(window, &solution);

    let diverged = window
        .frames
        .iter()
        .any(|f| !(f.p.norm().is_finite() && f.v.norm().is_finite()))
        || !lm.final_cost.is_finite();
    let deactivated = problem.count_deactivated(&solution);
    Ok(OptimizeReport {
        lm,
        deactivated,
        diverged,
    })
}

/// Flat optimization state: frames, active feature depths, optional extrinsic.
#[derive(Clone)]
struct FlatState {
    frames: Vec<ImuFrameState>,
    depths: Vec<f64>,
    extrinsic: Pose,
}

struct WindowProblem<'w> {
    window: &'w WindowState,
    config: &'w SolverConfig,
    /// Indices into `window.features` that carry optimizable columns.
    active: Vec<usize>,
    sqrt_infos: Vec<factors::Mat15>,
}

impl<'w> WindowProblem<'w> {
    fn new(window: &'w WindowState, config: &'w SolverConfig) -> Self {
        let active = window
            .features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.initialized && (f.observations.len() >= 2 || f.depth_prior.is_some()))
            .map(|(i, _)| i)
            .collect();
        let sqrt_infos = window.preints.iter().map(|p| p.sqrt_information()).collect();
        WindowProblem {
            window,
            config,
            active,
            sqrt_infos,
        }
    }

    fn state_of(&self, window: &WindowState) -> FlatState {
        FlatState {
            frames: window.frames.clone(),
            depths: self
                .active
                .iter()
                .map(|&i| window.features[i].log_inv_depth)
                .collect(),
            extrinsic: window.extrinsic,
        }
    }

    fn write_back(&self, window: &mut WindowState, state: &FlatState) {
        window.frames = state.frames.clone();
        for (slot, &i) in self.active.iter().enumerate() {
            window.features[i].log_inv_depth = state.depths[slot];
        }
        window.extrinsic = state.extrinsic;
    }

    fn n_frames(&self) -> usize {
        self.window.frames.len()
    }

    fn extrinsic_col(&self) -> usize {
        15 * self.n_frames() + self.active.len()
    }

    fn count_deactivated(&self, state: &FlatState) -> usize {
        let mut n = 0;
        self.for_each_visual(state, |_, _, eval| {
            if !eval.active {
                n += 1;
            }
        });
        n
    }

    fn for_each_visual<F>(&self, state: &FlatState, mut f: F)
    where
        F: FnMut(usize, &VisualFactor, &factors::VisualEval),
    {
        for (slot, &fi) in self.active.iter().enumerate() {
            let feat = &self.window.features[fi];
            let host_obs = feat.observations[&feat.host];
            for (&target, obs) in &feat.observations {
                if target == feat.host {
                    continue;
                }
                let factor = VisualFactor {
                    feature: slot,
                    host: feat.host,
                    target,
                    obs_host: host_obs,
                    obs_target: *obs,
                };
                let eval = visual_residual(
                    &state.frames[feat.host],
                    &state.frames[target],
                    &state.extrinsic,
                    &factor,
                    state.depths[slot],
                );
                f(slot, &factor, &eval);
            }
        }
    }

    fn robust_cost(&self, whitened_norm_sq: f64) -> f64 {
        let delta = self.config.huber_threshold;
        let s = whitened_norm_sq.sqrt();
        if s <= delta {
            whitened_norm_sq
        } else {
            2.0 * delta * s - delta * delta
        }
    }
}

const G: Vec3 = crate::sim::GRAVITY;

impl LmProblem for WindowProblem<'_> {
    type State = FlatState;

    fn dim(&self) -> usize {
        self.extrinsic_col() + if self.config.optimize_extrinsic { 6 } else { 0 }
    }

    fn cost(&self, state: &FlatState) -> f64 {
        let mut cost = 0.0;
        // IMU factors
        for (i, preint) in self.window.preints.iter().enumerate() {
            let r = imu_residual(&state.frames[i], &state.frames[i + 1], preint, &G);
            cost += (self.sqrt_infos[i] * r).norm_squared();
        }
        // visual factors (robust)
        let sigma = self.config.bearing_sigma.max(1e-9);
        self.for_each_visual(state, |_, _, eval| {
            if eval.active {
                cost += self.robust_cost(eval.residual.norm_squared() / (sigma * sigma));
            }
        });
        // depth priors (robustified like the visual terms)
        for (slot, &fi) in self.active.iter().enumerate() {
            if let Some((depth, dsigma)) = self.window.features[fi].depth_prior {
                let (r, _) = depth_prior_residual_log(state.depths[slot], depth, dsigma);
                cost += self.robust_cost(r * r);
            }
        }
        // anchor prior
        cost += self.anchor_cost(state);
        cost
    }

    fn build(&self, state: &FlatState) -> (f64, DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        let mut cost = 0.0;

        // dense block accumulation helper
        fn add<const R: usize>(
            h: &mut DMatrix<f64>,
            g: &mut DVector<f64>,
            cols: &[(usize, usize)], // (column offset, width)
            jacs: &[DMatrix<f64>],
            r: &nalgebra::SVector<f64, R>,
        ) {
            for ((ca, wa), ja) in cols.iter().zip(jacs.iter()) {
                let gv = ja.transpose() * r;
                for a in 0..*wa {
                    g[ca + a] += gv[a];
                }
                for ((cb, wb), jb) in cols.iter().zip(jacs.iter()) {
                    let block = ja.transpose() * jb;
                    for a in 0..*wa {
                        for b in 0..*wb {
                            h[(ca + a, cb + b)] += block[(a, b)];
                        }
                    }
                }
            }
        }

        // IMU factors
        for (i, preint) in self.window.preints.iter().enumerate() {
            let si = &state.frames[i];
            let sj = &state.frames[i + 1];
            let r = imu_residual(si, sj, preint, &G);
            let (ji, jj) = imu_jacobians(si, sj, preint, &G);
            let w = &self.sqrt_infos[i];
            let wr = w * r;
            cost += wr.norm_squared();
            let wji = DMatrix::from_iterator(15, 15, (w * ji).iter().cloned());
            let wjj = DMatrix::from_iterator(15, 15, (w * jj).iter().cloned());
            add(
                &mut h,
                &mut g,
                &[(15 * i, 15), (15 * (i + 1), 15)],
                &[wji, wjj],
                &wr,
            );
        }

        // visual factors with Huber weights
        let sigma = self.config.bearing_sigma.max(1e-9);
        let inv_sigma = 1.0 / sigma;
        let delta = self.config.huber_threshold;
        let n_frames = self.n_frames();
        let feat_col0 = 15 * n_frames;
        let mut vis_terms: Vec<(usize, VisualFactor, factors::VisualEval)> = Vec::new();
        self.for_each_visual(state, |slot, factor, eval| {
            if eval.active {
                vis_terms.push((slot, *factor, factors::VisualEval { ..*eval }));
            }
        });
        for (slot, factor, eval) in vis_terms {
            let wr2 = eval.residual.norm_squared() * inv_sigma * inv_sigma;
            cost += self.robust_cost(wr2);
            let s = wr2.sqrt();
            let huber_w = if s <= delta { 1.0 } else { delta / s };
            let scale = inv_sigma * huber_w.sqrt();
            let r = eval.residual * scale;
            let jh = DMatrix::from_iterator(2, 15, (eval.j_host * scale).iter().cloned());
            let jt = DMatrix::from_iterator(2, 15, (eval.j_target * scale).iter().cloned());
            let jd = DMatrix::from_iterator(2, 1, (eval.j_depth * scale).iter().cloned());
            let mut cols = vec![
                (15 * factor.host, 15usize),
                (15 * factor.target, 15usize),
                (feat_col0 + slot, 1usize),
            ];
            let mut jacs = vec![jh, jt, jd];
            if self.config.optimize_extrinsic {
                cols.push((self.extrinsic_col(), 6));
                jacs.push(DMatrix::from_iterator(
                    2,
                    6,
                    (eval.j_extrinsic * scale).iter().cloned(),
                ));
            }
            add(&mut h, &mut g, &cols, &jacs, &r);
        }

        // depth priors (robustified like the visual terms)
        for (slot, &fi) in self.active.iter().enumerate() {
            if let Some((depth, dsigma)) = self.window.features[fi].depth_prior {
                let (r, dr) = depth_prior_residual_log(state.depths[slot], depth, dsigma);
                cost += self.robust_cost(r * r);
                let s_abs = r.abs();
                let w = if s_abs <= delta { 1.0 } else { delta / s_abs };
                let (rw, drw) = (r * w.sqrt(), dr * w.sqrt());
                let col = feat_col0 + slot;
                g[col] += drw * rw;
                h[(col, col)] += drw * drw;
            }
        }

        // anchor prior on frame 0
        cost += self.anchor_build(state, &mut h, &mut g);

        (cost, h, g)
    }

    fn retract(&self, state: &FlatState, step: &DVector<f64>) -> FlatState {
        let mut out = state.clone();
        for (i, f) in out.frames.iter_mut().enumerate() {
            let d = nalgebra::SVector::<f64, 15>::from_iterator(
                (0..15).map(|k| step[15 * i + k]),
            );
            *f = f.retract(&d);
        }
        let base = 15 * out.frames.len();
        for (k, d) in out.depths.iter_mut().enumerate() {
            *d += step[base + k];
        }
        if self.config.optimize_extrinsic {
            let c = self.extrinsic_col();
            let dt = Vec3::new(step[c], step[c + 1], step[c + 2]);
            let dth = Vec3::new(step[c + 3], step[c + 4], step[c + 5]);
            let mut q = out.extrinsic.rotation * so3_exp(&dth);
            q.renormalize();
            out.extrinsic = Pose::new(q, out.extrinsic.translation + dt);
        }
        out
    }
}

impl WindowProblem<'_> {
    fn anchor_residuals(&self, state: &FlatState) -> [(Vec3, f64); 5] {
        let a = &self.window.anchor;
        let f0 = &state.frames[0];
        [
            (f0.p - a.p, self.config.anchor_pos_sigma),
            (so3_log(&(a.q.inverse() * f0.q)), self.config.anchor_rot_sigma),
            (f0.v - a.v, self.config.anchor_vel_sigma),
            (f0.ba - a.ba, self.config.bias_accel_prior_sigma),
            (f0.bg - a.bg, self.config.bias_gyro_prior_sigma),
        ]
    }

    fn anchor_cost(&self, state: &FlatState) -> f64 {
        self.anchor_residuals(state)
            .iter()
            .map(|(r, s)| (r / *s).norm_squared())
            .sum()
    }

    fn anchor_build(&self, state: &FlatState, h: &mut DMatrix<f64>, g: &mut DVector<f64>) -> f64 {
        let mut cost = 0.0;
        let blocks = self.anchor_residuals(state);
        // column offsets per block within frame 0: p, θ, v, ba, bg
        let offsets = [0usize, 3, 6, 9, 12];
        for ((r, sigma), off) in blocks.iter().zip(offsets.iter()) {
            let w = 1.0 / sigma;
            let rw = r * w;
            cost += rw.norm_squared();
            let j = if *off == 3 {
                so3_right_jacobian_inv(r) * w
            } else {
                crate::geometry::Mat3::identity() * w
            };
            let gv = j.transpose() * rw;
            let hb = j.transpose() * j;
            for a in 0..3 {
                g[off + a] += gv[a];
                for b in 0..3 {
                    h[(off + a, off + b)] += hb[(a, b)];
                }
            }
        }
        cost
    }
}
