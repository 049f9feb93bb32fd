//! Global pose graph over keyframes: visual-inertial odometry edges, LiDAR
//! odometry edges and loop-closure edges fused by batch re-optimization.
//!
//! The first keyframe is the gauge anchor. Relative-pose residuals use the
//! logarithm map for rotation and a plain vector difference for translation,
//! whitened by each factor's 6×6 information matrix. Loop candidates are
//! verified by a chi-square gate on their post-fit whitened residual.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::error::Error;
use crate::geometry::{
    skew, so3_exp, so3_log, so3_right_jacobian_inv, Mat3, Pose, Vec3,
};
use crate::lm::{minimize, LmConfig, LmProblem, LmReport};
use crate::sim::TrajPoint;
use crate::Result;

/// 95% chi-square quantile for six degrees of freedom.
pub const CHI2_GATE_6DOF: f64 = 12.5916;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Vio,
    LidarOdom,
    Loop,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphNode {
    pub id: u64,
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct RelativePoseFactor {
    pub from: u64,
    pub to: u64,
    pub measured: Pose,
    pub kind: FactorKind,
    /// Upper-triangular square root of the information matrix, layout
    /// [translation(3), rotation(3)].
    sqrt_info: Matrix6<f64>,
}

impl RelativePoseFactor {
    /// Build a factor from a symmetric positive-definite information matrix.
    pub fn new(
        from: u64,
        to: u64,
        measured: Pose,
        information: Matrix6<f64>,
        kind: FactorKind,
    ) -> Result<Self> {
        if (information - information.transpose()).norm() > 1e-9 * information.norm().max(1.0) {
            return Err(Error::Estimator("information matrix not symmetric".into()));
        }
        let chol = information
            .cholesky()
            .ok_or_else(|| Error::Estimator("information matrix not positive definite".into()))?;
        Ok(RelativePoseFactor {
            from,
            to,
            measured,
            kind,
            sqrt_info: chol.l().transpose(),
        })
    }

    /// Diagonal information from per-axis sigmas.
    pub fn from_sigmas(
        from: u64,
        to: u64,
        measured: Pose,
        trans_sigma: f64,
        rot_sigma: f64,
        kind: FactorKind,
    ) -> Result<Self> {
        let mut info = Matrix6::<f64>::zeros();
        for i in 0..3 {
            info[(i, i)] = 1.0 / (trans_sigma * trans_sigma);
            info[(i + 3, i + 3)] = 1.0 / (rot_sigma * rot_sigma);
        }
        Self::new(from, to, measured, info, kind)
    }

    fn residual(&self, pose_i: &Pose, pose_j: &Pose) -> Vector6<f64> {
        let ri_inv = pose_i.rotation.inverse();
        let t = ri_inv * (pose_j.translation - pose_i.translation) - self.measured.translation;
        let q_err = self.measured.rotation.inverse() * (ri_inv * pose_j.rotation);
        let r = so3_log(&q_err);
        Vector6::new(t.x, t.y, t.z, r.x, r.y, r.z)
    }

    /// Whitened squared residual at the given poses.
    fn whitened_sq(&self, pose_i: &Pose, pose_j: &Pose) -> f64 {
        (self.sqrt_info * self.residual(pose_i, pose_j)).norm_squared()
    }
}

/// The factor graph. First added keyframe becomes the gauge anchor.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    index: BTreeMap<u64, usize>,
    factors: Vec<RelativePoseFactor>,
}

/// Anchoring strength for the gauge prior.
const ANCHOR_SIGMA_T: f64 = 1e-6;
const ANCHOR_SIGMA_R: f64 = 1e-6;

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn factors(&self) -> &[RelativePoseFactor] {
        &self.factors
    }

    pub fn add_keyframe(&mut self, node: GraphNode) -> Result<()> {
        if self.index.contains_key(&node.id) {
            return Err(Error::DuplicateKeyframe(node.id));
        }
        if let Some(last) = self.nodes.last() {
            if node.timestamp < last.timestamp {
                return Err(Error::Estimator(format!(
                    "keyframe {} out of time order",
                    node.id
                )));
            }
        }
        self.index.insert(node.id, self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn add_factor(&mut self, factor: RelativePoseFactor) -> Result<()> {
        if !self.index.contains_key(&factor.from) {
            return Err(Error::DanglingFactor(factor.from));
        }
        if !self.index.contains_key(&factor.to) {
            return Err(Error::DanglingFactor(factor.to));
        }
        self.factors.push(factor);
        Ok(())
    }

    /// Remove all loop factors whose index is in `drop` (indices into the
    /// factor list).
    fn remove_factor(&mut self, idx: usize) {
        self.factors.remove(idx);
    }

    fn check_connected(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Estimator("empty graph".into()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for f in &self.factors {
            let i = self.index[&f.from];
            let j = self.index[&f.to];
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let orphans: Vec<u64> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, node)| node.id)
            .collect();
        if orphans.is_empty() {
            Ok(())
        } else {
            Err(Error::DisconnectedGraph(orphans))
        }
    }

    /// Batch optimization of all node poses. The first node is held by a
    /// strong prior at its current estimate.
    pub fn optimize(&mut self, config: &LmConfig) -> Result<LmReport> {
        self.check_connected()?;
        let problem = GraphProblem {
            graph: self,
            anchor: self.nodes[0].pose,
        };
        let initial: Vec<Pose> = self.nodes.iter().map(|n| n.pose).collect();
        let (solution, report) = minimize(&problem, initial, config);
        for (node, pose) in self.nodes.iter_mut().zip(solution) {
            node.pose = pose;
        }
        Ok(report)
    }

    /// Optimize, then iteratively drop the worst loop factor failing the
    /// chi-square gate on its post-fit whitened residual and re-optimize.
    /// Returns the final report and how many loops were rejected.
    pub fn optimize_with_loop_gating(
        &mut self,
        config: &LmConfig,
        gate: f64,
    ) -> Result<(LmReport, usize)> {
        let mut rejected = 0;
        loop {
            let report = self.optimize(config)?;
            let worst = self
                .factors
                .iter()
                .enumerate()
                .filter(|(_, f)| f.kind == FactorKind::Loop)
                .map(|(idx, f)| {
                    let pi = self.nodes[self.index[&f.from]].pose;
                    let pj = self.nodes[self.index[&f.to]].pose;
                    (idx, f.whitened_sq(&pi, &pj))
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            match worst {
                Some((idx, chi2)) if chi2 > gate => {
                    self.remove_factor(idx);
                    rejected += 1;
                }
                _ => return Ok((report, rejected)),
            }
        }
    }

    /// Total whitened squared residual restricted to one factor kind.
    pub fn cost_of_kind(&self, kind: FactorKind) -> f64 {
        self.factors
            .iter()
            .filter(|f| f.kind == kind)
            .map(|f| {
                let pi = self.nodes[self.index[&f.from]].pose;
                let pj = self.nodes[self.index[&f.to]].pose;
                f.whitened_sq(&pi, &pj)
            })
            .sum()
    }

    /// Export the node poses as a trajectory.
    pub fn export(&self) -> Vec<TrajPoint> {
        self.nodes
            .iter()
            .map(|n| TrajPoint {
                t: n.timestamp,
                pose: n.pose,
            })
            .collect()
    }
}

/// Candidate revisit pairs: node indices `(i, j)` with `j - i >= min_gap` and
/// positions within `radius`. At most one candidate per `j` (its nearest
/// qualifying `i`), and candidates are spaced at least `min_gap / 4` apart so
/// a slow pass through a revisit region does not flood the graph.
pub fn propose_loops(positions: &[Vec3], radius: f64, min_gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let spacing = (min_gap / 4).max(1);
    let mut last_emitted: Option<usize> = None;
    for j in 0..positions.len() {
        if j < min_gap {
            continue;
        }
        if let Some(last) = last_emitted {
            if j - last < spacing {
                continue;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..=j - min_gap {
            let d = (positions[j] - positions[i]).norm();
            if d <= radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            out.push((i, j));
            last_emitted = Some(j);
        }
    }
    out
}

struct GraphProblem<'g> {
    graph: &'g PoseGraph,
    anchor: Pose,
}

impl GraphProblem<'_> {
    fn cost_of(&self, poses: &[Pose]) -> f64 {
        let mut cost = 0.0;
        for f in &self.graph.factors {
            let i = self.graph.index[&f.from];
            let j = self.graph.index[&f.to];
            cost += f.whitened_sq(&poses[i], &poses[j]);
        }
        // anchor prior on node 0
        let dp = (poses[0].translation - self.anchor.translation) / ANCHOR_SIGMA_T;
        let dq = so3_log(&(self.anchor.rotation.inverse() * poses[0].rotation)) / ANCHOR_SIGMA_R;
        cost + dp.norm_squared() + dq.norm_squared()
    }
}

impl LmProblem for GraphProblem<'_> {
    type State = Vec<Pose>;

    fn dim(&self) -> usize {
        6 * self.graph.nodes.len()
    }

    fn cost(&self, poses: &Vec<Pose>) -> f64 {
        self.cost_of(poses)
    }

    fn build(&self, poses: &Vec<Pose>) -> (f64, DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        let mut cost = 0.0;

        let add_block = |h: &mut DMatrix<f64>,
                             g: &mut DVector<f64>,
                             jac: &[(usize, nalgebra::Matrix6x3<f64>)],
                             r: &Vector6<f64>| {
            for (col_a, ja) in jac {
                let gtv = ja.transpose() * r;
                for k in 0..3 {
                    g[col_a + k] += gtv[k];
                }
                for (col_b, jb) in jac {
                    let block = ja.transpose() * jb;
                    for a in 0..3 {
                        for b in 0..3 {
                            h[(col_a + a, col_b + b)] += block[(a, b)];
                        }
                    }
                }
            }
        };

        for f in &self.graph.factors {
            let i = self.graph.index[&f.from];
            let j = self.graph.index[&f.to];
            let pi = &poses[i];
            let pj = &poses[j];
            let r = f.residual(pi, pj);
            let ri_inv_m = pi.rotation.inverse().to_rotation_matrix().into_inner();
            let rj_t_ri = (pj.rotation.inverse() * pi.rotation)
                .to_rotation_matrix()
                .into_inner();
            let r_rot = Vec3::new(r[3], r[4], r[5]);
            let jr_inv = so3_right_jacobian_inv(&r_rot);

            // residual layout [t(3); rot(3)], jacobian blocks per 3-dim column group
            let mut j_pi = nalgebra::Matrix6x3::<f64>::zeros();
            j_pi.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-ri_inv_m));
            let mut j_ti = nalgebra::Matrix6x3::<f64>::zeros();
            j_ti.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&skew(&(ri_inv_m * (pj.translation - pi.translation))));
            j_ti.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(-jr_inv * rj_t_ri));
            let mut j_pj = nalgebra::Matrix6x3::<f64>::zeros();
            j_pj.fixed_view_mut::<3, 3>(0, 0).copy_from(&ri_inv_m);
            let mut j_tj = nalgebra::Matrix6x3::<f64>::zeros();
            j_tj.fixed_view_mut::<3, 3>(3, 0).copy_from(&jr_inv);

            let wr = f.sqrt_info * r;
            cost += wr.norm_squared();
            let blocks = [
                (6 * i, f.sqrt_info * j_pi),
                (6 * i + 3, f.sqrt_info * j_ti),
                (6 * j, f.sqrt_info * j_pj),
                (6 * j + 3, f.sqrt_info * j_tj),
            ];
            add_block(&mut h, &mut g, &blocks, &wr);
        }

        // anchor prior on node 0
        {
            let dp = (poses[0].translation - self.anchor.translation) / ANCHOR_SIGMA_T;
            let r_rot = so3_log(&(self.anchor.rotation.inverse() * poses[0].rotation));
            let dq = r_rot / ANCHOR_SIGMA_R;
            cost += dp.norm_squared() + dq.norm_squared();
            let jr_inv = so3_right_jacobian_inv(&r_rot) / ANCHOR_SIGMA_R;
            let ident = Mat3::identity() / ANCHOR_SIGMA_T;
            for k in 0..3 {
                g[k] += ident[(k, k)] * dp[k];
            }
            for a in 0..3 {
                for b in 0..3 {
                    h[(a, b)] += ident[(a, a)] * ident[(b, b)] * if a == b { 1.0 } else { 0.0 };
                }
            }
            let gt = jr_inv.transpose() * dq;
            let ht = jr_inv.transpose() * jr_inv;
            for a in 0..3 {
                g[3 + a] += gt[a];
                for b in 0..3 {
                    h[(3 + a, 3 + b)] += ht[(a, b)];
                }
            }
        }

        (cost, h, g)
    }

    fn retract(&self, poses: &Vec<Pose>, step: &DVector<f64>) -> Vec<Pose> {
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let dp = Vec3::new(step[6 * i], step[6 * i + 1], step[6 * i + 2]);
                let dth = Vec3::new(step[6 * i + 3], step[6 * i + 4], step[6 * i + 5]);
                let mut q = p.rotation * so3_exp(&dth);
                q.renormalize();
                Pose::new(q, p.translation + dp)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotate_axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn node(id: u64, pose: Pose) -> GraphNode {
        GraphNode {
            id,
            pose,
            timestamp: id as f64 * 0.1,
        }
    }

    fn odo_factor(from: u64, to: u64, rel: Pose) -> RelativePoseFactor {
        RelativePoseFactor::from_sigmas(from, to, rel, 0.05, 0.01, FactorKind::LidarOdom).unwrap()
    }

    #[test]
    fn bootstrap_single_node() {
        let mut g = PoseGraph::new();
        g.add_keyframe(node(0, Pose::identity())).unwrap();
        assert_eq!(g.node_count(), 1);
        let report = g.optimize(&LmConfig::default()).unwrap();
        assert!(report.final_cost < 1e-12);
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut g = PoseGraph::new();
        g.add_keyframe(node(0, Pose::identity())).unwrap();
        assert!(matches!(
            g.add_keyframe(node(0, Pose::identity())),
            Err(Error::DuplicateKeyframe(0))
        ));
    }

    #[test]
    fn dangling_factor_rejected() {
        let mut g = PoseGraph::new();
        g.add_keyframe(node(0, Pose::identity())).unwrap();
        assert!(matches!(
            g.add_factor(odo_factor(0, 5, Pose::identity())),
            Err(Error::DanglingFactor(5))
        ));
    }

    fn chain_poses(n: usize) -> Vec<Pose> {
        let mut poses = vec![Pose::identity()];
        let step = Pose::new(
            rotate_axis_angle(Vec3::z(), 0.1).unwrap(),
            Vec3::new(1.0, 0.2, 0.05),
        );
        for _ in 1..n {
            poses.push(poses.last().unwrap().compose(&step));
        }
        poses
    }

    #[test]
    fn noiseless_chain_reproduces_composed_poses() {
        let truth = chain_poses(11);
        let mut g = PoseGraph::new();
        // initialize away from the truth to force real optimization
        for (i, _) in truth.iter().enumerate() {
            let init = if i == 0 { truth[0] } else { Pose::identity() };
            g.add_keyframe(node(i as u64, init)).unwrap();
        }
        for i in 0..truth.len() - 1 {
            let rel = truth[i].between(&truth[i + 1]);
            g.add_factor(odo_factor(i as u64, i as u64 + 1, rel)).unwrap();
        }
        let report = g.optimize(&LmConfig { max_iterations: 50, ..Default::default() }).unwrap();
        assert!(report.final_cost < 1e-14, "cost {}", report.final_cost);
        for (got, want) in g.nodes().iter().zip(truth.iter()) {
            assert!((got.pose.translation - want.translation).norm() < 1e-7);
            assert!((got.pose.rotation.inverse() * want.rotation).angle() < 1e-8);
        }
    }

    #[test]
    fn disconnected_graph_reports_orphans() {
        let mut g = PoseGraph::new();
        for i in 0..4 {
            g.add_keyframe(node(i, Pose::identity())).unwrap();
        }
        g.add_factor(odo_factor(0, 1, Pose::identity())).unwrap();
        // nodes 2 and 3 are connected to each other, not to the anchor
        g.add_factor(odo_factor(2, 3, Pose::identity())).unwrap();
        match g.optimize(&LmConfig::default()) {
            Err(Error::DisconnectedGraph(ids)) => assert_eq!(ids, vec![2, 3]),
            other => panic!("expected disconnect error, got {other:?}"),
        }
    }

    #[test]
    fn anchor_shift_moves_solution_rigidly() {
        let truth = chain_poses(6);
        let build = |anchor: Pose| {
            let mut g = PoseGraph::new();
            for (i, p) in truth.iter().enumerate() {
                let init = if i == 0 {
                    anchor
                } else {
                    // propagate the anchor shift so the initialization is consistent
                    anchor.compose(&truth[0].between(p))
                };
                g.add_keyframe(node(i as u64, init)).unwrap();
            }
            for i in 0..truth.len() - 1 {
                let rel = truth[i].between(&truth[i + 1]);
                g.add_factor(odo_factor(i as u64, i as u64 + 1, rel)).unwrap();
            }
            g.optimize(&LmConfig::default()).unwrap();
            g
        };
        let shift = Pose::new(
            rotate_axis_angle(Vec3::new(0.1, 0.9, 0.2).normalize(), 0.8).unwrap(),
            Vec3::new(3.0, -1.0, 0.5),
        );
        let base = build(truth[0]);
        let moved = build(shift.compose(&truth[0]));
        for (a, b) in base.nodes().iter().zip(moved.nodes().iter()) {
            let expect = shift.compose(&a.pose);
            assert!((expect.translation - b.pose.translation).norm() < 1e-6);
            assert!((expect.rotation.inverse() * b.pose.rotation).angle() < 1e-7);
        }
    }

    #[test]
    fn factor_order_does_not_change_solution() {
        let truth = chain_poses(8);
        let rels: Vec<(u64, u64, Pose)> = (0..truth.len() - 1)
            .map(|i| (i as u64, i as u64 + 1, truth[i].between(&truth[i + 1])))
            .collect();
        let mut with_order = |order: Vec<usize>| {
            let mut g = PoseGraph::new();
            for (i, _) in truth.iter().enumerate() {
                let noisy = Pose::new(
                    truth[i].rotation,
                    truth[i].translation + Vec3::new(0.1, -0.05, 0.02) * i as f64,
                );
                g.add_keyframe(node(i as u64, if i == 0 { truth[0] } else { noisy }))
                    .unwrap();
            }
            for k in order {
                let (f, t, rel) = &rels[k];
                g.add_factor(odo_factor(*f, *t, *rel)).unwrap();
            }
            g.optimize(&LmConfig { max_iterations: 50, ..Default::default() })
                .unwrap();
            g.nodes().to_vec()
        };
        let a = with_order((0..rels.len()).collect());
        let b = with_order((0..rels.len()).rev().collect());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x.pose.translation - y.pose.translation).norm() < 1e-8);
        }
    }

    #[test]
    fn loop_factor_fixes_drifting_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // square loop: 40 steps of 1 m, turning 90° every 10 steps
        let mut truth = vec![Pose::identity()];
        for k in 0..40 {
            let turn = if (k + 1) % 10 == 0 {
                rotate_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2).unwrap()
            } else {
                crate::geometry::Rotation::identity()
            };
            let step = Pose::new(turn, Vec3::new(1.0, 0.0, 0.0));
            truth.push(truth.last().unwrap().compose(&step));
        }
        let sigma_t = 0.03;
        let mut noisy_rel = Vec::new();
        for i in 0..truth.len() - 1 {
            let mut rel = truth[i].between(&truth[i + 1]);
            let n: Vec3 = Vec3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ) * sigma_t;
            rel.translation += n;
            noisy_rel.push(rel);
        }
        let build = |with_loop: bool| {
            let mut g = PoseGraph::new();
            let mut pose = truth[0];
            g.add_keyframe(node(0, pose)).unwrap();
            for (i, rel) in noisy_rel.iter().enumerate() {
                pose = pose.compose(rel);
                g.add_keyframe(node(i as u64 + 1, pose)).unwrap();
                g.add_factor(
                    RelativePoseFactor::from_sigmas(
                        i as u64,
                        i as u64 + 1,
                        *rel,
                        sigma_t,
                        0.005,
                        FactorKind::LidarOdom,
                    )
                    .unwrap(),
                )
                .unwrap();
            }
            if with_loop {
                let rel = truth[0].between(&truth[40]);
                g.add_factor(
                    RelativePoseFactor::from_sigmas(0, 40, rel, 0.01, 0.002, FactorKind::Loop)
                        .unwrap(),
                )
                .unwrap();
            }
            g.optimize(&LmConfig { max_iterations: 60, ..Default::default() })
                .unwrap();
            g
        };
        let without = build(false);
        let with = build(true);
        let end_err = |g: &PoseGraph| {
            (g.nodes()[40].pose.translation - truth[40].translation).norm()
        };
        assert!(
            end_err(&with) * 10.0 <= end_err(&without),
            "loop closure endpoint error {} vs open-chain {}",
            end_err(&with),
            end_err(&without)
        );
    }

    #[test]
    fn loop_cost_bound_on_odometry_subproblem() {
        // adding a consistent loop cannot worsen the odometry-only cost by
        // more than the loop's own cost at the odometry-only optimum
        let truth = chain_poses(12);
        let make = |with_loop: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut g = PoseGraph::new();
            for (i, p) in truth.iter().enumerate() {
                g.add_keyframe(node(i as u64, *p)).unwrap();
            }
            for i in 0..truth.len() - 1 {
                let mut rel = truth[i].between(&truth[i + 1]);
                rel.translation += Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ) * 0.02;
                g.add_factor(
                    RelativePoseFactor::from_sigmas(
                        i as u64,
                        (i + 1) as u64,
                        rel,
                        0.02,
                        0.01,
                        FactorKind::LidarOdom,
                    )
                    .unwrap(),
                )
                .unwrap();
            }
            if with_loop {
                g.add_factor(
                    RelativePoseFactor::from_sigmas(
                        0,
                        11,
                        truth[0].between(&truth[11]),
                        0.02,
                        0.01,
                        FactorKind::Loop,
                    )
                    .unwrap(),
                )
                .unwrap();
            }
            g
        };
        let mut odo_only = make(false);
        odo_only
            .optimize(&LmConfig { max_iterations: 60, ..Default::default() })
            .unwrap();
        let c_odo_star = odo_only.cost_of_kind(FactorKind::LidarOdom);

        // the same graph (same noise draws) with the loop factor added
        let mut with_loop = make(true);
        with_loop
            .optimize(&LmConfig { max_iterations: 60, ..Default::default() })
            .unwrap();
        let c_odo_with = with_loop.cost_of_kind(FactorKind::LidarOdom);

        // evaluate the loop factor at the odometry-only optimum
        let loop_rel = truth[0].between(&truth[11]);
        let f = RelativePoseFactor::from_sigmas(0, 11, loop_rel, 0.02, 0.01, FactorKind::Loop)
            .unwrap();
        let c_loop_at_odo = f.whitened_sq(&odo_only.nodes()[0].pose, &odo_only.nodes()[11].pose);
        assert!(
            c_odo_with <= c_odo_star + c_loop_at_odo + 1e-9,
            "odom cost grew by {} > loop contribution {}",
            c_odo_with - c_odo_star,
            c_loop_at_odo
        );
    }

    #[test]
    fn gating_rejects_inconsistent_loop() {
        let truth = chain_poses(10);
        let mut g = PoseGraph::new();
        for (i, p) in truth.iter().enumerate() {
            g.add_keyframe(node(i as u64, *p)).unwrap();
        }
        for i in 0..truth.len() - 1 {
            g.add_factor(odo_factor(
                i as u64,
                i as u64 + 1,
                truth[i].between(&truth[i + 1]),
            ))
            .unwrap();
        }
        // a wildly wrong loop measurement
        let mut bogus = truth[0].between(&truth[9]);
        bogus.translation += Vec3::new(5.0, -3.0, 2.0);
        g.add_factor(
            RelativePoseFactor::from_sigmas(0, 9, bogus, 0.02, 0.01, FactorKind::Loop).unwrap(),
        )
        .unwrap();
        let before = g.factor_count();
        let (_, rejected) = g
            .optimize_with_loop_gating(
                &LmConfig { max_iterations: 50, ..Default::default() },
                CHI2_GATE_6DOF,
            )
            .unwrap();
        assert_eq!(rejected, 1);
        assert_eq!(g.factor_count(), before - 1);
        // the consistent chain survives intact
        for (got, want) in g.nodes().iter().zip(truth.iter()) {
            assert!((got.pose.translation - want.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn straight_line_proposes_no_loops() {
        let positions: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(propose_loops(&positions, 2.0, 10).is_empty());
    }

    #[test]
    fn square_revisit_is_proposed() {
        let mut positions = Vec::new();
        for k in 0..41 {
            let t = k as f64 / 40.0;
            let s = 4.0 * t;
            let p = match (s as usize).min(3) {
                0 => Vec3::new(10.0 * (s - 0.0), 0.0, 0.0),
                1 => Vec3::new(10.0, 10.0 * (s - 1.0), 0.0),
                2 => Vec3::new(10.0 - 10.0 * (s - 2.0), 10.0, 0.0),
                _ => Vec3::new(0.0, 10.0 - 10.0 * (s - 3.0), 0.0),
            };
            positions.push(p);
        }
        let proposals = propose_loops(&positions, 2.0, 10);
        assert!(
            proposals.iter().any(|&(i, j)| i <= 2 && j >= 38),
            "no start/end link in {proposals:?}"
        );
    }

    #[test]
    fn min_gap_larger_than_trajectory_gives_empty() {
        let positions: Vec<Vec3> = (0..10).map(|_| Vec3::zeros()).collect();
        assert!(propose_loops(&positions, 5.0, 100).is_empty());
    }
}
