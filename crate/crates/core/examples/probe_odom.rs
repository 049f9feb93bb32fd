// dissect the only-odometry-noise failure
use panovio::estimator::SolverConfig;
use panovio::pipeline::*;
use panovio::sim::{NoiseModel, Scenario};

fn main() {
    let mut s = Scenario::builtin("figure_eight").unwrap();
    let (t, r) = (s.noise.odom_trans_sigma, s.noise.odom_rot_sigma);
    s.noise = NoiseModel::noiseless();
    s.noise.odom_trans_sigma = t;
    s.noise.odom_rot_sigma = r;
    let streams = Streams::synthesize(&s).unwrap();

    let mut go = |label: &str, solver: SolverConfig, params: PipelineParams| {
        let cfg = RunConfig {
            scenario: s.clone(),
            solver,
            params,
            toggles: RunToggles { loop_closure: false, ..Default::default() },
        };
        let rep = run(&cfg, &streams).unwrap();
        let pe = &rep.per_pose_errors;
        let q = |f: f64| pe[(f * (pe.len() - 1) as f64) as usize].1;
        println!(
            "{label:24} ate={:.4} vio={:.4} | err 0%={:.4} 10%={:.4} 25%={:.4} 50%={:.4} 100%={:.4}",
            rep.ate_rmse.unwrap(),
            rep.ate_rmse_vio.unwrap(),
            q(0.0), q(0.10), q(0.25), q(0.5), q(1.0)
        );
    };
    let base_params = PipelineParams { loop_min_gap: 9999, ..Default::default() };
    go("default", SolverConfig::default(), base_params.clone());
    go("iters25", SolverConfig { max_iterations: 25, ..Default::default() }, base_params.clone());
    go("window20", SolverConfig { window_size: 20, ..Default::default() }, base_params.clone());
    go("no_depth_assoc", SolverConfig::default(), base_params.clone());
    // no depth toggle via toggles:
    let cfg = RunConfig {
        scenario: s.clone(),
        solver: SolverConfig::default(),
        params: base_params.clone(),
        toggles: RunToggles { loop_closure: false, depth_association: false, ..Default::default() },
    };
    let rep = run(&cfg, &streams).unwrap();
    println!("depth_off               ate={:.4} vio={:.4}", rep.ate_rmse.unwrap(), rep.ate_rmse_vio.unwrap());
}
