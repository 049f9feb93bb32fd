use panovio::estimator::SolverConfig;
use panovio::pipeline::*;
use panovio::sim::{NoiseModel, Scenario};
fn main() {
    let mut s = Scenario::builtin("figure_eight").unwrap();
    s.noise = NoiseModel::noiseless();
    s.trajectory.duration = 6.0;
    let streams = Streams::synthesize(&s).unwrap();
    let cfg = RunConfig {
        scenario: s.clone(),
        solver: SolverConfig::default(),
        params: PipelineParams { loop_min_gap: 9999, ..Default::default() },
        toggles: RunToggles { loop_closure: false, ..Default::default() },
    };
    let rep = run(&cfg, &streams).unwrap();
    println!("ate={:?} vio={:?} pruned={}", rep.ate_rmse, rep.ate_rmse_vio, rep.depth_pruned);
}
