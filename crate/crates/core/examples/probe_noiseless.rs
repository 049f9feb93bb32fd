// isolate the source of noiseless drift
use panovio::estimator::SolverConfig;
use panovio::pipeline::*;
use panovio::sim::{NoiseModel, Scenario};

fn main() {
    let mut base = Scenario::builtin("figure_eight").unwrap();
    base.noise = NoiseModel::noiseless();
    let streams = Streams::synthesize(&base).unwrap();

    let run_with = |label: &str, solver: SolverConfig, params: PipelineParams, depth: bool| {
        let cfg = RunConfig {
            scenario: base.clone(),
            solver,
            params,
            toggles: RunToggles {
                depth_association: depth,
                loop_closure: false,
                ..Default::default()
            },
        };
        let rep = run(&cfg, &streams).unwrap();
        println!(
            "{label:32} ate={:.5?} vio={:.5?} tri_n={} init={}",
            rep.ate_rmse.unwrap(),
            rep.ate_rmse_vio.unwrap(),
            rep.triangulation_count,
            rep.features_initialized
        );
        // error growth over time
        let pe = &rep.per_pose_errors;
        if !pe.is_empty() {
            let q = |f: f64| pe[(f * (pe.len() - 1) as f64) as usize].1;
            println!("    err@0%={:.5} 25%={:.5} 50%={:.5} 75%={:.5} 100%={:.5}", q(0.0), q(0.25), q(0.5), q(0.75), q(1.0));
        }
    };

    run_with("default", SolverConfig::default(), PipelineParams { loop_min_gap: 9999, ..Default::default() }, true);
    run_with("no_depth", SolverConfig::default(), PipelineParams { loop_min_gap: 9999, ..Default::default() }, false);
    run_with("tight_vel_anchor", SolverConfig { anchor_vel_sigma: 1e-4, ..Default::default() }, PipelineParams { loop_min_gap: 9999, ..Default::default() }, true);
    run_with("window20", SolverConfig { window_size: 20, ..Default::default() }, PipelineParams { loop_min_gap: 9999, ..Default::default() }, true);
    run_with("more_iters", SolverConfig { max_iterations: 25, ..Default::default() }, PipelineParams { loop_min_gap: 9999, ..Default::default() }, true);
}
