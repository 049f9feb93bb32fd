use panovio::estimator::SolverConfig;
use panovio::pipeline::*;
use panovio::sim::{NoiseModel, Scenario};

fn main() {
    let mut s = Scenario::builtin("square_loop").unwrap();
    s.noise = NoiseModel::noiseless();
    let streams = Streams::synthesize(&s).unwrap();
    for (label, depth, loops, comp) in [
        ("all_on", true, true, true),
        ("depth_off", false, true, true),
        ("depth_off_loop_off", false, false, true),
        ("all_on_loop_off", true, false, true),
    ] {
        let cfg = RunConfig {
            scenario: s.clone(),
            solver: SolverConfig::default(),
            params: PipelineParams::default(),
            toggles: RunToggles {
                depth_association: depth,
                loop_closure: loops,
                compensation: comp,
                ..Default::default()
            },
        };
        let rep = run(&cfg, &streams).unwrap();
        let pe = &rep.per_pose_errors;
        let q = |f: f64| pe[(f * (pe.len() - 1) as f64) as usize].1;
        println!(
            "{label:20} ate={:.6} vio={:.6} pruned={} err[0,25,50,75,100]=[{:.4},{:.4},{:.4},{:.4},{:.4}]",
            rep.ate_rmse.unwrap(), rep.ate_rmse_vio.unwrap(), rep.depth_pruned,
            q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)
        );
    }
}
