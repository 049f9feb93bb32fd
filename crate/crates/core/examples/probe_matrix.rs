// prior-weight / pruning / baseline matrix over key noise settings
use panovio::estimator::SolverConfig;
use panovio::pipeline::*;
use panovio::sim::{NoiseModel, Scenario};
use std::time::Instant;

fn main() {
    let mut noiseless = Scenario::builtin("figure_eight").unwrap();
    noiseless.noise = NoiseModel::noiseless();
    let noisy = Scenario::builtin("figure_eight").unwrap();

    for (sname, s) in [("noiseless", &noiseless), ("noisy", &noisy)] {
        let streams = Streams::synthesize(s).unwrap();
        for sigma in [0.1, 0.3] {
            for min_b in [0.3, 0.5] {
                let cfg = RunConfig {
                    scenario: s.clone(),
                    solver: SolverConfig::default(),
                    params: PipelineParams {
                        loop_min_gap: 9999,
                        depth_prior_sigma: sigma,
                        min_baseline: min_b,
                        ..Default::default()
                    },
                    toggles: RunToggles { loop_closure: false, ..Default::default() },
                };
                let t = Instant::now();
                let rep = run(&cfg, &streams).unwrap();
                let pe = &rep.per_pose_errors;
                let q = |f: f64| pe[(f * (pe.len() - 1) as f64) as usize].1;
                println!(
                    "{sname:9} sigma={sigma} min_b={min_b} ate={:.5} vio={:.5} pruned={} err[0,25,50,100]%=[{:.4},{:.4},{:.4},{:.4}] t={:.1}s",
                    rep.ate_rmse.unwrap(), rep.ate_rmse_vio.unwrap(), rep.depth_pruned,
                    q(0.0), q(0.25), q(0.5), q(1.0), t.elapsed().as_secs_f64()
                );
            }
        }
    }
}
