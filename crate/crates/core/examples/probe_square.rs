use panovio::estimator::SolverConfig;
use panovio::pipeline::*;
use panovio::sim::{NoiseModel, Scenario};

fn main() {
    for planar_tight in [false, true] {
        let mut s = Scenario::builtin("square_loop").unwrap();
        s.noise = NoiseModel::noiseless();
        if planar_tight {
            // denser rings tighten neighbor triples near wall corners
            s.noise.lidar_rings = 32;
            s.noise.lidar_points_per_ring = 360;
        }
        let streams = Streams::synthesize(&s).unwrap();
        let cfg = RunConfig {
            scenario: s.clone(),
            solver: SolverConfig::default(),
            params: PipelineParams::default(),
            toggles: RunToggles::default(),
        };
        let rep = run(&cfg, &streams).unwrap();
        println!(
            "square_loop noiseless dense={planar_tight}: ate={:.6} vio={:.6} pruned={} loops={} depth_valid={}",
            rep.ate_rmse.unwrap(),
            rep.ate_rmse_vio.unwrap(),
            rep.depth_pruned,
            rep.loops_accepted,
            rep.depth_valid,
        );
    }
}
