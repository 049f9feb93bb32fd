// quick probe binary
use panovio::pipeline::*;
use panovio::estimator::SolverConfig;
use panovio::sim::{Scenario, NoiseModel};

fn main() {
    let base = Scenario::builtin("figure_eight").unwrap();
    let variants: Vec<(&str, Box<dyn Fn(&mut NoiseModel)>)> = vec![
        ("all_noise", Box::new(|_n: &mut NoiseModel| {})),
        ("noiseless", Box::new(|n: &mut NoiseModel| { *n = NoiseModel::noiseless(); })),
        ("only_bearing", Box::new(|n: &mut NoiseModel| {
            let b = n.bearing_sigma; *n = NoiseModel::noiseless(); n.bearing_sigma = b;
        })),
        ("only_imu", Box::new(|n: &mut NoiseModel| {
            let (g, a, gw, aw) = (n.gyro_noise, n.accel_noise, n.gyro_bias_walk, n.accel_bias_walk);
            *n = NoiseModel::noiseless();
            n.gyro_noise = g; n.accel_noise = a; n.gyro_bias_walk = gw; n.accel_bias_walk = aw;
        })),
        ("only_odom", Box::new(|n: &mut NoiseModel| {
            let (t, r) = (n.odom_trans_sigma, n.odom_rot_sigma);
            *n = NoiseModel::noiseless();
            n.odom_trans_sigma = t; n.odom_rot_sigma = r;
        })),
        ("only_lidar_range", Box::new(|n: &mut NoiseModel| {
            let l = n.lidar_range_sigma; *n = NoiseModel::noiseless(); n.lidar_range_sigma = l;
        })),
    ];
    for (name, f) in variants {
        let mut s = base.clone();
        f(&mut s.noise);
        let cfg = RunConfig {
            scenario: s.clone(),
            solver: SolverConfig::default(),
            params: PipelineParams { loop_min_gap: 10000, ..Default::default() },
            toggles: RunToggles::default(),
        };
        let streams = Streams::synthesize(&s).unwrap();
        let rep = run(&cfg, &streams).unwrap();
        println!("{name:18} ate={:?} vio={:?} tri_rmse={:?} depth_valid={}",
            rep.ate_rmse.map(|x| (x*1e4).round()/1e4),
            rep.ate_rmse_vio.map(|x| (x*1e4).round()/1e4),
            rep.triangulation_rmse.map(|x| (x*1e4).round()/1e4),
            rep.depth_valid);
    }
}
