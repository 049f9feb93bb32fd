// check accepted depth priors against ground truth in the noiseless case
use panovio::depth::{accumulate, associate, intersect_ray_with_plane, project_to_sphere};
use panovio::geometry::Vec3;
use panovio::sim::{frame_times, render_lidar, sample_trajectory, NoiseModel, Scenario};

fn main() {
    let mut s = Scenario::builtin("figure_eight").unwrap();
    s.noise = NoiseModel::noiseless();
    let rig = s.rig.build().unwrap();
    let extrinsic = s.rig.body_from_model_pose();
    let landmarks = s.landmarks.sample(s.seed);
    let scans = render_lidar(&s).unwrap();
    let times = frame_times(&s);

    let mut errs: Vec<f64> = Vec::new();
    let mut devs: Vec<f64> = Vec::new();
    for k in (10..times.len()).step_by(10) {
        let pose_k = sample_trajectory(&s.trajectory, times[k]).unwrap().pose;
        let placed: Vec<(panovio::geometry::Pose, Vec<Vec3>)> = scans
            .iter()
            .filter(|sc| sc.t <= times[k] + 1e-9)
            .map(|sc| {
                let p = sample_trajectory(&s.trajectory, sc.t).unwrap().pose;
                (p, sc.points.clone())
            })
            .collect();
        let cloud = accumulate(&placed, 5);
        let model_pose = pose_k.compose(&extrinsic);
        let map = project_to_sphere(&cloud, &model_pose);
        let inv = model_pose.inverse();
        for lm in landmarks.iter().step_by(7) {
            let p_model = inv.transform(lm);
            // pick the observing camera like the tracker would
            let Ok(cam) = rig.assign_direction_to_camera(&p_model.normalize()) else { continue };
            let c = rig.camera_center(cam).unwrap();
            let dir_cam = (p_model - c).normalize();
            // sphere point on the camera ray
            let w = c;
            let b = dir_cam.dot(&w);
            let t = -b + (b * b - (w.norm_squared() - 1.0)).sqrt();
            let u_s = c + dir_cam * t;
            let fd = associate(&u_s.normalize(), &map, 0.5);
            if !fd.valid {
                continue;
            }
            let plane = fd.plane.unwrap();
            let neighbors = map.nearest_k_within(&u_s.normalize(), 5, panovio::depth::SEARCH_RADIUS);
            let planar = neighbors.len() >= 5 && neighbors.iter().skip(3).all(|&(id, _)| {
                let e = &map.entries()[id];
                let q = e.direction * e.depth;
                (plane.0.dot(&q) - plane.1).abs() < 0.05
            });
            if !planar { continue; }
            let Ok(d) = intersect_ray_with_plane(&c, &dir_cam, &plane) else { continue };
            let true_d = (p_model - c).norm();
            // deviation of the sphere-ray depth from the neighbor range band
            let ranges: Vec<f64> = neighbors.iter().take(3).map(|&(id, _)| map.entries()[id].depth).collect();
            let rmin = ranges.iter().cloned().fold(f64::INFINITY, f64::min);
            let rmax = ranges.iter().cloned().fold(0.0f64, f64::max);
            let dev = if fd.depth < rmin { rmin - fd.depth } else if fd.depth > rmax { fd.depth - rmax } else { 0.0 };
            errs.push((d - true_d).abs());
            devs.push(dev);
        }
    }
    let errs_raw = errs.clone();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |f: f64| errs[((errs.len() - 1) as f64 * f) as usize];
    println!("n={} p50={:.6} p90={:.6} p99={:.6} max={:.6}", errs.len(), q(0.5), q(0.9), q(0.99), q(1.0));
    let bad: Vec<f64> = errs.iter().cloned().filter(|e| *e > 0.01).collect();
    println!("priors with error > 1 cm: {} of {}", bad.len(), errs.len());
    // does the range-band deviation separate good from bad?
    let mut both: Vec<(f64, f64)> = devs.iter().cloned().zip(errs_raw.iter().cloned()).collect();
    both.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("worst 10 (err, band_dev): {:?}", &both.iter().map(|(d, e)| ((e*1e3).round()/1e3, (d*1e3).round()/1e3)).take(10).collect::<Vec<_>>());
    let good_max_dev = both.iter().filter(|(_, e)| *e < 0.01).map(|(d, _)| *d).fold(0.0f64, f64::max);
    println!("max band_dev among good priors: {good_max_dev:.4}");
}
