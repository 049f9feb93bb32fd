//! Row-based sensor stream files.
//!
//! All streams are plain text, whitespace-separated, one record per line,
//! with `#`-prefixed comment lines. Floats are written in Rust's shortest
//! round-trip form, so a file re-read yields bit-identical values.
//!
//! - `imu.txt`:        `t gx gy gz ax ay az`
//! - `tracks.txt`:     `t cam feat_id u v`
//! - `scans.txt`:      `scan t n` header followed by `n` lines of `x y z`
//! - `lidar_odom.txt`: `t_from t_to tx ty tz qw qx qy qz`
//! - trajectories:     `t px py pz qw qx qy qz`

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::Error;
use crate::geometry::{Pose, Vec3};
use crate::sim::{ImuSample, LidarScan, OdomEdge, TrackObs, TrajPoint};
use crate::Result;

fn open_reader(path: &Path) -> Result<BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(f))
}

fn open_writer(path: &Path) -> Result<BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufWriter::new(f))
}

fn parse_fields(path: &Path, line_no: usize, line: &str, want: usize) -> Result<Vec<f64>> {
    let fields: std::result::Result<Vec<f64>, _> = line
        .split_whitespace()
        .map(|tok| tok.parse::<f64>())
        .collect();
    let fields = fields.map_err(|e| {
        Error::parse(path.display().to_string(), line_no, format!("bad number: {e}"))
    })?;
    if fields.len() != want {
        return Err(Error::parse(
            path.display().to_string(),
            line_no,
            format!("expected {want} fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "# t gx gy gz ax ay az").map_err(io_err)?;
    for s in samples {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let mut out = Vec::new();
    for (idx, line) in open_reader(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, idx + 1, trimmed, 7)?;
        out.push(ImuSample {
            t: f[0],
            gyro: Vec3::new(f[1], f[2], f[3]),
            accel: Vec3::new(f[4], f[5], f[6]),
        });
    }
    Ok(out)
}

pub fn write_tracks(path: &Path, tracks: &[TrackObs]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "# t cam feat_id u v").map_err(io_err)?;
    for o in tracks {
        writeln!(
            w,
            "{} {} {} {} {}",
            o.t, o.camera, o.feature_id, o.pixel[0], o.pixel[1]
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackObs>> {
    let mut out: Vec<TrackObs> = Vec::new();
    let mut frame_of_t: Vec<f64> = Vec::new();
    for (idx, line) in open_reader(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, idx + 1, trimmed, 5)?;
        let t = f[0];
        // frame index recovered from the ordered set of distinct timestamps
        let frame = match frame_of_t.last() {
            Some(&last) if (last - t).abs() < 1e-12 => frame_of_t.len() - 1,
            Some(&last) if t > last => {
                frame_of_t.push(t);
                frame_of_t.len() - 1
            }
            None => {
                frame_of_t.push(t);
                0
            }
            _ => {
                return Err(Error::parse(
                    path.display().to_string(),
                    idx + 1,
                    "track timestamps must be non-decreasing",
                ))
            }
        };
        out.push(TrackObs {
            t,
            frame,
            camera: f[1] as usize,
            feature_id: f[2] as u64,
            pixel: [f[3], f[4]],
        });
    }
    Ok(out)
}

pub fn write_scans(path: &Path, scans: &[LidarScan]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "# scan t n / followed by n rows: x y z").map_err(io_err)?;
    for s in scans {
        writeln!(w, "scan {} {}", s.t, s.points.len()).map_err(io_err)?;
        for p in &s.points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn read_scans(path: &Path) -> Result<Vec<LidarScan>> {
    let mut out: Vec<LidarScan> = Vec::new();
    let mut pending = 0usize;
    for (idx, line) in open_reader(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("scan ") {
            if pending != 0 {
                return Err(Error::parse(
                    path.display().to_string(),
                    idx + 1,
                    "scan header before previous scan completed",
                ));
            }
            let f = parse_fields(path, idx + 1, rest, 2)?;
            pending = f[1] as usize;
            out.push(LidarScan {
                t: f[0],
                points: Vec::with_capacity(pending),
            });
        } else {
            if pending == 0 {
                return Err(Error::parse(
                    path.display().to_string(),
                    idx + 1,
                    "point row outside a scan block",
                ));
            }
            let f = parse_fields(path, idx + 1, trimmed, 3)?;
            out.last_mut()
                .expect("scan block open")
                .points
                .push(Vec3::new(f[0], f[1], f[2]));
            pending -= 1;
        }
    }
    if pending != 0 {
        return Err(Error::parse(
            path.display().to_string(),
            0,
            "file truncated inside a scan block",
        ));
    }
    Ok(out)
}

pub fn write_odometry(path: &Path, edges: &[OdomEdge]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "# t_from t_to tx ty tz qw qx qy qz").map_err(io_err)?;
    for e in edges {
        let p = &e.relative;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {}",
            e.t_from,
            e.t_to,
            p.translation.x,
            p.translation.y,
            p.translation.z,
            p.rotation.w,
            p.rotation.i,
            p.rotation.j,
            p.rotation.k
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_odometry(path: &Path) -> Result<Vec<OdomEdge>> {
    let mut out = Vec::new();
    for (idx, line) in open_reader(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, idx + 1, trimmed, 9)?;
        out.push(OdomEdge {
            t_from: f[0],
            t_to: f[1],
            relative: Pose::from_parts(f[5], f[6], f[7], f[8], Vec3::new(f[2], f[3], f[4])),
        });
    }
    Ok(out)
}

/// Write a trajectory: `t px py pz qw qx qy qz`, one pose per line.
pub fn write_trajectory(path: &Path, traj: &[TrajPoint]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "# t px py pz qw qx qy qz").map_err(io_err)?;
    for p in traj {
        let q = &p.pose.rotation;
        let t = &p.pose.translation;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            p.t, t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajPoint>> {
    let mut out = Vec::new();
    for (idx, line) in open_reader(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, idx + 1, trimmed, 8)?;
        out.push(TrajPoint {
            t: f[0],
            pose: Pose::from_parts(f[4], f[5], f[6], f[7], Vec3::new(f[1], f[2], f[3])),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotate_axis_angle;

    #[test]
    fn imu_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.txt");
        let samples = vec![
            ImuSample {
                t: 0.1,
                gyro: Vec3::new(0.1234567890123, -2.5e-7, 3.0),
                accel: Vec3::new(9.81, 1e-300, -0.5),
            },
            ImuSample {
                t: 0.2,
                gyro: Vec3::zeros(),
                accel: Vec3::new(f64::MIN_POSITIVE, 1.0, 2.0),
            },
        ];
        write_imu(&path, &samples).unwrap();
        let back = read_imu(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn tracks_round_trip_reconstructs_frames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        let tracks = vec![
            TrackObs { t: 0.0, frame: 0, camera: 0, feature_id: 7, pixel: [100.25, 200.5] },
            TrackObs { t: 0.0, frame: 0, camera: 2, feature_id: 9, pixel: [1.5, 2.5] },
            TrackObs { t: 0.1, frame: 1, camera: 0, feature_id: 7, pixel: [101.0, 201.0] },
        ];
        write_tracks(&path, &tracks).unwrap();
        let back = read_tracks(&path).unwrap();
        assert_eq!(tracks, back);
    }

    #[test]
    fn scans_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scans.txt");
        let scans = vec![
            LidarScan { t: 0.0, points: vec![Vec3::new(1.0, 2.0, 3.0)] },
            LidarScan { t: 0.1, points: vec![Vec3::zeros(), Vec3::new(-1.0, 0.5, 2.25)] },
        ];
        write_scans(&path, &scans).unwrap();
        let back = read_scans(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].points, scans[1].points);
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let traj = vec![TrajPoint {
            t: 1.5,
            pose: Pose::new(
                rotate_axis_angle(Vec3::new(1.0, 1.0, 0.0).normalize(), 0.7).unwrap(),
                Vec3::new(0.1, 0.2, 0.3),
            ),
        }];
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].pose.translation - traj[0].pose.translation).norm() == 0.0);
        assert_eq!(back[0].pose.rotation, traj[0].pose.rotation);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "# header\n0.0 0 0 0 0 0 0\nnot a number row\n").unwrap();
        match read_imu(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_imu(Path::new("/nonexistent/imu.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/imu.txt"));
    }
}
