//! Trajectory CSV: one sample per line, `t tx ty tz qx qy qz qw`, separated
//! by commas or whitespace. `#` comments and a non-numeric header line are
//! skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::groundtruth::{RigidTransform, Trajectory};

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, path)
}

pub fn parse_trajectory(text: &str, origin: &Path) -> Result<Trajectory> {
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let values: std::result::Result<Vec<f64>, _> = fields.iter().map(|s| s.parse::<f64>()).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if samples.is_empty() && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) => continue,
            Err(_) => return Err(Error::parse(origin, idx + 1, "non-numeric trajectory field")),
        };
        if values.len() != 8 {
            return Err(Error::parse(
                origin,
                idx + 1,
                format!("expected `t tx ty tz qx qy qz qw`, found {} fields", values.len()),
            ));
        }
        let pose = RigidTransform::from_raw(
            [values[4], values[5], values[6], values[7]],
            Vector3::new(values[1], values[2], values[3]),
        )
        .map_err(|e| Error::parse(origin, idx + 1, e.to_string()))?;
        samples.push((values[0], pose));
    }
    Trajectory::new(samples)
}

pub fn encode_trajectory(traj: &Trajectory) -> String {
    let mut out = String::from("# t tx ty tz qx qy qz qw\n");
    for (t, pose) in traj.samples() {
        let q = pose.quaternion_xyzw();
        let p = pose.translation;
        let _ = writeln!(out, "{t},{},{},{},{},{},{},{}", p.x, p.y, p.z, q[0], q[1], q[2], q[3]);
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    fs::write(path, encode_trajectory(traj)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn parses_both_separators_and_header() {
        let text =
            "t,tx,ty,tz,qx,qy,qz,qw\n0.0, 1, 2, 3, 0, 0, 0, 1\n0.005 1 2 4 0 0 0.7071067811865476 0.7071067811865476\n";
        let traj = parse_trajectory(text, Path::new("t")).unwrap();
        assert_eq!(traj.samples().len(), 2);
        assert_eq!(traj.samples()[1].1.translation, Vector3::new(1.0, 2.0, 4.0));
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        assert!(traj.samples()[1].1.rotation.angle_to(&expected) < 1e-12);
    }

    #[test]
    fn round_trip() {
        let samples = (0..5)
            .map(|i| {
                let t = i as f64 * 0.005;
                let q = UnitQuaternion::from_euler_angles(0.1 * t, -0.3, 2.0 * t);
                (t, RigidTransform::new(q, Vector3::new(t, -t, 0.5)))
            })
            .collect();
        let traj = Trajectory::new(samples).unwrap();
        let again = parse_trajectory(&encode_trajectory(&traj), Path::new("t")).unwrap();
        for ((ta, a), (tb, b)) in traj.samples().iter().zip(again.samples()) {
            assert_eq!(ta, tb);
            assert_eq!(a.translation, b.translation);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_trajectory("0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 1\n", Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_trajectory("0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 x\n", Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
