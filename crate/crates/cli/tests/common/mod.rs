//! Fixtures shared by the CLI test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};

use evmotion::groundtruth::{PointCloud, RigidTransform, Scene, Trajectory};
use evmotion::io::manifest::{SceneManifest, SceneObjectJson, TransformJson};
use evmotion::io::ply::write_ply;
use evmotion::io::trajectory::write_trajectory;
use evmotion::synth::default_intrinsics;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_evmotion"))
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// A wall 2.5 m away overfilling the view with a poster 1 mm in front of it,
/// seen by a camera moving with a constant body twist over one second.
pub fn poster_scene(spacing: f64) -> Scene {
    let k = default_intrinsics();
    let mut wall = Vec::new();
    let mut poster = Vec::new();
    let (nx, ny) = ((6.0 / spacing).round() as i64, (4.6 / spacing).round() as i64);
    for i in 0..=nx {
        for j in 0..=ny {
            let (x, y) = (-3.0 + i as f64 * spacing, -2.3 + j as f64 * spacing);
            if x.abs() < 0.5 && y.abs() < 0.4 {
                poster.push(Vector3::new(x, y, 2.499));
            } else {
                wall.push(Vector3::new(x, y, 2.5));
            }
        }
    }
    let (v, w) = (Vector3::new(0.25, -0.1, 0.15), Vector3::new(0.1, 0.15, -0.2));
    let samples = (0..=200)
        .map(|i| {
            let t = i as f64 * 0.005;
            let tau = t - 0.5;
            let rot = Rotation3::from_scaled_axis(w * tau);
            // Midpoint-rule integral of R(s) v.
            let steps = 200;
            let mut pos = Vector3::zeros();
            for s in 0..steps {
                let si = tau * (s as f64 + 0.5) / steps as f64;
                pos += Rotation3::from_scaled_axis(w * si) * v * (tau / steps as f64);
            }
            (t, RigidTransform::new(UnitQuaternion::from_rotation_matrix(&rot), pos))
        })
        .collect();
    let camera = Trajectory::new(samples).expect("increasing times");
    let still = Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).expect("valid span");
    let mut trajs = BTreeMap::new();
    trajs.insert(0, still.clone());
    trajs.insert(1, still);
    Scene::new(
        vec![
            PointCloud::new(wall, 0).expect("valid cloud"),
            PointCloud::new(poster, 1).expect("valid cloud"),
        ],
        trajs,
        camera,
        RigidTransform::identity(),
        k,
    )
    .expect("valid scene")
}

/// Writes the scene as intrinsics, PLY clouds, trajectory CSVs and a manifest;
/// returns the manifest path.
pub fn write_scene(dir: &Path, scene: &Scene) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("intrinsics.txt"), scene.intrinsics().to_text()).unwrap();
    write_trajectory(&dir.join("camera.csv"), scene.camera()).unwrap();
    let mut objects = Vec::new();
    for cloud in scene.clouds() {
        let id = cloud.object_id();
        let (ply, csv) = (format!("object_{id}.ply"), format!("object_{id}.csv"));
        write_ply(&dir.join(&ply), cloud.points()).unwrap();
        write_trajectory(&dir.join(&csv), scene.object_trajectory(id).unwrap()).unwrap();
        objects.push(SceneObjectJson {
            id,
            cloud: ply.into(),
            trajectory: csv.into(),
        });
    }
    let manifest = SceneManifest {
        intrinsics: "intrinsics.txt".into(),
        extrinsic: TransformJson::from(&scene.extrinsic()),
        camera_trajectory: "camera.csv".into(),
        objects,
    };
    let path = dir.join("scene.json");
    manifest.save(&path).unwrap();
    path
}
