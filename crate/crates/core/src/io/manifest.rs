//! JSON manifests: the scene description consumed by ground-truth
//! generation and the frame index it produces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, Pose6};
use crate::grid::Grid;
use crate::groundtruth::{GtFrame, PointCloud, RigidTransform, Scene};
use crate::io::{ply, pnm, trajectory};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    /// `(qx, qy, qz, qw)`
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl TransformJson {
    pub fn identity() -> Self {
        TransformJson {
            rotation: [0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
        }
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_raw(self.rotation, Vector3::from(self.translation))
    }
}

impl From<&RigidTransform> for TransformJson {
    fn from(t: &RigidTransform) -> Self {
        TransformJson {
            rotation: t.quaternion_xyzw(),
            translation: t.translation.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObjectJson {
    pub id: u8,
    /// ASCII PLY, relative to the manifest.
    pub cloud: PathBuf,
    /// Trajectory CSV, relative to the manifest.
    pub trajectory: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub intrinsics: PathBuf,
    pub extrinsic: TransformJson,
    pub camera_trajectory: PathBuf,
    pub objects: Vec<SceneObjectJson>,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads every referenced file, resolving paths against `base`.
    pub fn into_scene(&self, base: &Path) -> Result<Scene> {
        let k = CameraIntrinsics::load(&base.join(&self.intrinsics))?;
        let camera = trajectory::read_trajectory(&base.join(&self.camera_trajectory))?;
        let mut clouds = Vec::new();
        let mut trajs = BTreeMap::new();
        for obj in &self.objects {
            let points = ply::read_ply(&base.join(&obj.cloud))?;
            clouds.push(PointCloud::new(points, obj.id)?);
            if trajs
                .insert(obj.id, trajectory::read_trajectory(&base.join(&obj.trajectory))?)
                .is_some()
            {
                return Err(Error::InvalidArgument(format!("object id {} listed twice", obj.id)));
            }
        }
        Scene::new(clouds, trajs, camera, self.extrinsic.to_transform()?, k)
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest = SceneManifest::load(path)?;
    manifest.into_scene(path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub t: f64,
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub cam_velocity: Pose6,
    /// Keyed by decimal object id.
    pub object_velocities: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtManifest {
    pub schema: u32,
    pub fps: f64,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameEntry>,
}

impl GtManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: GtManifest = serde_json::from_str(&text)?;
        if m.schema != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported manifest schema {}",
                m.schema
            )));
        }
        Ok(m)
    }

    /// Reads the depth and mask images of one entry back into a frame.
    pub fn load_frame(&self, base: &Path, entry: &FrameEntry) -> Result<GtFrame> {
        let raw = pnm::read_pfm(&base.join(&entry.depth))?;
        let depth = DepthMap::from_raw(raw.width(), raw.height(), raw.as_slice())?;
        let mask = pnm::read_pgm(&base.join(&entry.mask))?;
        depth.grid().check_dims(&mask, "frame depth vs mask")?;
        let mut object_velocities = BTreeMap::new();
        for (k, v) in &entry.object_velocities {
            let id: u8 = k
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad object id `{k}` in manifest")))?;
            object_velocities.insert(id, Vector3::from(*v));
        }
        Ok(GtFrame {
            t: entry.t,
            depth,
            mask,
            cam_velocity: entry.cam_velocity,
            object_velocities,
        })
    }

    /// Entry closest in time to `t`.
    pub fn nearest(&self, t: f64) -> Option<&FrameEntry> {
        self.frames
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

pub fn depth_to_pfm_grid(depth: &DepthMap) -> Grid<f32> {
    Grid::from_vec(depth.width(), depth.height(), depth.to_raw()).expect("same size")
}

/// Writes `depth_NNNN.pfm`, `mask_NNNN.pgm` per frame and `manifest.json`.
pub fn write_gt_frames(dir: &Path, frames: &[GtFrame], fps: f64, k: &CameraIntrinsics) -> Result<GtManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let depth = PathBuf::from(format!("depth_{i:04}.pfm"));
        let mask = PathBuf::from(format!("mask_{i:04}.pgm"));
        pnm::write_pfm(&dir.join(&depth), &depth_to_pfm_grid(&f.depth))?;
        pnm::write_pgm(&dir.join(&mask), &f.mask)?;
        entries.push(FrameEntry {
            index: i,
            t: f.t,
            depth,
            mask,
            cam_velocity: f.cam_velocity,
            object_velocities: f
                .object_velocities
                .iter()
                .map(|(id, v)| (id.to_string(), [v.x, v.y, v.z]))
                .collect(),
        });
    }
    let manifest = GtManifest {
        schema: SCHEMA_VERSION,
        fps,
        intrinsics: *k,
        frames: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
