//! Pinhole camera, rigid-motion flow and per-pixel pose mixtures.
//!
//! Image velocity is evaluated in normalized (calibrated) coordinates:
//!
//! ```text
//! u = (-vx + x*vz) / Z + x*y*wx - (1 + x^2)*wy + y*wz
//! v = (-vy + y*vz) / Z + (1 + y^2)*wx - x*y*wy - x*wz
//! ```
//!
//! and converted to pixels per second by scaling with `(fx, fy)`. A pose
//! `(v, w)` is the camera's velocity in its own frame, so a static point
//! moves as `dX/dt = -v - w x X` in camera coordinates.

use std::fs;
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite: fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Reads `fx fy cx cy width height` from the first non-comment line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::parse(origin, idx + 1, "expected `fx fy cx cy width height`"));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::parse(origin, idx + 1, format!("bad number `{s}`")))
            };
            let int = |s: &str| -> Result<u32> {
                s.parse()
                    .map_err(|_| Error::parse(origin, idx + 1, format!("bad size `{s}`")))
            };
            return CameraIntrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, int(f[4])?, int(f[5])?);
        }
        Err(Error::parse(origin, 0, "no intrinsics line found"))
    }

    pub fn to_text(&self) -> String {
        format!(
            "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }

    /// Projects a camera-frame point to pixel coordinates. `None` when `Z <= 0`.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some(denormalize_coords(p.x / p.z, p.y / p.z, self))
    }

    /// Camera-frame point at depth `z` seen through pixel `(px, py)`.
    pub fn back_project(&self, px: f64, py: f64, z: f64) -> Vector3<f64> {
        let (x, y) = normalize_coords(px, py, self);
        Vector3::new(x * z, y * z, z)
    }
}

pub fn normalize_coords(px: f64, py: f64, k: &CameraIntrinsics) -> (f64, f64) {
    ((px - k.cx) / k.fx, (py - k.cy) / k.fy)
}

pub fn denormalize_coords(x: f64, y: f64, k: &CameraIntrinsics) -> (f64, f64) {
    (x * k.fx + k.cx, y * k.fy + k.cy)
}

/// Translational velocity (m/s) and angular velocity (rad/s) of the camera.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6 {
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Pose6 {
    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Pose6 { v, omega }
    }

    pub fn zero() -> Self {
        Pose6::default()
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        Pose6 {
            v: Vector3::new(p[0], p[1], p[2]),
            omega: Vector3::new(p[3], p[4], p[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.omega.x, self.omega.y, self.omega.z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

impl Add for Pose6 {
    type Output = Pose6;
    fn add(self, o: Pose6) -> Pose6 {
        Pose6::new(self.v + o.v, self.omega + o.omega)
    }
}

impl Sub for Pose6 {
    type Output = Pose6;
    fn sub(self, o: Pose6) -> Pose6 {
        Pose6::new(self.v - o.v, self.omega - o.omega)
    }
}

impl Neg for Pose6 {
    type Output = Pose6;
    fn neg(self) -> Pose6 {
        Pose6::new(-self.v, -self.omega)
    }
}

impl Mul<f64> for Pose6 {
    type Output = Pose6;
    fn mul(self, s: f64) -> Pose6 {
        Pose6::new(self.v * s, self.omega * s)
    }
}

/// Metric depth per pixel; `None` marks pixels without a measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    depth: Grid<Option<f64>>,
}

impl DepthMap {
    pub fn new(depth: Grid<Option<f64>>) -> Result<Self> {
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                if let Some(z) = *depth.get(x, y) {
                    if !(z > 0.0) || !z.is_finite() {
                        return Err(Error::NonPositiveDepth { x, y, depth: z });
                    }
                }
            }
        }
        Ok(DepthMap { depth })
    }

    pub fn constant(width: usize, height: usize, z: f64) -> Result<Self> {
        DepthMap::new(Grid::filled(width, height, Some(z)))
    }

    /// Treats non-positive or non-finite entries as invalid (PFM convention: 0 = invalid).
    pub fn from_raw(width: usize, height: usize, raw: &[f32]) -> Result<Self> {
        let values = raw
            .iter()
            .map(|&z| (z.is_finite() && z > 0.0).then_some(z as f64))
            .collect();
        Ok(DepthMap {
            depth: Grid::from_vec(width, height, values)?,
        })
    }

    pub fn to_raw(&self) -> Vec<f32> {
        self.depth
            .as_slice()
            .iter()
            .map(|z| z.map_or(0.0, |z| z as f32))
            .collect()
    }

    pub fn grid(&self) -> &Grid<Option<f64>> {
        &self.depth
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        *self.depth.get(x, y)
    }

    pub fn valid_count(&self) -> usize {
        self.depth.as_slice().iter().filter(|z| z.is_some()).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.depth.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.depth.len() as f64
        }
    }

    pub fn mean_valid(&self) -> Option<f64> {
        let (sum, n) = self
            .depth
            .as_slice()
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), z| (s + z, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        DepthMap::new(self.depth.map(|z| z.map(|z| z * s)))
    }

    /// Divides by the mean of valid depths. Returns the map and the mean used.
    pub fn normalized_by_mean(&self) -> Result<(Self, f64)> {
        let mean = self
            .mean_valid()
            .ok_or_else(|| Error::NoValidDepth("cannot normalize a map without valid pixels".into()))?;
        Ok((self.scaled(1.0 / mean)?, mean))
    }
}

/// Per-pixel pose as ego-motion plus mask-weighted object translations.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePoseField {
    ego: Pose6,
    object_translations: Vec<Vector3<f64>>,
    width: usize,
    height: usize,
    /// `(C + 1)` weights per pixel, pixel-major.
    weights: Vec<f64>,
}

impl MixturePoseField {
    /// Single rigid motion everywhere (`C = 0`).
    pub fn rigid(ego: Pose6, width: usize, height: usize) -> Self {
        MixturePoseField {
            ego,
            object_translations: Vec::new(),
            width,
            height,
            weights: vec![1.0; width * height],
        }
    }

    pub fn new(
        ego: Pose6,
        object_translations: Vec<Vector3<f64>>,
        width: usize,
        height: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let comps = object_translations.len() + 1;
        if weights.len() != comps * width * height {
            return Err(Error::Geometry(format!(
                "{} weights for {comps} components on {width}x{height}",
                weights.len()
            )));
        }
        for (i, w) in weights.chunks_exact(comps).enumerate() {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|&m| !(m >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "weights at pixel {i} must be non-negative and sum to 1, got {w:?}"
                )));
            }
        }
        Ok(MixturePoseField {
            ego,
            object_translations,
            width,
            height,
            weights,
        })
    }

    /// Hard assignment from per-pixel labels: `Some(j)` selects object `j`
    /// (0-based into `object_translations`), `None` the background.
    pub fn from_labels(
        ego: Pose6,
        object_translations: Vec<Vector3<f64>>,
        labels: &Grid<Option<usize>>,
    ) -> Result<Self> {
        let comps = object_translations.len() + 1;
        let mut weights = vec![0.0; comps * labels.len()];
        for (i, label) in labels.as_slice().iter().enumerate() {
            let c = match label {
                None => 0,
                Some(j) if *j < comps - 1 => j + 1,
                Some(j) => return Err(Error::InvalidArgument(format!("label {j} has no translation"))),
            };
            weights[i * comps + c] = 1.0;
        }
        MixturePoseField::new(ego, object_translations, labels.width(), labels.height(), weights)
    }

    pub fn ego(&self) -> Pose6 {
        self.ego
    }

    pub fn object_translations(&self) -> &[Vector3<f64>] {
        &self.object_translations
    }

    pub fn components(&self) -> usize {
        self.object_translations.len() + 1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn weights_at(&self, i: usize) -> &[f64] {
        let c = self.components();
        &self.weights[i * c..(i + 1) * c]
    }

    /// Weight image of component `j` (0 = ego).
    pub fn component_weights(&self, j: usize) -> Grid<f64> {
        let c = self.components();
        Grid::from_fn(self.width, self.height, |x, y| {
            self.weights[(y * self.width + x) * c + j]
        })
    }
}

/// Pose at pixel `i`: the ego pose with mask-weighted object translations added.
pub fn pixel_pose(field: &MixturePoseField, i: usize) -> Pose6 {
    let weights = field.weights_at(i);
    let mut v = field.ego.v;
    for (m, t) in weights[1..].iter().zip(&field.object_translations) {
        if *m != 0.0 {
            v += t * *m;
        }
    }
    Pose6::new(v, field.ego.omega)
}

/// The 2x6 matrix mapping `(v, w)` to normalized image velocity at `(x, y)`.
#[inline]
pub fn flow_matrix(x: f64, y: f64, inv_z: f64) -> [[f64; 6]; 2] {
    [
        [-inv_z, 0.0, x * inv_z, x * y, -(1.0 + x * x), y],
        [0.0, -inv_z, y * inv_z, 1.0 + y * y, -x * y, -x],
    ]
}

/// Normalized image velocity of a pixel at depth `z` under `pose`.
pub fn flow_at(x: f64, y: f64, z: f64, pose: &Pose6) -> Result<(f64, f64)> {
    if !(z > 0.0) {
        return Err(Error::InvalidArgument(format!("depth must be positive, got {z}")));
    }
    let a = flow_matrix(x, y, 1.0 / z);
    let p = pose.to_array();
    let dot = |row: &[f64; 6]| row.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    Ok((dot(&a[0]), dot(&a[1])))
}

/// Per-pixel image velocity in pixels per second.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    flow: Grid<Option<[f64; 2]>>,
}

impl FlowField {
    pub fn new(flow: Grid<Option<[f64; 2]>>) -> Self {
        FlowField { flow }
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField::new(Grid::filled(width, height, Some([u, v])))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        *self.flow.get(x, y)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.flow.dims()
    }

    pub fn grid(&self) -> &Grid<Option<[f64; 2]>> {
        &self.flow
    }
}

pub fn flow_field(depth: &DepthMap, field: &MixturePoseField, k: &CameraIntrinsics) -> Result<FlowField> {
    if depth.dims() != field.dims() || depth.dims() != k.dims() {
        return Err(Error::Geometry(format!(
            "depth {:?}, weights {:?}, intrinsics {:?}",
            depth.dims(),
            field.dims(),
            k.dims()
        )));
    }
    let (w, h) = depth.dims();
    let flow = Grid::from_fn(w, h, |px, py| {
        let z = depth.get(px, py)?;
        let (x, y) = normalize_coords(px as f64, py as f64, k);
        let pose = pixel_pose(field, py * w + px);
        let (u, v) = flow_at(x, y, z, &pose).ok()?;
        Some([u * k.fx, v * k.fy])
    });
    Ok(FlowField::new(flow))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 210.0, 173.0, 130.0, 346, 260).unwrap()
    }

    #[test]
    fn normalization() {
        let k = k();
        assert_eq!(normalize_coords(k.cx, k.cy, &k), (0.0, 0.0));
        assert_eq!(normalize_coords(k.cx + k.fx, k.cy, &k).0, 1.0);
        let (x, y) = normalize_coords(17.25, 99.5, &k);
        let (px, py) = denormalize_coords(x, y, &k);
        assert!((px - 17.25).abs() < 1e-12 && (py - 99.5).abs() < 1e-12);
    }

    #[test]
    fn intrinsics_validation_and_parse() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
        let text = "# calib\n200 210 173 130 346 260 # trailing\n";
        assert_eq!(CameraIntrinsics::parse(text, Path::new("k")).unwrap(), k());
        assert!(CameraIntrinsics::parse("1 2 3\n", Path::new("k")).is_err());
        let again = CameraIntrinsics::parse(&k().to_text(), Path::new("k")).unwrap();
        assert_eq!(again, k());
    }

    #[test]
    fn flow_examples() {
        let p = Pose6::new(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros());
        assert_eq!(flow_at(0.0, 0.0, 1.0, &p).unwrap(), (0.0, 0.0));

        let p = Pose6::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        assert_eq!(flow_at(0.0, 0.0, 2.0, &p).unwrap(), (-0.5, 0.0));

        let p = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        for z in [0.3, 1.0, 7.0] {
            assert_eq!(flow_at(1.0, 0.0, z, &p).unwrap(), (0.0, -1.0));
        }

        assert!(flow_at(0.0, 0.0, 0.0, &p).is_err());
        assert!(flow_at(0.0, 0.0, -1.0, &p).is_err());
    }

    #[test]
    fn pixel_pose_examples() {
        let ego = Pose6::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.4, 0.5, -0.6));
        let t1 = Vector3::new(2.0, 0.0, 0.0);
        let field = MixturePoseField::new(ego, vec![t1], 1, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(pixel_pose(&field, 0), ego);

        let still = Pose6::new(Vector3::zeros(), ego.omega);
        let field = MixturePoseField::new(still, vec![t1], 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(pixel_pose(&field, 0), Pose6::new(t1, ego.omega));

        let field = MixturePoseField::new(still, vec![t1], 1, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(pixel_pose(&field, 0).v, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn background_weights_keep_ego_bits() {
        let ego = Pose6::new(Vector3::new(-0.0, 1e-300, 3.5), Vector3::new(-0.0, 2.0, 1.0));
        let field = MixturePoseField::new(ego, vec![Vector3::new(1.0, 1.0, 1.0)], 1, 1, vec![1.0, 0.0]).unwrap();
        let got = pixel_pose(&field, 0);
        assert_eq!(got.to_array().map(f64::to_bits), ego.to_array().map(f64::to_bits));
    }

    #[test]
    fn weights_must_be_a_partition() {
        let z = Pose6::zero();
        assert!(MixturePoseField::new(z, vec![Vector3::zeros()], 1, 1, vec![0.7, 0.7]).is_err());
        assert!(MixturePoseField::new(z, vec![Vector3::zeros()], 1, 1, vec![1.5, -0.5]).is_err());
        assert!(MixturePoseField::new(z, vec![], 2, 1, vec![1.0]).is_err());
    }

    #[test]
    fn zero_pose_gives_zero_flow() {
        let k = k();
        let depth = DepthMap::constant(346, 260, 2.0).unwrap();
        let flow = flow_field(&depth, &MixturePoseField::rigid(Pose6::zero(), 346, 260), &k).unwrap();
        assert!(flow.grid().as_slice().iter().all(|f| *f == Some([0.0, 0.0])));
    }

    #[test]
    fn roll_produces_rotation_pattern() {
        // Pure wz: flow is wz * (y, -x), tangential with curl -2 wz.
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        let depth = DepthMap::constant(101, 101, 3.0).unwrap();
        let pose = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.5));
        let flow = flow_field(&depth, &MixturePoseField::rigid(pose, 101, 101), &k).unwrap();
        for (px, py) in [(80usize, 50usize), (20, 50), (50, 80), (50, 20), (70, 30)] {
            let [u, v] = flow.get(px, py).unwrap();
            let (x, y) = normalize_coords(px as f64, py as f64, &k);
            assert!((u - 1.5 * y * 100.0).abs() < 1e-9);
            assert!((v + 1.5 * x * 100.0).abs() < 1e-9);
            // Tangential: orthogonal to the radius.
            assert!((u * x + v * y).abs() < 1e-9);
        }
        let [_, v_r] = flow.get(51, 50).unwrap();
        let [_, v_l] = flow.get(49, 50).unwrap();
        let [u_d, _] = flow.get(50, 51).unwrap();
        let [u_u, _] = flow.get(50, 49).unwrap();
        let curl = (v_r - v_l) / 2.0 - (u_d - u_u) / 2.0;
        assert!((curl + 2.0 * 1.5).abs() < 1e-9, "curl {curl}");
    }

    #[test]
    fn invalid_depth_invalidates_flow() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
        let mut g = Grid::filled(3, 3, Some(1.0));
        *g.get_mut(2, 1) = None;
        let depth = DepthMap::new(g).unwrap();
        let field = MixturePoseField::rigid(Pose6::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 3, 3);
        let flow = flow_field(&depth, &field, &k).unwrap();
        assert!(flow.get(2, 1).is_none());
        assert!(flow.get(1, 1).is_some());

        let wrong = MixturePoseField::rigid(Pose6::zero(), 4, 3);
        assert!(matches!(flow_field(&depth, &wrong, &k), Err(Error::Geometry(_))));
    }

    #[test]
    fn depth_map_rules() {
        assert!(DepthMap::constant(2, 2, 0.0).is_err());
        let d = DepthMap::from_raw(2, 1, &[0.0, 4.0]).unwrap();
        assert_eq!(d.get(0, 0), None);
        assert_eq!(d.valid_count(), 1);
        let (n, mean) = d.normalized_by_mean().unwrap();
        assert_eq!(mean, 4.0);
        assert_eq!(n.get(1, 0), Some(1.0));
        assert_eq!(d.to_raw(), vec![0.0, 4.0]);
        let none = DepthMap::from_raw(1, 1, &[f32::NAN]).unwrap();
        assert!(none.normalized_by_mean().is_err());
    }
}
