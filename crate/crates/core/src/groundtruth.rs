//! Ground truth from tracked scans: point clouds are carried through
//! interpolated tracker poses into the camera, z-buffered into depth and
//! object-id masks, and differentiated for instantaneous velocities.
//!
//! A point `X` of a cloud lands in the camera frame as
//! `extrinsic * camera_pose(t)^-1 * object_pose(t) * X`, where the tracked
//! poses map marker frames to the world and the extrinsic maps the camera's
//! marker frame to the optical center.

use std::collections::BTreeMap;
use std::ops::Mul;

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, Pose6};
use crate::grid::Grid;

/// Mask value for pixels no point projected to.
pub const EMPTY_ID: u8 = 255;
/// Object id of the static room scan.
pub const BACKGROUND_ID: u8 = 0;
/// Half of a 200 Hz tracker interval.
pub const DEFAULT_VELOCITY_DT: f64 = 0.0025;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform::new(UnitQuaternion::identity(), translation)
    }

    /// From raw `(qx, qy, qz, qw)`; the quaternion is renormalized when its
    /// norm is within 1e-3 of one and rejected otherwise.
    pub fn from_raw(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 || !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidRotation(format!(
                "quaternion {q:?} (norm {norm}) or translation is not valid"
            )));
        }
        Ok(RigidTransform::new(UnitQuaternion::from_quaternion(quat), translation))
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = self.rotation.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

/// Spherical interpolation along the shorter arc.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion();
    let mut qb = *b.quaternion();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        return UnitQuaternion::from_quaternion(qa.lerp(&qb, s));
    }
    let theta = dot.min(1.0).acos();
    let sin = theta.sin();
    let wa = ((1.0 - s) * theta).sin() / sin;
    let wb = (s * theta).sin() / sin;
    UnitQuaternion::from_quaternion(qa * wa + qb * wb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, RigidTransform)>,
}

impl Trajectory {
    /// Requires strictly increasing timestamps and at least two samples.
    /// Consecutive quaternions are flipped onto the same hemisphere.
    pub fn new(mut samples: Vec<(f64, RigidTransform)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a trajectory needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if let Some(w) = samples.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument(format!(
                "trajectory timestamps must increase strictly ({} then {})",
                w[0].0, w[1].0
            )));
        }
        for i in 1..samples.len() {
            let prev = *samples[i - 1].1.rotation.quaternion();
            let cur = *samples[i].1.rotation.quaternion();
            if prev.dot(&cur) < 0.0 {
                samples[i].1.rotation = UnitQuaternion::new_unchecked(-cur);
            }
        }
        Ok(Trajectory { samples })
    }

    /// A pose held constant over `[t0, t1]`.
    pub fn stationary(pose: RigidTransform, t0: f64, t1: f64) -> Result<Self> {
        Trajectory::new(vec![(t0, pose), (t1, pose)])
    }

    pub fn samples(&self) -> &[(f64, RigidTransform)] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].0
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    pub fn covers(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }
}

/// Pose at time `t`: linear in translation, shortest-arc spherical in
/// rotation between the bracketing samples, and exact at sample times.
pub fn interpolate_pose(traj: &Trajectory, t: f64) -> Result<RigidTransform> {
    if !traj.covers(t) {
        return Err(Error::OutsideSpan {
            t,
            start: traj.start(),
            end: traj.end(),
        });
    }
    let s = traj.samples();
    let hi = s.partition_point(|(ts, _)| *ts <= t);
    if hi > 0 && s[hi - 1].0 == t {
        return Ok(s[hi - 1].1);
    }
    let (t0, a) = s[hi - 1];
    let (t1, b) = s[hi];
    let w = (t - t0) / (t1 - t0);
    Ok(RigidTransform::new(
        slerp(&a.rotation, &b.rotation, w),
        a.translation.lerp(&b.translation, w),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    object_id: u8,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, object_id: u8) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty(format!("point cloud of object {object_id}")));
        }
        if object_id == EMPTY_ID {
            return Err(Error::InvalidArgument(format!(
                "object id {EMPTY_ID} is reserved for empty pixels"
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-finite point in cloud {object_id}")));
        }
        Ok(PointCloud { points, object_id })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn object_id(&self) -> u8 {
        self.object_id
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    clouds: Vec<PointCloud>,
    object_trajectories: BTreeMap<u8, Trajectory>,
    camera: Trajectory,
    extrinsic: RigidTransform,
    intrinsics: CameraIntrinsics,
}

impl Scene {
    pub fn new(
        clouds: Vec<PointCloud>,
        object_trajectories: BTreeMap<u8, Trajectory>,
        camera: Trajectory,
        extrinsic: RigidTransform,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        for c in &clouds {
            if !object_trajectories.contains_key(&c.object_id) {
                return Err(Error::InvalidArgument(format!(
                    "cloud {} has no trajectory",
                    c.object_id
                )));
            }
        }
        let scene = Scene {
            clouds,
            object_trajectories,
            camera,
            extrinsic,
            intrinsics,
        };
        scene.common_span()?;
        Ok(scene)
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn camera(&self) -> &Trajectory {
        &self.camera
    }

    pub fn object_trajectory(&self, id: u8) -> Option<&Trajectory> {
        self.object_trajectories.get(&id)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.object_trajectories.keys().copied()
    }

    pub fn extrinsic(&self) -> RigidTransform {
        self.extrinsic
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Interval covered by the camera and every object trajectory.
    pub fn common_span(&self) -> Result<(f64, f64)> {
        let mut start = self.camera.start();
        let mut end = self.camera.end();
        for traj in self.object_trajectories.values() {
            start = start.max(traj.start());
            end = end.min(traj.end());
        }
        if !(end > start) {
            return Err(Error::InvalidArgument("trajectories share no common time span".into()));
        }
        Ok((start, end))
    }

    /// Object-local to camera-frame transform at `t`.
    pub fn object_to_camera(&self, id: u8, t: f64) -> Result<RigidTransform> {
        let traj = self
            .object_trajectories
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no trajectory for object {id}")))?;
        object_to_camera(traj, &self.camera, &self.extrinsic, t)
    }
}

fn object_to_camera(obj: &Trajectory, cam: &Trajectory, extrinsic: &RigidTransform, t: f64) -> Result<RigidTransform> {
    let p_cam = interpolate_pose(cam, t)?;
    let p_obj = interpolate_pose(obj, t)?;
    Ok(*extrinsic * p_cam.inverse() * p_obj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectOptions {
    /// Side of the square each point writes, 1 to 3 pixels.
    pub footprint: u8,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        ProjectOptions { footprint: 1 }
    }
}

impl ProjectOptions {
    fn validate(&self) -> Result<()> {
        if (1..=3).contains(&self.footprint) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "footprint must be 1, 2 or 3 px, got {}",
                self.footprint
            )))
        }
    }
}

/// Depth and object-id mask rendered at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub depth: DepthMap,
    pub mask: Grid<u8>,
}

/// Z-buffered projection of every cloud at time `t`. The nearest point wins a
/// pixel; equal depths go to the lower object id.
pub fn project_cloud(scene: &Scene, t: f64, opts: ProjectOptions) -> Result<Projection> {
    opts.validate()?;
    let k = scene.intrinsics();
    let (w, h) = k.dims();
    let mut zbuf: Grid<Option<(f64, u8)>> = Grid::filled(w, h, None);
    let lo = -((opts.footprint as i64 - 1) / 2);
    let hi = opts.footprint as i64 / 2;

    for cloud in scene.clouds() {
        let tf = scene.object_to_camera(cloud.object_id(), t)?;
        let id = cloud.object_id();
        for p in cloud.points() {
            let xc = tf.transform_point(p);
            let Some((px, py)) = k.project(&xc) else {
                continue;
            };
            let (cx, cy) = (px.round() as i64, py.round() as i64);
            for dy in lo..=hi {
                for dx in lo..=hi {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let cell = zbuf.get_mut(x as usize, y as usize);
                    let wins = match *cell {
                        None => true,
                        Some((z, other)) => xc.z < z || (xc.z == z && id < other),
                    };
                    if wins {
                        *cell = Some((xc.z, id));
                    }
                }
            }
        }
    }

    let depth = DepthMap::new(zbuf.map(|c| c.map(|(z, _)| z)))?;
    let mask = zbuf.map(|c| c.map_or(EMPTY_ID, |(_, id)| id));
    Ok(Projection { depth, mask })
}

fn check_window(traj: &Trajectory, t: f64, dt: f64) -> Result<()> {
    for s in [t - dt, t + dt] {
        if !traj.covers(s) {
            return Err(Error::OutsideSpan {
                t: s,
                start: traj.start(),
                end: traj.end(),
            });
        }
    }
    Ok(())
}

/// Angular velocity turning `from` into `to` over `span` seconds, expressed
/// in the frame on the left of `to * from^-1`.
fn rotation_rate(from: &UnitQuaternion<f64>, to: &UnitQuaternion<f64>, span: f64) -> Vector3<f64> {
    (to * from.inverse()).scaled_axis() / span
}

/// Central-difference velocity of the object relative to the camera,
/// expressed in the camera frame: `v` is the rate of change of the object
/// origin's camera-frame position and `omega` the spatial angular velocity.
pub fn finite_velocity(
    traj: &Trajectory,
    cam_traj: &Trajectory,
    extrinsic: &RigidTransform,
    t: f64,
    dt: f64,
) -> Result<Pose6> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "velocity step must be positive, got {dt}"
        )));
    }
    check_window(traj, t, dt)?;
    check_window(cam_traj, t, dt)?;
    let before = object_to_camera(traj, cam_traj, extrinsic, t - dt)?;
    let after = object_to_camera(traj, cam_traj, extrinsic, t + dt)?;
    Ok(Pose6::new(
        (after.translation - before.translation) / (2.0 * dt),
        rotation_rate(&before.rotation, &after.rotation, 2.0 * dt),
    ))
}

/// The camera's own velocity in its own frame, in the sign convention of the
/// flow model (a static point moves as `-v - omega x X`).
pub fn camera_velocity(cam_traj: &Trajectory, extrinsic: &RigidTransform, t: f64, dt: f64) -> Result<Pose6> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "velocity step must be positive, got {dt}"
        )));
    }
    check_window(cam_traj, t, dt)?;
    let inv_ext = extrinsic.inverse();
    let world_from_cam = |s: f64| -> Result<RigidTransform> { Ok(interpolate_pose(cam_traj, s)? * inv_ext) };
    let before = world_from_cam(t - dt)?;
    let mid = world_from_cam(t)?;
    let after = world_from_cam(t + dt)?;
    let v = mid.rotation.inverse() * (after.translation - before.translation) / (2.0 * dt);
    let body = (before.rotation.inverse() * after.rotation).scaled_axis() / (2.0 * dt);
    Ok(Pose6::new(v, body))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub t: f64,
    pub depth: DepthMap,
    pub mask: Grid<u8>,
    pub cam_velocity: Pose6,
    /// Camera-frame velocity of each non-background object, by id.
    pub object_velocities: BTreeMap<u8, Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameOptions {
    pub projection: ProjectOptions,
    pub velocity_dt: f64,
}

impl Default for FrameOptions {
    fn default() -> Self {
        FrameOptions {
            projection: ProjectOptions::default(),
            velocity_dt: DEFAULT_VELOCITY_DT,
        }
    }
}

/// Timestamps of `floor(span * fps)` frames, each centred in its `1/fps` interval.
pub fn frame_times(span: (f64, f64), fps: f64) -> Result<Vec<f64>> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let (start, end) = span;
    let count = ((end - start) * fps + 1e-9).floor() as usize;
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "common span {:.6} s is shorter than one frame at {fps} fps",
            end - start
        )));
    }
    Ok((0..count).map(|k| start + (k as f64 + 0.5) / fps).collect())
}

pub fn render_frame(scene: &Scene, t: f64, opts: &FrameOptions) -> Result<GtFrame> {
    let (start, end) = scene.common_span()?;
    // Shrink the difference step near the span edges instead of failing.
    let dt = opts.velocity_dt.min(t - start).min(end - t);
    if !(dt > 0.0) {
        return Err(Error::OutsideSpan { t, start, end });
    }
    let Projection { depth, mask } = project_cloud(scene, t, opts.projection)?;
    let cam_velocity = camera_velocity(scene.camera(), &scene.extrinsic(), t, dt)?;
    let mut object_velocities = BTreeMap::new();
    for id in scene.object_ids().filter(|&id| id != BACKGROUND_ID) {
        let traj = scene.object_trajectory(id).expect("id from scene");
        let vel = finite_velocity(traj, scene.camera(), &scene.extrinsic(), t, dt)?;
        object_velocities.insert(id, vel.v);
    }
    Ok(GtFrame {
        t,
        depth,
        mask,
        cam_velocity,
        object_velocities,
    })
}

/// Frames at uniform timestamps over the common span of all trajectories.
pub fn generate_frames(scene: &Scene, fps: f64, opts: &FrameOptions) -> Result<Vec<GtFrame>> {
    let times = frame_times(scene.common_span()?, fps)?;
    times.par_iter().map(|&t| render_frame(scene, t, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn rz(angle: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let a = RigidTransform::new(rz(0.3), Vector3::new(0.1, 0.2, 0.3));
        let b = RigidTransform::new(rz(1.1), Vector3::new(1.0, -1.0, 2.0));
        let traj = Trajectory::new(vec![(0.0, a), (0.005, b)]).unwrap();
        let at = interpolate_pose(&traj, 0.005).unwrap();
        assert_eq!(at, b);
        assert_eq!(interpolate_pose(&traj, 0.0).unwrap(), a);

        let lin = Trajectory::new(vec![
            (0.0, RigidTransform::identity()),
            (1.0, RigidTransform::from_translation(Vector3::new(2.0, 0.0, 0.0))),
        ])
        .unwrap();
        assert_eq!(
            interpolate_pose(&lin, 0.5).unwrap().translation,
            Vector3::new(1.0, 0.0, 0.0)
        );

        let rot = Trajectory::new(vec![
            (0.0, RigidTransform::identity()),
            (1.0, RigidTransform::new(rz(FRAC_PI_2), Vector3::zeros())),
        ])
        .unwrap();
        let mid = interpolate_pose(&rot, 0.5).unwrap();
        assert!(mid.rotation.angle_to(&rz(FRAC_PI_2 / 2.0)) < 1e-12);

        assert!(matches!(interpolate_pose(&rot, 1.5), Err(Error::OutsideSpan { .. })));
        assert!(interpolate_pose(&rot, -0.1).is_err());
    }

    #[test]
    fn antipodal_samples_take_the_short_way() {
        let q1 = UnitQuaternion::new_unchecked(-*rz(0.2).quaternion());
        let traj = Trajectory::new(vec![
            (0.0, RigidTransform::identity()),
            (1.0, RigidTransform::new(q1, Vector3::zeros())),
        ])
        .unwrap();
        let mid = interpolate_pose(&traj, 0.5).unwrap();
        assert!(mid.rotation.angle_to(&rz(0.1)) < 1e-12);
    }

    #[test]
    fn trajectory_validation() {
        let i = RigidTransform::identity();
        assert!(Trajectory::new(vec![(0.0, i)]).is_err());
        assert!(Trajectory::new(vec![(0.0, i), (0.0, i)]).is_err());
        assert!(RigidTransform::from_raw([0.0, 0.0, 0.0, 2.0], Vector3::zeros()).is_err());
        let t = RigidTransform::from_raw([0.0, 0.0, 0.0, 1.0 + 1e-6], Vector3::zeros()).unwrap();
        assert!((t.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    fn single_point_scene(points: Vec<(Vector3<f64>, u8)>) -> Scene {
        let mut by_id: BTreeMap<u8, Vec<Vector3<f64>>> = BTreeMap::new();
        for (p, id) in points {
            by_id.entry(id).or_default().push(p);
        }
        let clouds = by_id
            .iter()
            .map(|(id, pts)| PointCloud::new(pts.clone(), *id).unwrap())
            .collect();
        let trajs = by_id
            .keys()
            .map(|id| {
                (
                    *id,
                    Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).unwrap(),
                )
            })
            .collect();
        Scene::new(
            clouds,
            trajs,
            Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).unwrap(),
            RigidTransform::identity(),
            k(),
        )
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let scene = single_point_scene(vec![(Vector3::new(0.0, 0.0, 2.0), 3)]);
        let p = project_cloud(&scene, 0.5, ProjectOptions::default()).unwrap();
        assert_eq!(p.depth.get(32, 24), Some(2.0));
        assert_eq!(*p.mask.get(32, 24), 3);
        assert_eq!(p.depth.valid_count(), 1);

        let scene = single_point_scene(vec![(Vector3::new(0.0, 0.0, 2.0), 1), (Vector3::new(0.0, 0.0, 1.0), 2)]);
        let p = project_cloud(&scene, 0.5, ProjectOptions::default()).unwrap();
        assert_eq!(p.depth.get(32, 24), Some(1.0));
        assert_eq!(*p.mask.get(32, 24), 2);

        let scene = single_point_scene(vec![(Vector3::new(0.0, 0.0, -1.0), 1)]);
        let p = project_cloud(&scene, 0.5, ProjectOptions::default()).unwrap();
        assert_eq!(p.depth.valid_count(), 0);
        assert!(p.mask.as_slice().iter().all(|&m| m == EMPTY_ID));
    }

    #[test]
    fn zbuffer_ties_go_to_lower_id() {
        let scene = single_point_scene(vec![(Vector3::new(0.0, 0.0, 1.5), 7), (Vector3::new(0.0, 0.0, 1.5), 4)]);
        let p = project_cloud(&scene, 0.0, ProjectOptions::default()).unwrap();
        assert_eq!(*p.mask.get(32, 24), 4);
    }

    #[test]
    fn footprint_sizes() {
        let scene = single_point_scene(vec![(Vector3::new(0.0, 0.0, 2.0), 1)]);
        for (fp, n) in [(1u8, 1usize), (2, 4), (3, 9)] {
            let p = project_cloud(&scene, 0.0, ProjectOptions { footprint: fp }).unwrap();
            assert_eq!(p.depth.valid_count(), n);
        }
        assert!(project_cloud(&scene, 0.0, ProjectOptions { footprint: 4 }).is_err());
    }

    #[test]
    fn extrinsic_and_tracker_poses_compose() {
        // Camera markers sit 1 m behind the optical centre along z.
        let ext = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let cam =
            Trajectory::stationary(RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0)), 0.0, 1.0).unwrap();
        let obj =
            Trajectory::stationary(RigidTransform::from_translation(Vector3::new(0.5, 0.0, 4.0)), 0.0, 1.0).unwrap();
        let scene = Scene::new(
            vec![PointCloud::new(vec![Vector3::zeros()], 1).unwrap()],
            BTreeMap::from([(1, obj)]),
            cam,
            ext,
            k(),
        )
        .unwrap();
        let p = project_cloud(&scene, 0.2, ProjectOptions::default()).unwrap();
        assert_eq!(p.depth.get(32, 24), Some(3.0));
    }

    #[test]
    fn scene_requires_trajectories_and_overlap() {
        let cloud = PointCloud::new(vec![Vector3::zeros()], 1).unwrap();
        let cam = Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).unwrap();
        let late = Trajectory::stationary(RigidTransform::identity(), 2.0, 3.0).unwrap();
        assert!(Scene::new(
            vec![cloud.clone()],
            BTreeMap::new(),
            cam.clone(),
            RigidTransform::identity(),
            k()
        )
        .is_err());
        assert!(Scene::new(
            vec![cloud],
            BTreeMap::from([(1, late)]),
            cam,
            RigidTransform::identity(),
            k()
        )
        .is_err());
        assert!(PointCloud::new(vec![], 1).is_err());
        assert!(PointCloud::new(vec![Vector3::zeros()], EMPTY_ID).is_err());
    }

    fn linear(v: Vector3<f64>, t1: f64) -> Trajectory {
        let samples = (0..=((t1 * 200.0) as usize))
            .map(|i| {
                let t = i as f64 / 200.0;
                (t, RigidTransform::from_translation(v * t))
            })
            .collect();
        Trajectory::new(samples).unwrap()
    }

    #[test]
    fn static_object_seen_from_moving_camera() {
        let cam = linear(Vector3::new(1.0, 0.0, 0.0), 1.0);
        let obj = Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).unwrap();
        let vel = finite_velocity(&obj, &cam, &RigidTransform::identity(), 0.5, 0.0025).unwrap();
        assert!((vel.v - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
        assert!(vel.omega.norm() < 1e-12);

        let cv = camera_velocity(&cam, &RigidTransform::identity(), 0.5, 0.0025).unwrap();
        assert!((cv.v - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn constant_velocity_is_step_independent() {
        let cam = Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).unwrap();
        let obj = linear(Vector3::new(0.3, -0.2, 0.7), 1.0);
        let reference = finite_velocity(&obj, &cam, &RigidTransform::identity(), 0.4, 0.001).unwrap();
        for dt in [0.001, 0.0025, 0.005, 0.0075, 0.01] {
            let v = finite_velocity(&obj, &cam, &RigidTransform::identity(), 0.4, dt).unwrap();
            assert!((v.v - reference.v).norm() < 1e-6, "dt {dt}");
            assert!((v.v - Vector3::new(0.3, -0.2, 0.7)).norm() < 1e-6);
        }
    }

    #[test]
    fn stationary_pair_has_zero_velocity() {
        let pose = RigidTransform::new(rz(0.4), Vector3::new(1.0, 2.0, 3.0));
        let a = Trajectory::stationary(pose, 0.0, 1.0).unwrap();
        let vel = finite_velocity(&a, &a, &RigidTransform::identity(), 0.5, 0.0025).unwrap();
        assert_eq!(vel, Pose6::zero());
        assert!(finite_velocity(&a, &a, &RigidTransform::identity(), 0.999, 0.0025).is_err());
    }

    #[test]
    fn rotating_camera_angular_velocity() {
        // Camera yawing about its own z axis at 2 rad/s.
        let samples = (0..=200)
            .map(|i| {
                let t = i as f64 / 200.0;
                (t, RigidTransform::new(rz(2.0 * t), Vector3::zeros()))
            })
            .collect();
        let cam = Trajectory::new(samples).unwrap();
        let cv = camera_velocity(&cam, &RigidTransform::identity(), 0.5, 0.0025).unwrap();
        assert!((cv.omega - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-9);
        // The static world spins the other way relative to the camera.
        let world = Trajectory::stationary(RigidTransform::identity(), 0.0, 1.0).unwrap();
        let rel = finite_velocity(&world, &cam, &RigidTransform::identity(), 0.5, 0.0025).unwrap();
        assert!((rel.omega - Vector3::new(0.0, 0.0, -2.0)).norm() < 1e-9);
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_times((0.0, 1.0), 40.0).unwrap().len(), 40);
        assert_eq!(frame_times((0.0, 0.5), 40.0).unwrap().len(), 20);
        assert!(frame_times((0.0, 1.0), 0.0).is_err());
        assert!(frame_times((0.0, 0.01), 40.0).is_err());
    }

    #[test]
    fn generated_frames_are_coherent() {
        let scene = single_point_scene(vec![(Vector3::new(0.0, 0.0, 2.0), 0), (Vector3::new(0.1, 0.0, 1.0), 2)]);
        let frames = generate_frames(&scene, 40.0, &FrameOptions::default()).unwrap();
        assert_eq!(frames.len(), 40);
        for f in &frames {
            for (d, m) in f.depth.grid().as_slice().iter().zip(f.mask.as_slice()) {
                assert_eq!(d.is_some(), *m != EMPTY_ID);
            }
            assert_eq!(f.object_velocities.keys().copied().collect::<Vec<_>>(), vec![2]);
        }
        assert!(frames.windows(2).all(|w| w[1].t > w[0].t));
    }
}
