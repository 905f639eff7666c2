//! Synthetic event scenes with known motion.
//!
//! Texture points are placed on a background surface (a tilted plane with an
//! optional smooth relief) and on
//! fronto-parallel object patches, all expressed in the camera frame at the
//! reference time. Points are moved by integrating the constant camera twist
//! exactly (object points additionally by their residual translation), then
//! projected and rounded to pixels. A point emits events in proportion to
//! the distance its image travels, so static texture stays silent.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, Polarity, SensorSize};
use crate::geometry::{flow_at, normalize_coords, CameraIntrinsics, DepthMap, Pose6};
use crate::grid::Grid;

/// The plane `n . X = d` in the reference camera frame, with its depth
/// optionally scaled by `1 + relief * sin(2 pi x / period) * sin(2 pi y / period)`
/// in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub normal: Vector3<f64>,
    pub distance: f64,
    pub relief: f64,
    pub relief_period: f64,
}

impl Surface {
    pub fn plane(normal: Vector3<f64>, distance: f64) -> Self {
        Surface {
            normal: normal.normalize(),
            distance,
            relief: 0.0,
            relief_period: 1.0,
        }
    }

    pub fn fronto_parallel(depth: f64) -> Self {
        Surface::plane(Vector3::z(), depth)
    }

    /// Depth along the ray through normalized coordinates `(x, y)`.
    pub fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        let denom = self.normal.dot(&Vector3::new(x, y, 1.0));
        let tau = std::f64::consts::TAU / self.relief_period;
        let z = self.distance / denom * (1.0 + self.relief * (tau * x).sin() * (tau * y).sin());
        (denom.abs() > 1e-9 && z > 0.0 && z.is_finite()).then_some(z)
    }
}

/// A textured fronto-parallel patch moving with `pose + translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPatch {
    pub id: u8,
    /// Pixel rectangle `[x0, x1) x [y0, y1)` covered at the reference time.
    pub rect: [f64; 4],
    pub depth: f64,
    /// Residual translation added to the ego pose (same sign convention as `v`).
    pub translation: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub intrinsics: CameraIntrinsics,
    pub background: Option<Surface>,
    pub objects: Vec<ObjectPatch>,
    pub ego: Pose6,
    pub t_start: f64,
    pub t_end: f64,
    pub t_ref: f64,
    pub background_points: usize,
    pub object_points: usize,
    /// Events emitted per pixel of image travel.
    pub events_per_pixel: f64,
    /// Keep points this many pixels away from the border at `t_ref`.
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexturePoint {
    /// Camera-frame position at the reference time.
    pub position: Vector3<f64>,
    pub polarity: Polarity,
    /// Index into `SceneSpec::objects`, `None` for the background.
    pub object: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub points: Vec<TexturePoint>,
    pub events: Vec<Event>,
    /// Depth at the reference time; object depth covers each object's swept region.
    pub depth: DepthMap,
    /// Object index per pixel over the swept region of each object.
    pub labels: Grid<Option<usize>>,
}

/// `integral_0^tau exp(s [w]x) ds`, the left Jacobian factor of SE(3).
fn integrated_rotation(omega: &Vector3<f64>, tau: f64) -> Matrix3<f64> {
    let w = omega.norm();
    let k = omega.cross_matrix();
    let theta = w * tau;
    if theta.abs() < 1e-8 {
        return Matrix3::identity() * tau + k * (tau * tau / 2.0) + k * k * (tau * tau * tau / 6.0);
    }
    Matrix3::identity() * tau + k * ((1.0 - theta.cos()) / (w * w)) + k * k * ((theta - theta.sin()) / (w * w * w))
}

/// Camera-frame position, `tau` seconds after the reference time, of a point
/// obeying `dX/dt = -v - w x X` with constant `v` and `w`.
pub fn advance_point(x0: &Vector3<f64>, v: &Vector3<f64>, omega: &Vector3<f64>, tau: f64) -> Vector3<f64> {
    let r = Rotation3::from_scaled_axis(omega * tau);
    let p = integrated_rotation(omega, tau) * v;
    r.inverse() * (x0 - p)
}

impl SceneSpec {
    pub fn sensor(&self) -> SensorSize {
        SensorSize::new(self.intrinsics.width, self.intrinsics.height)
    }

    fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.t_end > self.t_start) || !(self.t_ref >= self.t_start && self.t_ref <= self.t_end) {
            return Err(Error::InvalidArgument("scene window must contain t_ref".into()));
        }
        if !(self.events_per_pixel > 0.0) {
            return Err(Error::InvalidArgument("events_per_pixel must be positive".into()));
        }
        Ok(())
    }

    fn point_pose(&self, object: Option<usize>) -> Pose6 {
        match object {
            None => self.ego,
            Some(j) => Pose6::new(self.ego.v + self.objects[j].translation, self.ego.omega),
        }
    }

    fn object_at(&self, px: f64, py: f64) -> Option<usize> {
        self.objects
            .iter()
            .position(|o| px >= o.rect[0] && px < o.rect[2] && py >= o.rect[1] && py < o.rect[3])
    }
}

/// Samples texture, emits events and renders the reference depth and labels.
pub fn generate(spec: SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let m = spec.margin;

    let mut points = Vec::new();
    if let Some(surface) = spec.background {
        let mut tries = 0;
        while points.len() < spec.background_points && tries < spec.background_points * 50 {
            tries += 1;
            let px = rng.gen_range(m..w - m);
            let py = rng.gen_range(m..h - m);
            if spec.object_at(px, py).is_some() {
                continue;
            }
            let (x, y) = normalize_coords(px, py, &k);
            let Some(z) = surface.depth_at(x, y) else { continue };
            points.push(TexturePoint {
                position: k.back_project(px, py, z),
                polarity: random_polarity(&mut rng),
                object: None,
            });
        }
    }
    for (j, obj) in spec.objects.iter().enumerate() {
        for _ in 0..spec.object_points {
            let px = rng.gen_range(obj.rect[0]..obj.rect[2]);
            let py = rng.gen_range(obj.rect[1]..obj.rect[3]);
            points.push(TexturePoint {
                position: k.back_project(px, py, obj.depth),
                polarity: random_polarity(&mut rng),
                object: Some(j),
            });
        }
    }

    let sensor = spec.sensor();
    let span = spec.t_end - spec.t_start;
    let mut events = Vec::new();
    for pt in &points {
        let pose = spec.point_pose(pt.object);
        let z = pt.position.z;
        let (x, y) = (pt.position.x / z, pt.position.y / z);
        let (u, v) = flow_at(x, y, z, &pose)?;
        let speed = (u * k.fx).hypot(v * k.fy);
        let expected = speed * span * spec.events_per_pixel;
        let mut n = expected.floor() as usize;
        if rng.gen::<f64>() < expected - n as f64 {
            n += 1;
        }
        for _ in 0..n {
            // Microsecond timestamps, as a sensor would report them.
            let t = (rng.gen_range(spec.t_start..spec.t_end) * 1e6).floor() / 1e6;
            if t < spec.t_start {
                continue;
            }
            let pos = advance_point(&pt.position, &pose.v, &pose.omega, t - spec.t_ref);
            let Some((px, py)) = k.project(&pos) else { continue };
            let (ix, iy) = (px.round() as i64, py.round() as i64);
            if sensor.contains(ix, iy) {
                events.push(Event::new(t, ix as u16, iy as u16, pt.polarity));
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t));

    let labels = swept_labels(&spec, &points);
    let depth = DepthMap::new(Grid::from_fn(k.width as usize, k.height as usize, |px, py| {
        if let Some(j) = *labels.get(px, py) {
            return Some(spec.objects[j].depth);
        }
        let (x, y) = normalize_coords(px as f64, py as f64, &k);
        spec.background.and_then(|p| p.depth_at(x, y))
    }))?;

    Ok(SyntheticScene {
        spec,
        points,
        events,
        depth,
        labels,
    })
}

fn random_polarity(rng: &mut ChaCha8Rng) -> Polarity {
    if rng.gen::<bool>() {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

/// Pixels visited by each object's texture over the window, dilated by one pixel.
fn swept_labels(spec: &SceneSpec, points: &[TexturePoint]) -> Grid<Option<usize>> {
    let k = spec.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let mut labels: Grid<Option<usize>> = Grid::filled(w, h, None);
    const STEPS: usize = 64;
    for pt in points {
        let Some(j) = pt.object else { continue };
        let pose = spec.point_pose(Some(j));
        for s in 0..=STEPS {
            let t = spec.t_start + (spec.t_end - spec.t_start) * s as f64 / STEPS as f64;
            let pos = advance_point(&pt.position, &pose.v, &pose.omega, t - spec.t_ref);
            let Some((px, py)) = k.project(&pos) else { continue };
            let (cx, cy) = (px.round() as i64, py.round() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        labels.get_mut(x as usize, y as usize).get_or_insert(j);
                    }
                }
            }
        }
    }
    labels
}

/// Default DAVIS346-like camera with a wide field of view.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(200.0, 200.0, 172.5, 129.5, 346, 260).expect("valid constants")
}

/// Five 25 ms slices around a reference time at the centre of the third.
pub fn five_slice_window() -> (f64, f64, f64) {
    (0.0, 0.125, 0.0625)
}

/// Textured surface seen by a camera with the given motion.
pub fn textured_surface(ego: Pose6, surface: Surface, points: usize) -> SceneSpec {
    let (t_start, t_end, t_ref) = five_slice_window();
    SceneSpec {
        intrinsics: default_intrinsics(),
        background: Some(surface),
        objects: Vec::new(),
        ego,
        t_start,
        t_end,
        t_ref,
        background_points: points,
        object_points: 0,
        events_per_pixel: 1.0,
        margin: 8.0,
    }
}

/// Random rigid scene: a tilted, gently rippled surface 1.5 to 3 m away,
/// translation of 0.6 to 1.5 m/s in a random direction and rotation of 0.4 to
/// 1.2 rad/s.
pub fn random_rigid_scene(rng: &mut impl Rng, points: usize) -> SceneSpec {
    let normal = random_unit(rng, 0.5);
    let distance = rng.gen_range(1.5..3.0);
    let v = random_unit(rng, -1.0) * rng.gen_range(0.6..1.5);
    let omega = random_unit(rng, -1.0) * rng.gen_range(0.4..1.2);
    let surface = Surface {
        relief: 0.3,
        relief_period: 0.6,
        ..Surface::plane(normal, distance)
    };
    textured_surface(Pose6::new(v, omega), surface, points)
}

/// Random IMO scene: static camera, one textured patch 1 to 2 m away moving
/// mostly parallel to the image plane at 0.4 to 1.2 m/s.
pub fn random_object_scene(rng: &mut impl Rng, points: usize) -> SceneSpec {
    let k = default_intrinsics();
    let (t_start, t_end, t_ref) = five_slice_window();
    let cx = rng.gen_range(120.0..226.0);
    let cy = rng.gen_range(90.0..170.0);
    let half = rng.gen_range(30.0..45.0);
    let dir = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.3..0.3),
    );
    let translation = dir.normalize() * rng.gen_range(0.4..1.2);
    SceneSpec {
        intrinsics: k,
        background: Some(Surface::fronto_parallel(4.0)),
        objects: vec![ObjectPatch {
            id: 1,
            rect: [cx - half, cy - half, cx + half, cy + half],
            depth: rng.gen_range(1.0..2.0),
            translation,
        }],
        ego: Pose6::zero(),
        t_start,
        t_end,
        t_ref,
        background_points: 300,
        object_points: points,
        events_per_pixel: 1.0,
        margin: 8.0,
    }
}

/// Uniform direction; with `min_z > -1` restricted to the cap `z >= min_z`.
fn random_unit(rng: &mut impl Rng, min_z: f64) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            let u = v / n;
            if u.z >= min_z {
                return u;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_motion_matches_integration() {
        let x0 = Vector3::new(0.3, -0.2, 2.5);
        let v = Vector3::new(0.7, -0.4, 1.1);
        let w = Vector3::new(1.5, -0.8, 2.2);
        // RK4 on dX/dt = -v - w x X.
        let f = |x: &Vector3<f64>| -v - w.cross(x);
        let (mut x, steps, tau) = (x0, 20_000, 0.08);
        let h = tau / steps as f64;
        for _ in 0..steps {
            let k1 = f(&x);
            let k2 = f(&(x + k1 * (h / 2.0)));
            let k3 = f(&(x + k2 * (h / 2.0)));
            let k4 = f(&(x + k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        assert!((advance_point(&x0, &v, &w, tau) - x).norm() < 1e-12);
        assert!((advance_point(&x0, &v, &Vector3::zeros(), tau) - (x0 - v * tau)).norm() < 1e-15);
        assert_eq!(advance_point(&x0, &v, &w, 0.0), x0);
    }

    #[test]
    fn plane_scene_is_reproducible_and_sorted() {
        let ego = Pose6::from_array([0.5, 0.2, 0.3, 0.4, -0.6, 1.0]);
        let spec = textured_surface(ego, Surface::fronto_parallel(2.0), 200);
        let a = generate(spec.clone(), 3).unwrap();
        let b = generate(spec, 3).unwrap();
        assert_eq!(a.events, b.events);
        assert!(a.events.len() > 2000);
        assert!(a.events.windows(2).all(|w| w[0].t <= w[1].t));
        assert_eq!(a.depth.valid_fraction(), 1.0);
        assert!(a.labels.as_slice().iter().all(|l| l.is_none()));
    }

    #[test]
    fn static_texture_emits_nothing() {
        let mut spec = random_object_scene(&mut ChaCha8Rng::seed_from_u64(1), 100);
        spec.objects[0].translation = Vector3::zeros();
        let scene = generate(spec, 0).unwrap();
        assert!(scene.events.is_empty());
    }

    #[test]
    fn object_labels_cover_object_events() {
        let spec = random_object_scene(&mut ChaCha8Rng::seed_from_u64(2), 150);
        let scene = generate(spec, 5).unwrap();
        assert!(!scene.events.is_empty());
        for e in &scene.events {
            assert_eq!(*scene.labels.get(e.x as usize, e.y as usize), Some(0));
        }
        let obj_depth = scene.spec.objects[0].depth;
        let e = scene.events[0];
        assert_eq!(scene.depth.get(e.x as usize, e.y as usize), Some(obj_depth));
    }
}
