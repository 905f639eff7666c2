//! Motion estimation by maximising the sharpness of motion-compensated events.
//!
//! [`WarpObjective`] evaluates `w_coarse * coarse + w_fine * fine` for a
//! candidate pose directly on the event list: each event carries its
//! precomputed 2x6 flow matrix, so one evaluation costs a pass over the events
//! instead of dense warps and image stacks. [`dense_objective`] computes the
//! same value through the dense warping functions and serves as its oracle.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{project_slice, subdivide, EventSlice, Polarity, SliceMap};
use crate::geometry::{flow_matrix, normalize_coords, CameraIntrinsics, DepthMap, FlowField, Pose6};
use crate::grid::Grid;
use crate::optim::{nelder_mead, NmOptions};
use crate::warping::{coarse_loss, fine_loss, shift_slice, warp_slice, LossWeights, WarpDiagnostics};

/// Minimum number of events over all slices for ego-motion estimation.
pub const MIN_EVENTS: usize = 10;
/// Minimum number of masked events for object-velocity estimation.
pub const MIN_OBJECT_EVENTS: usize = 20;
/// Minimum fraction of pixels with valid depth.
pub const MIN_VALID_DEPTH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MotionModel {
    #[default]
    #[serde(rename = "6dof")]
    SixDof,
    /// Translation plus yaw rate about the optical axis.
    #[serde(rename = "4dof-planar")]
    FourDofPlanar,
}

impl MotionModel {
    pub fn dims(self) -> usize {
        match self {
            MotionModel::SixDof => 6,
            MotionModel::FourDofPlanar => 4,
        }
    }
}

impl FromStr for MotionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6dof" => Ok(MotionModel::SixDof),
            "4dof-planar" => Ok(MotionModel::FourDofPlanar),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}`, expected 6dof or 4dof-planar"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSource {
    #[default]
    GroundTruth,
    /// Fronto-parallel plane at `plane_depth`; translation is then only known up to scale.
    ConstantPlane,
}

impl FromStr for DepthSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(DepthSource::GroundTruth),
            "constant-plane" => Ok(DepthSource::ConstantPlane),
            _ => Err(Error::InvalidArgument(format!(
                "unknown depth source `{s}`, expected ground-truth or constant-plane"
            ))),
        }
    }
}

/// How warped events are deposited on the pixel grid inside the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Splat {
    #[default]
    Nearest,
    /// Spreads each event over its four neighbouring pixels. Smoother in the
    /// pose, but no longer equal to the nearest-pixel losses.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub mode: MotionModel,
    /// Iteration cap per simplex run.
    pub max_iters: usize,
    /// Relative objective spread at which a simplex run counts as converged.
    pub tol: f64,
    pub weights: LossWeights,
    /// Number of starting points, the first being `initial` (or zero).
    pub multistart: usize,
    pub depth_source: DepthSource,
    pub plane_depth: f64,
    pub fine_dt: f64,
    /// Levels of 2x pixel binning searched coarse to fine; 1 disables the pyramid.
    pub pyramid_levels: usize,
    pub splat: Splat,
    pub seed: u64,
    /// Half-width of the random start box, in rad/s (translation in units of mean depth per second).
    pub init_spread: f64,
    pub initial: Option<Pose6>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            mode: MotionModel::SixDof,
            max_iters: 400,
            tol: 1e-6,
            weights: LossWeights::default(),
            multistart: 4,
            depth_source: DepthSource::GroundTruth,
            plane_depth: 1.0,
            fine_dt: 0.001,
            pyramid_levels: 3,
            splat: Splat::Bilinear,
            seed: 0,
            init_spread: 1.0,
            initial: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.max_iters == 0 || self.multistart == 0 {
            return Err(Error::InvalidArgument(
                "max_iters and multistart must be at least 1".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol must be non-negative, got {}",
                self.tol
            )));
        }
        if !(1..=6).contains(&self.pyramid_levels) {
            return Err(Error::InvalidArgument(format!(
                "pyramid_levels must be in 1..=6, got {}",
                self.pyramid_levels
            )));
        }
        if !(self.plane_depth > 0.0) || !(self.init_spread >= 0.0) {
            return Err(Error::InvalidArgument(
                "plane_depth must be positive and init_spread non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub pose: Pose6,
    pub objective: f64,
    pub iterations: usize,
    /// Objective evaluations over all starts and levels.
    pub evaluations: usize,
    pub converged: bool,
    pub diagnostics: WarpDiagnostics,
    /// Best full-resolution objective after each iteration of the winning start.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEstimate {
    /// Residual translation `t_j`; the object's pixels move with `ego + t_j`.
    pub translation: Vector3<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub events_used: usize,
    pub diagnostics: WarpDiagnostics,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Packed {
    x: f64,
    y: f64,
    mx: [f64; 6],
    my: [f64; 6],
    /// `t - t_ref`
    lag_fine: f64,
    /// Normalized time within the fine sub-slice.
    tn_fine: f64,
    /// Normalized time within the input slice.
    tn_coarse: f64,
    positive: bool,
}

#[derive(Debug, Clone)]
struct MiddleMap {
    width: usize,
    height: usize,
    pos: Vec<f64>,
    neg: Vec<f64>,
    time: Vec<f64>,
    /// `sum |pos| + |neg| + |time|`
    norm: f64,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
    t: Vec<f64>,
    touched: Vec<u32>,
    s: Vec<f64>,
    s_touched: Vec<u32>,
}

/// Event-based evaluator of the coarse-plus-fine warp objective.
#[derive(Debug, Clone)]
pub struct WarpObjective {
    width: usize,
    height: usize,
    events: Vec<Packed>,
    /// Fine sub-slices as ranges into `events`.
    groups: Vec<(usize, usize)>,
    /// Neighbour slices as `(range, shift)`, shift being `n * delta_t`.
    neighbours: Vec<(usize, usize, f64)>,
    middle: Vec<MiddleMap>,
    weights: LossWeights,
    splat: Splat,
    charge_dropped: bool,
    events_in: usize,
    events_without_depth: usize,
    depth_sum: f64,
    t_ref: f64,
    scratch: Scratch,
}

fn check_slices(slices: &[EventSlice], k: &CameraIntrinsics) -> Result<f64> {
    if !matches!(slices.len(), 3 | 5) {
        return Err(Error::InvalidArgument(format!(
            "need 2K+1 slices with K = 1 or 2, got {}",
            slices.len()
        )));
    }
    let mid = &slices[slices.len() / 2];
    let dt = mid.duration();
    for s in slices {
        let sensor = s.sensor();
        if (sensor.width, sensor.height) != (k.width, k.height) {
            return Err(Error::Geometry(format!(
                "slice sensor {}x{} vs intrinsics {}x{}",
                sensor.width, sensor.height, k.width, k.height
            )));
        }
        if (s.duration() - dt).abs() > 1e-6 * dt {
            return Err(Error::InvalidArgument("slices must share one duration".into()));
        }
    }
    Ok(dt)
}

impl WarpObjective {
    /// Builds the evaluator. With a `mask`, only events on masked pixels take
    /// part, in the warped slices as well as in the middle reference map.
    pub fn new(
        slices: &[EventSlice],
        depth: &DepthMap,
        k: &CameraIntrinsics,
        mask: Option<&Grid<bool>>,
        weights: &LossWeights,
        fine_dt: f64,
        splat: Splat,
        levels: usize,
    ) -> Result<Self> {
        let dt = check_slices(slices, k)?;
        weights.validate()?;
        if depth.dims() != k.dims() {
            return Err(Error::Geometry(format!(
                "depth {:?} vs intrinsics {:?}",
                depth.dims(),
                k.dims()
            )));
        }
        if let Some(m) = mask {
            if m.dims() != k.dims() {
                return Err(Error::Geometry(format!(
                    "mask {:?} vs intrinsics {:?}",
                    m.dims(),
                    k.dims()
                )));
            }
        }
        let (width, height) = k.dims();
        let keep = |x: u16, y: u16| mask.map_or(true, |m| *m.get(x as usize, y as usize));
        let kk = slices.len() / 2;
        let mid = &slices[kk];
        let t_ref = mid.midpoint();

        let mut obj = WarpObjective {
            width,
            height,
            events: Vec::new(),
            groups: Vec::new(),
            neighbours: Vec::new(),
            middle: Vec::new(),
            weights: *weights,
            splat,
            charge_dropped: false,
            events_in: 0,
            events_without_depth: 0,
            depth_sum: 0.0,
            t_ref,
            scratch: Scratch::default(),
        };

        // Packed events are stored per slice and, within a slice, per fine
        // sub-slice, so both the fine groups and the neighbour ranges are contiguous.
        let mut slice_ranges = Vec::with_capacity(slices.len());
        for s in slices {
            let start = obj.events.len();
            for sub in subdivide(s, fine_dt)? {
                let g0 = obj.events.len();
                for e in sub.events() {
                    if !keep(e.x, e.y) {
                        continue;
                    }
                    obj.events_in += 1;
                    let Some(z) = depth.get(e.x as usize, e.y as usize) else {
                        obj.events_without_depth += 1;
                        continue;
                    };
                    obj.depth_sum += z;
                    let (x, y) = normalize_coords(e.x as f64, e.y as f64, k);
                    let a = flow_matrix(x, y, 1.0 / z);
                    obj.events.push(Packed {
                        x: e.x as f64,
                        y: e.y as f64,
                        mx: a[0].map(|c| c * k.fx),
                        my: a[1].map(|c| c * k.fy),
                        lag_fine: e.t - t_ref,
                        tn_fine: (e.t - sub.t_start()) / sub.duration(),
                        tn_coarse: (e.t - s.t_start()) / s.duration(),
                        positive: e.polarity == Polarity::Positive,
                    });
                }
                if obj.events.len() > g0 {
                    obj.groups.push((g0, obj.events.len()));
                }
            }
            slice_ranges.push((start, obj.events.len()));
        }
        for (i, &(a, b)) in slice_ranges.iter().enumerate() {
            if i != kk {
                obj.neighbours.push((a, b, (i as f64 - kk as f64) * dt));
            }
        }

        for level in 0..levels {
            let (w, h) = level_dims(width, height, level);
            let mut m = MiddleMap {
                width: w,
                height: h,
                pos: vec![0.0; w * h],
                neg: vec![0.0; w * h],
                time: vec![0.0; w * h],
                norm: 0.0,
            };
            for e in mid.events().iter().filter(|e| keep(e.x, e.y)) {
                let i = (e.y as usize >> level) * w + (e.x as usize >> level);
                if e.polarity == Polarity::Positive {
                    m.pos[i] += 1.0;
                } else {
                    m.neg[i] += 1.0;
                }
                m.time[i] += (e.t - mid.t_start()) / mid.duration();
            }
            for i in 0..w * h {
                let n = m.pos[i] + m.neg[i];
                if n > 0.0 {
                    m.time[i] = (m.time[i] / n).clamp(0.0, 1.0);
                }
                m.norm += m.pos[i] + m.neg[i] + m.time[i];
            }
            obj.middle.push(m);
        }
        let cells = width * height;
        obj.scratch = Scratch {
            a: vec![0.0; cells],
            b: vec![0.0; cells],
            t: vec![0.0; cells],
            touched: Vec::new(),
            s: vec![0.0; cells],
            s_touched: Vec::new(),
        };
        Ok(obj)
    }

    /// Charges every event warped off the sensor as if it had landed alone on
    /// an empty pixel. Without this, poses that push events out of view look
    /// sharp simply because fewer events are left.
    pub fn with_dropped_events_charged(mut self, charge: bool) -> Self {
        self.charge_dropped = charge;
        self
    }

    pub fn with_splat(mut self, splat: Splat) -> Self {
        self.splat = splat;
        self
    }

    pub fn levels(&self) -> usize {
        self.middle.len()
    }

    pub fn t_ref(&self) -> f64 {
        self.t_ref
    }

    /// Events that take part (inside the mask, if any).
    pub fn events_in(&self) -> usize {
        self.events_in
    }

    /// Events that also have a valid depth.
    pub fn events_with_depth(&self) -> usize {
        self.events.len()
    }

    /// Mean depth under the events that have one.
    pub fn mean_event_depth(&self) -> Option<f64> {
        (!self.events.is_empty()).then(|| self.depth_sum / self.events.len() as f64)
    }

    /// Objective at full resolution.
    pub fn eval(&mut self, pose: &Pose6) -> f64 {
        self.eval_level(pose, 0)
    }

    /// Objective on the grid binned `2^level` times.
    pub fn eval_level(&mut self, pose: &Pose6, level: usize) -> f64 {
        let p = pose.to_array();
        let mut total = 0.0;
        if self.weights.w_fine > 0.0 {
            total += self.weights.w_fine * self.fine(&p, level);
        }
        if self.weights.w_coarse > 0.0 {
            total += self.weights.w_coarse * self.coarse(&p, level);
        }
        total
    }

    /// Warp statistics for moving every event to `t_ref` under `pose`.
    pub fn diagnostics(&self, pose: &Pose6) -> WarpDiagnostics {
        let p = pose.to_array();
        let mut out = 0;
        let mut disp = 0.0;
        for e in &self.events {
            let (dx, dy) = displacement(e, &p, e.lag_fine);
            disp += dx.hypot(dy);
            let (nx, ny) = ((e.x - dx).round(), (e.y - dy).round());
            if nx < 0.0 || ny < 0.0 || nx >= self.width as f64 || ny >= self.height as f64 {
                out += 1;
            }
        }
        WarpDiagnostics {
            events_in: self.events_in,
            events_out_of_bounds: out,
            events_without_flow: self.events_without_depth,
            mean_displacement: if self.events.is_empty() {
                0.0
            } else {
                disp / self.events.len() as f64
            },
        }
    }

    /// Calls `add(index, weight)` for each cell the displaced event lands on
    /// and returns the weight that fell outside the sensor.
    #[inline]
    fn splat_event(&self, nx: f64, ny: f64, level: usize, mut add: impl FnMut(usize, f64)) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        let lw = self.middle[level].width;
        match self.splat {
            Splat::Nearest => {
                let (rx, ry) = (nx.round(), ny.round());
                if rx >= 0.0 && ry >= 0.0 && rx < w && ry < h {
                    add(((ry as usize) >> level) * lw + ((rx as usize) >> level), 1.0);
                    0.0
                } else {
                    1.0
                }
            }
            Splat::Bilinear => {
                let s = (1u32 << level) as f64;
                let lh = self.middle[level].height;
                let (fx, fy) = ((nx + 0.5) / s - 0.5, (ny + 0.5) / s - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                let mut lost = 0.0;
                for (cx, cy, wgt) in [
                    (x0, y0, (1.0 - ax) * (1.0 - ay)),
                    (x0 + 1.0, y0, ax * (1.0 - ay)),
                    (x0, y0 + 1.0, (1.0 - ax) * ay),
                    (x0 + 1.0, y0 + 1.0, ax * ay),
                ] {
                    if cx >= 0.0 && cy >= 0.0 && cx < lw as f64 && cy < lh as f64 {
                        if wgt > 0.0 {
                            add(cy as usize * lw + cx as usize, wgt);
                        }
                    } else {
                        lost += wgt;
                    }
                }
                lost
            }
        }
    }

    fn fine(&mut self, p: &[f64; 6], level: usize) -> f64 {
        let mut sc = std::mem::take(&mut self.scratch);
        let pe = self.weights.p;
        let mut dropped = 0.0;
        for &(g0, g1) in &self.groups {
            for e in &self.events[g0..g1] {
                let (dx, dy) = displacement(e, p, e.lag_fine);
                let lost = self.splat_event(e.x - dx, e.y - dy, level, |i, wgt| {
                    if sc.a[i] == 0.0 {
                        sc.touched.push(i as u32);
                    }
                    sc.a[i] += wgt;
                    sc.t[i] += wgt * e.tn_fine;
                });
                if self.charge_dropped && lost > 0.0 {
                    dropped += (lost * (1.0 + e.tn_fine)).powf(pe);
                }
            }
            for &i in &sc.touched {
                let i = i as usize;
                let n = sc.a[i];
                if sc.s[i] == 0.0 {
                    sc.s_touched.push(i as u32);
                }
                sc.s[i] += n + (sc.t[i] / n).clamp(0.0, 1.0);
                sc.a[i] = 0.0;
                sc.t[i] = 0.0;
            }
            sc.touched.clear();
        }
        let sqrt = pe == 0.5;
        let mut sum = dropped;
        for &i in &sc.s_touched {
            let v = sc.s[i as usize];
            sum += if sqrt { v.sqrt() } else { v.powf(pe) };
            sc.s[i as usize] = 0.0;
        }
        sc.s_touched.clear();
        self.scratch = sc;
        sum
    }

    fn coarse(&mut self, p: &[f64; 6], level: usize) -> f64 {
        let mut sc = std::mem::take(&mut self.scratch);
        let mut total = 0.0;
        for &(a, b, shift) in &self.neighbours {
            let mut dropped = 0.0;
            for e in &self.events[a..b] {
                let (dx, dy) = displacement(e, p, shift);
                let lost = self.splat_event(e.x - dx, e.y - dy, level, |i, wgt| {
                    if sc.a[i] == 0.0 && sc.b[i] == 0.0 {
                        sc.touched.push(i as u32);
                    }
                    if e.positive {
                        sc.a[i] += wgt;
                    } else {
                        sc.b[i] += wgt;
                    }
                    sc.t[i] += wgt * e.tn_coarse;
                });
                if self.charge_dropped {
                    dropped += lost * (1.0 + e.tn_coarse);
                }
            }
            let m = &self.middle[level];
            let mut sum = m.norm + dropped;
            for &i in &sc.touched {
                let i = i as usize;
                let (pos, neg) = (sc.a[i], sc.b[i]);
                let time = (sc.t[i] / (pos + neg)).clamp(0.0, 1.0);
                sum += (pos - m.pos[i]).abs() + (neg - m.neg[i]).abs() + (time - m.time[i]).abs()
                    - (m.pos[i] + m.neg[i] + m.time[i]);
                sc.a[i] = 0.0;
                sc.b[i] = 0.0;
                sc.t[i] = 0.0;
            }
            sc.touched.clear();
            total += sum;
        }
        self.scratch = sc;
        total
    }
}

#[inline]
fn displacement(e: &Packed, p: &[f64; 6], lag: f64) -> (f64, f64) {
    let mut u = 0.0;
    let mut v = 0.0;
    for i in 0..6 {
        u += e.mx[i] * p[i];
        v += e.my[i] * p[i];
    }
    (u * lag, v * lag)
}

fn level_dims(w: usize, h: usize, level: usize) -> (usize, usize) {
    ((w + (1 << level) - 1) >> level, (h + (1 << level) - 1) >> level)
}

/// The warp objective computed with dense warps and image stacks.
pub fn dense_objective(slices: &[EventSlice], flow: &FlowField, weights: &LossWeights, fine_dt: f64) -> Result<f64> {
    if !matches!(slices.len(), 3 | 5) {
        return Err(Error::InvalidArgument(format!(
            "need 3 or 5 slices, got {}",
            slices.len()
        )));
    }
    let kk = slices.len() / 2;
    let mid = &slices[kk];
    let t_ref = mid.midpoint();
    let dt = mid.duration();

    let mut fine_maps = Vec::new();
    for s in slices {
        for sub in subdivide(s, fine_dt)? {
            let (warped, _) = warp_slice(&sub, flow, t_ref)?;
            fine_maps.push(project_slice(&warped));
        }
    }
    let mut neighbours: Vec<SliceMap> = Vec::new();
    for (i, s) in slices.iter().enumerate() {
        if i != kk {
            let (shifted, _) = shift_slice(s, flow, (i as f64 - kk as f64) * dt)?;
            neighbours.push(project_slice(&shifted));
        }
    }
    let middle = project_slice(mid);
    Ok(weights.w_coarse * coarse_loss(&neighbours, &middle)? + weights.w_fine * fine_loss(&fine_maps, weights.p)?)
}

/// Maps optimiser coordinates to a pose. Translation coordinates are scaled
/// by `depth_scale` so that every coordinate moves the image comparably.
#[derive(Debug, Clone, Copy)]
enum Param {
    Six,
    FourPlanar,
    Object(Pose6),
}

impl Param {
    fn dims(self) -> usize {
        match self {
            Param::Six => 6,
            Param::FourPlanar => 4,
            Param::Object(_) => 3,
        }
    }

    fn to_pose(self, th: &[f64], depth_scale: f64) -> Pose6 {
        let v = Vector3::new(th[0], th[1], th[2]) * depth_scale;
        match self {
            Param::Six => Pose6::new(v, Vector3::new(th[3], th[4], th[5])),
            Param::FourPlanar => Pose6::new(v, Vector3::new(0.0, 0.0, th[3])),
            Param::Object(ego) => Pose6::new(ego.v + v, ego.omega),
        }
    }

    fn from_pose(self, pose: &Pose6, depth_scale: f64) -> Vec<f64> {
        match self {
            Param::Six => {
                let v = pose.v / depth_scale;
                vec![v.x, v.y, v.z, pose.omega.x, pose.omega.y, pose.omega.z]
            }
            Param::FourPlanar => {
                let v = pose.v / depth_scale;
                vec![v.x, v.y, v.z, pose.omega.z]
            }
            Param::Object(ego) => {
                let v = (pose.v - ego.v) / depth_scale;
                vec![v.x, v.y, v.z]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct SearchOutcome {
    pose: Pose6,
    objective: f64,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Coarse-to-fine simplex search from one start, then restarts at full
/// resolution with shrinking simplices. Pyramid levels always splat to the
/// nearest cell.
fn search_from(
    obj: &mut WarpObjective,
    param: Param,
    scale: f64,
    start: Vec<f64>,
    cfg: &EstimatorConfig,
) -> SearchOutcome {
    let n = param.dims();
    let opts = NmOptions {
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        x_tol: 1e-3,
    };
    let mut th = start;
    let mut iterations = 0;
    let mut evaluations = 0;
    let mut converged = false;
    let mut history = Vec::new();
    let levels = obj.levels();
    let mut coarse = obj.clone().with_splat(Splat::Nearest);
    for level in (1..levels).rev() {
        let step = vec![0.1 * (1 << level) as f64; n];
        let r = nelder_mead(
            &mut |x| coarse.eval_level(&param.to_pose(x, scale), level),
            &th,
            &step,
            &opts,
        );
        iterations += r.iterations;
        evaluations += r.evaluations;
        th = r.x;
    }
    let mut best = f64::INFINITY;
    for step in [0.1, 0.03, 0.01, 0.003] {
        let r = nelder_mead(
            &mut |x| obj.eval_level(&param.to_pose(x, scale), 0),
            &th,
            &vec![step; n],
            &opts,
        );
        iterations += r.iterations;
        evaluations += r.evaluations;
        converged = r.converged;
        let floor = history.last().copied().unwrap_or(f64::INFINITY);
        history.extend(r.history.iter().map(|h| h.min(floor)));
        if r.f < best {
            best = r.f;
            th = r.x;
        }
    }
    let pose = param.to_pose(&th, scale);
    let objective = obj.eval(&pose);
    if history.is_empty() {
        history.push(objective);
    }
    SearchOutcome {
        pose,
        objective,
        iterations,
        evaluations,
        converged,
        history,
    }
}

fn multistart(obj: &WarpObjective, param: Param, scale: f64, initial: Pose6, cfg: &EstimatorConfig) -> SearchOutcome {
    let n = param.dims();
    let x0 = param.from_pose(&initial, scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vec<f64>> = (0..cfg.multistart)
        .map(|i| {
            if i == 0 {
                x0.clone()
            } else {
                (0..n)
                    .map(|d| x0[d] + rng.gen_range(-1.0..=1.0) * cfg.init_spread)
                    .collect()
            }
        })
        .collect();
    let outcomes: Vec<SearchOutcome> = starts
        .into_par_iter()
        .map(|s| search_from(&mut obj.clone(), param, scale, s, cfg))
        .collect();
    let evaluations = outcomes.iter().map(|o| o.evaluations).sum();
    // First start wins ties, so results do not depend on thread scheduling.
    let best = outcomes
        .into_iter()
        .reduce(|best, o| if o.objective < best.objective { o } else { best })
        .expect("at least one start");
    SearchOutcome { evaluations, ..best }
}

fn prepare_depth(depth: Option<&DepthMap>, k: &CameraIntrinsics, cfg: &EstimatorConfig) -> Result<DepthMap> {
    let (w, h) = k.dims();
    let depth = match cfg.depth_source {
        DepthSource::ConstantPlane => DepthMap::constant(w, h, cfg.plane_depth)?,
        DepthSource::GroundTruth => depth
            .ok_or_else(|| Error::NoValidDepth("ground-truth depth source selected but no depth given".into()))?
            .clone(),
    };
    if depth.valid_fraction() < MIN_VALID_DEPTH {
        return Err(Error::NoValidDepth(format!(
            "only {:.3}% of pixels have depth",
            100.0 * depth.valid_fraction()
        )));
    }
    Ok(depth)
}

/// Camera velocity that best sharpens the events of `slices` (2K+1 of them)
/// around the middle of the middle slice.
pub fn estimate_egomotion(
    slices: &[EventSlice],
    depth: Option<&DepthMap>,
    k: &CameraIntrinsics,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult> {
    cfg.validate()?;
    check_slices(slices, k)?;
    let total: usize = slices.iter().map(|s| s.len()).sum();
    if total < MIN_EVENTS {
        return Err(Error::InsufficientEvents {
            found: total,
            required: MIN_EVENTS,
        });
    }
    if slices[slices.len() / 2].is_empty() {
        return Err(Error::Empty("middle slice has no events".into()));
    }
    let depth = prepare_depth(depth, k, cfg)?;
    let obj = WarpObjective::new(
        slices,
        &depth,
        k,
        None,
        &cfg.weights,
        cfg.fine_dt,
        cfg.splat,
        cfg.pyramid_levels,
    )?
    .with_dropped_events_charged(true);
    let scale = obj
        .mean_event_depth()
        .ok_or_else(|| Error::NoValidDepth("no event falls on a pixel with depth".into()))?;
    let param = match cfg.mode {
        MotionModel::SixDof => Param::Six,
        MotionModel::FourDofPlanar => Param::FourPlanar,
    };
    let initial = cfg.initial.unwrap_or_default();
    let best = multistart(&obj, param, scale, initial, cfg);
    Ok(EstimateResult {
        diagnostics: obj.diagnostics(&best.pose),
        pose: best.pose,
        objective: best.objective,
        iterations: best.iterations,
        evaluations: best.evaluations,
        converged: best.converged,
        history: best.history,
    })
}

/// Residual translation of the object covering `mask`, with the camera
/// motion fixed to `ego`.
pub fn estimate_object_velocity(
    slices: &[EventSlice],
    depth: Option<&DepthMap>,
    k: &CameraIntrinsics,
    ego: Pose6,
    mask: &Grid<bool>,
    cfg: &EstimatorConfig,
) -> Result<ObjectEstimate> {
    cfg.validate()?;
    check_slices(slices, k)?;
    if !mask.as_slice().iter().any(|&m| m) {
        return Err(Error::Empty("object mask is empty".into()));
    }
    let depth = prepare_depth(depth, k, cfg)?;
    let obj = WarpObjective::new(
        slices,
        &depth,
        k,
        Some(mask),
        &cfg.weights,
        cfg.fine_dt,
        cfg.splat,
        cfg.pyramid_levels,
    )?
    .with_dropped_events_charged(true);
    if obj.events_with_depth() < MIN_OBJECT_EVENTS {
        return Err(Error::InsufficientEvents {
            found: obj.events_with_depth(),
            required: MIN_OBJECT_EVENTS,
        });
    }
    let scale = obj.mean_event_depth().expect("events present");
    let param = Param::Object(ego);
    let best = multistart(&obj, param, scale, ego, cfg);
    Ok(ObjectEstimate {
        translation: best.pose.v - ego.v,
        objective: best.objective,
        iterations: best.iterations,
        evaluations: best.evaluations,
        converged: best.converged,
        events_used: obj.events_with_depth(),
        diagnostics: obj.diagnostics(&best.pose),
        history: best.history,
    })
}

/// Full-resolution objective at every pose, evaluated in parallel.
pub fn evaluate_poses(obj: &WarpObjective, poses: &[Pose6]) -> Vec<f64> {
    poses.par_iter().map_init(|| obj.clone(), |o, p| o.eval(p)).collect()
}

/// Poses `center + sum_i o_i * step_i * e_i` for offsets `o_i` in `offsets`.
pub fn pose_grid(center: &Pose6, step: &[f64; 6], offsets: &[f64]) -> Vec<Pose6> {
    let c = center.to_array();
    let m = offsets.len();
    let total = m.pow(6);
    (0..total)
        .map(|mut idx| {
            let mut p = c;
            for d in 0..6 {
                p[d] += offsets[idx % m] * step[d];
                idx /= m;
            }
            Pose6::from_array(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{slice_stream, Event, SensorSize};
    use crate::geometry::{flow_field, MixturePoseField};
    use crate::synth::{generate, textured_surface, Surface};

    fn scene_slices(ego: Pose6, points: usize) -> (Vec<EventSlice>, DepthMap, CameraIntrinsics) {
        let scene = generate(textured_surface(ego, Surface::fronto_parallel(2.0), points), 11).unwrap();
        let k = scene.spec.intrinsics;
        let sensor = scene.spec.sensor();
        let mut slices = slice_stream(&scene.events, 0.025, sensor).unwrap();
        slices.truncate(5);
        (slices, scene.depth, k)
    }

    fn dense(slices: &[EventSlice], depth: &DepthMap, k: &CameraIntrinsics, pose: Pose6, w: &LossWeights) -> f64 {
        let field = MixturePoseField::rigid(pose, k.width as usize, k.height as usize);
        let flow = flow_field(depth, &field, k).unwrap();
        dense_objective(slices, &flow, w, 0.001).unwrap()
    }

    #[test]
    fn event_objective_matches_dense_oracle() {
        let truth = Pose6::from_array([0.4, -0.3, 0.5, 0.6, -0.4, 1.2]);
        let (slices, depth, k) = scene_slices(truth, 120);
        let w = LossWeights::default();
        let mut obj = WarpObjective::new(&slices, &depth, &k, None, &w, 0.001, Splat::Nearest, 1).unwrap();
        for pose in [
            truth,
            Pose6::zero(),
            truth * 0.7,
            Pose6::from_array([-1.0, 0.2, 0.0, 0.3, 0.9, -2.0]),
        ] {
            let a = obj.eval(&pose);
            let b = dense(&slices, &depth, &k, pose, &w);
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn masked_objective_matches_dense_oracle_on_masked_events() {
        let truth = Pose6::from_array([0.4, -0.3, 0.5, 0.6, -0.4, 1.2]);
        let (slices, depth, k) = scene_slices(truth, 120);
        let mask = Grid::from_fn(k.width as usize, k.height as usize, |x, y| x < 200 && y > 60);
        let w = LossWeights::default();
        let mut obj = WarpObjective::new(&slices, &depth, &k, Some(&mask), &w, 0.001, Splat::Nearest, 1).unwrap();
        let masked: Vec<EventSlice> = slices
            .iter()
            .map(|s| {
                let evs = s
                    .events()
                    .iter()
                    .copied()
                    .filter(|e| *mask.get(e.x as usize, e.y as usize))
                    .collect();
                EventSlice::new(evs, s.t_start(), s.t_end(), s.sensor()).unwrap()
            })
            .collect();
        let a = obj.eval(&truth);
        let b = dense(&masked, &depth, &k, truth, &w);
        assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
    }

    #[test]
    fn true_pose_is_sharper_than_neighbours() {
        let truth = Pose6::from_array([0.5, 0.2, 0.4, 0.5, -0.8, 1.5]);
        let (slices, depth, k) = scene_slices(truth, 150);
        let mut obj = WarpObjective::new(
            &slices,
            &depth,
            &k,
            None,
            &LossWeights::default(),
            0.001,
            Splat::Nearest,
            1,
        )
        .unwrap();
        let f0 = obj.eval(&truth);
        let grid = pose_grid(&truth, &[0.0, 0.0, 0.0, 0.3, 0.3, 0.3], &[-1.0, 0.0, 1.0]);
        let values = evaluate_poses(&obj, &grid);
        for (p, f) in grid.iter().zip(&values) {
            if *p != truth {
                assert!(*f > f0, "{p:?}: {f} <= {f0}");
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let truth = Pose6::from_array([0.5, 0.2, 0.4, 0.5, -0.8, 1.5]);
        let (slices, depth, k) = scene_slices(truth, 80);
        let mut obj = WarpObjective::new(
            &slices,
            &depth,
            &k,
            None,
            &LossWeights::default(),
            0.001,
            Splat::Bilinear,
            3,
        )
        .unwrap();
        let p = truth * 0.9;
        let a = obj.eval_level(&p, 2);
        let b = obj.eval_level(&p, 2);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(obj.eval(&p).to_bits(), obj.clone().eval(&p).to_bits());
    }

    #[test]
    fn recovers_egomotion_deterministically() {
        let truth = Pose6::from_array([0.6, -0.3, 0.4, 0.4, 0.7, -1.0]);
        let (slices, depth, k) = scene_slices(truth, 250);
        let cfg = EstimatorConfig::default();
        let r = estimate_egomotion(&slices, Some(&depth), &k, &cfg).unwrap();
        assert!(
            (r.pose.omega - truth.omega).norm() < 0.05 * truth.omega.norm(),
            "{:?}",
            r.pose
        );
        assert!((r.pose.v - truth.v).norm() < 0.1 * truth.v.norm(), "{:?}", r.pose);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        let again = estimate_egomotion(&slices, Some(&depth), &k, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn input_errors() {
        let k = CameraIntrinsics::new(50.0, 50.0, 16.0, 12.0, 32, 24).unwrap();
        let sensor = SensorSize::new(32, 24);
        let depth = DepthMap::constant(32, 24, 1.0).unwrap();
        let mk = |n: usize, t0: f64| {
            let evs = (0..n)
                .map(|i| Event::new(t0 + i as f64 * 1e-4, 5, 5, Polarity::Positive))
                .collect();
            EventSlice::new(evs, t0, t0 + 0.025, sensor).unwrap()
        };
        let cfg = EstimatorConfig::default();
        let few = vec![mk(2, 0.0), mk(2, 0.025), mk(2, 0.05)];
        assert!(matches!(
            estimate_egomotion(&few, Some(&depth), &k, &cfg),
            Err(Error::InsufficientEvents { found: 6, .. })
        ));
        let hollow = vec![mk(20, 0.0), mk(0, 0.025), mk(20, 0.05)];
        assert!(matches!(
            estimate_egomotion(&hollow, Some(&depth), &k, &cfg),
            Err(Error::Empty(_))
        ));
        let ok = vec![mk(20, 0.0), mk(20, 0.025), mk(20, 0.05)];
        let blank = DepthMap::new(Grid::filled(32, 24, None)).unwrap();
        assert!(matches!(
            estimate_egomotion(&ok, Some(&blank), &k, &cfg),
            Err(Error::NoValidDepth(_))
        ));
        assert!(estimate_egomotion(&ok[..2], Some(&depth), &k, &cfg).is_err());

        let none = Grid::filled(32, 24, false);
        let r = estimate_object_velocity(&ok, Some(&depth), &k, Pose6::zero(), &none, &cfg);
        assert!(matches!(r, Err(Error::Empty(_))));
        let corner = Grid::from_fn(32, 24, |x, y| x == 5 && y == 5);
        let thin = vec![mk(5, 0.0), mk(5, 0.025), mk(5, 0.05)];
        let r = estimate_object_velocity(&thin, Some(&depth), &k, Pose6::zero(), &corner, &cfg);
        assert!(matches!(
            r,
            Err(Error::InsufficientEvents {
                found: 15,
                required: 20
            })
        ));
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("6dof".parse::<MotionModel>().unwrap(), MotionModel::SixDof);
        assert_eq!(
            "4dof-planar".parse::<MotionModel>().unwrap(),
            MotionModel::FourDofPlanar
        );
        assert!("3dof".parse::<MotionModel>().is_err());
        assert_eq!(
            serde_json::to_string(&MotionModel::FourDofPlanar).unwrap(),
            "\"4dof-planar\""
        );
        assert_eq!(
            "constant-plane".parse::<DepthSource>().unwrap(),
            DepthSource::ConstantPlane
        );
    }
}
