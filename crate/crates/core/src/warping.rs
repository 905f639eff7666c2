//! Motion-compensating inverse warping and the warp, mask and depth losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSlice, SliceMap};
use crate::geometry::{DepthMap, FlowField, MixturePoseField};
use crate::grid::Grid;

/// Lower clamp applied to the ego weight inside the mask cross-entropy.
pub const MASK_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpDiagnostics {
    pub events_in: usize,
    /// Events whose warped position fell outside the sensor.
    pub events_out_of_bounds: usize,
    /// Events dropped because the flow was undefined at their pixel.
    pub events_without_flow: usize,
    /// Mean displacement in pixels over events that had a flow vector.
    pub mean_displacement: f64,
}

impl WarpDiagnostics {
    pub fn events_kept(&self) -> usize {
        self.events_in - self.events_out_of_bounds - self.events_without_flow
    }

    pub fn merge(&self, other: &WarpDiagnostics) -> WarpDiagnostics {
        let moved_a = self.events_in - self.events_without_flow;
        let moved_b = other.events_in - other.events_without_flow;
        let moved = moved_a + moved_b;
        let mean = if moved == 0 {
            0.0
        } else {
            (self.mean_displacement * moved_a as f64 + other.mean_displacement * moved_b as f64) / moved as f64
        };
        WarpDiagnostics {
            events_in: self.events_in + other.events_in,
            events_out_of_bounds: self.events_out_of_bounds + other.events_out_of_bounds,
            events_without_flow: self.events_without_flow + other.events_without_flow,
            mean_displacement: mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_coarse: f64,
    pub w_fine: f64,
    pub w_depth: f64,
    pub w_mask: f64,
    pub w_smooth_mask: f64,
    pub w_smooth_depth: f64,
    /// Quasi-norm exponent, `0 < p < 1`.
    pub p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_coarse: 1.0,
            w_fine: 1.0,
            w_depth: 1.0,
            w_mask: 1.0,
            w_smooth_mask: 0.1,
            w_smooth_depth: 0.1,
            p: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_exponent(self.p)?;
        let ws = [
            self.w_coarse,
            self.w_fine,
            self.w_depth,
            self.w_mask,
            self.w_smooth_mask,
            self.w_smooth_depth,
        ];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative: {ws:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_exponent(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "quasi-norm exponent must be in (0, 1), got {p}"
        )))
    }
}

fn check_flow(slice: &EventSlice, flow: &FlowField) -> Result<()> {
    let s = slice.sensor();
    if flow.dims() != (s.width as usize, s.height as usize) {
        return Err(Error::Geometry(format!(
            "flow {:?} vs sensor {}x{}",
            flow.dims(),
            s.width,
            s.height
        )));
    }
    Ok(())
}

/// Moves each event along the flow at its pixel by `-u * lag(event)`, rounds
/// to the nearest pixel and keeps the events that stay on the sensor.
fn displace(
    slice: &EventSlice,
    flow: &FlowField,
    lag: impl Fn(&Event) -> f64,
    retime: impl Fn(f64) -> f64,
) -> (Vec<Event>, WarpDiagnostics) {
    let s = slice.sensor();
    let mut out = Vec::with_capacity(slice.len());
    let mut diag = WarpDiagnostics {
        events_in: slice.len(),
        ..Default::default()
    };
    let mut total_disp = 0.0;
    for e in slice.events() {
        let Some([u, v]) = flow.get(e.x as usize, e.y as usize) else {
            diag.events_without_flow += 1;
            continue;
        };
        let dt = lag(e);
        let (dx, dy) = (u * dt, v * dt);
        total_disp += dx.hypot(dy);
        let nx = (e.x as f64 - dx).round();
        let ny = (e.y as f64 - dy).round();
        if nx < 0.0 || ny < 0.0 || nx >= s.width as f64 || ny >= s.height as f64 {
            diag.events_out_of_bounds += 1;
            continue;
        }
        out.push(Event::new(retime(e.t), nx as u16, ny as u16, e.polarity));
    }
    let moved = diag.events_in - diag.events_without_flow;
    if moved > 0 {
        diag.mean_displacement = total_disp / moved as f64;
    }
    (out, diag)
}

/// Inverse-warps every event to time `t_ref`: an event at `(x, y, t)` moves to
/// `(x - u*(t - t_ref), y - v*(t - t_ref))` with `(u, v)` in pixels/s taken
/// at the event's pixel. Timestamps are kept.
pub fn warp_slice(slice: &EventSlice, flow: &FlowField, t_ref: f64) -> Result<(EventSlice, WarpDiagnostics)> {
    check_flow(slice, flow)?;
    let (events, diag) = displace(slice, flow, |e| e.t - t_ref, |t| t);
    Ok((
        EventSlice::new_unchecked(events, slice.t_start(), slice.t_end(), slice.sensor()),
        diag,
    ))
}

/// Carries a whole slice `shift` seconds back along the flow: positions move by
/// `-u*shift`, and timestamps and the window move by `-shift`. With
/// `shift = n * delta_t` this maps neighbour `n` onto the middle slice while
/// keeping each event's position within its window.
pub fn shift_slice(slice: &EventSlice, flow: &FlowField, shift: f64) -> Result<(EventSlice, WarpDiagnostics)> {
    check_flow(slice, flow)?;
    let (events, diag) = displace(slice, flow, |_| shift, |t| t - shift);
    let (t0, t1) = (slice.t_start() - shift, slice.t_end() - shift);
    let events = events
        .into_iter()
        .map(|mut e| {
            // Subtraction can push an event onto the open end; keep it inside.
            if e.t >= t1 {
                e.t = t1 - (t1 - t0) * f64::EPSILON;
            }
            e.t = e.t.max(t0);
            e
        })
        .collect();
    Ok((EventSlice::new_unchecked(events, t0, t1, slice.sensor()), diag))
}

/// Sum over neighbours, channels and pixels of `|warped - middle|`.
pub fn coarse_loss(warped_neighbors: &[SliceMap], middle: &SliceMap) -> Result<f64> {
    if !matches!(warped_neighbors.len(), 2 | 4) {
        return Err(Error::InvalidArgument(format!(
            "coarse loss needs 2 or 4 neighbours (K = 1 or 2), got {}",
            warped_neighbors.len()
        )));
    }
    let mut total = 0.0;
    for n in warped_neighbors {
        if n.dims() != middle.dims() {
            return Err(Error::Geometry(format!(
                "neighbour {:?} vs middle {:?}",
                n.dims(),
                middle.dims()
            )));
        }
        total += slice_map_l1(n, middle);
    }
    Ok(total)
}

pub(crate) fn slice_map_l1(a: &SliceMap, b: &SliceMap) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.pos_count.len() {
        sum += (a.pos_count[i] as f64 - b.pos_count[i] as f64).abs();
        sum += (a.neg_count[i] as f64 - b.neg_count[i] as f64).abs();
        sum += (a.time_agg[i] - b.time_agg[i]).abs();
    }
    sum
}

/// Pixel-wise stack `S` of all channels over the given maps.
pub fn stack_maps(maps: &[SliceMap]) -> Result<Grid<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("fine loss needs at least one slice".into()))?;
    let (w, h) = first.dims();
    let mut s = Grid::filled(w, h, 0.0);
    for m in maps {
        if m.dims() != (w, h) {
            return Err(Error::Geometry(format!("stack slice {:?} vs {:?}", m.dims(), (w, h))));
        }
        for i in 0..s.len() {
            s[i] += m.pos_count[i] as f64 + m.neg_count[i] as f64 + m.time_agg[i].abs();
        }
    }
    Ok(s)
}

/// `sum_i |x_i|^p`, the p-th power of the quasi-norm.
pub fn quasi_norm_p(values: &[f64], p: f64) -> f64 {
    values.iter().filter(|v| **v != 0.0).map(|v| v.abs().powf(p)).sum()
}

/// Sharpness of a stack of warped fine slices: `sum_pixels S^p`. Lower is sharper.
pub fn fine_loss(warped_fine_slices: &[SliceMap], p: f64) -> Result<f64> {
    check_exponent(p)?;
    let s = stack_maps(warped_fine_slices)?;
    Ok(quasi_norm_p(s.as_slice(), p))
}

/// Sum of absolute forward differences along x and y.
pub fn gradient_l1(g: &Grid<f64>) -> f64 {
    let (w, h) = g.dims();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = *g.get(x, y);
            if x + 1 < w {
                sum += (g.get(x + 1, y) - c).abs();
            }
            if y + 1 < h {
                sum += (g.get(x, y + 1) - c).abs();
            }
        }
    }
    sum
}

/// Cross-entropy pushing the ego weight to 1 on background pixels, plus
/// first-order smoothness of every mixture weight image.
pub fn mask_loss(weights: &MixturePoseField, gt_background: &Grid<bool>, w_smooth_mask: f64) -> Result<f64> {
    if weights.dims() != gt_background.dims() {
        return Err(Error::Geometry(format!(
            "weights {:?} vs background mask {:?}",
            weights.dims(),
            gt_background.dims()
        )));
    }
    let mut bce = 0.0;
    for (i, &bg) in gt_background.as_slice().iter().enumerate() {
        if bg {
            let m0 = weights.weights_at(i)[0].clamp(MASK_EPS, 1.0);
            bce -= m0.ln();
        }
    }
    let smooth: f64 = (0..weights.components())
        .map(|j| gradient_l1(&weights.component_weights(j)))
        .sum();
    Ok(bce + w_smooth_mask * smooth)
}

/// Sum of `|laplacian|` over pixels whose 4-neighbourhood is valid.
pub fn laplacian_l1(depth: &DepthMap) -> f64 {
    let (w, h) = depth.dims();
    let mut sum = 0.0;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let vals = [
                depth.get(x, y),
                depth.get(x - 1, y),
                depth.get(x + 1, y),
                depth.get(x, y - 1),
                depth.get(x, y + 1),
            ];
            if let [Some(c), Some(l), Some(r), Some(u), Some(d)] = vals {
                sum += (l + r + u + d - 4.0 * c).abs();
            }
        }
    }
    sum
}

/// Pointwise depth deviation `max(t/p, p/t) + |p - t| / t`.
#[inline]
pub fn depth_deviation(predict: f64, truth: f64) -> f64 {
    (truth / predict).max(predict / truth) + (predict - truth).abs() / truth
}

/// Mean depth deviation over shared valid pixels plus second-order smoothness
/// of the prediction. Its floor is 1, reached when `predict == truth`.
pub fn depth_loss(predict: &DepthMap, truth: &DepthMap, w_smooth_depth: f64) -> Result<f64> {
    if predict.dims() != truth.dims() {
        return Err(Error::Geometry(format!(
            "predict {:?} vs truth {:?}",
            predict.dims(),
            truth.dims()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in predict.grid().as_slice().iter().zip(truth.grid().as_slice()) {
        if let (Some(p), Some(t)) = (p, t) {
            sum += depth_deviation(*p, *t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidDepth("no pixel is valid in both depth maps".into()));
    }
    Ok(sum / n as f64 + w_smooth_depth * laplacian_l1(predict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{project_slice, Polarity, SensorSize};

    fn sensor() -> SensorSize {
        SensorSize::new(20, 10)
    }

    fn slice(events: Vec<Event>) -> EventSlice {
        EventSlice::new(events, 0.0, 1.0, sensor()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let s = slice(vec![
            Event::new(0.1, 3, 3, Polarity::Positive),
            Event::new(0.7, 19, 9, Polarity::Negative),
        ]);
        let (w, d) = warp_slice(&s, &FlowField::uniform(20, 10, 0.0, 0.0), 0.5).unwrap();
        assert_eq!(w, s);
        assert_eq!(d.events_out_of_bounds, 0);
        assert_eq!(d.mean_displacement, 0.0);
    }

    #[test]
    fn constant_flow_displacement() {
        let s = slice(vec![Event::new(0.6, 5, 5, Polarity::Positive)]);
        let (w, d) = warp_slice(&s, &FlowField::uniform(20, 10, 10.0, 0.0), 0.5).unwrap();
        assert_eq!(w.events()[0].x, 4);
        assert_eq!(w.events()[0].y, 5);
        assert_eq!(w.events()[0].t, 0.6);
        assert!((d.mean_displacement - 1.0).abs() < 1e-12);
    }

    #[test]
    fn events_leaving_sensor_are_dropped() {
        let s = slice(vec![
            Event::new(0.6, 0, 5, Polarity::Positive),
            Event::new(0.6, 8, 5, Polarity::Positive),
        ]);
        let (w, d) = warp_slice(&s, &FlowField::uniform(20, 10, 10.0, 0.0), 0.5).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(d.events_out_of_bounds, 1);
        assert_eq!(d.events_kept(), 1);
        assert!(d.events_out_of_bounds <= d.events_in);
    }

    #[test]
    fn flow_geometry_must_match() {
        let s = slice(vec![]);
        assert!(matches!(
            warp_slice(&s, &FlowField::uniform(21, 10, 0.0, 0.0), 0.0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn shift_maps_neighbour_window_onto_middle() {
        let s = EventSlice::new(vec![Event::new(1.25, 5, 5, Polarity::Positive)], 1.0, 2.0, sensor()).unwrap();
        let (w, _) = shift_slice(&s, &FlowField::uniform(20, 10, 2.0, -1.0), 1.0).unwrap();
        assert_eq!((w.t_start(), w.t_end()), (0.0, 1.0));
        assert_eq!(w.events()[0].t, 0.25);
        assert_eq!((w.events()[0].x, w.events()[0].y), (3, 6));
    }

    fn map_with(count: u32, at: (usize, usize)) -> SliceMap {
        let mut m = SliceMap::zeros(4, 4);
        *m.pos_count.get_mut(at.0, at.1) = count;
        m
    }

    #[test]
    fn coarse_loss_examples() {
        let mid = map_with(2, (1, 1));
        assert_eq!(coarse_loss(&[mid.clone(), mid.clone()], &mid).unwrap(), 0.0);
        assert_eq!(coarse_loss(&[map_with(3, (1, 1)), mid.clone()], &mid).unwrap(), 1.0);

        let mut off = mid.clone();
        *off.neg_count.get_mut(0, 0) = 2;
        *off.time_agg.get_mut(2, 2) = 0.5;
        let d = slice_map_l1(&off, &mid);
        assert_eq!(d, 2.5);
        let four = vec![off.clone(), off.clone(), off.clone(), off];
        assert_eq!(coarse_loss(&four, &mid).unwrap(), 4.0 * d);

        assert!(coarse_loss(&[mid.clone()], &mid).is_err());
        assert!(coarse_loss(&[mid.clone(), mid.clone(), mid.clone()], &mid).is_err());
        assert!(matches!(
            coarse_loss(&[SliceMap::zeros(3, 4), mid.clone()], &mid),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn coarse_loss_symmetric() {
        let a = map_with(3, (0, 1));
        let b = map_with(1, (2, 1));
        assert_eq!(
            coarse_loss(&[a.clone(), a.clone()], &b).unwrap(),
            coarse_loss(&[b.clone(), b.clone()], &a).unwrap()
        );
    }

    #[test]
    fn fine_loss_examples() {
        assert_eq!(fine_loss(&[SliceMap::zeros(3, 3)], 0.5).unwrap(), 0.0);
        assert_eq!(fine_loss(&[map_with(4, (0, 0))], 0.5).unwrap(), 2.0);
        let spread = [map_with(2, (0, 0)), map_with(2, (3, 3))];
        assert_eq!(fine_loss(&spread, 0.5).unwrap(), 2.0 * 2f64.sqrt());
        // Mass stacked from two slices onto one pixel.
        let stacked = [map_with(2, (0, 0)), map_with(2, (0, 0))];
        assert_eq!(fine_loss(&stacked, 0.5).unwrap(), 2.0);

        assert!(fine_loss(&[], 0.5).is_err());
        assert!(fine_loss(&[map_with(1, (0, 0))], 1.0).is_err());
        assert!(fine_loss(&[map_with(1, (0, 0))], 0.0).is_err());
    }

    #[test]
    fn fine_loss_counts_time_channel() {
        let s = EventSlice::new(
            vec![Event::new(0.5, 1, 1, Polarity::Negative)],
            0.0,
            1.0,
            SensorSize::new(3, 3),
        )
        .unwrap();
        let m = project_slice(&s);
        assert_eq!(fine_loss(&[m], 0.5).unwrap(), 1.5f64.sqrt());
    }

    fn field(m0: &[f64]) -> MixturePoseField {
        let weights: Vec<f64> = m0.iter().flat_map(|&m| [m, 1.0 - m]).collect();
        MixturePoseField::new(
            crate::geometry::Pose6::zero(),
            vec![nalgebra::Vector3::zeros()],
            m0.len(),
            1,
            weights,
        )
        .unwrap()
    }

    #[test]
    fn mask_loss_examples() {
        let bg = Grid::filled(3, 1, true);
        assert_eq!(mask_loss(&field(&[1.0, 1.0, 1.0]), &bg, 0.5).unwrap(), 0.0);

        let e1 = (-1.0f64).exp();
        let one = Grid::filled(1, 1, true);
        assert!((mask_loss(&field(&[e1]), &one, 0.5).unwrap() - 1.0).abs() < 1e-15);

        let got = mask_loss(&field(&[0.0]), &one, 0.5).unwrap();
        assert!(got.is_finite());
        assert!((got + MASK_EPS.ln()).abs() < 1e-12);

        // Non-background pixels do not enter the cross-entropy.
        let fg = Grid::filled(1, 1, false);
        assert_eq!(mask_loss(&field(&[0.0]), &fg, 0.5).unwrap(), 0.0);

        // Smoothness: a 1 -> 0 step in m0 (and 0 -> 1 in m1) costs 2 * w.
        let step = mask_loss(&field(&[1.0, 0.0]), &Grid::filled(2, 1, false), 0.25).unwrap();
        assert_eq!(step, 0.5);

        assert!(mask_loss(&field(&[1.0]), &bg, 0.0).is_err());
    }

    #[test]
    fn depth_loss_examples() {
        let x = DepthMap::constant(5, 4, 1.7).unwrap();
        assert_eq!(depth_loss(&x, &x, 0.3).unwrap(), 1.0);
        assert_eq!(depth_deviation(2.0, 1.0), 3.0);
        assert_eq!(depth_deviation(0.5, 1.0), 2.5);

        let p = DepthMap::constant(1, 1, 2.0).unwrap();
        let t = DepthMap::constant(1, 1, 1.0).unwrap();
        assert_eq!(depth_loss(&p, &t, 0.0).unwrap(), 3.0);
        let p = DepthMap::constant(1, 1, 0.5).unwrap();
        assert_eq!(depth_loss(&p, &t, 0.0).unwrap(), 2.5);

        let none = DepthMap::from_raw(1, 1, &[0.0]).unwrap();
        assert!(depth_loss(&none, &t, 0.0).is_err());
    }

    #[test]
    fn depth_smoothness_penalizes_curvature() {
        let bump = DepthMap::new(Grid::from_fn(3, 3, |x, y| {
            Some(if (x, y) == (1, 1) { 2.0 } else { 1.0 })
        }))
        .unwrap();
        assert_eq!(laplacian_l1(&bump), 4.0);
        let ramp = DepthMap::new(Grid::from_fn(3, 3, |x, _| Some(1.0 + x as f64))).unwrap();
        assert_eq!(laplacian_l1(&ramp), 0.0);
    }
}
