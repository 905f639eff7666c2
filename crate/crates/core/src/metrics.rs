//! Evaluation metrics: endpoint error, relative rotation error, mask IoU and
//! the standard monocular depth error and accuracy measures.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::grid::Grid;

/// Mean of `|s * pred - gt|`. With `scale_from_gt` the scale `s` is the
/// least-squares fit `sum<pred, gt> / sum<pred, pred>`, otherwise 1.
pub fn aee(pred: &[Vector3<f64>], gt: &[Vector3<f64>], scale_from_gt: bool) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground-truth vectors",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no velocity vectors to compare".into()));
    }
    let s = if scale_from_gt { ls_scale(pred, gt)? } else { 1.0 };
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| (p * s - g).norm()).sum();
    Ok(total / pred.len() as f64)
}

/// Least-squares scale aligning `pred` to `gt`.
pub fn ls_scale(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let pp: f64 = pred.iter().map(|p| p.dot(p)).sum();
    if pp == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot fit a scale to all-zero predictions".into(),
        ));
    }
    let pg: f64 = pred.iter().zip(gt).map(|(p, g)| p.dot(g)).sum();
    Ok(pg / pp)
}

fn check_rotation(r: &Matrix3<f64>, what: &str) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= 1e-6) || !((r.determinant() - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidRotation(format!(
            "{what} is not a proper rotation (orthonormality error {err:e})"
        )));
    }
    Ok(())
}

/// Rotation angle of `r` in `[0, pi]`, accurate for small angles.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let sin_axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) / 2.0;
    sin_axis.norm().atan2(cos)
}

/// Geodesic distance between rotations: the axis-angle magnitude of
/// `R_pred^T R_gt`. The Frobenius norm of the matrix logarithm is
/// `FROBENIUS_PER_AXIS_ANGLE` times this value.
pub fn rre(r_pred: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r_pred, "predicted rotation")?;
    check_rotation(r_gt, "ground-truth rotation")?;
    Ok(rotation_angle(&(r_pred.transpose() * r_gt)))
}

pub const FROBENIUS_PER_AXIS_ANGLE: f64 = std::f64::consts::SQRT_2;

pub fn rre_quat(q_pred: &UnitQuaternion<f64>, q_gt: &UnitQuaternion<f64>) -> Result<f64> {
    rre(q_pred.to_rotation_matrix().matrix(), q_gt.to_rotation_matrix().matrix())
}

/// Rotation error between two angular velocities, in rad/s: each is
/// integrated over `dt` seconds and the geodesic angle is divided by `dt`.
pub fn rre_rate(omega_pred: &Vector3<f64>, omega_gt: &Vector3<f64>, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "integration interval must be positive, got {dt}"
        )));
    }
    let rp = UnitQuaternion::from_scaled_axis(omega_pred * dt);
    let rg = UnitQuaternion::from_scaled_axis(omega_gt * dt);
    Ok(rre_quat(&rp, &rg)? / dt)
}

/// IoU of `{pred >= threshold}` against `gt`; 1 when both sets are empty.
pub fn iou(pred_weights: &Grid<f64>, gt_mask: &Grid<bool>, threshold: f64) -> Result<f64> {
    pred_weights.check_dims(gt_mask, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, &g) in pred_weights.as_slice().iter().zip(gt_mask.as_slice()) {
        let p = *p >= threshold;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    Median,
    Mean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse_log: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    /// Per-field mean, each frame weighted equally.
    pub fn mean(frames: &[DepthMetrics]) -> Option<DepthMetrics> {
        if frames.is_empty() {
            return None;
        }
        let n = frames.len() as f64;
        let sum = |f: fn(&DepthMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        Some(DepthMetrics {
            abs_rel: sum(|m| m.abs_rel),
            rmse_log: sum(|m| m.rmse_log),
            silog: sum(|m| m.silog),
            delta1: sum(|m| m.delta1),
            delta2: sum(|m| m.delta2),
            delta3: sum(|m| m.delta3),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionMetrics {
    /// m/s
    pub aee: f64,
    /// rad/s
    pub rre: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Shared valid pixels as `(pred, gt)` pairs.
pub fn shared_valid(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<(f64, f64)>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Geometry(format!("pred {:?} vs gt {:?}", pred.dims(), gt.dims())));
    }
    let pairs: Vec<(f64, f64)> = pred
        .grid()
        .as_slice()
        .iter()
        .zip(gt.grid().as_slice())
        .filter_map(|(p, g)| Some(((*p)?, (*g)?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoValidDepth(
            "prediction and ground truth share no valid pixel".into(),
        ));
    }
    Ok(pairs)
}

/// Factor applied to the prediction before scoring.
pub fn alignment_scale(pairs: &[(f64, f64)], alignment: Alignment) -> f64 {
    match alignment {
        Alignment::None => 1.0,
        Alignment::Mean => {
            let (sp, sg) = pairs.iter().fold((0.0, 0.0), |(a, b), (p, g)| (a + p, b + g));
            sg / sp
        }
        Alignment::Median => {
            let mut p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let mut g: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            median(&mut g) / median(&mut p)
        }
    }
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, alignment: Alignment) -> Result<DepthMetrics> {
    let pairs = shared_valid(pred, gt)?;
    let s = alignment_scale(&pairs, alignment);
    let n = pairs.len() as f64;
    let (mut abs_rel, mut d_sum, mut d2_sum) = (0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for &(p, g) in &pairs {
        let p = p * s;
        abs_rel += (p - g).abs() / g;
        let d = p.ln() - g.ln();
        d_sum += d;
        d2_sum += d * d;
        let ratio = (p / g).max(g / p);
        for (count, th) in within.iter_mut().zip(thresholds) {
            if ratio < th {
                *count += 1;
            }
        }
    }
    let mean_d = d_sum / n;
    let mean_d2 = d2_sum / n;
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        rmse_log: mean_d2.sqrt(),
        silog: (mean_d2 - mean_d * mean_d).max(0.0),
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
    })
}
