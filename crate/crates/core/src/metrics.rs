//! Evaluation metrics: trajectory errors after similarity alignment, depth
//! accuracy under a global scale-and-shift fit, sparse 3D tracking scores,
//! and long-range flow errors.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::PoseSE3;

/// Threshold ladder for the 3D tracking scores, as fractions of the scene
/// scale.
pub const TRACK3D_THRESHOLDS: [f64; 5] = [0.01, 0.02, 0.04, 0.08, 0.16];

#[derive(thiserror::Error, Debug)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("degenerate scale/shift fit: inputs have no spread")]
    DegenerateFit,
}

/// Flat metric report; only the populated entries are serialized.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Meters, after similarity alignment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate: Option<f64>,
    /// Meters, per consecutive-frame motion.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rte: Option<f64>,
    /// Degrees, per consecutive-frame motion.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_rel: Option<f64>,
    /// Percentage in [0, 100].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_125: Option<f64>,
    /// Percentage in [0, 100].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aj: Option<f64>,
    /// Percentage in [0, 100].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apd3d: Option<f64>,
    /// Percentage in [0, 100].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oa: Option<f64>,
    /// Pixels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe: Option<f64>,
    /// Percentage in [0, 100].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

/// Least-squares similarity (scale, rotation, translation) mapping `src`
/// onto `dst` (Umeyama's method).
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<(f64, UnitQuaternion<f64>, Vector3<f64>), MetricsError> {
    if src.len() != dst.len() {
        return Err(MetricsError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_src = 0.0;
    for (a, b) in src.iter().zip(dst) {
        cov += (b - cd) * (a - cs).transpose();
        var_src += (a - cs).norm_squared();
    }
    cov /= n;
    var_src /= n;
    if var_src < 1e-18 {
        return Err(MetricsError::DegenerateFit);
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::<f64>::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (svd.singular_values[0] * s[(0, 0)]
        + svd.singular_values[1] * s[(1, 1)]
        + svd.singular_values[2] * s[(2, 2)])
        / var_src;
    let rot = UnitQuaternion::from_matrix(&r);
    let t = cd - scale * (rot * cs);
    Ok((scale, rot, t))
}

/// ATE (RMSE of camera centers after similarity alignment), RTE and RRE
/// (mean translation / rotation discrepancy of consecutive-frame relative
/// motions; the alignment scale is applied to the estimated translations).
pub fn traj_metrics(est: &[PoseSE3], gt: &[PoseSE3]) -> Result<(f64, f64, f64), MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 2 {
        return Err(MetricsError::LengthMismatch(est.len(), 2));
    }
    let c_est: Vec<Vector3<f64>> = est.iter().map(|p| p.center()).collect();
    let c_gt: Vec<Vector3<f64>> = gt.iter().map(|p| p.center()).collect();
    let (scale, rot, trans) = match umeyama(&c_est, &c_gt) {
        Ok(fit) => fit,
        // a stationary camera has no spread to align; fall back to rigid
        Err(MetricsError::DegenerateFit) => (1.0, UnitQuaternion::identity(), Vector3::zeros()),
        Err(e) => return Err(e),
    };
    let mut ate = 0.0;
    for (a, b) in c_est.iter().zip(&c_gt) {
        ate += (scale * (rot * a) + trans - b).norm_squared();
    }
    let ate = (ate / est.len() as f64).sqrt();

    let mut rte = 0.0;
    let mut rre = 0.0;
    for t in 0..est.len() - 1 {
        let de = est[t + 1].compose(&est[t].inverse());
        let dg = gt[t + 1].compose(&gt[t].inverse());
        rte += (scale * de.translation - dg.translation).norm();
        rre += de.rotation.angle_to(&dg.rotation).to_degrees();
    }
    let m = (est.len() - 1) as f64;
    Ok((ate, rte / m, rre / m))
}

/// Rasterize per-track depths onto the pixel grid (nearest pixel), keeping
/// the smaller depth where several tracks land on one pixel. Out-of-bounds
/// points are dropped; empty pixels are 0.
pub fn splat_track_depths(px: &[Vector2<f64>], depths: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for (p, &d) in px.iter().zip(depths) {
        if d <= 0.0 {
            continue;
        }
        let x = p.x.round();
        let y = p.y.round();
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let slot = y as usize * w + x as usize;
        if out[slot] == 0.0 || d < out[slot] {
            out[slot] = d;
        }
    }
    out
}

/// Abs Rel and delta < 1.25 after a single least-squares scale+shift fit of
/// the estimated depths onto ground truth. Pairs where either side is
/// non-positive are ignored.
pub fn depth_metrics(est: &[f64], gt: &[f64]) -> Result<(f64, f64), MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(est.len(), gt.len()));
    }
    let pairs: Vec<(f64, f64)> = est
        .iter()
        .zip(gt)
        .filter(|&(&e, &g)| e > 0.0 && g > 0.0)
        .map(|(&e, &g)| (e, g))
        .collect();
    if pairs.len() < 2 {
        return Err(MetricsError::DegenerateFit);
    }
    let n = pairs.len() as f64;
    let me = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(e, g) in &pairs {
        sxx += (e - me) * (e - me);
        sxy += (e - me) * (g - mg);
    }
    if sxx < 1e-18 {
        return Err(MetricsError::DegenerateFit);
    }
    let a = sxy / sxx;
    let b = mg - a * me;
    let mut abs_rel = 0.0;
    let mut hits = 0.0;
    for &(e, g) in &pairs {
        let d = a * e + b;
        abs_rel += (d - g).abs() / g;
        if d > 0.0 && (d / g).max(g / d) < 1.25 {
            hits += 1.0;
        }
    }
    Ok((abs_rel / n, 100.0 * hits / n))
}

/// 3D tracking scores over N x T row-major camera- or world-frame points.
/// Thresholds are `TRACK3D_THRESHOLDS x scene_scale`.
pub fn tracking3d_metrics(
    est_pos: &[Vector3<f64>],
    est_vis: &[bool],
    gt_pos: &[Vector3<f64>],
    gt_vis: &[bool],
    scene_scale: f64,
) -> Result<(f64, f64, f64), MetricsError> {
    if est_pos.len() != gt_pos.len() {
        return Err(MetricsError::LengthMismatch(est_pos.len(), gt_pos.len()));
    }
    if est_vis.len() != est_pos.len() || gt_vis.len() != gt_pos.len() {
        return Err(MetricsError::LengthMismatch(est_vis.len(), gt_vis.len()));
    }
    let mut aj_sum = 0.0;
    let mut apd_sum = 0.0;
    for &frac in &TRACK3D_THRESHOLDS {
        let thr = frac * scene_scale;
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        let mut within_vis = 0.0;
        let mut gt_visible = 0.0;
        for j in 0..est_pos.len() {
            let within = (est_pos[j] - gt_pos[j]).norm() < thr;
            if gt_vis[j] {
                gt_visible += 1.0;
                if within {
                    within_vis += 1.0;
                }
                if est_vis[j] && within {
                    tp += 1.0;
                } else {
                    fn_ += 1.0;
                }
            }
            if est_vis[j] && !(gt_vis[j] && within) {
                fp += 1.0;
            }
        }
        apd_sum += if gt_visible > 0.0 {
            within_vis / gt_visible
        } else {
            1.0
        };
        let denom = tp + fp + fn_;
        aj_sum += if denom > 0.0 { tp / denom } else { 1.0 };
    }
    let k = TRACK3D_THRESHOLDS.len() as f64;
    let oa =
        est_vis.iter().zip(gt_vis).filter(|&(a, b)| a == b).count() as f64 / est_vis.len() as f64;
    Ok((100.0 * aj_sum / k, 100.0 * apd_sum / k, 100.0 * oa))
}

/// Mean end-point error over all points and IoU (per cent) of the occluded
/// regions; an empty union counts as perfect agreement.
pub fn flow_metrics(
    est_flow: &[Vector2<f64>],
    gt_flow: &[Vector2<f64>],
    est_vis: &[bool],
    gt_vis: &[bool],
) -> Result<(f64, f64), MetricsError> {
    if est_flow.len() != gt_flow.len() || est_vis.len() != gt_vis.len() {
        return Err(MetricsError::ShapeMismatch(est_flow.len(), gt_flow.len()));
    }
    if est_flow.is_empty() {
        return Err(MetricsError::ShapeMismatch(0, 0));
    }
    let epe = est_flow
        .iter()
        .zip(gt_flow)
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / est_flow.len() as f64;
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&a, &b) in est_vis.iter().zip(gt_vis) {
        let (oa, ob) = (!a, !b);
        if oa && ob {
            inter += 1.0;
        }
        if oa || ob {
            union += 1.0;
        }
    }
    let iou = if union == 0.0 {
        100.0
    } else {
        100.0 * inter / union
    };
    Ok((epe, iou))
}
