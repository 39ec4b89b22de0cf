//! Stage 2: joint refinement of camera poses and a world-centric static
//! model (per-track anchor plus per-frame offsets), followed by
//! reclassification of tracks whose offsets reveal hidden motion.
//!
//! The objective is lambda_ba * L_ba + lambda_dc * L_dc + lambda_asap *
//! L_asap: reprojection against the 2D tracks, camera-frame depth against
//! the input depths, and an L1 penalty keeping offsets as small as the
//! data allows. The first frame's pose stays frozen as the gauge.

use nalgebra::Vector3;

use crate::geometry::{dcam_dpose_rot, unproject, CameraModel, PoseSE3, Z_MIN};
use crate::solver::{minimize, Objective, ParamBlocks, SolverError};
use crate::tensorio::PipelineConfig;
use crate::trackset::TrackSet2D;

#[derive(thiserror::Error, Debug)]
pub enum RefineError {
    #[error("track {0} has no usable visible frame")]
    NoVisibleFrames(usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// World-centric static model: per-track anchor and per-frame offsets;
/// the modeled position is `anchor(i) + offset(i, t)`.
#[derive(Debug, Clone)]
pub struct StaticModel {
    pub anchors: Vec<Vector3<f64>>,
    /// N x T row-major.
    pub offsets: Vec<Vector3<f64>>,
    pub t: usize,
}

impl StaticModel {
    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    pub fn position(&self, i: usize, t: usize) -> Vector3<f64> {
        self.anchors[i] + self.offsets[i * self.t + t]
    }

    pub fn offset(&self, i: usize, t: usize) -> Vector3<f64> {
        self.offsets[i * self.t + t]
    }

    /// Largest per-frame offset norm of track `i`.
    pub fn max_offset_norm(&self, i: usize) -> f64 {
        (0..self.t)
            .map(|t| self.offset(i, t).norm())
            .fold(0.0, f64::max)
    }
}

/// Anchor each track at the mean of its visible back-projections; offsets
/// start at zero.
pub fn init_static_anchors(
    tracks: &TrackSet2D,
    depths: &[f64],
    poses: &[PoseSE3],
    cam: &CameraModel,
) -> Result<StaticModel, RefineError> {
    let tn = tracks.t;
    let mut anchors = Vec::with_capacity(tracks.n);
    for i in 0..tracks.n {
        let mut acc = Vector3::zeros();
        let mut count = 0.0;
        for t in 0..tn {
            if !tracks.visible(i, t) || depths[i * tn + t] <= 0.0 {
                continue;
            }
            let x = unproject(&poses[t], cam, tracks.pos(i, t), depths[i * tn + t])
                .expect("positive depth checked");
            acc += x;
            count += 1.0;
        }
        if count == 0.0 {
            return Err(RefineError::NoVisibleFrames(i));
        }
        anchors.push(acc / count);
    }
    Ok(StaticModel {
        anchors,
        offsets: vec![Vector3::zeros(); tracks.n * tn],
        t: tn,
    })
}

/// Reprojection loss over visible (track, frame) pairs. Points behind the
/// camera are charged a fixed penalty of `(10 x image diagonal)^2`.
pub fn loss_ba(
    model: &StaticModel,
    poses: &[PoseSE3],
    cam: &CameraModel,
    tracks: &TrackSet2D,
    image_diag: f64,
) -> f64 {
    let clamp = 10.0 * image_diag;
    let mut loss = 0.0;
    for i in 0..model.n() {
        for t in 0..model.t {
            if !tracks.visible(i, t) {
                continue;
            }
            let xc = poses[t].transform(&model.position(i, t));
            if xc.z <= Z_MIN {
                loss += clamp * clamp;
            } else {
                loss += (cam.project_cam(&xc) - tracks.pos(i, t)).norm_squared();
            }
        }
    }
    loss
}

/// Depth consistency loss: squared error between the modeled camera-frame
/// depth and the input per-track depth, over visible pairs.
pub fn loss_dc(model: &StaticModel, poses: &[PoseSE3], tracks: &TrackSet2D, depths: &[f64]) -> f64 {
    let mut loss = 0.0;
    for i in 0..model.n() {
        for t in 0..model.t {
            if !tracks.visible(i, t) || depths[i * model.t + t] <= 0.0 {
                continue;
            }
            let d = poses[t].transform(&model.position(i, t)).z;
            let r = d - depths[i * model.t + t];
            loss += r * r;
        }
    }
    loss
}

/// As-static-as-possible loss: L1 norm of every offset component.
pub fn loss_asap(model: &StaticModel) -> f64 {
    model
        .offsets
        .iter()
        .map(|o| o.x.abs() + o.y.abs() + o.z.abs())
        .sum()
}

/// Joint Stage 2 objective. Parameter layout: poses 0..T (pose 0 frozen),
/// points = anchors 0..N followed by offsets N..N+N*T.
pub struct StaticRefineObjective<'a> {
    pub tracks: &'a TrackSet2D,
    pub depths: &'a [f64],
    pub cam: &'a CameraModel,
    pub lambda_ba: f64,
    pub lambda_dc: f64,
    pub lambda_asap: f64,
    pub clamp: f64,
    pub n: usize,
}

impl StaticRefineObjective<'_> {
    fn position(&self, params: &ParamBlocks, i: usize, t: usize) -> Vector3<f64> {
        params.points[i] + params.points[self.n + i * self.tracks.t + t]
    }
}

impl Objective for StaticRefineObjective<'_> {
    fn eval(&self, params: &ParamBlocks) -> f64 {
        let tn = self.tracks.t;
        let mut loss = 0.0;
        for i in 0..self.n {
            for t in 0..tn {
                let o = params.points[self.n + i * tn + t];
                loss += self.lambda_asap * (o.x.abs() + o.y.abs() + o.z.abs());
                if !self.tracks.visible(i, t) {
                    continue;
                }
                let x = self.position(params, i, t);
                let xc = params.poses[t].transform(&x);
                if xc.z <= Z_MIN {
                    loss += self.lambda_ba * self.clamp * self.clamp;
                } else {
                    let r = self.cam.project_cam(&xc) - self.tracks.pos(i, t);
                    loss += self.lambda_ba * r.norm_squared();
                }
                if self.depths[i * tn + t] > 0.0 {
                    let rd = xc.z - self.depths[i * tn + t];
                    loss += self.lambda_dc * rd * rd;
                }
            }
        }
        loss
    }

    fn eval_grad(&self, params: &ParamBlocks, grad: &mut [f64]) -> f64 {
        let tn = self.tracks.t;
        let off = params.point_offset();
        let mut loss = 0.0;
        for i in 0..self.n {
            for t in 0..tn {
                let oidx = self.n + i * tn + t;
                let o = params.points[oidx];
                loss += self.lambda_asap * (o.x.abs() + o.y.abs() + o.z.abs());
                for k in 0..3 {
                    // subgradient with sign(0) = 0
                    grad[off + oidx * 3 + k] += self.lambda_asap * sign0(o[k]);
                }
                if !self.tracks.visible(i, t) {
                    continue;
                }
                let x = self.position(params, i, t);
                let pose = &params.poses[t];
                let xc = pose.transform(&x);
                let rot = pose.rotation_matrix();
                if xc.z <= Z_MIN {
                    loss += self.lambda_ba * self.clamp * self.clamp;
                    continue;
                }
                let jrot = dcam_dpose_rot(&xc);
                // reprojection
                let r = self.cam.project_cam(&xc) - self.tracks.pos(i, t);
                loss += self.lambda_ba * r.norm_squared();
                let g = 2.0 * self.lambda_ba * (r.transpose() * self.cam.project_cam_jacobian(&xc));
                let gx = g * rot; // 1x3 against the world point
                for k in 0..3 {
                    grad[t * 6 + k] += (g * jrot.column(k)).x;
                    grad[t * 6 + 3 + k] += g[k];
                    grad[off + i * 3 + k] += gx[k];
                    grad[off + oidx * 3 + k] += gx[k];
                }
                // depth consistency
                if self.depths[i * tn + t] > 0.0 {
                    let rd = xc.z - self.depths[i * tn + t];
                    loss += self.lambda_dc * rd * rd;
                    let gd = 2.0 * self.lambda_dc * rd;
                    for k in 0..3 {
                        grad[t * 6 + k] += gd * jrot[(2, k)];
                        grad[off + i * 3 + k] += gd * rot[(2, k)];
                        grad[off + oidx * 3 + k] += gd * rot[(2, k)];
                    }
                    grad[t * 6 + 5] += gd;
                }
            }
        }
        loss
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Stage 2 driver with the offset block optionally frozen (used by the
/// pure-BA ablation); `refine_static` is the normal entry point.
pub fn refine_static_opts(
    model: &StaticModel,
    poses: &[PoseSE3],
    tracks: &TrackSet2D,
    depths: &[f64],
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
    freeze_offsets: bool,
) -> Result<(Vec<PoseSE3>, StaticModel, Vec<f64>), RefineError> {
    let n = model.n();
    let tn = model.t;
    let mut points = model.anchors.clone();
    points.extend_from_slice(&model.offsets);
    let mut params = ParamBlocks::new(poses.to_vec(), points);
    params.pose_frozen[0] = true;
    if freeze_offsets {
        for b in params.point_frozen[n..].iter_mut() {
            *b = true;
        }
    }
    let objective = StaticRefineObjective {
        tracks,
        depths,
        cam,
        lambda_ba: cfg.lambda_ba,
        lambda_dc: cfg.lambda_dc,
        lambda_asap: cfg.lambda_asap,
        clamp: 10.0 * image_diag,
        n,
    };
    // Warm-up: with the offsets free, let them absorb the residuals of
    // unlabeled movers before the cameras are allowed to move; otherwise the
    // contaminated terms drag the poses off a good initialization in the
    // first iterations and the offsets later explain the damage away,
    // leaving no pose gradient to recover from.
    let mut history = Vec::new();
    if !freeze_offsets {
        let mut warm = params.clone();
        warm.pose_frozen.iter_mut().for_each(|b| *b = true);
        for b in warm.point_frozen[..n].iter_mut() {
            *b = true;
        }
        let mut warm_cfg = cfg.solver.clone();
        warm_cfg.max_iters = (cfg.solver.max_iters / 4).max(1);
        let warm_result = minimize(&objective, warm, &warm_cfg)?;
        params.points = warm_result.params.points;
        history = warm_result.history;
    }
    let result = minimize(&objective, params, &cfg.solver)?;
    let refined = StaticModel {
        anchors: result.params.points[..n].to_vec(),
        offsets: result.params.points[n..].to_vec(),
        t: tn,
    };
    history.extend_from_slice(&result.history);
    Ok((result.params.poses, refined, history))
}

pub fn refine_static(
    model: &StaticModel,
    poses: &[PoseSE3],
    tracks: &TrackSet2D,
    depths: &[f64],
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
) -> Result<(Vec<PoseSE3>, StaticModel), RefineError> {
    let (poses, model, _) =
        refine_static_opts(model, poses, tracks, depths, cam, cfg, image_diag, false)?;
    Ok((poses, model))
}

/// Tracks whose largest per-frame offset norm reaches `epsilon` are
/// reclassified as dynamic background.
pub fn classify_dynamic_background(model: &StaticModel, epsilon: f64) -> Vec<bool> {
    (0..model.n())
        .map(|i| model.max_offset_norm(i) >= epsilon)
        .collect()
}
