//! Stage 1: clip-level camera pose estimation from static tracks and input
//! depths, with iterative inlier gating, followed by cross-clip merging
//! into a global trajectory.
//!
//! Within a clip the reprojection loss sums, over inlier tracks and ordered
//! visible frame pairs (t1, t2), the squared error between the track at t2
//! and the unproject-at-t1 / reproject-at-t2 transfer of the track at t1.
//! The first frame of each clip is pinned to identity.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::geometry::{dcam_dpose_rot, dworld_dinvpose_rot, CameraModel, PoseSE3, Z_MIN};
use crate::solver::{minimize, Objective, ParamBlocks, SolverError};
use crate::tensorio::PipelineConfig;
use crate::trackset::TrackSet2D;

pub const MIN_TRACKS: usize = 6;

#[derive(thiserror::Error, Debug)]
pub enum PoseInitError {
    #[error("insufficient tracks in clip [{start}, {end}]: {found} < {MIN_TRACKS}")]
    InsufficientTracks {
        start: usize,
        end: usize,
        found: usize,
    },
    #[error("insufficient overlap between clips {0} and {1}")]
    InsufficientOverlap(usize, usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Poses for one clip of frames, local to the clip's first frame.
#[derive(Debug, Clone)]
pub struct Clip {
    pub start: usize,
    pub len: usize,
    pub poses: Vec<PoseSE3>,
    /// Per-track (over the full static set) inlier flag; false for tracks
    /// not observable in this clip.
    pub inliers: Vec<bool>,
    pub degenerate: bool,
    pub final_loss: f64,
}

struct PairTerm {
    t1: usize, // local frame index
    t2: usize,
    track: usize,
    lift: Vector3<f64>, // camera-frame point at t1
    obs: Vector2<f64>,
}

/// Reprojection objective over the clip's local poses.
struct ClipObjective<'a> {
    terms: Vec<PairTerm>,
    cam: &'a CameraModel,
    /// Residual magnitude charged for points pushed behind the camera.
    clamp: f64,
}

impl ClipObjective<'_> {
    fn term_residual(&self, poses: &[PoseSE3], term: &PairTerm) -> (f64, Option<Vector2<f64>>) {
        let xw = poses[term.t1].inverse_transform(&term.lift);
        let xc2 = poses[term.t2].transform(&xw);
        if xc2.z <= Z_MIN {
            return (self.clamp * self.clamp, None);
        }
        let r = self.cam.project_cam(&xc2) - term.obs;
        (r.norm_squared(), Some(r))
    }
}

impl Objective for ClipObjective<'_> {
    fn eval(&self, params: &ParamBlocks) -> f64 {
        self.terms
            .iter()
            .map(|term| self.term_residual(&params.poses, term).0)
            .sum()
    }

    fn eval_grad(&self, params: &ParamBlocks, grad: &mut [f64]) -> f64 {
        let mut loss = 0.0;
        for term in &self.terms {
            let p1 = &params.poses[term.t1];
            let p2 = &params.poses[term.t2];
            let xw = p1.inverse_transform(&term.lift);
            let xc2 = p2.transform(&xw);
            if xc2.z <= Z_MIN {
                loss += self.clamp * self.clamp;
                continue;
            }
            let r = self.cam.project_cam(&xc2) - term.obs;
            loss += r.norm_squared();
            let jp = self.cam.project_cam_jacobian(&xc2);
            let g2 = 2.0 * (r.transpose() * jp); // 1x3 against camera point
                                                 // pose t2: [-[xc2]x | I]
            let jrot2 = dcam_dpose_rot(&xc2);
            for k in 0..3 {
                grad[term.t2 * 6 + k] += (g2 * jrot2.column(k)).x;
                grad[term.t2 * 6 + 3 + k] += g2[k];
            }
            // pose t1 via the inverse transform
            let (jw_rot, jw_trans) = dworld_dinvpose_rot(p1, &term.lift);
            let r2 = p2.rotation_matrix();
            let gxw = g2 * r2; // 1x3 against world point
            for k in 0..3 {
                grad[term.t1 * 6 + k] += (gxw * jw_rot.column(k)).x;
                grad[term.t1 * 6 + 3 + k] += (gxw * jw_trans.column(k)).x;
            }
        }
        loss
    }
}

/// Closed-form rigid alignment (Kabsch): the pose mapping `src` onto `dst`
/// in the least-squares sense. Requires at least 3 correspondences; returns
/// `None` when the covariance is rank deficient.
fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<PoseSE3> {
    if src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let ca = src.iter().sum::<Vector3<f64>>() / n;
    let cb = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (b - cb) * (a - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = nalgebra::Matrix3::<f64>::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rot = nalgebra::UnitQuaternion::from_matrix(&r);
    let t = cb - rot * ca;
    Some(PoseSE3::new(rot, t))
}

/// Kabsch with trimming: refit on the best 70% of correspondences a few
/// times so gross depth outliers cannot steer the seed pose.
fn kabsch_trimmed(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<PoseSE3> {
    let mut keep: Vec<usize> = (0..src.len()).collect();
    let mut pose = kabsch(src, dst)?;
    for _ in 0..3 {
        let mut scored: Vec<(f64, usize)> = keep
            .iter()
            .map(|&i| ((pose.transform(&src[i]) - dst[i]).norm(), i))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let cut = (scored.len() * 7 / 10).max(3);
        keep = scored.iter().take(cut).map(|&(_, i)| i).collect();
        let s: Vec<_> = keep.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = keep.iter().map(|&i| dst[i]).collect();
        match kabsch(&s, &d) {
            Some(p) => pose = p,
            None => break,
        }
    }
    Some(pose)
}

/// Chain per-frame rigid alignments of lifted track points to seed the
/// clip's local poses before gradient refinement.
fn init_clip_poses(
    tracks: &TrackSet2D,
    depths: &[f64],
    start: usize,
    len: usize,
    inliers: &[bool],
    cam: &CameraModel,
) -> Vec<PoseSE3> {
    let mut poses = vec![PoseSE3::identity(); len];
    for f in 1..len {
        let (ta, tb) = (start + f - 1, start + f);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..tracks.n {
            if !inliers[i]
                || !tracks.visible(i, ta)
                || !tracks.visible(i, tb)
                || depths[i * tracks.t + ta] <= 0.0
                || depths[i * tracks.t + tb] <= 0.0
            {
                continue;
            }
            src.push(cam.lift(tracks.pos(i, ta), depths[i * tracks.t + ta]));
            dst.push(cam.lift(tracks.pos(i, tb), depths[i * tracks.t + tb]));
        }
        let rel = kabsch_trimmed(&src, &dst).unwrap_or_else(PoseSE3::identity);
        poses[f] = rel.compose(&poses[f - 1]);
    }
    poses
}

fn clip_terms(
    tracks: &TrackSet2D,
    depths: &[f64],
    start: usize,
    len: usize,
    inliers: &[bool],
) -> Vec<PairTerm> {
    let mut terms = Vec::new();
    for i in 0..tracks.n {
        if !inliers[i] {
            continue;
        }
        for t1 in start..start + len {
            if !tracks.visible(i, t1) || depths[i * tracks.t + t1] <= 0.0 {
                continue;
            }
            for t2 in start..start + len {
                if t2 == t1 || !tracks.visible(i, t2) {
                    continue;
                }
                terms.push((i, t1, t2));
            }
        }
    }
    terms
        .into_iter()
        .map(|(i, t1, t2)| PairTerm {
            t1: t1 - start,
            t2: t2 - start,
            track: i,
            lift: Vector3::zeros(), // filled by caller with cam
            obs: Vector2::zeros(),
        })
        .collect()
}

fn fill_terms(
    terms: &mut [PairTerm],
    tracks: &TrackSet2D,
    depths: &[f64],
    start: usize,
    cam: &CameraModel,
) {
    for term in terms.iter_mut() {
        let (t1, t2) = (term.t1 + start, term.t2 + start);
        let i = term.track;
        term.lift = cam.lift(tracks.pos(i, t1), depths[i * tracks.t + t1]);
        term.obs = tracks.pos(i, t2);
    }
}

/// Inlier gate: residual strictly below `tau_px`, always keeping at least
/// the `MIN_TRACKS` lowest-residual tracks. Tracks with infinite residual
/// (unobservable in the clip) are never kept by the floor.
pub fn gate_inliers(residuals: &[f64], tau_px: f64) -> Vec<bool> {
    let mut mask: Vec<bool> = residuals.iter().map(|&r| r < tau_px).collect();
    let kept = mask.iter().filter(|&&m| m).count();
    if kept < MIN_TRACKS {
        let mut order: Vec<usize> = (0..residuals.len())
            .filter(|&i| residuals[i].is_finite())
            .collect();
        order.sort_by(|&a, &b| {
            residuals[a]
                .partial_cmp(&residuals[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(MIN_TRACKS) {
            mask[i] = true;
        }
    }
    mask
}

/// Max reprojection residual per track for the given clip poses.
fn per_track_residuals(objective: &ClipObjective, poses: &[PoseSE3], n: usize) -> Vec<f64> {
    let mut res = vec![f64::INFINITY; n];
    let mut seen = vec![false; n];
    for term in &objective.terms {
        let (l2, _) = objective.term_residual(poses, term);
        let r = l2.sqrt();
        if !seen[term.track] {
            res[term.track] = r;
            seen[term.track] = true;
        } else if r > res[term.track] {
            res[term.track] = r;
        }
    }
    res
}

/// Estimate local poses for the clip `[start, start+len)` with iterative
/// inlier gating. `depths` is the row-major N x T per-track depth table.
pub fn estimate_clip_poses(
    tracks: &TrackSet2D,
    depths: &[f64],
    start: usize,
    len: usize,
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
) -> Result<Clip, PoseInitError> {
    let usable = |i: usize| {
        let vis = (start..start + len)
            .filter(|&t| tracks.visible(i, t) && depths[i * tracks.t + t] > 0.0)
            .count();
        // a single-frame clip has no pairs; any observed track can still
        // anchor the merge with the neighboring clip
        vis >= 2.min(len)
    };
    let mut inliers: Vec<bool> = (0..tracks.n).map(usable).collect();
    let observable = inliers.clone();
    let found = inliers.iter().filter(|&&m| m).count();
    if len > 1 && found < MIN_TRACKS {
        return Err(PoseInitError::InsufficientTracks {
            start,
            end: start + len - 1,
            found,
        });
    }
    let mut poses = vec![PoseSE3::identity(); len];
    if len == 1 {
        return Ok(Clip {
            start,
            len,
            poses,
            inliers,
            degenerate: false,
            final_loss: 0.0,
        });
    }

    // degenerate geometry: no pixel motion and no depth spread at all
    let mut max_motion = 0.0f64;
    let mut dmin = f64::INFINITY;
    let mut dmax = f64::NEG_INFINITY;
    for i in 0..tracks.n {
        if !inliers[i] {
            continue;
        }
        let mut first: Option<Vector2<f64>> = None;
        for t in start..start + len {
            if !tracks.visible(i, t) {
                continue;
            }
            let p = tracks.pos(i, t);
            match first {
                None => first = Some(p),
                Some(f0) => max_motion = max_motion.max((p - f0).norm()),
            }
            let d = depths[i * tracks.t + t];
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    if max_motion < 1e-12 && (dmax - dmin).abs() < 1e-12 {
        return Ok(Clip {
            start,
            len,
            poses,
            inliers,
            degenerate: true,
            final_loss: 0.0,
        });
    }

    poses = init_clip_poses(tracks, depths, start, len, &inliers, cam);
    let tau_px = cfg.inlier_tau * image_diag;
    let clamp = 10.0 * image_diag;
    let mut final_loss = 0.0;
    let mut all_terms = clip_terms(tracks, depths, start, len, &observable);
    fill_terms(&mut all_terms, tracks, depths, start, cam);
    let gate_obj = ClipObjective {
        terms: all_terms,
        cam,
        clamp,
    };
    for round in 0..5 {
        // gate at the current poses (seed poses on the first round)
        let residuals = per_track_residuals(&gate_obj, &poses, tracks.n);
        let gated = gate_inliers(&residuals, tau_px);
        // the gate floor may resurrect unobservable tracks; mask them off
        let gated: Vec<bool> = gated
            .iter()
            .zip(&observable)
            .map(|(&g, &o)| g && o)
            .collect();
        if round > 0 && gated == inliers {
            break;
        }
        inliers = gated;

        let mut terms = clip_terms(tracks, depths, start, len, &inliers);
        fill_terms(&mut terms, tracks, depths, start, cam);
        let objective = ClipObjective { terms, cam, clamp };
        let mut params = ParamBlocks::new(poses.clone(), vec![]);
        params.pose_frozen[0] = true;
        let result = minimize(&objective, params, &cfg.solver)?;
        poses = result.params.poses;
        final_loss = result.loss;
    }

    Ok(Clip {
        start,
        len,
        poses,
        inliers,
        degenerate: false,
        final_loss,
    })
}

/// One-pose alignment objective used when merging consecutive clips.
/// Terms observe fixed 3D points through a fixed pose composed with the
/// free alignment pose, either `fixed o S` (forward) or `fixed o S^-1`
/// (backward).
struct AlignTerm {
    point: Vector3<f64>,
    fixed: PoseSE3,
    obs: Vector2<f64>,
    forward: bool,
}

struct AlignObjective<'a> {
    terms: Vec<AlignTerm>,
    cam: &'a CameraModel,
    clamp: f64,
}

impl Objective for AlignObjective<'_> {
    fn eval(&self, params: &ParamBlocks) -> f64 {
        let s = &params.poses[0];
        self.terms
            .iter()
            .map(|term| {
                let xc = if term.forward {
                    term.fixed.transform(&s.transform(&term.point))
                } else {
                    term.fixed.transform(&s.inverse_transform(&term.point))
                };
                if xc.z <= Z_MIN {
                    self.clamp * self.clamp
                } else {
                    (self.cam.project_cam(&xc) - term.obs).norm_squared()
                }
            })
            .sum()
    }

    fn eval_grad(&self, params: &ParamBlocks, grad: &mut [f64]) -> f64 {
        let s = &params.poses[0];
        let mut loss = 0.0;
        for term in &self.terms {
            if term.forward {
                let z = s.transform(&term.point);
                let xc = term.fixed.transform(&z);
                if xc.z <= Z_MIN {
                    loss += self.clamp * self.clamp;
                    continue;
                }
                let r = self.cam.project_cam(&xc) - term.obs;
                loss += r.norm_squared();
                let g = 2.0
                    * (r.transpose() * self.cam.project_cam_jacobian(&xc))
                    * term.fixed.rotation_matrix();
                let jrot = dcam_dpose_rot(&z);
                for k in 0..3 {
                    grad[k] += (g * jrot.column(k)).x;
                    grad[3 + k] += g[k];
                }
            } else {
                // fixed o S^-1: inner point exp(-delta) applied to `point`
                let inner = s.inverse_transform(&term.point);
                let xc = term.fixed.transform(&inner);
                if xc.z <= Z_MIN {
                    loss += self.clamp * self.clamp;
                    continue;
                }
                let r = self.cam.project_cam(&xc) - term.obs;
                loss += r.norm_squared();
                let g = 2.0
                    * (r.transpose() * self.cam.project_cam_jacobian(&xc))
                    * term.fixed.rotation_matrix();
                let (jrot, jtrans) = dworld_dinvpose_rot(s, &term.point);
                for k in 0..3 {
                    grad[k] += (g * jrot.column(k)).x;
                    grad[3 + k] += (g * jtrans.column(k)).x;
                }
            }
        }
        loss
    }
}

/// Merge per-clip local poses into one global trajectory. For each clip
/// boundary a single relative SE(3) is solved from tracks observed on both
/// sides, then composed left to right; the first frame stays identity.
pub fn merge_clips(
    clips: &[Clip],
    tracks: &TrackSet2D,
    depths: &[f64],
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
) -> Result<Vec<PoseSE3>, PoseInitError> {
    let mut global: Vec<PoseSE3> = Vec::new();
    global.extend_from_slice(&clips[0].poses);
    let clamp = 10.0 * image_diag;
    for (k, clip) in clips.iter().enumerate().skip(1) {
        let prev = &clips[k - 1];
        // tracks usable on both sides of the boundary
        let shared: Vec<usize> = (0..tracks.n)
            .filter(|&i| {
                prev.inliers[i]
                    && clip.inliers[i]
                    && (prev.start..prev.start + prev.len)
                        .any(|t| tracks.visible(i, t) && depths[i * tracks.t + t] > 0.0)
                    && (clip.start..clip.start + clip.len)
                        .any(|t| tracks.visible(i, t) && depths[i * tracks.t + t] > 0.0)
            })
            .collect();
        if shared.len() < MIN_TRACKS {
            return Err(PoseInitError::InsufficientOverlap(k - 1, k));
        }
        let mut terms = Vec::new();
        for &i in &shared {
            for t1 in prev.start..prev.start + prev.len {
                if !tracks.visible(i, t1) || depths[i * tracks.t + t1] <= 0.0 {
                    continue;
                }
                let lift = cam.lift(tracks.pos(i, t1), depths[i * tracks.t + t1]);
                let xw = global[t1].inverse_transform(&lift);
                for t2 in clip.start..clip.start + clip.len {
                    if !tracks.visible(i, t2) {
                        continue;
                    }
                    terms.push(AlignTerm {
                        point: xw,
                        fixed: clip.poses[t2 - clip.start],
                        obs: tracks.pos(i, t2),
                        forward: true,
                    });
                }
            }
            for t1 in clip.start..clip.start + clip.len {
                if !tracks.visible(i, t1) || depths[i * tracks.t + t1] <= 0.0 {
                    continue;
                }
                let lift = cam.lift(tracks.pos(i, t1), depths[i * tracks.t + t1]);
                let xloc = clip.poses[t1 - clip.start].inverse_transform(&lift);
                for t2 in prev.start..prev.start + prev.len {
                    if !tracks.visible(i, t2) {
                        continue;
                    }
                    terms.push(AlignTerm {
                        point: xloc,
                        fixed: global[t2],
                        obs: tracks.pos(i, t2),
                        forward: false,
                    });
                }
            }
        }
        // seed from rigid alignment of per-track mean unprojections on the
        // two sides of the boundary, falling back to the last global pose
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for &i in &shared {
            let mut acc_w = Vector3::zeros();
            let mut n_w = 0.0;
            for t in prev.start..prev.start + prev.len {
                if tracks.visible(i, t) && depths[i * tracks.t + t] > 0.0 {
                    let lift = cam.lift(tracks.pos(i, t), depths[i * tracks.t + t]);
                    acc_w += global[t].inverse_transform(&lift);
                    n_w += 1.0;
                }
            }
            let mut acc_l = Vector3::zeros();
            let mut n_l = 0.0;
            for t in clip.start..clip.start + clip.len {
                if tracks.visible(i, t) && depths[i * tracks.t + t] > 0.0 {
                    let lift = cam.lift(tracks.pos(i, t), depths[i * tracks.t + t]);
                    acc_l += clip.poses[t - clip.start].inverse_transform(&lift);
                    n_l += 1.0;
                }
            }
            src.push(acc_w / n_w);
            dst.push(acc_l / n_l);
        }
        let seed = kabsch(&src, &dst).unwrap_or(global[clip.start - 1]);
        let objective = AlignObjective { terms, cam, clamp };
        let init = ParamBlocks::new(vec![seed], vec![]);
        let result = minimize(&objective, init, &cfg.solver)?;
        let s = result.params.poses[0];
        for t in 0..clip.len {
            global.push(clip.poses[t].compose(&s));
        }
    }
    Ok(global)
}

/// Stage 1 driver: split into clips of `clip_len`, estimate in parallel,
/// merge. Returns global poses plus the per-clip results.
pub fn estimate_poses(
    tracks: &TrackSet2D,
    depths: &[f64],
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
) -> Result<(Vec<PoseSE3>, Vec<Clip>), PoseInitError> {
    let t = tracks.t;
    let ranges: Vec<(usize, usize)> = (0..t)
        .step_by(cfg.clip_len)
        .map(|s| (s, cfg.clip_len.min(t - s)))
        .collect();
    let clips: Result<Vec<Clip>, PoseInitError> = ranges
        .par_iter()
        .map(|&(s, l)| estimate_clip_poses(tracks, depths, s, l, cam, cfg, image_diag))
        .collect();
    let clips = clips?;
    let global = if clips.len() == 1 {
        clips[0].poses.clone()
    } else {
        merge_clips(&clips, tracks, depths, cam, cfg, image_diag)?
    };
    Ok((global, clips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::SolverConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::tensorio::DepthStack;

    fn scene_tracks(scene: &crate::synth::SynthScene) -> (TrackSet2D, Vec<f64>) {
        let tn = scene.frames();
        let mut positions = Vec::with_capacity(scene.n * tn);
        let mut visible = Vec::with_capacity(scene.n * tn);
        let mut spawn = Vec::with_capacity(scene.n);
        for i in 0..scene.n {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
            spawn.push((0..tn).find(|&t| scene.is_visible(i, t)).unwrap());
        }
        let ts = TrackSet2D::new(scene.n, tn, positions, visible, spawn);
        let stack = DepthStack {
            t: tn,
            h: scene.config.height,
            w: scene.config.width,
            data: scene.depth.clone(),
        };
        let mut depths = vec![0.0; scene.n * tn];
        for i in 0..scene.n {
            for t in 0..tn {
                depths[i * tn + t] = stack.sample(t, ts.pos(i, t));
            }
        }
        (ts, depths)
    }

    fn scene_tracks_exact(scene: &crate::synth::SynthScene) -> (TrackSet2D, Vec<f64>) {
        let tn = scene.frames();
        let mut positions = Vec::with_capacity(scene.n * tn);
        let mut visible = Vec::with_capacity(scene.n * tn);
        let mut spawn = Vec::with_capacity(scene.n);
        for i in 0..scene.n {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
            spawn.push((0..tn).find(|&t| scene.is_visible(i, t)).unwrap());
        }
        let ts = TrackSet2D::new(scene.n, tn, positions, visible, spawn);
        let mut depths = vec![0.0; scene.n * tn];
        for i in 0..scene.n {
            for t in 0..tn {
                depths[i * tn + t] = scene.gt_track_depth(i, t);
            }
        }
        (ts, depths)
    }

    fn tight_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.solver = SolverConfig {
            max_iters: 4000,
            step: 1e-3,
            tol: 1e-14,
            grad_check: false,
        };
        cfg
    }

    #[test]
    fn clip_objective_gradient_matches_fd() {
        let cfg = SynthConfig {
            frames: 5,
            static_points: 40,
            objects: vec![],
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, depths) = scene_tracks(&scene);
        let inliers = vec![true; ts.n];
        let mut terms = clip_terms(&ts, &depths, 0, 5, &inliers);
        fill_terms(&mut terms, &ts, &depths, 0, &scene.cam);
        let obj = ClipObjective {
            terms,
            cam: &scene.cam,
            clamp: 905.0,
        };
        let mut params = ParamBlocks::new(vec![PoseSE3::identity(); 5], vec![]);
        params.pose_frozen[0] = true;
        // random-ish offset so gradients are nonzero
        let mut delta = vec![0.0; params.dim()];
        for (i, d) in delta.iter_mut().enumerate() {
            *d = 0.01 * ((i as f64 * 0.7).sin());
        }
        let params = params.step(&delta);
        let err = crate::solver::grad_check(&obj, &params, 1e-5);
        assert!(err < 1e-4, "grad err {err}");
    }

    #[test]
    fn single_frame_clip_is_identity() {
        let cfg = SynthConfig {
            frames: 3,
            static_points: 30,
            objects: vec![],
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, depths) = scene_tracks(&scene);
        let clip = estimate_clip_poses(&ts, &depths, 2, 1, &scene.cam, &tight_cfg(), 90.5).unwrap();
        assert_eq!(clip.poses.len(), 1);
        assert_eq!(clip.final_loss, 0.0);
        let (dr, dt) = clip.poses[0].distance(&PoseSE3::identity());
        assert!(dr == 0.0 && dt == 0.0);
    }

    #[test]
    fn noiseless_clip_recovers_ground_truth() {
        let cfg = SynthConfig {
            frames: 5,
            static_points: 120,
            objects: vec![],
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, depths) = scene_tracks_exact(&scene);
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        let clip = estimate_clip_poses(&ts, &depths, 0, 5, &scene.cam, &tight_cfg(), diag).unwrap();
        // ground truth local to frame 0; scene scale ~ orbit radius 3
        let g0_inv = scene.gt_poses[0].inverse();
        for t in 0..5 {
            let gt_local = scene.gt_poses[t].compose(&g0_inv);
            let (dr, dt) = clip.poses[t].distance(&gt_local);
            assert!(
                dr < 1e-4f64.to_radians() && dt < 1e-5 * 3.0,
                "frame {t}: rot {dr} trans {dt}"
            );
        }
    }

    #[test]
    fn gate_threshold_semantics() {
        let diag = 100.0;
        let residuals = vec![0.01 * diag, 0.5 * diag, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mask = gate_inliers(&residuals, 0.1 * diag);
        assert!(mask[0]);
        assert!(!mask[1]);
        let all_zero = vec![0.0; 8];
        assert!(gate_inliers(&all_zero, 0.1).iter().all(|&m| m));
    }

    #[test]
    fn gate_keeps_floor_of_six() {
        let residuals: Vec<f64> = (0..10).map(|i| 100.0 + i as f64).collect();
        let mask = gate_inliers(&residuals, 1.0);
        assert_eq!(mask.iter().filter(|&&m| m).count(), MIN_TRACKS);
        for (i, m) in mask.iter().enumerate() {
            assert_eq!(*m, i < MIN_TRACKS);
        }
    }

    #[test]
    fn gate_monotone_in_tau() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let residuals: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
            let tau_a = rng.gen_range(0.0..10.0);
            let tau_b = tau_a + rng.gen_range(0.0..5.0);
            let ma = gate_inliers(&residuals, tau_a);
            let mb = gate_inliers(&residuals, tau_b);
            for i in 0..40 {
                assert!(!ma[i] || mb[i], "gating not monotone");
            }
            // brute-force threshold check above the floor
            let kept = residuals.iter().filter(|&&r| r < tau_a).count();
            if kept >= MIN_TRACKS {
                for i in 0..40 {
                    assert_eq!(ma[i], residuals[i] < tau_a);
                }
            }
        }
    }

    #[test]
    fn loss_zero_at_truth() {
        let cfg = SynthConfig {
            frames: 5,
            static_points: 60,
            objects: vec![],
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let tn = scene.frames();
        // exact per-track depths from ground truth, bypassing the depth maps
        let mut positions = Vec::new();
        let mut visible = Vec::new();
        for i in 0..scene.n {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
        }
        let ts = TrackSet2D::new(scene.n, tn, positions, visible, vec![0; scene.n]);
        let mut depths = vec![0.0; scene.n * tn];
        for i in 0..scene.n {
            for t in 0..tn {
                depths[i * tn + t] = scene.gt_track_depth(i, t);
            }
        }
        let inliers = vec![true; ts.n];
        let mut terms = clip_terms(&ts, &depths, 0, 5, &inliers);
        fill_terms(&mut terms, &ts, &depths, 0, &scene.cam);
        let obj = ClipObjective {
            terms,
            cam: &scene.cam,
            clamp: 905.0,
        };
        let g0_inv = scene.gt_poses[0].inverse();
        let gt_local: Vec<PoseSE3> = (0..5).map(|t| scene.gt_poses[t].compose(&g0_inv)).collect();
        let params = ParamBlocks::new(gt_local, vec![]);
        assert!(
            obj.eval(&params) < 1e-10,
            "loss at truth {}",
            obj.eval(&params)
        );
    }

    #[test]
    fn outlier_depths_get_gated() {
        let cfg = SynthConfig {
            frames: 5,
            static_points: 100,
            objects: vec![],
            camera_path: crate::synth::CameraPath::Orbit {
                radius: 3.0,
                sweep_deg: 60.0,
            },
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, mut depths) = scene_tracks(&scene);
        // corrupt 20% of track depths wildly, each with its own scale so
        // the corrupted set is not itself a consistent rigid scene
        let bad: Vec<usize> = (0..ts.n).filter(|i| i % 5 == 0).collect();
        for (k, &i) in bad.iter().enumerate() {
            let factor = 2.0 + (k % 9) as f64;
            for t in 0..ts.t {
                depths[i * ts.t + t] *= factor;
            }
        }
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        let clip = estimate_clip_poses(&ts, &depths, 0, 5, &scene.cam, &tight_cfg(), diag).unwrap();
        for &i in &bad {
            assert!(!clip.inliers[i], "corrupted track {i} kept as inlier");
        }
        let observable = |i: usize| (0..5).filter(|&t| ts.visible(i, t)).count() >= 2;
        let clean: Vec<usize> = (0..ts.n)
            .filter(|i| !bad.contains(i) && observable(*i))
            .collect();
        let clean_kept = clean.iter().filter(|&&i| clip.inliers[i]).count();
        assert!(
            clean_kept * 100 >= clean.len() * 95,
            "kept {clean_kept}/{}",
            clean.len()
        );
    }

    #[test]
    fn merge_recovers_global_trajectory() {
        let cfg = SynthConfig {
            frames: 10,
            static_points: 120,
            objects: vec![],
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, depths) = scene_tracks_exact(&scene);
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        let (global, clips) = estimate_poses(&ts, &depths, &scene.cam, &tight_cfg(), diag).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(global.len(), 10);
        let g0_inv = scene.gt_poses[0].inverse();
        for t in 0..10 {
            let gt_local = scene.gt_poses[t].compose(&g0_inv);
            let (dr, dt) = global[t].distance(&gt_local);
            assert!(dr < 1e-5 && dt < 1e-5, "frame {t}: rot {dr} trans {dt}");
        }
    }

    #[test]
    fn identity_clips_merge_by_concatenation() {
        // two clips with identical (identity) local poses and a static
        // camera: merged trajectory must be all-identity
        let cfg = SynthConfig {
            frames: 8,
            static_points: 80,
            objects: vec![],
            camera_path: crate::synth::CameraPath::Dolly { distance: 0.0 },
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, depths) = scene_tracks(&scene);
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        let mut cfgp = tight_cfg();
        cfgp.clip_len = 4;
        let (global, _) = estimate_poses(&ts, &depths, &scene.cam, &cfgp, diag).unwrap();
        let base = scene.gt_poses[0];
        for (t, g) in global.iter().enumerate() {
            let gt_local = scene.gt_poses[t].compose(&base.inverse());
            let (dr, dt) = g.distance(&gt_local);
            assert!(dr < 1e-6 && dt < 1e-6, "frame {t}");
        }
    }

    #[test]
    fn disjoint_clips_report_insufficient_overlap() {
        // build tracks visible only in one half each
        let tn = 8;
        let n = 20;
        let mut positions = Vec::new();
        let mut visible = Vec::new();
        let mut spawn = Vec::new();
        for i in 0..n {
            let first_half = i < n / 2;
            for t in 0..tn {
                positions.push(Vector2::new(10.0 + i as f64, 20.0));
                visible.push(if first_half { t < 4 } else { t >= 4 });
            }
            spawn.push(if first_half { 0 } else { 4 });
        }
        let ts = TrackSet2D::new(n, tn, positions, visible, spawn);
        let depths = vec![2.0; n * tn];
        let cam = CameraModel::new(64.0, 64.0, 31.5, 31.5);
        let mut cfg = tight_cfg();
        cfg.clip_len = 4;
        let clips: Vec<Clip> = vec![
            estimate_clip_poses(&ts, &depths, 0, 4, &cam, &cfg, 90.5).unwrap(),
            estimate_clip_poses(&ts, &depths, 4, 4, &cam, &cfg, 90.5).unwrap(),
        ];
        let got = merge_clips(&clips, &ts, &depths, &cam, &cfg, 90.5);
        assert!(matches!(got, Err(PoseInitError::InsufficientOverlap(0, 1))));
    }

    #[test]
    fn insufficient_tracks_rejected() {
        let ts = TrackSet2D::new(
            2,
            4,
            vec![Vector2::new(5.0, 5.0); 8],
            vec![true; 8],
            vec![0, 0],
        );
        let depths = vec![1.0; 8];
        let cam = CameraModel::new(50.0, 50.0, 16.0, 16.0);
        let got = estimate_clip_poses(&ts, &depths, 0, 4, &cam, &tight_cfg(), 45.0);
        assert!(matches!(got, Err(PoseInitError::InsufficientTracks { .. })));
    }

    #[test]
    fn parallel_schedule_deterministic() {
        let cfg = SynthConfig {
            frames: 10,
            static_points: 80,
            objects: vec![],
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        let (ts, depths) = scene_tracks(&scene);
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        let (a, _) = estimate_poses(&ts, &depths, &scene.cam, &tight_cfg(), diag).unwrap();
        let (b, _) = estimate_poses(&ts, &depths, &scene.cam, &tight_cfg(), diag).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.translation, y.translation);
            assert_eq!(x.rotation, y.rotation);
        }
    }
}
