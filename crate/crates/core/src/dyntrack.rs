//! Stage 3: free-form 3D tracking of dynamic points under reprojection,
//! depth-consistency, as-rigid-as-possible, and temporal-smoothness losses
//! with the cameras held fixed. Also houses the coarse-to-fine speed-up
//! (quantized downsampling of static tracks plus KNN inverse-distance
//! upsampling of the optimized anchors) and consistent video depth
//! propagation from tracked points to full frames.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{unproject, CameraModel, PoseSE3, Z_MIN};
use crate::solver::{minimize, Objective, ParamBlocks, SolverError};
use crate::tensorio::PipelineConfig;
use crate::trackset::TrackSet2D;

pub const EPS_NUM: f64 = 1e-8;

#[derive(thiserror::Error, Debug)]
pub enum DynError {
    #[error("track {0} has no usable visible frame")]
    NoVisibleFrames(usize),
    #[error("no visible coarse neighbors for track {track} at frame {frame}")]
    NoVisibleCoarseNeighbors { track: usize, frame: usize },
    #[error("all tracked points have zero raw depth")]
    ZeroRawDepth,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Free per-frame world positions for dynamic points, plus the fixed
/// neighborhood graph used by the ARAP term.
#[derive(Debug, Clone)]
pub struct DynamicTrackSet {
    pub n: usize,
    pub t: usize,
    /// N x T row-major world positions.
    pub positions: Vec<Vector3<f64>>,
    pub visible: Vec<bool>,
    /// Per-point neighbor indices; `min(r, n-1)` entries, no self-loops.
    pub knn: Vec<Vec<usize>>,
}

impl DynamicTrackSet {
    pub fn pos(&self, i: usize, t: usize) -> Vector3<f64> {
        self.positions[i * self.t + t]
    }

    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visible[i * self.t + t]
    }
}

/// Brute-force k nearest neighbors of point `i` (excluding itself).
fn knn_of(points: &[Vector3<f64>], i: usize, r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| {
        let da = (points[a] - points[i]).norm_squared();
        let db = (points[b] - points[i]).norm_squared();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(r);
    order
}

/// Back-project each dynamic track at its visible timesteps; fill occluded
/// timesteps by linear interpolation between the nearest visible frames
/// (constant extrapolation at either end). The ARAP neighborhood is built
/// once from the spawn-frame 3D positions.
pub fn init_dynamic(
    tracks: &TrackSet2D,
    depths: &[f64],
    poses: &[PoseSE3],
    cam: &CameraModel,
    r: usize,
) -> Result<DynamicTrackSet, DynError> {
    let (n, tn) = (tracks.n, tracks.t);
    let mut positions = vec![Vector3::zeros(); n * tn];
    let mut usable = vec![false; n * tn];
    for i in 0..n {
        let mut any = false;
        for t in 0..tn {
            if tracks.visible(i, t) && depths[i * tn + t] > 0.0 {
                positions[i * tn + t] =
                    unproject(&poses[t], cam, tracks.pos(i, t), depths[i * tn + t])
                        .expect("positive depth checked");
                usable[i * tn + t] = true;
                any = true;
            }
        }
        if !any {
            return Err(DynError::NoVisibleFrames(i));
        }
        // fill gaps
        let vis: Vec<usize> = (0..tn).filter(|&t| usable[i * tn + t]).collect();
        for t in 0..tn {
            if usable[i * tn + t] {
                continue;
            }
            let prev = vis.iter().rev().find(|&&v| v < t);
            let next = vis.iter().find(|&&v| v > t);
            positions[i * tn + t] = match (prev, next) {
                (Some(&a), Some(&b)) => {
                    let alpha = (t - a) as f64 / (b - a) as f64;
                    positions[i * tn + a] * (1.0 - alpha) + positions[i * tn + b] * alpha
                }
                (Some(&a), None) => positions[i * tn + a],
                (None, Some(&b)) => positions[i * tn + b],
                (None, None) => unreachable!("checked above"),
            };
        }
    }
    let spawn_pts: Vec<Vector3<f64>> = (0..n)
        .map(|i| {
            let s = (0..tn).find(|&t| usable[i * tn + t]).unwrap();
            positions[i * tn + s]
        })
        .collect();
    let knn = (0..n).map(|i| knn_of(&spawn_pts, i, r)).collect();
    Ok(DynamicTrackSet {
        n,
        t: tn,
        positions,
        visible: (0..n * tn)
            .map(|j| tracks.visible(j / tn, j % tn))
            .collect(),
        knn,
    })
}

/// As-rigid-as-possible loss: change over time of the difference vector to
/// each neighbor.
pub fn loss_arap(dyn_set: &DynamicTrackSet) -> f64 {
    let mut loss = 0.0;
    for t in 1..dyn_set.t {
        for k in 0..dyn_set.n {
            for &j in &dyn_set.knn[k] {
                let d = (dyn_set.pos(k, t) - dyn_set.pos(j, t))
                    - (dyn_set.pos(k, t - 1) - dyn_set.pos(j, t - 1));
                loss += d.norm_squared();
            }
        }
    }
    loss
}

/// Temporal smoothness loss: first-order differences of each trajectory.
pub fn loss_ts(dyn_set: &DynamicTrackSet) -> f64 {
    let mut loss = 0.0;
    for t in 1..dyn_set.t {
        for k in 0..dyn_set.n {
            loss += (dyn_set.pos(k, t) - dyn_set.pos(k, t - 1)).norm_squared();
        }
    }
    loss
}

/// Stage 3 objective over the N x T position blocks; the cameras never
/// appear as variables.
pub struct DynObjective<'a> {
    pub tracks: &'a TrackSet2D,
    pub depths: &'a [f64],
    pub poses: &'a [PoseSE3],
    pub cam: &'a CameraModel,
    pub knn: &'a [Vec<usize>],
    pub lambda_ba: f64,
    pub lambda_dc: f64,
    pub lambda_arap: f64,
    pub lambda_ts: f64,
    pub clamp: f64,
}

impl Objective for DynObjective<'_> {
    fn eval(&self, params: &ParamBlocks) -> f64 {
        let tn = self.tracks.t;
        let n = self.tracks.n;
        let at = |i: usize, t: usize| params.points[i * tn + t];
        let mut loss = 0.0;
        for i in 0..n {
            for t in 0..tn {
                if self.tracks.visible(i, t) {
                    let xc = self.poses[t].transform(&at(i, t));
                    if xc.z <= Z_MIN {
                        loss += self.lambda_ba * self.clamp * self.clamp;
                    } else {
                        let r = self.cam.project_cam(&xc) - self.tracks.pos(i, t);
                        loss += self.lambda_ba * r.norm_squared();
                        if self.depths[i * tn + t] > 0.0 {
                            let rd = xc.z - self.depths[i * tn + t];
                            loss += self.lambda_dc * rd * rd;
                        }
                    }
                }
                if t >= 1 {
                    loss += self.lambda_ts * (at(i, t) - at(i, t - 1)).norm_squared();
                    for &j in &self.knn[i] {
                        let d = (at(i, t) - at(j, t)) - (at(i, t - 1) - at(j, t - 1));
                        loss += self.lambda_arap * d.norm_squared();
                    }
                }
            }
        }
        loss
    }

    fn eval_grad(&self, params: &ParamBlocks, grad: &mut [f64]) -> f64 {
        let tn = self.tracks.t;
        let n = self.tracks.n;
        let at = |i: usize, t: usize| params.points[i * tn + t];
        let add = |slot: usize, v: Vector3<f64>, grad: &mut [f64]| {
            grad[slot * 3] += v.x;
            grad[slot * 3 + 1] += v.y;
            grad[slot * 3 + 2] += v.z;
        };
        let mut loss = 0.0;
        for i in 0..n {
            for t in 0..tn {
                if self.tracks.visible(i, t) {
                    let pose = &self.poses[t];
                    let xc = pose.transform(&at(i, t));
                    if xc.z <= Z_MIN {
                        loss += self.lambda_ba * self.clamp * self.clamp;
                    } else {
                        let rot = pose.rotation_matrix();
                        let r = self.cam.project_cam(&xc) - self.tracks.pos(i, t);
                        loss += self.lambda_ba * r.norm_squared();
                        let g = 2.0
                            * self.lambda_ba
                            * (r.transpose() * self.cam.project_cam_jacobian(&xc))
                            * rot;
                        add(i * tn + t, g.transpose(), grad);
                        if self.depths[i * tn + t] > 0.0 {
                            let rd = xc.z - self.depths[i * tn + t];
                            loss += self.lambda_dc * rd * rd;
                            let gd = 2.0 * self.lambda_dc * rd * rot.row(2).transpose();
                            add(i * tn + t, gd, grad);
                        }
                    }
                }
                if t >= 1 {
                    let e = at(i, t) - at(i, t - 1);
                    loss += self.lambda_ts * e.norm_squared();
                    add(i * tn + t, 2.0 * self.lambda_ts * e, grad);
                    add(i * tn + t - 1, -2.0 * self.lambda_ts * e, grad);
                    for &j in &self.knn[i] {
                        let d = (at(i, t) - at(j, t)) - (at(i, t - 1) - at(j, t - 1));
                        loss += self.lambda_arap * d.norm_squared();
                        let gd = 2.0 * self.lambda_arap * d;
                        add(i * tn + t, gd, grad);
                        add(j * tn + t, -gd, grad);
                        add(i * tn + t - 1, -gd, grad);
                        add(j * tn + t - 1, gd, grad);
                    }
                }
            }
        }
        loss
    }
}

/// Optimize dynamic world trajectories with the cameras frozen.
pub fn optimize_dynamic(
    dyn_set: &DynamicTrackSet,
    tracks: &TrackSet2D,
    depths: &[f64],
    poses: &[PoseSE3],
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
) -> Result<DynamicTrackSet, DynError> {
    let (out, _) = optimize_dynamic_traced(dyn_set, tracks, depths, poses, cam, cfg, image_diag)?;
    Ok(out)
}

/// As `optimize_dynamic`, also returning the per-iteration loss history.
pub fn optimize_dynamic_traced(
    dyn_set: &DynamicTrackSet,
    tracks: &TrackSet2D,
    depths: &[f64],
    poses: &[PoseSE3],
    cam: &CameraModel,
    cfg: &PipelineConfig,
    image_diag: f64,
) -> Result<(DynamicTrackSet, Vec<f64>), DynError> {
    let objective = DynObjective {
        tracks,
        depths,
        poses,
        cam,
        knn: &dyn_set.knn,
        lambda_ba: cfg.lambda_ba,
        lambda_dc: cfg.lambda_dc,
        lambda_arap: cfg.lambda_arap,
        lambda_ts: cfg.lambda_ts,
        clamp: 10.0 * image_diag,
    };
    let params = ParamBlocks::new(vec![], dyn_set.positions.clone());
    let result = minimize(&objective, params, &cfg.solver)?;
    Ok((
        DynamicTrackSet {
            positions: result.params.points,
            ..dyn_set.clone()
        },
        result.history,
    ))
}

/// Mapping from the full static set onto the retained coarse subset
/// produced by quantized spawn-position downsampling.
#[derive(Debug, Clone)]
pub struct DownsampleIndex {
    /// Full index of each retained coarse track, ascending.
    pub retained: Vec<usize>,
    /// For every full track, the coarse index sharing its quantization key.
    pub assign: Vec<usize>,
}

/// Keep the lowest-index track per (spawn frame, round(x/varpi),
/// round(y/varpi)) key.
pub fn downsample_static(tracks: &TrackSet2D, varpi: usize) -> (TrackSet2D, DownsampleIndex) {
    let v = varpi as f64;
    let key = |i: usize| {
        let p = tracks.spawn_pos(i);
        (
            tracks.spawn_frame[i],
            (p.x / v).round() as i64,
            (p.y / v).round() as i64,
        )
    };
    let mut first: HashMap<(usize, i64, i64), usize> = HashMap::new();
    for i in 0..tracks.n {
        first.entry(key(i)).or_insert(i);
    }
    let mut retained: Vec<usize> = first.values().copied().collect();
    retained.sort_unstable();
    let coarse_of: HashMap<usize, usize> =
        retained.iter().enumerate().map(|(c, &f)| (f, c)).collect();
    let assign = (0..tracks.n).map(|i| coarse_of[&first[&key(i)]]).collect();
    (
        tracks.select(&retained),
        DownsampleIndex { retained, assign },
    )
}

/// Reconstruct full-resolution anchors from optimized coarse anchors by
/// inverse-distance interpolation in each spawn frame's camera space,
/// over the `r + 1` nearest coarse points visible in that frame.
pub fn upsample_trajectories(
    coarse_anchors: &[Vector3<f64>],
    coarse_tracks: &TrackSet2D,
    coarse_depths: &[f64],
    full_tracks: &TrackSet2D,
    full_depths: &[f64],
    r: usize,
) -> Result<Vec<Vector3<f64>>, DynError> {
    let tn = full_tracks.t;
    let cam_lift = |p: Vector2<f64>, d: f64| Vector3::new(p.x * d, p.y * d, d);
    // per-frame camera-centric coarse points (pixel-scaled lift is enough
    // for neighbor geometry; intrinsics cancel in relative distances)
    let mut per_frame: Vec<Vec<(usize, Vector3<f64>)>> = vec![Vec::new(); tn];
    for c in 0..coarse_tracks.n {
        for t in 0..tn {
            if coarse_tracks.visible(c, t) && coarse_depths[c * tn + t] > 0.0 {
                per_frame[t].push((
                    c,
                    cam_lift(coarse_tracks.pos(c, t), coarse_depths[c * tn + t]),
                ));
            }
        }
    }
    let mut anchors = Vec::with_capacity(full_tracks.n);
    for i in 0..full_tracks.n {
        let t = full_tracks.spawn_frame[i];
        let cands = &per_frame[t];
        if cands.is_empty() {
            return Err(DynError::NoVisibleCoarseNeighbors { track: i, frame: t });
        }
        let p = cam_lift(full_tracks.pos(i, t), full_depths[i * tn + t]);
        let mut scored: Vec<(f64, usize)> =
            cands.iter().map(|&(c, q)| ((q - p).norm(), c)).collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        scored.truncate(r + 1);
        if scored[0].0 < 1e-12 {
            // exact hit: that coarse point wins outright
            anchors.push(coarse_anchors[scored[0].1]);
            continue;
        }
        let weights: Vec<f64> = scored.iter().map(|&(d, _)| 1.0 / (d + EPS_NUM)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = Vector3::zeros();
        for (&(_, c), w) in scored.iter().zip(&weights) {
            acc += coarse_anchors[c] * (w / total);
        }
        anchors.push(acc);
    }
    Ok(anchors)
}

/// Align a raw depth frame to the tracked depths. Each tracked point
/// carries a local scale ratio; every pixel blends the ratios of its `k`
/// nearest tracked points in raw-depth 3D space.
pub fn propagate_depth(
    raw: &[f64],
    h: usize,
    w: usize,
    track_px: &[Vector2<f64>],
    track_depths: &[f64],
    cam: &CameraModel,
    k: usize,
) -> Result<Vec<f64>, DynError> {
    let sample = |p: Vector2<f64>| {
        let x = p.x.clamp(0.0, (w - 1) as f64);
        let y = p.y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        raw[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
            + raw[y0 * w + x1] * fx * (1.0 - fy)
            + raw[y1 * w + x0] * (1.0 - fx) * fy
            + raw[y1 * w + x1] * fx * fy
    };
    // tracked points with usable raw depth
    let mut anchors: Vec<(Vector3<f64>, f64)> = Vec::new(); // (3D, ratio)
    for (p, &d) in track_px.iter().zip(track_depths) {
        let draw = sample(*p);
        if draw <= 0.0 {
            continue;
        }
        anchors.push((cam.lift(*p, draw), d / draw));
    }
    if anchors.is_empty() {
        return Err(DynError::ZeroRawDepth);
    }
    let mut aligned = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let draw = raw[y * w + x];
            if draw <= 0.0 {
                aligned[y * w + x] = draw;
                continue;
            }
            let p = cam.lift(Vector2::new(x as f64, y as f64), draw);
            let mut scored: Vec<(f64, f64)> = anchors
                .iter()
                .map(|&(q, ratio)| ((q - p).norm(), ratio))
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            scored.truncate(k);
            let weights: Vec<f64> = scored.iter().map(|&(d, _)| 1.0 / (d + EPS_NUM)).collect();
            let total: f64 = weights.iter().sum();
            let ratio: f64 = scored
                .iter()
                .zip(&weights)
                .map(|(&(_, r), w)| r * (w / total))
                .sum();
            aligned[y * w + x] = ratio * draw;
        }
    }
    Ok(aligned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::SolverConfig;
    use crate::synth::{generate, ObjectKind, ObjectSpec, SynthConfig, SynthScene};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mover_scene(points: usize, frames: usize) -> SynthScene {
        generate(&SynthConfig {
            frames,
            static_points: 40,
            objects: vec![ObjectSpec {
                kind: ObjectKind::Rigid,
                points,
                center: [0.0, 0.0, -1.0],
                extent: 0.8,
                velocity: [0.02, 0.01, 0.0],
                spin_deg_per_frame: 0.0,
                hidden: false,
            }],
            ..Default::default()
        })
        .unwrap()
    }

    fn dyn_inputs(scene: &SynthScene) -> (TrackSet2D, Vec<f64>, Vec<usize>) {
        // restrict to the mover's tracks, exact depths
        let tn = scene.frames();
        let idx: Vec<usize> = (0..scene.n).filter(|&i| scene.labels[i] != 0).collect();
        let mut positions = Vec::new();
        let mut visible = Vec::new();
        let mut spawn = Vec::new();
        for &i in &idx {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
            spawn.push((0..tn).find(|&t| scene.is_visible(i, t)).unwrap());
        }
        let ts = TrackSet2D::new(idx.len(), tn, positions, visible, spawn);
        let mut depths = vec![0.0; idx.len() * tn];
        for (row, &i) in idx.iter().enumerate() {
            for t in 0..tn {
                depths[row * tn + t] = scene.gt_track_depth(i, t);
            }
        }
        (ts, depths, idx)
    }

    #[test]
    fn init_matches_truth_when_visible() {
        let scene = mover_scene(12, 6);
        let (ts, depths, idx) = dyn_inputs(&scene);
        let d = init_dynamic(&ts, &depths, &scene.gt_poses, &scene.cam, 4).unwrap();
        for (row, &i) in idx.iter().enumerate() {
            for t in 0..ts.t {
                if ts.visible(row, t) {
                    assert!(
                        (d.pos(row, t) - scene.gt_pos(i, t)).norm() < 1e-6,
                        "track {row} frame {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn occluded_midpoint_interpolates() {
        let cam = CameraModel::new(10.0, 10.0, 5.0, 5.0);
        let poses = vec![PoseSE3::identity(); 3];
        let p = Vector2::new(5.0, 5.0);
        let ts = TrackSet2D::new(1, 3, vec![p, p, p], vec![true, false, true], vec![0]);
        let d = init_dynamic(&ts, &[2.0, 0.0, 2.0], &poses, &cam, 1).unwrap();
        assert_relative_eq!((d.pos(0, 1) - d.pos(0, 0)).norm(), 0.0, epsilon = 1e-12);
        // and leading/trailing extrapolation is constant
        let ts2 = TrackSet2D::new(1, 3, vec![p, p, p], vec![false, true, false], vec![1]);
        let d2 = init_dynamic(&ts2, &[0.0, 2.0, 0.0], &poses, &cam, 1).unwrap();
        assert_eq!(d2.pos(0, 0), d2.pos(0, 1));
        assert_eq!(d2.pos(0, 2), d2.pos(0, 1));
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        for i in 0..pts.len() {
            let got = knn_of(&pts, i, 4);
            // brute force: all pairs, pick 4 smallest
            let mut all: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| ((pts[j] - pts[i]).norm(), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(4).map(|&(_, j)| j).collect();
            assert_eq!(got, want);
            assert!(!got.contains(&i));
        }
    }

    #[test]
    fn arap_zero_iff_constant_differences() {
        // global per-frame translation -> zero
        let base: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 1.0))
            .collect();
        let tn = 4;
        let mut positions = Vec::new();
        for b in &base {
            for t in 0..tn {
                positions.push(b + Vector3::new(0.3, -0.1, 0.2) * t as f64);
            }
        }
        let knn = (0..5).map(|i| knn_of(&base, i, 2)).collect();
        let mut d = DynamicTrackSet {
            n: 5,
            t: tn,
            positions,
            visible: vec![true; 5 * tn],
            knn,
        };
        assert!(loss_arap(&d) < 1e-12);
        // perturb one point at one frame -> strictly positive
        d.positions[2 * tn + 2].x += 0.5;
        assert!(loss_arap(&d) > 1e-4);
    }

    #[test]
    fn arap_closed_form_single_move() {
        // two mutually neighboring points; one moves +1 in x at t=1 only
        let positions = vec![
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 0.0), // moved below
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        let mut d = DynamicTrackSet {
            n: 2,
            t: 2,
            positions,
            visible: vec![true; 4],
            knn: vec![vec![1], vec![0]],
        };
        d.positions[1].x += 1.0; // point 0, frame 1
                                 // each directed edge sees the same squared change: 2 edges x 1.0
        assert_relative_eq!(loss_arap(&d), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ts_closed_form() {
        let d = DynamicTrackSet {
            n: 1,
            t: 2,
            positions: vec![Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)],
            visible: vec![true; 2],
            knn: vec![vec![]],
        };
        assert_relative_eq!(loss_ts(&d), 0.25, epsilon = 1e-12);
        let still = DynamicTrackSet {
            positions: vec![Vector3::zeros(); 2],
            ..d
        };
        assert_eq!(loss_ts(&still), 0.0);
    }

    #[test]
    fn losses_match_brute_force_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 6;
            let tn = 5;
            let positions: Vec<Vector3<f64>> = (0..n * tn)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let spawn: Vec<Vector3<f64>> = (0..n).map(|i| positions[i * tn]).collect();
            let knn: Vec<Vec<usize>> = (0..n).map(|i| knn_of(&spawn, i, 3)).collect();
            let d = DynamicTrackSet {
                n,
                t: tn,
                positions: positions.clone(),
                visible: vec![true; n * tn],
                knn: knn.clone(),
            };
            let mut arap = 0.0;
            let mut ts = 0.0;
            for t in 1..tn {
                for k in 0..n {
                    ts += (positions[k * tn + t] - positions[k * tn + t - 1]).norm_squared();
                    for &j in &knn[k] {
                        arap += ((positions[k * tn + t] - positions[j * tn + t])
                            - (positions[k * tn + t - 1] - positions[j * tn + t - 1]))
                            .norm_squared();
                    }
                }
            }
            assert_relative_eq!(loss_arap(&d), arap, epsilon = 1e-10, max_relative = 1e-12);
            assert_relative_eq!(loss_ts(&d), ts, epsilon = 1e-10, max_relative = 1e-12);
        }
    }

    #[test]
    fn dyn_gradient_matches_fd() {
        let scene = mover_scene(8, 4);
        let (ts, depths, _) = dyn_inputs(&scene);
        let d = init_dynamic(&ts, &depths, &scene.gt_poses, &scene.cam, 3).unwrap();
        let objective = DynObjective {
            tracks: &ts,
            depths: &depths,
            poses: &scene.gt_poses,
            cam: &scene.cam,
            knn: &d.knn,
            lambda_ba: 1.0,
            lambda_dc: 1.0,
            lambda_arap: 100.0,
            lambda_ts: 10.0,
            clamp: 905.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..5 {
            let points: Vec<Vector3<f64>> = d
                .positions
                .iter()
                .map(|p| {
                    p + Vector3::new(
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                    )
                })
                .collect();
            let params = ParamBlocks::new(vec![], points);
            let err = crate::solver::grad_check(&objective, &params, 1e-5);
            assert!(err < 1e-4, "trial {trial}: grad err {err}");
        }
    }

    #[test]
    fn losses_vanish_at_truth_for_rigid_translation() {
        // a purely translating rigid object has zero ARAP at truth; TS is
        // not zero (it moves) but ba/dc are
        let scene = mover_scene(10, 6);
        let (ts, depths, idx) = dyn_inputs(&scene);
        let tn = ts.t;
        let mut positions = Vec::new();
        for &i in &idx {
            for t in 0..tn {
                positions.push(scene.gt_pos(i, t));
            }
        }
        let spawn: Vec<Vector3<f64>> = idx.iter().map(|&i| scene.gt_pos(i, 0)).collect();
        let d = DynamicTrackSet {
            n: idx.len(),
            t: tn,
            positions,
            visible: (0..idx.len() * tn)
                .map(|j| ts.visible(j / tn, j % tn))
                .collect(),
            knn: (0..idx.len()).map(|i| knn_of(&spawn, i, 4)).collect(),
        };
        assert!(loss_arap(&d) < 1e-10, "arap at truth {}", loss_arap(&d));
        let objective = DynObjective {
            tracks: &ts,
            depths: &depths,
            poses: &scene.gt_poses,
            cam: &scene.cam,
            knn: &d.knn,
            lambda_ba: 1.0,
            lambda_dc: 1.0,
            lambda_arap: 0.0,
            lambda_ts: 0.0,
            clamp: 905.0,
        };
        let params = ParamBlocks::new(vec![], d.positions.clone());
        assert!(objective.eval(&params) < 1e-10);
    }

    fn fast_cfg(iters: usize) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.solver = SolverConfig {
            max_iters: iters,
            step: 1e-3,
            tol: 1e-14,
            grad_check: false,
        };
        cfg
    }

    #[test]
    fn rigid_mover_recovered_within_tolerance() {
        // the first-order smoothness prior biases endpoint frames along
        // their viewing rays by roughly lambda_ts/lambda_dc x velocity x
        // off-axis angle, so the 1e-4 recovery tolerance presumes a slow
        // mover near the orbit axis
        let scene = generate(&SynthConfig {
            frames: 8,
            width: 128,
            height: 128,
            static_points: 40,
            objects: vec![ObjectSpec {
                kind: ObjectKind::Rigid,
                points: 16,
                center: [0.0, 0.0, -0.5],
                extent: 0.6,
                velocity: [1e-4, 5e-5, 0.0],
                spin_deg_per_frame: 0.0,
                hidden: false,
            }],
            ..Default::default()
        })
        .unwrap();
        let (ts, depths, idx) = dyn_inputs(&scene);
        let init = init_dynamic(&ts, &depths, &scene.gt_poses, &scene.cam, 4).unwrap();
        let out = optimize_dynamic(
            &init,
            &ts,
            &depths,
            &scene.gt_poses,
            &scene.cam,
            &fast_cfg(8000),
            181.0,
        )
        .unwrap();
        for (row, &i) in idx.iter().enumerate() {
            for t in 0..ts.t {
                if ts.visible(row, t) {
                    let err = (out.pos(row, t) - scene.gt_pos(i, t)).norm();
                    assert!(err < 1e-4, "track {row} frame {t}: {err}");
                }
            }
        }
        assert!(loss_arap(&out) < 1e-8);
    }

    #[test]
    fn zero_regularizers_keep_init() {
        let scene = mover_scene(8, 5);
        let (ts, depths, _) = dyn_inputs(&scene);
        let init = init_dynamic(&ts, &depths, &scene.gt_poses, &scene.cam, 3).unwrap();
        let mut cfg = fast_cfg(200);
        cfg.lambda_arap = 0.0;
        cfg.lambda_ts = 0.0;
        let out =
            optimize_dynamic(&init, &ts, &depths, &scene.gt_poses, &scene.cam, &cfg, 90.5).unwrap();
        for (a, b) in init.positions.iter().zip(&out.positions) {
            assert!((a - b).norm() < 1e-6, "moved from a zero-loss init");
        }
    }

    #[test]
    fn depth_noise_reduced_by_optimization() {
        let scene = mover_scene(20, 8);
        let (ts, mut depths, idx) = dyn_inputs(&scene);
        let clean = depths.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for d in depths.iter_mut() {
            *d *= 1.0 + rng.gen_range(-0.01..0.01);
        }
        let init = init_dynamic(&ts, &depths, &scene.gt_poses, &scene.cam, 4).unwrap();
        let out = optimize_dynamic(
            &init,
            &ts,
            &depths,
            &scene.gt_poses,
            &scene.cam,
            &fast_cfg(1500),
            90.5,
        )
        .unwrap();
        let mut err_in = 0.0;
        let mut err_out = 0.0;
        let mut count = 0.0;
        for (row, &i) in idx.iter().enumerate() {
            for t in 0..ts.t {
                if !ts.visible(row, t) {
                    continue;
                }
                let _ = i;
                err_in += (depths[row * ts.t + t] - clean[row * ts.t + t]).abs();
                let d_opt = scene.gt_poses[t].transform(&out.pos(row, t)).z;
                err_out += (d_opt - clean[row * ts.t + t]).abs();
                count += 1.0;
            }
        }
        assert!(
            err_out / count < err_in / count,
            "optimization did not reduce depth error: {} vs {}",
            err_out / count,
            err_in / count
        );
    }

    #[test]
    fn downsample_identity_at_varpi_one() {
        let scene = mover_scene(8, 4);
        let tn = scene.frames();
        let mut positions = Vec::new();
        let mut visible = Vec::new();
        let mut spawn = Vec::new();
        for i in 0..scene.n {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
            spawn.push((0..tn).find(|&t| scene.is_visible(i, t)).unwrap());
        }
        let ts = TrackSet2D::new(scene.n, tn, positions, visible, spawn);
        let (coarse, index) = downsample_static(&ts, 1);
        // generator spawns at unique integer pixels per frame
        assert_eq!(coarse.n, ts.n);
        assert_eq!(index.retained, (0..ts.n).collect::<Vec<_>>());
    }

    #[test]
    fn downsample_quantization_cell() {
        let mut positions = Vec::new();
        for p in [(0.0, 0.0), (0.9, 0.0), (0.0, 0.9), (0.9, 0.9)] {
            positions.push(Vector2::new(p.0, p.1));
        }
        let ts = TrackSet2D::new(4, 1, positions, vec![true; 4], vec![0; 4]);
        let (coarse, index) = downsample_static(&ts, 2);
        // keys: round(p/2) -> (0,0) for all four
        assert_eq!(coarse.n, 1);
        assert_eq!(index.assign, vec![0, 0, 0, 0]);
    }

    #[test]
    fn downsample_matches_brute_force_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let n = 60;
            let positions: Vec<Vector2<f64>> = (0..n)
                .map(|_| Vector2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)))
                .collect();
            let ts = TrackSet2D::new(n, 1, positions.clone(), vec![true; n], vec![0; n]);
            let (_, index) = downsample_static(&ts, 4);
            // brute force
            let mut seen: Vec<((usize, i64, i64), usize)> = Vec::new();
            let mut retained = Vec::new();
            for (i, p) in positions.iter().enumerate() {
                let k = (
                    0usize,
                    (p.x / 4.0).round() as i64,
                    (p.y / 4.0).round() as i64,
                );
                if !seen.iter().any(|&(sk, _)| sk == k) {
                    seen.push((k, i));
                    retained.push(i);
                }
            }
            assert_eq!(index.retained, retained);
        }
    }

    #[test]
    fn upsample_constant_anchors_and_convexity() {
        let scene = mover_scene(8, 4);
        let tn = scene.frames();
        let mut positions = Vec::new();
        let mut visible = Vec::new();
        let mut spawn = Vec::new();
        for i in 0..scene.n {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
            spawn.push((0..tn).find(|&t| scene.is_visible(i, t)).unwrap());
        }
        let ts = TrackSet2D::new(scene.n, tn, positions, visible, spawn);
        let mut depths = vec![0.0; ts.n * tn];
        for i in 0..ts.n {
            for t in 0..tn {
                depths[i * tn + t] = scene.gt_track_depth(i, t).max(0.0);
            }
        }
        let (coarse, index) = downsample_static(&ts, 4);
        let cdepths: Vec<f64> = index
            .retained
            .iter()
            .flat_map(|&i| (0..tn).map(move |t| (i, t)))
            .map(|(i, t)| depths[i * tn + t])
            .collect();
        let c = Vector3::new(0.4, -0.2, 1.5);
        let anchors = vec![c; coarse.n];
        let up = upsample_trajectories(&anchors, &coarse, &cdepths, &ts, &depths, 4).unwrap();
        for a in &up {
            assert!((a - c).norm() < 1e-9, "constant field not reproduced");
        }
    }

    #[test]
    fn down_up_roundtrip_identity_at_varpi_one() {
        let scene = mover_scene(8, 4);
        let tn = scene.frames();
        let mut positions = Vec::new();
        let mut visible = Vec::new();
        let mut spawn = Vec::new();
        for i in 0..scene.n {
            for t in 0..tn {
                positions.push(scene.track(i, t));
                visible.push(scene.is_visible(i, t));
            }
            spawn.push((0..tn).find(|&t| scene.is_visible(i, t)).unwrap());
        }
        let ts = TrackSet2D::new(scene.n, tn, positions, visible, spawn);
        let mut depths = vec![0.0; ts.n * tn];
        for i in 0..ts.n {
            for t in 0..tn {
                depths[i * tn + t] = scene.gt_track_depth(i, t).max(0.0);
            }
        }
        let (coarse, _index) = downsample_static(&ts, 1);
        assert_eq!(coarse.n, ts.n);
        let anchors: Vec<Vector3<f64>> = (0..ts.n)
            .map(|i| Vector3::new(i as f64 * 0.1, -(i as f64) * 0.05, 1.0 + i as f64 * 0.01))
            .collect();
        let cdepths = depths.clone();
        let up = upsample_trajectories(&anchors, &coarse, &cdepths, &ts, &depths, 4).unwrap();
        for (a, b) in anchors.iter().zip(&up) {
            assert!((a - b).norm() < 1e-9, "round trip not identity");
        }
    }

    #[test]
    fn propagate_constant_ratio_exact() {
        let (h, w) = (12, 12);
        let cam = CameraModel::new(12.0, 12.0, 5.5, 5.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..h * w).map(|_| rng.gen_range(1.0..4.0)).collect();
        let px: Vec<Vector2<f64>> = (0..6)
            .map(|_| Vector2::new(rng.gen_range(0.0..11.0), rng.gen_range(0.0..11.0)))
            .collect();
        let sample = |p: &Vector2<f64>| {
            let (x0, y0) = (p.x.floor() as usize, p.y.floor() as usize);
            let (fx, fy) = (p.x - x0 as f64, p.y - y0 as f64);
            raw[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
                + raw[y0 * w + x0 + 1] * fx * (1.0 - fy)
                + raw[(y0 + 1) * w + x0] * (1.0 - fx) * fy
                + raw[(y0 + 1) * w + x0 + 1] * fx * fy
        };
        let tracked: Vec<f64> = px.iter().map(|p| 2.0 * sample(p)).collect();
        let aligned = propagate_depth(&raw, h, w, &px, &tracked, &cam, 4).unwrap();
        for (a, r) in aligned.iter().zip(&raw) {
            assert_relative_eq!(*a, 2.0 * r, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn propagate_single_point_and_brute_force() {
        let (h, w) = (16, 16);
        let cam = CameraModel::new(16.0, 16.0, 7.5, 7.5);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let raw: Vec<f64> = (0..h * w).map(|_| rng.gen_range(1.0..4.0)).collect();
        // single tracked point: every pixel gets its ratio
        let px1 = vec![Vector2::new(3.0, 4.0)];
        let r1 = 1.7;
        let d1 = vec![raw[4 * w + 3] * r1];
        let one = propagate_depth(&raw, h, w, &px1, &d1, &cam, 4).unwrap();
        for (a, r) in one.iter().zip(&raw) {
            assert_relative_eq!(*a, r1 * r, epsilon = 1e-10, max_relative = 1e-10);
        }
        // random ratios vs brute force, k = 4
        let px: Vec<Vector2<f64>> = (0..10)
            .map(|_| {
                Vector2::new(
                    rng.gen_range(0.0f64..15.0).floor(),
                    rng.gen_range(0.0f64..15.0).floor(),
                )
            })
            .collect();
        let ratios: Vec<f64> = (0..10).map(|_| rng.gen_range(0.5..2.0)).collect();
        let tracked: Vec<f64> = px
            .iter()
            .zip(&ratios)
            .map(|(p, r)| raw[p.y as usize * w + p.x as usize] * r)
            .collect();
        let aligned = propagate_depth(&raw, h, w, &px, &tracked, &cam, 4).unwrap();
        for y in 0..h {
            for x in 0..w {
                let p = cam.lift(Vector2::new(x as f64, y as f64), raw[y * w + x]);
                let mut scored: Vec<(f64, f64)> = px
                    .iter()
                    .zip(&ratios)
                    .map(|(q, &r)| {
                        let qd = raw[q.y as usize * w + q.x as usize];
                        ((cam.lift(*q, qd) - p).norm(), r)
                    })
                    .collect();
                scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                scored.truncate(4);
                let wsum: f64 = scored.iter().map(|&(d, _)| 1.0 / (d + EPS_NUM)).sum();
                let want: f64 = scored
                    .iter()
                    .map(|&(d, r)| (1.0 / (d + EPS_NUM)) / wsum * r)
                    .sum::<f64>()
                    * raw[y * w + x];
                assert_relative_eq!(
                    aligned[y * w + x],
                    want,
                    epsilon = 1e-10,
                    max_relative = 1e-10
                );
            }
        }
    }

    #[test]
    fn propagate_all_zero_raw_rejected() {
        let cam = CameraModel::new(4.0, 4.0, 1.5, 1.5);
        let raw = vec![0.0; 16];
        let got = propagate_depth(&raw, 4, 4, &[Vector2::new(1.0, 1.0)], &[2.0], &cam, 2);
        assert!(matches!(got, Err(DynError::ZeroRawDepth)));
    }
}
