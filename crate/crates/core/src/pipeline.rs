//! End-to-end driver: ingest a scene directory, split tracks by the coarse
//! masks, run the three optimization stages (optionally on a quantized
//! coarse subset of the static tracks), and emit poses, world trajectories,
//! aligned depth, and an evaluation report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dyntrack::{
    downsample_static, init_dynamic, optimize_dynamic_traced, propagate_depth,
    upsample_trajectories, DynError,
};
use crate::geometry::{cam_depth, project, PoseSE3};
use crate::metrics::{
    depth_metrics, flow_metrics, splat_track_depths, tracking3d_metrics, traj_metrics, umeyama,
    EvalReport, MetricsError,
};
use crate::pose_init::{estimate_poses, PoseInitError};
use crate::refine::{
    classify_dynamic_background, init_static_anchors, loss_asap, loss_ba, loss_dc,
    refine_static_opts, RefineError,
};
use crate::tensorio::{
    load_scene, read_poses, read_tensor, write_poses, write_tensor, IoError, SceneBundle,
    TensorFile,
};
use crate::trackset::{split_by_mask, upsample_tracks, TrackError, TrackSet2D};

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("input: {0}")]
    Input(#[from] IoError),
    #[error("stage 1: {0}")]
    Stage1(#[from] PoseInitError),
    #[error("stage 2: {0}")]
    Stage2(#[from] RefineError),
    #[error("stage 3: {0}")]
    Stage3(#[from] DynError),
    #[error("eval: {0}")]
    Eval(#[from] MetricsError),
    #[error("densify: {0}")]
    Densify(#[from] TrackError),
    #[error("no static tracks outside the masks")]
    NoStaticTracks,
}

impl PipelineError {
    /// True for malformed or missing inputs (CLI exit code 2); everything
    /// else counts as a numerical failure (exit code 3).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Input(_) | PipelineError::Densify(_) | PipelineError::NoStaticTracks
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub no_speedup: bool,
    pub depth_out: bool,
    pub eval_dir: Option<PathBuf>,
    /// Stop after stage N (1..=3).
    pub stage: Option<u8>,
    pub resume: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub input_dir: String,
    pub output_dir: String,
    pub config_hash: String,
    pub stage_timings_s: BTreeMap<String, f64>,
    pub stage_losses: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Internal checkpoint so `--resume` can skip completed stages.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunState {
    completed: Vec<String>,
    dynamic_background: Vec<bool>,
    config_hash: String,
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn traj_tensor(positions: &[Vector3<f64>], n: usize, t: usize) -> TensorFile {
    let mut data = Vec::with_capacity(n * t * 3);
    for p in positions {
        data.push(p.x as f32);
        data.push(p.y as f32);
        data.push(p.z as f32);
    }
    TensorFile::f32(vec![n, t, 3], data)
}

fn read_traj(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let t = read_tensor(path)?;
    let data = t.as_f32().ok_or(IoError::UnsupportedDtype(1))?;
    Ok(data
        .chunks(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect())
}

/// Per-iteration loss curves, one row per (stage, iteration).
fn write_losses_csv(path: &Path, curves: &BTreeMap<String, Vec<f64>>) -> Result<(), IoError> {
    let mut out = String::from("stage,iter,loss\n");
    for (stage, history) in curves {
        for (i, l) in history.iter().enumerate() {
            out.push_str(&format!("{stage},{i},{l}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Everything the report carries besides the metrics: config echo,
/// classification, track index mapping, final losses.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub metrics: EvalReport,
    pub config: serde_json::Value,
    pub losses: BTreeMap<String, f64>,
    /// Indices (into the input track set) optimized as static.
    pub static_indices: Vec<usize>,
    /// Indices optimized as dynamic (mask foreground plus reclassified).
    pub dynamic_indices: Vec<usize>,
    /// Per-static-track flag: reclassified as dynamic background.
    pub dynamic_background: Vec<bool>,
    pub warnings: Vec<String>,
}

pub fn run_pipeline(
    input_dir: &Path,
    output_dir: &Path,
    opts: &RunOptions,
) -> Result<RunManifest, PipelineError> {
    let mut scene = load_scene(input_dir)?;
    if scene.config.densify {
        let (dense, _) = upsample_tracks(
            &scene.tracks,
            scene.config.stride_s,
            4,
            scene.width,
            scene.height,
        )?;
        scene.tracks = dense;
    }
    fs::create_dir_all(output_dir).map_err(IoError::from)?;
    let config_hash = fnv1a(&serde_json::to_vec(&scene.config).map_err(IoError::from)?);
    let mut timings = BTreeMap::new();
    let mut losses = BTreeMap::new();
    let mut curves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();

    let tn = scene.frames();
    let diag = scene.image_diagonal();
    let cfg = &scene.config;

    // partition tracks by the coarse dynamic masks
    let split = split_by_mask(&scene.tracks, &scene.masks, scene.width, scene.height);
    if split.static_set.n == 0 {
        return Err(PipelineError::NoStaticTracks);
    }
    let static_full = split.static_set;
    let static_depths = scene.track_depth(&static_full);

    // optional coarse subset for stages 1-2
    let speedup = !opts.no_speedup && cfg.downsample_varpi > 1;
    let (work_set, work_depths, down_index) = if speedup {
        let (coarse, index) = downsample_static(&static_full, cfg.downsample_varpi);
        let depths = scene.track_depth(&coarse);
        (coarse, depths, Some(index))
    } else {
        (static_full.clone(), static_depths.clone(), None)
    };

    let state_path = output_dir.join("run_state.json");
    let mut state: RunState = if opts.resume && state_path.exists() {
        read_json(&state_path)?
    } else {
        RunState {
            config_hash: config_hash.clone(),
            ..Default::default()
        }
    };
    if state.config_hash != config_hash {
        // inputs changed; a stale checkpoint must not be resumed
        state = RunState {
            config_hash: config_hash.clone(),
            ..Default::default()
        };
    }
    let done = |state: &RunState, s: &str| state.completed.iter().any(|c| c == s);

    // ---- stage 1: clip poses -------------------------------------------
    let poses_path = output_dir.join("poses.json");
    let mut poses: Vec<PoseSE3>;
    if done(&state, "stage1") && poses_path.exists() {
        poses = read_poses(&poses_path)?;
    } else {
        let t0 = Instant::now();
        let (global, clips) = estimate_poses(&work_set, &work_depths, &scene.cam, cfg, diag)?;
        poses = global;
        let total: f64 = clips.iter().map(|c| c.final_loss).sum();
        losses.insert("stage1".to_string(), total);
        curves.insert(
            "stage1".to_string(),
            clips.iter().map(|c| c.final_loss).collect(),
        );
        for c in &clips {
            if c.degenerate {
                warnings.push(format!(
                    "degenerate geometry in clip starting at frame {}; identity poses kept",
                    c.start
                ));
            }
        }
        timings.insert("stage1".to_string(), t0.elapsed().as_secs_f64());
        write_poses(&poses_path, &poses)?;
        state.completed.push("stage1".to_string());
        write_json_atomic(&state_path, &state)?;
    }

    let traj_static_path = output_dir.join("traj_static.wt");
    let anchors_path = output_dir.join("anchors_static.wt");
    let mut dyn_background = state.dynamic_background.clone();
    let mut full_static_traj: Vec<Vector3<f64>> = Vec::new();

    if opts.stage != Some(1) {
        // ---- stage 2: joint refinement ---------------------------------
        if done(&state, "stage2") && traj_static_path.exists() {
            poses = read_poses(&poses_path)?;
            full_static_traj = read_traj(&traj_static_path)?;
        } else {
            let t0 = Instant::now();
            let model = init_static_anchors(&work_set, &work_depths, &poses, &scene.cam)?;
            let (refined_poses, refined, history) = refine_static_opts(
                &model,
                &poses,
                &work_set,
                &work_depths,
                &scene.cam,
                cfg,
                diag,
                false,
            )?;
            poses = refined_poses;
            let work_mask = classify_dynamic_background(&refined, cfg.epsilon);
            losses.insert("stage2".to_string(), *history.last().unwrap_or(&f64::NAN));
            losses.insert(
                "stage2_ba".to_string(),
                loss_ba(&refined, &poses, &scene.cam, &work_set, diag),
            );
            losses.insert(
                "stage2_dc".to_string(),
                loss_dc(&refined, &poses, &work_set, &work_depths),
            );
            losses.insert("stage2_asap".to_string(), loss_asap(&refined));
            curves.insert("stage2".to_string(), history);

            // back to full resolution
            let (anchors_full, offsets_full): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) =
                match &down_index {
                    Some(index) => {
                        let anchors = upsample_trajectories(
                            &refined.anchors,
                            &work_set,
                            &work_depths,
                            &static_full,
                            &static_depths,
                            cfg.knn_r,
                        )?;
                        let offsets = (0..static_full.n * tn)
                            .map(|j| refined.offset(index.assign[j / tn], j % tn))
                            .collect();
                        (anchors, offsets)
                    }
                    None => (refined.anchors.clone(), refined.offsets.clone()),
                };
            dyn_background = match &down_index {
                Some(index) => (0..static_full.n)
                    .map(|i| work_mask[index.assign[i]])
                    .collect(),
                None => work_mask,
            };
            full_static_traj = (0..static_full.n * tn)
                .map(|j| anchors_full[j / tn] + offsets_full[j])
                .collect();
            write_tensor(
                &traj_static_path,
                &traj_tensor(&full_static_traj, static_full.n, tn),
            )?;
            write_tensor(&anchors_path, &traj_tensor(&anchors_full, static_full.n, 1))?;
            write_poses(&poses_path, &poses)?;
            timings.insert("stage2".to_string(), t0.elapsed().as_secs_f64());
            state.completed.push("stage2".to_string());
            state.dynamic_background = dyn_background.clone();
            write_json_atomic(&state_path, &state)?;
        }
    }

    // final track partition: mask foreground plus reclassified background
    let mut dynamic_indices: Vec<usize> = split.dynamic_idx.clone();
    let reclassified: Vec<usize> = dyn_background
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d)
        .map(|(i, _)| split.static_idx[i])
        .collect();
    dynamic_indices.extend(&reclassified);
    dynamic_indices.sort_unstable();

    let traj_dynamic_path = output_dir.join("traj_dynamic.wt");
    let mut dyn_traj: Vec<Vector3<f64>> = Vec::new();
    if opts.stage.is_none() || opts.stage == Some(3) {
        // ---- stage 3: dynamic tracking ----------------------------------
        if done(&state, "stage3") && traj_dynamic_path.exists() {
            dyn_traj = read_traj(&traj_dynamic_path)?;
        } else if dynamic_indices.is_empty() {
            warnings.push("no dynamic tracks; stage 3 skipped".to_string());
        } else {
            let t0 = Instant::now();
            let dyn_set2d = scene.tracks.select(&dynamic_indices);
            let dyn_depths = scene.track_depth(&dyn_set2d);
            let init = init_dynamic(&dyn_set2d, &dyn_depths, &poses, &scene.cam, cfg.knn_r)?;
            let (optimized, history) = optimize_dynamic_traced(
                &init,
                &dyn_set2d,
                &dyn_depths,
                &poses,
                &scene.cam,
                cfg,
                diag,
            )?;
            losses.insert("stage3".to_string(), *history.last().unwrap_or(&f64::NAN));
            curves.insert("stage3".to_string(), history);
            dyn_traj = optimized.positions.clone();
            write_tensor(&traj_dynamic_path, &traj_tensor(&dyn_traj, dyn_set2d.n, tn))?;
            timings.insert("stage3".to_string(), t0.elapsed().as_secs_f64());
            state.completed.push("stage3".to_string());
            write_json_atomic(&state_path, &state)?;
        }

        if opts.depth_out {
            let t0 = Instant::now();
            let aligned = propagate_all_frames(
                &scene,
                &poses,
                &static_full,
                &full_static_traj,
                &scene.tracks.select(&dynamic_indices),
                &dyn_traj,
            )?;
            write_tensor(
                &output_dir.join("aligned_depth.wt"),
                &TensorFile::f32(
                    vec![tn, scene.height, scene.width],
                    aligned.iter().map(|&d| d as f32).collect(),
                ),
            )?;
            timings.insert("depth_out".to_string(), t0.elapsed().as_secs_f64());
        }
    }

    // ---- report ---------------------------------------------------------
    let mut report = RunReport {
        config: serde_json::to_value(cfg).map_err(IoError::from)?,
        losses: losses.clone(),
        static_indices: split.static_idx.clone(),
        dynamic_indices: dynamic_indices.clone(),
        dynamic_background: dyn_background,
        warnings: warnings.clone(),
        ..Default::default()
    };
    // the evaluator reads the index mapping back from report.json, so the
    // report is written first and rewritten once metrics are known
    write_json_atomic(&output_dir.join("report.json"), &report)?;
    if let Some(gt_dir) = &opts.eval_dir {
        let (metrics, eval_warnings) = eval_only(output_dir, gt_dir)?;
        report.metrics = metrics;
        report.warnings.extend(eval_warnings);
        write_json_atomic(&output_dir.join("report.json"), &report)?;
    }
    write_losses_csv(&output_dir.join("losses.csv"), &curves)?;

    let manifest = RunManifest {
        input_dir: input_dir.display().to_string(),
        output_dir: output_dir.display().to_string(),
        config_hash,
        stage_timings_s: timings,
        stage_losses: losses,
        warnings: report.warnings.clone(),
    };
    write_json_atomic(&output_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A.4 depth propagation over every frame, fed by the camera-frame depths
/// of the optimized trajectories at their observed pixels.
fn propagate_all_frames(
    scene: &SceneBundle,
    poses: &[PoseSE3],
    static_set: &TrackSet2D,
    static_traj: &[Vector3<f64>],
    dyn_set: &TrackSet2D,
    dyn_traj: &[Vector3<f64>],
) -> Result<Vec<f64>, DynError> {
    let tn = scene.frames();
    let (h, w) = (scene.height, scene.width);
    let mut out = vec![0.0f64; tn * h * w];
    for t in 0..tn {
        let mut px = Vec::new();
        let mut depths = Vec::new();
        let mut collect = |set: &TrackSet2D, traj: &[Vector3<f64>]| {
            for i in 0..set.n {
                if !set.visible(i, t) {
                    continue;
                }
                let d = cam_depth(&poses[t], &traj[i * tn + t]);
                if d > 0.0 {
                    px.push(set.pos(i, t));
                    depths.push(d);
                }
            }
        };
        collect(static_set, static_traj);
        if !dyn_traj.is_empty() {
            collect(dyn_set, dyn_traj);
        }
        let raw: Vec<f64> = scene.depth.data[t * h * w..(t + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let aligned = propagate_depth(&raw, h, w, &px, &depths, &scene.cam, scene.config.knn_r)?;
        out[t * h * w..(t + 1) * h * w].copy_from_slice(&aligned);
    }
    Ok(out)
}

/// Score an output directory against a ground-truth scene directory.
/// Missing optional artifacts skip their metrics with a warning.
pub fn eval_only(
    est_dir: &Path,
    gt_dir: &Path,
) -> Result<(EvalReport, Vec<String>), PipelineError> {
    let mut report = EvalReport::default();
    let mut warnings = Vec::new();
    let gt_scene = load_scene(gt_dir)?;
    let tn = gt_scene.frames();

    // trajectory metrics
    let gt_poses_path = gt_dir.join("gt_poses.json");
    let est_poses_path = est_dir.join("poses.json");
    let mut est_poses: Option<Vec<PoseSE3>> = None;
    if est_poses_path.exists() && gt_poses_path.exists() {
        let est = read_poses(&est_poses_path)?;
        let gt = read_poses(&gt_poses_path)?;
        let (ate, rte, rre) = traj_metrics(&est, &gt)?;
        report.ate = Some(ate);
        report.rte = Some(rte);
        report.rre = Some(rre);
        est_poses = Some(est);
    } else {
        warnings.push("poses missing; trajectory metrics skipped".to_string());
    }

    // assemble the full estimated trajectory set in input order
    let gt_traj_path = gt_dir.join("gt_traj.wt");
    let report_path = est_dir.join("report.json");
    let mut est_traj: Option<Vec<Vector3<f64>>> = None;
    if gt_traj_path.exists() && report_path.exists() {
        let run: RunReport = read_json(&report_path)?;
        let n = gt_scene.tracks.n;
        let mut full = vec![Vector3::zeros(); n * tn];
        let mut filled = vec![false; n];
        let static_path = est_dir.join("traj_static.wt");
        if static_path.exists() {
            let stat = read_traj(&static_path)?;
            for (row, &i) in run.static_indices.iter().enumerate() {
                if run.dynamic_background.get(row) == Some(&true) {
                    continue; // superseded by the dynamic solution
                }
                full[i * tn..(i + 1) * tn].copy_from_slice(&stat[row * tn..(row + 1) * tn]);
                filled[i] = true;
            }
        }
        let dyn_path = est_dir.join("traj_dynamic.wt");
        if dyn_path.exists() {
            let dynt = read_traj(&dyn_path)?;
            for (row, &i) in run.dynamic_indices.iter().enumerate() {
                full[i * tn..(i + 1) * tn].copy_from_slice(&dynt[row * tn..(row + 1) * tn]);
                filled[i] = true;
            }
        }
        if filled.iter().all(|&f| f) {
            let gt_traj = read_traj(&gt_traj_path)?;
            // the estimate carries its own gauge (first pose identity);
            // compare 3D positions after mapping a copy into the
            // ground-truth frame with the same similarity the trajectory
            // metrics use (depth/flow metrics keep the original gauge)
            let mut aligned = full.clone();
            if let Some(est_p) = &est_poses {
                let gt_p = read_poses(&gt_poses_path)?;
                let est_c: Vec<Vector3<f64>> = est_p.iter().map(|p| p.center()).collect();
                let gt_c: Vec<Vector3<f64>> = gt_p.iter().map(|p| p.center()).collect();
                if let Ok((s, rot, tr)) = umeyama(&est_c, &gt_c) {
                    for p in aligned.iter_mut() {
                        *p = s * (rot * *p) + tr;
                    }
                }
            }
            // scene scale: ground-truth bounding box diagonal
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            for p in &gt_traj {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let scale = (hi - lo).norm().max(1e-12);
            let vis: Vec<bool> = (0..n * tn)
                .map(|j| gt_scene.tracks.visible(j / tn, j % tn))
                .collect();
            let (aj, apd, oa) = tracking3d_metrics(&aligned, &vis, &gt_traj, &vis, scale)?;
            report.aj = Some(aj);
            report.apd3d = Some(apd);
            report.oa = Some(oa);
            est_traj = Some(full);
        } else {
            warnings.push("incomplete trajectory coverage; tracking metrics skipped".to_string());
        }
    } else {
        warnings.push("gt_traj or report missing; tracking metrics skipped".to_string());
    }

    // depth metrics: prefer propagated depth, else splat trajectory depths
    let aligned_path = est_dir.join("aligned_depth.wt");
    let (h, w) = (gt_scene.height, gt_scene.width);
    if aligned_path.exists() {
        let est = read_tensor(&aligned_path)?;
        let est = est.as_f32().unwrap_or(&[]);
        let gt: Vec<f64> = gt_scene.depth.data.iter().map(|&v| v as f64).collect();
        let est: Vec<f64> = est.iter().map(|&v| v as f64).collect();
        match depth_metrics(&est, &gt) {
            Ok((ar, d)) => {
                report.abs_rel = Some(ar);
                report.delta_125 = Some(d);
            }
            Err(MetricsError::DegenerateFit) => {
                warnings.push("degenerate depth fit; depth metrics skipped".to_string())
            }
            Err(e) => return Err(e.into()),
        }
    } else if let (Some(traj), Some(poses)) = (&est_traj, &est_poses) {
        let n = gt_scene.tracks.n;
        let mut est_all = Vec::new();
        let mut gt_all = Vec::new();
        for t in 0..tn {
            let mut px = Vec::new();
            let mut ds = Vec::new();
            for i in 0..n {
                if !gt_scene.tracks.visible(i, t) {
                    continue;
                }
                let d = cam_depth(&poses[t], &traj[i * tn + t]);
                if d > 0.0 {
                    px.push(gt_scene.tracks.pos(i, t));
                    ds.push(d);
                }
            }
            let splat = splat_track_depths(&px, &ds, h, w);
            for (j, &d) in splat.iter().enumerate() {
                let g = gt_scene.depth.data[t * h * w + j] as f64;
                if d > 0.0 && g > 0.0 {
                    est_all.push(d);
                    gt_all.push(g);
                }
            }
        }
        match depth_metrics(&est_all, &gt_all) {
            Ok((ar, d)) => {
                report.abs_rel = Some(ar);
                report.delta_125 = Some(d);
            }
            Err(MetricsError::DegenerateFit) => {
                warnings.push("degenerate depth fit; depth metrics skipped".to_string())
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        warnings.push("no depth estimate; depth metrics skipped".to_string());
    }

    // flow metrics: reprojected trajectories vs ground-truth 2D tracks,
    // displacement from each track's spawn frame
    if let (Some(traj), Some(poses)) = (&est_traj, &est_poses) {
        let n = gt_scene.tracks.n;
        let mut est_flow = Vec::new();
        let mut gt_flow = Vec::new();
        let mut est_vis = Vec::new();
        let mut gt_vis = Vec::new();
        for i in 0..n {
            let s = gt_scene.tracks.spawn_frame[i];
            let base_est = match project(&poses[s], &gt_scene.cam, &traj[i * tn + s]) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let base_gt = gt_scene.tracks.pos(i, s);
            for t in 0..tn {
                let p = match project(&poses[t], &gt_scene.cam, &traj[i * tn + t]) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                est_flow.push(p - base_est);
                gt_flow.push(gt_scene.tracks.pos(i, t) - base_gt);
                est_vis.push(gt_scene.tracks.visible(i, t));
                gt_vis.push(gt_scene.tracks.visible(i, t));
            }
        }
        if !est_flow.is_empty() {
            let (epe, iou) = flow_metrics(&est_flow, &gt_flow, &est_vis, &gt_vis)?;
            report.epe = Some(epe);
            report.iou = Some(iou);
        }
    } else {
        warnings.push("no trajectories; flow metrics skipped".to_string());
    }

    Ok((report, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::SolverConfig;
    use crate::synth::{generate, write_scene, ObjectKind, ObjectSpec, SynthConfig};
    use crate::tensorio::PipelineConfig;

    fn small_scene_dir(dir: &Path, objects: bool) {
        let scene = generate(&SynthConfig {
            frames: 6,
            static_points: 90,
            objects: if objects {
                vec![ObjectSpec {
                    kind: ObjectKind::Rigid,
                    points: 8,
                    center: [0.0, 0.0, -0.8],
                    extent: 0.6,
                    velocity: [0.005, 0.002, 0.0],
                    spin_deg_per_frame: 0.0,
                    hidden: false,
                }]
            } else {
                vec![]
            },
            ..Default::default()
        })
        .unwrap();
        write_scene(&scene, dir).unwrap();
        // trim the solver budget so tests stay fast
        let cfg_path = dir.join("config.json");
        let mut cfg: PipelineConfig =
            serde_json::from_slice(&fs::read(&cfg_path).unwrap()).unwrap();
        cfg.solver = SolverConfig {
            max_iters: 300,
            step: 1e-3,
            tol: 1e-12,
            grad_check: false,
        };
        fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    }

    #[test]
    fn end_to_end_emits_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("scene");
        let out = tmp.path().join("out");
        small_scene_dir(&input, true);
        let opts = RunOptions {
            eval_dir: Some(input.clone()),
            depth_out: true,
            ..Default::default()
        };
        let manifest = run_pipeline(&input, &out, &opts).unwrap();
        for f in [
            "poses.json",
            "traj_static.wt",
            "traj_dynamic.wt",
            "report.json",
            "manifest.json",
            "losses.csv",
            "aligned_depth.wt",
        ] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        assert!(manifest.stage_losses.contains_key("stage1"));
        let report: RunReport = read_json(&out.join("report.json")).unwrap();
        assert!(report.metrics.ate.is_some());
        assert!(report.metrics.epe.is_some());
        // every input track lands in exactly one of the two partitions
        let n = report.static_indices.len() + report.dynamic_indices.len()
            - report.dynamic_background.iter().filter(|&&d| d).count();
        assert_eq!(n, 98);
    }

    #[test]
    fn stage_one_only_emits_poses() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("scene");
        let out = tmp.path().join("out");
        small_scene_dir(&input, false);
        let opts = RunOptions {
            stage: Some(1),
            ..Default::default()
        };
        run_pipeline(&input, &out, &opts).unwrap();
        assert!(out.join("poses.json").exists());
        assert!(!out.join("traj_static.wt").exists());
        assert!(!out.join("traj_dynamic.wt").exists());
    }

    #[test]
    fn deterministic_outputs_across_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("scene");
        small_scene_dir(&input, true);
        let out1 = tmp.path().join("a");
        let out2 = tmp.path().join("b");
        run_pipeline(&input, &out1, &RunOptions::default()).unwrap();
        run_pipeline(&input, &out2, &RunOptions::default()).unwrap();
        for f in ["poses.json", "traj_static.wt", "traj_dynamic.wt"] {
            let a = fs::read(out1.join(f)).unwrap();
            let b = fs::read(out2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between runs");
        }
    }

    #[test]
    fn resume_skips_completed_stages() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("scene");
        let out = tmp.path().join("out");
        small_scene_dir(&input, true);
        run_pipeline(
            &input,
            &out,
            &RunOptions {
                stage: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let poses_before = fs::read(out.join("poses.json")).unwrap();
        // resuming the full run must keep stage 1's artifact untouched
        // until stage 2 refines it, and produce the remaining outputs
        let manifest = run_pipeline(
            &input,
            &out,
            &RunOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!manifest.stage_timings_s.contains_key("stage1"));
        assert!(manifest.stage_timings_s.contains_key("stage2"));
        assert!(out.join("traj_dynamic.wt").exists());
        let _ = poses_before;
    }

    #[test]
    fn eval_of_ground_truth_is_ideal() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("scene");
        small_scene_dir(&input, true);
        // build an "estimate" directory from the ground truth itself
        let est = tmp.path().join("est");
        fs::create_dir_all(&est).unwrap();
        fs::copy(input.join("gt_poses.json"), est.join("poses.json")).unwrap();
        let scene = load_scene(&input).unwrap();
        let split = split_by_mask(&scene.tracks, &scene.masks, scene.width, scene.height);
        let gt_traj = read_traj(&input.join("gt_traj.wt")).unwrap();
        let tn = scene.frames();
        let pick = |idx: &[usize]| {
            let mut v = Vec::new();
            for &i in idx {
                v.extend_from_slice(&gt_traj[i * tn..(i + 1) * tn]);
            }
            v
        };
        let stat = pick(&split.static_idx);
        let dynt = pick(&split.dynamic_idx);
        write_tensor(
            &est.join("traj_static.wt"),
            &traj_tensor(&stat, split.static_idx.len(), tn),
        )
        .unwrap();
        write_tensor(
            &est.join("traj_dynamic.wt"),
            &traj_tensor(&dynt, split.dynamic_idx.len(), tn),
        )
        .unwrap();
        let report = RunReport {
            static_indices: split.static_idx.clone(),
            dynamic_indices: split.dynamic_idx.clone(),
            dynamic_background: vec![false; split.static_idx.len()],
            ..Default::default()
        };
        write_json_atomic(&est.join("report.json"), &report).unwrap();
        let (metrics, _) = eval_only(&est, &input).unwrap();
        assert!(metrics.ate.unwrap() < 1e-9);
        assert!(metrics.rre.unwrap() < 1e-9);
        assert_eq!(metrics.aj.unwrap(), 100.0);
        assert_eq!(metrics.oa.unwrap(), 100.0);
        assert!(metrics.epe.unwrap() < 1e-6);
        assert_eq!(metrics.iou.unwrap(), 100.0);
        assert!(metrics.abs_rel.unwrap() < 1e-3);
    }

    #[test]
    fn eval_without_poses_skips_traj_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("scene");
        small_scene_dir(&input, false);
        let est = tmp.path().join("est");
        fs::create_dir_all(&est).unwrap();
        let (metrics, warnings) = eval_only(&est, &input).unwrap();
        assert!(metrics.ate.is_none());
        assert!(warnings.iter().any(|w| w.contains("poses missing")));
    }
}
