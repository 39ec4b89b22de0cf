//! Synthetic scene generator with full ground truth.
//!
//! Scenes are point sets: a tilted background plane sampled at the pixel
//! grid of the first frame, plus optional rigid or deforming movers. Depth
//! maps are rendered analytically from the plane, with each mover point's
//! enclosing 2x2 pixel cell stamped to its exact camera depth so that
//! bilinear sampling at mover track positions is exact. Every output is
//! fully determined by the config seed.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, PoseSE3};
use crate::tensorio::{self, IoError, PipelineConfig, TensorFile};

#[derive(thiserror::Error, Debug)]
pub enum SynthError {
    #[error("empty scene: no points survive visibility")]
    EmptyScene,
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CameraPath {
    /// Arc around the scene center at the given radius, sweeping the
    /// given total angle in degrees.
    Orbit { radius: f64, sweep_deg: f64 },
    /// Straight push toward the scene over the whole sequence.
    Dolly { distance: f64 },
    /// Smooth seeded sinusoidal wander around the initial view.
    RandomSmooth { amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    Rigid,
    Deforming,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    pub points: usize,
    /// Object center in world coordinates at frame 0.
    pub center: [f64; 3],
    /// Side length of the point grid in meters.
    pub extent: f64,
    /// World-space translation per frame.
    pub velocity: [f64; 3],
    /// Rotation about the object's vertical axis, degrees per frame.
    pub spin_deg_per_frame: f64,
    /// Excluded from the dynamic masks (a mover the pipeline must discover).
    pub hidden: bool,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub track_sigma_px: f64,
    pub depth_sigma_rel: f64,
    pub outlier_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub camera_path: CameraPath,
    pub static_points: usize,
    pub objects: Vec<ObjectSpec>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            width: 64,
            height: 64,
            camera_path: CameraPath::Orbit {
                radius: 3.0,
                sweep_deg: 24.0,
            },
            static_points: 500,
            objects: vec![ObjectSpec {
                kind: ObjectKind::Rigid,
                points: 50,
                center: [0.0, 0.0, -1.0],
                extent: 0.8,
                velocity: [0.02, 0.01, 0.0],
                spin_deg_per_frame: 0.0,
                hidden: false,
            }],
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

/// Generated scene plus full ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub cam: CameraModel,
    pub gt_poses: Vec<PoseSE3>,
    /// Row-major N x T ground-truth world positions.
    pub gt_world: Vec<Vector3<f64>>,
    /// 0 = static background, k = member of objects[k-1].
    pub labels: Vec<u8>,
    /// Row-major N x T track pixel positions (as emitted, incl. noise).
    pub tracks: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
    /// T x H x W depth maps (as emitted, incl. noise).
    pub depth: Vec<f32>,
    /// T x H x W dynamic foreground masks.
    pub masks: Vec<u8>,
    /// Tracks replaced by random-walk outliers during perturbation.
    pub outliers: Vec<bool>,
    pub n: usize,
}

impl SynthScene {
    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn gt_pos(&self, i: usize, t: usize) -> Vector3<f64> {
        self.gt_world[i * self.config.frames + t]
    }

    pub fn track(&self, i: usize, t: usize) -> Vector2<f64> {
        self.tracks[i * self.config.frames + t]
    }

    pub fn is_visible(&self, i: usize, t: usize) -> bool {
        self.visible[i * self.config.frames + t]
    }

    /// Exact ground-truth camera depth of track i at frame t.
    pub fn gt_track_depth(&self, i: usize, t: usize) -> f64 {
        crate::geometry::cam_depth(&self.gt_poses[t], &self.gt_pos(i, t))
    }
}

/// Background plane z = PLANE_A * x + PLANE_B * y in world coordinates.
const PLANE_A: f64 = 0.3;
const PLANE_B: f64 = 0.2;
/// Proximity occlusion: a point is hidden when another point projects
/// within this radius at meaningfully smaller depth. The radius covers the
/// 2x2 depth stamp footprint of mover points.
const OCCLUSION_RADIUS: f64 = 3.0;
const OCCLUSION_DEPTH_MARGIN: f64 = 0.05;
/// Half-width of the square stamped into the masks around mover points.
const MASK_RADIUS: i64 = 2;

fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> PoseSE3 {
    let f = (target - center).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let r = up.cross(&f).normalize();
    let d = f.cross(&r);
    let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let q = UnitQuaternion::from_matrix(&rot);
    PoseSE3::new(q, -(q * center))
}

fn camera_poses(cfg: &SynthConfig) -> Vec<PoseSE3> {
    let t = cfg.frames;
    match &cfg.camera_path {
        CameraPath::Orbit { radius, sweep_deg } => {
            let sweep = sweep_deg.to_radians();
            (0..t)
                .map(|i| {
                    let s = if t > 1 {
                        i as f64 / (t - 1) as f64
                    } else {
                        0.0
                    };
                    let th = -sweep / 2.0 + sweep * s;
                    let c = Vector3::new(
                        radius * th.sin(),
                        0.3 * radius * (th * 1.7).sin() * 0.2,
                        -radius * th.cos(),
                    );
                    look_at(c, Vector3::zeros())
                })
                .collect()
        }
        CameraPath::Dolly { distance } => (0..t)
            .map(|i| {
                let s = if t > 1 {
                    i as f64 / (t - 1) as f64
                } else {
                    0.0
                };
                let c = Vector3::new(0.0, 0.0, -3.0 + distance * s);
                look_at(c, Vector3::zeros())
            })
            .collect(),
        CameraPath::RandomSmooth { amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
            let coef: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.5..2.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let base = look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros());
            (0..t)
                .map(|i| {
                    let s = i as f64 / t.max(1) as f64;
                    let mut d = nalgebra::Vector6::zeros();
                    for (k, (a, w, p)) in coef.iter().enumerate() {
                        let scale = if k < 3 { 0.1 } else { 1.0 };
                        d[k] = amplitude * scale * a * (w * s * std::f64::consts::TAU + p).sin();
                    }
                    crate::geometry::se3_exp(&d).compose(&base)
                })
                .collect()
        }
    }
}

/// Depth along the pixel ray to the background plane, in the camera frame.
fn plane_depth(pose: &PoseSE3, cam: &CameraModel, u: f64, v: f64) -> f64 {
    // plane n . X_w = 0 with n = (-PLANE_A, -PLANE_B, 1)
    let n = Vector3::new(-PLANE_A, -PLANE_B, 1.0);
    let m = pose.rotation * n;
    let k2 = n.dot(&(pose.rotation.inverse() * pose.translation));
    let h = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    let denom = m.dot(&h);
    if denom.abs() < 1e-12 {
        return 1e6;
    }
    let z = k2 / denom;
    if z <= 0.0 {
        1e6
    } else {
        z
    }
}

/// Intersect the pixel ray of frame 0 with the background plane.
fn unproject_to_plane(pose: &PoseSE3, cam: &CameraModel, u: f64, v: f64) -> Vector3<f64> {
    let z = plane_depth(pose, cam, u, v);
    let xc = cam.lift(Vector2::new(u, v), z);
    pose.inverse_transform(&xc)
}

fn object_points(spec: &ObjectSpec, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let side = (spec.points as f64).sqrt().ceil() as usize;
    let mut pts = Vec::with_capacity(spec.points);
    let c = Vector3::from_column_slice(&spec.center);
    for j in 0..side {
        for i in 0..side {
            if pts.len() == spec.points {
                break;
            }
            let fx = if side > 1 {
                i as f64 / (side - 1) as f64 - 0.5
            } else {
                0.0
            };
            let fy = if side > 1 {
                j as f64 / (side - 1) as f64 - 0.5
            } else {
                0.0
            };
            let dz = rng.gen_range(-0.05..0.05) * spec.extent;
            pts.push(c + Vector3::new(fx * spec.extent, fy * spec.extent, dz));
        }
    }
    pts
}

/// Object-local position at frame t for a point with frame-0 offset `rel`.
fn object_motion(spec: &ObjectSpec, rel: Vector3<f64>, t: usize, phase: f64) -> Vector3<f64> {
    let c0 = Vector3::from_column_slice(&spec.center);
    let vel = Vector3::from_column_slice(&spec.velocity);
    let tf = t as f64;
    let center = c0 + vel * tf;
    let spun = if spec.spin_deg_per_frame != 0.0 {
        let q = UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(Vector3::new(0.0, 1.0, 0.0)),
            (spec.spin_deg_per_frame * tf).to_radians(),
        );
        q * rel
    } else {
        rel
    };
    let deform = match spec.kind {
        ObjectKind::Rigid => Vector3::zeros(),
        ObjectKind::Deforming => {
            let amp = 0.08 * spec.extent;
            Vector3::new(
                amp * (0.7 * tf + phase).sin(),
                amp * (0.9 * tf + phase * 1.3).cos(),
                0.0,
            )
        }
    };
    center + spun + deform
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthScene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h, tn) = (cfg.width, cfg.height, cfg.frames);
    let f = w.min(h) as f64;
    let cam = CameraModel::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let poses = camera_poses(cfg);

    // static points: unproject a subsampled pixel grid of frame 0
    let mut world0: Vec<(Vector3<f64>, u8, f64)> = Vec::new(); // (pos at frame 0 basis, label, phase)
    if cfg.static_points > 0 {
        let step = (((w * h) as f64 / cfg.static_points as f64).sqrt().floor() as usize).max(1);
        'grid: for y in (step / 2..h).step_by(step) {
            for x in (step / 2..w).step_by(step) {
                world0.push((
                    unproject_to_plane(&poses[0], &cam, x as f64, y as f64),
                    0,
                    0.0,
                ));
                if world0.len() == cfg.static_points {
                    break 'grid;
                }
            }
        }
    }
    let mut obj_rel: Vec<(usize, Vector3<f64>, f64)> = Vec::new(); // (object, frame-0 offset, phase)
    for (k, spec) in cfg.objects.iter().enumerate() {
        let c0 = Vector3::from_column_slice(&spec.center);
        for p in object_points(spec, &mut rng) {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            obj_rel.push((k, p - c0, phase));
            world0.push((p, (k + 1) as u8, phase));
        }
    }
    if world0.is_empty() {
        return Err(SynthError::EmptyScene);
    }
    let n = world0.len();

    // ground-truth world trajectories
    let mut gt_world = vec![Vector3::zeros(); n * tn];
    let mut obj_iter = obj_rel.iter();
    for (i, (p0, label, phase)) in world0.iter().enumerate() {
        if *label == 0 {
            for t in 0..tn {
                gt_world[i * tn + t] = *p0;
            }
        } else {
            let (k, rel, _) = obj_iter.next().unwrap();
            let spec = &cfg.objects[*k];
            for t in 0..tn {
                gt_world[i * tn + t] = object_motion(spec, *rel, t, *phase);
            }
        }
    }
    let labels: Vec<u8> = world0.iter().map(|(_, l, _)| *l).collect();

    // projections, depths, visibility
    let mut tracks = vec![Vector2::zeros(); n * tn];
    let mut cam_z = vec![0.0f64; n * tn];
    let mut in_frame = vec![false; n * tn];
    for t in 0..tn {
        for i in 0..n {
            let xc = poses[t].transform(&gt_world[i * tn + t]);
            cam_z[i * tn + t] = xc.z;
            if xc.z > 1e-6 {
                let p = cam.project_cam(&xc);
                tracks[i * tn + t] = p;
                in_frame[i * tn + t] =
                    p.x >= 0.0 && p.x <= (w - 1) as f64 && p.y >= 0.0 && p.y <= (h - 1) as f64;
            }
        }
    }
    let mut visible = vec![false; n * tn];
    for t in 0..tn {
        for i in 0..n {
            if !in_frame[i * tn + t] {
                continue;
            }
            let pi = tracks[i * tn + t];
            let zi = cam_z[i * tn + t];
            let mut occluded = false;
            for j in 0..n {
                if j == i || !in_frame[j * tn + t] {
                    continue;
                }
                let zj = cam_z[j * tn + t];
                if zj + OCCLUSION_DEPTH_MARGIN.max(0.02 * zi) < zi
                    && (tracks[j * tn + t] - pi).norm() <= OCCLUSION_RADIUS
                {
                    occluded = true;
                    break;
                }
            }
            visible[i * tn + t] = !occluded;
        }
    }

    // drop points that are never visible
    let alive: Vec<usize> = (0..n)
        .filter(|&i| (0..tn).any(|t| visible[i * tn + t]))
        .collect();
    if alive.is_empty() {
        return Err(SynthError::EmptyScene);
    }
    let take = |src: &[f64]| -> Vec<f64> { Vec::from(src) };
    let _ = take;
    let filter_nt = |src: &mut Vec<Vector2<f64>>| {
        let mut out = Vec::with_capacity(alive.len() * tn);
        for &i in &alive {
            out.extend_from_slice(&src[i * tn..(i + 1) * tn]);
        }
        *src = out;
    };
    filter_nt(&mut tracks);
    let mut gt2 = Vec::with_capacity(alive.len() * tn);
    let mut vis2 = Vec::with_capacity(alive.len() * tn);
    for &i in &alive {
        gt2.extend_from_slice(&gt_world[i * tn..(i + 1) * tn]);
        vis2.extend_from_slice(&visible[i * tn..(i + 1) * tn]);
    }
    let gt_world = gt2;
    let visible = vis2;
    let labels: Vec<u8> = alive.iter().map(|&i| labels[i]).collect();
    let n = alive.len();

    // depth maps: analytic plane, then exact 2x2 stamps for mover points
    let mut depth = vec![0.0f32; tn * h * w];
    for t in 0..tn {
        for y in 0..h {
            for x in 0..w {
                depth[t * h * w + y * w + x] =
                    plane_depth(&poses[t], &cam, x as f64, y as f64) as f32;
            }
        }
        for i in 0..n {
            if labels[i] == 0 {
                continue;
            }
            let xc = poses[t].transform(&gt_world[i * tn + t]);
            if xc.z <= 1e-6 {
                continue;
            }
            let p = cam.project_cam(&xc);
            let x0 = p.x.floor() as i64;
            let y0 = p.y.floor() as i64;
            for dy in 0..=1i64 {
                for dx in 0..=1i64 {
                    let (xx, yy) = (x0 + dx, y0 + dy);
                    if xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h {
                        let cell = &mut depth[t * h * w + yy as usize * w + xx as usize];
                        if (xc.z as f32) < *cell {
                            *cell = xc.z as f32;
                        }
                    }
                }
            }
        }
    }

    // masks around declared (non-hidden) mover points
    let mut masks = vec![0u8; tn * h * w];
    for t in 0..tn {
        for i in 0..n {
            let l = labels[i];
            if l == 0 || cfg.objects[(l - 1) as usize].hidden {
                continue;
            }
            let p = tracks[i * tn + t];
            let (px, py) = (p.x.round() as i64, p.y.round() as i64);
            for dy in -MASK_RADIUS..=MASK_RADIUS {
                for dx in -MASK_RADIUS..=MASK_RADIUS {
                    let (xx, yy) = (px + dx, py + dy);
                    if xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h {
                        masks[t * h * w + yy as usize * w + xx as usize] = 1;
                    }
                }
            }
        }
    }

    let mut scene = SynthScene {
        config: cfg.clone(),
        cam,
        gt_poses: poses,
        gt_world,
        labels,
        tracks,
        visible,
        depth,
        masks,
        outliers: vec![false; n],
        n,
    };
    if cfg.noise.track_sigma_px > 0.0
        || cfg.noise.depth_sigma_rel > 0.0
        || cfg.noise.outlier_frac > 0.0
    {
        let noise = cfg.noise;
        perturb(&mut scene, &noise, cfg.seed.wrapping_add(1));
    }
    Ok(scene)
}

/// Apply track/depth noise and random-walk outliers in place. Ground truth
/// fields are untouched. Deterministic given the seed.
pub fn perturb(scene: &mut SynthScene, noise: &NoiseSpec, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tn = scene.config.frames;
    if noise.track_sigma_px > 0.0 {
        for p in scene.tracks.iter_mut() {
            p.x += gauss(&mut rng) * noise.track_sigma_px;
            p.y += gauss(&mut rng) * noise.track_sigma_px;
        }
    }
    if noise.depth_sigma_rel > 0.0 {
        for d in scene.depth.iter_mut() {
            *d *= 1.0 + (gauss(&mut rng) * noise.depth_sigma_rel) as f32;
        }
    }
    if noise.outlier_frac > 0.0 {
        for i in 0..scene.n {
            if rng.gen::<f64>() < noise.outlier_frac {
                scene.outliers[i] = true;
                let spawn = (0..tn).find(|&t| scene.visible[i * tn + t]).unwrap_or(0);
                let mut p = scene.tracks[i * tn + spawn];
                for t in spawn + 1..tn {
                    p.x += rng.gen_range(-3.0..3.0);
                    p.y += rng.gen_range(-3.0..3.0);
                    p.x = p.x.clamp(0.0, (scene.config.width - 1) as f64);
                    p.y = p.y.clamp(0.0, (scene.config.height - 1) as f64);
                    scene.tracks[i * tn + t] = p;
                }
            }
        }
    }
    // re-pin spawn-frame bounds: a visible position must stay inside the frame
    let (w, h) = (scene.config.width as f64, scene.config.height as f64);
    for i in 0..scene.n {
        for t in 0..tn {
            if scene.visible[i * tn + t] {
                let p = &mut scene.tracks[i * tn + t];
                p.x = p.x.clamp(0.0, w - 1.0);
                p.y = p.y.clamp(0.0, h - 1.0);
            }
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Write the scene in the pipeline input layout plus ground-truth files
/// (gt_poses.json, gt_traj.wt, gt_labels.wt, gt_outliers.wt).
pub fn write_scene(scene: &SynthScene, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(IoError::Io)?;
    let tn = scene.config.frames;
    let (w, h) = (scene.config.width, scene.config.height);
    let n = scene.n;

    let mut track_data = Vec::with_capacity(n * tn * 2);
    for p in &scene.tracks {
        track_data.push(p.x as f32);
        track_data.push(p.y as f32);
    }
    tensorio::write_tensor(
        &dir.join("tracks.wt"),
        &TensorFile::f32(vec![n, tn, 2], track_data),
    )?;
    tensorio::write_tensor(
        &dir.join("visibility.wt"),
        &TensorFile::u8(
            vec![n, tn],
            scene.visible.iter().map(|&v| v as u8).collect(),
        ),
    )?;
    tensorio::write_tensor(
        &dir.join("depth.wt"),
        &TensorFile::f32(vec![tn, h, w], scene.depth.clone()),
    )?;
    tensorio::write_tensor(
        &dir.join("masks.wt"),
        &TensorFile::u8(vec![tn, h, w], scene.masks.clone()),
    )?;
    let k = scene.cam.to_matrix();
    let intr: Vec<f32> = (0..9).map(|i| k[(i / 3, i % 3)] as f32).collect();
    tensorio::write_tensor(
        &dir.join("intrinsics.wt"),
        &TensorFile::f32(vec![3, 3], intr),
    )?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&PipelineConfig::default()).map_err(IoError::Json)?,
    )
    .map_err(IoError::Io)?;

    tensorio::write_poses(&dir.join("gt_poses.json"), &scene.gt_poses)?;
    let mut traj = Vec::with_capacity(n * tn * 3);
    for p in &scene.gt_world {
        traj.push(p.x as f32);
        traj.push(p.y as f32);
        traj.push(p.z as f32);
    }
    tensorio::write_tensor(
        &dir.join("gt_traj.wt"),
        &TensorFile::f32(vec![n, tn, 3], traj),
    )?;
    tensorio::write_tensor(
        &dir.join("gt_labels.wt"),
        &TensorFile::u8(vec![n], scene.labels.clone()),
    )?;
    tensorio::write_tensor(
        &dir.join("gt_outliers.wt"),
        &TensorFile::u8(vec![n], scene.outliers.iter().map(|&o| o as u8).collect()),
    )?;
    Ok(())
}
