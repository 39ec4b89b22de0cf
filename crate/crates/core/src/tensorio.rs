//! File formats and configuration ingestion.
//!
//! Tensors use a minimal binary container (see FORMAT.md): an 8-byte magic
//! tag, dtype and rank bytes, little-endian u64 dims, then the row-major
//! little-endian payload. Configuration is JSON with defaults applied for
//! absent keys.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, PoseSE3};
use crate::solver::SolverConfig;
use crate::trackset::TrackSet2D;

pub const MAGIC: &[u8; 8] = b"WTRKTNSR";
pub const MAX_RANK: usize = 4;

#[derive(thiserror::Error, Debug)]
pub enum IoError {
    #[error("bad magic tag")]
    BadMagic,
    #[error("payload size does not match dims: {0}")]
    DimMismatch(String),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: TensorData::U8(data),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }
}

pub fn write_tensor(path: &Path, t: &TensorFile) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + t.len() * t.dtype().size());
    buf.extend_from_slice(MAGIC);
    buf.push(t.dtype().code());
    buf.push(t.dims.len() as u8);
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => buf.extend_from_slice(v),
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorFile, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.display().to_string()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_tensor(&bytes)
}

pub fn parse_tensor(bytes: &[u8]) -> Result<TensorFile, IoError> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(IoError::BadMagic);
    }
    let dtype = match bytes[8] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        c => return Err(IoError::UnsupportedDtype(c)),
    };
    let rank = bytes[9] as usize;
    if rank > MAX_RANK {
        return Err(IoError::DimMismatch(format!("rank {rank} > {MAX_RANK}")));
    }
    let header = 10 + rank * 8;
    if bytes.len() < header {
        return Err(IoError::DimMismatch("truncated dim list".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[10 + i * 8..18 + i * 8]);
        let d = u64::from_le_bytes(b) as usize;
        if d < 1 {
            return Err(IoError::DimMismatch("dim < 1".into()));
        }
        dims.push(d);
    }
    let count: usize = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|c| c.checked_mul(dtype.size()))
        .map(|bytes| bytes / dtype.size())
        .ok_or_else(|| IoError::DimMismatch("dim product overflows".into()))?;
    let payload = &bytes[header..];
    if payload.len() != count * dtype.size() {
        return Err(IoError::DimMismatch(format!(
            "payload {} bytes, expected {}",
            payload.len(),
            count * dtype.size()
        )));
    }
    let data = match dtype {
        Dtype::F32 => {
            let mut v = Vec::with_capacity(count);
            for c in payload.chunks_exact(4) {
                v.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            TensorData::F32(v)
        }
        Dtype::U8 => TensorData::U8(payload.to_vec()),
    };
    Ok(TensorFile { dims, data })
}

fn default_stride() -> usize {
    4
}
fn default_tau() -> f64 {
    0.1
}
fn default_clip_len() -> usize {
    5
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_lambda_ba() -> f64 {
    1.0
}
fn default_lambda_dc() -> f64 {
    1.0
}
fn default_lambda_asap() -> f64 {
    5.0
}
fn default_lambda_arap() -> f64 {
    100.0
}
fn default_lambda_ts() -> f64 {
    10.0
}
fn default_component_min_size() -> usize {
    50
}
fn default_varpi() -> usize {
    4
}
fn default_knn_r() -> usize {
    4
}

/// Pipeline hyperparameters. Absent JSON keys take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_stride")]
    pub stride_s: usize,
    #[serde(default = "default_tau")]
    pub inlier_tau: f64,
    #[serde(default = "default_clip_len")]
    pub clip_len: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_lambda_ba")]
    pub lambda_ba: f64,
    #[serde(default = "default_lambda_dc")]
    pub lambda_dc: f64,
    #[serde(default = "default_lambda_asap")]
    pub lambda_asap: f64,
    #[serde(default = "default_lambda_arap")]
    pub lambda_arap: f64,
    #[serde(default = "default_lambda_ts")]
    pub lambda_ts: f64,
    #[serde(default = "default_component_min_size")]
    pub component_min_size: usize,
    #[serde(default = "default_varpi")]
    pub downsample_varpi: usize,
    #[serde(default = "default_knn_r")]
    pub knn_r: usize,
    /// Densify input tracks via the sparse-to-dense upsampler before the
    /// optimization stages.
    #[serde(default)]
    pub densify: bool,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        let lambdas = [
            self.lambda_ba,
            self.lambda_dc,
            self.lambda_asap,
            self.lambda_arap,
            self.lambda_ts,
        ];
        if lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(IoError::InvalidConfig("lambda weights must be >= 0".into()));
        }
        if self.clip_len < 2 {
            return Err(IoError::InvalidConfig("clip_len must be >= 2".into()));
        }
        if self.downsample_varpi < 1 {
            return Err(IoError::InvalidConfig(
                "downsample_varpi must be >= 1".into(),
            ));
        }
        if self.knn_r < 1 {
            return Err(IoError::InvalidConfig("knn_r must be >= 1".into()));
        }
        if self.stride_s < 1 {
            return Err(IoError::InvalidConfig("stride_s must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-frame H x W depth maps with bilinear subpixel sampling.
#[derive(Debug, Clone)]
pub struct DepthStack {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl DepthStack {
    pub fn at(&self, t: usize, x: usize, y: usize) -> f64 {
        self.data[t * self.h * self.w + y * self.w + x] as f64
    }

    /// Bilinear sample at a subpixel position, clamped to the frame.
    pub fn sample(&self, t: usize, p: Vector2<f64>) -> f64 {
        let x = p.x.clamp(0.0, (self.w - 1) as f64);
        let y = p.y.clamp(0.0, (self.h - 1) as f64);
        let x0 = (x.floor() as usize).min(self.w - 1);
        let y0 = (y.floor() as usize).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let v00 = self.at(t, x0, y0);
        let v10 = self.at(t, x1, y0);
        let v01 = self.at(t, x0, y1);
        let v11 = self.at(t, x1, y1);
        v00 * (1.0 - ax) * (1.0 - ay)
            + v10 * ax * (1.0 - ay)
            + v01 * (1.0 - ax) * ay
            + v11 * ax * ay
    }
}

/// Full pipeline input bundle.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub tracks: TrackSet2D,
    pub depth: DepthStack,
    /// T x H x W dynamic foreground masks, 1 = dynamic.
    pub masks: Vec<u8>,
    pub cam: CameraModel,
    pub config: PipelineConfig,
    pub width: usize,
    pub height: usize,
}

impl SceneBundle {
    pub fn frames(&self) -> usize {
        self.depth.t
    }

    pub fn image_diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    /// Per-track depth by bilinear sampling at the track position.
    pub fn track_depth(&self, tracks: &TrackSet2D) -> Vec<f64> {
        let mut out = vec![0.0; tracks.n * tracks.t];
        for i in 0..tracks.n {
            for t in 0..tracks.t {
                out[i * tracks.t + t] = self.depth.sample(t, tracks.pos(i, t));
            }
        }
        out
    }
}

pub fn load_scene(dir: &Path) -> Result<SceneBundle, IoError> {
    let cfg_path = dir.join("config.json");
    if !cfg_path.exists() {
        return Err(IoError::MissingFile(cfg_path.display().to_string()));
    }
    let config: PipelineConfig = serde_json::from_str(&fs::read_to_string(&cfg_path)?)
        .map_err(|e| IoError::InvalidConfig(e.to_string()))?;
    config.validate()?;

    let tracks_t = read_tensor(&dir.join("tracks.wt"))?;
    let vis_t = read_tensor(&dir.join("visibility.wt"))?;
    let depth_t = read_tensor(&dir.join("depth.wt"))?;
    let masks_t = read_tensor(&dir.join("masks.wt"))?;
    let intr_t = read_tensor(&dir.join("intrinsics.wt"))?;

    if tracks_t.dims.len() != 3 || tracks_t.dims[2] != 2 {
        return Err(IoError::ShapeMismatch(format!(
            "tracks.wt dims {:?}, expected N x T x 2",
            tracks_t.dims
        )));
    }
    let n = tracks_t.dims[0];
    let t = tracks_t.dims[1];
    if vis_t.dims != vec![n, t] {
        return Err(IoError::ShapeMismatch(format!(
            "visibility.wt dims {:?}, expected [{n}, {t}]",
            vis_t.dims
        )));
    }
    if depth_t.dims.len() != 3 || depth_t.dims[0] != t {
        return Err(IoError::ShapeMismatch(format!(
            "depth.wt dims {:?}, expected {t} frames",
            depth_t.dims
        )));
    }
    let h = depth_t.dims[1];
    let w = depth_t.dims[2];
    if masks_t.dims != vec![t, h, w] {
        return Err(IoError::ShapeMismatch(format!(
            "masks.wt dims {:?}, expected [{t}, {h}, {w}]",
            masks_t.dims
        )));
    }
    if intr_t.dims != vec![3, 3] {
        return Err(IoError::ShapeMismatch(format!(
            "intrinsics.wt dims {:?}, expected [3, 3]",
            intr_t.dims
        )));
    }

    let track_data = tracks_t
        .as_f32()
        .ok_or_else(|| IoError::ShapeMismatch("tracks.wt must be f32".into()))?;
    let vis_data = vis_t
        .as_u8()
        .ok_or_else(|| IoError::ShapeMismatch("visibility.wt must be u8".into()))?;
    let depth_data = depth_t
        .as_f32()
        .ok_or_else(|| IoError::ShapeMismatch("depth.wt must be f32".into()))?;
    let mask_data = masks_t
        .as_u8()
        .ok_or_else(|| IoError::ShapeMismatch("masks.wt must be u8".into()))?;
    let intr_data = intr_t
        .as_f32()
        .ok_or_else(|| IoError::ShapeMismatch("intrinsics.wt must be f32".into()))?;

    let k = Matrix3::from_fn(|r, c| intr_data[r * 3 + c] as f64);
    if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
        return Err(IoError::InvalidConfig("non-positive focal length".into()));
    }
    let cam = CameraModel::from_matrix(&k);

    let positions: Vec<Vector2<f64>> = track_data
        .chunks_exact(2)
        .map(|c| Vector2::new(c[0] as f64, c[1] as f64))
        .collect();
    let visible: Vec<bool> = vis_data.iter().map(|&v| v != 0).collect();
    let mut spawn_frame = Vec::with_capacity(n);
    for i in 0..n {
        let s = (0..t)
            .find(|&ti| visible[i * t + ti])
            .ok_or_else(|| IoError::ShapeMismatch(format!("track {i} has no visible frame")))?;
        spawn_frame.push(s);
    }

    let tracks = TrackSet2D::new(n, t, positions, visible, spawn_frame);
    for i in 0..n {
        let p = tracks.spawn_pos(i);
        if !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
            return Err(IoError::ShapeMismatch(format!(
                "track {i} spawn position ({}, {}) outside [0,{w}) x [0,{h})",
                p.x, p.y
            )));
        }
    }

    Ok(SceneBundle {
        tracks,
        depth: DepthStack {
            t,
            h,
            w,
            data: depth_data.to_vec(),
        },
        masks: mask_data.to_vec(),
        cam,
        config,
        width: w,
        height: h,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosesFile {
    /// Per-frame world-to-camera 3x4, row-major.
    pub poses: Vec<[f64; 12]>,
}

pub fn write_poses(path: &Path, poses: &[PoseSE3]) -> Result<(), IoError> {
    let file = PosesFile {
        poses: poses.iter().map(|p| p.to_matrix_3x4()).collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseSE3>, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.display().to_string()));
    }
    let file: PosesFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(file.poses.iter().map(PoseSE3::from_matrix_3x4).collect())
}
