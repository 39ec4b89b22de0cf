//! 2D track sets: per-frame spawning with redundancy elimination,
//! connected-component filtering of spawn regions, mask-based splitting,
//! and geometric sparse-to-dense upsampling.

use nalgebra::Vector2;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum TrackError {
    #[error("empty sparse track set")]
    EmptySparseSet,
    #[error("track {0} has no visible frame")]
    NoVisibleFrames(usize),
    #[error("sparse tracks do not cover the stride-{0} grid")]
    GridIncomplete(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackRole {
    Static,
    DynamicForeground,
    DynamicBackground,
}

/// N tracks over T frames with visibility flags and spawn-frame labels.
#[derive(Debug, Clone)]
pub struct TrackSet2D {
    pub n: usize,
    pub t: usize,
    /// Row-major N x T pixel positions.
    positions: Vec<Vector2<f64>>,
    visible: Vec<bool>,
    pub spawn_frame: Vec<usize>,
    pub role: Vec<TrackRole>,
}

impl TrackSet2D {
    pub fn new(
        n: usize,
        t: usize,
        positions: Vec<Vector2<f64>>,
        visible: Vec<bool>,
        spawn_frame: Vec<usize>,
    ) -> Self {
        assert_eq!(positions.len(), n * t);
        assert_eq!(visible.len(), n * t);
        assert_eq!(spawn_frame.len(), n);
        Self {
            n,
            t,
            positions,
            visible,
            spawn_frame,
            role: vec![TrackRole::Static; n],
        }
    }

    #[inline]
    pub fn pos(&self, i: usize, t: usize) -> Vector2<f64> {
        self.positions[i * self.t + t]
    }

    #[inline]
    pub fn set_pos(&mut self, i: usize, t: usize, p: Vector2<f64>) {
        self.positions[i * self.t + t] = p;
    }

    #[inline]
    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visible[i * self.t + t]
    }

    #[inline]
    pub fn set_visible(&mut self, i: usize, t: usize, v: bool) {
        self.visible[i * self.t + t] = v;
    }

    pub fn spawn_pos(&self, i: usize) -> Vector2<f64> {
        self.pos(i, self.spawn_frame[i])
    }

    pub fn visible_frames(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.t).filter(move |&t| self.visible(i, t))
    }

    /// Subset of tracks by index, preserving order.
    pub fn select(&self, idx: &[usize]) -> TrackSet2D {
        let mut positions = Vec::with_capacity(idx.len() * self.t);
        let mut visible = Vec::with_capacity(idx.len() * self.t);
        for &i in idx {
            positions.extend_from_slice(&self.positions[i * self.t..(i + 1) * self.t]);
            visible.extend_from_slice(&self.visible[i * self.t..(i + 1) * self.t]);
        }
        let mut out = TrackSet2D::new(
            idx.len(),
            self.t,
            positions,
            visible,
            idx.iter().map(|&i| self.spawn_frame[i]).collect(),
        );
        out.role = idx.iter().map(|&i| self.role[i]).collect();
        out
    }
}

/// Per dense pixel: contributing sparse-track indices and weights.
/// Weights sum to one; inside the anchor hull they are also nonnegative
/// (at the frame border the cell is extrapolated and a weight may dip
/// below zero so that affine motion stays exact).
#[derive(Debug, Clone)]
pub struct UpsampleWeights {
    pub indices: Vec<[usize; 4]>,
    pub weights: Vec<[f64; 4]>,
}

/// Lift sparse stride-`s` grid tracks of one spawn frame to a dense H x W
/// track set. Each dense trajectory is a weighted sum of neighboring sparse
/// trajectories plus the spawn-frame offset from each anchor to the pixel,
/// which reproduces anchors exactly and is exact for affine motion. The
/// weights are per-axis inverse-distance over the enclosing grid cell.
/// `k < 4` falls back to plain inverse-distance over the k nearest anchors.
pub fn upsample_tracks(
    sparse: &TrackSet2D,
    s: usize,
    k: usize,
    width: usize,
    height: usize,
) -> Result<(TrackSet2D, UpsampleWeights), TrackError> {
    if sparse.n == 0 {
        return Err(TrackError::EmptySparseSet);
    }
    assert!(k >= 1);
    let spawn = sparse.spawn_frame[0];
    // grid layout of the sparse anchors at the spawn frame
    let gw = (width + s - 1) / s;
    let gh = (height + s - 1) / s;
    let mut grid = vec![usize::MAX; gw * gh];
    for i in 0..sparse.n {
        let p = sparse.pos(i, spawn);
        let gx = (p.x / s as f64).round() as usize;
        let gy = (p.y / s as f64).round() as usize;
        if gx < gw && gy < gh {
            grid[gy * gw + gx] = i;
        }
    }
    if k >= 4 && grid.iter().any(|&i| i == usize::MAX) {
        return Err(TrackError::GridIncomplete(s));
    }

    let nt = sparse.t;
    let nd = width * height;
    let mut positions = vec![Vector2::zeros(); nd * nt];
    let mut visible = vec![false; nd * nt];
    let mut indices = Vec::with_capacity(nd);
    let mut weights = Vec::with_capacity(nd);

    for py in 0..height {
        for px in 0..width {
            let pixel = Vector2::new(px as f64, py as f64);
            let (idx4, w4) = if k >= 4 {
                cell_weights(pixel, s, gw, gh, &grid)
            } else {
                idw_weights(pixel, sparse, spawn, k)
            };
            let dense_i = py * width + px;
            indices.push(idx4);
            weights.push(w4);
            for ti in 0..nt {
                let mut acc = Vector2::zeros();
                let mut vis = true;
                for j in 0..4 {
                    let w = w4[j];
                    if w == 0.0 && idx4[j] == usize::MAX {
                        continue;
                    }
                    let anchor = idx4[j];
                    let offset = pixel - sparse.pos(anchor, spawn);
                    acc += (sparse.pos(anchor, ti) + offset) * w;
                    vis &= sparse.visible(anchor, ti);
                }
                positions[dense_i * nt + ti] = acc;
                visible[dense_i * nt + ti] = vis;
            }
        }
    }

    let dense = TrackSet2D::new(nd, nt, positions, visible, vec![spawn; nd]);
    Ok((dense, UpsampleWeights { indices, weights }))
}

/// Tensor-product linear weights on the enclosing (clamped) grid cell.
/// Per axis these are normalized inverse distances to the two cell nodes.
fn cell_weights(
    pixel: Vector2<f64>,
    s: usize,
    gw: usize,
    gh: usize,
    grid: &[usize],
) -> ([usize; 4], [f64; 4]) {
    let sf = s as f64;
    let cx = ((pixel.x / sf).floor() as isize).clamp(0, gw as isize - 2) as usize;
    let cy = ((pixel.y / sf).floor() as isize).clamp(0, gh as isize - 2) as usize;
    let ax = pixel.x / sf - cx as f64;
    let ay = pixel.y / sf - cy as f64;
    let ids = [
        grid[cy * gw + cx],
        grid[cy * gw + cx + 1],
        grid[(cy + 1) * gw + cx],
        grid[(cy + 1) * gw + cx + 1],
    ];
    debug_assert!(
        ids.iter().all(|&i| i != usize::MAX),
        "sparse grid has holes"
    );
    let w = [
        (1.0 - ax) * (1.0 - ay),
        ax * (1.0 - ay),
        (1.0 - ax) * ay,
        ax * ay,
    ];
    (ids, w)
}

/// Plain inverse-distance weights over the k nearest anchors (k <= 4 here).
/// A zero-distance anchor takes the full weight.
fn idw_weights(
    pixel: Vector2<f64>,
    sparse: &TrackSet2D,
    spawn: usize,
    k: usize,
) -> ([usize; 4], [f64; 4]) {
    let mut nearest: Vec<(f64, usize)> = (0..sparse.n)
        .map(|i| ((sparse.pos(i, spawn) - pixel).norm(), i))
        .collect();
    nearest.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    nearest.truncate(k.min(4));
    let mut ids = [usize::MAX; 4];
    let mut w = [0.0; 4];
    if nearest[0].0 < 1e-12 {
        ids[0] = nearest[0].1;
        w[0] = 1.0;
        return (ids, w);
    }
    let mut total = 0.0;
    for (j, &(d, i)) in nearest.iter().enumerate() {
        ids[j] = i;
        w[j] = 1.0 / d;
        total += w[j];
    }
    for wj in w.iter_mut() {
        *wj /= total;
    }
    (ids, w)
}

/// Pixels of frame `t` farther than `radius` from every track visible at `t`.
pub fn spawn_new_tracks(
    t: usize,
    existing: &TrackSet2D,
    radius: f64,
    width: usize,
    height: usize,
) -> Vec<(usize, usize)> {
    let mut covered = vec![false; width * height];
    let r2 = radius * radius;
    let ri = radius.ceil() as isize;
    for i in 0..existing.n {
        if !existing.visible(i, t) {
            continue;
        }
        let p = existing.pos(i, t);
        let x0 = (p.x.floor() as isize - ri).max(0);
        let x1 = (p.x.ceil() as isize + ri).min(width as isize - 1);
        let y0 = (p.y.floor() as isize - ri).max(0);
        let y1 = (p.y.ceil() as isize + ri).min(height as isize - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - p.x;
                let dy = y as f64 - p.y;
                if dx * dx + dy * dy <= r2 {
                    covered[y as usize * width + x as usize] = true;
                }
            }
        }
    }
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !covered[y * width + x] {
                out.push((x, y));
            }
        }
    }
    out
}

/// Keep only pixels in 4-connected components of size strictly greater
/// than `min_size`.
pub fn filter_components(
    pixels: &[(usize, usize)],
    min_size: usize,
    width: usize,
    height: usize,
) -> Vec<(usize, usize)> {
    let mut occ = vec![false; width * height];
    for &(x, y) in pixels {
        debug_assert!(x < width && y < height);
        occ[y * width + x] = true;
    }
    let mut keep = vec![false; width * height];
    let mut seen = vec![false; width * height];
    let mut stack = Vec::new();
    let mut comp = Vec::new();
    for start in 0..width * height {
        if !occ[start] || seen[start] {
            continue;
        }
        comp.clear();
        stack.push(start);
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            comp.push(idx);
            let (x, y) = (idx % width, idx / width);
            let push = |nx: usize, ny: usize, stack: &mut Vec<usize>, seen: &mut Vec<bool>| {
                let ni = ny * width + nx;
                if occ[ni] && !seen[ni] {
                    seen[ni] = true;
                    stack.push(ni);
                }
            };
            if x > 0 {
                push(x - 1, y, &mut stack, &mut seen);
            }
            if x + 1 < width {
                push(x + 1, y, &mut stack, &mut seen);
            }
            if y > 0 {
                push(x, y - 1, &mut stack, &mut seen);
            }
            if y + 1 < height {
                push(x, y + 1, &mut stack, &mut seen);
            }
        }
        if comp.len() > min_size {
            for &i in &comp {
                keep[i] = true;
            }
        }
    }
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if keep[y * width + x] {
                out.push((x, y));
            }
        }
    }
    out
}

/// Result of splitting a track set by the dynamic foreground masks.
/// Index vectors map back into the original set.
#[derive(Debug, Clone)]
pub struct SplitTracks {
    pub static_set: TrackSet2D,
    pub dynamic_set: TrackSet2D,
    pub static_idx: Vec<usize>,
    pub dynamic_idx: Vec<usize>,
}

/// A track is dynamic foreground iff the mask at its spawn frame and
/// nearest-pixel spawn position is set.
pub fn split_by_mask(
    tracks: &TrackSet2D,
    masks: &[u8],
    width: usize,
    height: usize,
) -> SplitTracks {
    let mut static_idx = Vec::new();
    let mut dynamic_idx = Vec::new();
    for i in 0..tracks.n {
        let t = tracks.spawn_frame[i];
        let p = tracks.pos(i, t);
        let x = (p.x.round() as isize).clamp(0, width as isize - 1) as usize;
        let y = (p.y.round() as isize).clamp(0, height as isize - 1) as usize;
        if masks[t * width * height + y * width + x] != 0 {
            dynamic_idx.push(i);
        } else {
            static_idx.push(i);
        }
    }
    let mut static_set = tracks.select(&static_idx);
    let mut dynamic_set = tracks.select(&dynamic_idx);
    static_set
        .role
        .iter_mut()
        .for_each(|r| *r = TrackRole::Static);
    dynamic_set
        .role
        .iter_mut()
        .for_each(|r| *r = TrackRole::DynamicForeground);
    SplitTracks {
        static_set,
        dynamic_set,
        static_idx,
        dynamic_idx,
    }
}
