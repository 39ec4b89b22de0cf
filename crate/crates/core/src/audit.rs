//! Randomized gradient audit: the analytic gradient of each loss term is
//! compared against central finite differences at random states, isolating
//! one term at a time by zeroing the other weights.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dyntrack::DynObjective;
use crate::geometry::{CameraModel, PoseSE3};
use crate::refine::StaticRefineObjective;
use crate::solver::{grad_check, ParamBlocks};
use crate::trackset::TrackSet2D;

/// Worst relative gradient error seen per loss term.
#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub per_loss: BTreeMap<String, f64>,
}

impl AuditReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_loss.values().cloned().fold(0.0, f64::max)
    }
}

struct RandomState {
    tracks: TrackSet2D,
    depths: Vec<f64>,
    poses: Vec<PoseSE3>,
    anchors: Vec<Vector3<f64>>,
    offsets: Vec<Vector3<f64>>,
    positions: Vec<Vector3<f64>>,
    knn: Vec<Vec<usize>>,
}

/// A small scene with points safely in front of every camera (the
/// behind-camera clamp and the L1 kink are non-smooth; states are sampled
/// away from both so central differences are valid).
fn random_state(rng: &mut ChaCha8Rng, n: usize, tn: usize, cam: &CameraModel) -> RandomState {
    let poses: Vec<PoseSE3> = (0..tn)
        .map(|_| {
            let mut d = nalgebra::Vector6::zeros();
            for k in 0..6 {
                d[k] = rng.gen_range(-0.1..0.1);
            }
            PoseSE3::identity().retract(&d)
        })
        .collect();
    let mut positions = Vec::new();
    let mut obs = Vec::new();
    let mut vis = Vec::new();
    let mut depths = Vec::new();
    for _ in 0..n {
        for t in 0..tn {
            let xc = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(1.0..3.0),
            );
            let xw = poses[t].inverse_transform(&xc);
            positions.push(xw);
            obs.push(
                cam.project_cam(&xc)
                    + Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            );
            vis.push(rng.gen_bool(0.9));
            depths.push(xc.z * rng.gen_range(0.8..1.2));
        }
    }
    // every track must be visible somewhere; pin frame 0
    for i in 0..n {
        vis[i * tn] = true;
    }
    let tracks = TrackSet2D::new(n, tn, obs, vis, vec![0; n]);
    let anchors: Vec<Vector3<f64>> = (0..n).map(|i| positions[i * tn]).collect();
    let kink_free = |rng: &mut ChaCha8Rng| {
        let mut v = rng.gen_range(0.01..0.3);
        if rng.gen_bool(0.5) {
            v = -v;
        }
        v
    };
    let offsets: Vec<Vector3<f64>> = (0..n * tn)
        .map(|_| Vector3::new(kink_free(rng), kink_free(rng), kink_free(rng)))
        .collect();
    // brute-force 2-NN over the frame-0 positions
    let knn = (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((positions[j * tn] - positions[i * tn]).norm(), j))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d.truncate(2);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    RandomState {
        tracks,
        depths,
        poses,
        anchors,
        offsets,
        positions,
        knn,
    }
}

/// Audit all five loss terms at `trials` random states with step `h`;
/// poses, anchors, offsets, and dynamic positions are all free variables.
pub fn gradient_audit(trials: usize, seed: u64, h: f64) -> AuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraModel::new(60.0, 60.0, 32.0, 32.0);
    let clamp = 10.0 * (64.0f64 * 64.0 * 2.0).sqrt();
    let mut report = AuditReport::default();
    let record = |name: &str, err: f64, report: &mut AuditReport| {
        let e = report.per_loss.entry(name.to_string()).or_insert(0.0);
        *e = e.max(err);
    };
    for _ in 0..trials {
        let st = random_state(&mut rng, 4, 3, &cam);
        let mut points = st.anchors.clone();
        points.extend_from_slice(&st.offsets);
        let params2 = ParamBlocks::new(st.poses.clone(), points);
        for (name, lam) in [
            ("ba", [1.0, 0.0, 0.0]),
            ("dc", [0.0, 1.0, 0.0]),
            ("asap", [0.0, 0.0, 1.0]),
        ] {
            let obj = StaticRefineObjective {
                tracks: &st.tracks,
                depths: &st.depths,
                cam: &cam,
                lambda_ba: lam[0],
                lambda_dc: lam[1],
                lambda_asap: lam[2],
                clamp,
                n: st.tracks.n,
            };
            record(name, grad_check(&obj, &params2, h), &mut report);
        }
        let params3 = ParamBlocks::new(vec![], st.positions.clone());
        for (name, lam) in [("arap", [1.0, 0.0]), ("ts", [0.0, 1.0])] {
            let obj = DynObjective {
                tracks: &st.tracks,
                depths: &st.depths,
                poses: &st.poses,
                cam: &cam,
                knn: &st.knn,
                lambda_ba: 0.0,
                lambda_dc: 0.0,
                lambda_arap: lam[0],
                lambda_ts: lam[1],
                clamp,
            };
            record(name, grad_check(&obj, &params3, h), &mut report);
        }
    }
    report
}
