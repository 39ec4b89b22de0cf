//! First-order minimizer over mixed parameter blocks.
//!
//! Parameters are SE(3) poses (updated by left retraction on their tangent)
//! plus flat 3-vector point blocks. The descent direction is the gradient
//! preconditioned by a running per-coordinate RMS, with a backtracking line
//! search on the step scale. Evaluation order is fixed, so identical inputs
//! produce identical iterates.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::PoseSE3;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SolverError {
    #[error("non-finite objective at {context}")]
    NonFiniteObjective { context: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step: f64,
    pub tol: f64,
    pub grad_check: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step: 1e-2,
            tol: 1e-8,
            grad_check: false,
        }
    }
}

/// Optimization variables: poses first, then 3-vector point blocks.
/// Frozen blocks keep their value and receive zero updates.
#[derive(Debug, Clone)]
pub struct ParamBlocks {
    pub poses: Vec<PoseSE3>,
    pub pose_frozen: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub point_frozen: Vec<bool>,
}

impl ParamBlocks {
    pub fn new(poses: Vec<PoseSE3>, points: Vec<Vector3<f64>>) -> Self {
        let np = poses.len();
        let nq = points.len();
        Self {
            poses,
            pose_frozen: vec![false; np],
            points,
            point_frozen: vec![false; nq],
        }
    }

    pub fn dim(&self) -> usize {
        self.poses.len() * 6 + self.points.len() * 3
    }

    pub fn point_offset(&self) -> usize {
        self.poses.len() * 6
    }

    /// Apply a tangent step, skipping frozen blocks.
    pub fn step(&self, delta: &[f64]) -> ParamBlocks {
        debug_assert_eq!(delta.len(), self.dim());
        let mut out = self.clone();
        for (i, pose) in out.poses.iter_mut().enumerate() {
            if self.pose_frozen[i] {
                continue;
            }
            let d = Vector6::from_column_slice(&delta[i * 6..i * 6 + 6]);
            *pose = pose.retract(&d);
            debug_assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
        let off = self.point_offset();
        for (i, pt) in out.points.iter_mut().enumerate() {
            if self.point_frozen[i] {
                continue;
            }
            let base = off + i * 3;
            *pt += Vector3::new(delta[base], delta[base + 1], delta[base + 2]);
        }
        out
    }

    /// Zero out gradient entries of frozen blocks.
    pub fn mask_frozen(&self, grad: &mut [f64]) {
        for (i, &fz) in self.pose_frozen.iter().enumerate() {
            if fz {
                grad[i * 6..i * 6 + 6].fill(0.0);
            }
        }
        let off = self.point_offset();
        for (i, &fz) in self.point_frozen.iter().enumerate() {
            if fz {
                grad[off + i * 3..off + i * 3 + 3].fill(0.0);
            }
        }
    }
}

/// Differentiable scalar objective over `ParamBlocks`.
pub trait Objective {
    fn eval(&self, params: &ParamBlocks) -> f64;

    /// Returns the loss and accumulates the gradient (tangent layout,
    /// poses then points) into `grad`, which arrives zeroed.
    fn eval_grad(&self, params: &ParamBlocks, grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub params: ParamBlocks,
    pub loss: f64,
    pub iterations: usize,
    /// Loss after each accepted iteration.
    pub history: Vec<f64>,
}

pub fn minimize(
    objective: &dyn Objective,
    init: ParamBlocks,
    cfg: &SolverConfig,
) -> Result<MinimizeResult, SolverError> {
    let dim = init.dim();
    let mut params = init;
    let mut grad = vec![0.0; dim];
    let mut rms = vec![0.0f64; dim];
    let mut lr = cfg.step;
    let mut loss = objective.eval_grad(&params, &mut grad);
    params.mask_frozen(&mut grad);
    if !loss.is_finite() {
        return Err(SolverError::NonFiniteObjective {
            context: "initial point".into(),
        });
    }
    let mut best = params.clone();
    let mut best_loss = loss;
    let mut history = vec![loss];
    let mut iterations = 0;
    const BETA: f64 = 0.9;
    const EPS: f64 = 1e-12;

    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2 == 0.0 {
            break;
        }
        for i in 0..dim {
            rms[i] = BETA * rms[i] + (1.0 - BETA) * grad[i] * grad[i];
        }
        // bias-corrected RMS preconditioner
        let corr = 1.0 - BETA.powi(iter as i32 + 1);
        let dir: Vec<f64> = (0..dim)
            .map(|i| -grad[i] / ((rms[i] / corr).sqrt() + EPS))
            .collect();

        // backtracking on the step scale; grow slowly on success
        let mut accepted = false;
        let mut trial_lr = lr;
        for _ in 0..30 {
            let delta: Vec<f64> = dir.iter().map(|d| d * trial_lr).collect();
            let cand = params.step(&delta);
            let cand_loss = objective.eval(&cand);
            if cand_loss.is_finite() && cand_loss <= loss {
                params = cand;
                loss = cand_loss;
                lr = (trial_lr * 1.3).min(cfg.step * 100.0);
                accepted = true;
                break;
            }
            trial_lr *= 0.5;
        }
        if !accepted {
            break;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let check = objective.eval_grad(&params, &mut grad);
        params.mask_frozen(&mut grad);
        if !check.is_finite() {
            return Err(SolverError::NonFiniteObjective {
                context: format!("iteration {iterations}"),
            });
        }
        history.push(loss);
        if loss < best_loss {
            best = params.clone();
            best_loss = loss;
        }
        let prev = history[history.len() - 2];
        if (prev - loss).abs() <= cfg.tol * prev.abs().max(1.0) {
            break;
        }
    }

    Ok(MinimizeResult {
        params: best,
        loss: best_loss,
        iterations,
        history,
    })
}

/// Max relative error between the analytic gradient and central finite
/// differences, taken over every free coordinate.
pub fn grad_check(objective: &dyn Objective, params: &ParamBlocks, h: f64) -> f64 {
    let dim = params.dim();
    let mut grad = vec![0.0; dim];
    objective.eval_grad(params, &mut grad);
    let mut masked = grad.clone();
    params.mask_frozen(&mut masked);
    let mut worst = 0.0f64;
    for i in 0..dim {
        if masked[i] != grad[i] {
            continue; // frozen coordinate
        }
        let mut delta = vec![0.0; dim];
        delta[i] = h;
        let up = objective.eval(&params.step(&delta));
        delta[i] = -h;
        let dn = objective.eval(&params.step(&delta));
        let fd = (up - dn) / (2.0 * h);
        let ga = grad[i];
        let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}
