//! Optimization-based inverse kinematics.
//!
//! Minimizes
//!
//! ```text
//! Σ_active ‖w_pos·Δp‖² + ‖w_rot·Δθ‖²  +  α‖q_waist − q̄_waist‖²  +  0.2‖q_other − q̄_other‖²
//! ```
//!
//! where `q̄` is the chain's default posture, with a damped Gauss–Newton
//! (Levenberg–Marquardt) iteration. Every trial step is clamped into the
//! joint limits and only accepted if it lowers the cost; rejected steps
//! raise the damping and retry.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{ChainFrames, JointConfig, KinematicChain, Side};
use crate::error::{Error, Result};
use crate::pose::Pose;

pub const ALPHA_MIN: f64 = 0.1;
pub const ALPHA_MAX: f64 = 10.0;
/// Regularization weight for every non-waist joint.
pub const OTHER_JOINT_WEIGHT: f64 = 0.2;

/// Residual scale factors for the pose terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkWeights {
    /// Multiplies the position error (1/m).
    pub position: f64,
    /// Multiplies the rotation-vector error (1/rad).
    pub orientation: f64,
}

impl Default for IkWeights {
    fn default() -> Self {
        IkWeights {
            position: 100.0,
            orientation: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkProblem {
    pub left_target: Option<Pose>,
    pub right_target: Option<Pose>,
    /// Waist regularization weight in `[0.1, 10]`.
    pub alpha: f64,
    pub initial_q: JointConfig,
    pub weights: IkWeights,
}

impl IkProblem {
    pub fn new(
        left_target: Option<Pose>,
        right_target: Option<Pose>,
        alpha: f64,
        initial_q: JointConfig,
    ) -> Self {
        IkProblem {
            left_target,
            right_target,
            alpha,
            initial_q,
            weights: IkWeights::default(),
        }
    }

    pub fn target(&self, side: Side) -> Option<&Pose> {
        match side {
            Side::Left => self.left_target.as_ref(),
            Side::Right => self.right_target.as_ref(),
        }
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        if self.left_target.is_none() && self.right_target.is_none() {
            return Err(Error::Input("IK problem needs at least one target".into()));
        }
        for t in self.left_target.iter().chain(self.right_target.iter()) {
            if !t.is_finite() {
                return Err(Error::Input("IK target is not finite".into()));
            }
        }
        if !(ALPHA_MIN..=ALPHA_MAX).contains(&self.alpha) {
            return Err(Error::Input(format!(
                "alpha {} outside [{ALPHA_MIN}, {ALPHA_MAX}]",
                self.alpha
            )));
        }
        if self.initial_q.len() != chain.dof() {
            return Err(Error::Input(format!(
                "initial_q has {} values, chain has {} joints",
                self.initial_q.len(),
                chain.dof()
            )));
        }
        if !self.initial_q.is_finite() {
            return Err(Error::Input("initial_q is not finite".into()));
        }
        if !(self.weights.position > 0.0 && self.weights.orientation >= 0.0) {
            return Err(Error::Input("IK weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkOptions {
    pub max_iterations: usize,
    /// Initial Levenberg–Marquardt damping.
    pub damping: f64,
    /// Position error (m) below which an arm counts as converged.
    pub tolerance: f64,
    /// Orientation error (rad) that also has to be met before stopping early.
    pub orientation_tolerance: f64,
    /// Damping increases tried per iteration before giving up.
    pub max_backtracks: usize,
    /// Restarts allowed after a stalled descent; they share `max_iterations`.
    pub restarts: usize,
    /// Seeds restart configurations.
    pub seed: u64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            max_iterations: 100,
            damping: 1e-3,
            tolerance: 1e-3,
            orientation_tolerance: 1e-3,
            max_backtracks: 8,
            restarts: 8,
            seed: 0,
        }
    }
}

impl IkOptions {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkResult {
    pub q: JointConfig,
    /// Per arm (left, right); `None` for arms without a target.
    pub position_error: [Option<f64>; 2],
    pub orientation_error: [Option<f64>; 2],
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
}

impl IkResult {
    pub fn max_position_error(&self) -> f64 {
        self.position_error.iter().flatten().fold(0.0, |a, b| a.max(*b))
    }

    pub fn max_orientation_error(&self) -> f64 {
        self.orientation_error.iter().flatten().fold(0.0, |a, b| a.max(*b))
    }
}

/// Cost terms evaluated at one configuration.
struct Evaluation {
    frames: ChainFrames,
    cost: f64,
    pos_err: [Option<f64>; 2],
    rot_err: [Option<f64>; 2],
    /// Weighted pose residuals (6 per active arm).
    residual: [Option<[f64; 6]>; 2],
    /// Rotation-vector error per active arm.
    rot_vec: [Vector3<f64>; 2],
    ee_pos: [Vector3<f64>; 2],
}

/// Shared cost model for [`solve_ik`] and the tracker's one-step refinement.
pub(crate) struct IkCost<'a> {
    chain: &'a KinematicChain,
    targets: [Option<Pose>; 2],
    weights: IkWeights,
    reg: Vec<f64>,
    rest: Vec<f64>,
}

impl<'a> IkCost<'a> {
    pub(crate) fn new(chain: &'a KinematicChain, problem: &IkProblem) -> Self {
        let mut reg = vec![OTHER_JOINT_WEIGHT; chain.dof()];
        for &w in &chain.groups().waist {
            reg[w] = problem.alpha;
        }
        IkCost {
            chain,
            targets: [problem.left_target, problem.right_target],
            weights: problem.weights,
            reg,
            rest: chain.default_config().into_inner(),
        }
    }

    fn evaluate(&self, q: &[f64]) -> Evaluation {
        let frames = self.chain.frames(q);
        let mut cost = 0.0;
        let mut pos_err = [None; 2];
        let mut rot_err = [None; 2];
        let mut residual = [None; 2];
        let mut ee_pos = [Vector3::zeros(); 2];
        let mut rot_vec = [Vector3::zeros(); 2];
        for side in Side::BOTH {
            let Some(target) = &self.targets[side.index()] else {
                continue;
            };
            let ee = self.chain.ee_from_frames(&frames, side);
            let dp = ee.translation.vector - target.position;
            let dr = (ee.rotation * target.orientation.inverse()).scaled_axis();
            let r = [
                self.weights.position * dp.x,
                self.weights.position * dp.y,
                self.weights.position * dp.z,
                self.weights.orientation * dr.x,
                self.weights.orientation * dr.y,
                self.weights.orientation * dr.z,
            ];
            cost += r.iter().map(|v| v * v).sum::<f64>();
            pos_err[side.index()] = Some(dp.norm());
            rot_err[side.index()] = Some(dr.norm());
            residual[side.index()] = Some(r);
            ee_pos[side.index()] = ee.translation.vector;
            rot_vec[side.index()] = dr;
        }
        for ((qi, ri), wi) in q.iter().zip(&self.rest).zip(&self.reg) {
            cost += wi * (qi - ri) * (qi - ri);
        }
        Evaluation {
            frames,
            cost,
            pos_err,
            rot_err,
            residual,
            rot_vec,
            ee_pos,
        }
    }

    /// Gauss–Newton normal equations `(H, g)` at an evaluated configuration.
    fn normal_equations(&self, q: &[f64], ev: &Evaluation) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.chain.dof();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut jac = DMatrix::zeros(6, n);
        for side in Side::BOTH {
            let Some(r) = ev.residual[side.index()] else {
                continue;
            };
            self.chain
                .jacobian_from_frames(&ev.frames, side, &ev.ee_pos[side.index()], &mut jac);
            // d log(R R_t^T) = J_l^{-1}(φ) ω
            let jl_inv = so3_left_jacobian_inv(&ev.rot_vec[side.index()]);
            for &c in self.chain.ee_path(side) {
                let w = jl_inv * jac.fixed_view::<3, 1>(3, c);
                jac.fixed_view_mut::<3, 1>(3, c).copy_from(&w);
            }
            for row in 0..6 {
                let w = if row < 3 {
                    self.weights.position
                } else {
                    self.weights.orientation
                };
                jac.row_mut(row).scale_mut(w);
            }
            // Only path columns are non-zero.
            let path = self.chain.ee_path(side);
            for &a in path {
                let ca = jac.column(a);
                g[a] += ca.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>();
                for &b in path {
                    h[(a, b)] += ca.dot(&jac.column(b));
                }
            }
        }
        for i in 0..n {
            h[(i, i)] += self.reg[i];
            g[i] += self.reg[i] * (q[i] - self.rest[i]);
        }
        (h, g)
    }

    /// One damped step from `q`, clamped to limits. Returns the new
    /// configuration if it lowers the cost.
    pub(crate) fn damped_step(&self, q: &[f64], damping: f64) -> Option<Vec<f64>> {
        let ev = self.evaluate(q);
        let (h, g) = self.normal_equations(q, &ev);
        let mut lambda = damping;
        for _ in 0..8 {
            if let Some(next) = self.trial(q, &h, &g, lambda) {
                if self.evaluate(&next).cost < ev.cost {
                    return Some(next);
                }
            }
            lambda *= 5.0;
        }
        None
    }

    /// Solves the damped system, holding joints fixed that sit on a limit
    /// and would be pushed past it, then clamps the result.
    fn trial(&self, q: &[f64], h: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<Vec<f64>> {
        let n = q.len();
        let lower = self.chain.lower_limits();
        let upper = self.chain.upper_limits();
        let mut fixed = vec![false; n];
        let mut step = DVector::zeros(n);
        for _ in 0..4 {
            let mut a = h.clone();
            let mut b = g.clone();
            for i in 0..n {
                a[(i, i)] += lambda * (1.0 + h[(i, i)]);
                if fixed[i] {
                    for k in 0..n {
                        a[(i, k)] = 0.0;
                        a[(k, i)] = 0.0;
                    }
                    a[(i, i)] = 1.0;
                    b[i] = 0.0;
                }
            }
            step = a.cholesky()?.solve(&b);
            let mut changed = false;
            for i in 0..n {
                let pushes_low = q[i] <= lower[i] && step[i] > 0.0;
                let pushes_high = q[i] >= upper[i] && step[i] < 0.0;
                if !fixed[i] && (pushes_low || pushes_high) {
                    fixed[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut next: Vec<f64> = q.iter().zip(step.iter()).map(|(qi, si)| qi - si).collect();
        self.chain.clamp_in_place(&mut next);
        Some(next)
    }
}

/// Inverse of the left Jacobian of SO(3) at rotation vector `phi`.
pub(crate) fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = phi.cross_matrix();
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (s, co) = theta.sin_cos();
        1.0 / (theta * theta) - (1.0 + co) / (2.0 * theta * s)
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

/// Solves one IK problem. The returned configuration always lies within the
/// joint limits.
///
/// `max_iterations` bounds the total number of Gauss–Newton iterations. When
/// a descent stalls short of the tolerances with budget left, the solver
/// restarts from the best configuration so far with the unfinished arms
/// re-drawn uniformly inside their limits (seeded by `opts.seed`), and keeps
/// the lowest-cost result.
pub fn solve_ik(chain: &KinematicChain, problem: &IkProblem, opts: &IkOptions) -> Result<IkResult> {
    problem.validate(chain)?;
    if opts.max_iterations == 0 {
        return Err(Error::Input("max_iterations must be at least 1".into()));
    }
    let cost_model = IkCost::new(chain, problem);
    let q0 = chain.clamp_to_limits(&problem.initial_q).into_inner();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut remaining = opts.max_iterations;
    let mut iterations = 0;

    let mut best = cost_model.evaluate(&q0);
    let mut best_q = q0.clone();
    let mut q = q0;
    for attempt in 0..=opts.restarts {
        let (q_end, ev, used, outcome) = descend(&cost_model, q, remaining, opts);
        remaining -= used;
        iterations += used;
        if attempt == 0 || ev.cost < best.cost {
            best = ev;
            best_q = q_end;
        }
        if outcome != Outcome::Stalled || remaining == 0 {
            break;
        }
        let unfinished: Vec<Side> = Side::BOTH
            .into_iter()
            .filter(|s| {
                let i = s.index();
                best.pos_err[i].is_some_and(|e| e >= opts.tolerance)
                    || best.rot_err[i].is_some_and(|e| e >= RESTART_ORIENTATION_ERROR)
            })
            .collect();
        if unfinished.is_empty() {
            break;
        }
        q = best_q.clone();
        for side in unfinished {
            for &j in chain.groups().arm(side) {
                q[j] = rng.random_range(chain.lower_limits()[j]..=chain.upper_limits()[j]);
            }
        }
    }

    let converged = best.pos_err.iter().flatten().all(|e| *e < opts.tolerance);
    Ok(IkResult {
        q: JointConfig(best_q),
        position_error: best.pos_err,
        orientation_error: best.rot_err,
        iterations,
        converged,
        cost: best.cost,
    })
}

/// Orientation error (rad) above which a stalled arm is worth a restart.
const RESTART_ORIENTATION_ERROR: f64 = 0.01;
/// Iterations over which relative cost progress is judged.
const STALL_WINDOW: usize = 8;
const STALL_PROGRESS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    /// Tolerances met.
    Done,
    /// Ran out of iterations.
    Budget,
    /// No further descent possible or worthwhile.
    Stalled,
}

fn descend(
    cost_model: &IkCost,
    mut q: Vec<f64>,
    budget: usize,
    opts: &IkOptions,
) -> (Vec<f64>, Evaluation, usize, Outcome) {
    let mut ev = cost_model.evaluate(&q);
    let mut lambda = opts.damping;
    let mut history = Vec::with_capacity(budget + 1);
    history.push(ev.cost);
    let done = |ev: &Evaluation| {
        ev.pos_err.iter().flatten().all(|e| *e < opts.tolerance)
            && ev.rot_err.iter().flatten().all(|e| *e < opts.orientation_tolerance)
    };

    let mut used = 0;
    loop {
        if done(&ev) {
            return (q, ev, used, Outcome::Done);
        }
        if used == budget {
            return (q, ev, used, Outcome::Budget);
        }
        used += 1;
        let (h, g) = cost_model.normal_equations(&q, &ev);
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            if let Some(next) = cost_model.trial(&q, &h, &g, lambda) {
                let next_ev = cost_model.evaluate(&next);
                if next_ev.cost < ev.cost {
                    accepted = Some((next, next_ev));
                    break;
                }
            }
            lambda *= 5.0;
        }
        let Some((next, next_ev)) = accepted else {
            return (q, ev, used, Outcome::Stalled);
        };
        let decrease = ev.cost - next_ev.cost;
        q = next;
        ev = next_ev;
        lambda = (lambda / 3.0).max(1e-9);
        history.push(ev.cost);
        if decrease <= 1e-14 * (1.0 + ev.cost) {
            return (q, ev, used, Outcome::Stalled);
        }
        if history.len() > STALL_WINDOW {
            let before = history[history.len() - 1 - STALL_WINDOW];
            if ev.cost > (1.0 - STALL_PROGRESS) * before {
                return (q, ev, used, Outcome::Stalled);
            }
        }
    }
}

/// Solves every problem independently; element `i` is `solve_ik(problems[i])`.
pub fn batch_solve(
    chain: &KinematicChain,
    problems: &[IkProblem],
    opts: &IkOptions,
) -> Vec<Result<IkResult>> {
    problems
        .par_iter()
        .map(|p| solve_ik(chain, p, opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub iteration_cap: usize,
    pub solves: usize,
    pub mean_us: f64,
    pub median_us: f64,
}

const WARMUP_SOLVES: usize = 100;
const MIN_TIMED_SOLVES: usize = 1000;

/// Per-solve wall-clock latency for each iteration cap, single-threaded.
pub fn solver_latency_profile(
    chain: &KinematicChain,
    problems: &[IkProblem],
    iteration_caps: &[usize],
) -> Result<Vec<LatencyRow>> {
    if problems.is_empty() {
        return Err(Error::Input("latency profile needs at least one problem".into()));
    }
    if iteration_caps.contains(&0) {
        return Err(Error::Input("iteration caps must be at least 1".into()));
    }
    let count = MIN_TIMED_SOLVES.max(problems.len());
    let mut rows = Vec::with_capacity(iteration_caps.len());
    for &cap in iteration_caps {
        let opts = IkOptions::default().with_max_iterations(cap);
        for p in problems.iter().cycle().take(WARMUP_SOLVES) {
            std::hint::black_box(solve_ik(chain, p, &opts)?);
        }
        let mut samples = Vec::with_capacity(count);
        for p in problems.iter().cycle().take(count) {
            let t = Instant::now();
            std::hint::black_box(solve_ik(chain, std::hint::black_box(p), &opts)?);
            samples.push(t.elapsed().as_secs_f64() * 1e6);
        }
        rows.push(LatencyRow {
            iteration_cap: cap,
            solves: count,
            mean_us: samples.iter().sum::<f64>() / count as f64,
            median_us: crate::stats::median(&mut samples),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> KinematicChain {
        KinematicChain::default_humanoid()
    }

    #[test]
    fn default_targets_are_solved_immediately() {
        let c = chain();
        let q0 = c.default_config();
        let p = IkProblem::new(
            Some(c.ee_pose(&q0, Side::Left)),
            Some(c.ee_pose(&q0, Side::Right)),
            1.0,
            q0.clone(),
        );
        let r = solve_ik(&c, &p, &IkOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.q, q0);
    }

    #[test]
    fn far_target_does_not_converge() {
        let c = chain();
        let p = IkProblem::new(
            Some(Pose::from_translation(10.0, 0.0, 0.3)),
            None,
            1.0,
            c.default_config(),
        );
        let r = solve_ik(&c, &p, &IkOptions::default()).unwrap();
        assert!(!r.converged);
        assert!(r.position_error[0].unwrap() > 1.0);
        assert!(r.position_error[1].is_none());
        assert!(c.within_limits(&r.q));
    }

    #[test]
    fn input_errors() {
        let c = chain();
        let none = IkProblem::new(None, None, 1.0, c.default_config());
        assert!(matches!(solve_ik(&c, &none, &IkOptions::default()), Err(Error::Input(_))));
        let nan = IkProblem::new(
            Some(Pose::from_translation(f64::NAN, 0.0, 0.0)),
            None,
            1.0,
            c.default_config(),
        );
        assert!(matches!(solve_ik(&c, &nan, &IkOptions::default()), Err(Error::Input(_))));
        let mut bad_q = c.default_config();
        bad_q[4] = f64::INFINITY;
        let p = IkProblem::new(Some(Pose::identity()), None, 1.0, bad_q);
        assert!(matches!(solve_ik(&c, &p, &IkOptions::default()), Err(Error::Input(_))));
        let p = IkProblem::new(Some(Pose::identity()), None, 20.0, c.default_config());
        assert!(matches!(solve_ik(&c, &p, &IkOptions::default()), Err(Error::Input(_))));
    }

    #[test]
    fn cost_never_increases_with_iterations() {
        let c = chain();
        let target = Pose::from_parts([0.35, 0.25, 0.2], [0.8, 0.2, -0.3, 0.1]);
        let mut last = f64::INFINITY;
        for cap in 1..=30 {
            let p = IkProblem::new(Some(target), None, 1.0, c.default_config());
            let r = solve_ik(&c, &p, &IkOptions::default().with_max_iterations(cap)).unwrap();
            assert!(r.cost <= last, "cap {cap}: {} > {last}", r.cost);
            last = r.cost;
        }
    }
}
