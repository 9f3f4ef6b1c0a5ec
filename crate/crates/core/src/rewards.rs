//! Reward and error terms as pure functions.
//!
//! Nothing here keeps state; the simulator and any training loop combine
//! the terms with the weights in [`RewardWeights`].

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::sim::Mask;

/// Thigh and shank length of the analytic two-link leg (m).
pub const LEG_SEGMENT: f64 = 0.3;
/// Part of the body height not spanned by the two leg segments (m).
pub const LEG_HEIGHT_OFFSET: f64 = 0.18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeLimits {
    /// Full extension (rad).
    pub lower: f64,
    /// Full flexion (rad).
    pub upper: f64,
}

impl Default for KneeLimits {
    fn default() -> Self {
        KneeLimits { lower: 0.0, upper: 2.8 }
    }
}

/// Tracking-term widths, one per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingSigmas {
    pub linear_velocity: f64,
    pub angular_velocity: f64,
    pub height: f64,
    pub ee_position: f64,
    pub ee_orientation: f64,
}

impl Default for TrackingSigmas {
    fn default() -> Self {
        TrackingSigmas {
            linear_velocity: 0.25,
            angular_velocity: 0.5,
            height: 0.05,
            ee_position: 0.05,
            ee_orientation: 0.3,
        }
    }
}

/// Relative weights of the terms. These are placeholders for tuning, not
/// reference values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub kmp: f64,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
    pub height: f64,
    pub ee_position: f64,
    pub ee_orientation: f64,
    pub action_rate: f64,
    pub torque_variation: f64,
    pub joint_velocity: f64,
    pub base_distance: f64,
    pub heading_alignment: f64,
    pub velocity_alignment: f64,
    pub inactive_deviation: f64,
    pub jitter: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            kmp: 1.0,
            linear_velocity: 1.0,
            angular_velocity: 0.5,
            height: 1.0,
            ee_position: 2.0,
            ee_orientation: 1.0,
            action_rate: 0.01,
            torque_variation: 1e-4,
            joint_velocity: 1e-3,
            base_distance: 0.5,
            heading_alignment: 0.2,
            velocity_alignment: 0.2,
            inactive_deviation: 0.1,
            jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    /// Joint-space width of the prior-following reward (rad).
    pub sigma_kmp: f64,
    pub knee_limits: [KneeLimits; 2],
    pub tracking: TrackingSigmas,
    /// Steps over which tracking terms ramp from 0 to 1 after a command
    /// resample.
    pub ramp_steps: usize,
    /// The height term only counts below these command magnitudes.
    pub zero_linear_velocity: f64,
    pub zero_angular_velocity: f64,
    pub weights: RewardWeights,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            sigma_kmp: 0.5,
            knee_limits: [KneeLimits::default(); 2],
            tracking: TrackingSigmas::default(),
            ramp_steps: 25,
            zero_linear_velocity: 0.05,
            zero_angular_velocity: 0.1,
            weights: RewardWeights::default(),
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        let t = &self.tracking;
        let sigmas = [
            self.sigma_kmp,
            t.linear_velocity,
            t.angular_velocity,
            t.height,
            t.ee_position,
            t.ee_orientation,
        ];
        if !sigmas.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Input("all reward sigmas must be positive and finite".into()));
        }
        if self.knee_limits.iter().any(|k| !(k.lower < k.upper)) {
            return Err(Error::Input("knee limits need lower < upper".into()));
        }
        if !(self.zero_linear_velocity >= 0.0 && self.zero_angular_velocity >= 0.0) {
            return Err(Error::Input("zero-velocity gates must be non-negative".into()));
        }
        Ok(())
    }
}

fn positive_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("sigma must be positive, got {sigma}")))
    }
}

/// `exp(−‖q − q̂‖² / (n·σ²))`.
pub fn reward_kmp(q: &[f64], q_hat: &[f64], sigma: f64, n: usize) -> Result<f64> {
    positive_sigma(sigma)?;
    if q.len() != q_hat.len() || n != q.len() || n == 0 {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {} with n = {n}",
            q.len(),
            q_hat.len()
        )));
    }
    let sq: f64 = q.iter().zip(q_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(positive_exp(-sq / (n as f64 * sigma * sigma)))
}

/// `exp(−e²/σ²)`.
pub fn exp_tracking_reward(error: f64, sigma: f64) -> Result<f64> {
    positive_sigma(sigma)?;
    Ok(positive_exp(-(error * error) / (sigma * sigma)))
}

/// `exp(x)` for `x ≤ 0`, kept inside `(0, 1]` when it underflows.
fn positive_exp(x: f64) -> f64 {
    x.exp().max(f64::MIN_POSITIVE)
}

/// Mean normalized distance to the flexion and to the extension limit,
/// each in `[0, 1]`.
pub fn knee_margins(knee_angles: &[f64], limits: &[KneeLimits]) -> (f64, f64) {
    assert_eq!(knee_angles.len(), limits.len(), "one limit pair per knee");
    assert!(!knee_angles.is_empty(), "at least one knee");
    let n = knee_angles.len() as f64;
    let (mut flex, mut ext) = (0.0, 0.0);
    for (&a, l) in knee_angles.iter().zip(limits) {
        let range = l.upper - l.lower;
        flex += ((l.upper - a) / range).clamp(0.0, 1.0);
        ext += ((a - l.lower) / range).clamp(0.0, 1.0);
    }
    (flex / n, ext / n)
}

/// Height error weighted by the knees' remaining room to move in the
/// direction that would fix it: flexion room when too high, extension room
/// when too low.
pub fn knee_aware_height_error(h: f64, h_des: f64, knee_angles: &[f64], limits: &[KneeLimits]) -> f64 {
    let (flex, ext) = knee_margins(knee_angles, limits);
    let e = h - h_des;
    if e > 0.0 {
        e * flex
    } else if e < 0.0 {
        e * ext
    } else {
        0.0
    }
}

/// Knee angle of a two-link leg whose segments span `h − LEG_HEIGHT_OFFSET`.
/// Zero is a straight leg.
pub fn knee_angle_from_height(h: f64) -> f64 {
    let span = (h - LEG_HEIGHT_OFFSET) / (2.0 * LEG_SEGMENT);
    std::f64::consts::PI - 2.0 * span.clamp(-1.0, 1.0).asin()
}

/// Whether the height term is active for this velocity command.
pub fn height_term_active(v: Vector2<f64>, omega: f64, params: &RewardParams) -> bool {
    v.norm() < params.zero_linear_velocity && omega.abs() < params.zero_angular_velocity
}

/// Scaling of tracking terms `steps` after a command resample: a linear
/// ramp from 0 to 1 over `ramp_steps`.
pub fn resample_ramp(steps: usize, ramp_steps: usize) -> f64 {
    if ramp_steps == 0 {
        1.0
    } else {
        (steps as f64 / ramp_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessPenalties {
    pub action_rate: f64,
    pub torque_variation: f64,
    pub joint_velocity: f64,
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared norms of the action step, the torque step and the joint
/// velocity.
pub fn smoothness_penalties(
    action: &[f64],
    prev_action: &[f64],
    torque: &[f64],
    prev_torque: &[f64],
    joint_velocity: &[f64],
) -> Result<SmoothnessPenalties> {
    if action.len() != prev_action.len() || torque.len() != prev_torque.len() {
        return Err(Error::Input("consecutive actions and torques must have matching lengths".into()));
    }
    Ok(SmoothnessPenalties {
        action_rate: sq_diff(action, prev_action),
        torque_variation: sq_diff(torque, prev_torque),
        joint_velocity: joint_velocity.iter().map(|v| v * v).sum(),
    })
}

/// Squared second difference of three consecutive commanded hand poses:
/// position in m plus rotation in rad (as rotation vectors relative to the
/// middle pose).
pub fn jitter_penalty(p0: &Pose, p1: &Pose, p2: &Pose) -> f64 {
    let dp = p2.position - 2.0 * p1.position + p0.position;
    let r2 = p2.rotation_error(p1);
    let r0 = p0.rotation_error(p1);
    dp.norm_squared() + (r2 + r0).norm_squared()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommanderScore {
    /// Planar distance from base to the active-target center (m).
    pub base_distance_penalty: f64,
    /// Cosine between base heading and the direction to the center.
    pub heading_alignment: f64,
    /// Cosine between commanded planar velocity and that direction.
    pub velocity_alignment: f64,
    pub ee_tracking_reward: f64,
    /// Squared joint deviation of the inactive arm from its default.
    pub inactive_deviation_penalty: f64,
}

/// Cosine of the angle between two planar vectors; 1 when either is
/// (numerically) zero and `fallback` says so.
fn cosine(a: Vector2<f64>, b: Vector2<f64>, fallback: f64) -> f64 {
    let n = a.norm() * b.norm();
    if n < 1e-12 {
        fallback
    } else {
        (a.dot(&b) / n).clamp(-1.0, 1.0)
    }
}

/// Scores a high-level command. `v_cmd` is `(vx, vy, ωz)` in the base frame;
/// `inactive_arm_deviation` holds the inactive arm's joint offsets from the
/// default posture (ignored when both arms are active).
pub fn commander_objective(
    base: &Pose,
    v_cmd: [f64; 3],
    target_center: &Vector3<f64>,
    ee_error: f64,
    mask: Mask,
    inactive_arm_deviation: &[f64],
    params: &RewardParams,
) -> Result<CommanderScore> {
    let to_center = Vector2::new(target_center.x - base.position.x, target_center.y - base.position.y);
    let yaw = base.yaw();
    let heading = Vector2::new(yaw.cos(), yaw.sin());
    let (s, c) = yaw.sin_cos();
    let v_world = Vector2::new(c * v_cmd[0] - s * v_cmd[1], s * v_cmd[0] + c * v_cmd[1]);
    let inactive = match mask {
        Mask::Both => 0.0,
        _ => inactive_arm_deviation.iter().map(|d| d * d).sum(),
    };
    Ok(CommanderScore {
        base_distance_penalty: to_center.norm(),
        heading_alignment: cosine(heading, to_center, 1.0),
        velocity_alignment: cosine(v_world, to_center, 0.0),
        ee_tracking_reward: exp_tracking_reward(ee_error, params.tracking.ee_position)?,
        inactive_deviation_penalty: inactive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn knees() -> [KneeLimits; 2] {
        [KneeLimits { lower: 0.0, upper: 2.0 }; 2]
    }

    #[test]
    fn kmp_reward_examples() {
        let q = [0.1, -0.2, 0.3];
        assert_eq!(reward_kmp(&q, &q, 0.5, 3).unwrap(), 1.0);
        // ‖Δ‖² = n·σ² gives e⁻¹.
        let sigma = 0.2;
        let d = sigma;
        let qh = [0.1 + d, -0.2 - d, 0.3 + d];
        assert!((reward_kmp(&q, &qh, sigma, 3).unwrap() - (-1f64).exp()).abs() < 1e-12);
        let r1 = reward_kmp(&q, &[0.0; 3], 0.3, 3).unwrap();
        let r2 = reward_kmp(&q, &[0.0; 3], 0.6, 3).unwrap();
        assert!((r2 - r1.powf(0.25)).abs() < 1e-12);
        assert!(reward_kmp(&q, &q, 0.0, 3).is_err());
        assert!(reward_kmp(&q, &q, 0.5, 2).is_err());
    }

    #[test]
    fn height_error_examples() {
        let k = knees();
        assert_eq!(knee_aware_height_error(0.6, 0.6, &[1.0, 1.0], &k), 0.0);
        assert_eq!(knee_aware_height_error(0.7, 0.6, &[2.0, 2.0], &k), 0.0);
        assert!((knee_aware_height_error(0.5, 0.6, &[1.0, 1.0], &k) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn knee_angle_spans_the_height_range() {
        assert!(knee_angle_from_height(LEG_HEIGHT_OFFSET + 2.0 * LEG_SEGMENT).abs() < 1e-12);
        let crouched = knee_angle_from_height(0.3);
        let standing = knee_angle_from_height(0.78);
        assert!(crouched > standing && crouched < KneeLimits::default().upper);
    }

    #[test]
    fn ramp_and_gate() {
        assert_eq!(resample_ramp(0, 25), 0.0);
        assert!((resample_ramp(10, 25) - 0.4).abs() < 1e-12);
        assert_eq!(resample_ramp(25, 25), 1.0);
        assert_eq!(resample_ramp(300, 25), 1.0);
        let p = RewardParams::default();
        assert!(height_term_active(Vector2::new(0.01, 0.0), 0.05, &p));
        assert!(!height_term_active(Vector2::new(0.06, 0.0), 0.0, &p));
        assert!(!height_term_active(Vector2::zeros(), 0.1, &p));
    }

    #[test]
    fn smoothness_examples() {
        let a = [0.1, 0.2];
        let p = smoothness_penalties(&a, &a, &[1.0], &[1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((p.action_rate, p.torque_variation, p.joint_velocity), (0.0, 0.0, 0.0));
        let one = smoothness_penalties(&[0.2, 0.2], &a, &[1.0], &[1.0], &[]).unwrap();
        let two = smoothness_penalties(&[0.3, 0.2], &a, &[1.0], &[1.0], &[]).unwrap();
        assert!((two.action_rate - 4.0 * one.action_rate).abs() < 1e-15);
        assert!(smoothness_penalties(&a, &[0.0], &[], &[], &[]).is_err());
    }

    #[test]
    fn jitter_vanishes_on_constant_velocity() {
        let p = |t: f64| Pose::planar(0.1 * t, 0.2, 0.3, 0.05 * t);
        assert!(jitter_penalty(&p(0.0), &p(1.0), &p(2.0)) < 1e-20);
        assert!(jitter_penalty(&p(0.0), &p(1.0), &p(3.0)) > 0.0);
    }

    #[test]
    fn commander_objective_examples() {
        let p = RewardParams::default();
        let base = Pose::planar(1.0, 1.0, 0.0, std::f64::consts::FRAC_PI_2);
        let center = Vector3::new(1.0, 3.0, 0.9);
        let s = commander_objective(&base, [-0.5, 0.0, 0.0], &center, 0.0, Mask::Left, &[0.0; 7], &p).unwrap();
        assert!((s.heading_alignment - 1.0).abs() < 1e-12);
        // Backwards in the base frame is −y in the world.
        assert!((s.velocity_alignment + 1.0).abs() < 1e-12);
        assert!((s.base_distance_penalty - 2.0).abs() < 1e-12);
        assert_eq!(s.inactive_deviation_penalty, 0.0);
        assert_eq!(s.ee_tracking_reward, 1.0);
        let s = commander_objective(&base, [0.0; 3], &center, 0.01, Mask::Left, &[0.1, 0.2], &p).unwrap();
        assert!((s.inactive_deviation_penalty - 0.05).abs() < 1e-12);
        assert_eq!(s.velocity_alignment, 0.0);
    }

    proptest! {
        #[test]
        fn exp_rewards_are_bounded_and_decreasing(e1 in 0.0f64..3.0, e2 in 0.0f64..3.0, sigma in 0.05f64..2.0) {
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let r_lo = exp_tracking_reward(lo, sigma).unwrap();
            let r_hi = exp_tracking_reward(hi, sigma).unwrap();
            prop_assert!(r_hi > 0.0 && r_lo <= 1.0);
            prop_assert!(r_hi <= r_lo);
            if hi - lo > 1e-6 && hi / sigma < 5.0 {
                prop_assert!(r_hi < r_lo);
            }
            let q = [lo, 0.0];
            let qk = reward_kmp(&q, &[0.0, 0.0], sigma, 2).unwrap();
            prop_assert!(qk > 0.0 && qk <= 1.0);
            prop_assert_eq!(reward_kmp(&[0.0, 0.0], &[0.0, 0.0], sigma, 2).unwrap(), 1.0);
        }

        #[test]
        fn height_error_sign_and_bound(h in 0.3f64..0.78, hd in 0.3f64..0.78, a in -0.5f64..2.5, b in -0.5f64..2.5) {
            let e = knee_aware_height_error(h, hd, &[a, b], &knees());
            let raw = h - hd;
            prop_assert!(e.abs() <= raw.abs() + 1e-15);
            prop_assert!(e == 0.0 || e.signum() == raw.signum());
        }

        #[test]
        fn penalties_are_non_negative(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6)) {
            let p = smoothness_penalties(&a, &b, &b, &a, &a).unwrap();
            prop_assert!(p.action_rate >= 0.0 && p.torque_variation >= 0.0 && p.joint_velocity >= 0.0);
        }
    }
}
