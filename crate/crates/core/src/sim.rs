//! Two-timescale kinematic simulation. A scripted commander works in the
//! world frame and refreshes a subgoal every `K` steps; a tracker turns the
//! current subgoal into an upper-body configuration at every step while the
//! base follows its commanded twist and drifts.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chain::{KinematicChain, Side};
use crate::dataset::CommandSample;
use crate::error::{Error, Result};
use crate::ik::{solve_ik, IkCost, IkOptions, IkProblem, ALPHA_MAX, ALPHA_MIN};
use crate::kmp::{kmp_infer, kmp_residual_apply, KmpModel};
use crate::pose::Pose;
use crate::JointConfig;

/// Control period (50 Hz).
pub const DT: f64 = 0.02;
pub const DEFAULT_DECIMATION: usize = 5;
pub const LINEAR_VELOCITY_LIMIT: f64 = 1.0;
pub const ANGULAR_VELOCITY_LIMIT: f64 = 3.0;
pub const HEIGHT_MIN: f64 = 0.3;
pub const HEIGHT_MAX: f64 = 0.78;
/// Mean end-effector error below which an episode counts as a success.
pub const SUCCESS_THRESHOLD: f64 = 0.020;

/// Which arms a task drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mask {
    Left,
    Right,
    Both,
}

impl Mask {
    pub fn includes(self, side: Side) -> bool {
        match self {
            Mask::Both => true,
            Mask::Left => side == Side::Left,
            Mask::Right => side == Side::Right,
        }
    }

    pub fn from_presence(left: bool, right: bool) -> Option<Mask> {
        match (left, right) {
            (true, true) => Some(Mask::Both),
            (true, false) => Some(Mask::Left),
            (false, true) => Some(Mask::Right),
            (false, false) => None,
        }
    }

    /// `[left, right]` as 0/1.
    pub fn bits(self) -> [u8; 2] {
        [self.includes(Side::Left) as u8, self.includes(Side::Right) as u8]
    }

    pub fn sides(self) -> impl Iterator<Item = Side> {
        Side::BOTH.into_iter().filter(move |&s| self.includes(s))
    }
}

impl std::str::FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Mask::Left),
            "right" => Ok(Mask::Right),
            "both" => Ok(Mask::Both),
            _ => Err(Error::Input(format!("unknown mask `{s}` (left, right, both)"))),
        }
    }
}

/// High-level command handed to the tracker. Targets are in the base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgoalCommand {
    /// `(vx, vy, ωz)` in the base frame.
    pub velocity: [f64; 3],
    pub height: f64,
    pub left_target: Option<Pose>,
    pub right_target: Option<Pose>,
    pub alpha: f64,
}

impl SubgoalCommand {
    pub fn target(&self, side: Side) -> Option<&Pose> {
        match side {
            Side::Left => self.left_target.as_ref(),
            Side::Right => self.right_target.as_ref(),
        }
    }

    pub fn command_sample(&self) -> CommandSample {
        CommandSample {
            left_target: self.left_target,
            right_target: self.right_target,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [vx, vy, wz] = self.velocity;
        let lin = |v: f64| v.abs() <= LINEAR_VELOCITY_LIMIT;
        if !(lin(vx) && lin(vy) && wz.abs() <= ANGULAR_VELOCITY_LIMIT) {
            return Err(Error::Input(format!("velocity {:?} outside command range", self.velocity)));
        }
        if !(HEIGHT_MIN..=HEIGHT_MAX).contains(&self.height) {
            return Err(Error::Input(format!("height {} outside [{HEIGHT_MIN}, {HEIGHT_MAX}]", self.height)));
        }
        if !(ALPHA_MIN..=ALPHA_MAX).contains(&self.alpha) {
            return Err(Error::Input(format!("alpha {} outside [{ALPHA_MIN}, {ALPHA_MAX}]", self.alpha)));
        }
        if self.left_target.iter().chain(&self.right_target).any(|p| !p.is_finite()) {
            return Err(Error::Input("subgoal target is not finite".into()));
        }
        Ok(())
    }
}

/// World-frame hand targets plus the arm mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskCommand {
    pub left_target: Option<Pose>,
    pub right_target: Option<Pose>,
    pub mask: Mask,
}

impl TaskCommand {
    pub fn new(left_target: Option<Pose>, right_target: Option<Pose>, mask: Mask) -> Result<Self> {
        let t = TaskCommand {
            left_target,
            right_target,
            mask,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn single(side: Side, target: Pose) -> Self {
        match side {
            Side::Left => TaskCommand {
                left_target: Some(target),
                right_target: None,
                mask: Mask::Left,
            },
            Side::Right => TaskCommand {
                left_target: None,
                right_target: Some(target),
                mask: Mask::Right,
            },
        }
    }

    pub fn target(&self, side: Side) -> Option<&Pose> {
        match side {
            Side::Left => self.left_target.as_ref(),
            Side::Right => self.right_target.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match Mask::from_presence(self.left_target.is_some(), self.right_target.is_some()) {
            None => Err(Error::Input("task has no active targets".into())),
            Some(m) if m != self.mask => Err(Error::Input(format!(
                "mask {:?} does not match the targets present",
                self.mask
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Mean position of the active targets.
    pub fn centroid(&self) -> Vector3<f64> {
        let ps: Vec<Vector3<f64>> = self.mask.sides().filter_map(|s| self.target(s)).map(|p| p.position).collect();
        ps.iter().sum::<Vector3<f64>>() / ps.len() as f64
    }
}

/// Planar base pose and height, upper-body joints, and the accumulated
/// drift that odometry does not see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub height: f64,
    /// Executed base twist `(vx, vy, ωz)`, base frame.
    pub velocity: [f64; 3],
    pub q_up: JointConfig,
    pub step: usize,
    pub drift: [f64; 2],
}

impl SimState {
    pub fn new(chain: &KinematicChain, x: f64, y: f64, yaw: f64, height: f64) -> Self {
        SimState {
            x,
            y,
            yaw,
            height: height.clamp(HEIGHT_MIN, HEIGHT_MAX),
            velocity: [0.0; 3],
            q_up: chain.default_config(),
            step: 0,
            drift: [0.0; 2],
        }
    }

    /// True base pose in the world.
    pub fn base_pose(&self) -> Pose {
        Pose::planar(self.x, self.y, self.height, self.yaw)
    }

    /// Base pose as dead reckoning sees it: the true pose minus drift.
    pub fn odometry_pose(&self) -> Pose {
        Pose::planar(self.x - self.drift[0], self.y - self.drift[1], self.height, self.yaw)
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        if !(HEIGHT_MIN - 1e-12..=HEIGHT_MAX + 1e-12).contains(&self.height) {
            return Err(Error::Validation(format!("base height {} out of range", self.height)));
        }
        if self.q_up.len() != chain.dof() || !chain.within_limits(&self.q_up) {
            return Err(Error::Validation("upper-body configuration outside limits".into()));
        }
        Ok(())
    }

    /// World pose of a hand.
    pub fn hand_pose(&self, chain: &KinematicChain, side: Side) -> Pose {
        self.base_pose().compose(&chain.ee_pose(&self.q_up, side))
    }
}

/// Scripted commander parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommanderParams {
    /// Planar velocity per metre of placement error (1/s).
    pub linear_gain: f64,
    /// Yaw rate per radian of heading error (1/s).
    pub angular_gain: f64,
    /// Comfortable left-hand position in the base frame; mirrored for the
    /// right hand, `y = 0` for both hands.
    pub reach_center: [f64; 3],
    /// Shoulder height above the base origin.
    pub shoulder_height: f64,
    /// Allowed target height relative to the shoulder, `[low, high]`.
    pub height_band: [f64; 2],
    /// Placement error that starts a relocation.
    pub engage_radius: f64,
    /// Placement error that ends it.
    pub settle_radius: f64,
    /// Beyond this distance the base faces its direction of travel.
    pub face_travel_distance: f64,
    /// Speed at and above which alpha is at its maximum.
    pub locomotion_speed: f64,
    /// Speed below which the base counts as stationary.
    pub stationary_speed: f64,
    /// Distance from the reach center where alpha starts dropping, and where
    /// it reaches its boundary value.
    pub boundary_radii: [f64; 2],
    pub alpha_locomotion: f64,
    pub alpha_nominal: f64,
    pub alpha_boundary: f64,
}

impl Default for CommanderParams {
    fn default() -> Self {
        CommanderParams {
            linear_gain: 1.5,
            angular_gain: 2.0,
            reach_center: [0.22, 0.12, 0.27],
            shoulder_height: 0.37,
            height_band: [-0.3, 0.1],
            engage_radius: 0.25,
            settle_radius: 0.01,
            face_travel_distance: 1.0,
            locomotion_speed: 0.3,
            stationary_speed: 0.05,
            boundary_radii: [0.1, 0.25],
            alpha_locomotion: 10.0,
            alpha_nominal: 1.0,
            alpha_boundary: 0.5,
        }
    }
}

impl CommanderParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.linear_gain,
            self.angular_gain,
            self.engage_radius,
            self.locomotion_speed,
            self.face_travel_distance,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Input("commander gains and radii must be positive".into()));
        }
        if !(0.0 <= self.settle_radius && self.settle_radius < self.engage_radius) {
            return Err(Error::Input("settle radius must be below the engage radius".into()));
        }
        if self.height_band[0] >= self.height_band[1] {
            return Err(Error::Input("height band is empty".into()));
        }
        if !(0.0 <= self.stationary_speed && self.stationary_speed < self.locomotion_speed) {
            return Err(Error::Input("stationary speed must be below the locomotion speed".into()));
        }
        if self.boundary_radii[0] >= self.boundary_radii[1] {
            return Err(Error::Input("boundary radii must increase".into()));
        }
        for a in [self.alpha_locomotion, self.alpha_nominal, self.alpha_boundary] {
            if !(ALPHA_MIN..=ALPHA_MAX).contains(&a) {
                return Err(Error::Input(format!("alpha {a} outside [{ALPHA_MIN}, {ALPHA_MAX}]")));
            }
        }
        Ok(())
    }

    /// Reach center for a mask, base frame.
    pub fn reach_point(&self, mask: Mask) -> Vector3<f64> {
        let [x, y, z] = self.reach_center;
        match mask {
            Mask::Left => Vector3::new(x, y, z),
            Mask::Right => Vector3::new(x, -y, z),
            Mask::Both => Vector3::new(x, 0.0, z),
        }
    }
}

/// Hand orientation of the default posture, base frame.
pub fn palm_forward(chain: &KinematicChain, side: Side) -> UnitQuaternion<f64> {
    chain.ee_pose(&chain.default_config(), side).orientation
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

fn rotate2(yaw: f64, v: Vector2<f64>) -> Vector2<f64> {
    let (s, c) = yaw.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Scripted high-level policy. Holds the relocation flag and the height
/// set point between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Commander {
    pub params: CommanderParams,
    nominal: [UnitQuaternion<f64>; 2],
    relocating: bool,
    height: Option<f64>,
}

impl Commander {
    pub fn new(chain: &KinematicChain, params: CommanderParams) -> Result<Self> {
        params.validate()?;
        Ok(Commander {
            params,
            nominal: [palm_forward(chain, Side::Left), palm_forward(chain, Side::Right)],
            relocating: true,
            height: None,
        })
    }

    pub fn is_relocating(&self) -> bool {
        self.relocating
    }

    /// Heading that puts the active hands in their default orientation.
    fn preferred_heading(&self, task: &TaskCommand) -> f64 {
        let side = task.mask.sides().next().unwrap_or(Side::Left);
        let target = task.target(side).map(|p| p.orientation).unwrap_or_else(UnitQuaternion::identity);
        let r = target * self.nominal[side.index()].inverse();
        let x = r * Vector3::x();
        x.y.atan2(x.x)
    }

    /// One commander update from the base pose estimate `estimate`.
    pub fn step(&mut self, estimate: &Pose, task: &TaskCommand) -> Result<SubgoalCommand> {
        task.validate()?;
        let p = self.params;
        let centroid = task.centroid();
        let base_xy = Vector2::new(estimate.position.x, estimate.position.y);
        let yaw = estimate.yaw();

        let heading = self.preferred_heading(task);
        let reach = p.reach_point(task.mask);
        let placement = Vector2::new(centroid.x, centroid.y) - rotate2(heading, reach.xy());
        let err = placement - base_xy;
        let dist = err.norm();
        if dist > p.engage_radius {
            self.relocating = true;
        } else if dist < p.settle_radius {
            self.relocating = false;
        }

        let v_world = if self.relocating {
            let v = err * p.linear_gain;
            if v.norm() > LINEAR_VELOCITY_LIMIT {
                v * (LINEAR_VELOCITY_LIMIT / v.norm())
            } else {
                v
            }
        } else {
            Vector2::zeros()
        };
        let v_base = rotate2(-yaw, v_world);
        let goal_yaw = if self.relocating && dist > p.face_travel_distance {
            err.y.atan2(err.x)
        } else {
            heading
        };
        let wz = (p.angular_gain * wrap_angle(goal_yaw - yaw)).clamp(-ANGULAR_VELOCITY_LIMIT, ANGULAR_VELOCITY_LIMIT);
        let velocity = [
            v_base.x.clamp(-LINEAR_VELOCITY_LIMIT, LINEAR_VELOCITY_LIMIT),
            v_base.y.clamp(-LINEAR_VELOCITY_LIMIT, LINEAR_VELOCITY_LIMIT),
            wz,
        ];

        // Re-center the target in the height band only when it leaves it.
        let h_now = self.height.unwrap_or(estimate.position.z);
        let rel = centroid.z - (h_now + p.shoulder_height);
        let height = if rel < p.height_band[0] || rel > p.height_band[1] {
            let mid = 0.5 * (p.height_band[0] + p.height_band[1]);
            centroid.z - p.shoulder_height - mid
        } else {
            h_now
        }
        .clamp(HEIGHT_MIN, HEIGHT_MAX);
        self.height = Some(height);

        let to_base = estimate.inverse();
        let local = |side: Side| task.target(side).filter(|_| task.mask.includes(side)).map(|t| to_base.compose(t));
        let left_target = local(Side::Left);
        let right_target = local(Side::Right);

        let speed = v_world.norm();
        let offset = task
            .mask
            .sides()
            .filter_map(|s| {
                let t = if s == Side::Left { left_target } else { right_target };
                t.map(|t| (t.position - p.reach_point(Mask::from(s))).norm())
            })
            .fold(0.0, f64::max);
        let alpha = self.alpha(speed, offset);

        Ok(SubgoalCommand {
            velocity,
            height,
            left_target,
            right_target,
            alpha,
        })
    }

    /// Stationary alpha falls from nominal to boundary as the target nears
    /// the edge of the workspace; motion blends it toward the locomotion
    /// value.
    fn alpha(&self, speed: f64, offset: f64) -> f64 {
        let p = &self.params;
        let [r0, r1] = p.boundary_radii;
        let b = ((offset - r0) / (r1 - r0)).clamp(0.0, 1.0);
        let still = p.alpha_nominal + (p.alpha_boundary - p.alpha_nominal) * b;
        let m = ((speed - p.stationary_speed) / (p.locomotion_speed - p.stationary_speed)).clamp(0.0, 1.0);
        (still + (p.alpha_locomotion - still) * m).clamp(ALPHA_MIN, ALPHA_MAX)
    }
}

impl From<Side> for Mask {
    fn from(s: Side) -> Mask {
        match s {
            Side::Left => Mask::Left,
            Side::Right => Mask::Right,
        }
    }
}

/// Stand-alone commander update with fresh internal state.
pub fn commander_step(
    chain: &KinematicChain,
    state: &SimState,
    task: &TaskCommand,
    params: &CommanderParams,
) -> Result<SubgoalCommand> {
    Commander::new(chain, *params)?.step(&state.base_pose(), task)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackerKind {
    /// Learned prior plus one damped refinement step.
    Kmp,
    /// Full iterative solve warm-started from the current joints.
    ExactIk,
}

impl std::str::FromStr for TrackerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmp" => Ok(TrackerKind::Kmp),
            "exact-ik" | "ik" => Ok(TrackerKind::ExactIk),
            _ => Err(Error::Input(format!("unknown tracker `{s}` (kmp, exact-ik)"))),
        }
    }
}

impl std::fmt::Display for TrackerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrackerKind::Kmp => "kmp",
            TrackerKind::ExactIk => "exact-ik",
        })
    }
}

/// Tracker and base dynamics parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    /// Damping of the refinement step on top of the prior.
    pub damping: f64,
    /// Linear acceleration limit (m/s²).
    pub linear_acceleration: f64,
    /// Yaw acceleration limit (rad/s²).
    pub angular_acceleration: f64,
    /// Height rate limit (m/s).
    pub height_rate: f64,
    pub ik: IkOptions,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            damping: 1e-3,
            linear_acceleration: 2.0,
            angular_acceleration: 8.0,
            height_rate: 0.25,
            ik: IkOptions::default(),
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        let v = [self.linear_acceleration, self.angular_acceleration, self.height_rate];
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) || !(self.damping >= 0.0) {
            return Err(Error::Input("tracker limits must be positive".into()));
        }
        Ok(())
    }
}

/// Tracker backend for one episode.
#[derive(Debug, Clone, Copy)]
pub enum Tracker<'a> {
    Kmp(&'a KmpModel),
    ExactIk,
}

impl Tracker<'_> {
    pub fn kind(&self) -> TrackerKind {
        match self {
            Tracker::Kmp(_) => TrackerKind::Kmp,
            Tracker::ExactIk => TrackerKind::ExactIk,
        }
    }
}

fn approach(current: f64, target: f64, max_step: f64) -> f64 {
    current + (target - current).clamp(-max_step, max_step)
}

/// Upper-body configuration for a subgoal.
pub fn track_upper_body(
    chain: &KinematicChain,
    tracker: &Tracker,
    subgoal: &SubgoalCommand,
    current: &JointConfig,
    params: &TrackerParams,
) -> Result<JointConfig> {
    if subgoal.left_target.is_none() && subgoal.right_target.is_none() {
        return Ok(current.clone());
    }
    match tracker {
        Tracker::Kmp(model) => {
            let reference = kmp_infer(model, &model.encode(&subgoal.command_sample()))?;
            let problem = IkProblem::new(subgoal.left_target, subgoal.right_target, subgoal.alpha, reference.clone());
            let cost = IkCost::new(chain, &problem);
            let residual: Vec<f64> = match cost.damped_step(&reference, params.damping) {
                Some(next) => next.iter().zip(reference.iter()).map(|(a, b)| a - b).collect(),
                None => vec![0.0; reference.len()],
            };
            let (lower, upper) = model.limits();
            kmp_residual_apply(&reference, &residual, lower, upper)
        }
        Tracker::ExactIk => {
            let problem = IkProblem::new(subgoal.left_target, subgoal.right_target, subgoal.alpha, current.clone());
            Ok(solve_ik(chain, &problem, &params.ik)?.q)
        }
    }
}

/// Advances the base by one step toward the commanded twist and height;
/// `drift` is added to the true planar position.
pub fn integrate_base(state: &mut SimState, subgoal: &SubgoalCommand, params: &TrackerParams, drift: [f64; 2]) {
    let lin = params.linear_acceleration * DT;
    let ang = params.angular_acceleration * DT;
    let v = [
        approach(state.velocity[0], subgoal.velocity[0], lin),
        approach(state.velocity[1], subgoal.velocity[1], lin),
        approach(state.velocity[2], subgoal.velocity[2], ang),
    ];
    let mid_yaw = state.yaw + 0.5 * v[2] * DT;
    let d = rotate2(mid_yaw, Vector2::new(v[0], v[1])) * DT;
    state.x += d.x + drift[0];
    state.y += d.y + drift[1];
    state.drift[0] += drift[0];
    state.drift[1] += drift[1];
    state.yaw = wrap_angle(state.yaw + v[2] * DT);
    state.velocity = v;
    state.height = approach(state.height, subgoal.height, params.height_rate * DT).clamp(HEIGHT_MIN, HEIGHT_MAX);
}

/// One control step: upper body for the subgoal, then base integration.
pub fn tracker_step(
    chain: &KinematicChain,
    state: &SimState,
    subgoal: &SubgoalCommand,
    tracker: &Tracker,
    params: &TrackerParams,
    drift: [f64; 2],
) -> Result<(SimState, JointConfig)> {
    subgoal.validate()?;
    let q = track_upper_body(chain, tracker, subgoal, &state.q_up, params)?;
    let mut next = state.clone();
    next.q_up = q.clone();
    integrate_base(&mut next, subgoal, params, drift);
    next.step += 1;
    Ok((next, q))
}

/// `R + ΔR` when the tracking error is strictly below the threshold.
pub fn curriculum_update(radius: f64, ee_error: f64, delta: f64, threshold: f64) -> Result<f64> {
    if [radius, ee_error, delta, threshold].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input("curriculum arguments must be finite and non-negative".into()));
    }
    Ok(if ee_error < threshold { radius + delta } else { radius })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Star,
    Heart,
    Spiral,
    Rectangle,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Star,
        Shape::Heart,
        Shape::Spiral,
        Shape::Rectangle,
        Shape::Square,
    ];
    /// The five shapes of the tracking benchmark.
    pub const BENCHMARK: [Shape; 5] = [Shape::Star, Shape::Heart, Shape::Circle, Shape::Spiral, Shape::Rectangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Star => "star",
            Shape::Heart => "heart",
            Shape::Spiral => "spiral",
            Shape::Rectangle => "rectangle",
            Shape::Square => "square",
        }
    }

    pub fn is_closed(self) -> bool {
        self != Shape::Spiral
    }

    /// Outline in plane coordinates `(lateral, up)`, fitted into
    /// `[-1, 1]²` with the bounding box centered. Polygons list their
    /// corners; smooth curves are sampled densely.
    fn outline(self) -> Vec<[f64; 2]> {
        const SMOOTH: usize = 720;
        let raw: Vec<[f64; 2]> = match self {
            Shape::Circle => (0..SMOOTH)
                .map(|i| {
                    let t = TAU * i as f64 / SMOOTH as f64;
                    [t.cos(), t.sin()]
                })
                .collect(),
            Shape::Square => vec![[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]],
            Shape::Rectangle => vec![[1.0, -0.5], [1.0, 0.5], [-1.0, 0.5], [-1.0, -0.5]],
            Shape::Star => {
                // Inner radius of a regular pentagram.
                let inner = (PI / 10.0).sin() / (3.0 * PI / 10.0).sin();
                (0..10)
                    .map(|i| {
                        let r = if i % 2 == 0 { 1.0 } else { inner };
                        let t = PI / 2.0 + PI * i as f64 / 5.0;
                        [r * t.cos(), r * t.sin()]
                    })
                    .collect()
            }
            Shape::Heart => (0..SMOOTH)
                .map(|i| {
                    // Cardioid r = 1 − sin θ, cusp on top.
                    let t = -PI / 2.0 + TAU * i as f64 / SMOOTH as f64;
                    let r = 1.0 - t.sin();
                    [r * t.cos(), r * t.sin()]
                })
                .collect(),
            Shape::Spiral => (0..=SMOOTH)
                .map(|i| {
                    let t = 4.0 * PI * i as f64 / SMOOTH as f64;
                    let r = t / (4.0 * PI);
                    [r * t.cos(), r * t.sin()]
                })
                .collect(),
        };
        if self == Shape::Spiral {
            return raw;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &raw {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let half = (0.5 * (hi[0] - lo[0])).max(0.5 * (hi[1] - lo[1]));
        raw.iter().map(|p| [(p[0] - c[0]) / half, (p[1] - c[1]) / half]).collect()
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Input(format!("unknown shape `{s}`")))
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A planar curve traced by one hand at constant speed in a vertical plane
/// facing `heading`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub shape: Shape,
    /// Half-extent of the curve (m); the radius for a circle.
    pub scale: f64,
    /// World position of the curve center.
    pub anchor: [f64; 3],
    /// World yaw the drawing plane faces.
    pub heading: f64,
    /// Hand orientation, world frame.
    pub orientation: UnitQuaternion<f64>,
    pub side: Side,
    /// Nominal speed along the curve (m/s).
    pub speed: f64,
    vertices: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl TrajectorySpec {
    pub fn new(
        shape: Shape,
        scale: f64,
        anchor: [f64; 3],
        heading: f64,
        orientation: UnitQuaternion<f64>,
        side: Side,
        speed: f64,
    ) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0 && speed.is_finite() && speed > 0.0) {
            return Err(Error::Input("trajectory scale and speed must be positive".into()));
        }
        if anchor.iter().chain([&heading]).any(|v| !v.is_finite()) {
            return Err(Error::Input("trajectory anchor is not finite".into()));
        }
        let mut vertices: Vec<[f64; 2]> = shape.outline().iter().map(|p| [p[0] * scale, p[1] * scale]).collect();
        if shape.is_closed() {
            vertices.push(vertices[0]);
        }
        let mut cumulative = vec![0.0];
        for w in vertices.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(TrajectorySpec {
            shape,
            scale,
            anchor,
            heading,
            orientation,
            side,
            speed,
            vertices,
            cumulative,
        })
    }

    /// Curve held in the default hand orientation turned to `heading`.
    pub fn palm_forward(
        chain: &KinematicChain,
        shape: Shape,
        scale: f64,
        anchor: [f64; 3],
        heading: f64,
        side: Side,
        speed: f64,
    ) -> Result<Self> {
        let orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), heading) * palm_forward(chain, side);
        Self::new(shape, scale, anchor, heading, orientation, side, speed)
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Steps to trace the curve once.
    pub fn duration(&self) -> usize {
        (self.length() / (self.speed * DT)).round() as usize
    }

    fn plane_point(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.vertices.len() - 2),
            Err(i) => i - 1,
        };
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let f = if seg > 0.0 { (s - self.cumulative[i]) / seg } else { 0.0 };
        let (a, b) = (self.vertices[i], self.vertices[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// World point for plane coordinates `(lateral, up)`.
    fn to_world(&self, p: [f64; 2]) -> Vector3<f64> {
        let lateral = Vector3::new(-self.heading.sin(), self.heading.cos(), 0.0);
        Vector3::from(self.anchor) + lateral * p[0] + Vector3::z() * p[1]
    }

    /// Target pose at `step`; steps past the end hold the final point.
    pub fn sample(&self, step: usize) -> Pose {
        let s = (step as f64 * self.speed * DT).min(self.length());
        Pose::new(self.to_world(self.plane_point(s)), self.orientation)
    }

    /// Pose at the curve center, used while the base gets into place.
    pub fn anchor_pose(&self) -> Pose {
        Pose::new(Vector3::from(self.anchor), self.orientation)
    }

    pub fn task(&self, step: usize) -> TaskCommand {
        TaskCommand::single(self.side, self.sample(step))
    }

    /// Corner vertices of the polyline (plane coordinates).
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }
}

/// Free-function form of [`TrajectorySpec::sample`].
pub fn trajectory_sampler(spec: &TrajectorySpec, step: usize) -> Result<Pose> {
    let n = spec.duration();
    if step > n {
        return Err(Error::Input(format!("step {step} beyond trajectory duration {n}")));
    }
    Ok(spec.sample(step))
}

/// Episode-level settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Commander period in control steps.
    pub decimation: usize,
    /// Standard deviation of the per-step planar drift (m).
    pub drift_sigma: f64,
    /// Commander sees the true base pose; otherwise dead reckoning only.
    pub closed_loop: bool,
    pub success_threshold: f64,
    /// Upper bound on steps spent getting into place before tracking.
    pub approach_steps: usize,
    /// Consecutive settled steps that end the approach.
    pub settle_steps: usize,
    /// Trajectory speed along the curve (m/s).
    pub trajectory_speed: f64,
    pub trajectory_scale: f64,
    pub mask: Mask,
    pub commander: CommanderParams,
    pub tracker: TrackerParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            decimation: DEFAULT_DECIMATION,
            drift_sigma: 0.0,
            closed_loop: true,
            success_threshold: SUCCESS_THRESHOLD,
            approach_steps: 1500,
            settle_steps: 25,
            trajectory_speed: 0.1,
            trajectory_scale: 0.15,
            mask: Mask::Left,
            commander: CommanderParams::default(),
            tracker: TrackerParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decimation == 0 {
            return Err(Error::Input("commander period K must be at least 1".into()));
        }
        if !(self.drift_sigma.is_finite() && self.drift_sigma >= 0.0) {
            return Err(Error::Input("drift sigma must be non-negative".into()));
        }
        if !(self.success_threshold > 0.0 && self.trajectory_speed > 0.0 && self.trajectory_scale > 0.0) {
            return Err(Error::Input("threshold, speed and scale must be positive".into()));
        }
        self.commander.validate()?;
        self.tracker.validate()
    }

    pub fn side(&self) -> Side {
        if self.mask == Mask::Right {
            Side::Right
        } else {
            Side::Left
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Approach,
    Track,
}

/// One logged control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    /// Mean over active arms of the world-frame target position.
    pub target: [f64; 3],
    pub hand: [f64; 3],
    pub error: f64,
    pub base: [f64; 3],
    pub height: f64,
    pub subgoal: SubgoalCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub tracker: TrackerKind,
    pub closed_loop: bool,
    pub steps: Vec<StepLog>,
    /// Mean and max error over tracking steps.
    pub mean_error: f64,
    pub max_error: f64,
    pub success: bool,
    pub approach_steps: usize,
    /// Planar distance from the final base position to the task anchor.
    pub final_base_distance: f64,
}

impl EpisodeReport {
    pub fn tracking_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().filter(|s| s.phase == Phase::Track).map(|s| s.error)
    }

    pub fn base_path(&self) -> Vec<[f64; 2]> {
        self.steps.iter().map(|s| [s.base[0], s.base[1]]).collect()
    }

    /// Per-step CSV log.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "step,phase,target_x,target_y,target_z,ee_x,ee_y,ee_z,error_m,base_x,base_y,base_yaw,height,\
             cmd_vx,cmd_vy,cmd_wz,cmd_height,cmd_alpha"
        )?;
        for s in &self.steps {
            let phase = match s.phase {
                Phase::Approach => "approach",
                Phase::Track => "track",
            };
            let [vx, vy, wz] = s.subgoal.velocity;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                phase,
                s.target[0],
                s.target[1],
                s.target[2],
                s.hand[0],
                s.hand[1],
                s.hand[2],
                s.error,
                s.base[0],
                s.base[1],
                s.base[2],
                s.height,
                vx,
                vy,
                wz,
                s.subgoal.height,
                s.subgoal.alpha
            )?;
        }
        Ok(())
    }
}

/// What an episode follows.
#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeTask {
    /// Get into place at the curve center, then trace the curve.
    Trajectory(TrajectorySpec),
    /// Reach a fixed world target; the episode ends once settled.
    Reach { task: TaskCommand, steps: usize },
}

/// Mean world position of the active hands and of their targets, and the
/// mean distance between them.
fn world_error(chain: &KinematicChain, state: &SimState, task: &TaskCommand) -> ([f64; 3], [f64; 3], f64) {
    let base = state.base_pose();
    let (mut hand, mut target, mut err, mut n) = (Vector3::zeros(), Vector3::zeros(), 0.0, 0.0);
    for side in task.mask.sides() {
        let Some(t) = task.target(side) else { continue };
        let h = base.transform_point(&chain.ee_pose(&state.q_up, side).position);
        hand += h;
        target += t.position;
        err += (h - t.position).norm();
        n += 1.0;
    }
    ((target / n).into(), (hand / n).into(), err / n)
}

/// Runs an episode from `start`. The commander runs at steps that are
/// multiples of `K`; drift is drawn from `seed`.
pub fn run_episode(
    chain: &KinematicChain,
    task: &EpisodeTask,
    start: &SimState,
    tracker: &Tracker,
    config: &SimConfig,
    seed: u64,
) -> Result<EpisodeReport> {
    config.validate()?;
    let mut commander = Commander::new(chain, config.commander)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift = Normal::new(0.0, config.drift_sigma).map_err(|e| Error::Input(e.to_string()))?;
    let mut state = start.clone();
    let mut steps = Vec::new();
    let mut subgoal = None;
    let mut settled = 0;
    let mut phase = Phase::Approach;
    let mut track_start = 0;
    let (total_track, reach_limit, anchor) = match task {
        EpisodeTask::Trajectory(t) => (t.duration() + 1, config.approach_steps, t.anchor),
        EpisodeTask::Reach { task, steps } => (0, *steps, task.centroid().into()),
    };

    loop {
        let i = steps.len();
        let current = match (task, phase) {
            (EpisodeTask::Trajectory(t), Phase::Approach) => TaskCommand::single(t.side, t.anchor_pose()),
            (EpisodeTask::Trajectory(t), Phase::Track) => t.task(i - track_start),
            (EpisodeTask::Reach { task, .. }, _) => *task,
        };
        if i % config.decimation == 0 || subgoal.is_none() {
            let estimate = if config.closed_loop {
                state.base_pose()
            } else {
                state.odometry_pose()
            };
            subgoal = Some(commander.step(&estimate, &current)?);
        }
        let sg = subgoal.unwrap();
        let noise = if config.drift_sigma > 0.0 {
            [drift.sample(&mut rng), drift.sample(&mut rng)]
        } else {
            [0.0; 2]
        };
        let (next, _) = tracker_step(chain, &state, &sg, tracker, &config.tracker, noise)?;
        state = next;
        let (target, hand, error) = world_error(chain, &state, &current);
        steps.push(StepLog {
            step: i,
            phase,
            target,
            hand,
            error,
            base: [state.x, state.y, state.yaw],
            height: state.height,
            subgoal: sg,
        });

        match phase {
            Phase::Approach => {
                let speed = state.velocity[0].hypot(state.velocity[1]);
                let still = !commander.is_relocating()
                    && speed < 1e-3
                    && state.velocity[2].abs() < 1e-2
                    && (state.height - sg.height).abs() < 1e-6;
                settled = if still { settled + 1 } else { 0 };
                let done = settled >= config.settle_steps || steps.len() >= reach_limit;
                if done {
                    if total_track == 0 {
                        break;
                    }
                    phase = Phase::Track;
                    track_start = steps.len();
                    subgoal = None;
                }
            }
            Phase::Track => {
                if steps.len() - track_start >= total_track {
                    break;
                }
            }
        }
    }

    let approach_steps = track_start.max(if total_track == 0 { steps.len() } else { 0 });
    let errors: Vec<f64> = steps.iter().filter(|s| s.phase == Phase::Track).map(|s| s.error).collect();
    let (mean_error, max_error) = if errors.is_empty() {
        let last = steps.last().map(|s| s.error).unwrap_or(f64::NAN);
        (last, last)
    } else {
        (
            errors.iter().sum::<f64>() / errors.len() as f64,
            errors.iter().copied().fold(0.0, f64::max),
        )
    };
    Ok(EpisodeReport {
        seed,
        tracker: tracker.kind(),
        closed_loop: config.closed_loop,
        steps,
        mean_error,
        max_error,
        success: mean_error < config.success_threshold,
        approach_steps,
        final_base_distance: (state.x - anchor[0]).hypot(state.y - anchor[1]),
    })
}

/// Arena half-width for random curve anchors (m).
pub const ARENA_HALF_WIDTH: f64 = 5.0;
/// Anchor heights for random curves (m).
pub const ANCHOR_HEIGHT_RANGE: [f64; 2] = [0.75, 0.95];
pub const START_HEIGHT: f64 = 0.6;
pub const MOBILITY_DISTANCE: f64 = 5.0;
pub const MOBILITY_DIRECTIONS: usize = 8;

/// Seed of episode `index` of `shape` under `root`; independent of
/// scheduling.
pub fn episode_seed(root: u64, shape: Shape, index: usize) -> u64 {
    let s = Shape::ALL.iter().position(|&x| x == shape).unwrap() as u64;
    root.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (s << 40) ^ index as u64
}

/// Random start pose and curve anchored within the arena, facing away from
/// the start.
pub fn random_trajectory(chain: &KinematicChain, shape: Shape, config: &SimConfig, seed: u64) -> Result<(TrajectorySpec, SimState)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0001);
    let a = ARENA_HALF_WIDTH;
    let anchor = [
        rng.random_range(-a..a),
        rng.random_range(-a..a),
        rng.random_range(ANCHOR_HEIGHT_RANGE[0]..ANCHOR_HEIGHT_RANGE[1]),
    ];
    let yaw = rng.random_range(-PI..PI);
    let heading = if anchor[0].hypot(anchor[1]) > 1e-6 {
        anchor[1].atan2(anchor[0])
    } else {
        yaw
    };
    let spec = TrajectorySpec::palm_forward(chain, shape, config.trajectory_scale, anchor, heading, config.side(), config.trajectory_speed)?;
    Ok((spec, SimState::new(chain, 0.0, 0.0, yaw, START_HEIGHT)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub shape: Shape,
    pub seed: u64,
    pub mean_error: f64,
    pub max_error: f64,
    pub success: bool,
    pub approach_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub shape: Shape,
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean over episodes of the per-episode mean error.
    pub mean_error: f64,
    pub worst_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityRow {
    pub direction_deg: f64,
    pub target: [f64; 2],
    pub steps: usize,
    pub final_distance: f64,
    /// Largest distance of the base path from the straight line between
    /// the end of the turn-in and the final base position.
    pub max_lateral_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tracker: TrackerKind,
    pub shapes: Vec<ShapeSummary>,
    pub episodes: Vec<EpisodeSummary>,
    pub mobility: Vec<MobilityRow>,
}

/// Runs every shape under every seed index.
pub fn eval_shapes(
    chain: &KinematicChain,
    shapes: &[Shape],
    seeds: usize,
    root_seed: u64,
    tracker: &Tracker,
    config: &SimConfig,
) -> Result<Vec<EpisodeSummary>> {
    use rayon::prelude::*;
    if seeds == 0 {
        return Err(Error::Input("at least one seed is required".into()));
    }
    let jobs: Vec<(Shape, u64)> = shapes
        .iter()
        .flat_map(|&s| (0..seeds).map(move |i| (s, episode_seed(root_seed, s, i))))
        .collect();
    jobs.par_iter()
        .map(|&(shape, seed)| {
            let (spec, start) = random_trajectory(chain, shape, config, seed)?;
            let r = run_episode(chain, &EpisodeTask::Trajectory(spec), &start, tracker, config, seed)?;
            Ok(EpisodeSummary {
                shape,
                seed,
                mean_error: r.mean_error,
                max_error: r.max_error,
                success: r.success,
                approach_steps: r.approach_steps,
            })
        })
        .collect()
}

pub fn summarize_shapes(shapes: &[Shape], episodes: &[EpisodeSummary]) -> Vec<ShapeSummary> {
    shapes
        .iter()
        .map(|&shape| {
            let es: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.shape == shape).collect();
            let n = es.len().max(1) as f64;
            ShapeSummary {
                shape,
                episodes: es.len(),
                success_rate: es.iter().filter(|e| e.success).count() as f64 / n,
                mean_error: es.iter().map(|e| e.mean_error).sum::<f64>() / n,
                worst_error: es.iter().map(|e| e.mean_error).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Largest distance of `path[from..]` from the segment between
/// `path[from]` and the last point.
pub fn max_lateral_deviation(path: &[[f64; 2]], from: usize) -> f64 {
    let Some(last) = path.last() else { return 0.0 };
    let a = Vector2::from(path[from.min(path.len() - 1)]);
    let b = Vector2::from(*last);
    let ab = b - a;
    let len = ab.norm();
    path[from.min(path.len() - 1)..]
        .iter()
        .map(|p| {
            let ap = Vector2::from(*p) - a;
            if len < 1e-9 {
                ap.norm()
            } else {
                let t = (ap.dot(&ab) / (len * len)).clamp(0.0, 1.0);
                (ap - ab * t).norm()
            }
        })
        .fold(0.0, f64::max)
}

/// Eight reach tasks at `distance` around a base at the origin facing +x.
/// The hand target faces away from the start so the base walks straight at
/// it.
pub fn mobility_table(chain: &KinematicChain, tracker: &Tracker, config: &SimConfig, distance: f64) -> Result<Vec<MobilityRow>> {
    use rayon::prelude::*;
    let side = config.side();
    let z = 0.5 * (ANCHOR_HEIGHT_RANGE[0] + ANCHOR_HEIGHT_RANGE[1]);
    (0..MOBILITY_DIRECTIONS)
        .into_par_iter()
        .map(|k| {
            let theta = TAU * k as f64 / MOBILITY_DIRECTIONS as f64;
            let target_xy = [distance * theta.cos(), distance * theta.sin()];
            let orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta) * palm_forward(chain, side);
            let target = Pose::new(Vector3::new(target_xy[0], target_xy[1], z), orientation);
            let task = EpisodeTask::Reach {
                task: TaskCommand::single(side, target),
                steps: config.approach_steps,
            };
            let start = SimState::new(chain, 0.0, 0.0, 0.0, START_HEIGHT);
            let r = run_episode(chain, &task, &start, tracker, config, k as u64)?;
            let path = r.base_path();
            // Turn-in ends once the base faces its direction of travel.
            let turned = r
                .steps
                .iter()
                .position(|s| wrap_angle(s.base[2] - theta).abs() < 0.1)
                .unwrap_or(path.len() - 1);
            Ok(MobilityRow {
                direction_deg: theta.to_degrees(),
                target: target_xy,
                steps: r.steps.len(),
                final_distance: r.final_base_distance,
                max_lateral_deviation: max_lateral_deviation(&path, turned),
            })
        })
        .collect()
}

/// Shape table plus mobility table.
pub fn eval_suite(
    chain: &KinematicChain,
    shapes: &[Shape],
    seeds: usize,
    root_seed: u64,
    tracker: &Tracker,
    config: &SimConfig,
) -> Result<EvalSummary> {
    let episodes = eval_shapes(chain, shapes, seeds, root_seed, tracker, config)?;
    Ok(EvalSummary {
        tracker: tracker.kind(),
        shapes: summarize_shapes(shapes, &episodes),
        episodes,
        mobility: mobility_table(chain, tracker, config, MOBILITY_DISTANCE)?,
    })
}

/// Paired closed-loop versus open-loop errors for one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftComparison {
    pub shape: Shape,
    pub seeds: Vec<u64>,
    pub closed_loop: Vec<f64>,
    pub open_loop: Vec<f64>,
    /// One-sided signed-rank p-value that open-loop error is larger.
    pub p_value: f64,
}

impl DriftComparison {
    pub fn closed_mean(&self) -> f64 {
        crate::stats::mean(&self.closed_loop)
    }

    pub fn open_mean(&self) -> f64 {
        crate::stats::mean(&self.open_loop)
    }
}

/// Runs each seed twice, once with the commander seeing the true base pose
/// and once with dead reckoning only; drift draws are identical.
pub fn drift_ab(
    chain: &KinematicChain,
    shapes: &[Shape],
    seeds: usize,
    root_seed: u64,
    tracker: &Tracker,
    config: &SimConfig,
) -> Result<Vec<DriftComparison>> {
    if seeds > 20 {
        return Err(Error::Input("the paired test supports at most 20 seeds".into()));
    }
    let closed = SimConfig {
        closed_loop: true,
        ..*config
    };
    let open = SimConfig {
        closed_loop: false,
        ..*config
    };
    let a = eval_shapes(chain, shapes, seeds, root_seed, tracker, &closed)?;
    let b = eval_shapes(chain, shapes, seeds, root_seed, tracker, &open)?;
    Ok(shapes
        .iter()
        .map(|&shape| {
            let pick = |v: &[EpisodeSummary]| -> Vec<(u64, f64)> {
                v.iter().filter(|e| e.shape == shape).map(|e| (e.seed, e.mean_error)).collect()
            };
            let (ca, cb) = (pick(&a), pick(&b));
            let diffs: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| y.1 - x.1).collect();
            DriftComparison {
                shape,
                seeds: ca.iter().map(|x| x.0).collect(),
                closed_loop: ca.iter().map(|x| x.1).collect(),
                open_loop: cb.iter().map(|x| x.1).collect(),
                p_value: crate::stats::wilcoxon_signed_rank_greater(&diffs),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain() -> KinematicChain {
        KinematicChain::default_humanoid()
    }

    fn hand_target(c: &KinematicChain, base: &Pose, local: Vector3<f64>) -> Pose {
        base.compose(&Pose::new(local, palm_forward(c, Side::Left)))
    }

    #[test]
    fn far_target_saturates_forward_velocity_and_raises_alpha() {
        let c = chain();
        let s = SimState::new(&c, 0.0, 0.0, 0.0, 0.6);
        let t = hand_target(&c, &s.base_pose(), Vector3::new(5.0, 0.0, 0.3));
        let g = commander_step(&c, &s, &TaskCommand::single(Side::Left, t), &CommanderParams::default()).unwrap();
        assert!((g.velocity[0] - 1.0).abs() < 1e-3, "{:?}", g.velocity);
        assert!(g.velocity[1].abs() < 0.05);
        assert_eq!(g.alpha, 10.0);
        g.validate().unwrap();
    }

    #[test]
    fn target_at_reach_center_keeps_base_still() {
        let c = chain();
        let p = CommanderParams::default();
        let s = SimState::new(&c, 1.0, -2.0, 0.7, 0.6);
        let t = hand_target(&c, &s.base_pose(), p.reach_point(Mask::Left));
        let mut cmd = Commander::new(&c, p).unwrap();
        cmd.relocating = false;
        let g = cmd.step(&s.base_pose(), &TaskCommand::single(Side::Left, t)).unwrap();
        assert!(g.velocity.iter().all(|v| v.abs() < 1e-9), "{:?}", g.velocity);
        assert!(g.alpha <= 1.0);
    }

    #[test]
    fn base_frame_target_is_inverse_base_times_world() {
        let c = chain();
        let s = SimState::new(&c, 0.3, 0.4, -1.1, 0.5);
        let world = Pose::new(Vector3::new(0.5, 0.6, 0.9), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        let g = commander_step(&c, &s, &TaskCommand::single(Side::Left, world), &CommanderParams::default()).unwrap();
        let expect = s.base_pose().inverse().compose(&world);
        assert_eq!(g.left_target.unwrap(), expect);
        assert!(g.right_target.is_none());
    }

    #[test]
    fn task_without_targets_or_with_wrong_mask_is_rejected() {
        assert!(matches!(TaskCommand::new(None, None, Mask::Left), Err(Error::Input(_))));
        let p = Pose::from_translation(1.0, 0.0, 0.8);
        assert!(TaskCommand::new(Some(p), None, Mask::Both).is_err());
        assert!(TaskCommand::new(Some(p), Some(p), Mask::Both).is_ok());
    }

    #[test]
    fn alpha_blends_between_boundary_and_locomotion() {
        let c = chain();
        let cmd = Commander::new(&c, CommanderParams::default()).unwrap();
        assert_eq!(cmd.alpha(0.0, 0.0), 1.0);
        assert_eq!(cmd.alpha(0.0, 0.5), 0.5);
        assert_eq!(cmd.alpha(0.5, 0.5), 10.0);
        let mid = cmd.alpha(0.175, 0.0);
        assert!((mid - 5.5).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn stationary_subgoal_converges_within_fifty_steps() {
        let c = chain();
        let s0 = SimState::new(&c, 0.0, 0.0, 0.0, 0.6);
        let local = Pose::new(Vector3::new(0.25, 0.2, 0.2), palm_forward(&c, Side::Left));
        let g = SubgoalCommand {
            velocity: [0.0; 3],
            height: 0.6,
            left_target: Some(local),
            right_target: None,
            alpha: 1.0,
        };
        let mut s = s0;
        for _ in 0..50 {
            s = tracker_step(&c, &s, &g, &Tracker::ExactIk, &TrackerParams::default(), [0.0; 2]).unwrap().0;
        }
        let err = (c.ee_pose(&s.q_up, Side::Left).position - local.position).norm();
        assert!(err < 0.005, "{err}");
        assert_eq!((s.x, s.y), (0.0, 0.0));
    }

    #[test]
    fn constant_velocity_advances_base() {
        let c = chain();
        let g = SubgoalCommand {
            velocity: [0.5, 0.0, 0.0],
            height: 0.6,
            left_target: None,
            right_target: None,
            alpha: 1.0,
        };
        let mut s = SimState::new(&c, 0.0, 0.0, 0.0, 0.6);
        for _ in 0..100 {
            s = tracker_step(&c, &s, &g, &Tracker::ExactIk, &TrackerParams::default(), [0.0; 2]).unwrap().0;
        }
        // 1.0 m less the acceleration transient v²/2a.
        let transient = 0.5 * 0.5 / (2.0 * TrackerParams::default().linear_acceleration);
        assert!((s.x - (1.0 - transient)).abs() < 0.01, "{}", s.x);
        assert!(s.y.abs() < 1e-12 && s.yaw == 0.0);
    }

    #[test]
    fn height_step_is_rate_limited_and_monotone() {
        let c = chain();
        let mut s = SimState::new(&c, 0.0, 0.0, 0.0, 0.78);
        let g = SubgoalCommand {
            velocity: [0.0; 3],
            height: 0.30,
            left_target: None,
            right_target: None,
            alpha: 1.0,
        };
        let mut prev = s.height;
        for _ in 0..200 {
            s = tracker_step(&c, &s, &g, &Tracker::ExactIk, &TrackerParams::default(), [0.0; 2]).unwrap().0;
            let rate = (prev - s.height) / DT;
            assert!((-1e-12..=0.25 + 1e-9).contains(&rate), "{rate}");
            prev = s.height;
        }
        assert!((s.height - 0.30).abs() < 1e-12);
    }

    #[test]
    fn drift_moves_true_base_but_not_odometry() {
        let c = chain();
        let mut s = SimState::new(&c, 1.0, 2.0, 0.0, 0.6);
        let g = SubgoalCommand {
            velocity: [0.0; 3],
            height: 0.6,
            left_target: None,
            right_target: None,
            alpha: 1.0,
        };
        s = tracker_step(&c, &s, &g, &Tracker::ExactIk, &TrackerParams::default(), [0.01, -0.02]).unwrap().0;
        assert_eq!((s.x, s.y), (1.01, 1.98));
        let o = s.odometry_pose();
        assert!((o.position.x - 1.0).abs() < 1e-12 && (o.position.y - 2.0).abs() < 1e-12);
    }

    fn spec(shape: Shape) -> TrajectorySpec {
        TrajectorySpec::palm_forward(&chain(), shape, 0.15, [1.0, 2.0, 0.85], 0.4, Side::Left, 0.1).unwrap()
    }

    #[test]
    fn circle_closes() {
        let s = spec(Shape::Circle);
        let a = s.sample(0);
        let b = s.sample(s.duration());
        assert!((a.position - b.position).norm() < 1e-3);
        assert_eq!(a.orientation, b.orientation);
        assert!((s.length() - TAU * 0.15).abs() < 1e-4);
    }

    #[test]
    fn square_duration_matches_perimeter() {
        let s = spec(Shape::Square);
        let side = 2.0 * 0.15;
        assert!((s.length() - 4.0 * side).abs() < 1e-12);
        assert_eq!(s.duration(), (4.0 * side / (0.1 * DT)).round() as usize);
    }

    fn corners(shape: Shape, min_turn: f64) -> usize {
        let mut p = shape.outline();
        if shape.is_closed() {
            p.push(p[0]);
        }
        let d: Vec<[f64; 2]> = p
            .windows(2)
            .filter_map(|w| {
                let v = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                let n = v[0].hypot(v[1]);
                (n > 1e-12).then(|| [v[0] / n, v[1] / n])
            })
            .collect();
        let turned = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1] < min_turn.cos();
        let mut n = d.windows(2).filter(|w| turned(&w[0], &w[1])).count();
        if shape.is_closed() && turned(d.last().unwrap(), &d[0]) {
            n += 1;
        }
        n
    }

    #[test]
    fn star_has_ten_corners_and_circle_none() {
        assert_eq!(corners(Shape::Star, 0.3), 10);
        assert_eq!(corners(Shape::Rectangle, 0.3), 4);
        assert_eq!(corners(Shape::Circle, 0.3), 0);
    }

    #[test]
    fn curves_stay_within_scale_in_a_vertical_plane() {
        for shape in Shape::ALL {
            let s = spec(shape);
            let normal = Vector3::new(s.heading.cos(), s.heading.sin(), 0.0);
            for k in 0..=s.duration() {
                let d = s.sample(k).position - Vector3::from(s.anchor);
                assert!(d.dot(&normal).abs() < 1e-12);
                assert!(d.z.abs() <= 0.15 + 1e-9 && (d - Vector3::z() * d.z).norm() <= 0.15 + 1e-9, "{shape}");
            }
            let steps: Vec<f64> = (0..s.duration())
                .map(|k| (s.sample(k + 1).position - s.sample(k).position).norm())
                .collect();
            // Constant speed except where a step cuts a corner.
            let nominal = 0.1 * DT;
            let on_speed = steps.iter().filter(|d| (*d - nominal).abs() < 1e-6).count();
            assert!(on_speed as f64 > 0.9 * steps.len() as f64, "{shape}");
        }
    }

    #[test]
    fn sampler_rejects_steps_past_the_end() {
        let s = spec(Shape::Circle);
        assert!(trajectory_sampler(&s, s.duration()).is_ok());
        assert!(trajectory_sampler(&s, s.duration() + 1).is_err());
    }

    #[test]
    fn curriculum_examples() {
        assert_eq!(curriculum_update(1.0, 0.01, 0.5, 0.02).unwrap(), 1.5);
        assert_eq!(curriculum_update(1.0, 0.03, 0.5, 0.02).unwrap(), 1.0);
        assert_eq!(curriculum_update(1.0, 0.02, 0.5, 0.02).unwrap(), 1.0);
        assert!(curriculum_update(-1.0, 0.0, 0.5, 0.02).is_err());
    }

    proptest! {
        #[test]
        fn curriculum_is_monotone(r in 0.0f64..10.0, e in 0.0f64..0.1, d in 0.0f64..1.0, eps in 0.0f64..0.1) {
            let next = curriculum_update(r, e, d, eps).unwrap();
            prop_assert!(next >= r);
            prop_assert_eq!(next > r, e < eps && d > 0.0);
        }

        #[test]
        fn commander_output_respects_command_ranges(
            x in -6.0f64..6.0, y in -6.0f64..6.0, z in -1.0f64..3.0, yaw in -PI..PI,
        ) {
            let c = chain();
            let s = SimState::new(&c, 0.0, 0.0, yaw, 0.6);
            let t = Pose::new(Vector3::new(x, y, z), palm_forward(&c, Side::Right));
            let g = commander_step(&c, &s, &TaskCommand::single(Side::Right, t), &CommanderParams::default()).unwrap();
            prop_assert!(g.validate().is_ok());
        }
    }

    fn short_episode(config: &SimConfig, seed: u64) -> EpisodeReport {
        let c = chain();
        let spec = TrajectorySpec::palm_forward(&c, Shape::Circle, 0.15, [0.6, 0.3, 0.85], 0.0, Side::Left, 0.2).unwrap();
        let start = SimState::new(&c, 0.0, 0.0, 0.0, 0.6);
        run_episode(&c, &EpisodeTask::Trajectory(spec), &start, &Tracker::ExactIk, config, seed).unwrap()
    }

    #[test]
    fn circle_episode_with_exact_ik_succeeds() {
        let r = short_episode(&SimConfig::default(), 0);
        assert!(r.success && r.mean_error < 0.010, "{}", r.mean_error);
        assert_eq!(r.success, r.mean_error < SUCCESS_THRESHOLD);
    }

    #[test]
    fn subgoal_only_changes_at_commander_steps() {
        let config = SimConfig {
            decimation: 7,
            drift_sigma: 0.002,
            ..SimConfig::default()
        };
        let r = short_episode(&config, 3);
        let track_start = r.steps.iter().position(|s| s.phase == Phase::Track).unwrap();
        for w in r.steps.windows(2) {
            let i = w[1].step;
            if w[0].subgoal != w[1].subgoal {
                assert!(i % 7 == 0 || i == track_start, "subgoal changed at step {i}");
            }
        }
    }

    #[test]
    fn logged_errors_are_reproducible_from_logged_points() {
        let r = short_episode(&SimConfig::default(), 1);
        for s in &r.steps {
            let d = (Vector3::from(s.target) - Vector3::from(s.hand)).norm();
            assert!((d - s.error).abs() < 1e-9);
        }
        let mean: f64 = r.tracking_errors().sum::<f64>() / r.tracking_errors().count() as f64;
        assert!((mean - r.mean_error).abs() < 1e-12);
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let config = SimConfig {
            drift_sigma: 0.002,
            ..SimConfig::default()
        };
        let a = short_episode(&config, 5);
        assert_eq!(a, short_episode(&config, 5));
        assert_ne!(a.steps, short_episode(&config, 6).steps);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let r = short_episode(&SimConfig::default(), 0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.steps.len() + 1);
        assert!(text.starts_with("step,phase,target_x"));
    }

    #[test]
    fn lateral_deviation_of_straight_path_is_zero() {
        let path: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert!(max_lateral_deviation(&path, 0) < 1e-12);
        let mut bent = path.clone();
        bent[5][0] += 1.0;
        assert!(max_lateral_deviation(&bent, 0) > 0.4);
    }

    #[test]
    fn mobility_table_has_eight_headings() {
        let c = chain();
        let rows = mobility_table(&c, &Tracker::ExactIk, &SimConfig::default(), 1.0).unwrap();
        assert_eq!(rows.len(), 8);
        for (k, r) in rows.iter().enumerate() {
            assert!((r.direction_deg - 45.0 * k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn episode_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for s in Shape::ALL {
            for i in 0..20 {
                assert!(seen.insert(episode_seed(7, s, i)));
            }
        }
    }
}
