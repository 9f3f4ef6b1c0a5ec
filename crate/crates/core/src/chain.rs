//! Reduced humanoid kinematic model.
//!
//! The chain is a tree of revolute joints rooted at the pelvis link, with a
//! 3-joint waist and two 7-joint arms. Legs are not modelled; the simulator
//! carries the base height as a separate coordinate. Fixed frames (the hands)
//! hang off arm links and serve as end effectors.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use nalgebra::{DMatrix, Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pose::{Pose, PoseRecord};

const DEFAULT_CHAIN_JSON: &str = include_str!("../assets/humanoid_upper.json");

/// Which arm an end effector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointSpec {
    pub name: String,
    /// Link the joint is mounted on.
    pub parent: String,
    /// Link moved by the joint.
    pub child: String,
    pub axis: Unit<Vector3<f64>>,
    /// Joint frame relative to the parent link frame.
    pub origin: Pose,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub default: f64,
}

#[derive(Debug, Clone)]
pub struct FixedFrame {
    pub name: String,
    pub parent: String,
    pub origin: Pose,
}

/// Joint indices per functional group; together they partition the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointGroups {
    pub waist: Vec<usize>,
    pub left_arm: Vec<usize>,
    pub right_arm: Vec<usize>,
}

impl JointGroups {
    pub fn arm(&self, side: Side) -> &[usize] {
        match side {
            Side::Left => &self.left_arm,
            Side::Right => &self.right_arm,
        }
    }
}

/// Joint angles in chain order, radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn new(values: Vec<f64>) -> Self {
        JointConfig(values)
    }

    pub fn zeros(n: usize) -> Self {
        JointConfig(vec![0.0; n])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for JointConfig {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for JointConfig {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        JointConfig(v)
    }
}

/// Which rows of the geometric Jacobian enter the manipulability index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManipulabilityMode {
    /// 3 x N translational block.
    #[default]
    Position,
    /// Full 6 x N Jacobian.
    Full,
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRecord {
    name: String,
    parent: String,
    child: String,
    axis: [f64; 3],
    origin: PoseRecord,
    lower_limit: f64,
    upper_limit: f64,
    default: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixedFrameRecord {
    name: String,
    parent: String,
    origin: PoseRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupsRecord {
    waist: Vec<String>,
    left_arm: Vec<String>,
    right_arm: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndEffectorsRecord {
    left: String,
    right: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainDescription {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    root: String,
    joints: Vec<JointRecord>,
    #[serde(default)]
    fixed_frames: Vec<FixedFrameRecord>,
    groups: GroupsRecord,
    end_effectors: EndEffectorsRecord,
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

/// Where a link hangs in the tree.
#[derive(Debug, Clone, Copy)]
enum LinkSource {
    Root,
    Joint(usize),
    Fixed(usize),
}

#[derive(Debug, Clone)]
struct EndEffector {
    link: String,
    /// Joint whose child link carries the end effector (None if on the root).
    parent_joint: Option<usize>,
    /// Offset from that link to the end-effector frame.
    offset: Isometry3<f64>,
    /// Joints from the root to the end effector, in chain order.
    path: Vec<usize>,
}

/// Immutable, validated kinematic tree.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    root: String,
    joints: Vec<JointSpec>,
    fixed_frames: Vec<FixedFrame>,
    groups: JointGroups,
    /// For each joint, the joint whose child is this joint's parent link.
    parent_joint: Vec<Option<usize>>,
    /// Joint indices sorted so that parents come first.
    topo_order: Vec<usize>,
    end_effectors: [EndEffector; 2],
    origins: Vec<Isometry3<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    default_q: JointConfig,
    hash: [u8; 32],
}

/// Per-joint kinematic quantities for one configuration, in the chain root frame.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    /// Pose of each joint's child link.
    pub link: Vec<Isometry3<f64>>,
    /// Joint axis direction.
    pub axis: Vec<Vector3<f64>>,
}

/// Forward-kinematics output expressed in the frame of the supplied base pose.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub left: Pose,
    pub right: Pose,
    pub all_links: BTreeMap<String, Pose>,
}

impl FkResult {
    pub fn ee(&self, side: Side) -> &Pose {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

/// Reads and validates a chain description file.
pub fn load_chain(path: impl AsRef<Path>) -> Result<KinematicChain> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KinematicChain::from_json_str(&text)
}

fn parse_err(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn invalid(joint: &str, reason: impl Into<String>) -> Error {
    Error::InvalidJoint {
        joint: joint.to_string(),
        reason: reason.into(),
    }
}

impl KinematicChain {
    /// The shipped reduced humanoid (`assets/humanoid_upper.json`).
    pub fn default_humanoid() -> KinematicChain {
        KinematicChain::from_json_str(DEFAULT_CHAIN_JSON).expect("shipped chain asset is valid")
    }

    pub fn default_json() -> &'static str {
        DEFAULT_CHAIN_JSON
    }

    pub fn from_json_str(text: &str) -> Result<KinematicChain> {
        let desc: ChainDescription = serde_json::from_str(text).map_err(parse_err)?;
        Self::from_description(desc)
    }

    fn from_description(desc: ChainDescription) -> Result<KinematicChain> {
        let mut joints = Vec::with_capacity(desc.joints.len());
        for r in &desc.joints {
            let axis = Vector3::from(r.axis);
            let norm = axis.norm();
            if !norm.is_finite() || norm < 1e-9 {
                return Err(invalid(&r.name, "axis must be a non-zero finite vector"));
            }
            if ![r.lower_limit, r.upper_limit, r.default].iter().all(|v| v.is_finite()) {
                return Err(invalid(&r.name, "limits and default must be finite"));
            }
            if r.lower_limit > r.upper_limit {
                return Err(invalid(
                    &r.name,
                    format!(
                        "lower_limit {} exceeds upper_limit {}",
                        r.lower_limit, r.upper_limit
                    ),
                ));
            }
            if r.default < r.lower_limit || r.default > r.upper_limit {
                return Err(invalid(
                    &r.name,
                    format!(
                        "default {} outside [{}, {}]",
                        r.default, r.lower_limit, r.upper_limit
                    ),
                ));
            }
            let origin = Pose::from(&r.origin);
            if !origin.is_finite() {
                return Err(invalid(&r.name, "origin must be finite"));
            }
            joints.push(JointSpec {
                name: r.name.clone(),
                parent: r.parent.clone(),
                child: r.child.clone(),
                axis: Unit::new_normalize(axis),
                origin,
                lower_limit: r.lower_limit,
                upper_limit: r.upper_limit,
                default: r.default,
            });
        }
        let fixed_frames: Vec<FixedFrame> = desc
            .fixed_frames
            .iter()
            .map(|f| FixedFrame {
                name: f.name.clone(),
                parent: f.parent.clone(),
                origin: Pose::from(&f.origin),
            })
            .collect();

        // Link table: every link has exactly one source.
        let mut links: HashMap<String, LinkSource> = HashMap::new();
        links.insert(desc.root.clone(), LinkSource::Root);
        let mut joint_index: HashMap<&str, usize> = HashMap::new();
        for (i, j) in joints.iter().enumerate() {
            if joint_index.insert(j.name.as_str(), i).is_some() {
                return Err(invalid(&j.name, "duplicate joint name"));
            }
            if links.insert(j.child.clone(), LinkSource::Joint(i)).is_some() {
                return Err(invalid(
                    &j.name,
                    format!("link `{}` has more than one parent", j.child),
                ));
            }
        }
        for (i, f) in fixed_frames.iter().enumerate() {
            if links.insert(f.name.clone(), LinkSource::Fixed(i)).is_some() {
                return Err(Error::InvalidChain(format!(
                    "fixed frame `{}` duplicates an existing link",
                    f.name
                )));
            }
        }
        for j in &joints {
            if !links.contains_key(&j.parent) {
                return Err(invalid(&j.name, format!("unknown parent link `{}`", j.parent)));
            }
        }
        for f in &fixed_frames {
            if !links.contains_key(&f.parent) {
                return Err(Error::InvalidChain(format!(
                    "fixed frame `{}` has unknown parent link `{}`",
                    f.name, f.parent
                )));
            }
        }

        // Walk every link to the root; a revisit means a cycle.
        let parent_of = |link: &str| -> Option<&str> {
            match links.get(link)? {
                LinkSource::Root => None,
                LinkSource::Joint(i) => Some(joints[*i].parent.as_str()),
                LinkSource::Fixed(i) => Some(fixed_frames[*i].parent.as_str()),
            }
        };
        for start in links.keys() {
            let mut seen = std::collections::HashSet::new();
            let mut cur = start.as_str();
            while let Some(p) = parent_of(cur) {
                if !seen.insert(cur) {
                    return Err(Error::Cycle(cur.to_string()));
                }
                cur = p;
            }
        }

        let parent_joint: Vec<Option<usize>> = joints
            .iter()
            .map(|j| nearest_joint(&links, &fixed_frames, &j.parent))
            .collect();

        // Topological order: depth-first by depth.
        let depth = |mut i: usize| {
            let mut d = 0;
            while let Some(p) = parent_joint[i] {
                d += 1;
                i = p;
            }
            d
        };
        let mut topo_order: Vec<usize> = (0..joints.len()).collect();
        topo_order.sort_by_key(|&i| (depth(i), i));

        let resolve = |names: &[String], group: &str| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    joint_index.get(n.as_str()).copied().ok_or_else(|| {
                        Error::InvalidChain(format!("group `{group}` names unknown joint `{n}`"))
                    })
                })
                .collect()
        };
        let groups = JointGroups {
            waist: resolve(&desc.groups.waist, "waist")?,
            left_arm: resolve(&desc.groups.left_arm, "left_arm")?,
            right_arm: resolve(&desc.groups.right_arm, "right_arm")?,
        };
        for (name, g, n) in [
            ("waist", &groups.waist, 3),
            ("left_arm", &groups.left_arm, 7),
            ("right_arm", &groups.right_arm, 7),
        ] {
            if g.len() != n {
                return Err(Error::InvalidChain(format!(
                    "group `{name}` must have {n} joints, found {}",
                    g.len()
                )));
            }
        }
        let mut covered = vec![0usize; joints.len()];
        for &i in groups.waist.iter().chain(&groups.left_arm).chain(&groups.right_arm) {
            covered[i] += 1;
        }
        if let Some(i) = covered.iter().position(|&c| c != 1) {
            return Err(Error::InvalidChain(format!(
                "groups must partition the joints; `{}` appears {} times",
                joints[i].name, covered[i]
            )));
        }

        let make_ee = |link: &str| -> Result<EndEffector> {
            let (parent_joint, offset) = match links.get(link) {
                None => {
                    return Err(Error::InvalidChain(format!(
                        "end effector link `{link}` does not exist"
                    )))
                }
                Some(LinkSource::Root) => (None, Isometry3::identity()),
                Some(LinkSource::Joint(i)) => (Some(*i), Isometry3::identity()),
                Some(LinkSource::Fixed(_)) => {
                    // Fold the chain of fixed frames into one offset.
                    let mut offset = Isometry3::identity();
                    let mut cur = link;
                    loop {
                        match links[cur] {
                            LinkSource::Fixed(f) => {
                                offset = fixed_frames[f].origin.to_isometry() * offset;
                                cur = fixed_frames[f].parent.as_str();
                            }
                            LinkSource::Joint(i) => break (Some(i), offset),
                            LinkSource::Root => break (None, offset),
                        }
                    }
                }
            };
            let mut path = Vec::new();
            let mut cur = parent_joint;
            while let Some(i) = cur {
                path.push(i);
                cur = nearest_joint(&links, &fixed_frames, &joints[i].parent);
            }
            path.reverse();
            Ok(EndEffector {
                link: link.to_string(),
                parent_joint,
                offset,
                path,
            })
        };
        let end_effectors = [
            make_ee(&desc.end_effectors.left)?,
            make_ee(&desc.end_effectors.right)?,
        ];

        let canonical = serde_json::to_vec(&desc).expect("chain description serializes");
        let hash: [u8; 32] = Sha256::digest(&canonical).into();

        Ok(KinematicChain {
            root: desc.root,
            origins: joints.iter().map(|j| j.origin.to_isometry()).collect(),
            lower: joints.iter().map(|j| j.lower_limit).collect(),
            upper: joints.iter().map(|j| j.upper_limit).collect(),
            default_q: JointConfig(joints.iter().map(|j| j.default).collect()),
            joints,
            fixed_frames,
            groups,
            parent_joint,
            topo_order,
            end_effectors,
            hash,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn fixed_frames(&self) -> &[FixedFrame] {
        &self.fixed_frames
    }

    pub fn groups(&self) -> &JointGroups {
        &self.groups
    }

    pub fn end_effector_link(&self, side: Side) -> &str {
        &self.end_effectors[side.index()].link
    }

    /// Joints on the path from the root to the end effector, in chain order.
    pub fn ee_path(&self, side: Side) -> &[usize] {
        &self.end_effectors[side.index()].path
    }

    pub fn lower_limits(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper_limits(&self) -> &[f64] {
        &self.upper
    }

    pub fn default_config(&self) -> JointConfig {
        self.default_q.clone()
    }

    /// SHA-256 of the canonical description; identifies the chain in datasets.
    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clamp_to_limits(&self, q: &[f64]) -> JointConfig {
        JointConfig(
            q.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
                .collect(),
        )
    }

    pub(crate) fn clamp_in_place(&self, q: &mut [f64]) {
        for (v, (lo, hi)) in q.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn check_len(&self, q: &[f64]) {
        assert_eq!(
            q.len(),
            self.dof(),
            "joint configuration has {} values, chain has {} joints",
            q.len(),
            self.dof()
        );
    }

    /// Link poses and world-frame axes for every joint, in the root frame.
    pub fn frames(&self, q: &[f64]) -> ChainFrames {
        self.check_len(q);
        let n = self.dof();
        let mut link = vec![Isometry3::identity(); n];
        let mut axis = vec![Vector3::zeros(); n];
        for &i in &self.topo_order {
            let parent = match self.parent_joint[i] {
                Some(p) => link[p],
                None => Isometry3::identity(),
            };
            let joint_frame = parent * self.origins[i];
            axis[i] = joint_frame.rotation * self.joints[i].axis.into_inner();
            let rot = UnitQuaternion::from_axis_angle(&self.joints[i].axis, q[i]);
            link[i] = joint_frame * Isometry3::from_parts(Translation3::identity(), rot);
        }
        ChainFrames { link, axis }
    }

    /// End-effector pose in the root frame given precomputed frames.
    pub fn ee_from_frames(&self, frames: &ChainFrames, side: Side) -> Isometry3<f64> {
        let ee = &self.end_effectors[side.index()];
        match ee.parent_joint {
            Some(j) => frames.link[j] * ee.offset,
            None => ee.offset,
        }
    }

    /// End-effector pose in the chain root frame.
    pub fn ee_pose(&self, q: &[f64], side: Side) -> Pose {
        Pose::from_isometry(&self.ee_from_frames(&self.frames(q), side))
    }

    pub fn forward_kinematics(&self, q: &[f64], base: &Pose) -> FkResult {
        let frames = self.frames(q);
        let base_iso = base.to_isometry();
        let mut all_links = BTreeMap::new();
        all_links.insert(self.root.clone(), *base);
        for (i, j) in self.joints.iter().enumerate() {
            all_links.insert(j.child.clone(), Pose::from_isometry(&(base_iso * frames.link[i])));
        }
        for f in &self.fixed_frames {
            let parent = all_links[&f.parent];
            all_links.insert(f.name.clone(), parent.compose(&f.origin));
        }
        let left = Pose::from_isometry(&(base_iso * self.ee_from_frames(&frames, Side::Left)));
        let right = Pose::from_isometry(&(base_iso * self.ee_from_frames(&frames, Side::Right)));
        FkResult {
            left,
            right,
            all_links,
        }
    }

    /// Writes the 6 x N geometric Jacobian (linear rows first) of `side`'s end
    /// effector at `ee_pos` into `out`, given precomputed frames.
    pub fn jacobian_from_frames(
        &self,
        frames: &ChainFrames,
        side: Side,
        ee_pos: &Vector3<f64>,
        out: &mut DMatrix<f64>,
    ) {
        out.fill(0.0);
        for &j in self.ee_path(side) {
            let w = frames.axis[j];
            let v = w.cross(&(ee_pos - frames.link[j].translation.vector));
            out.fixed_view_mut::<3, 1>(0, j).copy_from(&v);
            out.fixed_view_mut::<3, 1>(3, j).copy_from(&w);
        }
    }

    /// 6 x N geometric Jacobian in the root frame; columns follow chain order
    /// and are zero for joints off the root-to-end-effector path.
    pub fn geometric_jacobian(&self, q: &[f64], side: Side) -> DMatrix<f64> {
        let frames = self.frames(q);
        let ee = self.ee_from_frames(&frames, side);
        let mut j = DMatrix::zeros(6, self.dof());
        self.jacobian_from_frames(&frames, side, &ee.translation.vector, &mut j);
        j
    }

    /// Manipulability of one arm, using only that arm's joint columns.
    pub fn arm_manipulability(&self, q: &[f64], side: Side, mode: ManipulabilityMode) -> f64 {
        let j = self.geometric_jacobian(q, side);
        arm_manipulability_from_jacobian(&j, self.groups.arm(side), mode)
    }
}

pub(crate) fn arm_manipulability_from_jacobian(
    j: &DMatrix<f64>,
    arm: &[usize],
    mode: ManipulabilityMode,
) -> f64 {
    let rows = match mode {
        ManipulabilityMode::Position => 3,
        ManipulabilityMode::Full => 6,
    };
    let mut sub = DMatrix::zeros(rows, arm.len());
    for (c, &col) in arm.iter().enumerate() {
        for r in 0..rows {
            sub[(r, c)] = j[(r, col)];
        }
    }
    manipulability(&sub)
}

/// The joint that moves `link`, skipping over fixed frames.
fn nearest_joint(
    links: &HashMap<String, LinkSource>,
    fixed: &[FixedFrame],
    link: &str,
) -> Option<usize> {
    let mut cur = link;
    loop {
        match links.get(cur)? {
            LinkSource::Root => return None,
            LinkSource::Joint(i) => return Some(*i),
            LinkSource::Fixed(f) => cur = fixed[*f].parent.as_str(),
        }
    }
}

/// Yoshikawa manipulability `sqrt(det(J Jᵀ))`. Round-off negatives clamp to 0.
pub fn manipulability(j: &DMatrix<f64>) -> f64 {
    if j.nrows() == 0 {
        return 0.0;
    }
    let jjt = j * j.transpose();
    let det = jjt.determinant();
    if det.is_finite() && det > 0.0 {
        det.sqrt()
    } else {
        0.0
    }
}
