//! Command-space sampling and importance-sampled dataset curation.
//!
//! Raw commands are drawn uniformly from two mirrored boxes beside the torso
//! with uniformly random orientations. [`curate`] solves IK for each one,
//! drops samples whose IK residual exceeds the prune threshold, and
//! subsamples the survivors without replacement with probability
//! proportional to the weaker arm's manipulability. [`mixture_sample`] mixes
//! uniform draws with perturbed dataset records.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{arm_manipulability_from_jacobian, KinematicChain, ManipulabilityMode, Side};
use crate::error::{Error, Result};
use crate::ik::{solve_ik, IkOptions, IkProblem, ALPHA_MAX, ALPHA_MIN};
use crate::pose::Pose;
use crate::JointConfig;

/// Raw samples drawn per requested record.
pub const OVERSAMPLING: usize = 5;
/// Keeps every survivor's selection probability positive.
pub const WEIGHT_EPSILON: f64 = 1e-6;

/// Torso center in the chain root frame; the default boxes are placed
/// relative to it.
pub const TORSO_CENTER: [f64; 3] = [0.0, 0.0, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn mirrored_y(&self) -> Aabb {
        Aabb {
            min: [self.min[0], -self.max[1], self.min[2]],
            max: [self.max[0], -self.min[1], self.max[2]],
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| rng.random_range(self.min[i]..=self.max[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpace {
    pub left_volume: Aabb,
    pub right_volume: Aabb,
    pub alpha_range: [f64; 2],
    /// Probability that a sample keeps only one target. Zero disables
    /// unilateral samples.
    #[serde(default)]
    pub unilateral_probability: f64,
}

impl Default for CommandSpace {
    fn default() -> Self {
        let c = TORSO_CENTER;
        let left = Aabb {
            min: [c[0], c[1], c[2] - 0.35],
            max: [c[0] + 0.55, c[1] + 0.55, c[2] + 0.45],
        };
        CommandSpace {
            left_volume: left,
            right_volume: left.mirrored_y(),
            alpha_range: [ALPHA_MIN, ALPHA_MAX],
            unilateral_probability: 0.0,
        }
    }
}

impl CommandSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("left", &self.left_volume), ("right", &self.right_volume)] {
            if (0..3).any(|i| !(b.min[i].is_finite() && b.max[i].is_finite() && b.max[i] > b.min[i])) {
                return Err(Error::Input(format!("{name} volume has zero or negative extent")));
            }
        }
        let m = self.left_volume.mirrored_y();
        if (0..3).any(|i| (m.min[i] - self.right_volume.min[i]).abs() > 1e-12 || (m.max[i] - self.right_volume.max[i]).abs() > 1e-12) {
            return Err(Error::Input("left and right volumes are not mirror images".into()));
        }
        if self.alpha_range != [ALPHA_MIN, ALPHA_MAX] {
            return Err(Error::Input(format!("alpha range must be [{ALPHA_MIN}, {ALPHA_MAX}]")));
        }
        if !(0.0..=1.0).contains(&self.unilateral_probability) {
            return Err(Error::Input("unilateral probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// A command `(left target, right target, alpha)`; targets in the base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandSample {
    pub left_target: Option<Pose>,
    pub right_target: Option<Pose>,
    pub alpha: f64,
}

impl CommandSample {
    pub fn target(&self, side: Side) -> Option<&Pose> {
        match side {
            Side::Left => self.left_target.as_ref(),
            Side::Right => self.right_target.as_ref(),
        }
    }
}

/// Uniform rotation (Shoemake's subgroup algorithm).
pub fn uniform_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (t2, t3) = (2.0 * PI * u2, 2.0 * PI * u3);
    UnitQuaternion::new_normalize(Quaternion::new(
        b * t3.cos(),
        a * t2.sin(),
        a * t2.cos(),
        b * t3.sin(),
    ))
}

fn index_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

const RAW_STREAM: u64 = 0;
const BRANCH_STREAM: u64 = 1;
const SELECT_STREAM: u64 = 2;

fn raw_one(space: &CommandSpace, seed: u64, index: usize) -> CommandSample {
    let mut rng = index_rng(seed, RAW_STREAM, index);
    let left = Pose::new(space.left_volume.sample(&mut rng), uniform_rotation(&mut rng));
    let right = Pose::new(space.right_volume.sample(&mut rng), uniform_rotation(&mut rng));
    let alpha = rng.random_range(space.alpha_range[0]..=space.alpha_range[1]);
    let (mut l, mut r) = (Some(left), Some(right));
    if space.unilateral_probability > 0.0 && rng.random_bool(space.unilateral_probability) {
        if rng.random_bool(0.5) {
            r = None;
        } else {
            l = None;
        }
    }
    CommandSample {
        left_target: l,
        right_target: r,
        alpha,
    }
}

/// `n` commands; sample `i` depends only on `(seed, i)`.
pub fn sample_raw(space: &CommandSpace, n: usize, seed: u64) -> Result<Vec<CommandSample>> {
    space.validate()?;
    if n == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    Ok((0..n).into_par_iter().map(|i| raw_one(space, seed, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub command: CommandSample,
    pub q_solution: JointConfig,
    /// Worst active arm.
    pub ik_position_error: f64,
    pub ik_orientation_error: f64,
    pub manipulability_left: f64,
    pub manipulability_right: f64,
}

impl DatasetRecord {
    /// Manipulability used for selection: the weaker active arm.
    pub fn selection_manipulability(&self) -> f64 {
        match (self.command.left_target, self.command.right_target) {
            (Some(_), None) => self.manipulability_left,
            (None, Some(_)) => self.manipulability_right,
            _ => self.manipulability_left.min(self.manipulability_right),
        }
    }
}

/// How survivors are subsampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Probability proportional to manipulability + epsilon.
    #[default]
    Manipulability,
    /// Every survivor equally likely.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateOptions {
    /// Largest accepted IK position error (m); `f64::INFINITY` keeps everything.
    pub prune_threshold: f64,
    pub target_count: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub manipulability: ManipulabilityMode,
    pub ik: IkOptions,
}

impl Default for CurateOptions {
    fn default() -> Self {
        CurateOptions {
            prune_threshold: 0.02,
            target_count: 200_000,
            seed: 0,
            weighting: Weighting::Manipulability,
            manipulability: ManipulabilityMode::Position,
            // Single descent from the default posture: keeps solutions on
            // one branch, which is what the prior has to learn.
            ik: IkOptions {
                restarts: 0,
                ..IkOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: u64,
    /// Hex SHA-256 of the chain description.
    pub chain_hash: String,
    pub dof: usize,
    /// Space the raw commands were drawn from, if known.
    pub space: Option<CommandSpace>,
    /// `None` when nothing was pruned by error.
    pub prune_threshold: Option<f64>,
    pub weighting: Weighting,
    pub manipulability: ManipulabilityMode,
    pub target_count: usize,
    pub raw_count: usize,
    pub pruned_count: usize,
    pub survivor_count: usize,
    pub retained_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub metadata: DatasetMetadata,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// IK-solved raw commands that passed the error filter.
#[derive(Debug, Clone)]
pub struct SolvedPool {
    pub survivors: Vec<DatasetRecord>,
    pub raw: usize,
    pub pruned: usize,
}

/// Solves every command from the default posture and drops those whose IK
/// position error exceeds `prune_threshold`. Survivors keep raw order.
pub fn solve_commands(
    chain: &KinematicChain,
    raw: &[CommandSample],
    prune_threshold: f64,
    mode: ManipulabilityMode,
    ik: &IkOptions,
) -> Result<SolvedPool> {
    if prune_threshold.is_nan() || prune_threshold < 0.0 {
        return Err(Error::Input("prune threshold must be non-negative".into()));
    }
    let solved: Vec<Result<DatasetRecord>> = raw
        .par_iter()
        .map(|c| solve_record(chain, c, mode, ik))
        .collect();
    let mut survivors = Vec::new();
    let mut pruned = 0;
    for r in solved {
        let r = r?;
        if r.ik_position_error <= prune_threshold {
            survivors.push(r);
        } else {
            pruned += 1;
        }
    }
    Ok(SolvedPool {
        survivors,
        raw: raw.len(),
        pruned,
    })
}

fn solve_record(
    chain: &KinematicChain,
    command: &CommandSample,
    mode: ManipulabilityMode,
    ik: &IkOptions,
) -> Result<DatasetRecord> {
    let problem = IkProblem::new(
        command.left_target,
        command.right_target,
        command.alpha,
        chain.default_config(),
    );
    let r = solve_ik(chain, &problem, ik)?;
    let manip = |side: Side| {
        let j = chain.geometric_jacobian(&r.q, side);
        arm_manipulability_from_jacobian(&j, chain.groups().arm(side), mode)
    };
    Ok(DatasetRecord {
        command: *command,
        ik_position_error: r.max_position_error(),
        ik_orientation_error: r.max_orientation_error(),
        manipulability_left: manip(Side::Left),
        manipulability_right: manip(Side::Right),
        q_solution: r.q,
    })
}

/// Indices of `count` survivors drawn without replacement, ascending.
pub fn select(survivors: &[DatasetRecord], count: usize, weighting: Weighting, seed: u64) -> Vec<usize> {
    if count >= survivors.len() {
        return (0..survivors.len()).collect();
    }
    let mut rng = index_rng(seed, SELECT_STREAM, 0);
    let mut idx = match weighting {
        Weighting::Uniform => rand::seq::index::sample(&mut rng, survivors.len(), count).into_vec(),
        Weighting::Manipulability => rand::seq::index::sample_weighted(
            &mut rng,
            survivors.len(),
            |i| survivors[i].selection_manipulability() + WEIGHT_EPSILON,
            count,
        )
        .expect("weights are positive and finite")
        .into_vec(),
    };
    idx.sort_unstable();
    idx
}

/// Solves, prunes and subsamples `raw` down to `opts.target_count` records.
pub fn curate(chain: &KinematicChain, raw: &[CommandSample], opts: &CurateOptions) -> Result<Dataset> {
    if opts.target_count == 0 {
        return Err(Error::Input("target count must be at least 1".into()));
    }
    if raw.len() < opts.target_count {
        return Err(Error::Input(format!(
            "{} raw samples for a target of {}",
            raw.len(),
            opts.target_count
        )));
    }
    let pool = solve_commands(chain, raw, opts.prune_threshold, opts.manipulability, &opts.ik)?;
    if pool.survivors.is_empty() {
        return Err(Error::EmptyDataset {
            raw: pool.raw,
            pruned: pool.pruned,
        });
    }
    let picked = select(&pool.survivors, opts.target_count, opts.weighting, opts.seed);
    let survivor_count = pool.survivors.len();
    let mut slots: Vec<Option<DatasetRecord>> = pool.survivors.into_iter().map(Some).collect();
    let records: Vec<DatasetRecord> = picked.iter().map(|&i| slots[i].take().unwrap()).collect();
    Ok(Dataset {
        metadata: DatasetMetadata {
            seed: opts.seed,
            chain_hash: hex::encode(chain.hash()),
            dof: chain.dof(),
            space: None,
            prune_threshold: opts.prune_threshold.is_finite().then_some(opts.prune_threshold),
            weighting: opts.weighting,
            manipulability: opts.manipulability,
            target_count: opts.target_count,
            raw_count: pool.raw,
            pruned_count: pool.pruned,
            survivor_count,
            retained_count: records.len(),
        },
        records,
    })
}

/// Draws `OVERSAMPLING × target_count` raw commands from `space` and curates them.
pub fn generate(chain: &KinematicChain, space: &CommandSpace, opts: &CurateOptions) -> Result<Dataset> {
    let raw = sample_raw(space, OVERSAMPLING * opts.target_count.max(1), opts.seed)?;
    let mut d = curate(chain, &raw, opts)?;
    d.metadata.space = Some(space.clone());
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Uniform,
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureDraw {
    pub sample: CommandSample,
    pub branch: Branch,
    /// Source record for prior draws.
    pub record: Option<usize>,
}

/// Standard deviations of the prior-branch perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Per-axis position noise (m).
    pub position: f64,
    /// Per-axis rotation-vector noise (rad).
    pub rotation: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            position: 0.01,
            rotation: 2f64.to_radians(),
        }
    }
}

/// Each draw is a uniform command with probability `beta`, otherwise a
/// perturbed copy of a random dataset record. With `beta = 1` the output
/// equals `sample_raw(space, n, seed)`.
pub fn mixture_sample(
    space: &CommandSpace,
    dataset: &Dataset,
    beta: f64,
    perturbation: Perturbation,
    n: usize,
    seed: u64,
) -> Result<Vec<MixtureDraw>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Input(format!("beta {beta} outside [0, 1]")));
    }
    if dataset.is_empty() && beta < 1.0 {
        return Err(Error::Input("mixture needs a non-empty dataset unless beta = 1".into()));
    }
    if !(perturbation.position >= 0.0 && perturbation.rotation >= 0.0)
        || !perturbation.position.is_finite()
        || !perturbation.rotation.is_finite()
    {
        return Err(Error::Input("perturbation scales must be finite and non-negative".into()));
    }
    space.validate()?;
    let pos_noise = Normal::new(0.0, perturbation.position).unwrap();
    let rot_noise = Normal::new(0.0, perturbation.rotation).unwrap();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = index_rng(seed, BRANCH_STREAM, i);
            if rng.random::<f64>() < beta {
                return MixtureDraw {
                    sample: raw_one(space, seed, i),
                    branch: Branch::Uniform,
                    record: None,
                };
            }
            let k = rng.random_range(0..dataset.len());
            let mut sample = dataset.records[k].command;
            for target in [&mut sample.left_target, &mut sample.right_target] {
                if let Some(t) = target {
                    let dp = Vector3::from_fn(|_, _| pos_noise.sample(&mut rng));
                    let mut p = Pose::new(t.position + dp, t.orientation);
                    if perturbation.rotation > 0.0 {
                        let dr = Vector3::from_fn(|_, _| rot_noise.sample(&mut rng));
                        p = Pose::new(p.position, UnitQuaternion::from_scaled_axis(dr) * t.orientation);
                    } else {
                        p.orientation = t.orientation;
                    }
                    *t = p;
                }
            }
            MixtureDraw {
                sample,
                branch: Branch::Prior,
                record: Some(k),
            }
        })
        .collect())
}

/// Spread of the functional-region test set around the default posture (rad).
pub const FUNCTIONAL_ARM_SIGMA: f64 = 0.4;
pub const FUNCTIONAL_WAIST_SIGMA: f64 = 0.1;
const FUNCTIONAL_STREAM: u64 = 3;

/// Bimanual commands reached by postures near the default one: every joint
/// gets Gaussian noise, the result is clamped to the limits and both hand
/// poses are read off by forward kinematics. Stands in for recorded human
/// motion when judging the prior on the region a policy actually visits.
pub fn functional_test_set(chain: &KinematicChain, space: &CommandSpace, n: usize, seed: u64) -> Result<Vec<CommandSample>> {
    space.validate()?;
    if n == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    let arm = Normal::new(0.0, FUNCTIONAL_ARM_SIGMA).unwrap();
    let waist = Normal::new(0.0, FUNCTIONAL_WAIST_SIGMA).unwrap();
    let rest = chain.default_config();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = index_rng(seed, FUNCTIONAL_STREAM, i);
            let mut q = rest.clone().into_inner();
            for (j, v) in q.iter_mut().enumerate() {
                let d = if chain.groups().waist.contains(&j) { &waist } else { &arm };
                *v += d.sample(&mut rng);
            }
            let q = chain.clamp_to_limits(&q);
            CommandSample {
                left_target: Some(chain.ee_pose(&q, Side::Left)),
                right_target: Some(chain.ee_pose(&q, Side::Right)),
                alpha: rng.random_range(space.alpha_range[0]..=space.alpha_range[1]),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// File format

const MAGIC: &[u8; 4] = b"KMPD";
const VERSION: u32 = 1;

fn record_width(dof: usize) -> usize {
    // flag + position + quaternion per arm, alpha, q, two errors, two manipulabilities
    2 * 8 + 1 + dof + 4
}

fn push_target(out: &mut Vec<f64>, t: &Option<Pose>) {
    match t {
        Some(p) => {
            out.push(1.0);
            out.extend(p.position.iter());
            out.extend(p.wxyz());
        }
        None => out.extend([0.0; 8]),
    }
}

fn pull_target(v: &[f64]) -> Result<Option<Pose>> {
    match v[0] {
        0.0 => Ok(None),
        1.0 => {
            // Stored quaternions are already unit and canonical; rebuild
            // without renormalizing so the round trip is bit-exact.
            let q = Quaternion::new(v[4], v[5], v[6], v[7]);
            Ok(Some(Pose {
                position: Vector3::new(v[1], v[2], v[3]),
                orientation: UnitQuaternion::new_unchecked(q),
            }))
        }
        _ => Err(Error::Format("bad presence flag in record".into())),
    }
}

pub fn encode_dataset(dataset: &Dataset, chain_hash: &[u8; 32]) -> Result<Vec<u8>> {
    let dof = dataset.metadata.dof;
    let meta = serde_json::to_vec(&dataset.metadata)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let width = record_width(dof);
    let mut buf = Vec::with_capacity(52 + meta.len() + dataset.len() * width * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    buf.extend_from_slice(chain_hash);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let mut row = Vec::with_capacity(width);
    for r in &dataset.records {
        if r.q_solution.len() != dof {
            return Err(Error::Input("record joint count differs from metadata".into()));
        }
        row.clear();
        push_target(&mut row, &r.command.left_target);
        push_target(&mut row, &r.command.right_target);
        row.push(r.command.alpha);
        row.extend(r.q_solution.iter());
        row.extend([
            r.ik_position_error,
            r.ik_orientation_error,
            r.manipulability_left,
            r.manipulability_right,
        ]);
        for v in &row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Dataset, [u8; 32])> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 4 + 4 + 8 + 32 + 4 + 4 {
        return Err(fmt("dataset file is truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != MAGIC {
        return Err(fmt("not a dataset file (bad magic)"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let hash: [u8; 32] = body[16..48].try_into().unwrap();
    let meta_len = u32::from_le_bytes(body[48..52].try_into().unwrap()) as usize;
    let meta_end = 52usize.checked_add(meta_len).filter(|e| *e <= body.len()).ok_or_else(|| fmt("dataset file is truncated"))?;
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(fmt("dataset checksum mismatch"));
    }
    let metadata: DatasetMetadata = serde_json::from_slice(&body[52..meta_end])
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    if metadata.chain_hash != hex::encode(hash) {
        return Err(fmt("header and metadata chain hashes differ"));
    }
    let width = record_width(metadata.dof);
    let data = &body[meta_end..];
    if Some(data.len()) != count.checked_mul(width * 8) {
        return Err(fmt("record block size does not match record count"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut records = Vec::with_capacity(count);
    for row in values.chunks_exact(width) {
        let dof = metadata.dof;
        records.push(DatasetRecord {
            command: CommandSample {
                left_target: pull_target(&row[0..8])?,
                right_target: pull_target(&row[8..16])?,
                alpha: row[16],
            },
            q_solution: JointConfig(row[17..17 + dof].to_vec()),
            ik_position_error: row[17 + dof],
            ik_orientation_error: row[18 + dof],
            manipulability_left: row[19 + dof],
            manipulability_right: row[20 + dof],
        });
    }
    Ok((Dataset { records, metadata }, hash))
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut hash = [0u8; 32];
    hex::decode_to_slice(&dataset.metadata.chain_hash, &mut hash)
        .map_err(|_| Error::Input("metadata chain hash must be 64 hex digits".into()))?;
    let bytes = encode_dataset(dataset, &hash)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_dataset(&bytes)?.0)
}

/// Like [`read_dataset`], but fails unless the file was generated for `chain`.
pub fn read_dataset_strict(path: impl AsRef<Path>, chain: &KinematicChain) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (d, hash) = decode_dataset(&bytes)?;
    if hash != chain.hash() {
        return Err(Error::Validation(format!(
            "dataset was generated for chain {}, not {}",
            hex::encode(hash),
            hex::encode(chain.hash())
        )));
    }
    Ok(d)
}
