//! Kinematic manifold prior: a residual MLP mapping a bimanual command to an
//! upper-body joint configuration.
//!
//! Inputs are both hand targets (position plus the first two rotation-matrix
//! columns) and the waist weight α, optionally followed by one presence flag
//! per arm. An absent target is replaced by that hand's pose at the default
//! posture. Inputs and outputs are standardized with statistics of the
//! training split; predictions are clamped to the joint limits.

pub mod bench;
pub mod net;
pub mod train;

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{KinematicChain, Side};
use crate::dataset::CommandSample;
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::JointConfig;

pub use bench::{bench_kmp, prediction_errors, BatchLatency, BenchReport, ErrorSummary};
pub use net::{Arch, Network};
pub use train::{kmp_train, kmp_train_with, pose_loss, EpochLog, TrainConfig, TrainReport};

/// Per-joint bound on the residual added to the prior's reference (rad).
pub const RESIDUAL_CAP: f64 = 0.3;

/// Scalars per hand target: position and two rotation columns.
pub const TARGET_DIM: usize = 9;
/// Command dimension without presence flags.
pub const BASE_INPUT_DIM: usize = 2 * TARGET_DIM + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    S,
    L,
}

impl Variant {
    pub fn blocks(self) -> usize {
        match self {
            Variant::S => 4,
            Variant::L => 5,
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            Variant::S => 64,
            Variant::L => 128,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Variant::S => b'S',
            Variant::L => b'L',
        }
    }

    fn from_tag(t: u8) -> Option<Variant> {
        match t {
            b'S' => Some(Variant::S),
            b'L' => Some(Variant::L),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "S" | "s" => Ok(Variant::S),
            "L" | "l" => Ok(Variant::L),
            _ => Err(Error::Input(format!("unknown variant `{s}` (expected S or L)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tag() as char)
    }
}

/// First two columns of the rotation matrix.
pub fn rot6d_encode(q: &UnitQuaternion<f64>) -> [f64; 6] {
    let m = q.to_rotation_matrix();
    let m = m.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Gram–Schmidt back to a rotation. Any input whose two columns are not
/// parallel gives a valid rotation.
pub fn rot6d_decode(v: &[f64; 6]) -> Rotation3<f64> {
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let c1 = a.normalize();
    let c2 = (b - c1 * c1.dot(&b)).normalize();
    let c3 = c1.cross(&c2);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[c1, c2, c3]))
}

/// An encoded command.
#[derive(Debug, Clone, PartialEq)]
pub struct KmpInput(pub Vec<f64>);

impl KmpInput {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hand pose stored at the given side's slot.
    pub fn target(&self, side: Side) -> Pose {
        let o = side.index() * TARGET_DIM;
        let v = &self.0[o..o + TARGET_DIM];
        let r = rot6d_decode(&[v[3], v[4], v[5], v[6], v[7], v[8]]);
        Pose::new(Vector3::new(v[0], v[1], v[2]), UnitQuaternion::from_rotation_matrix(&r))
    }
}

fn encode_target(out: &mut Vec<f64>, p: &Pose) {
    out.extend(p.position.iter());
    out.extend(rot6d_encode(&p.orientation));
}

/// Per-dimension standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
}

fn column_stats(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

impl Normalization {
    pub fn fit(inputs: &[&[f64]], outputs: &[&[f64]]) -> Result<Normalization> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::Input("normalization needs matching, non-empty inputs and outputs".into()));
        }
        let (input_mean, input_scale) = column_stats(inputs);
        let (output_mean, output_scale) = column_stats(outputs);
        Ok(Normalization {
            input_mean,
            input_scale,
            output_mean,
            output_scale,
        })
    }

    /// Identity transform of the given shape.
    pub fn identity(input: usize, output: usize) -> Normalization {
        Normalization {
            input_mean: vec![0.0; input],
            input_scale: vec![1.0; input],
            output_mean: vec![0.0; output],
            output_scale: vec![1.0; output],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmpModel {
    variant: Variant,
    presence_flags: bool,
    net: Network<f32>,
    norm: Normalization,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rest: [Pose; 2],
    chain_hash: [u8; 32],
    dropout_rate: f64,
}

impl KmpModel {
    /// Fresh model with a zero output layer, so it predicts
    /// `norm.output_mean` (clamped) for every input.
    pub fn new(
        chain: &KinematicChain,
        variant: Variant,
        width: usize,
        presence_flags: bool,
        norm: Normalization,
        seed: u64,
    ) -> Result<KmpModel> {
        let input = BASE_INPUT_DIM + if presence_flags { 2 } else { 0 };
        if width == 0 {
            return Err(Error::Input("hidden width must be positive".into()));
        }
        if norm.input_mean.len() != input
            || norm.input_scale.len() != input
            || norm.output_mean.len() != chain.dof()
            || norm.output_scale.len() != chain.dof()
        {
            return Err(Error::Input("normalization shape does not match the model".into()));
        }
        let arch = Arch {
            input,
            width,
            blocks: variant.blocks(),
            output: chain.dof(),
        };
        let q0 = chain.default_config();
        Ok(KmpModel {
            variant,
            presence_flags,
            net: Network::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)),
            norm,
            lower: chain.lower_limits().to_vec(),
            upper: chain.upper_limits().to_vec(),
            rest: [chain.ee_pose(&q0, Side::Left), chain.ee_pose(&q0, Side::Right)],
            chain_hash: chain.hash(),
            dropout_rate: 0.0,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arch(&self) -> Arch {
        self.net.arch()
    }

    pub fn presence_flags(&self) -> bool {
        self.presence_flags
    }

    pub fn input_dim(&self) -> usize {
        self.net.arch().input
    }

    pub fn output_dim(&self) -> usize {
        self.net.arch().output
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn chain_hash(&self) -> &[u8; 32] {
        &self.chain_hash
    }

    pub fn limits(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    /// Dropout used while training; inference never applies it.
    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub(crate) fn set_dropout_rate(&mut self, rate: f64) {
        self.dropout_rate = rate;
    }

    /// Encodes a command for this model.
    pub fn encode(&self, c: &CommandSample) -> KmpInput {
        let mut v = Vec::with_capacity(self.input_dim());
        for side in Side::BOTH {
            encode_target(&mut v, c.target(side).unwrap_or(&self.rest[side.index()]));
        }
        v.push(c.alpha);
        if self.presence_flags {
            v.push(c.left_target.is_some() as u8 as f64);
            v.push(c.right_target.is_some() as u8 as f64);
        }
        KmpInput(v)
    }

    fn check(&self, z: &KmpInput) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::Input(format!(
                "input has {} values, model expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        if !z.0.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn normalized_inputs(&self, zs: &[KmpInput]) -> Result<Array2<f32>> {
        let d = self.input_dim();
        let mut x = Vec::with_capacity(zs.len() * d);
        for z in zs {
            self.check(z)?;
            for ((v, m), s) in z.0.iter().zip(&self.norm.input_mean).zip(&self.norm.input_scale) {
                x.push(((v - m) / s) as f32);
            }
        }
        Ok(Array2::from_shape_vec((zs.len(), d), x).unwrap())
    }

    fn decode_output(&self, y: &[f32]) -> JointConfig {
        let q = y
            .iter()
            .zip(&self.norm.output_mean)
            .zip(&self.norm.output_scale)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(((&v, m), s), (&lo, &hi))| (v as f64 * s + m).clamp(lo, hi))
            .collect();
        JointConfig(q)
    }
}

/// Predicted configuration, clamped to the joint limits.
pub fn kmp_infer(model: &KmpModel, z: &KmpInput) -> Result<JointConfig> {
    let x = model.normalized_inputs(std::slice::from_ref(z))?;
    let y = model.net.forward(&x.view());
    Ok(model.decode_output(y.as_slice().unwrap()))
}

/// Batched [`kmp_infer`]; one forward pass for the whole batch.
pub fn kmp_infer_batch(model: &KmpModel, zs: &[KmpInput]) -> Result<Vec<JointConfig>> {
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    let x = model.normalized_inputs(zs)?;
    let y = model.net.forward(&x.view());
    Ok(y
        .as_slice()
        .unwrap()
        .chunks_exact(model.output_dim())
        .map(|r| model.decode_output(r))
        .collect())
}

/// `reference + residual`, with each residual entry capped at
/// ±[`RESIDUAL_CAP`] and the sum clamped to `[lower, upper]`.
pub fn kmp_residual_apply(reference: &[f64], residual: &[f64], lower: &[f64], upper: &[f64]) -> Result<JointConfig> {
    if reference.len() != residual.len() || reference.len() != lower.len() || reference.len() != upper.len() {
        return Err(Error::Input("reference, residual and limits must have the same length".into()));
    }
    Ok(JointConfig(
        reference
            .iter()
            .zip(residual)
            .zip(lower.iter().zip(upper))
            .map(|((r, d), (&lo, &hi))| {
                let d = if d.is_nan() { 0.0 } else { d.clamp(-RESIDUAL_CAP, RESIDUAL_CAP) };
                (r + d).clamp(lo, hi)
            })
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Model file

const MAGIC: &[u8; 4] = b"KMPM";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("model file truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

fn put_pose(out: &mut Vec<u8>, p: &Pose) {
    put_f64s(out, p.position.as_slice());
    put_f64s(out, &p.wxyz());
}

/// Serialized model bytes.
pub fn encode_model(m: &KmpModel) -> Vec<u8> {
    let a = m.net.arch();
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.push(m.variant.tag());
    out.push(m.presence_flags as u8);
    for d in [a.input, a.width, a.blocks, a.output] {
        out.extend((d as u32).to_le_bytes());
    }
    out.extend(m.chain_hash);
    out.extend(m.dropout_rate.to_le_bytes());
    put_pose(&mut out, &m.rest[0]);
    put_pose(&mut out, &m.rest[1]);
    put_f64s(&mut out, &m.lower);
    put_f64s(&mut out, &m.upper);
    for v in [&m.norm.input_mean, &m.norm.input_scale, &m.norm.output_mean, &m.norm.output_scale] {
        put_f64s(&mut out, v);
    }
    let shapes = m.net.tensor_shapes();
    out.extend((shapes.len() as u32).to_le_bytes());
    let mut params = m.net.params().iter();
    for (r, c) in shapes {
        out.extend((r as u32).to_le_bytes());
        out.extend((c as u32).to_le_bytes());
        for w in params.by_ref().take(r * c) {
            out.extend(w.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

/// Parses model bytes. With `expected` set, a different variant is an error.
pub fn decode_model(bytes: &[u8], expected: Option<Variant>) -> Result<KmpModel> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Format("model checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, at: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let variant = Variant::from_tag(r.u8()?).ok_or_else(|| Error::Format("unknown variant tag".into()))?;
    if let Some(e) = expected {
        if e != variant {
            return Err(Error::Validation(format!("model is variant {variant}, expected {e}")));
        }
    }
    let presence_flags = r.u8()? != 0;
    let arch = Arch {
        input: r.u32()? as usize,
        width: r.u32()? as usize,
        blocks: r.u32()? as usize,
        output: r.u32()? as usize,
    };
    if arch.blocks != variant.blocks() || arch.input != BASE_INPUT_DIM + 2 * presence_flags as usize {
        return Err(Error::Format("architecture does not match the variant".into()));
    }
    let chain_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let dropout_rate = r.f64()?;
    let pose = |r: &mut Reader| -> Result<Pose> {
        let v = r.f64s(7)?;
        Ok(Pose::from_parts([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]]))
    };
    let rest = [pose(&mut r)?, pose(&mut r)?];
    let lower = r.f64s(arch.output)?;
    let upper = r.f64s(arch.output)?;
    let norm = Normalization {
        input_mean: r.f64s(arch.input)?,
        input_scale: r.f64s(arch.input)?,
        output_mean: r.f64s(arch.output)?,
        output_scale: r.f64s(arch.output)?,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        shapes.push((rows, cols));
        let raw = r.take(rows.saturating_mul(cols).saturating_mul(4))?;
        params.extend(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    }
    if r.at != body.len() {
        return Err(Error::Format("trailing bytes after the weights".into()));
    }
    let net = Network::from_params(arch, params).ok_or_else(|| Error::Format("weight count does not match".into()))?;
    if net.tensor_shapes() != shapes {
        return Err(Error::Format("tensor shapes do not match the architecture".into()));
    }
    Ok(KmpModel {
        variant,
        presence_flags,
        net,
        norm,
        lower,
        upper,
        rest,
        chain_hash,
        dropout_rate,
    })
}

pub fn save_model(model: &KmpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_model(model)).map_err(|e| Error::io(path, e))
}

/// Loads a model; `expected` enables the strict variant check.
pub fn load_model(path: impl AsRef<Path>, expected: Option<Variant>) -> Result<KmpModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::uniform_rotation;
    use proptest::prelude::*;

    fn untrained(variant: Variant, presence: bool) -> (KinematicChain, KmpModel) {
        let chain = KinematicChain::default_humanoid();
        let input = BASE_INPUT_DIM + 2 * presence as usize;
        let mut norm = Normalization::identity(input, chain.dof());
        norm.output_mean = chain.default_config().into_inner();
        norm.output_mean[0] = 0.05;
        let m = KmpModel::new(&chain, variant, 16, presence, norm, 3).unwrap();
        (chain, m)
    }

    fn random_input(rng: &mut ChaCha8Rng, dim: usize) -> KmpInput {
        use rand::Rng;
        KmpInput((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn rot6d_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = uniform_rotation(&mut rng);
            let r = rot6d_decode(&rot6d_encode(&q));
            assert!((r.matrix() - q.to_rotation_matrix().matrix()).abs().max() < 1e-12);
            assert!((r.matrix().transpose() * r.matrix() - Matrix3::identity()).abs().max() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn rot6d_decode_is_orthonormal(v in prop::array::uniform6(-5.0f64..5.0)) {
            let a = Vector3::new(v[0], v[1], v[2]);
            let b = Vector3::new(v[3], v[4], v[5]);
            prop_assume!(a.norm() > 1e-3 && a.normalize().cross(&b).norm() > 1e-3);
            let r = rot6d_decode(&v);
            prop_assert!((r.matrix().transpose() * r.matrix() - Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn residual_output_stays_in_limits(
            r in prop::collection::vec(-4.0f64..4.0, 17),
            d in prop::collection::vec(-2.0f64..2.0, 17),
        ) {
            let chain = KinematicChain::default_humanoid();
            let q = kmp_residual_apply(&r, &d, chain.lower_limits(), chain.upper_limits()).unwrap();
            prop_assert!(chain.within_limits(&q));
        }
    }

    #[test]
    fn untrained_model_predicts_the_mean_posture() {
        let (chain, m) = untrained(Variant::S, false);
        assert!(m.network().output_is_zero());
        let expected = chain.clamp_to_limits(&m.normalization().output_mean);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = kmp_infer(&m, &random_input(&mut rng, m.input_dim())).unwrap();
            assert!(q.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn inference_is_deterministic_and_batch_consistent() {
        let (_, mut m) = untrained(Variant::L, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in m.network_mut().params_mut() {
            use rand::Rng;
            *p = rng.random_range(-0.3..0.3);
        }
        let zs: Vec<KmpInput> = (0..10).map(|_| random_input(&mut rng, m.input_dim())).collect();
        let batch = kmp_infer_batch(&m, &zs).unwrap();
        for (z, b) in zs.iter().zip(&batch) {
            let a = kmp_infer(&m, z).unwrap();
            assert_eq!(a, kmp_infer(&m, z).unwrap());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-5));
            let (lo, hi) = m.limits();
            assert!(a.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l <= v && v <= h));
        }
    }

    #[test]
    fn inference_rejects_bad_inputs() {
        let (_, m) = untrained(Variant::S, false);
        assert!(matches!(kmp_infer(&m, &KmpInput(vec![0.0; 21])), Err(Error::Input(_))));
        let mut z = vec![0.0; BASE_INPUT_DIM];
        z[3] = f64::NAN;
        assert!(matches!(kmp_infer(&m, &KmpInput(z)), Err(Error::Input(_))));
    }

    #[test]
    fn absent_targets_use_rest_poses_and_flags() {
        let (chain, m) = untrained(Variant::S, true);
        let c = CommandSample {
            left_target: Some(Pose::from_translation(0.3, 0.2, 0.3)),
            right_target: None,
            alpha: 2.0,
        };
        let z = m.encode(&c);
        assert_eq!(z.len(), BASE_INPUT_DIM + 2);
        assert_eq!(&z.0[BASE_INPUT_DIM..], &[1.0, 0.0]);
        assert_eq!(z.0[2 * TARGET_DIM], 2.0);
        let rest = chain.ee_pose(&chain.default_config(), Side::Right);
        let back = z.target(Side::Right);
        assert!((back.position - rest.position).norm() < 1e-12);
        assert!(back.angle_to(&rest) < 1e-9);
    }

    #[test]
    fn residual_examples() {
        let lo = [-1.0, -1.0, -1.0];
        let hi = [1.0, 1.0, 1.0];
        let r = [0.2, 1.0, -0.5];
        assert_eq!(kmp_residual_apply(&r, &[0.0; 3], &lo, &hi).unwrap().0, r.to_vec());
        assert_eq!(kmp_residual_apply(&r, &[0.9, 0.0, -2.0], &lo, &hi).unwrap().0, vec![0.5, 1.0, -0.8]);
        assert_eq!(kmp_residual_apply(&[1.0], &[0.2], &[-1.0], &[1.0]).unwrap().0, vec![1.0]);
        assert!(kmp_residual_apply(&r, &[0.0; 2], &lo, &hi).is_err());
    }

    #[test]
    fn model_file_round_trip_and_corruption() {
        let (_, mut m) = untrained(Variant::S, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in m.network_mut().params_mut() {
            use rand::Rng;
            *p = rng.random_range(-0.3..0.3);
        }
        let bytes = encode_model(&m);
        let back = decode_model(&bytes, Some(Variant::S)).unwrap();
        assert_eq!(back, m);
        for _ in 0..100 {
            let z = random_input(&mut rng, m.input_dim());
            let (a, b) = (kmp_infer(&m, &z).unwrap(), kmp_infer(&back, &z).unwrap());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let mut bad = bytes.clone();
        let k = bytes.len() - 200;
        bad[k] ^= 1;
        assert!(matches!(decode_model(&bad, None), Err(Error::Format(_))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 9], None), Err(Error::Format(_))));
        assert!(matches!(decode_model(&bytes, Some(Variant::L)), Err(Error::Validation(_))));

        let mut old = bytes.clone();
        old[4] = 9;
        let n = old.len() - 4;
        let crc = crc32fast::hash(&old[..n]);
        old[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_model(&old, None), Err(Error::Format(_))));
    }
}
