//! Minibatch Adam on joint-space squared error plus a forward-kinematics
//! hand-pose term.

use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KmpInput, KmpModel, Normalization, Variant};
use crate::chain::{KinematicChain, Side};
use crate::dataset::{CommandSample, Dataset};
use crate::ik::{so3_left_jacobian_inv, IkWeights};
use crate::error::{Error, Result};

pub const MIN_TRAINING_RECORDS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after the warmup and decayed along a
    /// cosine to `learning_rate · final_lr_fraction`.
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub warmup_steps: usize,
    pub dropout_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Weight of the hand-pose term: forward kinematics of the prediction
    /// against the commanded targets, scaled by `pose_weights`. Zero trains
    /// on joint angles alone.
    pub pose_loss_weight: f64,
    /// Residual scales of the hand-pose term (1/m, 1/rad).
    pub pose_weights: IkWeights,
    /// Hidden width; the variant's default when unset.
    pub width: Option<usize>,
    /// Presence-flag inputs; on when the dataset has one-armed commands.
    pub presence_flags: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1024,
            learning_rate: 1e-3,
            final_lr_fraction: 0.01,
            warmup_steps: 200,
            dropout_rate: 0.0,
            validation_fraction: 0.05,
            seed: 0,
            pose_loss_weight: 0.3,
            pose_weights: IkWeights {
                position: 100.0,
                orientation: 15.0,
            },
            width: None,
            presence_flags: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::Input("validation fraction must lie in (0, 0.5]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Input("final learning-rate fraction must lie in [0, 1]".into()));
        }
        if !(self.pose_loss_weight >= 0.0 && self.pose_loss_weight.is_finite()) {
            return Err(Error::Input("pose loss weight must be finite and non-negative".into()));
        }
        if !(self.pose_weights.position >= 0.0 && self.pose_weights.orientation >= 0.0) {
            return Err(Error::Input("pose weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Input("dropout rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.learning_rate * self.final_lr_fraction;
        floor + (self.learning_rate - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Losses are the training objective: mean squared joint-angle error (rad²)
/// plus the weighted hand-pose term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Joint-angle part of the validation loss alone.
    pub validation_joint_mse: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub width: usize,
    pub parameters: usize,
    pub train_count: usize,
    /// Dataset indices held out for validation, ascending.
    pub validation_indices: Vec<usize>,
    pub epochs: Vec<EpochLog>,
    pub seconds: f64,
}

const SPLIT_STREAM: u64 = 0x5eed_0001;
const SHUFFLE_STREAM: u64 = 0x5eed_0002;

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let step = lr as f32 * c2.sqrt() / c1;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= step * *m / (v.sqrt() + Self::EPS);
        }
    }
}

struct Split {
    x: Array2<f32>,
    y: Array2<f32>,
}

fn gather(model: &KmpModel, inputs: &[KmpInput], targets: &[&[f64]], idx: &[usize]) -> Split {
    let norm = model.normalization();
    let (di, dout) = (model.input_dim(), model.output_dim());
    let mut x = Vec::with_capacity(idx.len() * di);
    let mut y = Vec::with_capacity(idx.len() * dout);
    for &i in idx {
        for ((v, m), s) in inputs[i].0.iter().zip(&norm.input_mean).zip(&norm.input_scale) {
            x.push(((v - m) / s) as f32);
        }
        for ((v, m), s) in targets[i].iter().zip(&norm.output_mean).zip(&norm.output_scale) {
            y.push(((v - m) / s) as f32);
        }
    }
    Split {
        x: Array2::from_shape_vec((idx.len(), di), x).unwrap(),
        y: Array2::from_shape_vec((idx.len(), dout), y).unwrap(),
    }
}

/// Mean squared raw-angle error of normalized predictions.
fn raw_mse(pred: &Array2<f32>, target: &Array2<f32>, weight: &[f32]) -> f64 {
    let d = weight.len();
    let mut sum = 0.0f64;
    for (p, t) in pred.as_slice().unwrap().chunks_exact(d).zip(target.as_slice().unwrap().chunks_exact(d)) {
        let row: f32 = p.iter().zip(t).zip(weight).map(|((a, b), w)| w * (a - b) * (a - b)).sum();
        sum += row as f64;
    }
    sum / (pred.nrows() * d) as f64
}

/// Squared hand-pose residual of `q` against `cmd`; adds its gradient with
/// respect to `q` to `grad`.
fn pose_residual(
    chain: &KinematicChain,
    weights: &IkWeights,
    q: &[f64],
    cmd: &CommandSample,
    grad: &mut [f64],
    jac: &mut DMatrix<f64>,
) -> f64 {
    let frames = chain.frames(q);
    let mut loss = 0.0;
    for side in Side::BOTH {
        let Some(t) = cmd.target(side) else { continue };
        let ee = chain.ee_from_frames(&frames, side);
        let dp = ee.translation.vector - t.position;
        let dr = (ee.rotation * t.orientation.inverse()).scaled_axis();
        let (wp, wr) = (weights.position * weights.position, weights.orientation * weights.orientation);
        loss += wp * dp.norm_squared() + wr * dr.norm_squared();
        chain.jacobian_from_frames(&frames, side, &ee.translation.vector, jac);
        let jl_inv = so3_left_jacobian_inv(&dr);
        let gr = jl_inv.transpose() * dr;
        for &c in chain.ee_path(side) {
            let jv = jac.fixed_view::<3, 1>(0, c);
            let jw = jac.fixed_view::<3, 1>(3, c);
            grad[c] += 2.0 * (wp * jv.dot(&dp) + wr * jw.dot(&gr));
        }
    }
    loss
}

/// Hand-pose term of the training objective at `q` and its gradient with
/// respect to `q`.
pub fn pose_loss(chain: &KinematicChain, weights: &IkWeights, q: &[f64], cmd: &CommandSample) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; q.len()];
    let mut jac = DMatrix::zeros(6, q.len());
    let loss = pose_residual(chain, weights, q, cmd, &mut grad, &mut jac);
    (loss, grad)
}

struct Objective<'a> {
    chain: &'a KinematicChain,
    weights: IkWeights,
    pose_weight: f64,
    /// Per-output squared scale: joint MSE in raw units.
    joint_weight: Vec<f32>,
    norm: &'a Normalization,
    lower: &'a [f64],
    upper: &'a [f64],
}

struct Loss {
    total: f64,
    joint: f64,
}

impl Objective<'_> {
    /// Mean loss of normalized predictions; fills `dy` with its gradient
    /// when given.
    fn evaluate(&self, pred: &Array2<f32>, target: &Array2<f32>, cmds: &[CommandSample], dy: Option<&mut Array2<f32>>) -> Loss {
        let d = self.joint_weight.len();
        let b = pred.nrows();
        let joint = raw_mse(pred, target, &self.joint_weight);
        let mut pose = 0.0;
        let mut dy = dy;
        if let Some(g) = dy.as_deref_mut() {
            let scale = 2.0 / (b * d) as f32;
            Zip::from(g.rows_mut())
                .and(pred.rows())
                .and(target.rows())
                .for_each(|mut g, p, t| {
                    for (((g, p), t), w) in g.iter_mut().zip(p).zip(t).zip(&self.joint_weight) {
                        *g = scale * w * (p - t);
                    }
                });
        }
        if self.pose_weight > 0.0 {
            let mut jac = DMatrix::zeros(6, d);
            let mut grad = vec![0.0; d];
            let rows = pred.as_slice().unwrap().chunks_exact(d);
            for (i, (p, cmd)) in rows.zip(cmds).enumerate() {
                let raw: Vec<f64> = p
                    .iter()
                    .zip(&self.norm.output_mean)
                    .zip(&self.norm.output_scale)
                    .map(|((&v, m), s)| v as f64 * s + m)
                    .collect();
                let q: Vec<f64> = raw
                    .iter()
                    .zip(self.lower.iter().zip(self.upper))
                    .map(|(v, (&lo, &hi))| v.clamp(lo, hi))
                    .collect();
                grad.fill(0.0);
                pose += pose_residual(self.chain, &self.weights, &q, cmd, &mut grad, &mut jac);
                if let Some(g) = dy.as_deref_mut() {
                    let k = self.pose_weight / b as f64;
                    let row = g.row_mut(i);
                    for (((gv, dq), s), (r, c)) in row.into_iter().zip(&grad).zip(&self.norm.output_scale).zip(raw.iter().zip(&q)) {
                        // The clamp has zero slope outside the limits.
                        if r == c {
                            *gv += (k * dq * s) as f32;
                        }
                    }
                }
            }
            pose /= b as f64;
        }
        Loss {
            total: joint + self.pose_weight * pose,
            joint,
        }
    }
}

fn validation_loss(model: &KmpModel, val: &Split, cmds: &[CommandSample], objective: &Objective) -> Loss {
    const CHUNK: usize = 4096;
    let (mut total, mut joint) = (0.0, 0.0);
    for start in (0..val.x.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(val.x.nrows());
        let x = val.x.slice(ndarray::s![start..end, ..]);
        let y = val.y.slice(ndarray::s![start..end, ..]).to_owned();
        let l = objective.evaluate(&model.network().forward(&x), &y, &cmds[start..end], None);
        total += l.total * (end - start) as f64;
        joint += l.joint * (end - start) as f64;
    }
    let n = val.x.nrows() as f64;
    Loss {
        total: total / n,
        joint: joint / n,
    }
}

/// Trains a prior on `dataset`. The model predicts the dataset's
/// `q_solution` for each command. Runs on the calling thread; the result
/// depends only on the dataset and `config`.
pub fn kmp_train(
    chain: &KinematicChain,
    dataset: &Dataset,
    variant: Variant,
    config: &TrainConfig,
) -> Result<(KmpModel, TrainReport)> {
    kmp_train_with(chain, dataset, variant, config, |_| {})
}

/// [`kmp_train`] with a callback after every epoch.
pub fn kmp_train_with(
    chain: &KinematicChain,
    dataset: &Dataset,
    variant: Variant,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(KmpModel, TrainReport)> {
    config.validate()?;
    let n = dataset.len();
    if n < MIN_TRAINING_RECORDS {
        return Err(Error::Input(format!(
            "training needs at least {MIN_TRAINING_RECORDS} records, dataset has {n}"
        )));
    }
    if dataset.records.iter().any(|r| r.q_solution.len() != chain.dof()) {
        return Err(Error::Input("dataset configurations do not match the chain".into()));
    }
    let started = Instant::now();
    let presence = config.presence_flags.unwrap_or_else(|| {
        dataset
            .records
            .iter()
            .any(|r| r.command.left_target.is_none() || r.command.right_target.is_none())
    });
    let width = config.width.unwrap_or(variant.default_width());

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ SPLIT_STREAM));
    let val_count = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n / 2);
    let mut val_idx = order[..val_count].to_vec();
    let mut train_idx = order[val_count..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    // Encoding only needs the rest poses, so a provisional model does it.
    let probe = KmpModel::new(
        chain,
        variant,
        width,
        presence,
        Normalization::identity(super::BASE_INPUT_DIM + 2 * presence as usize, chain.dof()),
        config.seed,
    )?;
    let inputs: Vec<KmpInput> = dataset.records.iter().map(|r| probe.encode(&r.command)).collect();
    let targets: Vec<&[f64]> = dataset.records.iter().map(|r| &r.q_solution[..]).collect();
    let norm = Normalization::fit(
        &train_idx.iter().map(|&i| &inputs[i].0[..]).collect::<Vec<_>>(),
        &train_idx.iter().map(|&i| targets[i]).collect::<Vec<_>>(),
    )?;
    let weight: Vec<f32> = norm.output_scale.iter().map(|s| (s * s) as f32).collect();
    let mut model = KmpModel::new(chain, variant, width, presence, norm, config.seed)?;
    model.set_dropout_rate(config.dropout_rate);

    let train = gather(&model, &inputs, &targets, &train_idx);
    let val = gather(&model, &inputs, &targets, &val_idx);
    drop(inputs);
    let train_cmds: Vec<CommandSample> = train_idx.iter().map(|&i| dataset.records[i].command).collect();
    let val_cmds: Vec<CommandSample> = val_idx.iter().map(|&i| dataset.records[i].command).collect();
    let (lower, upper) = (chain.lower_limits().to_vec(), chain.upper_limits().to_vec());
    let norm = model.normalization().clone();
    let objective = Objective {
        chain,
        weights: config.pose_weights,
        pose_weight: config.pose_loss_weight,
        joint_weight: weight,
        norm: &norm,
        lower: &lower,
        upper: &upper,
    };

    let batches_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut adam = Adam::new(model.network().param_count());
    let mut grad = vec![0f32; model.network().param_count()];
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut perm: Vec<usize> = (0..train_idx.len()).collect();
    let mut last_stable: Option<KmpModel> = None;
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        perm.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in perm.chunks(config.batch_size) {
            let x = train.x.select(ndarray::Axis(0), chunk);
            let y = train.y.select(ndarray::Axis(0), chunk);
            let rng: Option<&mut dyn rand::RngCore> = if config.dropout_rate > 0.0 { Some(&mut dropout_rng) } else { None };
            let (pred, cache) = model.network().forward_train(&x.view(), config.dropout_rate, rng);
            let cmds: Vec<CommandSample> = chunk.iter().map(|&i| train_cmds[i]).collect();
            let mut dy = Array2::zeros(pred.raw_dim());
            let batch_loss = objective.evaluate(&pred, &y, &cmds, Some(&mut dy)).total;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_stable: last_stable.map(Box::new),
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            grad.fill(0.0);
            model.network().backward(&cache, &dy, &mut grad);
            lr = config.learning_rate_at(step, total_steps);
            adam.step(model.network_mut().params_mut(), &grad, lr);
            step += 1;
        }
        let val_loss = validation_loss(&model, &val, &val_cmds, &objective);
        if !val_loss.total.is_finite() || model.network().params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                last_stable: last_stable.map(Box::new),
            });
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            validation_loss: val_loss.total,
            validation_joint_mse: val_loss.joint,
            learning_rate: lr,
        };
        on_epoch(&log);
        logs.push(log);
        last_stable = Some(model.clone());
    }

    let report = TrainReport {
        variant,
        width,
        parameters: model.network().param_count(),
        train_count: train_idx.len(),
        validation_indices: val_idx,
        epochs: logs,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((c.learning_rate_at(0, 110) - 1e-4).abs() < 1e-12);
        assert!((c.learning_rate_at(10, 110) - 1e-3).abs() < 1e-12);
        assert!(c.learning_rate_at(60, 110) < c.learning_rate_at(30, 110));
        assert!((c.learning_rate_at(109, 110) - 1e-5).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        for f in [0.0, 0.51, -0.1] {
            let c = TrainConfig {
                validation_fraction: f,
                ..TrainConfig::default()
            };
            assert!(c.validate().is_err());
        }
        assert!(TrainConfig {
            validation_fraction: 0.5,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn pose_gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let chain = KinematicChain::default_humanoid();
        let (lo, hi) = (chain.lower_limits(), chain.upper_limits());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = IkWeights {
            position: 100.0,
            orientation: 15.0,
        };
        for trial in 0..20 {
            let mut draw = || -> Vec<f64> { lo.iter().zip(hi).map(|(&l, &h)| rng.random_range(l..h)).collect() };
            let (q, goal) = (draw(), draw());
            let left = chain.ee_pose(&goal, Side::Left);
            let right = (trial % 2 == 0).then(|| chain.ee_pose(&goal, Side::Right));
            let cmd = CommandSample {
                left_target: Some(left),
                right_target: right,
                alpha: 1.0,
            };
            let (_, grad) = pose_loss(&chain, &weights, &q, &cmd);
            let h = 1e-6;
            for i in 0..q.len() {
                let (mut a, mut b) = (q.clone(), q.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (pose_loss(&chain, &weights, &a, &cmd).0 - pose_loss(&chain, &weights, &b, &cmd).0) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1.0);
                assert!(err < 1e-5, "trial {trial} joint {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut a = Adam::new(2);
        let mut p = [1.0f32, -1.0];
        a.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-5 && (p[1] + 0.9).abs() < 1e-5);
    }
}
