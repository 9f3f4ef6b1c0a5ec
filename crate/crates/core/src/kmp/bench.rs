//! Latency and accuracy of the prior against the iterative solver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{kmp_infer, kmp_infer_batch, KmpInput, KmpModel};
use crate::chain::{KinematicChain, Side};
use crate::dataset::CommandSample;
use crate::error::{Error, Result};
use crate::ik::{solve_ik, IkOptions, IkProblem};
use crate::stats::quantile;

pub const WARMUP_CALLS: usize = 100;
pub const TIMED_CALLS: usize = 1000;
pub const MIN_TEST_SAMPLES: usize = 1000;
/// Every batch size is timed at least this many times.
pub const MIN_BATCH_REPEATS: usize = 10;

/// Pooled per-arm errors (m and rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub position_median: f64,
    pub position_p90: f64,
    pub orientation_median: f64,
    pub orientation_p90: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLatency {
    pub batch: usize,
    pub repeats: usize,
    /// Median wall time of one batched call.
    pub call_us: f64,
    pub per_sample_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub solver_iterations: usize,
    pub kmp_single_us: f64,
    pub solver_single_us: f64,
    /// Solver latency over prior latency.
    pub speedup: f64,
    pub batches: Vec<BatchLatency>,
    pub kmp_error: ErrorSummary,
    pub solver_error: ErrorSummary,
}

impl BenchReport {
    pub fn batch(&self, size: usize) -> Option<&BatchLatency> {
        self.batches.iter().find(|b| b.batch == size)
    }
}

/// Hand pose errors of `q` against every active target of `c`.
pub fn arm_errors(chain: &KinematicChain, q: &[f64], c: &CommandSample) -> Vec<(f64, f64)> {
    Side::BOTH
        .iter()
        .filter_map(|&s| {
            c.target(s).map(|t| {
                let p = chain.ee_pose(q, s);
                ((p.position - t.position).norm(), p.angle_to(t))
            })
        })
        .collect()
}

pub fn summarize(errors: &[(f64, f64)]) -> ErrorSummary {
    let mut pos: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let mut rot: Vec<f64> = errors.iter().map(|e| e.1).collect();
    ErrorSummary {
        count: errors.len(),
        position_median: quantile(&mut pos, 0.5),
        position_p90: quantile(&mut pos, 0.9),
        orientation_median: quantile(&mut rot, 0.5),
        orientation_p90: quantile(&mut rot, 0.9),
    }
}

/// Error summary of predicted configurations against their commands.
pub fn prediction_errors(chain: &KinematicChain, commands: &[CommandSample], predictions: &[crate::JointConfig]) -> ErrorSummary {
    let errs: Vec<(f64, f64)> = commands
        .iter()
        .zip(predictions)
        .flat_map(|(c, q)| arm_errors(chain, q, c))
        .collect();
    summarize(&errs)
}

fn median_of(mut f: impl FnMut(usize), warmup: usize, timed: usize) -> f64 {
    for i in 0..warmup {
        f(i);
    }
    let mut samples: Vec<f64> = (0..timed)
        .map(|i| {
            let t = Instant::now();
            f(i);
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    quantile(&mut samples, 0.5)
}

fn paired_medians(mut a: impl FnMut(usize), mut b: impl FnMut(usize)) -> (f64, f64) {
    for i in 0..WARMUP_CALLS {
        a(i);
        b(i);
    }
    let mut ta = Vec::with_capacity(TIMED_CALLS);
    let mut tb = Vec::with_capacity(TIMED_CALLS);
    for i in 0..TIMED_CALLS {
        let t = Instant::now();
        a(i);
        ta.push(t.elapsed().as_secs_f64() * 1e6);
        let t = Instant::now();
        b(i);
        tb.push(t.elapsed().as_secs_f64() * 1e6);
    }
    (quantile(&mut ta, 0.5), quantile(&mut tb, 0.5))
}

fn solver_problems(chain: &KinematicChain, samples: &[CommandSample]) -> Vec<IkProblem> {
    samples
        .iter()
        .map(|c| IkProblem::new(c.left_target, c.right_target, c.alpha, chain.default_config()))
        .collect()
}

/// Times single-sample inference of the prior and of the solver (warmup
/// then the median of [`TIMED_CALLS`] calls), batched inference at each
/// size, and both methods' errors over `test_samples`.
pub fn bench_kmp(
    chain: &KinematicChain,
    model: &KmpModel,
    solver_opts: &IkOptions,
    test_samples: &[CommandSample],
    batch_sizes: &[usize],
) -> Result<BenchReport> {
    if test_samples.len() < MIN_TEST_SAMPLES {
        return Err(Error::Input(format!(
            "benchmark needs at least {MIN_TEST_SAMPLES} test samples, got {}",
            test_samples.len()
        )));
    }
    if batch_sizes.contains(&0) {
        return Err(Error::Input("batch sizes must be positive".into()));
    }
    if model.chain_hash() != &chain.hash() {
        return Err(Error::Validation("model was trained for a different chain".into()));
    }
    let n = test_samples.len();
    let inputs: Vec<KmpInput> = test_samples.iter().map(|c| model.encode(c)).collect();
    let problems = solver_problems(chain, test_samples);

    // Alternating calls so both medians see the same machine state.
    let (kmp_single_us, solver_single_us) = paired_medians(
        |i| {
            std::hint::black_box(kmp_infer(model, std::hint::black_box(&inputs[i % n])).unwrap());
        },
        |i| {
            std::hint::black_box(solve_ik(chain, std::hint::black_box(&problems[i % n]), solver_opts).unwrap());
        },
    );

    let mut batches = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let batch: Vec<KmpInput> = inputs.iter().cycle().take(b).cloned().collect();
        let repeats = (TIMED_CALLS / b).max(MIN_BATCH_REPEATS);
        let warmup = (WARMUP_CALLS / b).max(1);
        let call_us = median_of(
            |_| {
                std::hint::black_box(kmp_infer_batch(model, std::hint::black_box(&batch)).unwrap());
            },
            warmup,
            repeats,
        );
        batches.push(BatchLatency {
            batch: b,
            repeats,
            call_us,
            per_sample_us: call_us / b as f64,
        });
    }

    let kmp_pred = kmp_infer_batch(model, &inputs)?;
    let solver_pred: Vec<crate::JointConfig> = problems
        .iter()
        .map(|p| solve_ik(chain, p, solver_opts).map(|r| r.q))
        .collect::<Result<_>>()?;

    Ok(BenchReport {
        solver_iterations: solver_opts.max_iterations,
        kmp_single_us,
        solver_single_us,
        speedup: solver_single_us / kmp_single_us,
        batches,
        kmp_error: prediction_errors(chain, test_samples, &kmp_pred),
        solver_error: prediction_errors(chain, test_samples, &solver_pred),
    })
}
