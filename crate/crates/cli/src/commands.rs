use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use manifold_kin::config::{RunConfig, BENCH_COMPONENT, SIM_COMPONENT};
use manifold_kin::dataset::{functional_test_set, generate, read_dataset_strict, write_dataset, Weighting};
use manifold_kin::ik::IkOptions;
use manifold_kin::kmp::{
    bench_kmp, kmp_infer_batch, kmp_train_with, load_model, prediction_errors, save_model, KmpModel,
};
use manifold_kin::sim::{
    drift_ab, episode_seed, eval_shapes, mobility_table, random_trajectory, run_episode, summarize_shapes,
    EpisodeTask, Tracker, TrackerKind, MOBILITY_DISTANCE,
};
use manifold_kin::KinematicChain;
use serde::Serialize;

use crate::{plot, BenchArgs, Cli, Command, EvalArgs, GenDatasetArgs, GlobalArgs, RunArgs, TrackerArgs, TrainArgs, UsageError};

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Command::Plot(a) = &cli.command {
        let output = a.output.clone().unwrap_or_else(|| a.input.with_extension("svg"));
        plot::plot_file(&a.input, &output)?;
        println!("wrote {}", output.display());
        return Ok(());
    }
    let mut cfg = base_config(&cli.global)?;
    match cli.command {
        Command::GenDataset(a) => gen_dataset(&mut cfg, a),
        Command::TrainKmp(a) => train(&mut cfg, a),
        Command::BenchKmp(a) => bench(&mut cfg, a),
        Command::Run(a) => run(&mut cfg, a),
        Command::Eval(a) => eval(&mut cfg, a),
        Command::Plot(_) => unreachable!(),
    }
}

fn base_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).map_err(|e| UsageError(format!("config {}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    if let Some(c) = &g.chain {
        cfg.chain = Some(c.clone());
    }
    Ok(cfg)
}

/// Validates the final configuration, creates the output directory and
/// echoes the configuration into it.
fn prepare(cfg: &RunConfig) -> Result<KinematicChain> {
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let chain = cfg.chain()?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    cfg.save(cfg.output_dir.join("config.toml"))?;
    Ok(chain)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DatasetStats {
    raw: usize,
    pruned: usize,
    survivors: usize,
    retained: usize,
    retained_ratio: f64,
}

fn gen_dataset(cfg: &mut RunConfig, a: GenDatasetArgs) -> Result<()> {
    if let Some(n) = a.count {
        cfg.dataset.curate.target_count = n;
    }
    if a.uniform {
        cfg.dataset.curate.prune_threshold = f64::INFINITY;
        cfg.dataset.curate.weighting = Weighting::Uniform;
    }
    if let Some(p) = a.prune {
        if !(p > 0.0) {
            bail!(UsageError("--prune must be positive".into()));
        }
        cfg.dataset.curate.prune_threshold = p;
    }
    let chain = prepare(cfg)?;
    let output = a.output.unwrap_or_else(|| cfg.output_dir.join("dataset.kmpd"));
    let d = generate(&chain, &cfg.dataset.space, &cfg.curate_options())?;
    write_dataset(&d, &output)?;
    let m = &d.metadata;
    let stats = DatasetStats {
        raw: m.raw_count,
        pruned: m.pruned_count,
        survivors: m.survivor_count,
        retained: m.retained_count,
        retained_ratio: m.retained_count as f64 / m.raw_count as f64,
    };
    write_rows(&cfg.output_dir.join("dataset_stats.csv"), &[&stats])?;
    println!(
        "raw {} pruned {} survivors {} retained {} (retained/raw {:.4})",
        stats.raw, stats.pruned, stats.survivors, stats.retained, stats.retained_ratio
    );
    println!("wrote {}", output.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    width: usize,
    parameters: usize,
    train_count: usize,
    validation_count: usize,
    seconds: f64,
    heldout_position_median_m: f64,
    heldout_position_p90_m: f64,
    heldout_orientation_median_deg: f64,
    heldout_orientation_p90_deg: f64,
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.width.is_some() {
        cfg.train.width = a.width;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    let chain = prepare(cfg)?;
    let dataset = read_dataset_strict(&a.dataset, &chain)?;
    let model_path = a.model.unwrap_or_else(|| cfg.output_dir.join("model.kmpm"));
    let (model, report) = kmp_train_with(&chain, &dataset, cfg.variant, &cfg.train_config(), |e| {
        eprintln!(
            "epoch {:>4}  train {:.5}  validation {:.5}  lr {:.2e}",
            e.epoch, e.train_loss, e.validation_loss, e.learning_rate
        )
    })?;
    save_model(&model, &model_path)?;
    let log_path = cfg.output_dir.join("train_log.csv");
    write_rows(&log_path, &report.epochs)?;
    plot::plot_file(&log_path, &log_path.with_extension("svg"))?;

    let commands: Vec<_> = report.validation_indices.iter().map(|&i| dataset.records[i].command).collect();
    let inputs: Vec<_> = commands.iter().map(|c| model.encode(c)).collect();
    let err = prediction_errors(&chain, &commands, &kmp_infer_batch(&model, &inputs)?);
    let summary = TrainSummary {
        variant: report.variant.to_string(),
        width: report.width,
        parameters: report.parameters,
        train_count: report.train_count,
        validation_count: commands.len(),
        seconds: report.seconds,
        heldout_position_median_m: err.position_median,
        heldout_position_p90_m: err.position_p90,
        heldout_orientation_median_deg: err.orientation_median.to_degrees(),
        heldout_orientation_p90_deg: err.orientation_p90.to_degrees(),
    };
    write_rows(&cfg.output_dir.join("train_summary.csv"), &[&summary])?;
    println!(
        "trained {} (width {}, {} parameters) in {:.0} s; held-out median {:.1} mm / {:.1} deg",
        summary.variant,
        summary.width,
        summary.parameters,
        summary.seconds,
        summary.heldout_position_median_m * 1e3,
        summary.heldout_orientation_median_deg
    );
    println!("wrote {}", model_path.display());
    Ok(())
}

fn load_checked(path: &Path, chain: &KinematicChain) -> Result<KmpModel> {
    let m = load_model(path, None)?;
    if m.chain_hash() != &chain.hash() {
        bail!("model {} was trained for a different chain", path.display());
    }
    Ok(m)
}

#[derive(Serialize)]
struct BenchRow {
    method: &'static str,
    batch: usize,
    repeats: usize,
    call_us: f64,
    per_sample_us: f64,
    ratio_to_single: f64,
}

#[derive(Serialize)]
struct AccuracyRow {
    method: &'static str,
    arms: usize,
    position_median_m: f64,
    position_p90_m: f64,
    orientation_median_deg: f64,
    orientation_p90_deg: f64,
}

fn bench(cfg: &mut RunConfig, a: BenchArgs) -> Result<()> {
    let chain = prepare(cfg)?;
    let model = load_checked(&a.model, &chain)?;
    let test = functional_test_set(&chain, &cfg.dataset.space, a.samples.max(1000), cfg.component_seed(BENCH_COMPONENT))?;
    let opts = IkOptions::default().with_max_iterations(a.iterations);
    let r = bench_kmp(&chain, &model, &opts, &test, &a.batches)?;
    let mut rows = vec![
        BenchRow {
            method: "solver",
            batch: 1,
            repeats: manifold_kin::kmp::bench::TIMED_CALLS,
            call_us: r.solver_single_us,
            per_sample_us: r.solver_single_us,
            ratio_to_single: 1.0,
        },
        BenchRow {
            method: "kmp",
            batch: 1,
            repeats: manifold_kin::kmp::bench::TIMED_CALLS,
            call_us: r.kmp_single_us,
            per_sample_us: r.kmp_single_us,
            ratio_to_single: 1.0,
        },
    ];
    rows.extend(r.batches.iter().map(|b| BenchRow {
        method: "kmp-batch",
        batch: b.batch,
        repeats: b.repeats,
        call_us: b.call_us,
        per_sample_us: b.per_sample_us,
        ratio_to_single: b.per_sample_us / r.kmp_single_us,
    }));
    write_rows(&cfg.output_dir.join("bench.csv"), &rows)?;
    let acc = |method, e: &manifold_kin::kmp::ErrorSummary| AccuracyRow {
        method,
        arms: e.count,
        position_median_m: e.position_median,
        position_p90_m: e.position_p90,
        orientation_median_deg: e.orientation_median.to_degrees(),
        orientation_p90_deg: e.orientation_p90.to_degrees(),
    };
    write_rows(
        &cfg.output_dir.join("bench_accuracy.csv"),
        &[acc("kmp", &r.kmp_error), acc("solver", &r.solver_error)],
    )?;
    println!(
        "single sample: kmp {:.2} us, solver ({} iterations) {:.2} us, speedup {:.2}",
        r.kmp_single_us, r.solver_iterations, r.solver_single_us, r.speedup
    );
    for b in &r.batches {
        println!(
            "batch {:>5}: {:.3} us per sample ({:.3} of single)",
            b.batch,
            b.per_sample_us,
            b.per_sample_us / r.kmp_single_us
        );
    }
    Ok(())
}

fn apply_tracker_args(cfg: &mut RunConfig, t: &TrackerArgs) -> Result<()> {
    if let Some(d) = t.drift {
        cfg.sim.drift_sigma = d;
    }
    if t.tracker == TrackerKind::Kmp && t.model.is_none() {
        bail!(UsageError("--tracker kmp needs --model".into()));
    }
    Ok(())
}

fn load_tracker_model(t: &TrackerArgs, chain: &KinematicChain) -> Result<Option<KmpModel>> {
    match (&t.model, t.tracker) {
        (Some(p), TrackerKind::Kmp) => Ok(Some(load_checked(p, chain)?)),
        _ => Ok(None),
    }
}

fn tracker(model: &Option<KmpModel>) -> Tracker<'_> {
    match model {
        Some(m) => Tracker::Kmp(m),
        None => Tracker::ExactIk,
    }
}

#[derive(Serialize)]
struct PairRow {
    shape: String,
    seed: u64,
    closed_loop_error_m: f64,
    open_loop_error_m: f64,
}

#[derive(Serialize)]
struct PairSummary {
    shape: String,
    seeds: usize,
    closed_loop_mean_m: f64,
    open_loop_mean_m: f64,
    p_value: f64,
}

fn run(cfg: &mut RunConfig, a: RunArgs) -> Result<()> {
    apply_tracker_args(cfg, &a.tracker)?;
    if a.open_loop {
        cfg.sim.closed_loop = false;
    }
    let chain = prepare(cfg)?;
    let model = load_tracker_model(&a.tracker, &chain)?;
    let tracker = tracker(&model);
    let root = cfg.component_seed(SIM_COMPONENT);
    if a.ab {
        let cmp = drift_ab(&chain, &[a.shape], a.seeds as usize, root, &tracker, &cfg.sim)?;
        let c = &cmp[0];
        let rows: Vec<PairRow> = (0..c.seeds.len())
            .map(|i| PairRow {
                shape: c.shape.to_string(),
                seed: c.seeds[i],
                closed_loop_error_m: c.closed_loop[i],
                open_loop_error_m: c.open_loop[i],
            })
            .collect();
        write_rows(&cfg.output_dir.join("ab.csv"), &rows)?;
        let s = PairSummary {
            shape: c.shape.to_string(),
            seeds: c.seeds.len(),
            closed_loop_mean_m: c.closed_mean(),
            open_loop_mean_m: c.open_mean(),
            p_value: c.p_value,
        };
        write_rows(&cfg.output_dir.join("ab_summary.csv"), &[&s])?;
        println!(
            "{}: closed loop {:.1} mm, open loop {:.1} mm over {} seeds, p = {:.4}",
            s.shape,
            s.closed_loop_mean_m * 1e3,
            s.open_loop_mean_m * 1e3,
            s.seeds,
            s.p_value
        );
        return Ok(());
    }
    let seed = episode_seed(root, a.shape, a.index);
    let (spec, start) = random_trajectory(&chain, a.shape, &cfg.sim, seed)?;
    let report = run_episode(&chain, &EpisodeTask::Trajectory(spec), &start, &tracker, &cfg.sim, seed)?;
    let path = cfg.output_dir.join("episode.csv");
    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    report.write_csv(std::io::BufWriter::new(file))?;
    plot::plot_file(&path, &path.with_extension("svg"))?;
    println!(
        "{} with {}: mean error {:.1} mm, max {:.1} mm, {} ({} approach steps)",
        a.shape,
        report.tracker,
        report.mean_error * 1e3,
        report.max_error * 1e3,
        if report.success { "success" } else { "failure" },
        report.approach_steps
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ShapeRow {
    shape: String,
    tracker: String,
    episodes: usize,
    success_rate: f64,
    mean_error_m: f64,
    worst_error_m: f64,
}

#[derive(Serialize)]
struct EpisodeRow {
    shape: String,
    seed: u64,
    mean_error_m: f64,
    max_error_m: f64,
    success: bool,
    approach_steps: usize,
}

fn eval(cfg: &mut RunConfig, a: EvalArgs) -> Result<()> {
    apply_tracker_args(cfg, &a.tracker)?;
    let chain = prepare(cfg)?;
    let model = load_tracker_model(&a.tracker, &chain)?;
    let tracker = tracker(&model);
    let root = cfg.component_seed(SIM_COMPONENT);
    let episodes = eval_shapes(&chain, &a.shapes, a.seeds, root, &tracker, &cfg.sim)?;
    let shapes: Vec<ShapeRow> = summarize_shapes(&a.shapes, &episodes)
        .into_iter()
        .map(|s| ShapeRow {
            shape: s.shape.to_string(),
            tracker: tracker.kind().to_string(),
            episodes: s.episodes,
            success_rate: s.success_rate,
            mean_error_m: s.mean_error,
            worst_error_m: s.worst_error,
        })
        .collect();
    write_rows(&cfg.output_dir.join("summary.csv"), &shapes)?;
    let rows: Vec<EpisodeRow> = episodes
        .iter()
        .map(|e| EpisodeRow {
            shape: e.shape.to_string(),
            seed: e.seed,
            mean_error_m: e.mean_error,
            max_error_m: e.max_error,
            success: e.success,
            approach_steps: e.approach_steps,
        })
        .collect();
    write_rows(&cfg.output_dir.join("episodes.csv"), &rows)?;
    for s in &shapes {
        println!(
            "{:<10} success {:>5.1}%  mean {:.1} mm  worst {:.1} mm",
            s.shape,
            100.0 * s.success_rate,
            s.mean_error_m * 1e3,
            s.worst_error_m * 1e3
        );
    }
    if !a.no_mobility {
        let m = mobility_table(&chain, &tracker, &cfg.sim, MOBILITY_DISTANCE)?;
        write_rows(&cfg.output_dir.join("mobility.csv"), &m.iter().map(MobilityCsv::from).collect::<Vec<_>>())?;
        for r in &m {
            println!(
                "heading {:>5.1} deg: final distance {:.3} m, lateral deviation {:.3} m",
                r.direction_deg, r.final_distance, r.max_lateral_deviation
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MobilityCsv {
    direction_deg: f64,
    target_x: f64,
    target_y: f64,
    steps: usize,
    final_distance_m: f64,
    max_lateral_deviation_m: f64,
}

impl From<&manifold_kin::sim::MobilityRow> for MobilityCsv {
    fn from(r: &manifold_kin::sim::MobilityRow) -> Self {
        MobilityCsv {
            direction_deg: r.direction_deg,
            target_x: r.target[0],
            target_y: r.target[1],
            steps: r.steps,
            final_distance_m: r.final_distance,
            max_lateral_deviation_m: r.max_lateral_deviation,
        }
    }
}
