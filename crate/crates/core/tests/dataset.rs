use manifold_kin::dataset::*;
use manifold_kin::stats::{mann_whitney_greater, mean};
use manifold_kin::{Error, KinematicChain, Pose, Side};

fn small_dataset(chain: &KinematicChain, count: usize, seed: u64) -> Dataset {
    let opts = CurateOptions {
        target_count: count,
        seed,
        ..CurateOptions::default()
    };
    generate(chain, &CommandSpace::default(), &opts).unwrap()
}

#[test]
fn positions_are_uniform_in_the_boxes() {
    let space = CommandSpace::default();
    let s = sample_raw(&space, 10_000, 4).unwrap();
    for side in Side::BOTH {
        let b = if side == Side::Left { space.left_volume } else { space.right_volume };
        for axis in 0..3 {
            let xs: Vec<f64> = s.iter().map(|c| c.target(side).unwrap().position[axis]).collect();
            let width = b.max[axis] - b.min[axis];
            let se = width / 12f64.sqrt() / (xs.len() as f64).sqrt();
            assert!((mean(&xs) - b.center()[axis]).abs() < 3.0 * se, "{side:?} axis {axis}");
            assert!(xs.iter().all(|x| (b.min[axis]..=b.max[axis]).contains(x)));
        }
    }
    let alphas: Vec<f64> = s.iter().map(|c| c.alpha).collect();
    assert!(alphas.iter().all(|a| (0.1..=10.0).contains(a)));
}

#[test]
fn orientations_follow_the_uniform_so3_angle_law() {
    // P(angle > θ) = 1 − (θ − sin θ)/π for the Haar measure on SO(3).
    let theta = std::f64::consts::FRAC_PI_2;
    let expected = 1.0 - (theta - theta.sin()) / std::f64::consts::PI;
    let s = sample_raw(&CommandSpace::default(), 10_000, 8).unwrap();
    let big = s
        .iter()
        .filter(|c| c.left_target.unwrap().angle_to(&Pose::identity()) > theta)
        .count() as f64
        / s.len() as f64;
    assert!((big - expected).abs() < 0.02, "{big} vs {expected}");
}

#[test]
fn sampling_is_seed_deterministic() {
    let space = CommandSpace::default();
    assert_eq!(sample_raw(&space, 500, 3).unwrap(), sample_raw(&space, 500, 3).unwrap());
    assert_ne!(sample_raw(&space, 500, 3).unwrap(), sample_raw(&space, 500, 4).unwrap());
    // Prefixes agree: sample i depends only on (seed, i).
    assert_eq!(sample_raw(&space, 100, 3).unwrap()[..], sample_raw(&space, 500, 3).unwrap()[..100]);
}

#[test]
fn degenerate_space_is_rejected() {
    let mut space = CommandSpace::default();
    space.left_volume.max[0] = space.left_volume.min[0];
    space.right_volume = space.left_volume.mirrored_y();
    assert!(matches!(sample_raw(&space, 10, 0), Err(Error::Input(_))));
    assert!(matches!(sample_raw(&CommandSpace::default(), 0, 0), Err(Error::Input(_))));
}

#[test]
fn unfiltered_uniform_curation_preserves_marginals() {
    let chain = KinematicChain::default_humanoid();
    let raw = sample_raw(&CommandSpace::default(), 4000, 2).unwrap();
    let opts = CurateOptions {
        prune_threshold: f64::INFINITY,
        target_count: 2000,
        weighting: Weighting::Uniform,
        seed: 2,
        ..CurateOptions::default()
    };
    let d = curate(&chain, &raw, &opts).unwrap();
    assert_eq!(d.metadata.pruned_count, 0);
    assert_eq!(d.len(), 2000);
    let space = CommandSpace::default();
    for axis in 0..3 {
        let width = space.left_volume.max[axis] - space.left_volume.min[axis];
        let se = width / 12f64.sqrt() / 2000f64.sqrt();
        let xs: Vec<f64> = d.records.iter().map(|r| r.command.left_target.unwrap().position[axis]).collect();
        assert!((mean(&xs) - space.left_volume.center()[axis]).abs() < 3.5 * se);
    }
    let alphas: Vec<f64> = d.records.iter().map(|r| r.command.alpha).collect();
    assert!((mean(&alphas) - 5.05).abs() < 3.5 * 9.9 / 12f64.sqrt() / 2000f64.sqrt());
}

#[test]
fn unreachable_targets_leave_nothing() {
    let chain = KinematicChain::default_humanoid();
    let far = CommandSample {
        left_target: Some(Pose::from_translation(10.0, 0.2, 0.3)),
        right_target: Some(Pose::from_translation(10.0, -0.2, 0.3)),
        alpha: 1.0,
    };
    let opts = CurateOptions {
        target_count: 4,
        ..CurateOptions::default()
    };
    match curate(&chain, &[far; 20], &opts) {
        Err(Error::EmptyDataset { raw, pruned }) => assert_eq!((raw, pruned), (20, 20)),
        other => panic!("expected empty dataset, got {other:?}"),
    }
}

#[test]
fn curated_records_respect_threshold_and_counts() {
    let chain = KinematicChain::default_humanoid();
    let d = small_dataset(&chain, 500, 1);
    let m = &d.metadata;
    assert_eq!(m.raw_count, OVERSAMPLING * m.target_count);
    assert_eq!(m.raw_count, m.pruned_count + m.survivor_count);
    assert!(m.retained_count <= m.raw_count);
    assert_eq!(m.retained_count, d.len());
    for r in &d.records {
        assert!(r.ik_position_error <= 0.02);
        assert!(r.manipulability_left >= 0.0 && r.manipulability_right >= 0.0);
        assert!(chain.within_limits(&r.q_solution));
    }
}

#[test]
fn weighting_favours_manipulable_configurations() {
    let chain = KinematicChain::default_humanoid();
    let n = 5000;
    for seed in 0..10 {
        let raw = sample_raw(&CommandSpace::default(), OVERSAMPLING * n, 100 + seed).unwrap();
        let opts = CurateOptions::default();
        let pool = solve_commands(&chain, &raw, opts.prune_threshold, opts.manipulability, &opts.ik).unwrap();
        let manip = |idx: Vec<usize>| -> Vec<f64> {
            idx.iter().map(|&i| pool.survivors[i].selection_manipulability()).collect()
        };
        let weighted = manip(select(&pool.survivors, n, Weighting::Manipulability, seed));
        let uniform = manip(select(&pool.survivors, n, Weighting::Uniform, seed));
        assert!(mean(&weighted) > mean(&uniform));
        let p = mann_whitney_greater(&weighted, &uniform);
        assert!(p < 0.01, "seed {seed}: p = {p}");
    }
}

#[test]
fn mixture_branch_frequency() {
    let chain = KinematicChain::default_humanoid();
    let d = small_dataset(&chain, 200, 3);
    let space = CommandSpace::default();
    for beta in [0.0, 0.3, 1.0] {
        let draws = mixture_sample(&space, &d, beta, Perturbation::default(), 100_000, 5).unwrap();
        let frac = draws.iter().filter(|x| x.branch == Branch::Uniform).count() as f64 / draws.len() as f64;
        assert!((frac - beta).abs() <= 0.005, "beta {beta}: {frac}");
    }
}

#[test]
fn mixture_degenerate_cases() {
    let chain = KinematicChain::default_humanoid();
    let d = small_dataset(&chain, 200, 3);
    let space = CommandSpace::default();

    let all_uniform = mixture_sample(&space, &d, 1.0, Perturbation::default(), 300, 9).unwrap();
    let raw = sample_raw(&space, 300, 9).unwrap();
    assert!(all_uniform.iter().zip(&raw).all(|(m, r)| m.sample == *r && m.record.is_none()));

    let zero = Perturbation { position: 0.0, rotation: 0.0 };
    for draw in mixture_sample(&space, &d, 0.0, zero, 300, 9).unwrap() {
        assert_eq!(draw.branch, Branch::Prior);
        assert_eq!(draw.sample, d.records[draw.record.unwrap()].command);
    }

    let small = mixture_sample(&space, &d, 0.0, Perturbation::default(), 2000, 1).unwrap();
    let dp: Vec<f64> = small
        .iter()
        .map(|m| {
            let src = d.records[m.record.unwrap()].command.left_target.unwrap();
            (m.sample.left_target.unwrap().position - src.position).norm()
        })
        .collect();
    // Mean norm of a 3-D isotropic Gaussian is σ·2·sqrt(2/π).
    assert!((mean(&dp) - 0.01 * 1.5958).abs() < 0.0005);

    assert!(matches!(
        mixture_sample(&space, &d, 1.5, Perturbation::default(), 10, 0),
        Err(Error::Input(_))
    ));
}

#[test]
fn file_round_trip_is_exact() {
    let chain = KinematicChain::default_humanoid();
    let d = small_dataset(&chain, 1000, 6);
    assert_eq!(d.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.kmpd");
    write_dataset(&d, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, d);
    for (a, b) in back.records.iter().zip(&d.records) {
        let bits = |r: &DatasetRecord| r.q_solution.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(read_dataset_strict(&path, &chain).unwrap(), d);
}

#[test]
fn corrupt_files_are_rejected() {
    let chain = KinematicChain::default_humanoid();
    let d = small_dataset(&chain, 50, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.kmpd");
    write_dataset(&d, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.kmpd");
    std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(read_dataset(&cut), Err(Error::Format(_))));

    let mut flipped = bytes.clone();
    let k = flipped.len() - 40;
    flipped[k] ^= 0x10;
    let bad = dir.path().join("bad.kmpd");
    std::fs::write(&bad, &flipped).unwrap();
    assert!(matches!(read_dataset(&bad), Err(Error::Format(_))));

    let mut json: serde_json::Value = serde_json::from_str(KinematicChain::default_json()).unwrap();
    json["joints"][0]["upper_limit"] = serde_json::json!(1.4);
    let other = KinematicChain::from_json_str(&json.to_string()).unwrap();
    assert!(matches!(read_dataset_strict(&path, &other), Err(Error::Validation(_))));
}
