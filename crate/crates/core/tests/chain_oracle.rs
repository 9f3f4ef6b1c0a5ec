//! Forward kinematics and Jacobians checked against a from-scratch
//! homogeneous-matrix implementation that reads the asset JSON directly.

use std::collections::HashMap;

use manifold_kin::chain::ManipulabilityMode;
use manifold_kin::{KinematicChain, Pose, Side};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Mat4 = [[f64; 4]; 4];

fn matmul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> [[f64; 3]; 3] {
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

// Rodrigues
fn axis_angle_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn homogeneous(r: [[f64; 3]; 3], p: [f64; 3]) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = p[i];
    }
    m[3][3] = 1.0;
    m
}

fn arr<const N: usize>(v: &Value) -> [f64; N] {
    let a = v.as_array().unwrap();
    std::array::from_fn(|i| a[i].as_f64().unwrap())
}

fn origin(v: &Value) -> Mat4 {
    let p = arr::<3>(&v["position"]);
    let q = arr::<4>(&v["orientation"]);
    homogeneous(quat_matrix(q[0], q[1], q[2], q[3]), p)
}

/// Link name → 4x4 pose in the root frame, computed from the raw JSON.
fn oracle_fk(json: &Value, q: &[f64]) -> HashMap<String, Mat4> {
    let root = json["root"].as_str().unwrap().to_string();
    let mut poses = HashMap::new();
    poses.insert(root, homogeneous(quat_matrix(1.0, 0.0, 0.0, 0.0), [0.0; 3]));
    let joints = json["joints"].as_array().unwrap();
    let fixed = json["fixed_frames"].as_array().unwrap();
    // Repeated sweeps; order in the file is not assumed.
    loop {
        let before = poses.len();
        for (i, j) in joints.iter().enumerate() {
            let parent = j["parent"].as_str().unwrap();
            let child = j["child"].as_str().unwrap();
            if poses.contains_key(child) {
                continue;
            }
            if let Some(p) = poses.get(parent).copied() {
                let local = matmul(
                    &origin(&j["origin"]),
                    &homogeneous(axis_angle_matrix(arr::<3>(&j["axis"]), q[i]), [0.0; 3]),
                );
                poses.insert(child.to_string(), matmul(&p, &local));
            }
        }
        for f in fixed {
            let parent = f["parent"].as_str().unwrap();
            let name = f["name"].as_str().unwrap();
            if poses.contains_key(name) {
                continue;
            }
            if let Some(p) = poses.get(parent).copied() {
                poses.insert(name.to_string(), matmul(&p, &origin(&f["origin"])));
            }
        }
        if poses.len() == before {
            break;
        }
    }
    poses
}

fn assert_pose_matches(pose: &Pose, m: &Mat4, tol: f64) {
    for i in 0..3 {
        assert!((pose.position[i] - m[i][3]).abs() < tol, "position {i}: {} vs {}", pose.position[i], m[i][3]);
    }
    let r = pose.orientation.to_rotation_matrix();
    for i in 0..3 {
        for j in 0..3 {
            assert!((r[(i, j)] - m[i][j]).abs() < tol);
        }
    }
}

fn random_config(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..chain.dof())
        .map(|i| rng.random_range(chain.lower_limits()[i]..=chain.upper_limits()[i]))
        .collect()
}

#[test]
fn default_posture_matches_transform_composition() {
    let chain = KinematicChain::default_humanoid();
    let json: Value = serde_json::from_str(KinematicChain::default_json()).unwrap();
    let q = chain.default_config();
    let fk = chain.forward_kinematics(&q, &Pose::identity());
    let oracle = oracle_fk(&json, &q);
    for side in Side::BOTH {
        let link = chain.end_effector_link(side);
        assert_pose_matches(fk.ee(side), &oracle[link], 1e-12);
    }
    assert_eq!(fk.all_links.len(), oracle.len());
    for (name, pose) in &fk.all_links {
        assert_pose_matches(pose, &oracle[name], 1e-12);
    }
}

#[test]
fn random_postures_match_transform_composition() {
    let chain = KinematicChain::default_humanoid();
    let json: Value = serde_json::from_str(KinematicChain::default_json()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let q = random_config(&chain, &mut rng);
        let fk = chain.forward_kinematics(&q, &Pose::identity());
        let oracle = oracle_fk(&json, &q);
        for side in Side::BOTH {
            assert_pose_matches(fk.ee(side), &oracle[chain.end_effector_link(side)], 1e-12);
        }
    }
}

#[test]
fn base_translation_shifts_end_effectors() {
    let chain = KinematicChain::default_humanoid();
    let q = chain.default_config();
    let a = chain.forward_kinematics(&q, &Pose::identity());
    let b = chain.forward_kinematics(&q, &Pose::from_translation(1.0, 0.0, 0.0));
    for side in Side::BOTH {
        let d = b.ee(side).position - a.ee(side).position;
        assert!((d - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }
}

#[test]
fn base_yaw_rotates_end_effectors() {
    let chain = KinematicChain::default_humanoid();
    let q = chain.default_config();
    let a = chain.forward_kinematics(&q, &Pose::identity());
    let b = chain.forward_kinematics(&q, &Pose::planar(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2));
    for side in Side::BOTH {
        let p = a.ee(side).position;
        let rotated = Vector3::new(-p.y, p.x, p.z);
        assert!((b.ee(side).position - rotated).norm() < 1e-12);
    }
}

/// Central differences of position and of the rotation vector log(R+ R-ᵀ).
fn fd_jacobian(chain: &KinematicChain, q: &[f64], side: Side, h: f64) -> nalgebra::DMatrix<f64> {
    let mut j = nalgebra::DMatrix::zeros(6, chain.dof());
    for c in 0..chain.dof() {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[c] += h;
        qm[c] -= h;
        let p = chain.ee_pose(&qp, side);
        let m = chain.ee_pose(&qm, side);
        let dp = (p.position - m.position) / (2.0 * h);
        let dr = (p.orientation * m.orientation.inverse()).scaled_axis() / (2.0 * h);
        for r in 0..3 {
            j[(r, c)] = dp[r];
            j[(3 + r, c)] = dr[r];
        }
    }
    j
}

#[test]
fn jacobian_matches_finite_differences() {
    let chain = KinematicChain::default_humanoid();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = random_config(&chain, &mut rng);
        for side in Side::BOTH {
            let analytic = chain.geometric_jacobian(&q, side);
            let numeric = fd_jacobian(&chain, &q, side, 1e-6);
            worst = worst.max((analytic - numeric).amax());
        }
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

#[test]
fn jacobian_column_structure() {
    let chain = KinematicChain::default_humanoid();
    let q = chain.default_config();
    for side in Side::BOTH {
        let j = chain.geometric_jacobian(&q, side);
        for &c in chain.groups().arm(side.other()) {
            assert!(j.column(c).iter().all(|v| *v == 0.0));
        }
        let fd = fd_jacobian(&chain, &q, side, 1e-6);
        for &c in &chain.groups().waist {
            assert!(fd.column(c).norm() > 1e-3);
            assert!(j.column(c).norm() > 1e-3);
        }
    }
}

#[test]
fn straight_arm_is_near_singular() {
    let chain = KinematicChain::default_humanoid();
    let q0 = chain.default_config();
    for side in Side::BOTH {
        let elbow = chain.groups().arm(side)[3];
        let mut straight = q0.to_vec();
        straight[elbow] = 0.0;
        for mode in [ManipulabilityMode::Position, ManipulabilityMode::Full] {
            let bent = chain.arm_manipulability(&q0, side, mode);
            let flat = chain.arm_manipulability(&straight, side, mode);
            assert!(bent > 0.0);
            assert!(flat < 1e-3 * bent, "{mode:?}: {flat} vs {bent}");
        }
    }
}

fn arb_pose() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-3.0..3.0f64),
        prop::array::uniform3(-1.0..1.0f64),
        0.0..std::f64::consts::PI,
    )
        .prop_filter("axis", |(_, a, _)| a.iter().map(|v| v * v).sum::<f64>() > 1e-2)
        .prop_map(|(p, a, angle)| {
            let axis = nalgebra::Unit::new_normalize(Vector3::from(a));
            Pose::new(Vector3::from(p), UnitQuaternion::from_axis_angle(&axis, angle))
        })
}

fn arb_config() -> impl Strategy<Value = Vec<f64>> {
    let chain = KinematicChain::default_humanoid();
    let ranges: Vec<_> = (0..chain.dof())
        .map(|i| chain.lower_limits()[i]..=chain.upper_limits()[i])
        .collect();
    ranges
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fk_is_rigid_equivariant(q in arb_config(), g in arb_pose(), base in arb_pose()) {
        let chain = KinematicChain::default_humanoid();
        let lhs = chain.forward_kinematics(&q, &g.compose(&base));
        let rhs = chain.forward_kinematics(&q, &base);
        for side in Side::BOTH {
            let expected = g.compose(rhs.ee(side));
            let got = lhs.ee(side);
            prop_assert!((expected.position - got.position).amax() < 1e-9);
            let (a, b) = (expected.wxyz(), got.wxyz());
            for i in 0..4 {
                prop_assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn manipulability_is_nonnegative(q in arb_config()) {
        let chain = KinematicChain::default_humanoid();
        for side in Side::BOTH {
            let j = chain.geometric_jacobian(&q, side);
            prop_assert!(manifold_kin::manipulability(&j) >= 0.0);
            prop_assert!(chain.arm_manipulability(&q, side, ManipulabilityMode::Full) >= 0.0);
        }
    }

    #[test]
    fn clamp_is_idempotent(q in prop::collection::vec(-5.0..5.0f64, 17)) {
        let chain = KinematicChain::default_humanoid();
        let once = chain.clamp_to_limits(&q);
        prop_assert!(chain.within_limits(&once));
        let twice = chain.clamp_to_limits(&once);
        prop_assert_eq!(once, twice);
    }
}
