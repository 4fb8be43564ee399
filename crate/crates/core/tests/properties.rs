use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use proptest::prelude::*;

use teleop_core::baselines::{fingertip_map, joint_map, FingertipConfig, JointCorrespondence};
use teleop_core::empirical::{build_projection_matrix, MotionAssignment, SignedJoint};
use teleop_core::grasp::{parse_group, DatasetProvenance, Grasp, GraspDataset, GraspType};
use teleop_core::hand_model::{clamp_to_limits, forward_kinematics, HandModel, JointPose};
use teleop_core::ransac::{gram_schmidt, TieredScore};
use teleop_core::subspace::{
    project_from_subspace, project_to_subspace, teleop_map, MappingMethod, Provenance,
    ScalingFactors, TeleopMapping, TeleopPoint,
};

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn model(name: &str) -> HandModel {
    HandModel::load_validated(&data().join(format!("models/{name}.json"))).unwrap()
}

/// A mapping whose columns are signed indicators over disjoint joint sets,
/// like every mapping the empirical builder produces.
fn mapping_strategy() -> impl Strategy<Value = TeleopMapping> {
    (3usize..=24)
        .prop_flat_map(|dof| {
            (
                Just(dof),
                Just((0..dof).collect::<Vec<_>>()).prop_shuffle(),
                (0..=dof / 3, 1..=dof / 3, 1..=dof / 3),
                prop::collection::vec(prop::bool::ANY, dof),
                prop::collection::vec(-1.0..1.0f64, dof),
                prop::array::uniform3(0.05..20.0f64),
            )
        })
        .prop_map(|(dof, perm, (na, ns, ne), signs, origin, delta)| {
            let mut it = perm
                .into_iter()
                .zip(signs)
                .map(|(j, s)| SignedJoint::new(j, if s { 1.0 } else { -1.0 }));
            let spread: Vec<_> = it.by_ref().take(na).collect();
            let open: Vec<_> = it.by_ref().take(ns).collect();
            let curl: Vec<_> = it.by_ref().take(ne).collect();
            let empty_alpha = spread.is_empty();
            let assign = MotionAssignment {
                hand_id: "random".into(),
                spread,
                open,
                curl,
            };
            let a = build_projection_matrix(dof, &assign).unwrap();
            let mut scaling = ScalingFactors::from_delta(delta);
            if empty_alpha {
                scaling = scaling.with_zeroed(teleop_core::Axis::Alpha);
            }
            TeleopMapping {
                hand_id: "random".into(),
                origin: JointPose(origin),
                a,
                scaling,
                provenance: Provenance::new(MappingMethod::Empirical),
            }
        })
}

fn pose_for(m: &TeleopMapping) -> impl Strategy<Value = JointPose> {
    prop::collection::vec(-3.0..3.0f64, m.dof()).prop_map(JointPose)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chained_map_equals_composition(
        (master, q) in mapping_strategy().prop_flat_map(|m| { let p = pose_for(&m); (Just(m), p) }),
        slave in mapping_strategy(),
    ) {
        let (direct, psi) = teleop_map(&master, &slave, &q).unwrap();
        let psi2 = project_to_subspace(&master, &q).unwrap();
        let composed = project_from_subspace(&slave, &psi2).unwrap();
        for k in 0..3 {
            prop_assert!((psi.0[k] - psi2.0[k]).abs() <= 1e-12);
        }
        for (a, b) in direct.0.iter().zip(&composed.0) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn projecting_back_and_forth_is_idempotent(
        (m, q) in mapping_strategy().prop_flat_map(|m| { let p = pose_for(&m); (Just(m), p) }),
    ) {
        let psi = project_to_subspace(&m, &q).unwrap();
        let back = project_from_subspace(&m, &psi).unwrap();
        let psi2 = project_to_subspace(&m, &back).unwrap();
        for k in 0..3 {
            prop_assert!((psi.0[k] - psi2.0[k]).abs() <= 1e-9, "{:?} vs {:?}", psi, psi2);
        }
        let again = project_from_subspace(&m, &psi2).unwrap();
        for (a, b) in back.0.iter().zip(&again.0) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn inverse_scaling_cancels_on_live_axes(m in mapping_strategy()) {
        let s = m.scaling;
        for k in 0..3 {
            if s.delta[k] != 0.0 {
                prop_assert!((s.delta[k] * s.delta_star[k] - 1.0).abs() <= 1e-12);
            } else {
                prop_assert_eq!(s.delta_star[k], 0.0);
            }
        }
    }

    #[test]
    fn subspace_to_joints_is_affine(
        m in mapping_strategy(),
        a in prop::array::uniform3(-2.0..2.0f64),
        b in prop::array::uniform3(-2.0..2.0f64),
    ) {
        let mid = TeleopPoint([0, 1, 2].map(|k| 0.5 * (a[k] + b[k])));
        let qa = project_from_subspace(&m, &TeleopPoint(a)).unwrap();
        let qb = project_from_subspace(&m, &TeleopPoint(b)).unwrap();
        let qm = project_from_subspace(&m, &mid).unwrap();
        for i in 0..m.dof() {
            prop_assert!((qm.0[i] - 0.5 * (qa.0[i] + qb.0[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn mapping_document_round_trips_byte_identically(m in mapping_strategy()) {
        let text = m.to_json_string().unwrap();
        let back = TeleopMapping::from_json_str(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_json_string().unwrap(), text);
    }
}

fn hand_pose(model: &HandModel, spread: f64) -> impl Strategy<Value = JointPose> {
    let ranges: Vec<_> = model
        .joints
        .iter()
        .map(|j| {
            let pad = spread * (j.max - j.min);
            (j.min - pad)..(j.max + pad)
        })
        .collect();
    ranges.prop_map(JointPose)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn clamping_is_idempotent(q in hand_pose(&model("schunk_sdh"), 0.5)) {
        let m = model("schunk_sdh");
        let (once, flags) = clamp_to_limits(&m, &q).unwrap();
        let (twice, flags2) = clamp_to_limits(&m, &once).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(flags2.iter().all(|f| !f));
        prop_assert!(m.within_limits(&once, 0.0));
        for (i, f) in flags.iter().enumerate() {
            prop_assert_eq!(*f, once.0[i] != q.0[i]);
        }
    }

    #[test]
    fn kinematics_scale_linearly(q in hand_pose(&model("human_glove7"), 0.0), s in 0.2..5.0f64) {
        let m = model("human_glove7");
        let big = m.scaled(s);
        let a = forward_kinematics(&m, &q).unwrap();
        let b = forward_kinematics(&big, &q).unwrap();
        for (fa, fb) in a.fingers.iter().zip(&b.fingers) {
            for (pa, pb) in fa.points.iter().zip(&fb.points) {
                prop_assert!((pa.coords * s - pb.coords).norm() <= 1e-12 * s.max(1.0));
            }
        }
    }

    #[test]
    fn joint_mapping_onto_itself_is_idempotent(q in hand_pose(&model("schunk_sdh"), 0.3)) {
        let m = model("schunk_sdh");
        let corr = JointCorrespondence {
            master_hand: m.hand_id.clone(),
            slave_hand: m.hand_id.clone(),
            pairs: (0..m.dof).map(|i| [i, i]).collect(),
            slave_origin: None,
        };
        let (once, _) = joint_map(&corr, &q, &m).unwrap();
        let (twice, flags) = joint_map(&corr, &once, &m).unwrap();
        prop_assert_eq!(once, twice);
        prop_assert!(flags.iter().all(|f| !f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fingertip_residual_never_increases(q in hand_pose(&model("human_glove7"), 0.0)) {
        let master = model("human_glove7");
        let cfg = FingertipConfig::load(&data().join("fingertip/human_to_schunk_sdh.json")).unwrap();
        for slave in ["schunk_sdh", "two_finger_gripper"] {
            let cfg = if slave == "schunk_sdh" {
                cfg.clone()
            } else {
                FingertipConfig::load(&data().join("fingertip/human_to_two_finger_gripper.json")).unwrap()
            };
            let slave = model(slave);
            let r = fingertip_map(&cfg, &master, &q, &slave, None).unwrap();
            prop_assert!(r.trace.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.trace);
            prop_assert!(r.residuals.iter().all(|x| x.is_finite()));
            prop_assert!(slave.within_limits(&r.q, 0.0));
        }
    }
}

fn score_strategy() -> impl Strategy<Value = TieredScore> {
    (
        0u64..4,
        1u64..4,
        0u64..6,
        prop::sample::select(vec![0.0, 0.5, 1.0, 2.5]),
    )
        .prop_map(|(t1, t2, t3, t4)| TieredScore { t1, t2, t3, t4 })
}

/// Lexicographic oracle on a transformed key: bigger t1, smaller t2, bigger
/// t3, smaller t4 wins.
fn oracle(a: &TieredScore, b: &TieredScore) -> Ordering {
    let key = |s: &TieredScore| (s.t1 as i64, -(s.t2 as i64), s.t3 as i64, -s.t4);
    key(a).partial_cmp(&key(b)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn tiered_order_is_lexicographic_and_strict_weak(
        a in score_strategy(),
        b in score_strategy(),
        c in score_strategy(),
    ) {
        prop_assert_eq!(a.compare(&b), oracle(&a, &b));
        prop_assert_eq!(a.compare(&b), b.compare(&a).reverse());
        prop_assert_eq!(a.compare(&a), Ordering::Equal);
        if a.compare(&b) == Ordering::Less && b.compare(&c) == Ordering::Less {
            prop_assert_eq!(a.compare(&c), Ordering::Less);
        }
        // incomparability (equality here) is transitive too
        if a.compare(&b) == Ordering::Equal && b.compare(&c) == Ordering::Equal {
            prop_assert_eq!(a.compare(&c), Ordering::Equal);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn gram_schmidt_is_orthonormal_and_keeps_span(
        vs in (3usize..=24).prop_flat_map(|n| prop::array::uniform3(prop::collection::vec(-1.0..1.0f64, n))),
    ) {
        let Some(basis) = gram_schmidt(&vs) else {
            return Ok(());
        };
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot(&basis[i], &basis[j]) - want).abs() <= 1e-10);
            }
        }
        // every input lies in the span of the output, and the first output
        // points along the first input
        for v in &vs {
            let mut r = v.clone();
            for u in &basis {
                let c = dot(v, u);
                r.iter_mut().zip(u).for_each(|(ri, ui)| *ri -= c * ui);
            }
            prop_assert!(dot(&r, &r).sqrt() <= 1e-9 * dot(v, v).sqrt().max(1.0));
        }
        prop_assert!(dot(&vs[0], &basis[0]) > 0.0);
    }
}

fn grasps_strategy() -> impl Strategy<Value = Vec<Grasp>> {
    prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 3), 0.0..1.0f64), 1..40).prop_map(
        |v| {
            v.into_iter()
                .map(|(q, quality)| Grasp {
                    object_id: 1,
                    q: JointPose(q),
                    quality,
                    grasp_type: GraspType::Precision,
                    object_pose: [0.0, 0.0, 0.05],
                })
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn larger_threshold_keeps_a_subset(group in grasps_strategy(), x1 in 0.0..1.5f64, dx in 0.0..1.0f64) {
        let loose = parse_group(&group, x1);
        let strict = parse_group(&group, x1 + dx);
        prop_assert!(strict.len() <= loose.len());
        for g in &strict {
            prop_assert!(loose.contains(g));
        }
        let best = group.iter().map(|g| g.quality).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(strict[0].quality, best);
    }

    #[test]
    fn dataset_round_trips_byte_identically(group in grasps_strategy()) {
        let mut ds = GraspDataset::new("three", 3, DatasetProvenance { source: "sampled".into(), ..Default::default() });
        for g in group {
            ds.push(g).unwrap();
        }
        let text = ds.to_jsonl().unwrap();
        let back = GraspDataset::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_jsonl().unwrap(), text);
    }
}
