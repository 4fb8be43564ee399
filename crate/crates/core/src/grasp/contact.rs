//! Contact detection and the finger-closing simulation.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::objects::{GraspType, Solid};
use crate::hand_model::{finger_fk, HandKinematics, HandModel, JointPose};

/// A link segment closer than this to the object surface is in contact (meters).
pub const CONTACT_TOLERANCE: f64 = 1e-3;

/// Two contact normals oppose each other when their dot product is at most this.
pub const OPPOSING_DOT: f64 = -0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Contact {
    pub finger: usize,
    pub link: usize,
    /// True when the link is the last one of its finger.
    pub distal: bool,
    /// Point on the object surface.
    pub point: Point3<f64>,
    /// Outward surface normal of the object at `point`.
    pub normal: Vector3<f64>,
}

/// Why a candidate did not become a grasp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    ApertureExceeded,
    InitialCollision,
    TooFewContacts,
    NotOpposing,
    ContactPattern,
}

impl FailureKind {
    pub fn describe(self) -> &'static str {
        match self {
            FailureKind::ApertureExceeded => "aperture exceeded",
            FailureKind::InitialCollision => "initial collision",
            FailureKind::TooFewContacts => "fewer than two contacts",
            FailureKind::NotOpposing => "no opposing contacts",
            FailureKind::ContactPattern => "contact pattern does not match grasp type",
        }
    }
}

/// Contacts of every link within tolerance of the object, in finger/link order.
pub fn detect_contacts(model: &HandModel, kin: &HandKinematics, solid: &Solid) -> Vec<Contact> {
    let mut out = Vec::new();
    for (fi, fk) in kin.fingers.iter().enumerate() {
        let last = model.fingers[fi].links.len().saturating_sub(1);
        for li in 0..fk.link_count() {
            if let Some(c) = link_contact(solid, fk.segment(li)) {
                out.push(Contact {
                    finger: fi,
                    link: li,
                    distal: li == last,
                    point: c.0,
                    normal: c.1,
                });
            }
        }
    }
    out
}

fn link_contact(
    solid: &Solid,
    (a, b): (Point3<f64>, Point3<f64>),
) -> Option<(Point3<f64>, Vector3<f64>)> {
    let (d, t) = solid.segment_distance(&a, &b);
    if d > CONTACT_TOLERANCE {
        return None;
    }
    let p = a + (b - a) * t;
    let q = solid.query(&p);
    Some((p - q.normal * q.distance, q.normal))
}

/// Checks the contact set against the grasp-type pattern.
pub fn classify_contacts(contacts: &[Contact], grasp_type: GraspType) -> Result<(), FailureKind> {
    if contacts.len() < 2 {
        return Err(FailureKind::TooFewContacts);
    }
    let opposing = contacts.iter().enumerate().any(|(i, a)| {
        contacts[i + 1..]
            .iter()
            .any(|b| a.finger != b.finger && a.normal.dot(&b.normal) <= OPPOSING_DOT)
    });
    if !opposing {
        return Err(FailureKind::NotOpposing);
    }
    let pattern_ok = match grasp_type {
        GraspType::Precision => contacts.iter().all(|c| c.distal),
        GraspType::Power => contacts.iter().any(|c| !c.distal),
    };
    if pattern_ok {
        Ok(())
    } else {
        Err(FailureKind::ContactPattern)
    }
}

/// Per-model data the closing simulation needs.
#[derive(Debug, Clone)]
pub struct Closer {
    /// Closing direction (+1 or -1) of each flexion joint; `None` for joints
    /// that do not move the fingertips toward the palm axis.
    pub closing_sign: Vec<Option<f64>>,
    /// For each joint, `(finger, first link)` pairs of the links it moves.
    moved_links: Vec<Vec<(usize, usize)>>,
    pub step: f64,
}

fn radial_sum(model: &HandModel, q: &[f64]) -> (f64, Vec<Point3<f64>>) {
    let tips: Vec<Point3<f64>> = model
        .fingers
        .iter()
        .map(|f| finger_fk(f, q).fingertip())
        .collect();
    let r = tips.iter().map(|p| (p.x * p.x + p.y * p.y).sqrt()).sum();
    (r, tips)
}

impl Closer {
    /// Flexion joints are identified at the neutral pose: a joint closes in
    /// the direction that pulls the fingertips toward the palm approach axis.
    /// Joints whose motion is mostly tangential (spread, roll) stay fixed.
    pub fn new(model: &HandModel, step: f64) -> Self {
        let neutral = model.neutral_pose().0;
        let h = 1e-5;
        let mut closing_sign = Vec::with_capacity(model.dof);
        for j in 0..model.dof {
            let mut plus = neutral.clone();
            let mut minus = neutral.clone();
            plus[j] += h;
            minus[j] -= h;
            let (rp, tp) = radial_sum(model, &plus);
            let (rm, tm) = radial_sum(model, &minus);
            let motion: f64 = tp.iter().zip(&tm).map(|(a, b)| (a - b).norm()).sum();
            let dr = rp - rm;
            let flexion = motion > 1e-12 && dr.abs() >= 0.3 * motion;
            closing_sign.push(flexion.then(|| -dr.signum()));
        }
        let mut moved_links = vec![Vec::new(); model.dof];
        for (fi, finger) in model.fingers.iter().enumerate() {
            for (li, link) in finger.links.iter().enumerate() {
                let entry = &mut moved_links[link.joint_index];
                if !entry.iter().any(|&(f, _)| f == fi) {
                    entry.push((fi, li));
                }
            }
        }
        Self {
            closing_sign,
            moved_links,
            step,
        }
    }

    fn min_clearance(&self, model: &HandModel, q: &[f64], joint: usize, solid: &Solid) -> f64 {
        let mut best = f64::INFINITY;
        for &(fi, first) in &self.moved_links[joint] {
            let fk = finger_fk(&model.fingers[fi], q);
            for li in first..fk.link_count() {
                let (a, b) = fk.segment(li);
                best = best.min(solid.segment_distance(&a, &b).0);
            }
        }
        best
    }

    fn all_clearances(model: &HandModel, q: &[f64], solid: &Solid) -> Vec<Vec<f64>> {
        model
            .fingers
            .iter()
            .map(|f| {
                let fk = finger_fk(f, q);
                (0..fk.link_count())
                    .map(|li| {
                        let (a, b) = fk.segment(li);
                        solid.segment_distance(&a, &b).0
                    })
                    .collect()
            })
            .collect()
    }

    fn freeze_touching(&self, model: &HandModel, q: &[f64], solid: &Solid, active: &mut [bool]) {
        for (fi, clear) in Self::all_clearances(model, q, solid).iter().enumerate() {
            for (li, &d) in clear.iter().enumerate() {
                if d <= CONTACT_TOLERANCE {
                    for link in &model.fingers[fi].links[..=li] {
                        active[link.joint_index] = false;
                    }
                }
            }
        }
    }

    /// Closes the flexion joints from `pre` until every one is blocked by
    /// contact or its limit. A link touching the object freezes its own joint
    /// and all joints proximal to it; distal joints keep closing.
    pub fn close(
        &self,
        model: &HandModel,
        pre: &JointPose,
        solid: &Solid,
    ) -> Result<JointPose, FailureKind> {
        let mut q = pre.0.clone();
        let clear = Self::all_clearances(model, &q, solid);
        if clear.iter().flatten().any(|&d| d < 0.0) {
            return Err(FailureKind::InitialCollision);
        }
        let mut active: Vec<bool> = self.closing_sign.iter().map(Option::is_some).collect();
        self.freeze_touching(model, &q, solid, &mut active);
        let max_rounds = model
            .joints
            .iter()
            .map(|j| ((j.max - j.min) / self.step).ceil() as usize + 1)
            .max()
            .unwrap_or(0);
        for _ in 0..max_rounds {
            if !active.iter().any(|&a| a) {
                break;
            }
            for j in 0..model.dof {
                if !active[j] {
                    continue;
                }
                let sign = self.closing_sign[j].expect("active joints are flexion joints");
                let spec = &model.joints[j];
                let start = q[j];
                let target = (start + sign * self.step).clamp(spec.min, spec.max);
                if target == start {
                    active[j] = false;
                    continue;
                }
                q[j] = target;
                if self.min_clearance(model, &q, j, solid) < 0.0 {
                    // Largest collision-free fraction of the step.
                    let (mut ok, mut bad) = (0.0_f64, 1.0_f64);
                    for _ in 0..16 {
                        let mid = 0.5 * (ok + bad);
                        q[j] = start + mid * (target - start);
                        if self.min_clearance(model, &q, j, solid) < 0.0 {
                            bad = mid;
                        } else {
                            ok = mid;
                        }
                    }
                    q[j] = start + ok * (target - start);
                    active[j] = false;
                } else if target == spec.min || target == spec.max {
                    active[j] = false;
                }
                self.freeze_touching(model, &q, solid, &mut active);
            }
        }
        Ok(JointPose(q))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grasp::objects::Primitive;
    use crate::hand_model::{forward_kinematics, BasePose, FingerChain, JointSpec, LinkSpec};

    /// Two single-link fingers at x = ±0.02 pointing along +z.
    pub(crate) fn jaw() -> HandModel {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let finger = |name: &str, x: f64, joint: usize, axis_y: f64| FingerChain {
            name: name.into(),
            base_pose: BasePose {
                pos: [x, 0.0, 0.0],
                quat: [s, 0.0, -s, 0.0],
            },
            links: vec![LinkSpec {
                length: 0.04,
                joint_index: joint,
                axis: [0.0, axis_y, 0.0],
            }],
        };
        HandModel {
            hand_id: "jaw".into(),
            dof: 2,
            scale: 1.0,
            joints: vec![
                JointSpec {
                    name: "left".into(),
                    min: -0.3,
                    max: 0.3,
                },
                JointSpec {
                    name: "right".into(),
                    min: -0.3,
                    max: 0.3,
                },
            ],
            fingers: vec![finger("left", -0.02, 0, 1.0), finger("right", 0.02, 1, 1.0)],
        }
    }

    fn plate(width: f64) -> Solid {
        Solid {
            primitive: Primitive::Box,
            half: Vector3::new(width / 2.0, 0.05, 0.005),
            center: Point3::new(0.0, 0.0, 0.035),
        }
    }

    #[test]
    fn both_jaw_joints_are_flexion_with_opposite_signs() {
        let closer = Closer::new(&jaw(), 0.02);
        let s0 = closer.closing_sign[0].unwrap();
        let s1 = closer.closing_sign[1].unwrap();
        assert_eq!(s0, -s1);
    }

    #[test]
    fn jaw_closes_onto_plate() {
        let model = jaw();
        let closer = Closer::new(&model, 0.02);
        let solid = plate(0.03);
        let q = closer.close(&model, &model.neutral_pose(), &solid).unwrap();
        let kin = forward_kinematics(&model, &q).unwrap();
        let contacts = detect_contacts(&model, &kin, &solid);
        assert_eq!(contacts.len(), 2);
        assert!(contacts[0].normal.dot(&contacts[1].normal) < -0.9);
        assert_eq!(classify_contacts(&contacts, GraspType::Precision), Ok(()));
        assert_eq!(
            classify_contacts(&contacts, GraspType::Power),
            Err(FailureKind::ContactPattern)
        );
        assert!(model.within_limits(&q, 0.0));
    }

    #[test]
    fn penetrating_start_is_rejected() {
        let model = jaw();
        let closer = Closer::new(&model, 0.02);
        assert_eq!(
            closer.close(&model, &model.neutral_pose(), &plate(0.05)),
            Err(FailureKind::InitialCollision)
        );
    }

    #[test]
    fn missing_object_gives_no_contacts() {
        let model = jaw();
        let closer = Closer::new(&model, 0.02);
        let mut solid = plate(0.01);
        solid.center.z = 0.5;
        let q = closer.close(&model, &model.neutral_pose(), &solid).unwrap();
        let kin = forward_kinematics(&model, &q).unwrap();
        let contacts = detect_contacts(&model, &kin, &solid);
        assert_eq!(
            classify_contacts(&contacts, GraspType::Precision),
            Err(FailureKind::TooFewContacts)
        );
        // every joint went to its closing limit
        assert!(q.0.iter().all(|v| (v.abs() - 0.3).abs() < 1e-12));
    }
}
