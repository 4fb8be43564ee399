//! Parametric articulated hands: a rigid palm carrying serial revolute-chain
//! fingers. Angles are radians, lengths meters, and the palm approach
//! direction is +z of the palm frame.
//!
//! Each link rotates about its `axis` (expressed in the parent frame) by the
//! angle of its joint and then extends `length` along its local +x. Several
//! links may share one joint to express mechanical coupling.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::jsonio;

pub const SCHEMA: &str = "hand-model/1";

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub length: f64,
    pub joint_index: usize,
    pub axis: [f64; 3],
}

/// Rigid placement of a finger base in the palm frame. `quat` is `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePose {
    pub pos: [f64; 3],
    pub quat: [f64; 4],
}

impl BasePose {
    pub fn isometry(&self) -> Isometry3<f64> {
        let [w, x, y, z] = self.quat;
        Isometry3::from_parts(
            Translation3::new(self.pos[0], self.pos[1], self.pos[2]),
            UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerChain {
    pub name: String,
    pub base_pose: BasePose,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandModel {
    pub hand_id: String,
    pub dof: usize,
    pub scale: f64,
    pub joints: Vec<JointSpec>,
    pub fingers: Vec<FingerChain>,
}

/// A joint-space pose, one angle per joint of the owning hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointPose(pub Vec<f64>);

impl JointPose {
    pub fn new(q: Vec<f64>) -> Self {
        Self(q)
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn distance(&self, other: &JointPose) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for JointPose {
    fn from(q: Vec<f64>) -> Self {
        Self(q)
    }
}

/// One failed model invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Lists every broken invariant of `model`; an empty list means it is well formed.
pub fn validate_model(model: &HandModel) -> Vec<Violation> {
    let mut out = Vec::new();
    if model.dof == 0 {
        out.push(Violation::new("dof", "must be positive"));
    }
    if model.dof != model.joints.len() {
        out.push(Violation::new(
            "dof",
            format!("must equal number of joints ({})", model.joints.len()),
        ));
    }
    if !(model.scale.is_finite() && model.scale > 0.0) {
        out.push(Violation::new("scale", "must be finite and > 0"));
    }
    let mut names = HashSet::new();
    for (i, j) in model.joints.iter().enumerate() {
        let field = format!("joints[{i}]");
        if !names.insert(j.name.as_str()) {
            out.push(Violation::new(
                format!("{field}.name"),
                format!("duplicate joint name \"{}\"", j.name),
            ));
        }
        if !(j.min.is_finite() && j.max.is_finite()) {
            out.push(Violation::new(field.clone(), "limits must be finite"));
        } else if j.min > j.max {
            out.push(Violation::new(
                field.clone(),
                format!("min ({}) > max ({}) for joint \"{}\"", j.min, j.max, j.name),
            ));
        }
    }
    let mut referenced = vec![false; model.joints.len()];
    for (fi, finger) in model.fingers.iter().enumerate() {
        let field = format!("fingers[{fi}]");
        let bp = &finger.base_pose;
        if !bp.pos.iter().chain(bp.quat.iter()).all(|v| v.is_finite()) {
            out.push(Violation::new(
                format!("{field}.base_pose"),
                "must be finite",
            ));
        } else {
            let qn = bp.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > UNIT_TOL {
                out.push(Violation::new(
                    format!("{field}.base_pose.quat"),
                    format!("must have unit norm (found {qn})"),
                ));
            }
        }
        if finger.links.is_empty() {
            out.push(Violation::new(format!("{field}.links"), "must be nonempty"));
        }
        for (li, link) in finger.links.iter().enumerate() {
            let lf = format!("{field}.links[{li}]");
            if !(link.length.is_finite() && link.length > 0.0) {
                out.push(Violation::new(format!("{lf}.length"), "must be > 0"));
            }
            if link.joint_index >= model.joints.len() {
                out.push(Violation::new(
                    format!("{lf}.joint_index"),
                    format!(
                        "index {} out of range for {} joints",
                        link.joint_index,
                        model.joints.len()
                    ),
                ));
            } else {
                referenced[link.joint_index] = true;
            }
            let an = norm3(&link.axis);
            if !an.is_finite() || (an - 1.0).abs() > UNIT_TOL {
                out.push(Violation::new(
                    format!("{lf}.axis"),
                    format!("must have unit norm (found {an})"),
                ));
            }
        }
    }
    for (i, r) in referenced.iter().enumerate() {
        if !r {
            out.push(Violation::new(
                format!("joints[{i}]"),
                "not referenced by any link",
            ));
        }
    }
    out
}

impl HandModel {
    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, SCHEMA)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    /// Loads and rejects models that break any invariant.
    pub fn load_validated(path: &Path) -> Result<Self> {
        let model = Self::load(path)?;
        let violations = validate_model(&model);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Invalid(format!(
                "{}: {}",
                path.display(),
                msg.join("; ")
            )));
        }
        Ok(model)
    }

    pub fn check_pose(&self, pose: &JointPose) -> Result<()> {
        check_len("joint pose", self.dof, pose.len())?;
        check_finite("joint pose", pose.as_slice())
    }

    pub fn lower(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.min).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.max).collect()
    }

    pub fn within_limits(&self, pose: &JointPose, tol: f64) -> bool {
        pose.len() == self.dof
            && pose
                .0
                .iter()
                .zip(&self.joints)
                .all(|(q, j)| *q >= j.min - tol && *q <= j.max + tol)
    }

    /// The all-zero pose pushed into the joint limits.
    pub fn neutral_pose(&self) -> JointPose {
        JointPose(
            self.joints
                .iter()
                .map(|j| 0.0_f64.clamp(j.min, j.max))
                .collect(),
        )
    }

    pub fn finger_index(&self, name: &str) -> Option<usize> {
        self.fingers.iter().position(|f| f.name == name)
    }

    /// Joint indices driving any link of finger `finger`, in first-use order.
    pub fn finger_joints(&self, finger: usize) -> Vec<usize> {
        let mut seen = Vec::new();
        for link in &self.fingers[finger].links {
            if !seen.contains(&link.joint_index) {
                seen.push(link.joint_index);
            }
        }
        seen
    }

    /// Copy of the model with every link length and finger base offset multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> HandModel {
        let mut out = self.clone();
        out.scale *= factor;
        for finger in &mut out.fingers {
            for p in &mut finger.base_pose.pos {
                *p *= factor;
            }
            for link in &mut finger.links {
                link.length *= factor;
            }
        }
        out
    }
}

/// Forward kinematics of one finger.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerKinematics {
    pub name: String,
    /// Frame of each link after its joint rotation; origin at the link start,
    /// local +x along the link.
    pub link_frames: Vec<Isometry3<f64>>,
    /// Finger base followed by the end point of every link.
    pub points: Vec<Point3<f64>>,
}

impl FingerKinematics {
    pub fn fingertip(&self) -> Point3<f64> {
        *self
            .points
            .last()
            .expect("finger has at least its base point")
    }

    /// Start and end point of link `i`.
    pub fn segment(&self, i: usize) -> (Point3<f64>, Point3<f64>) {
        (self.points[i], self.points[i + 1])
    }

    pub fn link_count(&self) -> usize {
        self.link_frames.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandKinematics {
    pub fingers: Vec<FingerKinematics>,
}

impl HandKinematics {
    pub fn fingertips(&self) -> Vec<Point3<f64>> {
        self.fingers.iter().map(|f| f.fingertip()).collect()
    }
}

fn link_rotation(link: &LinkSpec, angle: f64) -> UnitQuaternion<f64> {
    let axis = Unit::new_normalize(Vector3::new(link.axis[0], link.axis[1], link.axis[2]));
    UnitQuaternion::from_axis_angle(&axis, angle)
}

pub(crate) fn finger_fk(finger: &FingerChain, q: &[f64]) -> FingerKinematics {
    let mut current = finger.base_pose.isometry();
    let mut frames = Vec::with_capacity(finger.links.len());
    let mut points = Vec::with_capacity(finger.links.len() + 1);
    points.push(Point3::from(current.translation.vector));
    for link in &finger.links {
        let rot = link_rotation(link, q[link.joint_index]);
        let frame = current * Isometry3::from_parts(Translation3::identity(), rot);
        current = frame * Translation3::new(link.length, 0.0, 0.0);
        frames.push(frame);
        points.push(Point3::from(current.translation.vector));
    }
    FingerKinematics {
        name: finger.name.clone(),
        link_frames: frames,
        points,
    }
}

/// Per-finger link frames and fingertip positions in the palm frame.
pub fn forward_kinematics(model: &HandModel, pose: &JointPose) -> Result<HandKinematics> {
    model.check_pose(pose)?;
    Ok(HandKinematics {
        fingers: model
            .fingers
            .iter()
            .map(|f| finger_fk(f, &pose.0))
            .collect(),
    })
}

/// Positional Jacobian of a finger's tip: `dof` columns of 3-vectors.
pub(crate) fn fingertip_jacobian(
    finger: &FingerChain,
    fk: &FingerKinematics,
    dof: usize,
) -> Vec<Vector3<f64>> {
    let tip = fk.fingertip();
    let mut cols = vec![Vector3::zeros(); dof];
    for (link, frame) in finger.links.iter().zip(&fk.link_frames) {
        let axis = frame.rotation * Vector3::new(link.axis[0], link.axis[1], link.axis[2]);
        let lever = tip - Point3::from(frame.translation.vector);
        cols[link.joint_index] += axis.cross(&lever);
    }
    cols
}

/// Clamps every component into its joint range and flags the ones that moved.
/// NaN components are rejected.
pub fn clamp_to_limits(model: &HandModel, pose: &JointPose) -> Result<(JointPose, Vec<bool>)> {
    check_len("joint pose", model.dof, pose.len())?;
    if pose.0.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("joint pose (NaN)"));
    }
    let mut flags = Vec::with_capacity(pose.len());
    let clamped = pose
        .0
        .iter()
        .zip(&model.joints)
        .map(|(&q, j)| {
            let c = q.clamp(j.min, j.max);
            flags.push(c != q);
            c
        })
        .collect();
    Ok((JointPose(clamped), flags))
}
