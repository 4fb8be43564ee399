//! Mappings authored by hand: a person declares which joints spread, open and
//! curl the hand, picks an origin pose, and demonstrates the kinematic extremes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand_model::{HandModel, JointPose};
use crate::jsonio;
use crate::subspace::{
    compute_scaling, Axis, MappingMethod, ProjectionMatrix, Provenance, ScalingFactors,
    TeleopMapping,
};

pub const ASSIGNMENT_SCHEMA: &str = "motion-assignment/1";
pub const EXTREMA_SCHEMA: &str = "extrema-poses/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignedJoint {
    pub joint: usize,
    /// +1 if the joint increases while the motion increases, −1 otherwise.
    pub sign: f64,
}

impl SignedJoint {
    pub fn new(joint: usize, sign: f64) -> Self {
        Self { joint, sign }
    }
}

/// Winner-take-all assignment of joints to the three hand motions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionAssignment {
    pub hand_id: String,
    pub spread: Vec<SignedJoint>,
    pub open: Vec<SignedJoint>,
    pub curl: Vec<SignedJoint>,
}

impl MotionAssignment {
    pub fn set(&self, axis: Axis) -> &[SignedJoint] {
        match axis {
            Axis::Alpha => &self.spread,
            Axis::Sigma => &self.open,
            Axis::Epsilon => &self.curl,
        }
    }

    /// Disjointness, index range and sign checks.
    pub fn validate(&self, dof: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for axis in Axis::ALL {
            for sj in self.set(axis) {
                if sj.joint >= dof {
                    return Err(Error::Invalid(format!(
                        "joint index {} out of range for {dof} joints",
                        sj.joint
                    )));
                }
                if sj.sign != 1.0 && sj.sign != -1.0 {
                    return Err(Error::Invalid(format!(
                        "joint {}: sign must be +1 or -1, got {}",
                        sj.joint, sj.sign
                    )));
                }
                if !seen.insert(sj.joint) {
                    return Err(Error::Invalid(format!(
                        "joint {} contributes to more than one motion",
                        sj.joint
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, ASSIGNMENT_SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, ASSIGNMENT_SCHEMA)
    }
}

/// Demonstration poses per axis. The optional `origin` carries the neutral
/// pose captured alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtremaPoses {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<JointPose>,
    pub alpha: Vec<JointPose>,
    pub sigma: Vec<JointPose>,
    pub epsilon: Vec<JointPose>,
}

impl ExtremaPoses {
    pub fn for_axis(&self, axis: Axis) -> &[JointPose] {
        match axis {
            Axis::Alpha => &self.alpha,
            Axis::Sigma => &self.sigma,
            Axis::Epsilon => &self.epsilon,
        }
    }

    pub fn pooled(&self) -> Vec<JointPose> {
        Axis::ALL
            .iter()
            .flat_map(|a| self.for_axis(*a).iter().cloned())
            .collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, EXTREMA_SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, EXTREMA_SCHEMA)
    }
}

/// Signed indicator columns normalized to unit length; an empty motion gives a zero column.
pub fn build_projection_matrix(dof: usize, assign: &MotionAssignment) -> Result<ProjectionMatrix> {
    assign.validate(dof)?;
    let column = |axis: Axis| {
        let mut col = vec![0.0; dof];
        let set = assign.set(axis);
        if set.is_empty() {
            return col;
        }
        let norm = (set.len() as f64).sqrt();
        for sj in set {
            col[sj.joint] = sj.sign / norm;
        }
        col
    };
    Ok(ProjectionMatrix::from_columns([
        column(Axis::Alpha),
        column(Axis::Sigma),
        column(Axis::Epsilon),
    ]))
}

/// Builds a full mapping from an assignment, an origin, and per-axis extrema.
///
/// Scaling pools the extrema of all axes. An axis whose own extrema do not
/// move along it is degenerate: its scale is zeroed and a note recorded.
pub fn build_empirical_mapping(
    model: &HandModel,
    origin: &JointPose,
    assign: &MotionAssignment,
    extrema: &ExtremaPoses,
) -> Result<TeleopMapping> {
    model.check_pose(origin)?;
    if !model.within_limits(origin, 0.0) {
        return Err(Error::Invalid(
            "origin pose is outside the joint limits".into(),
        ));
    }
    let a = build_projection_matrix(model.dof, assign)?;
    for axis in Axis::ALL {
        for pose in extrema.for_axis(axis) {
            model.check_pose(pose)?;
            if !model.within_limits(pose, 1e-12) {
                return Err(Error::Invalid(format!(
                    "{} extrema pose is outside the joint limits",
                    axis.name()
                )));
            }
        }
        if !a.is_zero_column(axis) && extrema.for_axis(axis).is_empty() {
            return Err(Error::Empty(format!(
                "extrema for nonzero axis {}",
                axis.name()
            )));
        }
    }
    let pooled = extrema.pooled();
    let mut scaling = if pooled.is_empty() {
        ScalingFactors::from_delta([0.0; 3])
    } else {
        compute_scaling(origin, &a, &pooled)?
    };
    let mut provenance = Provenance::new(MappingMethod::Empirical);
    for axis in Axis::ALL {
        if a.is_zero_column(axis) {
            scaling = scaling.with_zeroed(axis);
            continue;
        }
        let col = a.column(axis);
        let values: Vec<f64> = extrema
            .for_axis(axis)
            .iter()
            .map(|p| {
                p.0.iter()
                    .zip(&origin.0)
                    .zip(col)
                    .map(|((q, o), c)| (q - o) * c)
                    .sum::<f64>()
            })
            .collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo == 0.0 {
            scaling = scaling.with_zeroed(axis);
            provenance.notes.push(format!(
                "warning: {} extrema poses have zero range along their axis; scale set to 0",
                axis.name()
            ));
        }
    }
    Ok(TeleopMapping {
        hand_id: model.hand_id.clone(),
        origin: origin.clone(),
        a,
        scaling,
        provenance,
    })
}
