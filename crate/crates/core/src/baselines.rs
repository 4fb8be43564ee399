//! Reference mappings: direct joint correspondence and fingertip-position
//! mapping through forward and inverse kinematics.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::hand_model::{
    clamp_to_limits, finger_fk, fingertip_jacobian, forward_kinematics, HandModel, JointPose,
};
use crate::jsonio;

pub const CORRESPONDENCE_SCHEMA: &str = "joint-correspondence/1";
pub const FINGERTIP_SCHEMA: &str = "fingertip-config/1";

/// The solver stops after `STALL_ITERS` consecutive lightly damped iterations
/// that each lower the residual by less than this fraction.
const STALL_RATIO: f64 = 1e-10;
const STALL_ITERS: usize = 5;

/// Slave joint `pair[1]` copies master joint `pair[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointCorrespondence {
    pub master_hand: String,
    pub slave_hand: String,
    pub pairs: Vec<[usize; 2]>,
    /// Values of unmapped slave joints; the slave's neutral pose when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slave_origin: Option<Vec<f64>>,
}

impl JointCorrespondence {
    pub fn validate(&self, master_dof: usize, slave_dof: usize) -> Result<()> {
        let mut used = vec![false; slave_dof];
        for &[m, s] in &self.pairs {
            if m >= master_dof {
                return Err(Error::Invalid(format!(
                    "master joint {m} out of range (dof {master_dof})"
                )));
            }
            if s >= slave_dof {
                return Err(Error::Invalid(format!(
                    "slave joint {s} out of range (dof {slave_dof})"
                )));
            }
            if std::mem::replace(&mut used[s], true) {
                return Err(Error::Invalid(format!("slave joint {s} mapped twice")));
            }
        }
        if let Some(o) = &self.slave_origin {
            check_len("slave_origin", slave_dof, o.len())?;
            check_finite("slave_origin", o)?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, CORRESPONDENCE_SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, CORRESPONDENCE_SCHEMA)
    }
}

/// Copies mapped joints, leaves the rest at the slave origin, and clamps.
/// Returns the pose and the per-joint clamp flags.
pub fn joint_map(
    corr: &JointCorrespondence,
    q_master: &JointPose,
    slave: &HandModel,
) -> Result<(JointPose, Vec<bool>)> {
    corr.validate(q_master.len(), slave.dof)?;
    check_finite("master pose", q_master.as_slice())?;
    let mut q = match &corr.slave_origin {
        Some(o) => o.clone(),
        None => slave.neutral_pose().0,
    };
    for &[m, s] in &corr.pairs {
        q[s] = q_master.0[m];
    }
    clamp_to_limits(slave, &JointPose(q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IkConfig {
    pub max_iters: usize,
    /// Initial damping λ; it shrinks after successful steps and grows after failed ones.
    pub damping: f64,
    /// Stop once every finger's residual is below this (meters).
    pub tolerance: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            damping: 0.05,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingertipConfig {
    pub master_hand: String,
    pub slave_hand: String,
    /// `(master finger name, slave finger name)`.
    pub finger_pairs: Vec<(String, String)>,
    pub scale: f64,
    #[serde(default)]
    pub ik: IkConfig,
}

impl FingertipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Invalid(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.ik.tolerance.is_finite() && self.ik.tolerance > 0.0) {
            return Err(Error::Invalid("ik tolerance must be positive".into()));
        }
        if !(self.ik.damping.is_finite() && self.ik.damping > 0.0) {
            return Err(Error::Invalid("ik damping must be positive".into()));
        }
        if self.finger_pairs.is_empty() {
            return Err(Error::Empty("finger_pairs".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, FINGERTIP_SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, FINGERTIP_SCHEMA)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingertipResult {
    pub q: JointPose,
    /// Final distance of each paired slave fingertip to its target (meters).
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Total residual norm before the first and after every accepted iteration.
    pub trace: Vec<f64>,
}

fn resolve(model: &HandModel, name: &str) -> Result<usize> {
    model
        .finger_index(name)
        .ok_or_else(|| Error::Invalid(format!("hand {} has no finger {name}", model.hand_id)))
}

struct Problem<'a> {
    slave: &'a HandModel,
    fingers: Vec<usize>,
    targets: Vec<Point3<f64>>,
    /// Slave joints that move at least one paired finger.
    joints: Vec<usize>,
}

impl Problem<'_> {
    fn errors(&self, q: &[f64]) -> Vec<nalgebra::Vector3<f64>> {
        self.fingers
            .iter()
            .zip(&self.targets)
            .map(|(&f, t)| t - finger_fk(&self.slave.fingers[f], q).fingertip())
            .collect()
    }

    fn total(errs: &[nalgebra::Vector3<f64>]) -> f64 {
        errs.iter().map(|e| e.norm_squared()).sum::<f64>().sqrt()
    }

    fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3 * self.fingers.len(), self.joints.len());
        for (row, &f) in self.fingers.iter().enumerate() {
            let chain = &self.slave.fingers[f];
            let fk = finger_fk(chain, q);
            let cols = fingertip_jacobian(chain, &fk, self.slave.dof);
            for (c, &joint) in self.joints.iter().enumerate() {
                for k in 0..3 {
                    j[(3 * row + k, c)] = cols[joint][k];
                }
            }
        }
        j
    }

    /// Damped least-squares step. Joints sitting on a limit that the step
    /// would push further out are frozen and the step is solved again, so the
    /// step stays a feasible direction.
    fn step(
        &self,
        j: &DMatrix<f64>,
        e: &DVector<f64>,
        q: &[f64],
        lambda: f64,
    ) -> Option<DVector<f64>> {
        let mut free = vec![true; self.joints.len()];
        loop {
            let mut jf = j.clone();
            for (c, _) in free.iter().enumerate().filter(|(_, f)| !**f) {
                jf.column_mut(c).fill(0.0);
            }
            let jt = jf.transpose();
            let reg = &jf * &jt + DMatrix::identity(jf.nrows(), jf.nrows()) * (lambda * lambda);
            let step = jt * reg.lu().solve(e)?;
            let mut changed = false;
            for (c, &joint) in self.joints.iter().enumerate() {
                let s = &self.slave.joints[joint];
                let pinned =
                    (q[joint] <= s.min && step[c] < 0.0) || (q[joint] >= s.max && step[c] > 0.0);
                if free[c] && pinned {
                    free[c] = false;
                    changed = true;
                }
            }
            if !changed {
                return Some(step);
            }
        }
    }

    /// Starting poses tried in order: `base`, then the solved joints at one
    /// and three quarters of their ranges.
    fn starts(&self, base: &[f64]) -> Vec<Vec<f64>> {
        let mut out = vec![base.to_vec()];
        for frac in [0.25, 0.75] {
            let mut q = base.to_vec();
            for &j in &self.joints {
                let s = &self.slave.joints[j];
                q[j] = s.min + frac * (s.max - s.min);
            }
            out.push(q);
        }
        out
    }

    fn project(&self, q: &mut [f64]) {
        for &j in &self.joints {
            let s = &self.slave.joints[j];
            q[j] = q[j].clamp(s.min, s.max);
        }
    }
}

/// Places the paired slave fingertips at the master fingertip positions
/// multiplied by `cfg.scale` (palm frame), solving one damped least-squares
/// problem over all paired slave fingers so coupled joints stay consistent.
///
/// Every accepted step lowers the total residual; a step that would raise it
/// is halved until it does not, and the solve stops when no step helps.
/// A descent that ends above the tolerance is restarted from the poses of
/// `starts`; the best run is returned.
/// Failing to reach the tolerance is not an error: the residuals report it.
pub fn fingertip_map(
    cfg: &FingertipConfig,
    master: &HandModel,
    q_master: &JointPose,
    slave: &HandModel,
    initial: Option<&JointPose>,
) -> Result<FingertipResult> {
    cfg.validate()?;
    let master_kin = forward_kinematics(master, q_master)?;
    check_finite("master pose", q_master.as_slice())?;
    let mut fingers = Vec::new();
    let mut targets = Vec::new();
    for (m, s) in &cfg.finger_pairs {
        let mi = resolve(master, m)?;
        fingers.push(resolve(slave, s)?);
        targets.push(Point3::from(
            master_kin.fingers[mi].fingertip().coords * cfg.scale,
        ));
    }
    let mut joints: Vec<usize> = fingers
        .iter()
        .flat_map(|&f| slave.finger_joints(f))
        .collect();
    joints.sort_unstable();
    joints.dedup();
    let problem = Problem {
        slave,
        fingers,
        targets,
        joints,
    };

    let base = match initial {
        Some(p) => {
            slave.check_pose(p)?;
            p.0.clone()
        }
        None => slave.neutral_pose().0,
    };
    let done = |errs: &[nalgebra::Vector3<f64>]| errs.iter().all(|e| e.norm() < cfg.ik.tolerance);
    let mut best: Option<(f64, FingertipResult)> = None;
    for start in problem.starts(&base) {
        let run = descend(&problem, cfg, start, &done);
        let total = run.trace[run.trace.len() - 1];
        let converged = run.residuals.iter().all(|r| *r < cfg.ik.tolerance);
        if best.as_ref().is_none_or(|(t, _)| total < *t) {
            best = Some((total, run));
        }
        if converged {
            break;
        }
    }
    Ok(best.expect("at least one start").1)
}

/// One damped least-squares descent from `q`.
fn descend(
    problem: &Problem<'_>,
    cfg: &FingertipConfig,
    mut q: Vec<f64>,
    done: &dyn Fn(&[nalgebra::Vector3<f64>]) -> bool,
) -> FingertipResult {
    problem.project(&mut q);
    let mut errs = problem.errors(&q);
    let mut total = Problem::total(&errs);
    let mut trace = vec![total];
    let mut lambda = cfg.ik.damping;
    let mut iterations = 0;
    let mut stalled = 0;

    while iterations < cfg.ik.max_iters && !done(&errs) {
        iterations += 1;
        let j = problem.jacobian(&q);
        let e = DVector::from_iterator(errs.len() * 3, errs.iter().flat_map(|v| v.iter().copied()));
        let mut accepted = false;
        for _ in 0..30 {
            let Some(step) = problem.step(&j, &e, &q, lambda) else {
                lambda *= 4.0;
                continue;
            };
            let mut scale = 1.0;
            for _ in 0..20 {
                let mut trial = q.clone();
                for (c, &joint) in problem.joints.iter().enumerate() {
                    trial[joint] += scale * step[c];
                }
                problem.project(&mut trial);
                let trial_errs = problem.errors(&trial);
                let trial_total = Problem::total(&trial_errs);
                if trial_total < total {
                    q = trial;
                    errs = trial_errs;
                    total = trial_total;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if accepted {
                lambda = (lambda * 0.5).max(1e-12);
                break;
            }
            lambda *= 4.0;
            if lambda > 1e6 {
                break;
            }
        }
        if !accepted {
            break;
        }
        let prev = trace[trace.len() - 1];
        trace.push(total);
        stalled = if prev - total <= STALL_RATIO * prev && lambda <= cfg.ik.damping {
            stalled + 1
        } else {
            0
        };
        if stalled >= STALL_ITERS {
            break;
        }
    }
    FingertipResult {
        q: JointPose(q),
        residuals: errs.iter().map(|e| e.norm()).collect(),
        iterations,
        trace,
    }
}
