//! Random-search grasp synthesis with perturbation robustness.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::contact::{classify_contacts, detect_contacts, Closer, FailureKind};
use super::objects::{canonical_object_set, OBJECT_COUNT};
use super::objects::{ObjectSpec, Solid};
use super::quality::{QualityEvaluator, WrenchSpace, DEFAULT_DIRECTIONS, DEFAULT_FRICTION};
use super::{DatasetProvenance, Grasp, GraspDataset};
use crate::error::{Error, Result};
use crate::hand_model::{finger_fk, forward_kinematics, HandModel, JointPose};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Maximum number of random candidates.
    pub budget: u64,
    pub seed: u64,
    /// Sampling stops once this many valid grasps were found.
    pub max_valid: usize,
    pub friction_mu: f64,
    pub directions: usize,
    /// Object position offset per axis for robustness checks (meters).
    pub position_perturbation: f64,
    /// Pre-grasp joint offset per joint for robustness checks (radians).
    pub joint_perturbation: f64,
    /// Joint increment of the closing simulation (radians).
    pub closing_step: f64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            budget: 200_000,
            seed: 0,
            max_valid: 1000,
            friction_mu: DEFAULT_FRICTION,
            directions: DEFAULT_DIRECTIONS,
            position_perturbation: 0.005,
            joint_perturbation: 0.05,
            closing_step: 0.03,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub iterations: u64,
    pub valid: u64,
    /// Total perturbed variants evaluated, including the unperturbed one of each axis.
    pub perturbation_evaluations: u64,
    pub failures: BTreeMap<FailureKind, u64>,
    /// Largest distance between points of two different fingers over the joint-limit corners.
    pub max_aperture: f64,
}

impl SampleDiagnostics {
    pub fn dominant_failure(&self) -> Option<FailureKind> {
        self.failures
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| *k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub grasps: Vec<Grasp>,
    pub diagnostics: SampleDiagnostics,
}

/// Number of perturbed evaluations per candidate: three offsets (−, 0, +)
/// along each of the three object axes and each joint.
pub fn perturbation_variants(dof: usize) -> usize {
    3 * (3 + dof)
}

const CORNER_CAP: usize = 4096;
const BATCH: usize = 512;

/// Largest distance between points on two different fingers, over joint
/// configurations at the limits (all corners, or a seeded sample of them).
pub fn max_aperture(model: &HandModel) -> f64 {
    if model.fingers.len() < 2 {
        return 0.0;
    }
    let n = model.dof;
    let configs: Vec<Vec<f64>> = if n < 12 {
        (0..1usize << n)
            .map(|mask| corner(model, |j| mask >> j & 1 == 1))
            .collect()
    } else {
        let mut rng = seeds::item_rng(0xa9e7, 0, n as u64);
        (0..CORNER_CAP)
            .map(|_| {
                let bits: Vec<bool> = (0..n).map(|_| rng.random()).collect();
                corner(model, |j| bits[j])
            })
            .collect()
    };
    let mut best = 0.0_f64;
    for q in &configs {
        let pts: Vec<Vec<Point3<f64>>> = model
            .fingers
            .iter()
            .map(|f| finger_fk(f, q).points)
            .collect();
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                for p in &pts[a] {
                    for r in &pts[b] {
                        best = best.max((p - r).norm());
                    }
                }
            }
        }
    }
    best
}

fn corner(model: &HandModel, upper: impl Fn(usize) -> bool) -> Vec<f64> {
    model
        .joints
        .iter()
        .enumerate()
        .map(|(j, s)| if upper(j) { s.max } else { s.min })
        .collect()
}

/// Reach of the hand: the farthest any finger point can be from the palm origin.
fn reach(model: &HandModel) -> f64 {
    model
        .fingers
        .iter()
        .map(|f| {
            Vector3::from(f.base_pose.pos).norm() + f.links.iter().map(|l| l.length).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

struct Sampler<'a> {
    model: &'a HandModel,
    obj: &'a ObjectSpec,
    closer: Closer,
    evaluator: QualityEvaluator,
    cfg: &'a SamplerConfig,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

enum Candidate {
    Valid { grasp: Grasp, evaluations: u64 },
    Failed(FailureKind),
}

impl Sampler<'_> {
    /// Closes the hand on the object and scores it; `Err` for an invalid grasp.
    fn attempt(
        &self,
        center: Point3<f64>,
        pre: &JointPose,
    ) -> std::result::Result<(JointPose, f64), FailureKind> {
        let solid: Solid = self.obj.placed(center);
        let q = self.closer.close(self.model, pre, &solid)?;
        let kin = forward_kinematics(self.model, &q).expect("pose has model dimension");
        let contacts = detect_contacts(self.model, &kin, &solid);
        classify_contacts(&contacts, self.obj.grasp_type)?;
        Ok((q, self.evaluator.score_contacts(&contacts, &center)))
    }

    fn candidate(&self, index: u64) -> Candidate {
        let mut rng: ChaCha8Rng = seeds::item_rng(self.cfg.seed, self.obj.id as u64, index);
        let center = Point3::new(
            rng.random_range(self.lo.x..=self.hi.x),
            rng.random_range(self.lo.y..=self.hi.y),
            rng.random_range(self.lo.z..=self.hi.z),
        );
        let pre = JointPose(
            self.model
                .joints
                .iter()
                .map(|j| rng.random_range(j.min..=j.max))
                .collect(),
        );
        let (q, base_quality) = match self.attempt(center, &pre) {
            Ok(r) => r,
            Err(kind) => return Candidate::Failed(kind),
        };
        let mut worst = base_quality;
        let mut evaluations = 0_u64;
        let dp = self.cfg.position_perturbation;
        let dq = self.cfg.joint_perturbation;
        for axis in 0..3 + self.model.dof {
            for sign in [-1.0, 0.0, 1.0] {
                evaluations += 1;
                if sign == 0.0 {
                    // identical inputs to the unperturbed attempt
                    continue;
                }
                let mut c = center;
                let mut p = pre.clone();
                if axis < 3 {
                    c[axis] += sign * dp;
                } else {
                    let j = axis - 3;
                    let spec = &self.model.joints[j];
                    p.0[j] = (p.0[j] + sign * dq).clamp(spec.min, spec.max);
                }
                let quality = self.attempt(c, &p).map(|r| r.1).unwrap_or(0.0);
                worst = worst.min(quality);
            }
        }
        Candidate::Valid {
            grasp: Grasp {
                object_id: self.obj.id,
                q,
                quality: worst,
                grasp_type: self.obj.grasp_type,
                object_pose: [center.x, center.y, center.z],
            },
            evaluations,
        }
    }
}

/// Random search for stable grasps of `obj`.
///
/// Each candidate draws an object position and a pre-grasp pose from its own
/// seed derived from `(seed, object id, candidate index)`, so the result does
/// not depend on the number of worker threads.
pub fn sample_grasps(
    model: &HandModel,
    obj: &ObjectSpec,
    cfg: &SamplerConfig,
) -> Result<SampleOutcome> {
    if cfg.budget == 0 {
        return Err(Error::Invalid("budget must be positive".into()));
    }
    if !(cfg.friction_mu >= 0.0 && cfg.closing_step > 0.0 && cfg.directions > 0) {
        return Err(Error::Invalid("sampler configuration out of range".into()));
    }
    let aperture = max_aperture(model);
    let mut diag = SampleDiagnostics {
        max_aperture: aperture,
        ..Default::default()
    };
    if obj.grasp_width() >= aperture {
        diag.failures
            .insert(FailureKind::ApertureExceeded, cfg.budget);
        diag.iterations = cfg.budget;
        return Ok(SampleOutcome {
            grasps: Vec::new(),
            diagnostics: diag,
        });
    }
    let r = reach(model);
    let half = obj.half_extents();
    let sampler = Sampler {
        model,
        obj,
        closer: Closer::new(model, cfg.closing_step),
        evaluator: QualityEvaluator::new(cfg.friction_mu, cfg.directions, WrenchSpace::Spatial),
        cfg,
        lo: Vector3::new(-0.5 * r, -0.5 * r, half.z + 1e-3),
        hi: Vector3::new(0.5 * r, 0.5 * r, (r).max(half.z + 2e-3)),
    };
    let mut run = || {
        let mut grasps = Vec::new();
        let mut next = 0_u64;
        'outer: while next < cfg.budget && grasps.len() < cfg.max_valid {
            let end = (next + BATCH as u64).min(cfg.budget);
            let results: Vec<Candidate> = (next..end)
                .into_par_iter()
                .map(|i| sampler.candidate(i))
                .collect();
            for res in results {
                diag.iterations += 1;
                match res {
                    Candidate::Valid { grasp, evaluations } => {
                        diag.valid += 1;
                        diag.perturbation_evaluations += evaluations;
                        grasps.push(grasp);
                        if grasps.len() >= cfg.max_valid {
                            break 'outer;
                        }
                    }
                    Candidate::Failed(kind) => *diag.failures.entry(kind).or_insert(0) += 1,
                }
            }
            next = end;
        }
        grasps
    };
    let grasps = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    Ok(SampleOutcome {
        grasps,
        diagnostics: diag,
    })
}

/// Samples every reference object at `hand_scale` into one raw dataset.
/// Diagnostics come back per object, in object order.
pub fn sample_dataset(
    model: &HandModel,
    hand_scale: f64,
    cfg: &SamplerConfig,
) -> Result<(GraspDataset, Vec<SampleDiagnostics>)> {
    let provenance = DatasetProvenance {
        source: "sampled".into(),
        seed: Some(cfg.seed),
        budget: Some(cfg.budget),
        max_valid: Some(cfg.max_valid),
        hand_scale: Some(hand_scale),
        friction_mu: Some(cfg.friction_mu),
        directions: Some(cfg.directions),
        position_perturbation_m: Some(cfg.position_perturbation),
        joint_perturbation_rad: Some(cfg.joint_perturbation),
        parsed_from: None,
        notes: Vec::new(),
    };
    let mut ds = GraspDataset::new(model.hand_id.clone(), model.dof, provenance);
    let mut diags = Vec::with_capacity(OBJECT_COUNT);
    for obj in canonical_object_set(hand_scale)? {
        let out = sample_grasps(model, &obj, cfg)?;
        for g in out.grasps {
            ds.push(g)?;
        }
        diags.push(out.diagnostics);
    }
    Ok((ds, diags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_count() {
        assert_eq!(perturbation_variants(7), 30);
        assert_eq!(perturbation_variants(4), 21);
    }

    #[test]
    fn zero_budget_rejected() {
        let model = crate::grasp::contact::tests::jaw();
        let obj = &canonical_object_set(1.0).unwrap()[2];
        let cfg = SamplerConfig {
            budget: 0,
            ..Default::default()
        };
        assert!(sample_grasps(&model, obj, &cfg).is_err());
    }
}
