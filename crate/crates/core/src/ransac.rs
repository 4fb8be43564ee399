//! Subspace fitting by RANSAC over a grasp dataset.
//!
//! A hypothesis is an origin grasp of the origin object plus three basis
//! directions toward grasps of objects that differ from it along exactly one
//! subspace axis. Hypotheses are ranked with a four-tier consensus score that
//! rewards covering every object before covering many grasps.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::empirical::ExtremaPoses;
use crate::error::{check_len, Error, Result};
use crate::grasp::objects::{canonical_object_set, object_slot};
use crate::grasp::{GraspDataset, OBJECT_COUNT};
use crate::hand_model::{HandModel, JointPose};
use crate::jsonio;
use crate::seeds;
use crate::subspace::{
    compute_scaling, Axis, MappingMethod, ProjectionMatrix, Provenance, ScalingFactors,
    TeleopMapping,
};

pub const REPORT_SCHEMA: &str = "ransac-report/1";

/// Inlier threshold for datasets that were never parsed (human recordings).
pub const UNPARSED_XI: f64 = 0.1;
pub const PAPER_HYPOTHESES: u64 = 2_000_000;
pub const DEFAULT_HYPOTHESES: u64 = 20_000;
pub const DEFAULT_COMBO_CAP: usize = 4096;
/// Basis entries at or below this magnitude do not make a joint relevant.
pub const RELEVANCE_TOL: f64 = 1e-6;
const GS_TOL: f64 = 1e-8;
const RESAMPLE_ATTEMPTS: usize = 64;
const HYPOTHESIS_STREAM: u64 = 0x4859_504f;
const COMBO_STREAM: u64 = 0x434f_4d42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub hypotheses: u64,
    pub xi: f64,
    pub seed: u64,
    pub delta_combo_cap: usize,
    /// Object whose grasps provide hypothesis origins.
    pub origin_object: u8,
    /// Object whose grasps provide the relocated origin.
    pub relocation_object: u8,
}

impl FitConfig {
    pub fn new(xi: f64, seed: u64) -> Self {
        Self {
            hypotheses: DEFAULT_HYPOTHESES,
            xi,
            seed,
            delta_combo_cap: DEFAULT_COMBO_CAP,
            origin_object: 8,
            relocation_object: 1,
        }
    }

    /// Threshold for a dataset: its final parsing threshold, or 0.1 if unparsed.
    pub fn for_dataset(ds: &GraspDataset, seed: u64) -> Self {
        Self::new(ds.xi_final.unwrap_or(UNPARSED_XI), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hypotheses == 0 {
            return Err(Error::Invalid("hypothesis count must be at least 1".into()));
        }
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(Error::Invalid(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        if self.delta_combo_cap == 0 {
            return Err(Error::Invalid("delta_combo_cap must be positive".into()));
        }
        object_slot(self.origin_object)?;
        object_slot(self.relocation_object)?;
        Ok(())
    }
}

/// Three orthonormal directions and an origin in joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceHypothesis {
    pub origin: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// `(object id, index within that object's list)` of the origin grasp
    /// followed by the α, σ and ε source grasps.
    pub sources: Vec<(u8, usize)>,
}

impl SubspaceHypothesis {
    pub fn basis(&self) -> [&[f64]; 3] {
        [&self.alpha, &self.sigma, &self.epsilon]
    }

    pub fn dof(&self) -> usize {
        self.origin.len()
    }

    pub fn projection_matrix(&self) -> ProjectionMatrix {
        ProjectionMatrix::from_columns([
            self.alpha.clone(),
            self.sigma.clone(),
            self.epsilon.clone(),
        ])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Classical Gram-Schmidt in input order. `None` when a residual norm falls
/// below 1e-8, i.e. the inputs are (nearly) linearly dependent.
pub fn gram_schmidt(vectors: &[Vec<f64>; 3]) -> Option<[Vec<f64>; 3]> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(3);
    for v in vectors {
        let mut r = v.clone();
        for u in &out {
            let c = dot(v, u);
            for (ri, ui) in r.iter_mut().zip(u) {
                *ri -= c * ui;
            }
        }
        // second pass keeps orthogonality at round-off level
        for u in &out {
            let c = dot(&r, u);
            for (ri, ui) in r.iter_mut().zip(u) {
                *ri -= c * ui;
            }
        }
        let n = norm(&r);
        if !(n >= GS_TOL) {
            return None;
        }
        r.iter_mut().for_each(|x| *x /= n);
        out.push(r);
    }
    let mut it = out.into_iter();
    Some([it.next()?, it.next()?, it.next()?])
}

/// Distance from `g` to the affine subspace: `‖(g − o) − P(g − o)‖`.
pub fn point_to_subspace_distance(hyp: &SubspaceHypothesis, g: &[f64]) -> Result<f64> {
    check_len("grasp", hyp.dof(), g.len())?;
    Ok(distance_unchecked(hyp, g))
}

fn distance_unchecked(hyp: &SubspaceHypothesis, g: &[f64]) -> f64 {
    let v: Vec<f64> = g.iter().zip(&hyp.origin).map(|(a, b)| a - b).collect();
    let mut r = v.clone();
    for w in hyp.basis() {
        let c = dot(&v, w);
        for (ri, wi) in r.iter_mut().zip(w) {
            *ri -= c * wi;
        }
    }
    norm(&r)
}

/// Four-tier consensus score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieredScore {
    /// Fewest inliers of any object.
    pub t1: u64,
    /// Number of objects with exactly `t1` inliers.
    pub t2: u64,
    /// Total inliers.
    pub t3: u64,
    /// Sum of distances of all grasps.
    pub t4: f64,
}

impl TieredScore {
    /// `Greater` means `self` is the better model: more inliers on the worst
    /// object, then fewer objects at that minimum, then more inliers, then
    /// less total error.
    pub fn compare(&self, other: &Self) -> Ordering {
        self.t1
            .cmp(&other.t1)
            .then(other.t2.cmp(&self.t2))
            .then(self.t3.cmp(&other.t3))
            .then(other.t4.total_cmp(&self.t4))
    }

    pub fn from_counts(per_object: &[u64], total_distance: f64) -> Self {
        let t1 = per_object.iter().copied().min().unwrap_or(0);
        Self {
            t1,
            t2: per_object.iter().filter(|&&c| c == t1).count() as u64,
            t3: per_object.iter().sum(),
            t4: total_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: TieredScore,
    pub per_object_inliers: Vec<u64>,
}

/// Inliers are grasps at distance strictly below `xi`.
pub fn score_hypothesis(
    hyp: &SubspaceHypothesis,
    ds: &GraspDataset,
    xi: f64,
) -> Result<Evaluation> {
    check_len("dataset dof", hyp.dof(), ds.dof)?;
    Ok(evaluate(hyp, ds, xi))
}

fn evaluate(hyp: &SubspaceHypothesis, ds: &GraspDataset, xi: f64) -> Evaluation {
    let mut per = vec![0_u64; OBJECT_COUNT];
    let mut total = 0.0;
    for (slot, group) in ds.objects.iter().enumerate() {
        for g in group {
            let d = distance_unchecked(hyp, &g.q.0);
            total += d;
            if d < xi {
                per[slot] += 1;
            }
        }
    }
    Evaluation {
        score: TieredScore::from_counts(&per, total),
        per_object_inliers: per,
    }
}

/// The three source objects for (α, σ, ε): each differs from the origin
/// object along that axis only, and the sign of the difference orients the
/// direction so the basis points toward increasing axis values.
fn axis_sources(origin_object: u8) -> Result<[(u8, f64); 3]> {
    let set = canonical_object_set(1.0)?;
    let o = &set[object_slot(origin_object)?];
    let mut found: [Option<(u8, f64)>; 3] = [None; 3];
    for obj in &set {
        if obj.id == origin_object {
            continue;
        }
        let diff: Vec<f64> = (0..3)
            .map(|k| obj.predicted_psi.0[k] - o.predicted_psi.0[k])
            .collect();
        let nonzero: Vec<usize> = (0..3).filter(|&k| diff[k] != 0.0).collect();
        if let [k] = nonzero[..] {
            if found[k].is_none() {
                found[k] = Some((obj.id, diff[k].signum()));
            }
        }
    }
    match found {
        [Some(a), Some(s), Some(e)] => Ok([a, s, e]),
        _ => Err(Error::Invalid(format!(
            "object {origin_object} has no single-axis neighbor for every axis"
        ))),
    }
}

/// Draws one hypothesis: an origin grasp and one grasp per axis source
/// object, oriented differences in random order, then Gram-Schmidt. Labels
/// travel with the vectors through the permutation.
pub fn sample_hypothesis<R: Rng + ?Sized>(
    ds: &GraspDataset,
    origin_object: u8,
    rng: &mut R,
) -> Result<SubspaceHypothesis> {
    let sources = axis_sources(origin_object)?;
    for id in std::iter::once(origin_object).chain(sources.iter().map(|s| s.0)) {
        if ds.objects[object_slot(id)?].is_empty() {
            return Err(Error::Empty(format!("object {id} has no grasps")));
        }
    }
    for _ in 0..RESAMPLE_ATTEMPTS {
        if let Some(h) = draw(ds, origin_object, &sources, rng) {
            return Ok(h);
        }
    }
    Err(Error::Degenerate(format!(
        "{RESAMPLE_ATTEMPTS} consecutive degenerate hypothesis samples"
    )))
}

fn draw<R: Rng + ?Sized>(
    ds: &GraspDataset,
    origin_object: u8,
    sources: &[(u8, f64); 3],
    rng: &mut R,
) -> Option<SubspaceHypothesis> {
    let pick = |id: u8, rng: &mut R| {
        let group = &ds.objects[id as usize - 1];
        let i = rng.random_range(0..group.len());
        (i, &group[i].q.0)
    };
    let (oi, origin) = pick(origin_object, rng);
    let mut picked = Vec::with_capacity(3);
    let mut dirs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(3);
    for (axis, &(id, sign)) in sources.iter().enumerate() {
        let (gi, g) = pick(id, rng);
        picked.push((id, gi));
        let d: Vec<f64> = g.iter().zip(origin).map(|(a, b)| sign * (a - b)).collect();
        let n = norm(&d);
        if !(n >= GS_TOL) {
            return None;
        }
        dirs.push((axis, d.into_iter().map(|x| x / n).collect()));
    }
    dirs.shuffle(rng);
    let ordered = [dirs[0].1.clone(), dirs[1].1.clone(), dirs[2].1.clone()];
    let ortho = gram_schmidt(&ordered)?;
    let mut labeled: [Vec<f64>; 3] = Default::default();
    for ((axis, _), v) in dirs.iter().zip(ortho) {
        labeled[*axis] = v;
    }
    let [alpha, sigma, epsilon] = labeled;
    let mut src = vec![(origin_object, oi)];
    src.extend(picked);
    Some(SubspaceHypothesis {
        origin: origin.clone(),
        alpha,
        sigma,
        epsilon,
        sources: src,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub hypothesis: SubspaceHypothesis,
    pub evaluation: Evaluation,
    /// Index of the winning hypothesis in the sampled sequence.
    pub index: u64,
    /// Hypotheses that could not be formed after resampling.
    pub degenerate: u64,
}

const CHUNK: u64 = 4096;

/// Samples and scores `cfg.hypotheses` hypotheses and keeps the best. Each
/// hypothesis draws from its own seed derived from `(cfg.seed, index)`;
/// equal scores go to the lower index, so the result does not depend on the
/// number of worker threads.
pub fn fit_subspace(ds: &GraspDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    ds.validate()?;
    // surfaces empty-object errors before the parallel loop
    sample_hypothesis(
        ds,
        cfg.origin_object,
        &mut seeds::item_rng(cfg.seed, HYPOTHESIS_STREAM, 0),
    )?;
    let mut best: Option<(TieredScore, u64, SubspaceHypothesis, Vec<u64>)> = None;
    let mut degenerate = 0_u64;
    let mut start = 0_u64;
    while start < cfg.hypotheses {
        let end = (start + CHUNK).min(cfg.hypotheses);
        let chunk: Vec<Option<(TieredScore, u64, SubspaceHypothesis, Vec<u64>)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeds::item_rng(cfg.seed, HYPOTHESIS_STREAM, i);
                let h = sample_hypothesis(ds, cfg.origin_object, &mut rng).ok()?;
                let e = evaluate(&h, ds, cfg.xi);
                Some((e.score, i, h, e.per_object_inliers))
            })
            .collect();
        for item in chunk {
            match item {
                None => degenerate += 1,
                Some(c) => {
                    let better = match &best {
                        None => true,
                        Some(b) => c.0.compare(&b.0) == Ordering::Greater,
                    };
                    if better {
                        best = Some(c);
                    }
                }
            }
        }
        start = end;
    }
    let (score, index, hypothesis, per) =
        best.ok_or_else(|| Error::Degenerate("every hypothesis was degenerate".into()))?;
    Ok(FitResult {
        hypothesis,
        evaluation: Evaluation {
            score,
            per_object_inliers: per,
        },
        index,
        degenerate,
    })
}

/// Where the relocated origin comes from.
#[derive(Debug, Clone, Copy)]
pub enum OriginSource<'a> {
    /// The grasp of this object closest to the fitted subspace.
    Dataset(&'a GraspDataset, u8),
    /// A calibration pose recorded by the operator.
    Calibration(&'a JointPose),
}

/// Moves the origin while keeping the basis.
pub fn relocate_origin(
    hyp: &SubspaceHypothesis,
    source: OriginSource<'_>,
) -> Result<SubspaceHypothesis> {
    let origin = match source {
        OriginSource::Calibration(pose) => {
            check_len("calibration pose", hyp.dof(), pose.len())?;
            pose.0.clone()
        }
        OriginSource::Dataset(ds, object) => {
            let group = &ds.objects[object_slot(object)?];
            let mut best: Option<(f64, &Vec<f64>)> = None;
            for g in group {
                let d = point_to_subspace_distance(hyp, &g.q.0)?;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, &g.q.0));
                }
            }
            best.ok_or_else(|| {
                Error::Empty(format!(
                    "object {object} has no grasps and no calibration pose was given"
                ))
            })?
            .1
            .clone()
        }
    };
    Ok(SubspaceHypothesis {
        origin,
        ..hyp.clone()
    })
}

/// Joint indices with a basis entry above the relevance tolerance.
pub fn relevant_joints(column: &[f64]) -> Vec<usize> {
    (0..column.len())
        .filter(|&j| column[j].abs() > RELEVANCE_TOL)
        .collect()
}

/// Extrema poses for one axis: every min/max combination of the relevant
/// joints with all other joints at the origin. Above `cap` combinations a
/// seeded uniform sample of `cap` of them is used instead.
pub fn enumerate_extrema(
    model: &HandModel,
    origin: &JointPose,
    relevant: &[usize],
    cap: usize,
    seed: u64,
    stream: u64,
) -> (Vec<JointPose>, bool) {
    let k = relevant.len();
    let make = |mask: &dyn Fn(usize) -> bool| {
        let mut q = origin.0.clone();
        for (bit, &j) in relevant.iter().enumerate() {
            q[j] = if mask(bit) {
                model.joints[j].max
            } else {
                model.joints[j].min
            };
        }
        JointPose(q)
    };
    if k < usize::BITS as usize && (1usize << k) <= cap {
        let poses = (0..1usize << k)
            .map(|m| make(&|b| m >> b & 1 == 1))
            .collect();
        return (poses, false);
    }
    let mut rng = seeds::item_rng(seed, COMBO_STREAM, stream);
    let poses = (0..cap)
        .map(|_| {
            let bits: Vec<bool> = (0..k).map(|_| rng.random()).collect();
            make(&|b| bits[b])
        })
        .collect();
    (poses, true)
}

/// Mapping from a fitted hypothesis. The scale of each axis comes from the
/// joint-limit combinations of its relevant joints, or from calibration
/// extrema when given.
pub fn build_algorithmic_mapping(
    model: &HandModel,
    fitted: &SubspaceHypothesis,
    cfg: &FitConfig,
    calibration: Option<&ExtremaPoses>,
) -> Result<TeleopMapping> {
    check_len("hypothesis dof", model.dof, fitted.dof())?;
    let a = fitted.projection_matrix();
    a.validate()?;
    let origin = JointPose(fitted.origin.clone());
    let mut provenance = Provenance::new(MappingMethod::Ransac);
    provenance.seed = Some(cfg.seed);
    let mut delta = [0.0; 3];
    for axis in Axis::ALL {
        let k = axis.index();
        let extrema = match calibration {
            Some(c) => c.for_axis(axis).to_vec(),
            None => {
                let relevant = relevant_joints(a.column(axis));
                if relevant.is_empty() {
                    continue;
                }
                let (poses, sampled) = enumerate_extrema(
                    model,
                    &origin,
                    &relevant,
                    cfg.delta_combo_cap,
                    cfg.seed,
                    k as u64,
                );
                if sampled {
                    provenance.notes.push(format!(
                        "{} extrema: sampled {} of 2^{} joint-limit combinations",
                        axis.name(),
                        poses.len(),
                        relevant.len()
                    ));
                }
                poses
            }
        };
        delta[k] = compute_scaling(&origin, &a, &extrema)?.delta[k];
    }
    provenance.notes.push(
        match calibration {
            Some(_) => "scaling from calibration extrema",
            None => "scaling from joint-limit combinations",
        }
        .to_string(),
    );
    let mapping = TeleopMapping {
        hand_id: model.hand_id.clone(),
        origin,
        a,
        scaling: ScalingFactors::from_delta(delta),
        provenance,
    };
    mapping.validate_for(model)?;
    Ok(mapping)
}

/// Result file of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub hand_id: String,
    pub cfg: FitConfig,
    pub best_score: TieredScore,
    pub per_object_inliers: Vec<u64>,
    pub best_index: u64,
    pub degenerate_hypotheses: u64,
    /// Winning hypothesis with its fitted origin.
    pub hypothesis: SubspaceHypothesis,
    /// Origin after relocation; `None` if relocation was skipped.
    pub relocated_origin: Option<Vec<f64>>,
    pub dataset_digest: String,
    /// Wall-clock time; omitted unless requested so reports are reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
}

impl FitReport {
    /// The hypothesis the mapping should use: relocated origin when present.
    pub fn final_hypothesis(&self) -> SubspaceHypothesis {
        match &self.relocated_origin {
            Some(o) => SubspaceHypothesis {
                origin: o.clone(),
                ..self.hypothesis.clone()
            },
            None => self.hypothesis.clone(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(self, REPORT_SCHEMA)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        jsonio::from_tagged_str(text, REPORT_SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Full pipeline: fit, relocate the origin, and report.
pub fn fit_report(
    ds: &GraspDataset,
    cfg: &FitConfig,
    calibration_origin: Option<&JointPose>,
) -> Result<(FitResult, FitReport)> {
    let fit = fit_subspace(ds, cfg)?;
    let source = match calibration_origin {
        Some(p) => OriginSource::Calibration(p),
        None => OriginSource::Dataset(ds, cfg.relocation_object),
    };
    let relocated = relocate_origin(&fit.hypothesis, source)?;
    let report = FitReport {
        hand_id: ds.hand_id.clone(),
        cfg: cfg.clone(),
        best_score: fit.evaluation.score,
        per_object_inliers: fit.evaluation.per_object_inliers.clone(),
        best_index: fit.index,
        degenerate_hypotheses: fit.degenerate,
        hypothesis: fit.hypothesis.clone(),
        relocated_origin: Some(relocated.origin),
        dataset_digest: ds.digest()?,
        runtime_seconds: None,
    };
    Ok((fit, report))
}
