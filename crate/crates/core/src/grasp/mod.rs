//! Grasp datasets: the reference object set, grasp synthesis, quality
//! scoring, threshold-escalation parsing and the JSON Lines file format.

pub mod contact;
pub mod objects;
pub mod quality;
pub mod sample;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::hand_model::{HandModel, JointPose};
use crate::jsonio;

pub use contact::{classify_contacts, detect_contacts, Contact, FailureKind};
pub use objects::{canonical_object_set, GraspType, ObjectSpec, Primitive, OBJECT_COUNT};
pub use quality::{grasp_quality, QualityEvaluator, WrenchSpace};
pub use sample::{
    max_aperture, perturbation_variants, sample_dataset, sample_grasps, SampleDiagnostics,
    SampleOutcome, SamplerConfig,
};

pub const SCHEMA: &str = "grasp-dataset/1";

/// Parsing stops once every object has fewer grasps than this.
pub const PARSE_TARGET: usize = 20;
pub const PARSE_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grasp {
    pub object_id: u8,
    pub q: JointPose,
    pub quality: f64,
    pub grasp_type: GraspType,
    /// Object center in the palm frame (meters).
    pub object_pose: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProvenance {
    /// How the grasps were obtained, e.g. "sampled", "parsed", "recorded".
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_valid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_perturbation_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_perturbation_rad: Option<f64>,
    /// Digest of the raw dataset a parsed dataset was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_from: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Grasps grouped by object: `objects[k]` holds the grasps of object `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspDataset {
    pub hand_id: String,
    pub dof: usize,
    /// Last parsing threshold used; `None` for unparsed data.
    pub xi_final: Option<f64>,
    pub provenance: DatasetProvenance,
    pub objects: Vec<Vec<Grasp>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(default)]
    schema: Option<String>,
    hand_id: String,
    dof: usize,
    xi_final: Option<f64>,
    provenance: DatasetProvenance,
}

impl GraspDataset {
    pub fn new(hand_id: impl Into<String>, dof: usize, provenance: DatasetProvenance) -> Self {
        Self {
            hand_id: hand_id.into(),
            dof,
            xi_final: None,
            provenance,
            objects: vec![Vec::new(); OBJECT_COUNT],
        }
    }

    pub fn grasps(&self) -> impl Iterator<Item = &Grasp> {
        self.objects.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.objects.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.objects.iter().map(Vec::len).collect()
    }

    pub fn push(&mut self, grasp: Grasp) -> Result<()> {
        check_len("grasp q", self.dof, grasp.q.len())?;
        let slot = objects::object_slot(grasp.object_id)?;
        self.objects[slot].push(grasp);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() != OBJECT_COUNT {
            return Err(Error::Invalid(format!(
                "dataset must hold {OBJECT_COUNT} object groups"
            )));
        }
        for (slot, group) in self.objects.iter().enumerate() {
            for g in group {
                check_len("grasp q", self.dof, g.q.len())?;
                check_finite("grasp q", &g.q.0)?;
                check_finite("grasp object_pose", &g.object_pose)?;
                if !(g.quality.is_finite() && g.quality >= 0.0) {
                    return Err(Error::Invalid(format!(
                        "grasp quality must be finite and non-negative, got {}",
                        g.quality
                    )));
                }
                if g.object_id as usize != slot + 1 {
                    return Err(Error::Invalid(format!(
                        "grasp of object {} stored under object {}",
                        g.object_id,
                        slot + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks every grasp pose against the joint limits of `model`.
    pub fn validate_for(&self, model: &HandModel) -> Result<()> {
        self.validate()?;
        check_len("dataset dof", model.dof, self.dof)?;
        for g in self.grasps() {
            if !model.within_limits(&g.q, 1e-9) {
                return Err(Error::Invalid(format!(
                    "grasp of object {} violates joint limits",
                    g.object_id
                )));
            }
        }
        Ok(())
    }

    /// JSON Lines text: header, then grasps by object id and in stored order.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            schema: Some(SCHEMA.to_string()),
            hand_id: self.hand_id.clone(),
            dof: self.dof,
            xi_final: self.xi_final,
            provenance: self.provenance.clone(),
        };
        let mut out = jsonio::to_line(&header)?;
        out.push('\n');
        for g in self.grasps() {
            out.push_str(&jsonio::to_line(g)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("grasp dataset has no header line".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| Error::Format(format!("grasp dataset header: {e}")))?;
        jsonio::check_schema(header.schema.as_deref(), SCHEMA)?;
        let mut ds = GraspDataset::new(header.hand_id, header.dof, header.provenance);
        ds.xi_final = header.xi_final;
        for (n, line) in lines {
            let g: Grasp = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("grasp dataset line {}: {e}", n + 1)))?;
            ds.push(g)?;
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(jsonio::digest(self.to_jsonl()?.as_bytes()))
    }
}

/// Ranks grasps by quality, highest first; equal qualities keep input order.
fn ranked(group: &[Grasp]) -> Vec<&Grasp> {
    let mut order: Vec<&Grasp> = group.iter().collect();
    order.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    order
}

/// For each ranked grasp, the joint-space distance to its nearest
/// higher-ranked grasp (infinite for the top one).
fn nearest_higher(order: &[&Grasp]) -> Vec<f64> {
    (0..order.len())
        .map(|i| {
            order[..i]
                .iter()
                .map(|h| order[i].q.distance(&h.q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Grasps of one ranked group that survive threshold `xi`: those not
/// within `xi` of any higher-ranked grasp.
pub fn parse_group(group: &[Grasp], xi: f64) -> Vec<Grasp> {
    let order = ranked(group);
    let near = nearest_higher(&order);
    order
        .into_iter()
        .zip(near)
        .filter(|(_, d)| *d >= xi)
        .map(|(g, _)| g.clone())
        .collect()
}

/// Thins the raw dataset by raising the threshold in steps of 0.1 from 0.0
/// until every object has fewer than 20 grasps. Each threshold is applied to
/// the full ranked raw data.
pub fn parse_dataset(raw: &GraspDataset) -> Result<GraspDataset> {
    raw.validate()?;
    for (slot, group) in raw.objects.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Empty(format!("object {} has no grasps", slot + 1)));
        }
    }
    let ranked_groups: Vec<Vec<&Grasp>> = raw.objects.iter().map(|g| ranked(g)).collect();
    let near: Vec<Vec<f64>> = ranked_groups.iter().map(|o| nearest_higher(o)).collect();
    let mut k = 0_u32;
    loop {
        let xi = k as f64 * PARSE_STEP;
        let counts: Vec<usize> = near
            .iter()
            .map(|n| n.iter().filter(|d| **d >= xi).count())
            .collect();
        if counts.iter().all(|&c| c < PARSE_TARGET) {
            let mut out = GraspDataset::new(raw.hand_id.clone(), raw.dof, raw.provenance.clone());
            out.provenance.source = "parsed".into();
            out.provenance.parsed_from = Some(raw.digest()?);
            out.xi_final = Some(xi);
            for (slot, (order, n)) in ranked_groups.iter().zip(&near).enumerate() {
                out.objects[slot] = order
                    .iter()
                    .zip(n)
                    .filter(|(_, d)| **d >= xi)
                    .map(|(g, _)| (*g).clone())
                    .collect();
            }
            return Ok(out);
        }
        k += 1;
    }
}
