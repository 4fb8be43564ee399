//! The three-dimensional teleoperation subspace and all projection math.
//!
//! Every 3-vector is ordered (spread α, size σ, curl ε). A mapping projects a
//! joint pose `q` of its hand to `ψ = ((q − o)·A) ⊙ δ` and back with
//! `q = (ψ ⊙ δ*)·Aᵀ + o`. Chaining the forward projection of a master hand with
//! the backward projection of a slave hand yields the teleoperation map.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::hand_model::{HandModel, JointPose};
use crate::jsonio;

pub const SCHEMA: &str = "teleop-mapping/1";

const COLUMN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Alpha,
    Sigma,
    Epsilon,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Alpha, Axis::Sigma, Axis::Epsilon];

    pub fn index(self) -> usize {
        match self {
            Axis::Alpha => 0,
            Axis::Sigma => 1,
            Axis::Epsilon => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Sigma => "sigma",
            Axis::Epsilon => "epsilon",
        }
    }
}

/// A point ψ in the teleoperation subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TeleopPoint(pub [f64; 3]);

impl TeleopPoint {
    pub const ZERO: TeleopPoint = TeleopPoint([0.0; 3]);

    pub fn get(&self, axis: Axis) -> f64 {
        self.0[axis.index()]
    }
}

/// The N×3 matrix A, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionMatrix {
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ProjectionMatrix {
    pub fn from_columns(columns: [Vec<f64>; 3]) -> Self {
        let [alpha, sigma, epsilon] = columns;
        Self {
            alpha,
            sigma,
            epsilon,
        }
    }

    pub fn column(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::Alpha => &self.alpha,
            Axis::Sigma => &self.sigma,
            Axis::Epsilon => &self.epsilon,
        }
    }

    pub fn columns(&self) -> [&[f64]; 3] {
        [&self.alpha, &self.sigma, &self.epsilon]
    }

    pub fn dof(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_zero_column(&self, axis: Axis) -> bool {
        self.column(axis).iter().all(|v| *v == 0.0)
    }

    /// `(q − o)·A` without scaling.
    pub fn project_offset(&self, offset: &[f64]) -> [f64; 3] {
        let c = self.columns();
        [dot(offset, c[0]), dot(offset, c[1]), dot(offset, c[2])]
    }

    /// `A·w` for a 3-vector `w`.
    pub fn expand(&self, w: [f64; 3]) -> Vec<f64> {
        let c = self.columns();
        (0..self.dof())
            .map(|j| c[0][j] * w[0] + c[1][j] * w[1] + c[2][j] * w[2])
            .collect()
    }

    /// Checks shape, unit-or-zero columns and pairwise orthogonality.
    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        for axis in Axis::ALL {
            let col = self.column(axis);
            check_len("projection column", n, col.len())?;
            check_finite("projection column", col)?;
            let norm = dot(col, col).sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > COLUMN_TOL {
                return Err(Error::Invalid(format!(
                    "column {} must be unit or zero (norm {norm})",
                    axis.name()
                )));
            }
        }
        let c = self.columns();
        for (i, k) in [(0, 1), (0, 2), (1, 2)] {
            let d = dot(c[i], c[k]);
            if d.abs() > COLUMN_TOL {
                return Err(Error::Invalid(format!(
                    "columns {} and {} not orthogonal (dot {d})",
                    Axis::ALL[i].name(),
                    Axis::ALL[k].name()
                )));
            }
        }
        Ok(())
    }
}

/// Forward scaling δ and inverse scaling δ*.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    pub delta: [f64; 3],
    pub delta_star: [f64; 3],
}

impl ScalingFactors {
    pub const UNIT: ScalingFactors = ScalingFactors {
        delta: [1.0; 3],
        delta_star: [1.0; 3],
    };

    /// δ* = 1/δ, or 0 where δ = 0.
    pub fn from_delta(delta: [f64; 3]) -> Self {
        let delta_star = delta.map(|d| if d == 0.0 { 0.0 } else { 1.0 / d });
        Self { delta, delta_star }
    }

    /// δ = 1/range, or 0 where range = 0.
    pub fn from_ranges(ranges: [f64; 3]) -> Self {
        Self::from_delta(ranges.map(|r| if r == 0.0 { 0.0 } else { 1.0 / r }))
    }

    pub fn with_zeroed(mut self, axis: Axis) -> Self {
        self.delta[axis.index()] = 0.0;
        self.delta_star[axis.index()] = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_finite("delta", &self.delta)?;
        check_finite("delta_star", &self.delta_star)?;
        for k in 0..3 {
            let (d, ds) = (self.delta[k], self.delta_star[k]);
            if d < 0.0 || ds < 0.0 {
                return Err(Error::Invalid(format!("scaling on axis {k} is negative")));
            }
            if (d == 0.0) != (ds == 0.0) {
                return Err(Error::Invalid(format!(
                    "axis {k}: delta and delta_star must be zero together"
                )));
            }
            if d > 0.0 && (d * ds - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!(
                    "axis {k}: delta * delta_star = {} != 1",
                    d * ds
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMethod {
    Empirical,
    Ransac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub method: MappingMethod,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn new(method: MappingMethod) -> Self {
        Self {
            method,
            seed: None,
            dataset_digest: None,
            notes: Vec::new(),
        }
    }
}

/// Everything needed to move one hand in and out of the subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct TeleopMapping {
    pub hand_id: String,
    pub origin: JointPose,
    pub a: ProjectionMatrix,
    pub scaling: ScalingFactors,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingDoc {
    hand_id: String,
    dof: usize,
    origin: Vec<f64>,
    #[serde(rename = "A")]
    a: ProjectionMatrix,
    delta: [f64; 3],
    delta_star: [f64; 3],
    provenance: Provenance,
}

impl TeleopMapping {
    pub fn dof(&self) -> usize {
        self.origin.len()
    }

    /// Checks dimensions, column shape and scaling invariants.
    pub fn validate(&self) -> Result<()> {
        check_finite("origin", self.origin.as_slice())?;
        check_len("projection matrix rows", self.dof(), self.a.dof())?;
        self.a.validate()?;
        self.scaling.validate()
    }

    /// Additionally checks that the mapping fits `model` and its origin lies within limits.
    pub fn validate_for(&self, model: &HandModel) -> Result<()> {
        self.validate()?;
        check_len("mapping dof vs hand model", model.dof, self.dof())?;
        if !model.within_limits(&self.origin, 1e-12) {
            return Err(Error::Invalid(format!(
                "origin of mapping \"{}\" lies outside the joint limits of \"{}\"",
                self.hand_id, model.hand_id
            )));
        }
        Ok(())
    }

    fn to_doc(&self) -> MappingDoc {
        MappingDoc {
            hand_id: self.hand_id.clone(),
            dof: self.dof(),
            origin: self.origin.0.clone(),
            a: self.a.clone(),
            delta: self.scaling.delta,
            delta_star: self.scaling.delta_star,
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: MappingDoc = jsonio::from_tagged_str(text, SCHEMA)?;
        check_len("mapping origin", doc.dof, doc.origin.len())?;
        let m = TeleopMapping {
            hand_id: doc.hand_id,
            origin: JointPose(doc.origin),
            a: doc.a,
            scaling: ScalingFactors {
                delta: doc.delta,
                delta_star: doc.delta_star,
            },
            provenance: doc.provenance,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_json_string(&self) -> Result<String> {
        jsonio::to_tagged_document(&self.to_doc(), SCHEMA)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    fn offset(&self, q: &JointPose) -> Result<Vec<f64>> {
        check_len("joint pose", self.dof(), q.len())?;
        check_finite("joint pose", q.as_slice())?;
        Ok(q.0.iter().zip(&self.origin.0).map(|(a, b)| a - b).collect())
    }

    /// Unscaled projection `(q − o)·A`.
    pub fn project_raw(&self, q: &JointPose) -> Result<[f64; 3]> {
        Ok(self.a.project_offset(&self.offset(q)?))
    }
}

/// ψ = ((q − o)·A) ⊙ δ
pub fn project_to_subspace(m: &TeleopMapping, q: &JointPose) -> Result<TeleopPoint> {
    let raw = m.project_raw(q)?;
    let d = m.scaling.delta;
    Ok(TeleopPoint([raw[0] * d[0], raw[1] * d[1], raw[2] * d[2]]))
}

/// q = (ψ ⊙ δ*)·Aᵀ + o. The result is not clamped to joint limits.
pub fn project_from_subspace(m: &TeleopMapping, psi: &TeleopPoint) -> Result<JointPose> {
    check_finite("teleop point", &psi.0)?;
    let ds = m.scaling.delta_star;
    let w = [psi.0[0] * ds[0], psi.0[1] * ds[1], psi.0[2] * ds[2]];
    let offset = m.a.expand(w);
    Ok(JointPose(
        offset.iter().zip(&m.origin.0).map(|(x, o)| x + o).collect(),
    ))
}

/// Master pose straight to slave pose, also returning the intermediate ψ.
pub fn teleop_map(
    master: &TeleopMapping,
    slave: &TeleopMapping,
    q_master: &JointPose,
) -> Result<(JointPose, TeleopPoint)> {
    let raw = master.project_raw(q_master)?;
    let dm = master.scaling.delta;
    let ds = slave.scaling.delta_star;
    let psi = [raw[0] * dm[0], raw[1] * dm[1], raw[2] * dm[2]];
    let w = [psi[0] * ds[0], psi[1] * ds[1], psi[2] * ds[2]];
    let q: Vec<f64> = slave
        .a
        .expand(w)
        .iter()
        .zip(&slave.origin.0)
        .map(|(x, o)| x + o)
        .collect();
    Ok((JointPose(q), TeleopPoint(psi)))
}

/// Per-axis scaling from extrema poses, projected with δ = 1.
///
/// The range along an axis is `|max| + |min|` of the projected values, which
/// equals `max − min` only when the origin lies between the extremes.
pub fn compute_scaling(
    origin: &JointPose,
    a: &ProjectionMatrix,
    extrema: &[JointPose],
) -> Result<ScalingFactors> {
    if extrema.is_empty() {
        return Err(Error::Empty("extrema poses".into()));
    }
    check_len("projection matrix rows", origin.len(), a.dof())?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for pose in extrema {
        check_len("extrema pose", origin.len(), pose.len())?;
        check_finite("extrema pose", pose.as_slice())?;
        let offset: Vec<f64> = pose.0.iter().zip(&origin.0).map(|(q, o)| q - o).collect();
        let p = a.project_offset(&offset);
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let ranges = [0, 1, 2].map(|k| hi[k].abs() + lo[k].abs());
    Ok(ScalingFactors::from_ranges(ranges))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_mapping() -> TeleopMapping {
        TeleopMapping {
            hand_id: "t3".into(),
            origin: JointPose(vec![0.1, 0.1, 0.1]),
            a: ProjectionMatrix::from_columns([
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ]),
            scaling: ScalingFactors::from_delta([0.5, 1.0, 2.0]),
            provenance: Provenance::new(MappingMethod::Empirical),
        }
    }

    fn oracle_project(m: &TeleopMapping, q: &[f64]) -> [f64; 3] {
        // element-by-element dot products, written independently of the library path
        let mut out = [0.0; 3];
        for (k, col) in [&m.a.alpha, &m.a.sigma, &m.a.epsilon].iter().enumerate() {
            let mut s = 0.0;
            for j in 0..q.len() {
                s += (q[j] - m.origin.0[j]) * col[j];
            }
            out[k] = s * m.scaling.delta[k];
        }
        out
    }

    #[test]
    fn origin_maps_to_zero() {
        let m = identity_mapping();
        assert_eq!(
            project_to_subspace(&m, &m.origin).unwrap(),
            TeleopPoint::ZERO
        );
        assert_eq!(
            project_from_subspace(&m, &TeleopPoint::ZERO).unwrap(),
            m.origin
        );
    }

    #[test]
    fn three_dof_example() {
        let m = identity_mapping();
        let q = vec![1.1, 0.6, 0.35];
        let psi = project_to_subspace(&m, &JointPose(q.clone())).unwrap();
        let expected = oracle_project(&m, &q);
        for k in 0..3 {
            assert!((psi.0[k] - 0.5).abs() < 1e-12);
            assert!((psi.0[k] - expected[k]).abs() < 1e-15);
        }
        assert_eq!(m.scaling.delta_star, [2.0, 1.0, 0.5]);
        let back = project_from_subspace(&m, &TeleopPoint([0.5, 0.5, 0.5])).unwrap();
        for (a, b) in back.0.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scaled_axis_contributes_nothing() {
        let mut m = identity_mapping();
        m.scaling = m.scaling.with_zeroed(Axis::Alpha);
        let q = project_from_subspace(&m, &TeleopPoint([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(q, m.origin);
    }

    #[test]
    fn schunk_table_columns_project_open_motion() {
        let s = 1.0 / 3f64.sqrt();
        let m = TeleopMapping {
            hand_id: "schunk".into(),
            origin: JointPose(vec![0.0; 7]),
            a: ProjectionMatrix::from_columns([
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, s, 0.0, s, 0.0, s, 0.0],
                vec![0.0, 0.0, s, 0.0, s, 0.0, s],
            ]),
            scaling: ScalingFactors::UNIT,
            provenance: Provenance::new(MappingMethod::Empirical),
        };
        let q = JointPose(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let psi = project_to_subspace(&m, &q).unwrap();
        assert!(psi.0[0].abs() < 1e-12);
        assert!((psi.0[1] - 1.732).abs() < 1e-3);
        assert!(psi.0[2].abs() < 1e-12);
    }

    #[test]
    fn errors_on_bad_input() {
        let m = identity_mapping();
        assert!(matches!(
            project_to_subspace(&m, &JointPose(vec![0.0; 2])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            project_to_subspace(&m, &JointPose(vec![0.0, f64::INFINITY, 0.0])),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            project_from_subspace(&m, &TeleopPoint([f64::NAN, 0.0, 0.0])),
            Err(Error::NonFinite(_))
        ));
        assert!(teleop_map(&m, &m, &JointPose(vec![0.0])).is_err());
    }

    #[test]
    fn scaling_examples() {
        let origin = JointPose(vec![0.0; 3]);
        let a = ProjectionMatrix::from_columns([
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let extrema = vec![
            JointPose(vec![0.0, -0.3, -2.0]),
            JointPose(vec![0.0, 0.7, 2.0]),
        ];
        let s = compute_scaling(&origin, &a, &extrema).unwrap();
        assert_eq!(s.delta[0], 0.0);
        assert_eq!(s.delta_star[0], 0.0);
        assert!((s.delta[1] - 1.0).abs() < 1e-12 && (s.delta_star[1] - 1.0).abs() < 1e-12);
        assert!((s.delta[2] - 0.25).abs() < 1e-15 && (s.delta_star[2] - 4.0).abs() < 1e-15);
        assert!(compute_scaling(&origin, &a, &[]).is_err());
    }

    #[test]
    fn equal_extrema_use_the_literal_range() {
        // both extremes at +0.4: |max| + |min| = 0.8, not max − min = 0
        let origin = JointPose(vec![0.0; 3]);
        let a = ProjectionMatrix::from_columns([
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let s = compute_scaling(&origin, &a, &[JointPose(vec![0.4, 0.0, 0.0])]).unwrap();
        assert!((s.delta[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn mapping_file_round_trip_is_byte_identical() {
        let mut m = identity_mapping();
        m.provenance.seed = Some(7);
        m.provenance.notes.push("hello".into());
        let text = m.to_json_string().unwrap();
        assert!(text.contains("\"schema\": \"teleop-mapping/1\""));
        let back = TeleopMapping::from_json_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json_string().unwrap(), text);
    }

    #[test]
    fn invalid_mapping_files_are_rejected() {
        let mut m = identity_mapping();
        m.a.alpha = vec![2.0, 0.0, 0.0];
        assert!(TeleopMapping::from_json_str(&m.to_json_string().unwrap()).is_err());
        let mut m = identity_mapping();
        m.a.sigma = vec![1.0, 0.0, 0.0];
        assert!(m.validate().is_err());
        let mut m = identity_mapping();
        m.scaling.delta_star[0] = 3.0;
        assert!(m.validate().is_err());
    }
}
