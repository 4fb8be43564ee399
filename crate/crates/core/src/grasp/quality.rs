//! Approximate force-closure quality from sampled support directions.
//!
//! Each contact contributes the edges of a discretized friction cone as unit
//! forces. The quality is `min_u max_i w_i·u` over a fixed set of unit
//! directions `u`, floored at zero: positive only when every sampled
//! direction is covered, which approximates the origin lying inside the
//! convex hull of the primitive wrenches.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use super::contact::{detect_contacts, Contact};
use super::objects::ObjectSpec;
use super::Grasp;
use crate::error::Result;
use crate::hand_model::{forward_kinematics, HandModel};
use crate::seeds;

pub const DEFAULT_DIRECTIONS: usize = 2048;
pub const DEFAULT_FRICTION: f64 = 0.5;
pub const CONE_EDGES: usize = 8;

const DIRECTION_STREAM: u64 = 0x5155_414c;
const DIRECTION_SEED: u64 = 0x0d15_ea5e;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WrenchSpace {
    /// Forces in the palm x-y plane and torque about z (3-D).
    Planar,
    /// Full force and torque (6-D).
    Spatial,
}

impl WrenchSpace {
    pub fn dim(self) -> usize {
        match self {
            WrenchSpace::Planar => 3,
            WrenchSpace::Spatial => 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QualityEvaluator {
    pub friction_mu: f64,
    pub space: WrenchSpace,
    directions: Vec<Vec<f64>>,
}

impl QualityEvaluator {
    /// Directions are drawn from a fixed seed, so scores are reproducible.
    pub fn new(friction_mu: f64, directions: usize, space: WrenchSpace) -> Self {
        let dim = space.dim();
        let mut rng = seeds::item_rng(DIRECTION_SEED, DIRECTION_STREAM, dim as u64);
        let mut dirs = Vec::with_capacity(directions);
        while dirs.len() < directions {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                dirs.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Self {
            friction_mu,
            space,
            directions: dirs,
        }
    }

    pub fn direction_count(&self) -> usize {
        self.directions.len()
    }

    /// Primitive unit wrenches of all contacts about `center`. Torques are
    /// divided by the largest contact lever so force and torque share a scale.
    pub fn wrenches(&self, contacts: &[Contact], center: &Point3<f64>) -> Vec<Vec<f64>> {
        let lever = contacts
            .iter()
            .map(|c| (c.point - center).norm())
            .fold(0.0_f64, f64::max);
        let lever = if lever > 1e-12 { lever } else { 1.0 };
        let mut out = Vec::new();
        for c in contacts {
            let r = c.point - center;
            match self.space {
                WrenchSpace::Spatial => {
                    let inward = -c.normal;
                    let (t1, t2) = tangent_basis(&inward);
                    for k in 0..CONE_EDGES {
                        let th = std::f64::consts::TAU * k as f64 / CONE_EDGES as f64;
                        let f = (inward + (t1 * th.cos() + t2 * th.sin()) * self.friction_mu)
                            .normalize();
                        let tau = r.cross(&f) / lever;
                        out.push(vec![f.x, f.y, f.z, tau.x, tau.y, tau.z]);
                    }
                }
                WrenchSpace::Planar => {
                    let n = Vector3::new(-c.normal.x, -c.normal.y, 0.0);
                    if n.norm() < 1e-12 {
                        continue;
                    }
                    let n = n.normalize();
                    let t = Vector3::new(-n.y, n.x, 0.0);
                    for s in [1.0, -1.0] {
                        let f = (n + t * (s * self.friction_mu)).normalize();
                        let tau = (r.x * f.y - r.y * f.x) / lever;
                        out.push(vec![f.x, f.y, tau]);
                    }
                }
            }
        }
        out
    }

    pub fn score_contacts(&self, contacts: &[Contact], center: &Point3<f64>) -> f64 {
        let w = self.wrenches(contacts, center);
        if w.is_empty() {
            return 0.0;
        }
        let worst = self
            .directions
            .iter()
            .map(|u| {
                w.iter()
                    .map(|wi| wi.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        worst.max(0.0)
    }
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Quality of a stored grasp, recomputing its contacts from forward kinematics.
pub fn grasp_quality(
    model: &HandModel,
    grasp: &Grasp,
    obj: &ObjectSpec,
    evaluator: &QualityEvaluator,
) -> Result<f64> {
    let center = Point3::from(grasp.object_pose);
    let kin = forward_kinematics(model, &grasp.q)?;
    let contacts = detect_contacts(model, &kin, &obj.placed(center));
    Ok(evaluator.score_contacts(&contacts, &center))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contact(finger: usize, point: [f64; 3], normal: [f64; 3]) -> Contact {
        Contact {
            finger,
            link: 0,
            distal: true,
            point: Point3::from(point),
            normal: Vector3::from(normal).normalize(),
        }
    }

    fn det3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
        a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0])
    }

    /// Origin strictly inside the 3-D convex hull, by enumerating every
    /// supporting plane through three of the points.
    fn origin_strictly_inside(points: &[Vec<f64>]) -> bool {
        let n = points.len();
        let mut facets = 0;
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let (a, b, c) = (&points[i], &points[j], &points[k]);
                    let ab: Vec<f64> = (0..3).map(|d| b[d] - a[d]).collect();
                    let ac: Vec<f64> = (0..3).map(|d| c[d] - a[d]).collect();
                    let side = |p: &[f64]| {
                        let ap: Vec<f64> = (0..3).map(|d| p[d] - a[d]).collect();
                        det3(&ab, &ac, &ap)
                    };
                    let sides: Vec<f64> = points.iter().map(|p| side(p)).collect();
                    let pos = sides.iter().any(|s| *s > 1e-12);
                    let neg = sides.iter().any(|s| *s < -1e-12);
                    if pos && neg || !(pos || neg) {
                        continue;
                    }
                    facets += 1;
                    let o = side(&[0.0, 0.0, 0.0]);
                    if (pos && o <= 1e-12) || (neg && o >= -1e-12) {
                        return false;
                    }
                }
            }
        }
        facets > 0
    }

    #[test]
    fn no_contacts_scores_zero() {
        let ev = QualityEvaluator::new(0.5, 256, WrenchSpace::Spatial);
        assert_eq!(ev.score_contacts(&[], &Point3::origin()), 0.0);
    }

    #[test]
    fn single_contact_scores_zero() {
        let ev = QualityEvaluator::new(0.5, 2048, WrenchSpace::Spatial);
        let c = [contact(0, [0.03, 0.0, 0.0], [1.0, 0.0, 0.0])];
        assert_eq!(ev.score_contacts(&c, &Point3::origin()), 0.0);
        let ev = QualityEvaluator::new(0.5, 2048, WrenchSpace::Planar);
        assert_eq!(ev.score_contacts(&c, &Point3::origin()), 0.0);
    }

    #[test]
    fn antipodal_disk_pinch_is_force_closure_in_plane() {
        let ev = QualityEvaluator::new(0.5, 2048, WrenchSpace::Planar);
        let r = 0.035;
        let c = [
            contact(0, [r, 0.0, 0.0], [1.0, 0.0, 0.0]),
            contact(1, [-r, 0.0, 0.0], [-1.0, 0.0, 0.0]),
        ];
        let w = ev.wrenches(&c, &Point3::origin());
        assert_eq!(w.len(), 4);
        assert!(origin_strictly_inside(&w));
        assert!(ev.score_contacts(&c, &Point3::origin()) > 0.0);
    }

    #[test]
    fn same_side_pinch_is_not_closure() {
        let ev = QualityEvaluator::new(0.5, 2048, WrenchSpace::Planar);
        let r = 0.035;
        let a = 0.3_f64;
        let c = [
            contact(0, [r, 0.0, 0.0], [1.0, 0.0, 0.0]),
            contact(1, [r * a.cos(), r * a.sin(), 0.0], [a.cos(), a.sin(), 0.0]),
        ];
        let w = ev.wrenches(&c, &Point3::origin());
        assert!(!origin_strictly_inside(&w));
        assert_eq!(ev.score_contacts(&c, &Point3::origin()), 0.0);
    }

    #[test]
    fn planar_score_agrees_with_hull_oracle_on_disk_contacts() {
        // Three contacts on a disk at varying angles: positive quality iff the
        // origin is strictly inside the wrench hull (away from the boundary).
        let ev = QualityEvaluator::new(0.4, 4096, WrenchSpace::Planar);
        let r = 0.05;
        let mut checked = 0;
        for i in 0..24 {
            for j in 0..24 {
                let angles = [0.0, i as f64 * 0.26, j as f64 * 0.26 + 0.1];
                let c: Vec<Contact> = angles
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        contact(k, [r * a.cos(), r * a.sin(), 0.0], [a.cos(), a.sin(), 0.0])
                    })
                    .collect();
                let w = ev.wrenches(&c, &Point3::origin());
                let q = ev.score_contacts(&c, &Point3::origin());
                let inside = origin_strictly_inside(&w);
                if inside && q > 1e-3 || !inside && q == 0.0 {
                    checked += 1;
                } else if inside {
                    // near-boundary interior point: sampled directions may miss it
                    assert!(q >= 0.0);
                    checked += 1;
                } else {
                    panic!("positive quality {q} with origin outside hull at {angles:?}");
                }
            }
        }
        assert_eq!(checked, 576);
    }

    #[test]
    fn contact_order_does_not_matter() {
        let ev = QualityEvaluator::new(0.5, 1024, WrenchSpace::Spatial);
        let mut c = vec![
            contact(0, [0.03, 0.0, 0.0], [1.0, 0.0, 0.0]),
            contact(1, [-0.03, 0.01, 0.0], [-1.0, 0.2, 0.0]),
            contact(2, [0.0, -0.03, 0.004], [0.0, -1.0, 0.3]),
        ];
        let center = Point3::new(0.0, 0.0, 0.001);
        let q = ev.score_contacts(&c, &center);
        c.reverse();
        assert_eq!(q, ev.score_contacts(&c, &center));
        c.swap(0, 1);
        assert_eq!(q, ev.score_contacts(&c, &center));
    }

    #[test]
    fn three_finger_grip_has_positive_spatial_quality() {
        let ev = QualityEvaluator::new(0.5, 2048, WrenchSpace::Spatial);
        let r = 0.035;
        let c: Vec<Contact> = [0.0_f64, 2.1, 4.2]
            .iter()
            .enumerate()
            .map(|(k, a)| contact(k, [r * a.cos(), r * a.sin(), 0.0], [a.cos(), a.sin(), 0.0]))
            .collect();
        assert!(ev.score_contacts(&c, &Point3::origin()) > 0.0);
    }
}
