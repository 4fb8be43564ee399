//! The canonical grasp objects and their signed-distance geometry.
//!
//! Objects are placed without rotation: thickness (z) along the palm approach
//! axis and the long box side along palm y. Disks are cylinders about z.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::TeleopPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Disk,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraspType {
    Power,
    Precision,
}

impl GraspType {
    pub fn name(self) -> &'static str {
        match self {
            GraspType::Power => "power",
            GraspType::Precision => "precision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u8,
    pub primitive: Primitive,
    /// Extent along palm x, y, z in millimeters.
    pub dims: [f64; 3],
    pub grasp_type: GraspType,
    pub predicted_psi: TeleopPoint,
}

pub const OBJECT_COUNT: usize = 8;

/// Object id whose grasps anchor the subspace origin during fitting.
pub const ORIGIN_OBJECT: u8 = 8;

const TABLE: [(u8, Primitive, [f64; 3], GraspType, [f64; 3]); OBJECT_COUNT] = [
    (
        1,
        Primitive::Disk,
        [70.0, 70.0, 10.0],
        GraspType::Precision,
        [1.0, 0.5, 0.0],
    ),
    (
        2,
        Primitive::Disk,
        [110.0, 110.0, 10.0],
        GraspType::Precision,
        [1.0, 1.0, 0.0],
    ),
    (
        3,
        Primitive::Box,
        [45.0, 300.0, 10.0],
        GraspType::Precision,
        [0.0, 0.0, 0.0],
    ),
    (
        4,
        Primitive::Box,
        [70.0, 300.0, 10.0],
        GraspType::Precision,
        [0.0, 0.5, 0.0],
    ),
    (
        5,
        Primitive::Box,
        [100.0, 300.0, 10.0],
        GraspType::Precision,
        [0.0, 1.0, 0.0],
    ),
    (
        6,
        Primitive::Disk,
        [70.0, 70.0, 10.0],
        GraspType::Power,
        [1.0, 0.5, 1.0],
    ),
    (
        7,
        Primitive::Box,
        [45.0, 300.0, 10.0],
        GraspType::Power,
        [0.0, 0.0, 1.0],
    ),
    (
        8,
        Primitive::Box,
        [70.0, 300.0, 10.0],
        GraspType::Power,
        [0.0, 0.5, 1.0],
    ),
];

/// The eight reference objects with dimensions multiplied by `hand_scale`.
pub fn canonical_object_set(hand_scale: f64) -> Result<Vec<ObjectSpec>> {
    if !(hand_scale.is_finite() && hand_scale > 0.0) {
        return Err(Error::Invalid(format!(
            "hand_scale must be positive, got {hand_scale}"
        )));
    }
    Ok(TABLE
        .iter()
        .map(|&(id, primitive, dims, grasp_type, psi)| ObjectSpec {
            id,
            primitive,
            dims: dims.map(|d| d * hand_scale),
            grasp_type,
            predicted_psi: TeleopPoint(psi),
        })
        .collect())
}

/// Position of object `id` (1-based) in an object list ordered by id.
pub fn object_slot(id: u8) -> Result<usize> {
    if (1..=OBJECT_COUNT as u8).contains(&id) {
        Ok(id as usize - 1)
    } else {
        Err(Error::Invalid(format!("object id {id} outside 1..=8")))
    }
}

impl ObjectSpec {
    /// Half extents in meters.
    pub fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.dims[0], self.dims[1], self.dims[2]) * 0.0005
    }

    /// Width the hand has to span to enclose the object, in meters.
    pub fn grasp_width(&self) -> f64 {
        self.dims[0].min(self.dims[1]) * 1e-3
    }

    pub fn placed(&self, center: Point3<f64>) -> Solid {
        Solid {
            primitive: self.primitive,
            half: self.half_extents(),
            center,
        }
    }
}

/// An object instance at a position in the palm frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solid {
    pub primitive: Primitive,
    pub half: Vector3<f64>,
    pub center: Point3<f64>,
}

/// Signed distance and outward unit normal of the nearest surface feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceQuery {
    pub distance: f64,
    pub normal: Vector3<f64>,
}

impl Solid {
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.query(p).distance
    }

    pub fn query(&self, p: &Point3<f64>) -> SurfaceQuery {
        let local = p - self.center;
        match self.primitive {
            Primitive::Box => box_query(&local, &self.half),
            Primitive::Disk => disk_query(&local, self.half.x, self.half.z),
        }
    }

    /// Minimum signed distance along segment from `a` to `b` and the parameter where it occurs.
    /// The signed distance of a convex body is convex along a line, so a
    /// golden-section search finds the minimum.
    pub fn segment_distance(&self, a: &Point3<f64>, b: &Point3<f64>) -> (f64, f64) {
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let f = |t: f64| self.signed_distance(&(a + (b - a) * t));
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..40 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = f(x2);
            }
        }
        let mut best = if f1 <= f2 { (f1, x1) } else { (f2, x2) };
        for t in [0.0, 1.0] {
            let v = f(t);
            if v < best.0 {
                best = (v, t);
            }
        }
        best
    }
}

fn box_query(p: &Vector3<f64>, half: &Vector3<f64>) -> SurfaceQuery {
    let d = p.abs() - half;
    let outside = d.map(|v| v.max(0.0));
    let out_norm = outside.norm();
    if out_norm > 0.0 {
        let normal = Vector3::new(
            outside.x * p.x.signum(),
            outside.y * p.y.signum(),
            outside.z * p.z.signum(),
        ) / out_norm;
        return SurfaceQuery {
            distance: out_norm,
            normal,
        };
    }
    let axis = d.imax();
    let mut normal = Vector3::zeros();
    normal[axis] = if p[axis] >= 0.0 { 1.0 } else { -1.0 };
    SurfaceQuery {
        distance: d[axis],
        normal,
    }
}

fn disk_query(p: &Vector3<f64>, radius: f64, half_height: f64) -> SurfaceQuery {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let radial = if rho > 1e-15 {
        Vector3::new(p.x / rho, p.y / rho, 0.0)
    } else {
        Vector3::x()
    };
    let vertical = Vector3::new(0.0, 0.0, if p.z >= 0.0 { 1.0 } else { -1.0 });
    let dr = rho - radius;
    let dz = p.z.abs() - half_height;
    let (or, oz) = (dr.max(0.0), dz.max(0.0));
    let out_norm = (or * or + oz * oz).sqrt();
    if out_norm > 0.0 {
        return SurfaceQuery {
            distance: out_norm,
            normal: (radial * or + vertical * oz) / out_norm,
        };
    }
    if dr >= dz {
        SurfaceQuery {
            distance: dr,
            normal: radial,
        }
    } else {
        SurfaceQuery {
            distance: dz,
            normal: vertical,
        }
    }
}
