//! Source/detector rig geometry and the perspective projection math.
//!
//! `K` views are spaced every `360/K` degrees around the world z-axis through
//! a common isocenter. View `k` places the point source at angle
//! `theta_k = k * 360 / K`: the source sits `sad` mm from the isocenter, the
//! detector center lies on the same rotated axis `sdd` mm from the source, on
//! the far side. Detector coordinates are millimeters in the detector plane:
//! `u` along the rotated in-plane axis, `v` along world z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;

/// Perspective divides closer to the source plane than this are rejected.
pub const MIN_SOURCE_PLANE_DISTANCE_MM: f64 = 1e-6;

/// Flat pixel detector: grid shape and pixel pitch. Pixel `(iu, iv)` has its
/// center at `u = (iu - (nu-1)/2) * pitch_u`, likewise for `v`, so the grid
/// is centered on the detector origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub nu: usize,
    pub nv: usize,
    pub pitch_u_mm: f64,
    pub pitch_v_mm: f64,
}

impl Default for Detector {
    fn default() -> Self {
        Detector {
            nu: 512,
            nv: 512,
            pitch_u_mm: 1.0,
            pitch_v_mm: 1.0,
        }
    }
}

impl Detector {
    /// Detector-plane mm coordinates of the center of pixel `(iu, iv)`.
    pub fn pixel_center_mm(&self, iu: usize, iv: usize) -> (f64, f64) {
        (
            (iu as f64 - (self.nu as f64 - 1.0) / 2.0) * self.pitch_u_mm,
            (iv as f64 - (self.nv as f64 - 1.0) / 2.0) * self.pitch_v_mm,
        )
    }

    /// Continuous pixel coordinates of a detector-plane mm position.
    pub fn mm_to_px(&self, u_mm: f64, v_mm: f64) -> (f64, f64) {
        (
            u_mm / self.pitch_u_mm + (self.nu as f64 - 1.0) / 2.0,
            v_mm / self.pitch_v_mm + (self.nv as f64 - 1.0) / 2.0,
        )
    }

    /// Inverse of [`Detector::mm_to_px`] for continuous pixel coordinates.
    pub fn px_to_mm(&self, pu: f64, pv: f64) -> (f64, f64) {
        (
            (pu - (self.nu as f64 - 1.0) / 2.0) * self.pitch_u_mm,
            (pv - (self.nv as f64 - 1.0) / 2.0) * self.pitch_v_mm,
        )
    }

    /// Half extents of the sensitive area in mm.
    pub fn half_extent_mm(&self) -> (f64, f64) {
        (
            self.nu as f64 * self.pitch_u_mm / 2.0,
            self.nv as f64 * self.pitch_v_mm / 2.0,
        )
    }

    /// Whether a detector-plane mm position lies on the sensitive area.
    pub fn contains_mm(&self, u_mm: f64, v_mm: f64) -> bool {
        let (hu, hv) = self.half_extent_mm();
        u_mm.abs() <= hu && v_mm.abs() <= hv
    }
}

/// An oriented ray: origin `a` and unit direction `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    pub a: Point3,
    pub n: Vec3,
}

impl Line3 {
    /// Construct with `n` normalized; `dir` must be nonzero.
    pub fn new(a: Point3, dir: Vec3) -> Self {
        Line3 {
            a,
            n: dir.normalize(),
        }
    }

    /// Perpendicular distance from `p` to the (infinite) line.
    pub fn distance_to(&self, p: &Point3) -> f64 {
        let d = p - self.a;
        (d - self.n * d.dot(&self.n)).norm()
    }
}

/// One view of the rotating rig: everything needed to project world points
/// onto its detector and to back-project detector positions into rays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    pub view_index: usize,
    pub n_views: usize,
    /// Source-axis (isocenter) distance in mm.
    pub sad_mm: f64,
    /// Source-detector distance in mm.
    pub sdd_mm: f64,
    pub detector: Detector,
    /// World isocenter the rig rotates about.
    pub iso_mm: [f64; 3],
}

impl ProjectionGeometry {
    pub fn theta_deg(&self) -> f64 {
        self.view_index as f64 * 360.0 / self.n_views as f64
    }

    fn theta_rad(&self) -> f64 {
        self.theta_deg().to_radians()
    }

    pub fn iso(&self) -> Point3 {
        Point3::new(self.iso_mm[0], self.iso_mm[1], self.iso_mm[2])
    }

    /// Rotate `w` by the view angle about z (world from rig frame).
    fn rot(&self, w: Vec3) -> Vec3 {
        let (s, c) = self.theta_rad().sin_cos();
        Vec3::new(c * w.x - s * w.y, s * w.x + c * w.y, w.z)
    }

    /// Rotate `w` by the negative view angle (rig from world frame).
    fn rot_inv(&self, w: Vec3) -> Vec3 {
        let (s, c) = self.theta_rad().sin_cos();
        Vec3::new(c * w.x + s * w.y, -s * w.x + c * w.y, w.z)
    }

    /// World position of the point source.
    pub fn source(&self) -> Point3 {
        self.iso() + self.rot(Vec3::new(self.sad_mm, 0.0, 0.0))
    }

    /// World position of the detector center.
    pub fn detector_center(&self) -> Point3 {
        self.iso() + self.rot(Vec3::new(self.sad_mm - self.sdd_mm, 0.0, 0.0))
    }

    /// World direction of the detector `u` axis.
    pub fn u_hat(&self) -> Vec3 {
        self.rot(Vec3::new(0.0, 1.0, 0.0))
    }

    /// World direction of the detector `v` axis (always world z).
    pub fn v_hat(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, 1.0)
    }

    /// World position of a detector-plane mm coordinate.
    pub fn detector_point(&self, u_mm: f64, v_mm: f64) -> Point3 {
        self.detector_center() + self.u_hat() * u_mm + self.v_hat() * v_mm
    }

    /// Perspective-project a world point onto this view's detector plane.
    ///
    /// In the rig frame (source on +x), a point at `(x', y', z')` relative to
    /// the isocenter maps to `u = sdd * y' / (sad - x')` and
    /// `v = sdd * z' / (sad - x')`. Points at or behind the source plane
    /// (`sad - x'` below [`MIN_SOURCE_PLANE_DISTANCE_MM`]) are rejected.
    pub fn project_point(&self, p: &Point3) -> Result<(f64, f64)> {
        let q = self.rot_inv(p - self.iso());
        let denom = self.sad_mm - q.x;
        if denom <= MIN_SOURCE_PLANE_DISTANCE_MM {
            return Err(Error::ProjectionSingular {
                view: self.view_index,
                denom_mm: denom,
            });
        }
        Ok((self.sdd_mm * q.y / denom, self.sdd_mm * q.z / denom))
    }

    /// Ray through the source and a detector-plane mm coordinate.
    pub fn backproject(&self, u_mm: f64, v_mm: f64) -> Line3 {
        let s = self.source();
        Line3::new(s, self.detector_point(u_mm, v_mm) - s)
    }
}

/// Build the `n_views` geometries of a rig rotating about `iso`.
pub fn make_views(
    n_views: usize,
    sad_mm: f64,
    sdd_mm: f64,
    detector: Detector,
    iso: Point3,
) -> Result<Vec<ProjectionGeometry>> {
    if n_views == 0 {
        return Err(Error::Config("need at least one view".into()));
    }
    if !(sad_mm > 0.0 && sdd_mm > sad_mm) {
        return Err(Error::Config(format!(
            "need 0 < sad < sdd, got sad {sad_mm} sdd {sdd_mm}"
        )));
    }
    Ok((0..n_views)
        .map(|view_index| ProjectionGeometry {
            view_index,
            n_views,
            sad_mm,
            sdd_mm,
            detector,
            iso_mm: [iso.x, iso.y, iso.z],
        })
        .collect())
}
