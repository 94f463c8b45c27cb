//! Poses, camera-frame transforms and the bifurcation pose back-out.
//!
//! Conventions: the CT frame is right handed and in millimetres. A [`Pose`]
//! stores the camera position and a rotation whose columns are the camera
//! axes `p_x, p_y, p_z` expressed in CT coordinates, `p_z` being the viewing
//! direction. Camera-frame vectors map to CT as `R * v`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{AirwayId, AirwaySkeleton, Bifurcation};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("direction points behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("expected a unit vector, norm is {0}")]
    NotUnit(f64),
    #[error("rotation is not orthonormal with det +1")]
    InvalidRotation,
    #[error("roll about the parent axis is indeterminate")]
    RollIndeterminate,
    #[error("mismatched input lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least {needed} child directions are required, got {got}")]
    TooFewChildren { needed: usize, got: usize },
    #[error("child assignment is invalid: {0}")]
    Assignment(String),
    #[error("invalid camera model: {0}")]
    Camera(String),
}

/// Angle between two (not necessarily unit) vectors in radians, accurate
/// near 0 and π.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Some unit vector orthogonal to `v`.
pub fn any_perpendicular(v: &Vec3) -> Vec3 {
    let helper = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&helper).normalize()
}

/// Smallest rotation taking unit vector `from` onto unit vector `to`.
///
/// Antiparallel inputs rotate by π about an arbitrary perpendicular axis.
pub fn minimal_rotation(from: &Vec3, to: &Vec3) -> Rotation3<f64> {
    let c = from.cross(to);
    let d = from.dot(to);
    if d > -0.5 {
        // R = I + [c]x + [c]x^2 / (1 + d), exact to rounding at small angles.
        let k = Matrix3::new(0.0, -c.z, c.y, c.z, 0.0, -c.x, -c.y, c.x, 0.0);
        let m = Matrix3::identity() + k + k * k / (1.0 + d);
        Rotation3::from_matrix_unchecked(m)
    } else if c.norm() > 1e-12 {
        Rotation3::from_axis_angle(&Unit::new_normalize(c), c.norm().atan2(d))
    } else {
        Rotation3::from_axis_angle(&Unit::new_normalize(any_perpendicular(from)), PI)
    }
}

/// Rotation by `angle` radians about unit `axis`.
pub fn axis_rotation(axis: &Vec3, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_unchecked(*axis), angle)
}

/// Wraps degrees into (-180, 180].
pub fn wrap_deg(angle: f64) -> f64 {
    let mut a = angle % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Rotation3<f64>,
}

impl Pose {
    pub fn new(position: Vec3, rotation: Matrix3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > ORTHONORMAL_TOLERANCE || rotation.determinant() <= 0.0 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            position,
            rotation: Rotation3::from_matrix_unchecked(rotation),
        })
    }

    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Rotation3::identity(),
        }
    }

    /// Canonical frame looking along `dir` (any roll; fixed by convention).
    pub fn looking_along(position: Vec3, dir: &Vec3) -> Self {
        let z = dir.normalize();
        let mut x = Vec3::y().cross(&z);
        if x.norm() < 1e-6 {
            x = Vec3::z().cross(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            position,
            rotation: Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])),
        }
    }

    pub fn p_x(&self) -> Vec3 {
        self.rotation.matrix().column(0).into_owned()
    }

    pub fn p_y(&self) -> Vec3 {
        self.rotation.matrix().column(1).into_owned()
    }

    pub fn p_z(&self) -> Vec3 {
        self.rotation.matrix().column(2).into_owned()
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let m = self.rotation.matrix();
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(position: [f64; 3], rotation: [f64; 9]) -> Result<Self, GeometryError> {
        Self::new(Vec3::from(position), Matrix3::from_row_slice(&rotation))
    }

    /// Re-orthonormalizes the rotation after long chains of compositions.
    pub fn renormalized(mut self) -> Self {
        self.rotation.renormalize();
        self
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    rotation: [f64; 9],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            position: self.position.into(),
            rotation: self.rotation_row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Pose::from_row_major(r.position, r.rotation).map_err(serde::de::Error::custom)
    }
}

pub fn to_camera_frame(pose: &Pose, point_ct: &Vec3) -> Vec3 {
    pose.rotation.inverse() * (point_ct - pose.position)
}

pub fn from_camera_frame(pose: &Pose, point_cam: &Vec3) -> Vec3 {
    pose.rotation * point_cam + pose.position
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Full cone angle in degrees.
    pub fov_deg: f64,
    pub max_vis_dist_mm: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov_deg: 60.0,
            max_vis_dist_mm: 30.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(GeometryError::Camera(format!("fov {} deg", self.fov_deg)));
        }
        if self.max_vis_dist_mm.is_nan() || self.max_vis_dist_mm <= 0.0 {
            return Err(GeometryError::Camera(format!(
                "max distance {} mm",
                self.max_vis_dist_mm
            )));
        }
        Ok(())
    }

    pub fn half_fov_rad(&self) -> f64 {
        (self.fov_deg * 0.5).to_radians()
    }

    /// Visibility of a camera-frame offset.
    pub fn sees_camera_point(&self, offset_cam: &Vec3) -> bool {
        let dist = offset_cam.norm();
        dist <= self.max_vis_dist_mm
            && offset_cam.z > MIN_VISIBLE_DEPTH_MM
            && angle_between(&Vec3::z(), offset_cam) <= self.half_fov_rad()
    }
}

/// Camera-frame airway direction as XYZ Euler angles (degrees): rotating +z
/// by `alpha` about X and then by `beta` about Y yields the direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AirwayAngles {
    pub alpha_deg: f64,
    pub beta_deg: f64,
}

pub fn dir_to_angles(dir_cam: &Vec3) -> Result<AirwayAngles, GeometryError> {
    let norm = dir_cam.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NotUnit(norm));
    }
    if dir_cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(dir_cam.z));
    }
    let alpha = (-dir_cam.y).atan2(dir_cam.x.hypot(dir_cam.z));
    let beta = dir_cam.x.atan2(dir_cam.z);
    Ok(AirwayAngles {
        alpha_deg: alpha.to_degrees(),
        beta_deg: beta.to_degrees(),
    })
}

pub fn angles_to_dir(angles: &AirwayAngles) -> Vec3 {
    let (sa, ca) = angles.alpha_deg.to_radians().sin_cos();
    let (sb, cb) = angles.beta_deg.to_radians().sin_cos();
    Vec3::new(ca * sb, -sa, ca * cb)
}

/// Points closer than this along the optical axis count as behind the lens,
/// so a camera sitting exactly on a centerline endpoint does not see it.
pub const MIN_VISIBLE_DEPTH_MM: f64 = 1e-6;

pub fn is_point_visible(pose: &Pose, camera: &CameraModel, point_ct: &Vec3) -> bool {
    let d = point_ct - pose.position;
    let along = d.dot(&pose.p_z());
    along > MIN_VISIBLE_DEPTH_MM
        && d.norm() <= camera.max_vis_dist_mm
        && angle_between(&pose.p_z(), &d) <= camera.half_fov_rad()
}

/// True when any centerline sample lies inside the viewing cone and range.
pub fn is_visible(pose: &Pose, camera: &CameraModel, centerline: &[Vec3]) -> bool {
    centerline
        .iter()
        .any(|p| is_point_visible(pose, camera, p))
}

/// Airway visibility at a pose: the visible set `a_t` and the airways whose
/// distal bifurcation point is itself visible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Visibility {
    pub visible: BTreeSet<AirwayId>,
    pub has_vis_child: BTreeSet<AirwayId>,
}

pub fn visible_airways(pose: &Pose, camera: &CameraModel, skel: &AirwaySkeleton) -> Visibility {
    let mut out = Visibility::default();
    let reach = camera.max_vis_dist_mm;
    for airway in skel.airways() {
        // Cheap reject: no sample can be in range if the whole segment
        // bounding sphere is out of range.
        let mid = (airway.proximal_point() + airway.distal_point()) * 0.5;
        if (mid - pose.position).norm() > reach + airway.length {
            continue;
        }
        if is_visible(pose, camera, &airway.centerline) {
            out.visible.insert(airway.id);
            if airway.is_bifurcating() && is_point_visible(pose, camera, &airway.distal_point()) {
                out.has_vis_child.insert(airway.id);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingError {
    pub e_p: f64,
    pub e_d: f64,
    pub e_r: f64,
}

/// Signed roll (degrees) of `frame` relative to `reference` about `frame`'s
/// pointing axis, after the minimal rotation that aligns the reference
/// pointing axis with it.
pub fn relative_roll_deg(reference: &Rotation3<f64>, frame: &Rotation3<f64>) -> f64 {
    let rz = reference.matrix().column(2).into_owned();
    let rx = reference.matrix().column(0).into_owned();
    let fz = frame.matrix().column(2).into_owned();
    let fx = frame.matrix().column(0).into_owned();
    let x_ref = minimal_rotation(&rz, &fz) * rx;
    x_ref.cross(&fx).dot(&fz).atan2(x_ref.dot(&fx)).to_degrees()
}

pub fn tracking_errors(true_pose: &Pose, est_pose: &Pose) -> TrackingError {
    let e_p = (true_pose.position - est_pose.position).norm();
    let e_d = angle_between(&true_pose.p_z(), &est_pose.p_z()).to_degrees();
    let e_r = relative_roll_deg(&est_pose.rotation, &true_pose.rotation).abs();
    TrackingError { e_p, e_d, e_r }
}

/// Roll about the parent axis that best aligns observed child directions with
/// the CT child directions, in degrees.
///
/// `obs_child_dirs` must already be in a frame where the observed parent
/// direction equals `parent_dir`. The closed-form weighted 2-D Procrustes
/// solution on the plane orthogonal to the axis seeds a bracketed
/// golden-section polish of the weighted mean angular offset; the polish is
/// kept only if it lowers that objective.
pub fn optimal_roll(
    parent_dir: &Vec3,
    obs_child_dirs: &[Vec3],
    ct_child_dirs: &[Vec3],
    weights: &[f64],
) -> Result<f64, GeometryError> {
    if obs_child_dirs.len() != ct_child_dirs.len() {
        return Err(GeometryError::LengthMismatch(
            obs_child_dirs.len(),
            ct_child_dirs.len(),
        ));
    }
    if weights.len() != obs_child_dirs.len() {
        return Err(GeometryError::LengthMismatch(
            weights.len(),
            obs_child_dirs.len(),
        ));
    }
    if obs_child_dirs.is_empty() {
        return Err(GeometryError::TooFewChildren { needed: 1, got: 0 });
    }
    let n = parent_dir;
    let mut terms = Vec::with_capacity(obs_child_dirs.len());
    let (mut sin_sum, mut cos_sum) = (0.0, 0.0);
    for ((o, c), &w) in obs_child_dirs.iter().zip(ct_child_dirs).zip(weights) {
        let u = o - n * o.dot(n);
        let v = c - n * c.dot(n);
        sin_sum += w * n.dot(&u.cross(&v));
        cos_sum += w * u.dot(&v);
        terms.push(RollTerm {
            axial: n * o.dot(n),
            radial: u,
            normal: n.cross(&u),
            target: *c,
            weight: w,
        });
    }
    if sin_sum.hypot(cos_sum) < 1e-12 {
        return Err(GeometryError::RollIndeterminate);
    }
    let seed = sin_sum.atan2(cos_sum);
    let objective = |theta: f64| -> f64 {
        let (s, c) = theta.sin_cos();
        terms
            .iter()
            .map(|t| t.weight * angle_between(&(t.axial + t.radial * c + t.normal * s), &t.target))
            .sum()
    };

    let polished = golden_section(&objective, seed - 0.35, seed + 0.35, 1e-10);
    let best = if objective(polished) < objective(seed) {
        polished
    } else {
        seed
    };
    Ok(wrap_deg(best.to_degrees()))
}

/// One child pairing, with the observed direction split about the roll axis.
struct RollTerm {
    axial: Vec3,
    radial: Vec3,
    normal: Vec3,
    target: Vec3,
    weight: f64,
}

fn golden_section(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Camera-frame measurement of one bifurcation: the parent airway's tip
/// (the bifurcation point) and direction, and the observed child directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationMeasurement {
    pub parent_tip_cam: Vec3,
    pub parent_dir_cam: Vec3,
    pub child_dirs_cam: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backout {
    pub pose: Pose,
    /// Roll about the CT parent axis applied after parent alignment (degrees).
    pub roll_about_parent_deg: f64,
    /// Observed child directions mapped into CT by the recovered rotation.
    pub aligned_child_dirs: Vec<Vec3>,
    /// CT child directions paired with `aligned_child_dirs`.
    pub ct_child_dirs: Vec<Vec3>,
    /// Mean angular offset between paired child directions (degrees).
    pub residual_deg: f64,
}

/// Recovers the camera pose from a bifurcation measurement.
///
/// `assignment[i]` is the index into `bif.child_dirs` matched to
/// `meas.child_dirs_cam[i]`. The rotation first takes the observed parent
/// direction onto the CT parent direction (minimal rotation), then applies
/// the optimal roll about that axis; the position follows from the parent
/// tip: `bif.point - R * tip`.
pub fn backout_pose(
    bif: &Bifurcation,
    meas: &BifurcationMeasurement,
    assignment: &[usize],
) -> Result<Backout, GeometryError> {
    if meas.child_dirs_cam.len() != assignment.len() {
        return Err(GeometryError::LengthMismatch(
            meas.child_dirs_cam.len(),
            assignment.len(),
        ));
    }
    if assignment.len() < 2 {
        return Err(GeometryError::TooFewChildren {
            needed: 2,
            got: assignment.len(),
        });
    }
    for (i, &a) in assignment.iter().enumerate() {
        if a >= bif.child_dirs.len() {
            return Err(GeometryError::Assignment(format!(
                "child index {a} out of range"
            )));
        }
        if assignment[..i].contains(&a) {
            return Err(GeometryError::Assignment(format!(
                "child index {a} used twice"
            )));
        }
    }

    let align = minimal_rotation(&meas.parent_dir_cam, &bif.parent_dir);
    let obs: Vec<Vec3> = meas.child_dirs_cam.iter().map(|d| align * d).collect();
    let ct: Vec<Vec3> = assignment.iter().map(|&a| bif.child_dirs[a]).collect();
    let weights = vec![1.0; obs.len()];
    let roll = optimal_roll(&bif.parent_dir, &obs, &ct, &weights)?;
    let rotation = axis_rotation(&bif.parent_dir, roll.to_radians()) * align;
    let aligned: Vec<Vec3> = meas.child_dirs_cam.iter().map(|d| rotation * d).collect();
    let residual_deg = aligned
        .iter()
        .zip(&ct)
        .map(|(a, c)| angle_between(a, c).to_degrees())
        .sum::<f64>()
        / aligned.len() as f64;
    let position = bif.point - rotation * meas.parent_tip_cam;
    Ok(Backout {
        pose: Pose { position, rotation },
        roll_about_parent_deg: roll,
        aligned_child_dirs: aligned,
        ct_child_dirs: ct,
        residual_deg,
    })
}
