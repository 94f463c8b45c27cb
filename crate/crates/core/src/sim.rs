//! Ground-truth bronchoscope trajectories.
//!
//! The simulated driver advances along the centerline of a root-to-target
//! airway path at constant speed. The camera points toward the centerline
//! point `lookahead_mm` further down the path, and its roll is carried by
//! parallel transport (the minimal rotation between consecutive pointing
//! directions). Optional jitter perturbs each frame independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{any_perpendicular, axis_rotation, minimal_rotation, Pose, Vec3};
use crate::skeleton::{Airway, AirwayId, AirwaySkeleton, SkeletonError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid path: {0}")]
    Path(String),
    #[error("invalid simulation parameter: {0}")]
    Params(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// A chain of airways where each one is the parent of the next, addressed by
/// arc length from the first airway's proximal point.
#[derive(Debug, Clone)]
pub struct CenterlinePath<'a> {
    airways: Vec<&'a Airway>,
    starts: Vec<f64>,
    length: f64,
}

impl<'a> CenterlinePath<'a> {
    pub fn new(skel: &'a AirwaySkeleton, ids: &[AirwayId]) -> Result<Self, SimError> {
        if ids.is_empty() {
            return Err(SimError::Path("empty path".into()));
        }
        let mut airways = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let a = skel
                .airway(*id)
                .ok_or_else(|| SimError::Path(format!("unknown airway {id}")))?;
            if i > 0 && a.parent_id != Some(ids[i - 1]) {
                return Err(SimError::Path(format!(
                    "airway {id} is not a child of airway {}",
                    ids[i - 1]
                )));
            }
            airways.push(a);
        }
        let mut starts = Vec::with_capacity(airways.len());
        let mut length = 0.0;
        for a in &airways {
            starts.push(length);
            length += a.length;
        }
        Ok(Self {
            airways,
            starts,
            length,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn airways(&self) -> &[&'a Airway] {
        &self.airways
    }

    /// Index of the airway containing arc length `s` (clamped to the chain).
    pub fn locate(&self, s: f64) -> usize {
        self.starts
            .iter()
            .rposition(|&start| start <= s)
            .unwrap_or(0)
    }

    /// Arc length of the start of airway `index`.
    pub fn start_of(&self, index: usize) -> f64 {
        self.starts[index]
    }

    /// Centerline point at `s`, extrapolated along the end tangents outside
    /// `[0, length]`.
    pub fn point(&self, s: f64) -> Vec3 {
        if s < 0.0 {
            let first = self.airways[0];
            return first.proximal_point() + first.proximal_tangent() * s;
        }
        if s > self.length {
            let last = self.airways[self.airways.len() - 1];
            return last.distal_point() + last.distal_tangent() * (s - self.length);
        }
        let i = self.locate(s);
        self.airways[i].point_at(s - self.starts[i]).0
    }

    pub fn tangent(&self, s: f64) -> Vec3 {
        let i = self.locate(s);
        self.airways[i].point_at(s - self.starts[i]).1
    }

    /// Pointing direction at `s`: toward the point `lookahead` further along
    /// (clamped at the chain end), or the tangent when that point coincides
    /// with the current one.
    pub fn heading(&self, s: f64, lookahead: f64) -> Vec3 {
        if lookahead > 0.0 {
            let ahead = (s + lookahead).min(self.length);
            if ahead - s > 1e-9 {
                let v = self.point(ahead) - self.point(s);
                let n = v.norm();
                if n > 1e-9 {
                    return v / n;
                }
            }
        }
        self.tangent(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub speed_mm_s: f64,
    pub frame_rate_hz: f64,
    /// Distance ahead along the path the camera points at; 0 follows the tangent.
    pub lookahead_mm: f64,
    /// Per-frame lateral position jitter, per axis (mm).
    pub lateral_jitter_mm: f64,
    /// Per-frame pointing jitter (deg).
    pub heading_jitter_deg: f64,
    /// Per-frame roll jitter about the pointing axis (deg).
    pub roll_jitter_deg: f64,
    /// Additive Gaussian noise on the reported insertion depth (mm).
    pub insertion_noise_mm: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            speed_mm_s: 10.0,
            frame_rate_hz: 30.0,
            lookahead_mm: 15.0,
            lateral_jitter_mm: 0.0,
            heading_jitter_deg: 0.0,
            roll_jitter_deg: 0.0,
            insertion_noise_mm: 0.0,
            seed: 0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.speed_mm_s > 0.0 && self.speed_mm_s.is_finite()) {
            return Err(SimError::Params(format!("speed_mm_s = {}", self.speed_mm_s)));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(SimError::Params(format!("frame_rate_hz = {}", self.frame_rate_hz)));
        }
        for (name, v) in [
            ("lookahead_mm", self.lookahead_mm),
            ("lateral_jitter_mm", self.lateral_jitter_mm),
            ("heading_jitter_deg", self.heading_jitter_deg),
            ("roll_jitter_deg", self.roll_jitter_deg),
            ("insertion_noise_mm", self.insertion_noise_mm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Params(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub t: f64,
    pub true_pose: Pose,
    pub insertion_mm: f64,
    /// Path airway the driver is in.
    pub airway: AirwayId,
}

/// Airways from the trachea down to `target`, inclusive.
pub fn plan_path(skel: &AirwaySkeleton, target: AirwayId) -> Result<Vec<AirwayId>, SimError> {
    Ok(skel.ancestry(target)?)
}

/// Camera frame at the trachea entrance looking down the trachea.
pub fn entrance_pose(skel: &AirwaySkeleton) -> Pose {
    let root = skel.root();
    Pose::looking_along(root.proximal_point(), &root.proximal_tangent())
}

/// Frames `k = 1..=N` with `N = ceil(L / v * f)`, `t = k / f` and arc length
/// `min(k v / f, L)`.
pub fn simulate(
    skel: &AirwaySkeleton,
    path: &[AirwayId],
    params: &SimParams,
) -> Result<Vec<TrajectoryFrame>, SimError> {
    params.validate()?;
    if path.first() != Some(&skel.root_id()) {
        return Err(SimError::Path("path must start at the trachea".into()));
    }
    let chain = CenterlinePath::new(skel, path)?;
    // Forgive rounding in the summed airway lengths before taking the ceiling.
    let n = (chain.length() / params.speed_mm_s * params.frame_rate_hz - 1e-9).ceil() as usize;
    let step = params.speed_mm_s / params.frame_rate_hz;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut base = entrance_pose(skel).rotation;
    let mut frames = Vec::with_capacity(n);
    for k in 1..=n {
        let s = (k as f64 * step).min(chain.length());
        let heading = chain.heading(s, params.lookahead_mm);
        let pz = base.matrix().column(2).into_owned();
        base = minimal_rotation(&pz, &heading) * base;

        let mut pose = Pose {
            position: chain.point(s),
            rotation: base,
        };
        jitter(&mut pose, params, &mut rng);
        let insertion_mm = s + gaussian(&mut rng, params.insertion_noise_mm);
        frames.push(TrajectoryFrame {
            t: k as f64 / params.frame_rate_hz,
            true_pose: pose,
            insertion_mm,
            airway: chain.airways()[chain.locate(s)].id,
        });
    }
    Ok(frames)
}

fn jitter(pose: &mut Pose, params: &SimParams, rng: &mut ChaCha8Rng) {
    if params.lateral_jitter_mm > 0.0 {
        let dx = gaussian(rng, params.lateral_jitter_mm);
        let dy = gaussian(rng, params.lateral_jitter_mm);
        pose.position += pose.p_x() * dx + pose.p_y() * dy;
    }
    if params.heading_jitter_deg > 0.0 {
        let pz = pose.p_z();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let base = any_perpendicular(&pz);
        let axis = axis_rotation(&pz, phi) * base;
        let angle = gaussian(rng, params.heading_jitter_deg).to_radians();
        pose.rotation = axis_rotation(&axis, angle) * pose.rotation;
    }
    if params.roll_jitter_deg > 0.0 {
        let angle = gaussian(rng, params.roll_jitter_deg).to_radians();
        pose.rotation = axis_rotation(&pose.p_z(), angle) * pose.rotation;
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}
