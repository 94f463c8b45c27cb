//! Airway observations: a ground-truth oracle and a parameterized noise model
//! emulating detector error modes (misses, position/angle noise, camera roll
//! noise, hallucinated bifurcations, airway id confusion).

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    angle_between, angles_to_dir, axis_rotation, dir_to_angles, is_point_visible, AirwayAngles,
    CameraModel, Pose, Vec3,
};
use crate::skeleton::{AirwayId, AirwaySkeleton};

/// Observation slots emitted per frame in bifurcation mode.
pub const BIFURCATION_SLOTS: usize = 4;

/// Observed angles are kept strictly inside the forward hemisphere.
const MAX_ANGLE_DEG: f64 = 89.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Up to four generic airways, nearest first.
    Bifurcation,
    /// One row per skeleton airway, classified by id.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirwayObservation {
    pub slot: usize,
    /// Airway id the row is classified as (direct mode only).
    pub airway: Option<AirwayId>,
    pub is_vis: bool,
    pub has_vis_child: bool,
    /// Camera-frame furthest visible centerline point (mm).
    pub tip_point_cam: [f64; 3],
    pub angles: AirwayAngles,
}

impl AirwayObservation {
    fn hidden(slot: usize, airway: Option<AirwayId>) -> Self {
        Self {
            slot,
            airway,
            is_vis: false,
            has_vis_child: false,
            tip_point_cam: [0.0; 3],
            angles: AirwayAngles::default(),
        }
    }

    pub fn tip(&self) -> Vec3 {
        Vec3::from(self.tip_point_cam)
    }

    pub fn direction(&self) -> Vec3 {
        angles_to_dir(&self.angles)
    }

    fn off_axis(&self) -> f64 {
        angle_between(&Vec3::z(), &self.tip())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub t: f64,
    pub insertion_mm: f64,
    pub mode: ObservationMode,
    pub observations: Vec<AirwayObservation>,
}

impl ObservationFrame {
    pub fn visible(&self) -> impl Iterator<Item = &AirwayObservation> {
        self.observations.iter().filter(|o| o.is_vis)
    }
}

/// A frame together with the true airway behind each observation row
/// (`None` for padding and hallucinated rows). Localizers only ever see
/// `frame`; the labels feed evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub frame: ObservationFrame,
    pub labels: Vec<Option<AirwayId>>,
}

impl Observed {
    pub fn stamped(mut self, t: f64, insertion_mm: f64) -> Self {
        self.frame.t = t;
        self.frame.insertion_mm = insertion_mm;
        self
    }
}

/// Ground-truth observation of every visible airway at `pose`.
///
/// The tip is the furthest visible centerline sample (the bifurcation point
/// when the bifurcation is visible). Angles come from the distal tangent when
/// the bifurcation is visible and from the proximal tangent otherwise.
/// Airways whose tangent points backwards in the camera frame are not emitted.
/// In bifurcation mode the four airways with the nearest visible centerline
/// point fill the slots, nearest first.
pub fn observe_truth(
    pose: &Pose,
    camera: &CameraModel,
    skel: &AirwaySkeleton,
    mode: ObservationMode,
) -> Observed {
    let inv = pose.rotation.inverse();
    let mut seen: Vec<(AirwayObservation, Option<AirwayId>, f64)> = Vec::new();
    let mut rows = Vec::new();
    for airway in skel.airways() {
        let tip = airway
            .centerline
            .iter()
            .rev()
            .find(|p| is_point_visible(pose, camera, p));
        let obs = tip.and_then(|tip| {
            let has_vis_child = airway.is_bifurcating()
                && is_point_visible(pose, camera, &airway.distal_point());
            let tangent = if has_vis_child {
                airway.distal_tangent()
            } else {
                airway.proximal_tangent()
            };
            let angles = dir_to_angles(&(inv * tangent).normalize()).ok()?;
            let tip_cam = inv * (tip - pose.position);
            Some(AirwayObservation {
                slot: 0,
                airway: None,
                is_vis: true,
                has_vis_child,
                tip_point_cam: tip_cam.into(),
                angles,
            })
        });
        match mode {
            ObservationMode::Bifurcation => {
                if let Some(o) = obs {
                    let range = airway
                        .centerline
                        .iter()
                        .filter(|p| is_point_visible(pose, camera, p))
                        .map(|p| (p - pose.position).norm())
                        .fold(f64::INFINITY, f64::min);
                    seen.push((o, Some(airway.id), range));
                }
            }
            ObservationMode::Direct => {
                let slot = rows.len();
                let mut row = obs.unwrap_or_else(|| AirwayObservation::hidden(slot, None));
                row.slot = slot;
                row.airway = Some(airway.id);
                rows.push((row.clone(), row.is_vis.then_some(airway.id)));
            }
        }
    }

    let (observations, labels) = match mode {
        ObservationMode::Bifurcation => pack_slots(seen),
        ObservationMode::Direct => rows.into_iter().unzip(),
    };
    Observed {
        frame: ObservationFrame {
            t: 0.0,
            insertion_mm: 0.0,
            mode,
            observations,
        },
        labels,
    }
}

/// Sorts visible rows by `range` (ties by off-axis angle of the tip), keeps
/// the best four and pads with hidden rows.
fn pack_slots(
    mut items: Vec<(AirwayObservation, Option<AirwayId>, f64)>,
) -> (Vec<AirwayObservation>, Vec<Option<AirwayId>>) {
    items.retain(|(o, _, _)| o.is_vis);
    items.sort_by(|(a, _, ra), (b, _, rb)| {
        ra.total_cmp(rb)
            .then(a.off_axis().partial_cmp(&b.off_axis()).unwrap_or(Ordering::Equal))
    });
    items.truncate(BIFURCATION_SLOTS);
    while items.len() < BIFURCATION_SLOTS {
        items.push((AirwayObservation::hidden(0, None), None, f64::INFINITY));
    }
    items
        .into_iter()
        .enumerate()
        .map(|(slot, (mut o, label, _))| {
            o.slot = slot;
            (o, label)
        })
        .unzip()
}

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("{0} must lie in [0, 1], got {1}")]
    Probability(&'static str, f64),
    #[error("{0} must be non-negative, got {1}")]
    Sigma(&'static str, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-axis tip position noise (mm).
    pub sigma_pos_mm: f64,
    /// Per-angle direction noise on alpha and beta (deg).
    pub sigma_ang_deg: f64,
    /// Frame-wide camera roll noise about the optical axis (deg).
    pub sigma_roll_deg: f64,
    pub p_miss: f64,
    pub p_hallucinate: f64,
    pub p_id_confusion: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_pos_mm: 2.0,
            sigma_ang_deg: 11.0,
            sigma_roll_deg: 14.0,
            p_miss: 0.0,
            p_hallucinate: 0.0,
            p_id_confusion: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_pos_mm: 0.0,
            sigma_ang_deg: 0.0,
            sigma_roll_deg: 0.0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.sigma_pos_mm == 0.0
            && self.sigma_ang_deg == 0.0
            && self.sigma_roll_deg == 0.0
            && self.p_miss == 0.0
            && self.p_hallucinate == 0.0
            && self.p_id_confusion == 0.0
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, p) in [
            ("p_miss", self.p_miss),
            ("p_hallucinate", self.p_hallucinate),
            ("p_id_confusion", self.p_id_confusion),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(NoiseError::Probability(name, p));
            }
        }
        for (name, s) in [
            ("sigma_pos_mm", self.sigma_pos_mm),
            ("sigma_ang_deg", self.sigma_ang_deg),
            ("sigma_roll_deg", self.sigma_roll_deg),
        ] {
            if s.is_nan() || s < 0.0 {
                return Err(NoiseError::Sigma(name, s));
            }
        }
        Ok(())
    }
}

/// Seeded corruption stream; one per simulated sequence.
#[derive(Debug, Clone)]
pub struct Corruptor {
    noise: NoiseModel,
    camera: CameraModel,
    rng: ChaCha8Rng,
}

impl Corruptor {
    pub fn new(noise: NoiseModel, camera: CameraModel) -> Result<Self, NoiseError> {
        noise.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(noise.seed);
        Ok(Self { noise, camera, rng })
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn corrupt(&mut self, observed: &Observed, skel: &AirwaySkeleton) -> Observed {
        if self.noise.is_identity() {
            return observed.clone();
        }
        let mut obs = observed.frame.observations.clone();
        let mut labels = observed.labels.clone();

        let roll = gaussian(&mut self.rng, self.noise.sigma_roll_deg);
        let roll_rot = (roll != 0.0).then(|| axis_rotation(&Vec3::z(), roll.to_radians()));

        for (o, label) in obs.iter_mut().zip(labels.iter_mut()) {
            if !o.is_vis {
                continue;
            }
            if self.noise.p_miss > 0.0 && self.rng.random_bool(self.noise.p_miss) {
                *o = AirwayObservation::hidden(o.slot, o.airway);
                *label = None;
                continue;
            }
            let mut tip = o.tip();
            let mut dir = o.direction();
            if let Some(r) = roll_rot {
                tip = r * tip;
                dir = r * dir;
            }
            for k in 0..3 {
                tip[k] += gaussian(&mut self.rng, self.noise.sigma_pos_mm);
            }
            tip.z = tip.z.max(1e-3);
            let mut angles = dir_to_angles(&dir.normalize()).unwrap_or(o.angles);
            angles.alpha_deg = (angles.alpha_deg + gaussian(&mut self.rng, self.noise.sigma_ang_deg))
                .clamp(-MAX_ANGLE_DEG, MAX_ANGLE_DEG);
            angles.beta_deg = (angles.beta_deg + gaussian(&mut self.rng, self.noise.sigma_ang_deg))
                .clamp(-MAX_ANGLE_DEG, MAX_ANGLE_DEG);
            o.tip_point_cam = tip.into();
            o.angles = angles;
        }

        if observed.frame.mode == ObservationMode::Direct && self.noise.p_id_confusion > 0.0 {
            for o in obs.iter_mut().filter(|o| o.is_vis) {
                let Some(id) = o.airway else { continue };
                let siblings = siblings(skel, id);
                if siblings.is_empty() || !self.rng.random_bool(self.noise.p_id_confusion) {
                    continue;
                }
                o.airway = Some(siblings[self.rng.random_range(0..siblings.len())]);
            }
        }

        if self.noise.p_hallucinate > 0.0 && self.rng.random_bool(self.noise.p_hallucinate) {
            match observed.frame.mode {
                ObservationMode::Bifurcation => {
                    // Ranges of real rows are no longer known here; tips stand in.
                    let mut items: Vec<_> = obs
                        .into_iter()
                        .zip(labels)
                        .map(|(o, l)| {
                            let r = o.tip().norm();
                            (o, l, r)
                        })
                        .collect();
                    for o in self.spurious_bifurcation() {
                        let r = o.tip().norm();
                        items.push((o, None, r));
                    }
                    (obs, labels) = pack_slots(items);
                }
                ObservationMode::Direct => self.hallucinate_direct(skel, &mut obs, &mut labels),
            }
        }

        Observed {
            frame: ObservationFrame {
                observations: obs,
                ..observed.frame.clone()
            },
            labels,
        }
    }

    /// Parent-like observation with a visible bifurcation plus two children,
    /// all inside the camera cone and range.
    fn spurious_bifurcation(&mut self) -> Vec<AirwayObservation> {
        let near = self.camera.max_vis_dist_mm / 6.0;
        let parent_tip = self.tip_in_cone(near, self.camera.max_vis_dist_mm);
        let parent_dist = parent_tip.norm();
        let mut out = vec![AirwayObservation {
            slot: 0,
            airway: None,
            is_vis: true,
            has_vis_child: true,
            tip_point_cam: parent_tip.into(),
            angles: self.forward_angles(),
        }];
        for _ in 0..2 {
            let tip = self.tip_in_cone(parent_dist, self.camera.max_vis_dist_mm);
            out.push(AirwayObservation {
                slot: 0,
                airway: None,
                is_vis: true,
                has_vis_child: false,
                tip_point_cam: tip.into(),
                angles: self.forward_angles(),
            });
        }
        out
    }

    fn hallucinate_direct(
        &mut self,
        skel: &AirwaySkeleton,
        obs: &mut [AirwayObservation],
        labels: &mut [Option<AirwayId>],
    ) {
        let bifs = skel.bifurcations();
        if bifs.is_empty() {
            return;
        }
        let bif = &bifs[self.rng.random_range(0..bifs.len())];
        let spurious = self.spurious_bifurcation();
        let mut write = |id: AirwayId, template: &AirwayObservation, has_vis_child: bool| {
            if let Some(i) = obs.iter().position(|o| o.airway == Some(id)) {
                obs[i] = AirwayObservation {
                    slot: obs[i].slot,
                    airway: Some(id),
                    has_vis_child,
                    ..template.clone()
                };
                labels[i] = None;
            }
        };
        write(bif.parent_airway_id, &spurious[0], true);
        for (child, template) in bif.child_airway_ids.iter().zip(&spurious[1..]) {
            write(*child, template, false);
        }
    }

    fn tip_in_cone(&mut self, min_dist: f64, max_dist: f64) -> Vec3 {
        let cos_half = self.camera.half_fov_rad().cos();
        let cos_t = self.rng.random_range(cos_half..=1.0);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = self.rng.random_range(0.0..std::f64::consts::TAU);
        let dist = if max_dist > min_dist {
            self.rng.random_range(min_dist..=max_dist)
        } else {
            max_dist
        };
        Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t) * dist
    }

    fn forward_angles(&mut self) -> AirwayAngles {
        let half = self.camera.fov_deg * 0.5;
        AirwayAngles {
            alpha_deg: self.rng.random_range(-half..=half),
            beta_deg: self.rng.random_range(-half..=half),
        }
    }
}

/// One-shot corruption with a fresh stream seeded from `noise.seed`.
pub fn corrupt(
    observed: &Observed,
    noise: &NoiseModel,
    camera: &CameraModel,
    skel: &AirwaySkeleton,
) -> Result<Observed, NoiseError> {
    Ok(Corruptor::new(noise.clone(), *camera)?.corrupt(observed, skel))
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn siblings(skel: &AirwaySkeleton, id: AirwayId) -> Vec<AirwayId> {
    skel.airway(id)
        .and_then(|a| a.parent_id)
        .and_then(|p| skel.airway(p))
        .map(|p| p.children_ids.iter().copied().filter(|c| *c != id).collect())
        .unwrap_or_default()
}
