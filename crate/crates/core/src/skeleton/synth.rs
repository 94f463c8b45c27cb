use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Airway, AirwayId, AirwaySkeleton, SkeletonError};
use crate::geometry::{any_perpendicular, Vec3};

/// Branching geometry for [`synth_lung`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub trachea_length_mm: f64,
    /// Relative uniform jitter on the trachea length.
    pub trachea_length_jitter: f64,
    /// Child length over parent length.
    pub length_decay: f64,
    /// Relative uniform jitter applied to every child length.
    pub length_jitter: f64,
    /// Each child's angle off the parent axis is drawn from this range.
    pub half_angle_min_deg: f64,
    pub half_angle_max_deg: f64,
    /// Rotation of the branching plane about the parent axis between generations.
    pub plane_rotation_deg: f64,
    pub plane_rotation_jitter_deg: f64,
    /// Maximum distance between consecutive centerline samples.
    pub sample_spacing_mm: f64,
    pub trachea_direction: [f64; 3],
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            trachea_length_mm: 100.0,
            trachea_length_jitter: 0.05,
            length_decay: 0.65,
            length_jitter: 0.1,
            half_angle_min_deg: 20.0,
            half_angle_max_deg: 45.0,
            plane_rotation_deg: 90.0,
            plane_rotation_jitter_deg: 15.0,
            sample_spacing_mm: 1.0,
            trachea_direction: [0.0, 0.0, -1.0],
        }
    }
}

struct Pending {
    id: AirwayId,
    parent: Option<AirwayId>,
    generation: u32,
    start: Vec3,
    dir: Vec3,
    length: f64,
    /// Normal of the plane the parent split in.
    plane_normal: Vec3,
}

/// Deterministic full binary airway tree with `generations` levels below the
/// trachea (so `2^(generations+1) - 1` airways). Airways are straight
/// segments sampled at `sample_spacing_mm`; ids are assigned breadth-first.
pub fn synth_lung(
    generations: u32,
    seed: u64,
    params: &SynthParams,
) -> Result<AirwaySkeleton, SkeletonError> {
    if !(1..=8).contains(&generations) {
        return Err(SkeletonError::Generations(generations));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, rel: f64| {
        if rel > 0.0 {
            1.0 + rng.random_range(-rel..=rel)
        } else {
            1.0
        }
    };

    let dir0 = Vec3::from(params.trachea_direction).normalize();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(Pending {
        id: AirwayId(0),
        parent: None,
        generation: 0,
        start: Vec3::zeros(),
        dir: dir0,
        length: params.trachea_length_mm * jitter(&mut rng, params.trachea_length_jitter),
        plane_normal: any_perpendicular(&dir0),
    });
    let mut next_id = 1u32;
    let mut airways = Vec::new();

    while let Some(p) = queue.pop_front() {
        let end = p.start + p.dir * p.length;
        let mut children_ids = Vec::new();
        if p.generation < generations {
            let spin = (params.plane_rotation_deg
                + sample_sym(&mut rng, params.plane_rotation_jitter_deg))
            .to_radians();
            let normal = rotate_about(&p.plane_normal, &p.dir, spin);
            let in_plane = normal.cross(&p.dir).normalize();
            for side in [1.0, -1.0] {
                let theta = sample_range(
                    &mut rng,
                    params.half_angle_min_deg,
                    params.half_angle_max_deg,
                )
                .to_radians();
                let dir = (p.dir * theta.cos() + in_plane * (side * theta.sin())).normalize();
                let length = p.length * params.length_decay * jitter(&mut rng, params.length_jitter);
                let id = AirwayId(next_id);
                next_id += 1;
                children_ids.push(id);
                queue.push_back(Pending {
                    id,
                    parent: Some(p.id),
                    generation: p.generation + 1,
                    start: end,
                    dir,
                    length,
                    plane_normal: normal,
                });
            }
        }
        airways.push(Airway {
            id: p.id,
            parent_id: p.parent,
            children_ids,
            generation: p.generation,
            centerline: sample_segment(&p.start, &end, params.sample_spacing_mm),
            length: 0.0,
        });
    }

    AirwaySkeleton::new(format!("synth-g{generations}-s{seed}"), airways)
}

fn sample_sym(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn rotate_about(v: &Vec3, axis: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

fn sample_segment(a: &Vec3, b: &Vec3, spacing: f64) -> Vec<Vec3> {
    let n = ((b - a).norm() / spacing).ceil().max(1.0) as usize;
    let mut points: Vec<Vec3> = (0..n).map(|k| a + (b - a) * (k as f64 / n as f64)).collect();
    points.push(*b);
    points
}
