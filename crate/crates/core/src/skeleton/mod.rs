//! Airway centerline tree.
//!
//! An [`AirwaySkeleton`] is a rooted tree of [`Airway`]s. Each airway carries
//! a polyline centerline in CT millimetres running from its proximal junction
//! to its distal endpoint; an airway with two or more children defines a
//! [`Bifurcation`] at that endpoint.

mod synth;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

pub use synth::{synth_lung, SynthParams};

/// Current version of the skeleton JSON document.
pub const SKELETON_FORMAT_VERSION: u32 = 1;

/// Tolerance for a child's first centerline point to coincide with its
/// parent's last point.
pub const JUNCTION_TOLERANCE_MM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AirwayId(pub u32);

impl fmt::Display for AirwayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed skeleton json: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported skeleton format version {0}")]
    Version(u32),
    #[error("skeleton has no airways")]
    Empty,
    #[error("duplicate airway id {0}")]
    DuplicateId(AirwayId),
    #[error("expected exactly one root airway, found {0}")]
    RootCount(usize),
    #[error("airway {id}: parent {parent} does not exist")]
    MissingParent { id: AirwayId, parent: AirwayId },
    #[error("airway {id}: child {child} does not exist")]
    MissingChild { id: AirwayId, child: AirwayId },
    #[error("airway {id}: children list disagrees with parent links")]
    ChildLinks { id: AirwayId },
    #[error("airway {id}: generation {found}, expected {expected}")]
    Generation { id: AirwayId, found: u32, expected: u32 },
    #[error("airway {id}: centerline needs at least two distinct points")]
    Centerline { id: AirwayId },
    #[error("airway {id}: proximal point is {gap} mm from the parent's distal point")]
    Junction { id: AirwayId, gap: f64 },
    #[error("airway {id} is unreachable from the root (cycle or orphan)")]
    Unreachable { id: AirwayId },
    #[error("unknown airway {0}")]
    UnknownAirway(AirwayId),
    #[error("airway {0} is not a bifurcation")]
    UnknownBifurcation(AirwayId),
    #[error("generations must lie in 1..=8, got {0}")]
    Generations(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Airway {
    pub id: AirwayId,
    pub parent_id: Option<AirwayId>,
    pub children_ids: Vec<AirwayId>,
    pub generation: u32,
    pub centerline: Vec<Vec3>,
    /// Polyline arc length in mm.
    pub length: f64,
}

impl Airway {
    pub fn proximal_point(&self) -> Vec3 {
        self.centerline[0]
    }

    pub fn distal_point(&self) -> Vec3 {
        self.centerline[self.centerline.len() - 1]
    }

    /// Unit tangent leaving the proximal junction.
    pub fn proximal_tangent(&self) -> Vec3 {
        let p0 = self.centerline[0];
        self.centerline[1..]
            .iter()
            .map(|p| p - p0)
            .find(|d| d.norm() > 0.0)
            .map(|d| d.normalize())
            .expect("validated centerline has a distinct point")
    }

    /// Unit tangent arriving at the distal endpoint.
    pub fn distal_tangent(&self) -> Vec3 {
        let pn = self.distal_point();
        self.centerline[..self.centerline.len() - 1]
            .iter()
            .rev()
            .map(|p| pn - p)
            .find(|d| d.norm() > 0.0)
            .map(|d| d.normalize())
            .expect("validated centerline has a distinct point")
    }

    pub fn is_bifurcating(&self) -> bool {
        self.children_ids.len() >= 2
    }

    /// Point and unit tangent at arc length `s` along the centerline (clamped).
    pub fn point_at(&self, s: f64) -> (Vec3, Vec3) {
        let mut remaining = s.max(0.0);
        let last = self.centerline.len() - 1;
        for i in 0..last {
            let a = self.centerline[i];
            let b = self.centerline[i + 1];
            let seg = (b - a).norm();
            if seg == 0.0 {
                continue;
            }
            if remaining < seg || i + 1 == last {
                let dir = (b - a) / seg;
                return (a + dir * remaining.min(seg), dir);
            }
            remaining -= seg;
        }
        (self.distal_point(), self.distal_tangent())
    }

    /// Arc coordinate of `position` projected onto the centerline, with the
    /// unit tangent of the nearest segment. Past either end the coordinate
    /// extrapolates, so it can be negative or exceed `length`.
    pub fn project(&self, position: &Vec3) -> (f64, Vec3) {
        let last = self.centerline.len() - 2;
        let mut best = (f64::INFINITY, 0.0, self.proximal_tangent());
        let mut start = 0.0;
        for (i, w) in self.centerline.windows(2).enumerate() {
            let seg = w[1] - w[0];
            let len = seg.norm();
            if len == 0.0 {
                continue;
            }
            let dir = seg / len;
            let raw = (position - w[0]).dot(&dir);
            let t = raw.clamp(0.0, len);
            let d = (w[0] + dir * t - position).norm();
            if d < best.0 {
                let lo = if i == 0 { f64::NEG_INFINITY } else { 0.0 };
                let hi = if i == last { f64::INFINITY } else { len };
                best = (d, start + raw.clamp(lo, hi), dir);
            }
            start += len;
        }
        (best.1, best.2)
    }

    /// Shortest distance from `point` to the centerline polyline.
    pub fn distance_to(&self, point: &Vec3) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| segment_distance(point, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (a + ab * t - p).norm()
}

pub(crate) fn polyline_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bifurcation {
    pub parent_airway_id: AirwayId,
    pub child_airway_ids: Vec<AirwayId>,
    pub point: Vec3,
    /// Parent tangent at its distal end.
    pub parent_dir: Vec3,
    /// Tangent of each child at its proximal end, in `child_airway_ids` order.
    pub child_dirs: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirwaySkeleton {
    name: String,
    root_id: AirwayId,
    airways: BTreeMap<AirwayId, Airway>,
    bifurcations: Vec<Bifurcation>,
    bifurcation_index: BTreeMap<AirwayId, usize>,
    path_lengths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonDoc {
    version: u32,
    name: String,
    airways: Vec<AirwayDoc>,
}

#[derive(Serialize, Deserialize)]
struct AirwayDoc {
    id: AirwayId,
    parent_id: Option<AirwayId>,
    children: Vec<AirwayId>,
    generation: u32,
    centerline: Vec<[f64; 3]>,
}

impl AirwaySkeleton {
    /// Validates the input and builds the derived bifurcation tables.
    ///
    /// `length` on each input airway is recomputed from the centerline.
    pub fn new(name: impl Into<String>, airways: Vec<Airway>) -> Result<Self, SkeletonError> {
        if airways.is_empty() {
            return Err(SkeletonError::Empty);
        }
        let mut map = BTreeMap::new();
        for mut airway in airways {
            let distinct = airway
                .centerline
                .windows(2)
                .any(|w| (w[1] - w[0]).norm() > 0.0);
            if airway.centerline.len() < 2 || !distinct {
                return Err(SkeletonError::Centerline { id: airway.id });
            }
            airway.length = polyline_length(&airway.centerline);
            let id = airway.id;
            if map.insert(id, airway).is_some() {
                return Err(SkeletonError::DuplicateId(id));
            }
        }

        let roots: Vec<AirwayId> = map
            .values()
            .filter(|a| a.parent_id.is_none())
            .map(|a| a.id)
            .collect();
        if roots.len() != 1 {
            return Err(SkeletonError::RootCount(roots.len()));
        }
        let root_id = roots[0];

        for airway in map.values() {
            if let Some(parent) = airway.parent_id {
                let p = map.get(&parent).ok_or(SkeletonError::MissingParent {
                    id: airway.id,
                    parent,
                })?;
                if !p.children_ids.contains(&airway.id) {
                    return Err(SkeletonError::ChildLinks { id: parent });
                }
                let expected = p.generation + 1;
                if airway.generation != expected {
                    return Err(SkeletonError::Generation {
                        id: airway.id,
                        found: airway.generation,
                        expected,
                    });
                }
                let gap = (airway.proximal_point() - p.distal_point()).norm();
                if gap > JUNCTION_TOLERANCE_MM {
                    return Err(SkeletonError::Junction { id: airway.id, gap });
                }
            } else if airway.generation != 0 {
                return Err(SkeletonError::Generation {
                    id: airway.id,
                    found: airway.generation,
                    expected: 0,
                });
            }
            for child in &airway.children_ids {
                let c = map.get(child).ok_or(SkeletonError::MissingChild {
                    id: airway.id,
                    child: *child,
                })?;
                if c.parent_id != Some(airway.id) {
                    return Err(SkeletonError::ChildLinks { id: airway.id });
                }
            }
            let mut sorted = airway.children_ids.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != airway.children_ids.len() {
                return Err(SkeletonError::ChildLinks { id: airway.id });
            }
        }

        // Every airway must be reachable from the root via child links.
        let mut seen = BTreeMap::new();
        let mut queue = VecDeque::from([root_id]);
        while let Some(id) = queue.pop_front() {
            if seen.insert(id, ()).is_some() {
                continue;
            }
            queue.extend(map[&id].children_ids.iter().copied());
        }
        if let Some(orphan) = map.keys().find(|id| !seen.contains_key(id)) {
            return Err(SkeletonError::Unreachable { id: *orphan });
        }

        let mut skel = Self {
            name: name.into(),
            root_id,
            airways: map,
            bifurcations: Vec::new(),
            bifurcation_index: BTreeMap::new(),
            path_lengths: Vec::new(),
        };
        skel.index_bifurcations();
        Ok(skel)
    }

    fn index_bifurcations(&mut self) {
        for airway in self.airways.values().filter(|a| a.is_bifurcating()) {
            let children: Vec<&Airway> = airway
                .children_ids
                .iter()
                .map(|c| &self.airways[c])
                .collect();
            let bif = Bifurcation {
                parent_airway_id: airway.id,
                child_airway_ids: airway.children_ids.clone(),
                point: airway.distal_point(),
                parent_dir: airway.distal_tangent(),
                child_dirs: children.iter().map(|c| c.proximal_tangent()).collect(),
            };
            let mut z = 0.0;
            let mut cursor = Some(airway.id);
            while let Some(id) = cursor {
                let a = &self.airways[&id];
                z += a.length;
                cursor = a.parent_id;
            }
            self.bifurcation_index
                .insert(airway.id, self.bifurcations.len());
            self.bifurcations.push(bif);
            self.path_lengths.push(z);
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn root_id(&self) -> AirwayId {
        self.root_id
    }

    pub fn root(&self) -> &Airway {
        &self.airways[&self.root_id]
    }

    pub fn airway(&self, id: AirwayId) -> Option<&Airway> {
        self.airways.get(&id)
    }

    pub fn airways(&self) -> impl Iterator<Item = &Airway> {
        self.airways.values()
    }

    pub fn len(&self) -> usize {
        self.airways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.airways.is_empty()
    }

    pub fn contains(&self, id: AirwayId) -> bool {
        self.airways.contains_key(&id)
    }

    /// All bifurcations, ordered by parent airway id.
    pub fn bifurcations(&self) -> &[Bifurcation] {
        &self.bifurcations
    }

    /// The bifurcation at the distal end of `parent`, if it has ≥2 children.
    pub fn bifurcation(&self, parent: AirwayId) -> Option<&Bifurcation> {
        self.bifurcation_index
            .get(&parent)
            .map(|&i| &self.bifurcations[i])
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Airway> {
        self.airways.values().filter(|a| a.children_ids.is_empty())
    }

    /// Arc length from the root's proximal point to the bifurcation point.
    pub fn path_length_from_trachea(&self, bif: &Bifurcation) -> Result<f64, SkeletonError> {
        self.bifurcation_index
            .get(&bif.parent_airway_id)
            .map(|&i| self.path_lengths[i])
            .ok_or(SkeletonError::UnknownBifurcation(bif.parent_airway_id))
    }

    /// Number of tree edges between two airways.
    pub fn hop_distance(&self, a: AirwayId, b: AirwayId) -> Result<u32, SkeletonError> {
        let mut x = self.airway(a).ok_or(SkeletonError::UnknownAirway(a))?;
        let mut y = self.airway(b).ok_or(SkeletonError::UnknownAirway(b))?;
        let mut hops = 0;
        while x.generation > y.generation {
            x = &self.airways[&x.parent_id.expect("non-root has parent")];
            hops += 1;
        }
        while y.generation > x.generation {
            y = &self.airways[&y.parent_id.expect("non-root has parent")];
            hops += 1;
        }
        while x.id != y.id {
            x = &self.airways[&x.parent_id.expect("non-root has parent")];
            y = &self.airways[&y.parent_id.expect("non-root has parent")];
            hops += 2;
        }
        Ok(hops)
    }

    /// Airway-to-bifurcation distance used by the adjacency prior.
    ///
    /// Hops between the airway and the bifurcation's parent airway, floored
    /// at 1: the parent itself and its direct neighbours (children, and its
    /// own parent) all sit at distance 1.
    pub fn generation_distance(
        &self,
        airway: AirwayId,
        bif: &Bifurcation,
    ) -> Result<u32, SkeletonError> {
        if !self.bifurcation_index.contains_key(&bif.parent_airway_id) {
            return Err(SkeletonError::UnknownBifurcation(bif.parent_airway_id));
        }
        Ok(self.hop_distance(airway, bif.parent_airway_id)?.max(1))
    }

    /// Root-to-airway chain of ids.
    pub fn ancestry(&self, id: AirwayId) -> Result<Vec<AirwayId>, SkeletonError> {
        let mut chain = Vec::new();
        let mut cursor = Some(self.airway(id).ok_or(SkeletonError::UnknownAirway(id))?);
        while let Some(a) = cursor {
            chain.push(a.id);
            cursor = a.parent_id.map(|p| &self.airways[&p]);
        }
        chain.reverse();
        Ok(chain)
    }

    /// Airway whose centerline is closest to `point`; ties go to the deeper
    /// generation.
    pub fn nearest_airway(&self, point: &Vec3) -> &Airway {
        let mut best: Option<(&Airway, f64)> = None;
        for airway in self.airways.values() {
            let d = airway.distance_to(point);
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && b.generation >= airway.generation) => {
                    Some((b, bd))
                }
                _ => Some((airway, d)),
            };
        }
        best.expect("skeleton is non-empty").0
    }

    pub fn to_json(&self) -> String {
        let doc = SkeletonDoc {
            version: SKELETON_FORMAT_VERSION,
            name: self.name.clone(),
            airways: self
                .airways
                .values()
                .map(|a| AirwayDoc {
                    id: a.id,
                    parent_id: a.parent_id,
                    children: a.children_ids.clone(),
                    generation: a.generation,
                    centerline: a.centerline.iter().map(|p| [p.x, p.y, p.z]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("skeleton serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SkeletonError> {
        let doc: SkeletonDoc = serde_json::from_str(text)?;
        Self::from_doc(doc)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, SkeletonError> {
        Self::from_doc(serde_json::from_value(value)?)
    }

    fn from_doc(doc: SkeletonDoc) -> Result<Self, SkeletonError> {
        if doc.version != SKELETON_FORMAT_VERSION {
            return Err(SkeletonError::Version(doc.version));
        }
        let airways = doc
            .airways
            .into_iter()
            .map(|a| Airway {
                id: a.id,
                parent_id: a.parent_id,
                children_ids: a.children,
                generation: a.generation,
                centerline: a
                    .centerline
                    .into_iter()
                    .map(|[x, y, z]| Vec3::new(x, y, z))
                    .collect(),
                length: 0.0,
            })
            .collect();
        Self::new(doc.name, airways)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SkeletonError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Reads and validates a skeleton JSON file.
pub fn load_skeleton(path: impl AsRef<Path>) -> Result<AirwaySkeleton, SkeletonError> {
    AirwaySkeleton::from_json(&std::fs::read_to_string(path)?)
}
