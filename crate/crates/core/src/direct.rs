//! Stateless localizer for observations classified with skeleton airway ids.
//!
//! A frame yields a pose only when some observed airway shows its bifurcation
//! and at least two of its skeleton children are also observed; the pose is
//! then backed out with the id-given child assignment. Nothing carries over
//! between frames.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backout_pose, BifurcationMeasurement, GeometryError, Pose};
use crate::perception::{ObservationFrame, ObservationMode};
use crate::skeleton::{AirwayId, AirwaySkeleton};

#[derive(Debug, Error)]
pub enum DirectError {
    #[error("expected a Direct-mode frame, got {0:?}")]
    ModeMismatch(ObservationMode),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectDiagnostics {
    /// Rows whose airway id is absent from the skeleton.
    pub unknown_rows: Vec<usize>,
    /// Airways flagged with a visible bifurcation but fewer than two visible
    /// skeleton children.
    pub inconsistent: Vec<AirwayId>,
    pub bifurcation: Option<AirwayId>,
    pub residual_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectOutput {
    pub estimate: Option<Pose>,
    /// Airways the frame classifies as visible.
    pub classification: BTreeSet<AirwayId>,
    /// Observation row to airway id for the rows used in the back-out.
    pub assignment: BTreeMap<usize, AirwayId>,
    pub diagnostics: DirectDiagnostics,
}

/// `(observation row, index into the bifurcation's children)` pairs.
type ChildRows = Vec<(usize, usize)>;

pub fn direct_step(frame: &ObservationFrame, skel: &AirwaySkeleton) -> Result<DirectOutput, DirectError> {
    if frame.mode != ObservationMode::Direct {
        return Err(DirectError::ModeMismatch(frame.mode));
    }
    let mut diagnostics = DirectDiagnostics::default();
    // First visible row per known airway id.
    let mut rows: BTreeMap<AirwayId, usize> = BTreeMap::new();
    for (i, o) in frame.observations.iter().enumerate() {
        if !o.is_vis {
            continue;
        }
        match o.airway {
            Some(id) if skel.contains(id) => {
                rows.entry(id).or_insert(i);
            }
            _ => diagnostics.unknown_rows.push(i),
        }
    }
    let classification: BTreeSet<AirwayId> = rows.keys().copied().collect();

    // Nearest parent tip wins: (tip distance, bifurcation, parent row, children).
    let mut best: Option<(f64, AirwayId, usize, ChildRows)> = None;
    for (&id, &row) in &rows {
        let obs = &frame.observations[row];
        if !obs.has_vis_child {
            continue;
        }
        let Some(bif) = skel.bifurcation(id) else {
            diagnostics.inconsistent.push(id);
            continue;
        };
        let children: ChildRows = bif
            .child_airway_ids
            .iter()
            .enumerate()
            .filter_map(|(k, c)| rows.get(c).map(|&r| (r, k)))
            .collect();
        if children.len() < 2 {
            diagnostics.inconsistent.push(id);
            continue;
        }
        let dist = obs.tip().norm();
        if best.as_ref().is_none_or(|(d, ..)| dist < *d) {
            best = Some((dist, id, row, children));
        }
    }

    let mut assignment = BTreeMap::new();
    let mut estimate = None;
    if let Some((_, id, row, children)) = best {
        let bif = skel.bifurcation(id).expect("checked above");
        let parent = &frame.observations[row];
        let meas = BifurcationMeasurement {
            parent_tip_cam: parent.tip(),
            parent_dir_cam: parent.direction(),
            child_dirs_cam: children
                .iter()
                .map(|&(r, _)| frame.observations[r].direction())
                .collect(),
        };
        let order: Vec<usize> = children.iter().map(|&(_, k)| k).collect();
        let out = backout_pose(bif, &meas, &order)?;
        assignment.insert(row, id);
        for &(r, k) in &children {
            assignment.insert(r, bif.child_airway_ids[k]);
        }
        diagnostics.bifurcation = Some(id);
        diagnostics.residual_deg = Some(out.residual_deg);
        estimate = Some(out.pose);
    }
    Ok(DirectOutput {
        estimate,
        classification,
        assignment,
        diagnostics,
    })
}
