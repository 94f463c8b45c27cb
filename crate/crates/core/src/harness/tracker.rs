use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::config::Algorithm;
use super::HarnessError;
use crate::direct::direct_step;
use crate::filter::{estimated_visible, BifurcationFilter, FilterParams};
use crate::geometry::{CameraModel, Pose};
use crate::perception::Observed;
use crate::skeleton::{AirwayId, AirwaySkeleton};

/// One localizer instance, with the per-frame bookkeeping that evaluation
/// needs. Batch runs and interactive sessions both drive frames through this.
#[derive(Debug, Clone)]
pub enum Tracker {
    Filter(Box<BifurcationFilter>),
    /// The direct localizer keeps the last estimate only for reporting.
    Direct { last: Option<Pose> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackStep {
    pub est_pose: Option<Pose>,
    pub est_visible: BTreeSet<AirwayId>,
    pub assignment: BTreeMap<usize, AirwayId>,
    /// An assignment was produced and every assigned id matches the truth.
    pub bif_correct: bool,
    /// Whether this frame produced a fresh bifurcation estimate.
    pub updated: bool,
    pub diagnostics: serde_json::Value,
}

impl Tracker {
    pub fn new(
        algorithm: Algorithm,
        skel: &AirwaySkeleton,
        params: &FilterParams,
    ) -> Result<Self, HarnessError> {
        Ok(match algorithm {
            Algorithm::Bifurcation => {
                Tracker::Filter(Box::new(BifurcationFilter::new(skel, params.clone())?))
            }
            Algorithm::Direct => Tracker::Direct { last: None },
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Tracker::Filter(_) => Algorithm::Bifurcation,
            Tracker::Direct { .. } => Algorithm::Direct,
        }
    }

    pub fn step(
        &mut self,
        skel: &AirwaySkeleton,
        camera: &CameraModel,
        observed: &Observed,
        frame_index: usize,
    ) -> Result<TrackStep, HarnessError> {
        let (est_pose, est_visible, assignment, updated, diagnostics) = match self {
            Tracker::Filter(filter) => {
                let out = filter
                    .step(skel, &observed.frame)
                    .map_err(|source| HarnessError::Filter { frame: frame_index, source })?;
                let visible = estimated_visible(&out.estimate, camera, skel);
                let diagnostics = serde_json::to_value(&out.diagnostics)?;
                (Some(out.estimate), visible, out.assignment, out.diagnostics.updated, diagnostics)
            }
            Tracker::Direct { last } => {
                let out = direct_step(&observed.frame, skel)
                    .map_err(|source| HarnessError::Direct { frame: frame_index, source })?;
                let updated = out.estimate.is_some();
                if out.estimate.is_some() {
                    *last = out.estimate;
                }
                let diagnostics = serde_json::to_value(&out.diagnostics)?;
                (*last, out.classification, out.assignment, updated, diagnostics)
            }
        };
        let bif_correct = !assignment.is_empty()
            && assignment
                .iter()
                .all(|(slot, id)| observed.labels.get(*slot).copied().flatten() == Some(*id));
        Ok(TrackStep {
            est_pose,
            est_visible,
            assignment,
            bif_correct,
            updated,
            diagnostics,
        })
    }
}
