//! Bifurcation filter.
//!
//! Generic airway observations carry no skeleton ids. When a frame shows a
//! parent airway with a visible bifurcation and at least two further airways,
//! every skeleton bifurcation and every injective matching of the observed
//! airways to its children is scored. The pose implied by each hypothesis
//! comes from [`backout_pose`]. Bifurcations are ranked by a prior built from
//! insertion depth, adjacency to the previously visible airways and distance
//! to the previous estimate; the top candidates are then compared by the
//! posterior `fit * prior * roll`, and the winner sets the new estimate.
//!
//! Frames without a usable bifurcation dead-reckon: the estimate advances by
//! the change in insertion depth along the believed centerline path
//! (current airway, its parent, and the child expected next), and the
//! pointing follows the same look-ahead model as the simulated driver.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    angles_to_dir, backout_pose, minimal_rotation, relative_roll_deg, visible_airways, wrap_deg,
    Backout, BifurcationMeasurement, CameraModel, GeometryError, Pose, Vec3,
};
use crate::perception::{ObservationFrame, ObservationMode};
use crate::sim::{entrance_pose, CenterlinePath, SimError};
use crate::skeleton::{AirwayId, AirwaySkeleton, Bifurcation, SkeletonError};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter parameter: {0}")]
    Params(String),
    #[error("expected a {expected:?}-mode frame, got {got:?}")]
    ModeMismatch {
        expected: ObservationMode,
        got: ObservationMode,
    },
    #[error("skeleton has no bifurcations")]
    NoBifurcations,
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Path(#[from] SimError),
}

/// Where the roll consistency term enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RollPlacement {
    /// Only in the posterior.
    Posterior,
    /// Only in the bifurcation prior (and so in the ranking).
    Prior,
    /// In both.
    Both,
}

/// How the observed depth of the bifurcation ahead of the camera is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// Camera-frame z of the parent tip.
    Axial,
    /// Distance from the camera to the parent tip.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Angular spread of the fit likelihood (radians).
    pub sigma_fit_rad: f64,
    /// Insertion-depth spread (mm).
    pub sigma_ins_mm: f64,
    /// Position prior covariance (mm^2).
    pub sigma_x_mm2: [[f64; 3]; 3],
    /// Roll consistency spread (degrees).
    pub sigma_roll_deg: f64,
    /// Bifurcations kept after prior ranking.
    pub n_candidates: usize,
    /// Adjacency weight per generation distance.
    pub gen_weights: BTreeMap<u32, f64>,
    /// Adjacency weight for distances missing from `gen_weights`.
    pub gen_weight_floor: f64,
    pub depth: DepthMode,
    pub roll_term: RollPlacement,
    /// Look-ahead of the dead-reckoning pointing model (mm); 0 follows the tangent.
    pub lookahead_mm: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            sigma_fit_rad: 0.2,
            sigma_ins_mm: 10.0,
            sigma_x_mm2: [[100.0, 0.0, 0.0], [0.0, 100.0, 0.0], [0.0, 0.0, 100.0]],
            sigma_roll_deg: 30.0,
            n_candidates: 3,
            gen_weights: default_gen_weights(1.0, 0.1, 0.01),
            gen_weight_floor: 1e-6,
            depth: DepthMode::Axial,
            roll_term: RollPlacement::Posterior,
            lookahead_mm: 15.0,
        }
    }
}

pub fn default_gen_weights(d1: f64, d2: f64, d3: f64) -> BTreeMap<u32, f64> {
    BTreeMap::from([(1, d1), (2, d2), (3, d3)])
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        for (name, v) in [
            ("sigma_fit_rad", self.sigma_fit_rad),
            ("sigma_ins_mm", self.sigma_ins_mm),
            ("sigma_roll_deg", self.sigma_roll_deg),
            ("gen_weight_floor", self.gen_weight_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FilterError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_candidates == 0 {
            return Err(FilterError::Params("n_candidates must be at least 1".into()));
        }
        if let Some((d, w)) = self.gen_weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(FilterError::Params(format!("gen_weights[{d}] = {w}")));
        }
        if !(self.lookahead_mm >= 0.0 && self.lookahead_mm.is_finite()) {
            return Err(FilterError::Params(format!("lookahead_mm = {}", self.lookahead_mm)));
        }
        PositionPrior::new(&self.sigma_x_mm2)?;
        Ok(())
    }

    fn gen_weight(&self, distance: u32) -> f64 {
        self.gen_weights
            .get(&distance)
            .copied()
            .unwrap_or(self.gen_weight_floor)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_pdf(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn ln_normal_pdf(x: f64, sigma: f64) -> f64 {
    -0.5 * (x / sigma).powi(2) - sigma.ln() - LN_SQRT_2PI
}

/// Mean Gaussian density of the angles between paired unit directions.
pub fn prob_fit(observed: &[Vec3], ct: &[Vec3], sigma_fit_rad: f64) -> f64 {
    let n = observed.len().min(ct.len());
    if n == 0 {
        return 0.0;
    }
    observed
        .iter()
        .zip(ct)
        .map(|(a, b)| normal_pdf(a.dot(b).clamp(-1.0, 1.0).acos(), sigma_fit_rad))
        .sum::<f64>()
        / n as f64
}

fn ln_prob_fit(observed: &[Vec3], ct: &[Vec3], sigma_fit_rad: f64) -> f64 {
    let terms: Vec<f64> = observed
        .iter()
        .zip(ct)
        .map(|(a, b)| ln_normal_pdf(a.dot(b).clamp(-1.0, 1.0).acos(), sigma_fit_rad))
        .collect();
    if terms.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - (terms.len() as f64).ln()
}

/// Density of `insertion + z_hat - z_bif` under the insertion spread.
pub fn prob_ins(insertion_mm: f64, z_hat_mm: f64, z_bif_mm: f64, sigma_ins_mm: f64) -> f64 {
    normal_pdf(insertion_mm + z_hat_mm - z_bif_mm, sigma_ins_mm)
}

/// Density of the wrapped roll difference between the previous estimate and
/// a candidate.
pub fn prob_roll(prev_roll_deg: f64, roll_deg: f64, sigma_roll_deg: f64) -> f64 {
    normal_pdf(wrap_deg(prev_roll_deg - roll_deg), sigma_roll_deg)
}

/// Zero-mean trivariate Gaussian over position differences.
#[derive(Debug, Clone)]
pub struct PositionPrior {
    inv: Matrix3<f64>,
    ln_norm: f64,
}

impl PositionPrior {
    pub fn new(cov: &[[f64; 3]; 3]) -> Result<Self, FilterError> {
        let m = Matrix3::from_fn(|i, j| cov[i][j]);
        if (m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
            return Err(FilterError::Params("sigma_x_mm2 must be symmetric".into()));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| FilterError::Params("sigma_x_mm2 must be positive definite".into()))?;
        let det = m.determinant();
        Ok(Self {
            inv: chol.inverse(),
            ln_norm: -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + det.ln()),
        })
    }

    pub fn ln_density(&self, diff: &Vec3) -> f64 {
        self.ln_norm - 0.5 * diff.dot(&(self.inv * diff))
    }

    pub fn density(&self, diff: &Vec3) -> f64 {
        self.ln_density(diff).exp()
    }
}

/// Normalized adjacency prior over bifurcations: summed generation-distance
/// weights from every previously visible airway. Uniform when nothing was
/// visible before (or all weights vanish).
pub fn airway_prior(
    skel: &AirwaySkeleton,
    prev_visible: &BTreeSet<AirwayId>,
    params: &FilterParams,
) -> Result<Vec<f64>, FilterError> {
    let bifs = skel.bifurcations();
    if bifs.is_empty() {
        return Err(FilterError::NoBifurcations);
    }
    let mut weights = Vec::with_capacity(bifs.len());
    for bif in bifs {
        let mut w = 0.0;
        for &j in prev_visible {
            w += params.gen_weight(skel.generation_distance(j, bif)?);
        }
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.iter_mut().for_each(|w| *w = 1.0 / bifs.len() as f64);
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub est_pose: Pose,
    /// Airways assigned at the last update.
    pub prev_visible: BTreeSet<AirwayId>,
    /// Roll of the estimate relative to the entrance frame (degrees).
    pub prev_roll_deg: f64,
    pub prev_insertion_mm: f64,
    pub current_airway: AirwayId,
    /// Child of `current_airway` the estimate is expected to enter next.
    pub next_airway: Option<AirwayId>,
    pub has_fix: bool,
}

impl FilterState {
    pub fn at_entrance(skel: &AirwaySkeleton) -> Self {
        Self {
            est_pose: entrance_pose(skel),
            prev_visible: BTreeSet::new(),
            prev_roll_deg: 0.0,
            prev_insertion_mm: 0.0,
            current_airway: skel.root_id(),
            next_airway: None,
            has_fix: false,
        }
    }
}

/// Per-term scores of one bifurcation candidate under its best hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub bifurcation: AirwayId,
    pub prior_rank: usize,
    pub z_bif_mm: f64,
    pub z_hat_mm: f64,
    pub prob_fit: f64,
    pub prob_ins: f64,
    pub prob_airways: f64,
    pub prob_x: f64,
    pub prob_roll: f64,
    pub prob_bif: f64,
    pub posterior: f64,
    pub ln_posterior: f64,
    pub roll_deg: f64,
    pub residual_deg: f64,
    /// Observation slot to airway id.
    pub assignment: BTreeMap<usize, AirwayId>,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub updated: bool,
    pub parent_slot: Option<usize>,
    pub bifurcations_scored: usize,
    pub hypotheses_scored: usize,
    pub candidates: Vec<CandidateScore>,
    pub winner: Option<AirwayId>,
    pub dead_reckoned_mm: f64,
    pub entered: Option<AirwayId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub estimate: Pose,
    /// Observation slot to skeleton airway for the winning hypothesis.
    pub assignment: BTreeMap<usize, AirwayId>,
    pub diagnostics: FilterDiagnostics,
}

struct Hypothesis {
    /// Indices into the measurement's child list, paired with `ct`.
    obs: Vec<usize>,
    ct: Vec<usize>,
    backout: Backout,
    ln_fit: f64,
}

struct Scored<'h> {
    hyp: &'h Hypothesis,
    ln_x: f64,
    ln_roll: f64,
    roll_deg: f64,
}

#[derive(Debug, Clone)]
pub struct BifurcationFilter {
    params: FilterParams,
    position_prior: PositionPrior,
    z_bif: Vec<f64>,
    reference: Rotation3<f64>,
    state: FilterState,
}

impl BifurcationFilter {
    pub fn new(skel: &AirwaySkeleton, params: FilterParams) -> Result<Self, FilterError> {
        params.validate()?;
        if skel.bifurcations().is_empty() {
            return Err(FilterError::NoBifurcations);
        }
        let z_bif = skel
            .bifurcations()
            .iter()
            .map(|b| skel.path_length_from_trachea(b))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            position_prior: PositionPrior::new(&params.sigma_x_mm2)?,
            params,
            z_bif,
            reference: entrance_pose(skel).rotation,
            state: FilterState::at_entrance(skel),
        })
    }

    pub fn with_state(mut self, state: FilterState) -> Self {
        self.state = state;
        self
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn reset(&mut self, skel: &AirwaySkeleton) {
        self.state = FilterState::at_entrance(skel);
    }

    /// Roll of `rotation` relative to the trachea entrance frame.
    pub fn absolute_roll_deg(&self, rotation: &Rotation3<f64>) -> f64 {
        relative_roll_deg(&self.reference, rotation)
    }

    /// Processes one frame. `skel` must be the skeleton the filter was built on.
    pub fn step(
        &mut self,
        skel: &AirwaySkeleton,
        frame: &ObservationFrame,
    ) -> Result<FilterOutput, FilterError> {
        if frame.mode != ObservationMode::Bifurcation {
            return Err(FilterError::ModeMismatch {
                expected: ObservationMode::Bifurcation,
                got: frame.mode,
            });
        }
        let mut diagnostics = FilterDiagnostics::default();

        if let Some((parent_slot, child_slots, meas)) = select_measurement(frame) {
            diagnostics.parent_slot = Some(parent_slot);
            if let Some(win) = self.update(skel, frame, &meas, &child_slots, &mut diagnostics)? {
                let bif = skel
                    .bifurcation(win.bifurcation)
                    .ok_or(SkeletonError::UnknownBifurcation(win.bifurcation))?;
                let pose = win.pose;
                self.state.est_pose = pose;
                self.state.prev_visible = win.assignment.values().copied().collect();
                self.state.prev_roll_deg = self.absolute_roll_deg(&pose.rotation);
                self.state.prev_insertion_mm = frame.insertion_mm;
                self.state.current_airway = bif.parent_airway_id;
                self.state.next_airway = self.expected_child(skel, bif, &pose)?;
                self.state.has_fix = true;
                diagnostics.updated = true;
                diagnostics.winner = Some(win.bifurcation);
                return Ok(FilterOutput {
                    estimate: pose,
                    assignment: win.assignment,
                    diagnostics,
                });
            }
        }

        let delta = frame.insertion_mm - self.state.prev_insertion_mm;
        diagnostics.dead_reckoned_mm = delta;
        diagnostics.entered = self.dead_reckon(skel, delta)?;
        self.state.prev_insertion_mm = frame.insertion_mm;
        self.state.prev_roll_deg = self.absolute_roll_deg(&self.state.est_pose.rotation);
        Ok(FilterOutput {
            estimate: self.state.est_pose,
            assignment: BTreeMap::new(),
            diagnostics,
        })
    }

    fn update(
        &self,
        skel: &AirwaySkeleton,
        frame: &ObservationFrame,
        meas: &BifurcationMeasurement,
        child_slots: &[usize],
        diagnostics: &mut FilterDiagnostics,
    ) -> Result<Option<Winner>, FilterError> {
        let p = &self.params;
        let bifs = skel.bifurcations();
        let air = if self.state.has_fix {
            airway_prior(skel, &self.state.prev_visible, p)?
        } else {
            vec![1.0 / bifs.len() as f64; bifs.len()]
        };
        let tip = meas.parent_tip_cam;
        let z_hat = match p.depth {
            DepthMode::Axial => tip.z,
            DepthMode::Euclidean => tip.norm(),
        };
        let roll_in_prior = matches!(p.roll_term, RollPlacement::Prior | RollPlacement::Both);
        let roll_in_post = matches!(p.roll_term, RollPlacement::Posterior | RollPlacement::Both);

        // Hypotheses per bifurcation and the prior of each bifurcation under
        // its best-fitting hypothesis.
        let mut per_bif: Vec<(usize, Vec<Hypothesis>, f64, f64)> = Vec::new();
        for (bi, bif) in bifs.iter().enumerate() {
            let hyps = hypotheses(bif, meas, p.sigma_fit_rad)?;
            if hyps.is_empty() {
                continue;
            }
            diagnostics.hypotheses_scored += hyps.len();
            let best = hyps
                .iter()
                .max_by(|a, b| a.ln_fit.total_cmp(&b.ln_fit))
                .expect("non-empty");
            let s = self.score(best);
            let ln_ins = ln_normal_pdf(frame.insertion_mm + z_hat - self.z_bif[bi], p.sigma_ins_mm);
            let ln_base = ln_ins + air[bi].ln();
            let ln_prior = ln_base + s.ln_x + if roll_in_prior { s.ln_roll } else { 0.0 };
            per_bif.push((bi, hyps, ln_base, ln_prior));
        }
        diagnostics.bifurcations_scored = per_bif.len();
        if per_bif.is_empty() {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..per_bif.len()).collect();
        order.sort_by(|&a, &b| per_bif[b].3.total_cmp(&per_bif[a].3).then(a.cmp(&b)));
        order.truncate(p.n_candidates);

        let mut winner: Option<(f64, usize, &Hypothesis)> = None;
        for (rank, &k) in order.iter().enumerate() {
            let (bi, hyps, ln_base, _) = &per_bif[k];
            let mut best: Option<(f64, Scored)> = None;
            for h in hyps {
                let s = self.score(h);
                let ln_post = h.ln_fit
                    + ln_base
                    + s.ln_x
                    + if roll_in_prior { s.ln_roll } else { 0.0 }
                    + if roll_in_post { s.ln_roll } else { 0.0 };
                if best.as_ref().is_none_or(|(b, _)| ln_post > *b) {
                    best = Some((ln_post, s));
                }
            }
            let (ln_post, s) = best.expect("non-empty");
            diagnostics
                .candidates
                .push(self.describe(&bifs[*bi], *bi, rank, frame, z_hat, &air, &s, ln_post, child_slots)?);
            if winner.is_none_or(|(w, _, _)| ln_post > w) {
                winner = Some((ln_post, *bi, s.hyp));
            }
        }

        let (_, bi, hyp) = winner.expect("at least one candidate");
        let bif = &bifs[bi];
        Ok(Some(Winner {
            bifurcation: bif.parent_airway_id,
            pose: hyp.backout.pose,
            assignment: assignment_map(bif, hyp, child_slots, diagnostics.parent_slot),
        }))
    }

    fn score<'h>(&self, hyp: &'h Hypothesis) -> Scored<'h> {
        let pose = &hyp.backout.pose;
        let roll_deg = self.absolute_roll_deg(&pose.rotation);
        let ln_x = if self.state.has_fix {
            self.position_prior
                .ln_density(&(self.state.est_pose.position - pose.position))
        } else {
            0.0
        };
        let ln_roll = ln_normal_pdf(
            wrap_deg(self.state.prev_roll_deg - roll_deg),
            self.params.sigma_roll_deg,
        );
        Scored {
            hyp,
            ln_x,
            ln_roll,
            roll_deg,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn describe(
        &self,
        bif: &Bifurcation,
        bi: usize,
        rank: usize,
        frame: &ObservationFrame,
        z_hat: f64,
        air: &[f64],
        s: &Scored,
        ln_posterior: f64,
        child_slots: &[usize],
    ) -> Result<CandidateScore, FilterError> {
        let p = &self.params;
        let h = s.hyp;
        let obs: Vec<Vec3> = h.backout.aligned_child_dirs.clone();
        let fit = prob_fit(&obs, &h.backout.ct_child_dirs, p.sigma_fit_rad);
        let ins = prob_ins(frame.insertion_mm, z_hat, self.z_bif[bi], p.sigma_ins_mm);
        let x = if self.state.has_fix {
            self.position_prior
                .density(&(self.state.est_pose.position - h.backout.pose.position))
        } else {
            1.0
        };
        let roll = prob_roll(self.state.prev_roll_deg, s.roll_deg, p.sigma_roll_deg);
        let mut prob_bif = ins * air[bi] * x;
        let mut posterior = fit * prob_bif;
        match p.roll_term {
            RollPlacement::Posterior => posterior *= roll,
            RollPlacement::Prior => {
                prob_bif *= roll;
                posterior *= roll;
            }
            RollPlacement::Both => {
                prob_bif *= roll;
                posterior *= roll * roll;
            }
        }
        Ok(CandidateScore {
            bifurcation: bif.parent_airway_id,
            prior_rank: rank,
            z_bif_mm: self.z_bif[bi],
            z_hat_mm: z_hat,
            prob_fit: fit,
            prob_ins: ins,
            prob_airways: air[bi],
            prob_x: x,
            prob_roll: roll,
            prob_bif,
            posterior,
            ln_posterior,
            roll_deg: s.roll_deg,
            residual_deg: h.backout.residual_deg,
            assignment: assignment_map(bif, h, child_slots, None),
            position: h.backout.pose.position.into(),
        })
    }

    /// Child of the bifurcation the estimate is heading toward: the one whose
    /// look-ahead pointing best matches the estimated pointing, falling back
    /// to raw tangent alignment when the look-ahead does not reach past the
    /// bifurcation.
    fn expected_child(
        &self,
        skel: &AirwaySkeleton,
        bif: &Bifurcation,
        pose: &Pose,
    ) -> Result<Option<AirwayId>, FilterError> {
        let parent = skel
            .airway(bif.parent_airway_id)
            .ok_or(SkeletonError::UnknownAirway(bif.parent_airway_id))?;
        let (s_local, _) = parent.project(&pose.position);
        let pz = pose.p_z();
        let mut scored: Vec<(f64, f64, AirwayId)> = Vec::new();
        for (child, dir) in bif.child_airway_ids.iter().zip(&bif.child_dirs) {
            let mut ids = Vec::with_capacity(3);
            ids.extend(parent.parent_id);
            ids.push(parent.id);
            ids.push(*child);
            let chain = CenterlinePath::new(skel, &ids)?;
            let base = chain.start_of(ids.len() - 2);
            let heading = chain.heading(base + s_local, self.params.lookahead_mm);
            scored.push((pz.dot(&heading), pz.dot(dir), *child));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        if scored.len() > 1 && scored[0].0 - scored[1].0 < 1e-12 {
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        }
        Ok(scored.first().map(|s| s.2))
    }

    /// Advances the estimate by `delta` mm of insertion along the believed
    /// path. Returns the airway entered, if the advance crossed a junction.
    fn dead_reckon(&mut self, skel: &AirwaySkeleton, delta: f64) -> Result<Option<AirwayId>, FilterError> {
        let current = skel
            .airway(self.state.current_airway)
            .ok_or(SkeletonError::UnknownAirway(self.state.current_airway))?;
        let mut ids = Vec::with_capacity(3);
        ids.extend(current.parent_id);
        let own = ids.len();
        ids.push(current.id);
        ids.extend(self.state.next_airway);
        let chain = CenterlinePath::new(skel, &ids)?;

        let (s_local, _) = current.project(&self.state.est_pose.position);
        let s = chain.start_of(own) + s_local;
        let s_new = s + delta;
        let lookahead = self.params.lookahead_mm;
        let pose = &mut self.state.est_pose;
        pose.position += chain.point(s_new) - chain.point(s);
        pose.rotation = minimal_rotation(&chain.heading(s, lookahead), &chain.heading(s_new, lookahead))
            * pose.rotation;

        let now = chain.locate(s_new);
        let entered = if now > own {
            // Crossed into the expected child.
            self.state.current_airway = ids[now];
            self.state.next_airway = None;
            Some(ids[now])
        } else if now < own && s_new < chain.start_of(own) {
            // Retracted into the parent.
            self.state.next_airway = Some(current.id);
            self.state.current_airway = ids[now];
            Some(ids[now])
        } else {
            None
        };
        Ok(entered)
    }
}

struct Winner {
    bifurcation: AirwayId,
    pose: Pose,
    assignment: BTreeMap<usize, AirwayId>,
}

/// Parent observation (the nearest visible airway whose bifurcation is
/// visible) plus every other visible observation, when at least two remain.
fn select_measurement(
    frame: &ObservationFrame,
) -> Option<(usize, Vec<usize>, BifurcationMeasurement)> {
    let visible: Vec<usize> = (0..frame.observations.len())
        .filter(|&i| frame.observations[i].is_vis)
        .collect();
    if visible.len() < 3 {
        return None;
    }
    let parent = visible
        .iter()
        .copied()
        .filter(|&i| frame.observations[i].has_vis_child)
        .min_by(|&a, &b| {
            frame.observations[a]
                .tip()
                .norm()
                .total_cmp(&frame.observations[b].tip().norm())
        })?;
    let children: Vec<usize> = visible.into_iter().filter(|&i| i != parent).collect();
    let p = &frame.observations[parent];
    let meas = BifurcationMeasurement {
        parent_tip_cam: p.tip(),
        parent_dir_cam: angles_to_dir(&p.angles),
        child_dirs_cam: children
            .iter()
            .map(|&i| angles_to_dir(&frame.observations[i].angles))
            .collect(),
    };
    Some((parent, children, meas))
}

/// Every injective matching of `min(m, k)` observed children to CT children
/// (at least two), each backed out to a pose and scored by fit.
fn hypotheses(
    bif: &Bifurcation,
    meas: &BifurcationMeasurement,
    sigma_fit_rad: f64,
) -> Result<Vec<Hypothesis>, FilterError> {
    let m = meas.child_dirs_cam.len();
    let k = bif.child_dirs.len();
    let r = m.min(k);
    if r < 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for obs in combinations(m, r) {
        for ct in permutations(k, r) {
            let sub = BifurcationMeasurement {
                parent_tip_cam: meas.parent_tip_cam,
                parent_dir_cam: meas.parent_dir_cam,
                child_dirs_cam: obs.iter().map(|&i| meas.child_dirs_cam[i]).collect(),
            };
            let backout = match backout_pose(bif, &sub, &ct) {
                Ok(b) => b,
                Err(GeometryError::RollIndeterminate) => continue,
                Err(e) => return Err(e.into()),
            };
            let ln_fit = ln_prob_fit(&backout.aligned_child_dirs, &backout.ct_child_dirs, sigma_fit_rad);
            out.push(Hypothesis {
                obs: obs.clone(),
                ct,
                backout,
                ln_fit,
            });
        }
    }
    Ok(out)
}

fn assignment_map(
    bif: &Bifurcation,
    hyp: &Hypothesis,
    child_slots: &[usize],
    parent_slot: Option<usize>,
) -> BTreeMap<usize, AirwayId> {
    let mut map: BTreeMap<usize, AirwayId> = hyp
        .obs
        .iter()
        .zip(&hyp.ct)
        .map(|(&o, &c)| (child_slots[o], bif.child_airway_ids[c]))
        .collect();
    if let Some(p) = parent_slot {
        map.insert(p, bif.parent_airway_id);
    }
    map
}

/// Increasing `r`-subsets of `0..n`.
fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, r, &mut Vec::new(), &mut out);
    out
}

/// Ordered `r`-tuples of distinct elements of `0..n`.
fn permutations(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !cur.contains(&i) {
                cur.push(i);
                rec(n, r, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, r, &mut Vec::new(), &mut out);
    out
}

/// Single-step functional form; builds the lookup tables every call.
pub fn filter_step(
    state: &FilterState,
    frame: &ObservationFrame,
    skel: &AirwaySkeleton,
    params: &FilterParams,
) -> Result<(FilterState, FilterOutput), FilterError> {
    let mut filter = BifurcationFilter::new(skel, params.clone())?.with_state(state.clone());
    let out = filter.step(skel, frame)?;
    Ok((filter.state, out))
}

/// Airways visible from the filter's estimate.
pub fn estimated_visible(
    pose: &Pose,
    camera: &CameraModel,
    skel: &AirwaySkeleton,
) -> BTreeSet<AirwayId> {
    visible_airways(pose, camera, skel).visible
}
