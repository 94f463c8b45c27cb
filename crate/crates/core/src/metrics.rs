//! Visible-airway classification scores and tracking summaries.
//!
//! Scores are micro-averaged: true positives, false positives and false
//! negatives are pooled over all frames of a bin before the ratios are taken.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{tracking_errors, Pose};
use crate::skeleton::AirwayId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pooled confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Accumulator {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub frames: u64,
}

impl F1Accumulator {
    pub fn add(&mut self, truth: &BTreeSet<AirwayId>, estimate: &BTreeSet<AirwayId>) {
        let tp = truth.intersection(estimate).count() as u64;
        self.true_pos += tp;
        self.false_pos += estimate.len() as u64 - tp;
        self.false_neg += truth.len() as u64 - tp;
        self.frames += 1;
    }

    pub fn merge(&mut self, other: &F1Accumulator) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.frames += other.frames;
    }

    /// `None` when neither the truth nor the estimates named any airway.
    pub fn score(&self) -> Option<PrF1> {
        let predicted = self.true_pos + self.false_pos;
        let actual = self.true_pos + self.false_neg;
        if predicted == 0 && actual == 0 {
            return None;
        }
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.true_pos, predicted);
        let recall = ratio(self.true_pos, actual);
        // 2PR / (P + R) in counts, so it is exact up to one rounding.
        let f1 = ratio(2 * self.true_pos, 2 * self.true_pos + self.false_pos + self.false_neg);
        Some(PrF1 {
            precision,
            recall,
            f1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub true_visible: BTreeSet<AirwayId>,
    pub est_visible: BTreeSet<AirwayId>,
    pub true_pose: Pose,
    pub est_pose: Option<Pose>,
    /// A bifurcation assignment was produced and every assigned id was right.
    pub bif_correct: bool,
    pub true_generation: u32,
}

pub fn precision_recall(records: &[FrameRecord]) -> Option<PrF1> {
    let mut acc = F1Accumulator::default();
    for r in records {
        acc.add(&r.true_visible, &r.est_visible);
    }
    acc.score()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub frames: usize,
}

/// Scores binned by the generation of the airway containing the true
/// position. Bins where nothing was visible or estimated are omitted.
pub fn f1_by_generation(records: &[FrameRecord]) -> BTreeMap<u32, GenerationScore> {
    let mut bins: BTreeMap<u32, F1Accumulator> = BTreeMap::new();
    for r in records {
        bins.entry(r.true_generation)
            .or_default()
            .add(&r.true_visible, &r.est_visible);
    }
    bins.into_iter()
        .filter_map(|(g, acc)| {
            acc.score().map(|s| {
                (
                    g,
                    GenerationScore {
                        precision: s.precision,
                        recall: s.recall,
                        f1: s.f1,
                        frames: acc.frames as usize,
                    },
                )
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub e_p_mm: f64,
    pub e_d_deg: f64,
    pub e_r_deg: f64,
    pub frames: usize,
}

/// Mean tracking errors over correctly labeled frames.
pub fn tracking_summary(records: &[FrameRecord]) -> Option<TrackingSummary> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for r in records.iter().filter(|r| r.bif_correct) {
        let Some(est) = &r.est_pose else { continue };
        let e = tracking_errors(&r.true_pose, est);
        sum[0] += e.e_p;
        sum[1] += e.e_d;
        sum[2] += e.e_r;
        n += 1;
    }
    (n > 0).then(|| TrackingSummary {
        e_p_mm: sum[0] / n as f64,
        e_d_deg: sum[1] / n as f64,
        e_r_deg: sum[2] / n as f64,
        frames: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub frames: usize,
    pub overall: Option<PrF1>,
    pub by_generation: BTreeMap<u32, GenerationScore>,
    pub tracking: Option<TrackingSummary>,
    pub loop_hz: Option<f64>,
}

pub fn evaluate_sequence(records: &[FrameRecord], loop_hz: Option<f64>) -> SequenceResult {
    SequenceResult {
        frames: records.len(),
        overall: precision_recall(records),
        by_generation: f1_by_generation(records),
        tracking: tracking_summary(records),
        loop_hz,
    }
}

/// Weighted mean with the range it was taken over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub weight: f64,
}

impl Spread {
    fn from_weighted(items: impl IntoIterator<Item = (f64, f64)>) -> Option<Self> {
        let mut total = 0.0;
        let mut acc = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for (value, weight) in items {
            total += weight;
            acc += value * weight;
            min = min.min(value);
            max = max.max(value);
        }
        (total > 0.0).then(|| Spread {
            mean: acc / total,
            min,
            max,
            weight: total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub frames: usize,
    /// Overall F1 weighted by sequence frame counts.
    pub f1: Option<Spread>,
    /// Per-generation F1 weighted by the frames each sequence spent there.
    pub f1_by_generation: BTreeMap<u32, Spread>,
    /// Tracking errors weighted by qualifying frame counts.
    pub e_p_mm: Option<Spread>,
    pub e_d_deg: Option<Spread>,
    pub e_r_deg: Option<Spread>,
    /// Loop rate weighted by sequence frame counts.
    pub loop_hz: Option<Spread>,
}

pub fn aggregate(results: &[SequenceResult]) -> Aggregate {
    let mut generations: BTreeSet<u32> = BTreeSet::new();
    for r in results {
        generations.extend(r.by_generation.keys());
    }
    let f1_by_generation = generations
        .into_iter()
        .filter_map(|g| {
            Spread::from_weighted(results.iter().filter_map(|r| {
                r.by_generation.get(&g).map(|s| (s.f1, s.frames as f64))
            }))
            .map(|s| (g, s))
        })
        .collect();
    let tracking = |pick: fn(&TrackingSummary) -> f64| {
        Spread::from_weighted(
            results
                .iter()
                .filter_map(|r| r.tracking.as_ref().map(|t| (pick(t), t.frames as f64))),
        )
    };
    Aggregate {
        sequences: results.len(),
        frames: results.iter().map(|r| r.frames).sum(),
        f1: Spread::from_weighted(
            results
                .iter()
                .filter_map(|r| r.overall.map(|s| (s.f1, r.frames as f64))),
        ),
        f1_by_generation,
        e_p_mm: tracking(|t| t.e_p_mm),
        e_d_deg: tracking(|t| t.e_d_deg),
        e_r_deg: tracking(|t| t.e_r_deg),
        loop_hz: Spread::from_weighted(
            results
                .iter()
                .filter_map(|r| r.loop_hz.map(|hz| (hz, r.frames as f64))),
        ),
    }
}
