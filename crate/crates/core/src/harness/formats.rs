//! Line-oriented logs and metric tables.
//!
//! - Trajectory JSONL: `{t, position, rotation, insertion, airway?}` per line.
//!   `rotation` is row-major 3x3 by default; with `"rotation_format":
//!   "quaternion"` it is `[w, x, y, z]`.
//! - Estimate JSONL: `{frame, t, est_position, est_rotation, assignment,
//!   bif_correct, diagnostics}` per line, frames in order.
//! - Metrics CSV: one row per run, `algorithm, train_label, test_label,
//!   f1_g1..f1_g5, e_p_mm, e_d_deg, e_r_deg, loop_hz`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{Pose, Vec3};
use crate::metrics::Aggregate;
use crate::sim::TrajectoryFrame;
use crate::skeleton::{AirwayId, AirwaySkeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationFormat {
    #[default]
    Matrix,
    Quaternion,
}

fn is_matrix(f: &RotationFormat) -> bool {
    *f == RotationFormat::Matrix
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub t: f64,
    pub position: [f64; 3],
    pub rotation: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_matrix")]
    pub rotation_format: RotationFormat,
    pub insertion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airway: Option<AirwayId>,
}

impl From<&TrajectoryFrame> for TrajectoryLine {
    fn from(f: &TrajectoryFrame) -> Self {
        Self {
            t: f.t,
            position: f.true_pose.position.into(),
            rotation: f.true_pose.rotation_row_major().to_vec(),
            rotation_format: RotationFormat::Matrix,
            insertion: f.insertion_mm,
            airway: Some(f.airway),
        }
    }
}

impl TrajectoryLine {
    pub fn pose(&self) -> Result<Pose, HarnessError> {
        match (self.rotation_format, self.rotation.len()) {
            (RotationFormat::Matrix, 9) => {
                let mut m = [0.0; 9];
                m.copy_from_slice(&self.rotation);
                Ok(Pose::from_row_major(self.position, m)?)
            }
            (RotationFormat::Quaternion, 4) => {
                let r = &self.rotation;
                let q = Quaternion::new(r[0], r[1], r[2], r[3]);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(HarnessError::Format(format!("quaternion norm {}", q.norm())));
                }
                let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
                Ok(Pose {
                    position: Vec3::from(self.position),
                    rotation: rot,
                })
            }
            (fmt, n) => Err(HarnessError::Format(format!(
                "{fmt:?} rotation needs {} values, got {n}",
                if fmt == RotationFormat::Matrix { 9 } else { 4 }
            ))),
        }
    }

    /// Converts to a frame; a missing airway is filled in with the nearest
    /// skeleton airway.
    pub fn to_frame(&self, skel: &AirwaySkeleton) -> Result<TrajectoryFrame, HarnessError> {
        let pose = self.pose()?;
        let airway = self
            .airway
            .unwrap_or_else(|| skel.nearest_airway(&pose.position).id);
        Ok(TrajectoryFrame {
            t: self.t,
            true_pose: pose,
            insertion_mm: self.insertion,
            airway,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateLine {
    pub frame: usize,
    pub t: f64,
    pub est_position: Option<[f64; 3]>,
    pub est_rotation: Option<[f64; 9]>,
    pub assignment: BTreeMap<usize, AirwayId>,
    pub bif_correct: bool,
    pub diagnostics: serde_json::Value,
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, HarnessError> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_trajectory(path: impl AsRef<Path>, frames: &[TrajectoryFrame]) -> Result<(), HarnessError> {
    let lines: Vec<TrajectoryLine> = frames.iter().map(TrajectoryLine::from).collect();
    write_jsonl(path, &lines)
}

pub fn read_trajectory(
    path: impl AsRef<Path>,
    skel: &AirwaySkeleton,
) -> Result<Vec<TrajectoryFrame>, HarnessError> {
    read_jsonl::<TrajectoryLine>(path)?
        .iter()
        .map(|l| l.to_frame(skel))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub train_label: String,
    pub test_label: String,
    pub f1_g1: Option<f64>,
    pub f1_g2: Option<f64>,
    pub f1_g3: Option<f64>,
    pub f1_g4: Option<f64>,
    pub f1_g5: Option<f64>,
    pub e_p_mm: Option<f64>,
    pub e_d_deg: Option<f64>,
    pub e_r_deg: Option<f64>,
    pub loop_hz: Option<f64>,
}

impl MetricsRow {
    pub fn from_aggregate(algorithm: &str, train: &str, test: &str, agg: &Aggregate) -> Self {
        let g = |k: u32| agg.f1_by_generation.get(&k).map(|s| s.mean);
        Self {
            algorithm: algorithm.to_string(),
            train_label: train.to_string(),
            test_label: test.to_string(),
            f1_g1: g(1),
            f1_g2: g(2),
            f1_g3: g(3),
            f1_g4: g(4),
            f1_g5: g(5),
            e_p_mm: agg.e_p_mm.map(|s| s.mean),
            e_d_deg: agg.e_d_deg.map(|s| s.mean),
            e_r_deg: agg.e_r_deg.map(|s| s.mean),
            loop_hz: agg.loop_hz.map(|s| s.mean),
        }
    }
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}
