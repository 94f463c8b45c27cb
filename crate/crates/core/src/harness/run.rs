use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::config::RunConfig;
use super::formats::{write_csv, write_jsonl, write_trajectory, EstimateLine, MetricsRow};
use super::tracker::Tracker;
use super::HarnessError;
use crate::geometry::visible_airways;
use crate::metrics::{aggregate, evaluate_sequence, Aggregate, FrameRecord, SequenceResult};
use crate::perception::{observe_truth, Corruptor, NoiseModel};
use crate::sim::{plan_path, simulate, SimParams, TrajectoryFrame};
use crate::skeleton::{AirwayId, AirwaySkeleton};

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub index: usize,
    pub target: AirwayId,
    pub trajectory: Vec<TrajectoryFrame>,
    pub estimates: Vec<EstimateLine>,
    pub records: Vec<FrameRecord>,
    /// Time spent in observe, corrupt and localize, summed over frames.
    pub loop_time: Duration,
    pub result: SequenceResult,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub skeleton_name: String,
    pub sequences: Vec<SequenceOutput>,
    pub aggregate: Aggregate,
}

#[derive(Serialize)]
struct ResultsDoc<'a> {
    skeleton: &'a str,
    algorithm: &'a str,
    train_label: &'a str,
    test_label: &'a str,
    aggregate: &'a Aggregate,
    sequences: Vec<SequenceSummary<'a>>,
}

#[derive(Serialize)]
struct SequenceSummary<'a> {
    index: usize,
    target: AirwayId,
    result: &'a SequenceResult,
}

/// The per-sequence simulation and noise parameters of `cfg`.
pub fn sequence_params(cfg: &RunConfig, index: usize) -> (SimParams, NoiseModel) {
    let seeds = cfg.sequence_seeds(index);
    let sim = SimParams { seed: seeds.sim, ..cfg.sim.clone() };
    let noise = NoiseModel { seed: seeds.noise, ..cfg.noise.clone() };
    (sim, noise)
}

/// Runs every sequence of `cfg` (in parallel) against `skel`.
pub fn run(cfg: &RunConfig, skel: &AirwaySkeleton) -> Result<RunOutput, HarnessError> {
    cfg.validate(skel)?;
    let results: Vec<Result<SequenceOutput, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.sequences)
            .map(|k| scope.spawn(move || run_sequence(cfg, skel, k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sequence worker panicked"))
            .collect()
    });
    let sequences = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let per_seq: Vec<SequenceResult> = sequences.iter().map(|s| s.result.clone()).collect();
    Ok(RunOutput {
        config: cfg.clone(),
        skeleton_name: skel.name().to_string(),
        aggregate: aggregate(&per_seq),
        sequences,
    })
}

pub fn run_sequence(
    cfg: &RunConfig,
    skel: &AirwaySkeleton,
    index: usize,
) -> Result<SequenceOutput, HarnessError> {
    let target = cfg.target(skel, index);
    let (sim, noise) = sequence_params(cfg, index);
    let trajectory = simulate(skel, &plan_path(skel, target)?, &sim)?;
    let mut out = track_trajectory(cfg, skel, &trajectory, noise)?;
    out.index = index;
    out.target = target;
    Ok(out)
}

/// Feeds an existing trajectory through observation, corruption and the
/// configured localizer.
pub fn track_trajectory(
    cfg: &RunConfig,
    skel: &AirwaySkeleton,
    trajectory: &[TrajectoryFrame],
    noise: NoiseModel,
) -> Result<SequenceOutput, HarnessError> {
    let mode = cfg.algorithm.mode();
    let mut corruptor = Corruptor::new(noise, cfg.camera)?;
    let mut tracker = Tracker::new(cfg.algorithm, skel, &cfg.filter)?;
    let mut estimates = Vec::with_capacity(trajectory.len());
    let mut records = Vec::with_capacity(trajectory.len());
    let mut loop_time = Duration::ZERO;

    for (i, f) in trajectory.iter().enumerate() {
        let start = Instant::now();
        let truth = observe_truth(&f.true_pose, &cfg.camera, skel, mode).stamped(f.t, f.insertion_mm);
        let observed = corruptor.corrupt(&truth, skel);
        let step = tracker.step(skel, &cfg.camera, &observed, i)?;
        loop_time += start.elapsed();

        records.push(FrameRecord {
            t: f.t,
            true_visible: visible_airways(&f.true_pose, &cfg.camera, skel).visible,
            est_visible: step.est_visible,
            true_pose: f.true_pose,
            est_pose: step.est_pose,
            bif_correct: step.bif_correct,
            true_generation: skel.nearest_airway(&f.true_pose.position).generation,
        });
        estimates.push(EstimateLine {
            frame: i,
            t: f.t,
            est_position: step.est_pose.map(|p| p.position.into()),
            est_rotation: step.est_pose.map(|p| p.rotation_row_major()),
            assignment: step.assignment,
            bif_correct: step.bif_correct,
            diagnostics: step.diagnostics,
        });
    }

    let secs = loop_time.as_secs_f64();
    let loop_hz = (secs > 0.0).then(|| trajectory.len() as f64 / secs);
    let result = evaluate_sequence(&records, loop_hz);
    Ok(SequenceOutput {
        index: 0,
        target: trajectory.last().map(|f| f.airway).unwrap_or(skel.root_id()),
        trajectory: trajectory.to_vec(),
        estimates,
        records,
        loop_time,
        result,
    })
}

impl RunOutput {
    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow::from_aggregate(
            self.config.algorithm.name(),
            &self.config.train_label,
            &self.config.test_label,
            &self.aggregate,
        )
    }

    /// Writes `trajectory_{k}.jsonl`, `estimates_{k}.jsonl`, `metrics.csv`
    /// and `results.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for s in &self.sequences {
            write_trajectory(dir.join(format!("trajectory_{}.jsonl", s.index)), &s.trajectory)?;
            write_jsonl(dir.join(format!("estimates_{}.jsonl", s.index)), &s.estimates)?;
        }
        write_csv(dir.join("metrics.csv"), &[self.metrics_row()])?;
        let doc = ResultsDoc {
            skeleton: &self.skeleton_name,
            algorithm: self.config.algorithm.name(),
            train_label: &self.config.train_label,
            test_label: &self.config.test_label,
            aggregate: &self.aggregate,
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceSummary {
                    index: s.index,
                    target: s.target,
                    result: &s.result,
                })
                .collect(),
        };
        std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}
