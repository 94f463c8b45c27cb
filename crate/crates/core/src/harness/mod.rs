//! Batch runs, parameter sweeps, log formats and interactive sessions.

pub mod config;
pub mod formats;
pub mod run;
pub mod session;
pub mod sweep;
pub mod tracker;

use thiserror::Error;

pub use config::{Algorithm, RunConfig, SkeletonSource, SynthSpec};
pub use run::{run, run_sequence, track_trajectory, RunOutput, SequenceOutput};
pub use session::{ClientMessage, ServerMessage, SessionHub, PROTOCOL_VERSION};
pub use sweep::{parse_grid, sweep, SweepParam, SweepRow};
pub use tracker::{TrackStep, Tracker};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown sweep parameter {0}")]
    UnknownParam(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("session error: {0}")]
    Session(String),
    #[error("filter failed at frame {frame}: {source}")]
    Filter {
        frame: usize,
        source: crate::filter::FilterError,
    },
    #[error("direct localizer failed at frame {frame}: {source}")]
    Direct {
        frame: usize,
        source: crate::direct::DirectError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Skeleton(#[from] crate::skeleton::SkeletonError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Noise(#[from] crate::perception::NoiseError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    FilterParams(#[from] crate::filter::FilterError),
}
