//! Bronchoscope localization against a CT airway centerline skeleton.
//!
//! The crate is organized bottom-up:
//!
//! - [`skeleton`]: the airway tree, bifurcations, synthetic lung generation.
//! - [`geometry`]: poses, camera-frame transforms, visibility, tracking errors,
//!   optimal roll and pose back-out from a matched bifurcation.
//! - [`perception`]: ground-truth airway observations and a noise model that
//!   stands in for a learned detector.
//! - [`filter`]: the bifurcation particle filter (generic observations matched
//!   to skeleton bifurcations through a prior and a fit likelihood).
//! - [`direct`]: the stateless localizer for observations already classified
//!   with skeleton airway ids.
//! - [`sim`]: ground-truth bronchoscope trajectories with insertion telemetry.
//! - [`metrics`]: visible-airway precision/recall/F1 and tracking summaries.
//! - [`harness`]: run configuration, batch runs, parameter sweeps, log formats
//!   and the interactive session protocol.

pub mod direct;
pub mod filter;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod perception;
pub mod sim;
pub mod skeleton;

pub use geometry::{CameraModel, Pose, TrackingError, Vec3};
pub use skeleton::{Airway, AirwayId, AirwaySkeleton, Bifurcation};
