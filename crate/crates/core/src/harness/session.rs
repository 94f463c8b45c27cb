//! Interactive sessions, protocol version 1.
//!
//! Messages are JSON objects tagged by `"type"`. A client opens a session,
//! then drives it tick by tick: every `steer` or `pose` message advances the
//! simulation one frame, runs the localizer and returns one `tick`.
//!
//! Client to server:
//!
//! ```text
//! {"type":"open","version":1,"skeleton":{"synth":{"generations":5,"seed":0}},
//!  "config":{"algorithm":"bifurcation","noise":{...},"filter":{...},
//!            "camera":{...},"frame_rate_hz":30}}
//! {"type":"open","version":1,"skeleton":{"inline":{<skeleton document>}}}
//! {"type":"steer","session":1,"pitch_deg":0,"yaw_deg":0,"insert_mm":0.5}
//! {"type":"pose","session":1,"t":0.1,"position":[..3],"rotation":[..9],
//!  "insertion":12.0}
//! {"type":"close","session":1}
//! ```
//!
//! Server to client: `opened` (session id, skeleton document, initial pose),
//! `tick` (true and estimated pose, visible sets, assignment, diagnostics,
//! running F1), `closed`, and `error` (the session, if any, is preserved).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::{Algorithm, SynthSpec};
use super::formats::RotationFormat;
use super::formats::TrajectoryLine;
use super::tracker::Tracker;
use super::HarnessError;
use crate::filter::FilterParams;
use crate::geometry::{
    axis_rotation, tracking_errors, visible_airways, CameraModel, Pose, TrackingError, Vec3,
};
use crate::metrics::{F1Accumulator, GenerationScore, PrF1};
use crate::perception::{observe_truth, Corruptor, NoiseModel};
use crate::sim::entrance_pose;
use crate::skeleton::{synth_lung, AirwayId, AirwaySkeleton};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_MAX_SESSIONS: usize = 16;

fn protocol_version() -> u32 {
    PROTOCOL_VERSION
}

fn default_frame_rate() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SessionSkeleton {
    Synth(SynthSpec),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub algorithm: Algorithm,
    pub noise: NoiseModel,
    pub filter: FilterParams,
    pub camera: CameraModel,
    pub frame_rate_hz: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Bifurcation,
            noise: NoiseModel::none(),
            filter: FilterParams::default(),
            camera: CameraModel::default(),
            frame_rate_hz: default_frame_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ClientMessage {
    Open {
        #[serde(default = "protocol_version")]
        version: u32,
        skeleton: SessionSkeleton,
        #[serde(default)]
        config: SessionConfig,
    },
    Steer {
        session: u64,
        #[serde(default)]
        pitch_deg: f64,
        #[serde(default)]
        yaw_deg: f64,
        #[serde(default)]
        insert_mm: f64,
    },
    Pose {
        session: u64,
        #[serde(default)]
        t: Option<f64>,
        position: [f64; 3],
        rotation: Vec<f64>,
        #[serde(default)]
        rotation_format: RotationFormat,
        insertion: f64,
    },
    Close {
        session: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub session: u64,
    pub frame: u64,
    pub t: f64,
    pub insertion_mm: f64,
    pub true_pose: Pose,
    pub est_pose: Option<Pose>,
    pub true_visible: BTreeSet<AirwayId>,
    pub est_visible: BTreeSet<AirwayId>,
    pub assignment: BTreeMap<usize, AirwayId>,
    pub bif_correct: bool,
    pub updated: bool,
    pub tracking_error: Option<TrackingError>,
    pub true_generation: u32,
    pub diagnostics: serde_json::Value,
    pub f1: Option<PrF1>,
    pub f1_by_generation: BTreeMap<u32, GenerationScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Opened {
        version: u32,
        session: u64,
        algorithm: Algorithm,
        skeleton: serde_json::Value,
        true_pose: Pose,
        insertion_mm: f64,
    },
    Tick(Box<Tick>),
    Closed {
        session: u64,
    },
    Error {
        session: Option<u64>,
        message: String,
    },
}

pub struct Session {
    id: u64,
    skel: Arc<AirwaySkeleton>,
    camera: CameraModel,
    frame_rate_hz: f64,
    tracker: Tracker,
    corruptor: Corruptor,
    true_pose: Pose,
    insertion_mm: f64,
    t: f64,
    frame: u64,
    overall: F1Accumulator,
    by_generation: BTreeMap<u32, F1Accumulator>,
}

impl Session {
    pub fn new(id: u64, skel: Arc<AirwaySkeleton>, cfg: SessionConfig) -> Result<Self, HarnessError> {
        cfg.camera.validate()?;
        if !(cfg.frame_rate_hz > 0.0 && cfg.frame_rate_hz.is_finite()) {
            return Err(HarnessError::Session(format!("frame_rate_hz = {}", cfg.frame_rate_hz)));
        }
        let tracker = Tracker::new(cfg.algorithm, &skel, &cfg.filter)?;
        let corruptor = Corruptor::new(cfg.noise, cfg.camera)?;
        Ok(Self {
            id,
            true_pose: entrance_pose(&skel),
            skel,
            camera: cfg.camera,
            frame_rate_hz: cfg.frame_rate_hz,
            tracker,
            corruptor,
            insertion_mm: 0.0,
            t: 0.0,
            frame: 0,
            overall: F1Accumulator::default(),
            by_generation: BTreeMap::new(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Articulates the tip (pitch about camera x, then yaw about camera y),
    /// then advances it along its new pointing direction.
    pub fn steer(&mut self, pitch_deg: f64, yaw_deg: f64, insert_mm: f64) -> Result<Tick, HarnessError> {
        for v in [pitch_deg, yaw_deg, insert_mm] {
            if !v.is_finite() {
                return Err(HarnessError::Session("steering values must be finite".into()));
            }
        }
        let mut pose = self.true_pose;
        if pitch_deg != 0.0 || yaw_deg != 0.0 {
            let pitch = axis_rotation(&Vec3::x(), pitch_deg.to_radians());
            let yaw = axis_rotation(&Vec3::y(), yaw_deg.to_radians());
            pose.rotation = pose.rotation * pitch * yaw;
            pose = pose.renormalized();
        }
        if insert_mm != 0.0 {
            pose.position += pose.p_z() * insert_mm;
        }
        let t = self.t + 1.0 / self.frame_rate_hz;
        self.advance(t, pose, self.insertion_mm + insert_mm)
    }

    /// Places the tip at an externally supplied pose (trajectory replay).
    pub fn place(&mut self, t: Option<f64>, pose: Pose, insertion_mm: f64) -> Result<Tick, HarnessError> {
        let t = t.unwrap_or(self.t + 1.0 / self.frame_rate_hz);
        self.advance(t, pose, insertion_mm)
    }

    fn advance(&mut self, t: f64, pose: Pose, insertion_mm: f64) -> Result<Tick, HarnessError> {
        let skel = &*self.skel;
        let mode = self.tracker.algorithm().mode();
        let truth = observe_truth(&pose, &self.camera, skel, mode).stamped(t, insertion_mm);
        let observed = self.corruptor.corrupt(&truth, skel);
        let step = self
            .tracker
            .step(skel, &self.camera, &observed, self.frame as usize)?;

        self.true_pose = pose;
        self.insertion_mm = insertion_mm;
        self.t = t;
        let true_visible = visible_airways(&pose, &self.camera, skel).visible;
        let true_generation = skel.nearest_airway(&pose.position).generation;
        self.overall.add(&true_visible, &step.est_visible);
        self.by_generation
            .entry(true_generation)
            .or_default()
            .add(&true_visible, &step.est_visible);
        let tick = Tick {
            session: self.id,
            frame: self.frame,
            t,
            insertion_mm,
            true_pose: pose,
            est_pose: step.est_pose,
            true_visible,
            est_visible: step.est_visible,
            assignment: step.assignment,
            bif_correct: step.bif_correct,
            updated: step.updated,
            tracking_error: step.est_pose.map(|e| tracking_errors(&pose, &e)),
            true_generation,
            diagnostics: step.diagnostics,
            f1: self.overall.score(),
            f1_by_generation: self
                .by_generation
                .iter()
                .filter_map(|(g, acc)| {
                    acc.score().map(|s| {
                        (
                            *g,
                            GenerationScore {
                                precision: s.precision,
                                recall: s.recall,
                                f1: s.f1,
                                frames: acc.frames as usize,
                            },
                        )
                    })
                })
                .collect(),
        };
        self.frame += 1;
        Ok(tick)
    }
}

/// Concurrent session registry. Sessions share nothing but read-only
/// skeletons; each one is locked independently.
pub struct SessionHub {
    sessions: Mutex<BTreeMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    max_sessions: usize,
}

impl Default for SessionHub {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_SESSIONS)
    }
}

impl SessionHub {
    pub fn new(max_sessions: usize) -> Self {
        Self {
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            max_sessions,
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session registry poisoned").len()
    }

    /// Handles one raw message and returns the JSON reply.
    pub fn handle_text(&self, text: &str) -> String {
        let reply = match serde_json::from_str::<ClientMessage>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => ServerMessage::Error {
                session: session_hint(text),
                message: format!("malformed message: {e}"),
            },
        };
        serde_json::to_string(&reply).unwrap_or_else(|e| {
            format!(r#"{{"type":"error","session":null,"message":"reply encoding failed: {e}"}}"#)
        })
    }

    pub fn handle(&self, msg: ClientMessage) -> ServerMessage {
        let session = match &msg {
            ClientMessage::Open { .. } => None,
            ClientMessage::Steer { session, .. }
            | ClientMessage::Pose { session, .. }
            | ClientMessage::Close { session } => Some(*session),
        };
        self.dispatch(msg).unwrap_or_else(|e| ServerMessage::Error {
            session,
            message: e.to_string(),
        })
    }

    fn dispatch(&self, msg: ClientMessage) -> Result<ServerMessage, HarnessError> {
        match msg {
            ClientMessage::Open {
                version,
                skeleton,
                config,
            } => self.open(version, skeleton, config),
            ClientMessage::Steer {
                session,
                pitch_deg,
                yaw_deg,
                insert_mm,
            } => {
                let s = self.get(session)?;
                let mut s = s.lock().expect("session poisoned");
                Ok(ServerMessage::Tick(Box::new(s.steer(pitch_deg, yaw_deg, insert_mm)?)))
            }
            ClientMessage::Pose {
                session,
                t,
                position,
                rotation,
                rotation_format,
                insertion,
            } => {
                let pose = TrajectoryLine {
                    t: t.unwrap_or(0.0),
                    position,
                    rotation,
                    rotation_format,
                    insertion,
                    airway: None,
                }
                .pose()?;
                let s = self.get(session)?;
                let mut s = s.lock().expect("session poisoned");
                Ok(ServerMessage::Tick(Box::new(s.place(t, pose, insertion)?)))
            }
            ClientMessage::Close { session } => {
                let removed = self
                    .sessions
                    .lock()
                    .expect("session registry poisoned")
                    .remove(&session);
                match removed {
                    Some(_) => Ok(ServerMessage::Closed { session }),
                    None => Err(HarnessError::Session(format!("unknown session {session}"))),
                }
            }
        }
    }

    fn open(
        &self,
        version: u32,
        skeleton: SessionSkeleton,
        config: SessionConfig,
    ) -> Result<ServerMessage, HarnessError> {
        if version != PROTOCOL_VERSION {
            return Err(HarnessError::Session(format!(
                "unsupported protocol version {version} (server speaks {PROTOCOL_VERSION})"
            )));
        }
        if self.session_count() >= self.max_sessions {
            return Err(HarnessError::Session(format!(
                "session limit of {} reached",
                self.max_sessions
            )));
        }
        let skel = Arc::new(match skeleton {
            SessionSkeleton::Synth(s) => synth_lung(s.generations, s.seed, &s.params)?,
            SessionSkeleton::Inline(doc) => AirwaySkeleton::from_value(doc)?,
        });
        let algorithm = config.algorithm;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let session = Session::new(id, skel.clone(), config)?;
        let true_pose = session.true_pose;
        {
            let mut sessions = self.sessions.lock().expect("session registry poisoned");
            if sessions.len() >= self.max_sessions {
                return Err(HarnessError::Session(format!(
                    "session limit of {} reached",
                    self.max_sessions
                )));
            }
            sessions.insert(id, Arc::new(Mutex::new(session)));
        }
        Ok(ServerMessage::Opened {
            version: PROTOCOL_VERSION,
            session: id,
            algorithm,
            skeleton: serde_json::from_str(&skel.to_json())?,
            true_pose,
            insertion_mm: 0.0,
        })
    }

    fn get(&self, id: u64) -> Result<Arc<Mutex<Session>>, HarnessError> {
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| HarnessError::Session(format!("unknown session {id}")))
    }
}

fn session_hint(text: &str) -> Option<u64> {
    serde_json::from_str::<serde_json::Value>(text)
        .ok()?
        .get("session")?
        .as_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{RunConfig, SkeletonSource};
    use crate::harness::run::{run_sequence, sequence_params};
    use crate::skeleton::SynthParams;

    fn synth(generations: u32) -> SessionSkeleton {
        SessionSkeleton::Synth(SynthSpec {
            generations,
            seed: 3,
            params: SynthParams::default(),
        })
    }

    fn open(hub: &SessionHub, config: SessionConfig) -> u64 {
        match hub.handle(ClientMessage::Open {
            version: 1,
            skeleton: synth(3),
            config,
        }) {
            ServerMessage::Opened { session, .. } => session,
            other => panic!("{other:?}"),
        }
    }

    fn tick(msg: ServerMessage) -> Tick {
        match msg {
            ServerMessage::Tick(t) => *t,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_steering_is_static() {
        let hub = SessionHub::default();
        let id = open(&hub, SessionConfig::default());
        let first = tick(hub.handle(ClientMessage::Steer { session: id, pitch_deg: 0.0, yaw_deg: 0.0, insert_mm: 0.0 }));
        for k in 1..5 {
            let t = tick(hub.handle(ClientMessage::Steer { session: id, pitch_deg: 0.0, yaw_deg: 0.0, insert_mm: 0.0 }));
            assert_eq!(t.true_pose, first.true_pose);
            assert_eq!(t.insertion_mm, 0.0);
            assert_eq!(t.frame, k);
        }
    }

    #[test]
    fn insertion_accumulates() {
        let hub = SessionHub::default();
        let id = open(&hub, SessionConfig::default());
        let mut last = 0.0;
        for _ in 0..10 {
            let t = tick(hub.handle(ClientMessage::Steer { session: id, pitch_deg: 0.5, yaw_deg: -0.3, insert_mm: 1.5 }));
            assert!(t.insertion_mm > last);
            last = t.insertion_mm;
        }
        assert!((last - 15.0).abs() < 1e-9);
    }

    #[test]
    fn errors_preserve_sessions() {
        let hub = SessionHub::default();
        let id = open(&hub, SessionConfig::default());
        let reply = hub.handle_text(&format!(r#"{{"type":"steer","session":{id},"pitch_deg":"x"}}"#));
        assert!(reply.contains(r#""type":"error""#), "{reply}");
        assert!(reply.contains(&format!(r#""session":{id}"#)), "{reply}");
        let reply = hub.handle_text("not json");
        assert!(reply.contains(r#""type":"error""#));
        let reply = hub.handle_text(r#"{"type":"steer","session":999}"#);
        assert!(reply.contains("unknown session"));
        tick(hub.handle(ClientMessage::Steer { session: id, pitch_deg: 0.0, yaw_deg: 0.0, insert_mm: 1.0 }));
        let bad_version = hub.handle(ClientMessage::Open { version: 2, skeleton: synth(2), config: SessionConfig::default() });
        assert!(matches!(bad_version, ServerMessage::Error { .. }));
    }

    #[test]
    fn session_limit_and_close() {
        let hub = SessionHub::new(2);
        let a = open(&hub, SessionConfig::default());
        let b = open(&hub, SessionConfig::default());
        assert_ne!(a, b);
        let third = hub.handle(ClientMessage::Open { version: 1, skeleton: synth(2), config: SessionConfig::default() });
        assert!(matches!(third, ServerMessage::Error { .. }));
        assert_eq!(hub.handle(ClientMessage::Close { session: a }), ServerMessage::Closed { session: a });
        assert_eq!(hub.session_count(), 1);
        open(&hub, SessionConfig::default());
    }

    #[test]
    fn replay_matches_batch_run() {
        for algorithm in [Algorithm::Bifurcation, Algorithm::Direct] {
            let mut cfg = RunConfig::new(SkeletonSource::Synth(SynthSpec {
                generations: 3,
                seed: 3,
                params: SynthParams::default(),
            }));
            cfg.algorithm = algorithm;
            cfg.noise = NoiseModel { p_hallucinate: 0.05, ..NoiseModel::default() };
            let skel = cfg.skeleton.load().unwrap();
            let batch = run_sequence(&cfg, &skel, 1).unwrap();
            let (_, noise) = sequence_params(&cfg, 1);

            let hub = SessionHub::default();
            let id = open(
                &hub,
                SessionConfig { algorithm, noise, filter: cfg.filter.clone(), camera: cfg.camera, frame_rate_hz: 30.0 },
            );
            for (f, est) in batch.trajectory.iter().zip(&batch.estimates) {
                let t = tick(hub.handle(ClientMessage::Pose {
                    session: id,
                    t: Some(f.t),
                    position: f.true_pose.position.into(),
                    rotation: f.true_pose.rotation_row_major().to_vec(),
                    rotation_format: RotationFormat::Matrix,
                    insertion: f.insertion_mm,
                }));
                assert_eq!(t.frame as usize, est.frame);
                assert_eq!(t.est_pose.map(|p| p.position.into()), est.est_position);
                assert_eq!(t.est_pose.map(|p| p.rotation_row_major()), est.est_rotation);
                assert_eq!(t.assignment, est.assignment);
                assert_eq!(t.bif_correct, est.bif_correct);
                assert_eq!(t.diagnostics, est.diagnostics);
            }
        }
    }
}
