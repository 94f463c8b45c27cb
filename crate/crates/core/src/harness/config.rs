use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::filter::FilterParams;
use crate::geometry::CameraModel;
use crate::perception::{NoiseModel, ObservationMode};
use crate::sim::SimParams;
use crate::skeleton::{load_skeleton, synth_lung, AirwayId, AirwaySkeleton, SynthParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Bifurcation filter on generic observations.
    Bifurcation,
    /// Stateless localizer on id-classified observations.
    Direct,
}

impl Algorithm {
    pub fn mode(self) -> ObservationMode {
        match self {
            Algorithm::Bifurcation => ObservationMode::Bifurcation,
            Algorithm::Direct => ObservationMode::Direct,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bifurcation => "bifurcation",
            Algorithm::Direct => "direct",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bifurcation" => Ok(Algorithm::Bifurcation),
            "direct" => Ok(Algorithm::Direct),
            other => Err(HarnessError::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub generations: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

/// Exactly one skeleton source: `{"path": ...}` or `{"synth": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SkeletonSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

impl SkeletonSource {
    pub fn load(&self) -> Result<AirwaySkeleton, HarnessError> {
        Ok(match self {
            SkeletonSource::Path(p) => load_skeleton(p)?,
            SkeletonSource::Synth(s) => synth_lung(s.generations, s.seed, &s.params)?,
        })
    }
}

fn default_sequences() -> usize {
    10
}

fn default_label() -> String {
    "synthetic".into()
}

fn default_algorithm() -> Algorithm {
    Algorithm::Bifurcation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub skeleton: SkeletonSource,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default = "default_sequences")]
    pub sequences: usize,
    /// Target airway per sequence (cycled). Empty picks a seeded random leaf.
    #[serde(default)]
    pub targets: Vec<AirwayId>,
    /// Root of every per-sequence random stream; the `seed` fields inside
    /// `sim` and `noise` are overwritten per sequence.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_label")]
    pub train_label: String,
    #[serde(default = "default_label")]
    pub test_label: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(skeleton: SkeletonSource) -> Self {
        Self {
            skeleton,
            sim: SimParams::default(),
            noise: NoiseModel::default(),
            algorithm: Algorithm::Bifurcation,
            filter: FilterParams::default(),
            camera: CameraModel::default(),
            sequences: default_sequences(),
            targets: Vec::new(),
            seed: 0,
            train_label: default_label(),
            test_label: default_label(),
            output_dir: None,
        }
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let SkeletonSource::Path(p) = &mut cfg.skeleton {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self, skel: &AirwaySkeleton) -> Result<(), HarnessError> {
        if self.sequences == 0 {
            return Err(HarnessError::Config("sequences must be at least 1".into()));
        }
        self.sim.validate()?;
        self.noise.validate()?;
        self.filter.validate()?;
        self.camera.validate()?;
        if let Some(t) = self.targets.iter().find(|t| !skel.contains(**t)) {
            return Err(HarnessError::Config(format!("unknown target airway {t}")));
        }
        Ok(())
    }

    /// Random streams for sequence `index`.
    pub fn sequence_seeds(&self, index: usize) -> SequenceSeeds {
        let root = splitmix64(self.seed ^ splitmix64(index as u64 + 1));
        SequenceSeeds {
            target: splitmix64(root ^ 0x7461_7267),
            sim: splitmix64(root ^ 0x0073_696d),
            noise: splitmix64(root ^ 0x6e6f_6973),
        }
    }

    pub fn target(&self, skel: &AirwaySkeleton, index: usize) -> AirwayId {
        if !self.targets.is_empty() {
            return self.targets[index % self.targets.len()];
        }
        let leaves: Vec<AirwayId> = skel.leaves().map(|a| a.id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.sequence_seeds(index).target);
        leaves[rng.random_range(0..leaves.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSeeds {
    pub target: u64,
    pub sim: u64,
    pub noise: u64,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
