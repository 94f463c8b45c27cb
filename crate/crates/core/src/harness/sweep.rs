use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::formats::write_csv;
use super::run::run;
use super::HarnessError;
use crate::filter::default_gen_weights;
use crate::skeleton::AirwaySkeleton;

/// Filter parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Insertion-depth spread (mm).
    SigmaIns,
    /// Fit spread (radians).
    SigmaFit,
    /// Roll spread (degrees).
    SigmaRoll,
    /// Multiplier on the configured position covariance.
    SigmaXScale,
    /// Adjacency decay `r`: weights `{1: 1, 2: r, 3: r^2}`.
    GenWeights,
}

impl SweepParam {
    pub const ALL: [SweepParam; 5] = [
        SweepParam::SigmaIns,
        SweepParam::SigmaFit,
        SweepParam::SigmaRoll,
        SweepParam::SigmaXScale,
        SweepParam::GenWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::SigmaIns => "sigma_ins",
            SweepParam::SigmaFit => "sigma_fit",
            SweepParam::SigmaRoll => "sigma_roll",
            SweepParam::SigmaXScale => "sigma_x_scale",
            SweepParam::GenWeights => "gen_weights",
        }
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> RunConfig {
        let mut out = cfg.clone();
        let f = &mut out.filter;
        match self {
            SweepParam::SigmaIns => f.sigma_ins_mm = value,
            SweepParam::SigmaFit => f.sigma_fit_rad = value,
            SweepParam::SigmaRoll => f.sigma_roll_deg = value,
            SweepParam::SigmaXScale => {
                for row in &mut f.sigma_x_mm2 {
                    for v in row {
                        *v *= value;
                    }
                }
            }
            SweepParam::GenWeights => f.gen_weights = default_gen_weights(1.0, value, value * value),
        }
        out
    }
}

impl FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SweepParam::ALL.iter().map(|p| p.name()).collect();
                HarnessError::UnknownParam(format!("{s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Frame-weighted mean F1 over all sequences; absent when nothing was
    /// visible or estimated.
    pub mean_f1: Option<f64>,
}

/// Parses a comma-separated grid such as `0.1,10,1000`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, HarnessError> {
    let grid = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("bad grid value {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(HarnessError::Config("empty grid".into()));
    }
    Ok(grid)
}

/// One full run per grid value, all sharing the configured seed.
pub fn sweep(
    cfg: &RunConfig,
    skel: &AirwaySkeleton,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty grid".into()));
    }
    grid.iter()
        .map(|&value| {
            let out = run(&param.apply(cfg, value), skel)?;
            Ok(SweepRow {
                value,
                mean_f1: out.aggregate.f1.map(|s| s.mean),
            })
        })
        .collect()
}

pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<(), HarnessError> {
    write_csv(path, rows)
}
