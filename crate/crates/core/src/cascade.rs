//! Detectors applied in a fixed order; a window stops at its first red flag.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detectors::{Batch, Detector, DetectorKind, DetectorVerdict, Flag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reconstruction,
    Distance,
    McDropout,
    PassedAll,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Reconstruction,
        Stage::Distance,
        Stage::McDropout,
        Stage::PassedAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Reconstruction => "reconstruction",
            Stage::Distance => "distance",
            Stage::McDropout => "mcdropout",
            Stage::PassedAll => "passed_all",
        }
    }
}

impl From<DetectorKind> for Stage {
    fn from(k: DetectorKind) -> Self {
        match k {
            DetectorKind::Reconstruction => Stage::Reconstruction,
            DetectorKind::Distance => Stage::Distance,
            DetectorKind::McDropout => Stage::McDropout,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeVerdict {
    pub final_flag: Flag,
    /// First red stage, or `PassedAll`.
    pub stage_reached: Stage,
    /// Verdicts actually computed, in stage order.
    pub verdicts: Vec<DetectorVerdict>,
}

impl CascadeVerdict {
    pub fn score(&self, kind: DetectorKind) -> Option<f64> {
        self.verdicts
            .iter()
            .find(|v| v.detector == kind)
            .map(|v| v.score)
    }
}

pub struct Cascade<'d> {
    stages: [&'d dyn Detector; 3],
}

impl<'d> Cascade<'d> {
    pub fn new(
        reconstruction: &'d dyn Detector,
        distance: &'d dyn Detector,
        mcdropout: &'d dyn Detector,
    ) -> Result<Self> {
        let stages = [reconstruction, distance, mcdropout];
        for (s, kind) in stages.iter().zip(DetectorKind::ALL) {
            if s.kind() != kind {
                return Err(Error::InvalidArgument(format!(
                    "cascade stage expects a {kind} detector, got {}",
                    s.kind()
                )));
            }
            if s.threshold().is_none() {
                return Err(Error::Uncalibrated(kind.as_str()));
            }
        }
        Ok(Self { stages })
    }

    /// Evaluates every window. With `short_circuit`, later stages only see
    /// windows still green; without it every stage scores every window.
    pub fn run(&self, batch: &Batch<'_>, short_circuit: bool) -> Result<Vec<CascadeVerdict>> {
        let mut out: Vec<CascadeVerdict> = (0..batch.len())
            .map(|_| CascadeVerdict {
                final_flag: Flag::Green,
                stage_reached: Stage::PassedAll,
                verdicts: Vec::with_capacity(3),
            })
            .collect();
        let mut active = batch.all_rows();
        for stage in self.stages {
            if active.is_empty() {
                break;
            }
            let verdicts = stage.verdicts(batch, &active)?;
            let mut still_green = Vec::with_capacity(active.len());
            for (&row, v) in active.iter().zip(verdicts) {
                let cv = &mut out[row];
                cv.verdicts.push(v);
                if v.flag.is_red() {
                    if cv.final_flag == Flag::Green {
                        cv.stage_reached = v.detector.into();
                    }
                    cv.final_flag = Flag::Red;
                }
                if !short_circuit || v.flag == Flag::Green {
                    still_green.push(row);
                }
            }
            active = still_green;
        }
        Ok(out)
    }
}
