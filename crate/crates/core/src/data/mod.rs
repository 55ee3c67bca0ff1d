//! Sensor windows: synthesis, scenario splits and CSV ingestion.

mod csv_io;
mod scenarios;
mod synth;

pub use csv_io::{ingest_csv, write_csv, CsvSchema, Ingested};
pub use scenarios::{build_scenarios, ScenarioSet, SplitSpec};
pub use synth::{synth_generate, GeneratorConfig};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Frames per window must be a multiple of this (MAE minimum batch).
pub const FRAME_GROUP: usize = 8;

/// Fixed-length multi-channel recording with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    /// `timesteps x channels`
    pub frames: Tensor,
    pub label: usize,
    pub subject: usize,
    pub domain: usize,
    pub sample_rate_hz: f64,
    /// Position in the generated or ingested sequence; unique per source.
    pub index: usize,
}

impl SensorWindow {
    pub fn new(
        frames: Tensor,
        label: usize,
        subject: usize,
        domain: usize,
        sample_rate_hz: f64,
        index: usize,
    ) -> Result<Self> {
        let w = Self {
            frames,
            label,
            subject,
            domain,
            sample_rate_hz,
            index,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn timesteps(&self) -> usize {
        self.frames.rows()
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.shape().len() != 2 {
            return Err(Error::shape(
                "window",
                "frames must be timesteps x channels",
            ));
        }
        if !self.timesteps().is_multiple_of(FRAME_GROUP) {
            return Err(Error::InvalidArgument(format!(
                "window length {} is not a multiple of {FRAME_GROUP}",
                self.timesteps()
            )));
        }
        if !self.frames.is_finite() {
            return Err(Error::NonFinite("sensor window"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        Ok(())
    }
}
