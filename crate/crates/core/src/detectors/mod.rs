//! Calibrated out-of-scope detectors.
//!
//! Every detector maps a window to a scalar score; calibration sets the
//! threshold at a quantile of the validation scores and a score strictly
//! above it raises a red flag.

mod kmeans;
mod quantile;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_fit, CentroidSet, KMeansConfig};
pub use quantile::{quantile, QuantileThreshold};

use crate::classifier::ClassifierHead;
use crate::data::SensorWindow;
use crate::error::{Error, Result};
use crate::mae::{LatentVector, MaeModel};
use crate::rng::{fingerprint, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Green,
    Red,
}

impl Flag {
    pub fn is_red(self) -> bool {
        self == Flag::Red
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Green => "green",
            Flag::Red => "red",
        }
    }
}

impl std::ops::Not for Flag {
    type Output = Flag;

    fn not(self) -> Flag {
        match self {
            Flag::Green => Flag::Red,
            Flag::Red => Flag::Green,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Reconstruction,
    Distance,
    McDropout,
}

impl DetectorKind {
    /// Cascade order.
    pub const ALL: [DetectorKind; 3] = [
        DetectorKind::Reconstruction,
        DetectorKind::Distance,
        DetectorKind::McDropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Reconstruction => "reconstruction",
            DetectorKind::Distance => "distance",
            DetectorKind::McDropout => "mcdropout",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown detector '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorVerdict {
    pub detector: DetectorKind,
    pub score: f64,
    pub flag: Flag,
}

/// Windows with their (cached) latents and the models that score them.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub mae: &'a MaeModel,
    pub head: &'a ClassifierHead,
    pub windows: &'a [SensorWindow],
    pub latents: &'a [LatentVector],
}

impl<'a> Batch<'a> {
    pub fn new(
        mae: &'a MaeModel,
        head: &'a ClassifierHead,
        windows: &'a [SensorWindow],
        latents: &'a [LatentVector],
    ) -> Result<Self> {
        if windows.len() != latents.len() {
            return Err(Error::shape("batch", "one latent per window required"));
        }
        Ok(Self {
            mae,
            head,
            windows,
            latents,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

pub trait Detector {
    fn kind(&self) -> DetectorKind;

    fn threshold(&self) -> Option<&QuantileThreshold>;

    fn set_threshold(&mut self, threshold: QuantileThreshold);

    /// Scores of the given rows of `batch`, in the order given.
    fn score_batch(&self, batch: &Batch<'_>, rows: &[usize]) -> Result<Vec<f64>>;

    /// Scores the threshold is fitted on.
    fn calibration_scores(&self, batch: &Batch<'_>) -> Result<Vec<f64>> {
        self.score_batch(batch, &batch.all_rows())
    }

    fn calibrate(&mut self, batch: &Batch<'_>, q: f64) -> Result<QuantileThreshold> {
        if batch.is_empty() {
            return Err(Error::EmptySplit("calibration"));
        }
        let t = QuantileThreshold::fit(&self.calibration_scores(batch)?, q)?;
        self.set_threshold(t);
        Ok(t)
    }

    fn verdict_for(&self, score: f64) -> Result<DetectorVerdict> {
        let t = self
            .threshold()
            .ok_or(Error::Uncalibrated(self.kind().as_str()))?;
        Ok(DetectorVerdict {
            detector: self.kind(),
            score,
            flag: t.flag(score),
        })
    }

    fn verdicts(&self, batch: &Batch<'_>, rows: &[usize]) -> Result<Vec<DetectorVerdict>> {
        if self.threshold().is_none() {
            return Err(Error::Uncalibrated(self.kind().as_str()));
        }
        self.score_batch(batch, rows)?
            .into_iter()
            .map(|s| self.verdict_for(s))
            .collect()
    }
}

/// Masked-reconstruction loss, scored per group of consecutive windows; each
/// window takes its group's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDetector {
    pub group_frames: usize,
    pub eval_seed: u64,
    pub threshold: Option<QuantileThreshold>,
}

impl ReconstructionDetector {
    pub fn new(group_frames: usize, eval_seed: u64) -> Self {
        Self {
            group_frames,
            eval_seed,
            threshold: None,
        }
    }

    fn group_scores(&self, batch: &Batch<'_>) -> Result<Vec<crate::mae::GroupScore>> {
        batch
            .mae
            .reconstruction_score(batch.windows, self.group_frames, self.eval_seed)
    }
}

impl Detector for ReconstructionDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Reconstruction
    }

    fn threshold(&self) -> Option<&QuantileThreshold> {
        self.threshold.as_ref()
    }

    fn set_threshold(&mut self, threshold: QuantileThreshold) {
        self.threshold = Some(threshold);
    }

    fn score_batch(&self, batch: &Batch<'_>, rows: &[usize]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut per_window = Vec::with_capacity(batch.len());
        for g in self.group_scores(batch)? {
            per_window.extend(std::iter::repeat_n(g.score, g.len));
        }
        rows.iter()
            .map(|&r| {
                per_window.get(r).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("row {r} outside batch of {}", batch.len()))
                })
            })
            .collect()
    }

    fn calibration_scores(&self, batch: &Batch<'_>) -> Result<Vec<f64>> {
        Ok(self.group_scores(batch)?.iter().map(|g| g.score).collect())
    }
}

/// Euclidean distance from the latent to the nearest training centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDetector {
    pub centroids: CentroidSet,
    pub threshold: Option<QuantileThreshold>,
}

impl DistanceDetector {
    /// Fits centroids on training latents.
    pub fn fit(
        train_latents: &[LatentVector],
        k: usize,
        config: &KMeansConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        let points: Vec<Vec<f32>> = train_latents.iter().map(|z| z.0.clone()).collect();
        Ok(Self {
            centroids: kmeans_fit(&points, k, config, rng)?,
            threshold: None,
        })
    }
}

pub fn distance_score(centroids: &CentroidSet, latent: &LatentVector) -> f64 {
    centroids.distance(latent.as_slice())
}

impl Detector for DistanceDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Distance
    }

    fn threshold(&self) -> Option<&QuantileThreshold> {
        self.threshold.as_ref()
    }

    fn set_threshold(&mut self, threshold: QuantileThreshold) {
        self.threshold = Some(threshold);
    }

    fn score_batch(&self, batch: &Batch<'_>, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                let z = batch.latents.get(r).ok_or_else(|| {
                    Error::InvalidArgument(format!("row {r} outside batch of {}", batch.len()))
                })?;
                if z.dim() != self.centroids.dim {
                    return Err(Error::shape("distance_score", "latent/centroid width"));
                }
                Ok(distance_score(&self.centroids, z))
            })
            .collect()
    }
}

/// Mean over classes of the per-class sample variance of `samples`
/// (`T` probability vectors).
pub fn mc_variance(samples: &[Vec<f32>]) -> Result<f64> {
    let t = samples.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "MC dropout needs at least 2 passes, got {t}"
        )));
    }
    let c = samples[0].len();
    if c == 0 || samples.iter().any(|s| s.len() != c) {
        return Err(Error::shape("mc_variance", "passes differ in width"));
    }
    let mut total = 0.0;
    for j in 0..c {
        let mean = samples.iter().map(|s| f64::from(s[j])).sum::<f64>() / t as f64;
        let ss: f64 = samples
            .iter()
            .map(|s| (f64::from(s[j]) - mean).powi(2))
            .sum();
        total += ss / (t - 1) as f64;
    }
    Ok(total / c as f64)
}

/// Variance of `passes` stochastic head outputs for one latent.
pub fn mcd_score(
    head: &ClassifierHead,
    latent: &LatentVector,
    passes: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if passes < 2 {
        return Err(Error::InvalidArgument(format!(
            "MC dropout needs at least 2 passes, got {passes}"
        )));
    }
    mc_variance(&head.stochastic_passes(latent, passes, rng)?)
}

/// MC-dropout variance. The dropout stream of each window is derived from
/// the seed and the latent's bits, so a score does not depend on which other
/// windows share the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDropoutDetector {
    pub passes: usize,
    pub seed: u64,
    pub threshold: Option<QuantileThreshold>,
}

impl McDropoutDetector {
    pub fn new(passes: usize, seed: u64) -> Self {
        Self {
            passes,
            seed,
            threshold: None,
        }
    }

    pub fn window_rng(&self, latent: &LatentVector) -> RngState {
        RngState::new(self.seed).derive(fingerprint(latent.as_slice()))
    }
}

impl Detector for McDropoutDetector {
    fn kind(&self) -> DetectorKind {
        DetectorKind::McDropout
    }

    fn threshold(&self) -> Option<&QuantileThreshold> {
        self.threshold.as_ref()
    }

    fn set_threshold(&mut self, threshold: QuantileThreshold) {
        self.threshold = Some(threshold);
    }

    fn score_batch(&self, batch: &Batch<'_>, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                let z = batch.latents.get(r).ok_or_else(|| {
                    Error::InvalidArgument(format!("row {r} outside batch of {}", batch.len()))
                })?;
                mcd_score(batch.head, z, self.passes, &mut self.window_rng(z))
            })
            .collect()
    }
}

/// The three calibrated detectors of a deployed pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSet {
    pub reconstruction: ReconstructionDetector,
    pub distance: DistanceDetector,
    pub mcdropout: McDropoutDetector,
}

impl DetectorSet {
    pub fn get(&self, kind: DetectorKind) -> &dyn Detector {
        match kind {
            DetectorKind::Reconstruction => &self.reconstruction,
            DetectorKind::Distance => &self.distance,
            DetectorKind::McDropout => &self.mcdropout,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        DetectorKind::ALL
            .iter()
            .all(|&k| self.get(k).threshold().is_some())
    }
}

/// Writes `detector,split,score` rows.
pub fn write_histogram_csv(
    path: &Path,
    detector: DetectorKind,
    split: &str,
    scores: &[f64],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "detector,split,score")?;
    for s in scores {
        writeln!(out, "{detector},{split},{s}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_one_hot_closed_form() {
        let c = 4;
        let samples: Vec<Vec<f32>> = (0..100)
            .map(|i| {
                let mut v = vec![0.0; c];
                v[i % 2] = 1.0;
                v
            })
            .collect();
        // each of the first two classes: 50 ones out of 100, sample variance
        // 100 * 0.25 / 99
        let per_class = 25.0 / 99.0;
        let expected = 2.0 * per_class / c as f64;
        assert!((mc_variance(&samples).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_passes_have_zero_variance() {
        let samples = vec![vec![0.2, 0.8]; 10];
        assert_eq!(mc_variance(&samples).unwrap(), 0.0);
        assert!(mc_variance(&samples[..1]).is_err());
    }

    #[test]
    fn kinds_parse() {
        for k in DetectorKind::ALL {
            assert_eq!(k.as_str().parse::<DetectorKind>().unwrap(), k);
        }
        assert!("bogus".parse::<DetectorKind>().is_err());
    }
}
