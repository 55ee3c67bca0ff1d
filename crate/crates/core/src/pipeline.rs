//! End-to-end stages: data, pretraining, head training, calibration,
//! evaluation and timing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::cascade::{Cascade, CascadeVerdict, Stage};
use crate::classifier::{train_head, ClassifierHead, HeadEpoch, Prediction};
use crate::config::RunConfig;
use crate::data::{
    build_scenarios, ingest_csv, synth_generate, CsvSchema, GeneratorConfig, ScenarioSet,
    SensorWindow,
};
use crate::detectors::{
    write_histogram_csv, Batch, Detector, DetectorKind, DetectorSet, DetectorVerdict,
    DistanceDetector, Flag, McDropoutDetector, ReconstructionDetector,
};
use crate::error::{Error, Result};
use crate::mae::{pretrain, LatentVector, MaeModel, TrainingCurve};
use crate::metrics::{accuracy, red_rate, uncertainty_accuracy, Report, ReportRow, StageStats};
use crate::rng::RngState;

/// Split names in report order.
pub const SPLITS: [&str; 4] = [
    "unseen_class",
    "unseen_subject",
    "unseen_dataset",
    "validation",
];
pub const CASCADE: &str = "cascade";

/// Generated windows, or the configured recording.
pub fn load_windows(cfg: &RunConfig) -> Result<Vec<SensorWindow>> {
    match &cfg.paths.input_csv {
        Some(path) => {
            let ingested = ingest_csv(
                path,
                &CsvSchema::default(),
                cfg.mae.window_len,
                cfg.paths.stride,
            )?;
            if ingested.windows.is_empty() {
                return Err(Error::EmptyInput("recording produced no windows"));
            }
            Ok(ingested.windows)
        }
        None => synth_generate(&cfg.generator, &RngState::new(cfg.seeds.data)),
    }
}

pub fn scenarios(cfg: &RunConfig) -> Result<ScenarioSet> {
    let windows = load_windows(cfg)?;
    build_scenarios(&windows, &cfg.split, &mut RngState::new(cfg.seeds.split))
}

pub fn split<'s>(set: &'s ScenarioSet, name: &str) -> Result<&'s [SensorWindow]> {
    Ok(match name {
        "train" => &set.train,
        "validation" => &set.validation,
        "unseen_class" => &set.unseen_class,
        "unseen_subject" => &set.unseen_subject,
        "unseen_dataset" => &set.unseen_dataset,
        other => return Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
    })
}

pub fn pretrain_stage(cfg: &RunConfig, set: &ScenarioSet) -> Result<(MaeModel, TrainingCurve)> {
    let mut mae = MaeModel::new(cfg.mae.clone(), &mut RngState::new(cfg.seeds.init))?;
    let mut rng = RngState::new(cfg.seeds.training);
    let curve = pretrain(
        &mut mae,
        &set.train,
        &set.validation,
        &cfg.pretrain,
        &mut rng,
    )?;
    Ok((mae, curve))
}

pub fn train_head_stage(
    cfg: &RunConfig,
    mae: &MaeModel,
    set: &ScenarioSet,
) -> Result<(ClassifierHead, Vec<HeadEpoch>)> {
    let mut head = ClassifierHead::new(
        mae.latent_dim(),
        set.train_labels(),
        cfg.head,
        &mut RngState::new(cfg.seeds.init).derive(1),
    )?;
    let mut rng = RngState::new(cfg.seeds.training).derive(1);
    let curve = train_head(&mut head, mae, &set.train, &set.validation, &mut rng)?;
    Ok((head, curve))
}

/// Fits centroids on training latents and every threshold on validation.
pub fn calibrate_stage(
    cfg: &RunConfig,
    mae: &MaeModel,
    head: &ClassifierHead,
    set: &ScenarioSet,
) -> Result<DetectorSet> {
    if set.validation.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let d = &cfg.detectors;
    let train_z = mae.encode_batch(&set.train)?;
    let k = d.kmeans.resolve_k(head.num_classes());
    let mut detectors = DetectorSet {
        reconstruction: ReconstructionDetector::new(d.group_frames, cfg.seeds.eval),
        distance: DistanceDetector::fit(
            &train_z,
            k,
            &d.kmeans,
            &mut RngState::new(cfg.seeds.training).derive(2),
        )?,
        mcdropout: McDropoutDetector::new(d.mc_passes, cfg.seeds.mc),
    };
    let val_z = mae.encode_batch(&set.validation)?;
    let batch = Batch::new(mae, head, &set.validation, &val_z)?;
    detectors.reconstruction.calibrate(&batch, d.quantile)?;
    detectors.distance.calibrate(&batch, d.quantile)?;
    detectors.mcdropout.calibrate(&batch, d.quantile)?;
    Ok(detectors)
}

/// A fully trained and calibrated pipeline.
#[derive(Debug, Clone, Copy)]
pub struct System<'a> {
    pub mae: &'a MaeModel,
    pub head: &'a ClassifierHead,
    pub detectors: &'a DetectorSet,
}

impl<'a> System<'a> {
    pub fn from_bundle(bundle: &'a Bundle) -> Result<Self> {
        let head = bundle
            .head
            .as_ref()
            .ok_or_else(|| Error::Bundle("bundle has no classifier head; run train-head".into()))?;
        let detectors = bundle
            .detectors
            .as_ref()
            .filter(|d| d.is_calibrated())
            .ok_or_else(|| {
                Error::Bundle("bundle has no calibrated detectors; run calibrate".into())
            })?;
        Ok(Self {
            mae: &bundle.mae,
            head,
            detectors,
        })
    }

    pub fn latents(&self, windows: &[SensorWindow]) -> Result<Vec<LatentVector>> {
        self.mae.encode_batch(windows)
    }

    pub fn predictions(&self, latents: &[LatentVector]) -> Result<Vec<Prediction>> {
        self.head.predict_latents(latents)
    }

    pub fn standalone(
        &self,
        kind: DetectorKind,
        windows: &[SensorWindow],
        latents: &[LatentVector],
    ) -> Result<Vec<DetectorVerdict>> {
        let batch = Batch::new(self.mae, self.head, windows, latents)?;
        self.detectors.get(kind).verdicts(&batch, &batch.all_rows())
    }

    pub fn cascade(
        &self,
        windows: &[SensorWindow],
        latents: &[LatentVector],
        short_circuit: bool,
    ) -> Result<Vec<CascadeVerdict>> {
        let batch = Batch::new(self.mae, self.head, windows, latents)?;
        let d = self.detectors;
        Cascade::new(&d.reconstruction, &d.distance, &d.mcdropout)?.run(&batch, short_circuit)
    }
}

/// Scores of one detector on one split, for histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub detector: DetectorKind,
    pub split: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub scores: Vec<ScoreSet>,
}

impl Evaluation {
    /// One `hist_<detector>_<split>.csv` per detector and split.
    pub fn write_histograms(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.scores.len());
        for s in &self.scores {
            let path = dir.join(format!("hist_{}_{}.csv", s.detector, s.split));
            write_histogram_csv(&path, s.detector, &s.split, &s.scores)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn ua_row(
    method: &str,
    split: &str,
    flags: &[Flag],
    predicted: &[usize],
    labels: &[usize],
) -> Result<ReportRow> {
    let ua = uncertainty_accuracy(flags, predicted, labels)?;
    Ok(ReportRow {
        method: method.to_string(),
        split: split.to_string(),
        ua: ua.ua,
        red_rate: red_rate(flags),
        accuracy: accuracy(predicted, labels),
        n: flags.len(),
    })
}

/// Four methods on the four evaluation splits.
pub fn evaluate(cfg: &RunConfig, system: &System<'_>, set: &ScenarioSet) -> Result<Evaluation> {
    let mut report = Report {
        config_checksum: cfg.checksum()?,
        ..Report::default()
    };
    let mut scores = Vec::new();
    for name in SPLITS {
        let windows = split(set, name)?;
        if windows.is_empty() {
            return Err(Error::EmptySplit(name));
        }
        let latents = system.latents(windows)?;
        let predicted: Vec<usize> = system
            .predictions(&latents)?
            .iter()
            .map(|p| p.predicted_class)
            .collect();
        let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
        for kind in DetectorKind::ALL {
            let verdicts = system.standalone(kind, windows, &latents)?;
            let flags: Vec<Flag> = verdicts.iter().map(|v| v.flag).collect();
            report
                .rows
                .push(ua_row(kind.as_str(), name, &flags, &predicted, &labels)?);
            scores.push(ScoreSet {
                detector: kind,
                split: name.to_string(),
                scores: verdicts.iter().map(|v| v.score).collect(),
            });
        }
        let cascade = system.cascade(windows, &latents, true)?;
        let flags: Vec<Flag> = cascade.iter().map(|v| v.final_flag).collect();
        report
            .rows
            .push(ua_row(CASCADE, name, &flags, &predicted, &labels)?);
        let n = cascade.len() as f64;
        let frac = |s: Stage| cascade.iter().filter(|v| v.stage_reached == s).count() as f64 / n;
        report.stage_stats.push(StageStats {
            split: name.to_string(),
            reconstruction: frac(Stage::Reconstruction),
            distance: frac(Stage::Distance),
            mcdropout: frac(Stage::McDropout),
            passed_all: frac(Stage::PassedAll),
        });
    }
    Ok(Evaluation { report, scores })
}

/// Seconds spent per stage on one set of windows. Detector stages are timed
/// on cached latents; encoding is reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n: usize,
    pub encode: f64,
    pub reconstruction: f64,
    pub distance: f64,
    pub mcdropout: f64,
    /// Cascade with short-circuit, latents cached.
    pub cascade: f64,
    /// Cascade with every stage scoring every window.
    pub cascade_no_short_circuit: f64,
    /// Encoding plus the short-circuit cascade.
    pub total: f64,
}

impl TimingReport {
    pub fn stage_sum(&self) -> f64 {
        self.reconstruction + self.distance + self.mcdropout
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("encode", self.encode),
            ("reconstruction", self.reconstruction),
            ("distance", self.distance),
            ("mcdropout", self.mcdropout),
            ("cascade", self.cascade),
            ("cascade_no_short_circuit", self.cascade_no_short_circuit),
            ("total", self.total),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "n", "seconds"])?;
        for (m, s) in self.rows() {
            w.write_record([m.to_string(), self.n.to_string(), format!("{s:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` in-distribution windows drawn from the configured generator.
pub fn timing_windows(cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<SensorWindow>> {
    let pairs = cfg.generator.classes * cfg.generator.subjects;
    let gen = GeneratorConfig {
        domains: 1,
        windows_per_pair: n.div_ceil(pairs.max(1)),
        ..cfg.generator.clone()
    };
    let mut windows = synth_generate(&gen, &RngState::new(seed))?;
    windows.truncate(n);
    Ok(windows)
}

pub fn timing_report(system: &System<'_>, windows: &[SensorWindow]) -> Result<TimingReport> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("timing windows"));
    }
    let start = Instant::now();
    let latents = system.latents(windows)?;
    let encode = start.elapsed().as_secs_f64();
    let batch = Batch::new(system.mae, system.head, windows, &latents)?;
    let rows = batch.all_rows();
    let stage = |kind: DetectorKind| -> Result<f64> {
        let start = Instant::now();
        system.detectors.get(kind).verdicts(&batch, &rows)?;
        Ok(start.elapsed().as_secs_f64())
    };
    let reconstruction = stage(DetectorKind::Reconstruction)?;
    let distance = stage(DetectorKind::Distance)?;
    let mcdropout = stage(DetectorKind::McDropout)?;
    let start = Instant::now();
    system.cascade(windows, &latents, true)?;
    let cascade = start.elapsed().as_secs_f64();
    let start = Instant::now();
    system.cascade(windows, &latents, false)?;
    let cascade_no_short_circuit = start.elapsed().as_secs_f64();
    Ok(TimingReport {
        n: windows.len(),
        encode,
        reconstruction,
        distance,
        mcdropout,
        cascade,
        cascade_no_short_circuit,
        total: encode + cascade,
    })
}

/// Everything one full run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub bundle: Bundle,
    pub pretrain_curve: TrainingCurve,
    pub head_curve: Vec<HeadEpoch>,
    pub evaluation: Evaluation,
}

pub fn run_all(cfg: &RunConfig, set: &ScenarioSet) -> Result<RunOutput> {
    let (mae, pretrain_curve) = pretrain_stage(cfg, set)?;
    let (head, head_curve) = train_head_stage(cfg, &mae, set)?;
    let detectors = calibrate_stage(cfg, &mae, &head, set)?;
    let mut bundle = Bundle::new(cfg.clone(), mae);
    bundle.head = Some(head);
    bundle.detectors = Some(detectors);
    let evaluation = evaluate(cfg, &System::from_bundle(&bundle)?, set)?;
    Ok(RunOutput {
        bundle,
        pretrain_curve,
        head_curve,
        evaluation,
    })
}
