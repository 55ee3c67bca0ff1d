//! Synthetic IMU-like windows with three independent factors.
//!
//! * activity class: a waveform family (base frequency, harmonic mix,
//!   amplitude envelope, per-channel weights and a posture offset);
//! * subject: multiplies frequency and amplitude;
//! * domain: per-channel gain and offset plus an axis permutation inside each
//!   3-axis sensor, applied after synthesis (domain 0 is untouched).

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::SensorWindow;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub subjects: usize,
    pub domains: usize,
    /// Windows per (class, subject) in domain 0.
    pub windows_per_pair: usize,
    /// Windows per (class, subject) in every other domain.
    pub foreign_windows_per_pair: usize,
    pub window_len: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    /// Base frequency per class; classes beyond the list extrapolate it.
    pub class_freqs_hz: Vec<f64>,
    /// Oscillation amplitude per class; extrapolated like the frequencies.
    pub class_amplitudes: Vec<f64>,
    /// Std of the per-subject frequency and amplitude multipliers.
    pub subject_spread: f64,
    /// Std of the per-window relative frequency jitter.
    pub freq_jitter: f64,
    /// Fraction of a full turn used for the random per-window phase.
    pub phase_jitter: f64,
    pub noise_std: f64,
    /// Length of the per-class posture (mean) vector on each 3-axis sensor.
    pub posture_scale: f64,
    /// How far each class's waveform shape (harmonics, channel weights and
    /// phases, envelope) departs from a profile shared by all classes; 0
    /// leaves frequency, amplitude and posture as the only class cues.
    pub class_shape_spread: f64,
    /// Max relative deviation of the per-channel domain gain.
    pub domain_gain_spread: f64,
    /// Std of the per-channel domain offset.
    pub domain_offset_std: f64,
    /// When false, every domain transform is the identity.
    pub domain_transform: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            subjects: 8,
            domains: 2,
            windows_per_pair: 120,
            foreign_windows_per_pair: 6,
            window_len: 128,
            channels: 6,
            sample_rate_hz: 50.0,
            class_freqs_hz: vec![0.9, 1.1, 1.3, 1.5, 1.7, 2.6],
            class_amplitudes: vec![0.8, 0.8, 0.8, 0.8, 0.8, 1.4],
            subject_spread: 0.12,
            freq_jitter: 0.08,
            phase_jitter: 1.0,
            noise_std: 0.3,
            posture_scale: 0.15,
            class_shape_spread: 0.0,
            domain_gain_spread: 0.4,
            domain_offset_std: 0.5,
            domain_transform: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.classes == 0 {
            return bad("at least one class is required");
        }
        if self.subjects == 0 || self.domains == 0 {
            return bad("at least one subject and one domain are required");
        }
        if self.window_len == 0 || !self.window_len.is_multiple_of(super::FRAME_GROUP) {
            return bad("window_len must be a positive multiple of 8");
        }
        if self.channels == 0 || !(self.sample_rate_hz > 0.0) {
            return bad("channels and sample rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.class_shape_spread) {
            return bad("class_shape_spread must lie in [0, 1]");
        }
        if self.class_freqs_hz.is_empty() || self.class_amplitudes.is_empty() {
            return bad("class frequency and amplitude lists must not be empty");
        }
        Ok(())
    }
}

struct ClassProfile {
    freq: f64,
    amplitude: f64,
    /// (relative weight, harmonic number)
    harmonics: Vec<(f64, f64)>,
    channel_weight: Vec<f64>,
    channel_phase: Vec<f64>,
    offset: Vec<f64>,
    envelope_depth: f64,
    envelope_freq: f64,
}

struct SubjectProfile {
    freq_mult: f64,
    amp_mult: f64,
}

struct DomainTransform {
    permutation: Vec<usize>,
    gain: Vec<f64>,
    offset: Vec<f64>,
}

fn extrapolate(values: &[f64], i: usize) -> f64 {
    if let Some(v) = values.get(i) {
        return *v;
    }
    let n = values.len();
    let step = if n >= 2 {
        values[n - 1] - values[n - 2]
    } else {
        0.0
    };
    values[n - 1] + step * (i + 1 - n) as f64
}

fn class_profile(cfg: &GeneratorConfig, c: usize, rng: &mut RngState) -> ClassProfile {
    let ch = cfg.channels;
    let harmonics = vec![
        (rng.uniform_range(0.1, 0.4), 2.0),
        (rng.uniform_range(0.0, 0.25), 3.0),
    ];
    let channel_weight = (0..ch).map(|_| rng.uniform_range(0.3, 1.0)).collect();
    let channel_phase = (0..ch).map(|_| rng.uniform_range(0.0, TAU)).collect();
    // posture: a random unit direction on each 3-axis group
    let mut offset = vec![0.0; ch];
    for group in offset.chunks_mut(3) {
        let dir: Vec<f64> = group.iter().map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        for (o, d) in group.iter_mut().zip(&dir) {
            *o = cfg.posture_scale * d / norm;
        }
    }
    ClassProfile {
        freq: extrapolate(&cfg.class_freqs_hz, c).max(0.05),
        amplitude: extrapolate(&cfg.class_amplitudes, c).max(0.0),
        harmonics,
        channel_weight,
        channel_phase,
        offset,
        envelope_depth: rng.uniform_range(0.05, 0.25),
        envelope_freq: rng.uniform_range(0.1, 0.5),
    }
}

fn lerp(shared: f64, own: f64, t: f64) -> f64 {
    shared + t * (own - shared)
}

/// Pulls the shape of `own` toward `shared` by `1 - t`.
fn blend_shape(shared: &ClassProfile, mut own: ClassProfile, t: f64) -> ClassProfile {
    for (o, s) in own.harmonics.iter_mut().zip(&shared.harmonics) {
        o.0 = lerp(s.0, o.0, t);
    }
    for (o, s) in own.channel_weight.iter_mut().zip(&shared.channel_weight) {
        *o = lerp(*s, *o, t);
    }
    for (o, s) in own.channel_phase.iter_mut().zip(&shared.channel_phase) {
        *o = lerp(*s, *o, t);
    }
    own.envelope_depth = lerp(shared.envelope_depth, own.envelope_depth, t);
    own.envelope_freq = lerp(shared.envelope_freq, own.envelope_freq, t);
    own
}

fn domain_transform(cfg: &GeneratorConfig, d: usize, rng: &mut RngState) -> DomainTransform {
    let ch = cfg.channels;
    if d == 0 || !cfg.domain_transform {
        return DomainTransform {
            permutation: (0..ch).collect(),
            gain: vec![1.0; ch],
            offset: vec![0.0; ch],
        };
    }
    let mut permutation: Vec<usize> = (0..ch).collect();
    for group in permutation.chunks_mut(3) {
        // cyclic axis swap, as from a rotated device mount
        if group.len() > 1 {
            group.rotate_left(1 + (d - 1) % (group.len() - 1));
        }
    }
    let s = cfg.domain_gain_spread;
    DomainTransform {
        permutation,
        gain: (0..ch)
            .map(|_| rng.uniform_range(1.0 - s, 1.0 + s))
            .collect(),
        offset: (0..ch)
            .map(|_| rng.normal() * cfg.domain_offset_std)
            .collect(),
    }
}

/// Subject ids are unique across domains: `domain * subjects + s`.
pub fn synth_generate(cfg: &GeneratorConfig, rng: &RngState) -> Result<Vec<SensorWindow>> {
    cfg.validate()?;
    let shared = class_profile(cfg, 0, &mut rng.derive(5));
    let mut class_rng = rng.derive(1);
    let classes: Vec<ClassProfile> = (0..cfg.classes)
        .map(|c| {
            let own = class_profile(cfg, c, &mut class_rng);
            blend_shape(&shared, own, cfg.class_shape_spread)
        })
        .collect();
    let mut domain_rng = rng.derive(2);
    let domains: Vec<DomainTransform> = (0..cfg.domains)
        .map(|d| domain_transform(cfg, d, &mut domain_rng))
        .collect();
    let mut subject_rng = rng.derive(3);
    let subjects: Vec<SubjectProfile> = (0..cfg.domains * cfg.subjects)
        .map(|_| SubjectProfile {
            freq_mult: (1.0 + cfg.subject_spread * subject_rng.normal()).max(0.5),
            amp_mult: (1.0 + cfg.subject_spread * subject_rng.normal()).max(0.3),
        })
        .collect();

    let mut windows = Vec::new();
    let mut window_rng = rng.derive(4);
    for (d, transform) in domains.iter().enumerate() {
        let per_pair = if d == 0 {
            cfg.windows_per_pair
        } else {
            cfg.foreign_windows_per_pair
        };
        for (c, class) in classes.iter().enumerate() {
            for s in 0..cfg.subjects {
                let subject_id = d * cfg.subjects + s;
                let subject = &subjects[subject_id];
                for _ in 0..per_pair {
                    let frames = synth_window(cfg, class, subject, transform, &mut window_rng);
                    windows.push(SensorWindow::new(
                        frames,
                        c,
                        subject_id,
                        d,
                        cfg.sample_rate_hz,
                        windows.len(),
                    )?);
                }
            }
        }
    }
    Ok(windows)
}

fn synth_window(
    cfg: &GeneratorConfig,
    class: &ClassProfile,
    subject: &SubjectProfile,
    transform: &DomainTransform,
    rng: &mut RngState,
) -> Tensor {
    let (n, ch) = (cfg.window_len, cfg.channels);
    let freq = class.freq * subject.freq_mult * (1.0 + cfg.freq_jitter * rng.normal());
    let phase = TAU * cfg.phase_jitter * rng.uniform();
    let env_phase = TAU * cfg.phase_jitter * rng.uniform();
    let amp = class.amplitude * subject.amp_mult;
    let mut raw = vec![0.0f64; n * ch];
    for t in 0..n {
        let time = t as f64 / cfg.sample_rate_hz;
        let env = 1.0 + class.envelope_depth * (TAU * class.envelope_freq * time + env_phase).sin();
        for c in 0..ch {
            let base = TAU * freq * time + phase + class.channel_phase[c];
            let mut wave = base.sin();
            for &(w, h) in &class.harmonics {
                wave += w * (h * base + class.channel_phase[(c + 1) % ch]).sin();
            }
            raw[t * ch + c] = class.offset[c] + amp * class.channel_weight[c] * env * wave;
        }
    }
    let mut out = vec![0.0f32; n * ch];
    for t in 0..n {
        for c in 0..ch {
            let src = raw[t * ch + transform.permutation[c]];
            let noise = if cfg.noise_std > 0.0 {
                cfg.noise_std * rng.normal()
            } else {
                0.0
            };
            out[t * ch + c] = (transform.gain[c] * src + transform.offset[c] + noise) as f32;
        }
    }
    Tensor::matrix(n, ch, out).expect("window shape")
}
