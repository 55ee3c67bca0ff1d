#![allow(dead_code)]

use har_uq::nn::{Tape, Tensor, Var};
use har_uq::rng::RngState;
use har_uq::Result;

pub fn random_tensor(rng: &mut RngState, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * scale) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Norm-wise relative error between the tape gradient and central finite
/// differences (step `h`), over the concatenated gradient of all inputs. The probed scalar is
/// `sum(out * w)` for a fixed random `w`, so no input has a trivially zero
/// gradient.
pub fn gradient_error<F>(inputs: &[Tensor], seed: u64, h: f32, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut wrng = RngState::new(seed ^ 0xA5A5);
    let eval = |tensors: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let (tape0, _, out0) = eval(inputs);
    let out_shape = tape0.value(out0).shape().to_vec();
    let weights = random_tensor(&mut wrng, &out_shape, 1.0);

    let probe = |tensors: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let (mut tape, vars, out) = eval(tensors);
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, vars, loss)
    };

    let (tape, vars, loss) = probe(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        match grads.get(vars[i]) {
            Some(g) => analytic.extend(g.iter().map(|&v| f64::from(v))),
            None => analytic.extend(std::iter::repeat_n(0.0, input.len())),
        }
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (tp, _, lp) = probe(&plus);
            let (tm, _, lm) = probe(&minus);
            let fp = f64::from(tp.value(lp).item());
            let fm = f64::from(tm.value(lm).item());
            numeric.push((fp - fm) / (2.0 * f64::from(h)));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

pub type GradCase = (&'static str, fn(u64) -> f64);

const H: f32 = 1e-3;

fn rt(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = RngState::new(seed);
    shapes
        .iter()
        .map(|s| random_tensor(&mut rng, s, 0.8))
        .collect()
}

/// One entry per differentiable op; each returns the worst relative error
/// for the given seed.
pub fn gradient_cases() -> Vec<GradCase> {
    use har_uq::nn::{linear, multi_head_self_attention, Mode};
    vec![
        ("linear", |s| {
            gradient_error(&rt(s, &[&[4, 5], &[5, 3], &[3]]), s, H, |t, v| {
                linear(t, v[0], v[1], v[2])
            })
        }),
        ("add_mul_scale", |s| {
            gradient_error(&rt(s, &[&[3, 4], &[3, 4]]), s, H, |t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                t.scale(m, 0.7)
            })
        }),
        ("layer_norm", |s| {
            gradient_error(&rt(s, &[&[4, 6], &[6], &[6]]), s, H, |t, v| {
                t.layer_norm(v[0], v[1], v[2])
            })
        }),
        ("gelu", |s| {
            gradient_error(&rt(s, &[&[3, 5]]), s, H, |t, v| t.gelu(v[0]))
        }),
        ("softmax", |s| {
            gradient_error(&rt(s, &[&[3, 5]]), s, H, |t, v| t.softmax(v[0]))
        }),
        ("multi_head_self_attention", |s| {
            let shapes: Vec<&[usize]> = vec![
                &[8, 4],
                &[4, 4],
                &[4],
                &[4, 4],
                &[4],
                &[4, 4],
                &[4],
                &[4, 4],
                &[4],
            ];
            gradient_error(&rt(s, &shapes), s, H, |t, v| {
                multi_head_self_attention(
                    t,
                    v[0],
                    [(v[1], v[2]), (v[3], v[4]), (v[5], v[6]), (v[7], v[8])],
                    2,
                    4,
                )
            })
        }),
        ("dropout", |s| {
            gradient_error(&rt(s, &[&[4, 6]]), s, H, |t, v| {
                let mut rng = RngState::new(s);
                t.dropout(v[0], 0.3, Mode::Train, &mut rng)
            })
        }),
        ("gather_rows", |s| {
            gradient_error(&rt(s, &[&[3, 4], &[2, 4]]), s, H, |t, v| {
                t.gather_rows(&[(v[0], 2), (v[1], 0), (v[0], 2), (v[1], 1)])
            })
        }),
        ("segment_mean", |s| {
            gradient_error(&rt(s, &[&[6, 3]]), s, H, |t, v| t.segment_mean(v[0], 3))
        }),
        ("mse_masked", |s| {
            gradient_error(&rt(s, &[&[5, 3], &[5, 3]]), s, H, |t, v| {
                t.mse_masked(v[0], v[1], &[true, false, true, true, false])
            })
        }),
        ("cross_entropy", |s| {
            gradient_error(&rt(s, &[&[4, 3]]), s, H, |t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &[0, 2, 1, 2])
            })
        }),
    ]
}

pub mod fixture {
    use har_uq::classifier::{ClassifierHead, HeadConfig};
    use har_uq::data::{synth_generate, GeneratorConfig, SensorWindow};
    use std::cell::RefCell;

    use har_uq::detectors::{
        Batch, Detector, DetectorKind, DetectorSet, DistanceDetector, KMeansConfig,
        McDropoutDetector, QuantileThreshold, ReconstructionDetector,
    };
    use har_uq::mae::{LatentVector, MaeConfig, MaeModel};
    use har_uq::rng::RngState;
    use har_uq::Result;

    /// Untrained models with thresholds calibrated at `q` on `calibration`.
    pub struct Fixture {
        pub mae: MaeModel,
        pub head: ClassifierHead,
        pub detectors: DetectorSet,
        pub windows: Vec<SensorWindow>,
        pub latents: Vec<LatentVector>,
        pub calibration: Vec<SensorWindow>,
        pub calibration_latents: Vec<LatentVector>,
    }

    impl Fixture {
        pub fn new(n: usize, q: f64, seed: u64) -> Self {
            let gen = GeneratorConfig {
                windows_per_pair: 2 * n / 48 + 2,
                ..GeneratorConfig::default()
            };
            let mut all = synth_generate(&gen, &RngState::new(seed)).unwrap();
            RngState::new(seed + 1).shuffle(&mut all);
            let windows: Vec<SensorWindow> = all.drain(..n).collect();
            let calibration: Vec<SensorWindow> = all.drain(..n).collect();

            let mae = MaeModel::new(MaeConfig::default(), &mut RngState::new(seed + 2)).unwrap();
            let head = ClassifierHead::new(
                mae.latent_dim(),
                (0..gen.classes).collect(),
                HeadConfig::default(),
                &mut RngState::new(seed + 3),
            )
            .unwrap();
            let cal_z = mae.encode_batch(&calibration).unwrap();
            let mut detectors = DetectorSet {
                reconstruction: ReconstructionDetector::new(128, seed + 4),
                distance: DistanceDetector::fit(
                    &cal_z,
                    4,
                    &KMeansConfig::default(),
                    &mut RngState::new(seed + 5),
                )
                .unwrap(),
                mcdropout: McDropoutDetector::new(20, seed + 6),
            };
            let batch = Batch::new(&mae, &head, &calibration, &cal_z).unwrap();
            detectors.reconstruction.calibrate(&batch, q).unwrap();
            detectors.distance.calibrate(&batch, q).unwrap();
            detectors.mcdropout.calibrate(&batch, q).unwrap();
            let latents = mae.encode_batch(&windows).unwrap();
            Self {
                mae,
                head,
                detectors,
                windows,
                latents,
                calibration,
                calibration_latents: cal_z,
            }
        }

        pub fn batch(&self) -> Batch<'_> {
            Batch::new(&self.mae, &self.head, &self.windows, &self.latents).unwrap()
        }

        pub fn calibration_batch(&self) -> Batch<'_> {
            Batch::new(
                &self.mae,
                &self.head,
                &self.calibration,
                &self.calibration_latents,
            )
            .unwrap()
        }
    }

    /// Delegates to a real detector and records every row it is asked to score.
    pub struct Counting<'a> {
        inner: &'a dyn Detector,
        pub seen: RefCell<Vec<usize>>,
    }

    impl<'a> Counting<'a> {
        pub fn new(inner: &'a dyn Detector) -> Self {
            Self {
                inner,
                seen: RefCell::new(Vec::new()),
            }
        }

        pub fn calls(&self) -> usize {
            self.seen.borrow().len()
        }
    }

    impl Detector for Counting<'_> {
        fn kind(&self) -> DetectorKind {
            self.inner.kind()
        }

        fn threshold(&self) -> Option<&QuantileThreshold> {
            self.inner.threshold()
        }

        fn set_threshold(&mut self, _: QuantileThreshold) {
            unreachable!("thresholds are fixed in this test")
        }

        fn score_batch(&self, batch: &Batch<'_>, rows: &[usize]) -> Result<Vec<f64>> {
            self.seen.borrow_mut().extend_from_slice(rows);
            self.inner.score_batch(batch, rows)
        }
    }
}
