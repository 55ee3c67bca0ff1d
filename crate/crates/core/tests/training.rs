//! End-to-end training on the default synthetic scenarios. The autoencoder is
//! pretrained once and shared by every test in this file.

use std::sync::OnceLock;

use har_uq::classifier::{accuracy, train_head, ClassifierHead, HeadConfig};
use har_uq::config::RunConfig;
use har_uq::data::ScenarioSet;
use har_uq::mae::{MaeModel, TrainingCurve};
use har_uq::pipeline;
use har_uq::rng::RngState;

struct Trained {
    set: ScenarioSet,
    mae: MaeModel,
    curve: TrainingCurve,
    head: ClassifierHead,
    mae_before_head: MaeModel,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::default();
        let set = pipeline::scenarios(&cfg).unwrap();
        let (mae, curve) = pipeline::pretrain_stage(&cfg, &set).unwrap();
        let mae_before_head = mae.clone();
        let (head, _) = pipeline::train_head_stage(&cfg, &mae, &set).unwrap();
        Trained {
            set,
            mae,
            curve,
            head,
            mae_before_head,
        }
    })
}

#[test]
fn pretraining_reduces_loss_and_generalizes() {
    let t = trained();
    let last = t.curve.epochs.last().unwrap();
    assert_eq!(t.curve.epochs.len(), RunConfig::default().pretrain.epochs);
    assert!(
        last.train < 0.25 * t.curve.initial_train,
        "{} vs initial {}",
        last.train,
        t.curve.initial_train
    );
    assert!((last.train - last.validation).abs() / last.train < 0.5);
}

#[test]
fn head_learns_the_in_scope_classes() {
    let t = trained();
    let preds: Vec<_> = t
        .set
        .validation
        .iter()
        .map(|w| t.head.predict(&t.mae, w).unwrap())
        .collect();
    let labels: Vec<usize> = t.set.validation.iter().map(|w| w.label).collect();
    assert_eq!(t.head.num_classes(), 5);
    let acc = accuracy(&preds, &labels);
    assert!(acc > 0.9, "validation accuracy {acc}");
}

#[test]
fn head_training_leaves_the_encoder_frozen() {
    let t = trained();
    assert_eq!(t.mae, t.mae_before_head);
    for (a, b) in t.mae.params().iter().zip(t.mae_before_head.params().iter()) {
        let bits = |p: &har_uq::nn::Parameter| -> Vec<u32> {
            p.value.data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }
    for w in t.set.validation.iter().take(20) {
        assert_eq!(
            t.mae.encode(w).unwrap(),
            t.mae_before_head.encode(w).unwrap()
        );
    }
}

#[test]
fn untrained_head_is_at_chance() {
    let t = trained();
    let labels = t.set.train_labels();
    let c = labels.len();
    let mut head = ClassifierHead::new(
        t.mae.latent_dim(),
        labels,
        HeadConfig {
            epochs: 0,
            ..HeadConfig::default()
        },
        &mut RngState::new(99),
    )
    .unwrap();
    train_head(
        &mut head,
        &t.mae,
        &t.set.train,
        &t.set.validation,
        &mut RngState::new(1),
    )
    .unwrap();
    let preds: Vec<_> = t
        .set
        .validation
        .iter()
        .map(|w| head.predict(&t.mae, w).unwrap())
        .collect();
    let labels: Vec<usize> = t.set.validation.iter().map(|w| w.label).collect();
    let acc = accuracy(&preds, &labels);
    assert!(
        (acc - 1.0 / c as f64).abs() <= 0.1,
        "accuracy {acc} with {c} classes"
    );
}

#[test]
fn stochastic_mean_tracks_the_deterministic_prediction() {
    let t = trained();
    for w in t.set.validation.iter().step_by(20) {
        let z = t.mae.encode(w).unwrap();
        let det = t.head.predict_latent(&z).unwrap();
        let mut mean = vec![0.0f64; det.probabilities.len()];
        for seed in 0..100 {
            let p = t
                .head
                .predict_stochastic_latent(&z, &mut RngState::new(seed))
                .unwrap();
            for (m, v) in mean.iter_mut().zip(&p.probabilities) {
                *m += f64::from(*v) / 100.0;
            }
        }
        let linf = mean
            .iter()
            .zip(&det.probabilities)
            .map(|(m, d)| (m - f64::from(*d)).abs())
            .fold(0.0, f64::max);
        assert!(linf < 0.1, "L-inf gap {linf}");
    }
}

#[test]
fn stochastic_inference_contracts() {
    let t = trained();
    let w = &t.set.validation[0];
    let a = t
        .head
        .predict_stochastic(&t.mae, w, &mut RngState::new(4))
        .unwrap();
    let b = t
        .head
        .predict_stochastic(&t.mae, w, &mut RngState::new(4))
        .unwrap();
    assert_eq!(a, b);

    let off = t.head.with_dropout_rate(0.0).unwrap();
    let det = off.predict(&t.mae, w).unwrap();
    assert_eq!(
        off.predict_stochastic(&t.mae, w, &mut RngState::new(4))
            .unwrap(),
        det
    );
    assert!((det.probabilities.iter().sum::<f32>() - 1.0).abs() < 1e-6);

    let z = t.mae.encode(w).unwrap();
    let mut rng = RngState::new(12);
    let batched = t.head.stochastic_passes(&z, 10, &mut rng).unwrap();
    let mut rng = RngState::new(12);
    for p in batched {
        let single = t.head.predict_stochastic_latent(&z, &mut rng).unwrap();
        assert_eq!(p, single.probabilities);
    }
}
