//! Fully connected head over frozen autoencoder latents.

use serde::{Deserialize, Serialize};

use crate::data::SensorWindow;
use crate::error::{Error, Result};
use crate::mae::{LatentVector, MaeModel};
use crate::nn::{dropout_mask, kernels, Adam, AdamConfig, Linear, Mode, ParamStore, Tape, Tensor};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout_rate: 0.3,
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    /// Class id (not index) of the most probable class.
    pub predicted_class: usize,
}

impl Prediction {
    /// Argmax with ties going to the lowest index.
    pub fn from_probabilities(probabilities: Vec<f32>, class_labels: &[usize]) -> Self {
        let mut best = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[best] {
                best = i;
            }
        }
        Self {
            predicted_class: class_labels[best],
            probabilities,
        }
    }

    pub fn max_prob(&self) -> f32 {
        self.probabilities.iter().copied().fold(f32::MIN, f32::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    config: HeadConfig,
    class_labels: Vec<usize>,
    store: ParamStore,
    hidden: Linear,
    output: Linear,
}

impl ClassifierHead {
    pub fn new(
        latent_dim: usize,
        class_labels: Vec<usize>,
        config: HeadConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        if class_labels.is_empty() {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                config.dropout_rate
            )));
        }
        if config.hidden == 0 || latent_dim == 0 {
            return Err(Error::Config(
                "classifier layer widths must be positive".into(),
            ));
        }
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, "head.hidden", latent_dim, config.hidden, rng);
        let output = Linear::new(
            &mut store,
            "head.output",
            config.hidden,
            class_labels.len(),
            rng,
        );
        Ok(Self {
            config,
            class_labels,
            store,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.hidden.inputs
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Same head with a different dropout rate.
    pub fn with_dropout_rate(&self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout_rate {rate} must lie in [0, 1)"
            )));
        }
        let mut head = self.clone();
        head.config.dropout_rate = rate;
        Ok(head)
    }

    fn label_index(&self, label: usize) -> Result<usize> {
        self.class_labels
            .iter()
            .position(|&c| c == label)
            .ok_or(Error::UnknownLabel { label })
    }

    fn check_latent(&self, z: &LatentVector) -> Result<()> {
        if z.dim() != self.latent_dim() {
            return Err(Error::shape(
                "classifier input",
                format!(
                    "latent of {} values, head expects {}",
                    z.dim(),
                    self.latent_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Row-major probabilities for `rows` stacked latents. Dropout is
    /// applied when `rng` is given.
    fn probabilities(&self, x: &[f32], rows: usize, rng: Option<&mut RngState>) -> Vec<f32> {
        let mut h = self.hidden.infer(&self.store, x, rows);
        for v in &mut h {
            *v = kernels::gelu(*v);
        }
        if let Some(rng) = rng {
            if self.config.dropout_rate > 0.0 {
                let mask = dropout_mask(h.len(), self.config.dropout_rate as f32, rng);
                for (v, m) in h.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
        }
        let logits = self.output.infer(&self.store, &h, rows);
        let c = self.num_classes();
        let mut out = vec![0.0; logits.len()];
        for (src, dst) in logits.chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(src, dst);
        }
        out
    }

    /// Deterministic prediction with dropout off.
    pub fn predict_latent(&self, z: &LatentVector) -> Result<Prediction> {
        self.check_latent(z)?;
        let p = self.probabilities(z.as_slice(), 1, None);
        Ok(Prediction::from_probabilities(p, &self.class_labels))
    }

    pub fn predict_latents(&self, latents: &[LatentVector]) -> Result<Vec<Prediction>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for z in latents {
            self.check_latent(z)?;
        }
        let x: Vec<f32> = latents.iter().flat_map(|z| z.0.iter().copied()).collect();
        let p = self.probabilities(&x, latents.len(), None);
        Ok(p.chunks(self.num_classes())
            .map(|row| Prediction::from_probabilities(row.to_vec(), &self.class_labels))
            .collect())
    }

    pub fn predict(&self, mae: &MaeModel, window: &SensorWindow) -> Result<Prediction> {
        self.predict_latent(&mae.encode(window)?)
    }

    /// One forward pass with dropout active in the head.
    pub fn predict_stochastic_latent(
        &self,
        z: &LatentVector,
        rng: &mut RngState,
    ) -> Result<Prediction> {
        self.check_latent(z)?;
        let p = self.probabilities(z.as_slice(), 1, Some(rng));
        Ok(Prediction::from_probabilities(p, &self.class_labels))
    }

    pub fn predict_stochastic(
        &self,
        mae: &MaeModel,
        window: &SensorWindow,
        rng: &mut RngState,
    ) -> Result<Prediction> {
        self.predict_stochastic_latent(&mae.encode(window)?, rng)
    }

    /// `passes` stochastic probability vectors for one latent; identical to
    /// calling [`Self::predict_stochastic_latent`] `passes` times in a row.
    pub fn stochastic_passes(
        &self,
        z: &LatentVector,
        passes: usize,
        rng: &mut RngState,
    ) -> Result<Vec<Vec<f32>>> {
        self.check_latent(z)?;
        if passes == 0 {
            return Ok(Vec::new());
        }
        let x: Vec<f32> = std::iter::repeat_n(z.as_slice(), passes)
            .flatten()
            .copied()
            .collect();
        let p = self.probabilities(&x, passes, Some(rng));
        Ok(p.chunks(self.num_classes()).map(<[f32]>::to_vec).collect())
    }
}

/// Trains the head on encoder outputs; the autoencoder is only read.
pub fn train_head(
    head: &mut ClassifierHead,
    mae: &MaeModel,
    train: &[SensorWindow],
    validation: &[SensorWindow],
    rng: &mut RngState,
) -> Result<Vec<HeadEpoch>> {
    let train_z = mae.encode_batch(train)?;
    let val_z = mae.encode_batch(validation)?;
    let train_y: Vec<usize> = train.iter().map(|w| w.label).collect();
    let val_y: Vec<usize> = validation.iter().map(|w| w.label).collect();
    train_head_on_latents(head, &train_z, &train_y, &val_z, &val_y, rng)
}

pub fn train_head_on_latents(
    head: &mut ClassifierHead,
    train: &[LatentVector],
    train_labels: &[usize],
    validation: &[LatentVector],
    validation_labels: &[usize],
    rng: &mut RngState,
) -> Result<Vec<HeadEpoch>> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if train.len() != train_labels.len() || validation.len() != validation_labels.len() {
        return Err(Error::shape(
            "train_head",
            "latents and labels differ in length",
        ));
    }
    let targets = train_labels
        .iter()
        .map(|&l| head.label_index(l))
        .collect::<Result<Vec<_>>>()?;
    for &l in validation_labels {
        head.label_index(l)?;
    }
    for z in train.iter().chain(validation) {
        head.check_latent(z)?;
    }
    let dim = head.latent_dim();
    let rate = head.config.dropout_rate as f32;
    let mut adam = Adam::new(
        AdamConfig {
            lr: head.config.lr,
            ..AdamConfig::default()
        },
        &head.store,
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(head.config.epochs);
    for epoch in 0..head.config.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence {
                stage: "classifier training",
                epoch,
            },
            other => other,
        };
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(head.config.batch_size.max(1)) {
            let x: Vec<f32> = idx
                .iter()
                .flat_map(|&i| train[i].0.iter().copied())
                .collect();
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            head.store.zero_grad();
            let mut tape = Tape::new();
            let p = head.store.bind(&mut tape);
            let xv = tape.leaf(Tensor::matrix(idx.len(), dim, x)?);
            let h = head.hidden.forward(&mut tape, &p, xv)?;
            let h = tape.gelu(h)?;
            let h = tape.dropout(h, rate, Mode::Train, rng)?;
            let logits = head.output.forward(&mut tape, &p, h)?;
            let probs = tape.softmax(logits).map_err(diverged)?;
            let loss = tape.cross_entropy(probs, &y)?;
            let grads = tape.backward(loss).map_err(diverged)?;
            head.store.accumulate(&grads, &p);
            adam.step(&mut head.store).map_err(diverged)?;
            total += f64::from(tape.value(loss).item()) * idx.len() as f64;
        }
        let validation_accuracy = if validation.is_empty() {
            f64::NAN
        } else {
            accuracy(&head.predict_latents(validation)?, validation_labels)
        };
        let train_loss = total / train.len() as f64;
        log::debug!("head epoch {epoch}: loss {train_loss:.4} val acc {validation_accuracy:.4}");
        curve.push(HeadEpoch {
            epoch,
            train_loss,
            validation_accuracy,
        });
    }
    head.store.zero_grad();
    Ok(curve)
}

/// Fraction of predictions whose class equals the label.
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| p.predicted_class == l)
        .count();
    hits as f64 / predictions.len() as f64
}
