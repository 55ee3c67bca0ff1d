//! Masked autoencoder over sensor windows.
//!
//! A window of `N` timesteps is cut into `N / frame_len` non-overlapping
//! frames, and every frame is further split by sensor group (e.g.
//! accelerometer, gyroscope). Each (frame, group) pair is one token, so a
//! window is a sequence of `frames * groups` tokens laid out frame-major:
//! position `p = frame * groups + group`.
//!
//! Training masks a random subset of positions. The encoder only sees the
//! visible tokens. The decoder sees the encoder output at visible positions
//! and the learnable mask token of the matching sensor group at masked ones,
//! and the loss is the mean squared L2 error over masked tokens only.

use serde::{Deserialize, Serialize};

use crate::data::{SensorWindow, FRAME_GROUP};
use crate::error::{Error, Result};
use crate::nn::{
    Adam, AdamConfig, Bound, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor,
    TransformerBlock, Var,
};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub window_len: usize,
    pub channels: usize,
    /// Timesteps per frame.
    pub frame_len: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub mask_ratio: f64,
    /// Partition of the channel indices, one mask token per group.
    pub sensor_groups: Vec<Vec<usize>>,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            window_len: 128,
            channels: 6,
            frame_len: 16,
            embed_dim: 32,
            encoder_depth: 2,
            decoder_depth: 1,
            heads: 4,
            ff_dim: 64,
            mask_ratio: 0.75,
            sensor_groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
        }
    }
}

impl MaeConfig {
    pub fn frames_per_window(&self) -> usize {
        self.window_len / self.frame_len
    }

    pub fn num_positions(&self) -> usize {
        self.frames_per_window() * self.sensor_groups.len()
    }

    pub fn masked_count(&self) -> usize {
        masked_count(self.num_positions(), self.mask_ratio)
    }

    /// Sensor group of every position.
    pub fn position_groups(&self) -> Vec<usize> {
        let g = self.sensor_groups.len();
        (0..self.num_positions()).map(|p| p % g).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("mae: {m}")));
        if self.frame_len == 0 || self.window_len == 0 || !self.window_len.is_multiple_of(self.frame_len) {
            return bad(format!(
                "window_len {} is not divisible by frame_len {}",
                self.window_len, self.frame_len
            ));
        }
        if !self.window_len.is_multiple_of(FRAME_GROUP) {
            return bad(format!(
                "window_len {} is not a multiple of 8",
                self.window_len
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be a positive multiple of heads".into());
        }
        if self.decoder_depth >= self.encoder_depth {
            return bad("the decoder must be shallower than the encoder".into());
        }
        let mut seen = vec![false; self.channels];
        for g in &self.sensor_groups {
            if g.is_empty() {
                return bad("empty sensor group".into());
            }
            for &c in g {
                if c >= self.channels || seen[c] {
                    return bad(format!(
                        "sensor groups do not partition {} channels",
                        self.channels
                    ));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) || self.sensor_groups.is_empty() {
            return bad(format!(
                "sensor groups do not partition {} channels",
                self.channels
            ));
        }
        let p = self.num_positions();
        let m = (self.mask_ratio * p as f64).round() as usize;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || m == 0 || m >= p {
            return bad(format!(
                "mask_ratio {} must leave at least one masked and one visible of {p} positions",
                self.mask_ratio
            ));
        }
        Ok(())
    }
}

fn masked_count(positions: usize, ratio: f64) -> usize {
    (ratio * positions as f64).round() as usize
}

/// Mean-pooled encoder output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Splits a window into `N / frame_len` consecutive frames, each flattened
/// time-major (`frame_len x channels`).
pub fn split_frames(window: &SensorWindow, frame_len: usize) -> Result<Vec<Vec<f32>>> {
    let n = window.timesteps();
    if frame_len == 0 || !n.is_multiple_of(frame_len) {
        return Err(Error::InvalidArgument(format!(
            "window of {n} timesteps cannot be split into frames of {frame_len}"
        )));
    }
    let width = frame_len * window.channels();
    Ok(window
        .frames
        .data()
        .chunks(width)
        .map(<[f32]>::to_vec)
        .collect())
}

/// Which positions of one sequence are masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted masked positions.
    pub masked: Vec<usize>,
    /// Sorted visible positions.
    pub visible: Vec<usize>,
}

impl MaskPlan {
    /// Uniform choice of `round(ratio * positions)` positions without replacement.
    pub fn draw(positions: usize, ratio: f64, rng: &mut RngState) -> Self {
        let m = masked_count(positions, ratio).min(positions);
        let mut masked = rng.sample_indices(positions, m);
        masked.sort_unstable();
        let mut is_masked = vec![false; positions];
        for &p in &masked {
            is_masked[p] = true;
        }
        let visible = (0..positions).filter(|&p| !is_masked[p]).collect();
        Self { masked, visible }
    }

    pub fn is_masked(&self, p: usize) -> bool {
        self.masked.binary_search(&p).is_ok()
    }
}

/// Masks rows of `embeddings` (`positions x dim`), replacing each masked row
/// with the mask token of its sensor group.
pub fn mask_frames(
    embeddings: &Tensor,
    position_groups: &[usize],
    mask_tokens: &[Vec<f32>],
    mask_ratio: f64,
    rng: &mut RngState,
) -> Result<(MaskPlan, Tensor)> {
    let positions = embeddings.rows();
    if position_groups.len() != positions {
        return Err(Error::shape(
            "mask_frames",
            "one group id per position required",
        ));
    }
    let plan = MaskPlan::draw(positions, mask_ratio, rng);
    let mut data = embeddings.data().to_vec();
    let dim = embeddings.cols();
    for &p in &plan.masked {
        let token = mask_tokens
            .get(position_groups[p])
            .filter(|t| t.len() == dim)
            .ok_or_else(|| Error::shape("mask_frames", "mask token missing or wrong width"))?;
        data[p * dim..(p + 1) * dim].copy_from_slice(token);
    }
    Ok((plan, Tensor::new(embeddings.shape().to_vec(), data)?))
}

/// Reconstruction loss across sensor groups:
/// `(1/|M|) * sum over masked tokens of ||target - prediction||^2`.
///
/// `preds[g]`, `targets[g]` hold one row per (window, frame) for group `g`
/// and `masks[g]` flags the masked rows.
pub fn masked_reconstruction_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Var],
    masks: &[Vec<bool>],
) -> Result<Var> {
    let counts: Vec<usize> = masks
        .iter()
        .map(|m| m.iter().filter(|&&x| x).count())
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let mut loss: Option<Var> = None;
    for g in 0..preds.len() {
        if counts[g] == 0 {
            continue;
        }
        let part = tape.mse_masked(preds[g], targets[g], &masks[g])?;
        let part = tape.scale(part, counts[g] as f32 / total as f32)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    Ok(loss.expect("at least one group has masked rows"))
}

/// Decoder output and targets for a batch, before the loss is taken.
#[derive(Debug)]
pub struct ReconstructionParts {
    pub preds: Vec<Var>,
    pub targets: Vec<Var>,
    pub masks: Vec<Vec<bool>>,
    pub plans: Vec<MaskPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingCurve {
    /// Train-set loss of the initial model under the evaluation protocol.
    pub initial_train: f64,
    pub epochs: Vec<EpochLoss>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

/// One reconstruction score over a run of consecutive windows.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    /// Index of the first member window in the scored slice.
    pub start: usize,
    /// Number of real member windows.
    pub len: usize,
    /// True when the group was filled up by repeating its last window.
    pub padded: bool,
    pub score: f64,
}

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel {
    config: MaeConfig,
    store: ParamStore,
    projectors: Vec<Linear>,
    positional: ParamId,
    mask_tokens: Vec<ParamId>,
    encoder: Vec<TransformerBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<TransformerBlock>,
    decoder_norm: LayerNorm,
    outputs: Vec<Linear>,
}

impl MaeModel {
    pub fn new(config: MaeConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        let token_dims: Vec<usize> = config
            .sensor_groups
            .iter()
            .map(|g| g.len() * config.frame_len)
            .collect();
        let projectors = token_dims
            .iter()
            .enumerate()
            .map(|(g, &d)| Linear::new(&mut store, &format!("project.g{g}"), d, e, rng))
            .collect();
        let positional =
            store.add_fan_in_uniform("positional", &[config.num_positions(), e], e, rng);
        let mask_tokens = (0..config.sensor_groups.len())
            .map(|g| store.add_fan_in_uniform(format!("mask_token.g{g}"), &[1, e], e, rng))
            .collect();
        let encoder = (0..config.encoder_depth)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("encoder.block{i}"),
                    e,
                    config.heads,
                    config.ff_dim,
                    rng,
                )
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", e);
        let decoder = (0..config.decoder_depth)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("decoder.block{i}"),
                    e,
                    config.heads,
                    config.ff_dim,
                    rng,
                )
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", e);
        let outputs = token_dims
            .iter()
            .enumerate()
            .map(|(g, &d)| Linear::new(&mut store, &format!("reconstruct.g{g}"), e, d, rng))
            .collect();
        Ok(Self {
            config,
            store,
            projectors,
            positional,
            mask_tokens,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            outputs,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mask_token_ids(&self) -> &[ParamId] {
        &self.mask_tokens
    }

    pub fn latent_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_windows(&self, windows: &[&SensorWindow]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::EmptyInput("window batch"));
        }
        for w in windows {
            if w.timesteps() != self.config.window_len || w.channels() != self.config.channels {
                return Err(Error::shape(
                    "mae input",
                    format!(
                        "window {:?}, model expects [{}, {}]",
                        w.frames.shape(),
                        self.config.window_len,
                        self.config.channels
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Token matrices per sensor group, rows ordered (window, frame).
    fn group_tokens(&self, windows: &[&SensorWindow]) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        let nf = cfg.frames_per_window();
        cfg.sensor_groups
            .iter()
            .map(|group| {
                let width = group.len() * cfg.frame_len;
                let mut data = Vec::with_capacity(windows.len() * nf * width);
                for w in windows {
                    for f in 0..nf {
                        for t in f * cfg.frame_len..(f + 1) * cfg.frame_len {
                            let row = w.frames.row(t);
                            data.extend(group.iter().map(|&c| row[c]));
                        }
                    }
                }
                Tensor::matrix(windows.len() * nf, width, data)
            })
            .collect()
    }

    /// Projected token leaves and their embeddings, per group.
    fn embed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        windows: &[&SensorWindow],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let tokens = self.group_tokens(windows)?;
        let mut leaves = Vec::with_capacity(tokens.len());
        let mut embedded = Vec::with_capacity(tokens.len());
        for (g, t) in tokens.into_iter().enumerate() {
            let leaf = tape.leaf(t);
            embedded.push(self.projectors[g].forward(tape, p, leaf)?);
            leaves.push(leaf);
        }
        Ok((leaves, embedded))
    }

    fn run_blocks(
        tape: &mut Tape,
        p: &Bound,
        blocks: &[TransformerBlock],
        norm: &LayerNorm,
        mut x: Var,
        seg_len: usize,
    ) -> Result<Var> {
        for b in blocks {
            x = b.forward(tape, p, x, seg_len)?;
        }
        norm.forward(tape, p, x)
    }

    /// Masked forward pass up to the reconstructions.
    pub fn forward_parts(
        &self,
        tape: &mut Tape,
        p: &Bound,
        windows: &[&SensorWindow],
        rng: &mut RngState,
    ) -> Result<ReconstructionParts> {
        self.check_windows(windows)?;
        let cfg = &self.config;
        let (nf, groups, positions) = (
            cfg.frames_per_window(),
            cfg.sensor_groups.len(),
            cfg.num_positions(),
        );
        let (targets, embedded) = self.embed(tape, p, windows)?;
        let plans: Vec<MaskPlan> = windows
            .iter()
            .map(|_| MaskPlan::draw(positions, cfg.mask_ratio, rng))
            .collect();
        let visible = plans[0].visible.len();

        let token_row = |b: usize, pos: usize| (embedded[pos % groups], b * nf + pos / groups);
        let mut enc_rows = Vec::with_capacity(windows.len() * visible);
        let mut enc_pos = Vec::with_capacity(windows.len() * visible);
        for (b, plan) in plans.iter().enumerate() {
            for &pos in &plan.visible {
                enc_rows.push(token_row(b, pos));
                enc_pos.push((p[self.positional], pos));
            }
        }
        let x = tape.gather_rows(&enc_rows)?;
        let pe = tape.gather_rows(&enc_pos)?;
        let x = tape.add(x, pe)?;
        let encoded = Self::run_blocks(tape, p, &self.encoder, &self.encoder_norm, x, visible)?;

        let mut dec_rows = Vec::with_capacity(windows.len() * positions);
        let mut dec_pos = Vec::with_capacity(windows.len() * positions);
        for (b, plan) in plans.iter().enumerate() {
            let mut next_visible = 0;
            for pos in 0..positions {
                if plan.visible.get(next_visible) == Some(&pos) {
                    dec_rows.push((encoded, b * visible + next_visible));
                    next_visible += 1;
                } else {
                    dec_rows.push((p[self.mask_tokens[pos % groups]], 0));
                }
                dec_pos.push((p[self.positional], pos));
            }
        }
        let y = tape.gather_rows(&dec_rows)?;
        let pe = tape.gather_rows(&dec_pos)?;
        let y = tape.add(y, pe)?;
        let decoded = Self::run_blocks(tape, p, &self.decoder, &self.decoder_norm, y, positions)?;

        let mut preds = Vec::with_capacity(groups);
        let mut masks = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut rows = Vec::with_capacity(windows.len() * nf);
            let mut mask = Vec::with_capacity(windows.len() * nf);
            for (b, plan) in plans.iter().enumerate() {
                for f in 0..nf {
                    let pos = f * groups + g;
                    rows.push((decoded, b * positions + pos));
                    mask.push(plan.is_masked(pos));
                }
            }
            let h = tape.gather_rows(&rows)?;
            preds.push(self.outputs[g].forward(tape, p, h)?);
            masks.push(mask);
        }
        Ok(ReconstructionParts {
            preds,
            targets,
            masks,
            plans,
        })
    }

    /// Masked reconstruction loss of a batch, on a caller-provided tape.
    pub fn forward_loss_on(
        &self,
        tape: &mut Tape,
        p: &Bound,
        windows: &[&SensorWindow],
        rng: &mut RngState,
    ) -> Result<Var> {
        let parts = self.forward_parts(tape, p, windows, rng)?;
        masked_reconstruction_loss(tape, &parts.preds, &parts.targets, &parts.masks)
    }

    /// Masked reconstruction loss of a batch (no gradient kept).
    pub fn forward_loss(&self, windows: &[&SensorWindow], rng: &mut RngState) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let loss = self.forward_loss_on(&mut tape, &p, windows, rng)?;
        Ok(f64::from(tape.value(loss).item()))
    }

    /// Mean batch loss over `windows` with masks drawn from `seed`.
    pub fn evaluate_loss(&self, windows: &[SensorWindow], seed: u64) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::EmptyInput("evaluation windows"));
        }
        let mut rng = RngState::new(seed);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in windows.chunks(EVAL_BATCH) {
            let refs: Vec<&SensorWindow> = chunk.iter().collect();
            total += self.forward_loss(&refs, &mut rng)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count as f64)
    }

    /// Mean-pooled encoder output with masking disabled.
    pub fn encode(&self, window: &SensorWindow) -> Result<LatentVector> {
        Ok(self.encode_batch(std::slice::from_ref(window))?.remove(0))
    }

    pub fn encode_batch(&self, windows: &[SensorWindow]) -> Result<Vec<LatentVector>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EVAL_BATCH) {
            let refs: Vec<&SensorWindow> = chunk.iter().collect();
            out.extend(self.encode_refs(&refs)?);
        }
        Ok(out)
    }

    fn encode_refs(&self, windows: &[&SensorWindow]) -> Result<Vec<LatentVector>> {
        self.check_windows(windows)?;
        let cfg = &self.config;
        let (nf, groups, positions) = (
            cfg.frames_per_window(),
            cfg.sensor_groups.len(),
            cfg.num_positions(),
        );
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (_, embedded) = self.embed(&mut tape, &p, windows)?;
        let mut rows = Vec::with_capacity(windows.len() * positions);
        let mut pos_rows = Vec::with_capacity(windows.len() * positions);
        for b in 0..windows.len() {
            for pos in 0..positions {
                rows.push((embedded[pos % groups], b * nf + pos / groups));
                pos_rows.push((p[self.positional], pos));
            }
        }
        let x = tape.gather_rows(&rows)?;
        let pe = tape.gather_rows(&pos_rows)?;
        let x = tape.add(x, pe)?;
        let h = Self::run_blocks(
            &mut tape,
            &p,
            &self.encoder,
            &self.encoder_norm,
            x,
            positions,
        )?;
        let pooled = tape.segment_mean(h, positions)?;
        let t = tape.value(pooled);
        Ok((0..windows.len())
            .map(|b| LatentVector(t.row(b).to_vec()))
            .collect())
    }

    /// Scores consecutive groups of `group_frames` frames (whole windows),
    /// padding a trailing partial group by repeating its last window.
    pub fn reconstruction_score(
        &self,
        windows: &[SensorWindow],
        group_frames: usize,
        seed: u64,
    ) -> Result<Vec<GroupScore>> {
        let nf = self.config.frames_per_window();
        let total_frames = windows.len() * nf;
        if total_frames < FRAME_GROUP || group_frames < FRAME_GROUP {
            return Err(Error::InvalidArgument(format!(
                "reconstruction scoring needs at least {FRAME_GROUP} consecutive frames \
                 (got {total_frames}, group size {group_frames})"
            )));
        }
        let per_group = group_frames.div_ceil(nf).max(1);
        let base = RngState::new(seed);
        let mut scores = Vec::with_capacity(windows.len().div_ceil(per_group));
        for (gi, chunk) in windows.chunks(per_group).enumerate() {
            let mut refs: Vec<&SensorWindow> = chunk.iter().collect();
            let padded = refs.len() < per_group;
            let last = refs[refs.len() - 1];
            refs.resize(per_group, last);
            let mut rng = base.derive(gi as u64);
            scores.push(GroupScore {
                start: gi * per_group,
                len: chunk.len(),
                padded,
                score: self.forward_loss(&refs, &mut rng)?,
            });
        }
        Ok(scores)
    }
}

/// Trains the autoencoder; returns per-epoch train and validation losses.
pub fn pretrain(
    model: &mut MaeModel,
    train: &[SensorWindow],
    validation: &[SensorWindow],
    config: &PretrainConfig,
    rng: &mut RngState,
) -> Result<TrainingCurve> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if validation.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let eval_seed = rng.derive(u64::MAX).seed();
    let initial_train = model.evaluate_loss(train, eval_seed)?;
    let mut curve = TrainingCurve {
        initial_train,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence {
                stage: "mae pretraining",
                epoch,
            },
            other => other,
        };
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let refs: Vec<&SensorWindow> = idx.iter().map(|&i| &train[i]).collect();
            model.store.zero_grad();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let loss = model
                .forward_loss_on(&mut tape, &p, &refs, rng)
                .map_err(diverged)?;
            let grads = tape.backward(loss).map_err(diverged)?;
            model.store.accumulate(&grads, &p);
            adam.step(&mut model.store).map_err(diverged)?;
            total += f64::from(tape.value(loss).item()) * refs.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let validation_loss = model
            .evaluate_loss(validation, eval_seed)
            .map_err(diverged)?;
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(Error::Divergence {
                stage: "mae pretraining",
                epoch,
            });
        }
        log::debug!("mae epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        curve.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            validation: validation_loss,
        });
    }
    // gradients are scratch space; a trained model carries none
    model.store.zero_grad();
    Ok(curve)
}
