//! Minimal dense-tensor and reverse-mode differentiation substrate.
//!
//! Only the pieces the masked autoencoder and the classifier head need:
//! linear maps, layer norm, GELU, softmax, segmented multi-head attention,
//! inverted dropout, masked MSE, cross-entropy and an Adam optimizer.
//! Values are `f32`; reductions accumulate in `f64`.

mod layers;
mod optim;
mod param;
mod tape;
mod tensor;

pub use layers::{
    linear, multi_head_self_attention, LayerNorm, Linear, SelfAttention, TransformerBlock,
};
pub use optim::{Adam, AdamConfig};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{dropout_mask, Gradients, Mode, Tape, Var};
pub use tensor::{kernels, Tensor};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Row-wise softmax over the last dimension of `logits`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let cols = logits.cols();
    let mut out = vec![0.0f32; logits.len()];
    for (src, dst) in logits.data().chunks(cols).zip(out.chunks_mut(cols)) {
        kernels::softmax_row(src, dst);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over masked rows of the squared L2 row difference.
pub fn mse_masked(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f32> {
    if !pred.same_shape(target) || mask.len() != pred.rows() {
        return Err(Error::shape("mse_masked", "pred/target/mask disagree"));
    }
    tape::masked_sq_error(pred, target, mask)
}

/// Inverted dropout on a plain tensor.
pub fn dropout_forward(x: &Tensor, rate: f32, mode: Mode, rng: &mut RngState) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}
