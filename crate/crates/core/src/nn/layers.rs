use super::param::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::kernels;
use crate::error::Result;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut RngState,
    ) -> Self {
        let weight =
            store.add_fan_in_uniform(format!("{name}.weight"), &[inputs, outputs], inputs, rng);
        let bias = store.add_fan_in_uniform(format!("{name}.bias"), &[outputs], inputs, rng);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, p[self.weight], p[self.bias])
    }

    /// Tape-free forward over `rows` stacked inputs.
    pub fn infer(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out = kernels::matmul(x, store.value(self.weight), rows, self.inputs, self.outputs);
        kernels::add_row_inplace(&mut out, store.value(self.bias));
        out
    }
}

/// `x W + b`
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    tape.add_row(xw, bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_constant(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_constant(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngState,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, seg_len: usize) -> Result<Var> {
        multi_head_self_attention(
            tape,
            x,
            [
                (p[self.query.weight], p[self.query.bias]),
                (p[self.key.weight], p[self.key.bias]),
                (p[self.value.weight], p[self.value.bias]),
                (p[self.output.weight], p[self.output.bias]),
            ],
            self.heads,
            seg_len,
        )
    }
}

/// Multi-head self-attention over independent sequences of `seg_len` rows.
/// `proj` holds the (weight, bias) pairs for query, key, value and output.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    proj: [(Var, Var); 4],
    heads: usize,
    seg_len: usize,
) -> Result<Var> {
    let [(wq, bq), (wk, bk), (wv, bv), (wo, bo)] = proj;
    let q = linear(tape, x, wq, bq)?;
    let k = linear(tape, x, wk, bk)?;
    let v = linear(tape, x, wv, bv)?;
    let mixed = tape.attention(q, k, v, heads, seg_len)?;
    linear(tape, mixed, wo, bo)
}

/// Pre-norm transformer block: `h = x + attn(ln(x))`, `y = h + ff(ln(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, seg_len: usize) -> Result<Var> {
        let n1 = self.norm1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, n1, seg_len)?;
        let h = tape.add(x, a)?;
        let n2 = self.norm2.forward(tape, p, h)?;
        let f = self.ff_in.forward(tape, p, n2)?;
        let f = tape.gelu(f)?;
        let f = self.ff_out.forward(tape, p, f)?;
        tape.add(h, f)
    }
}
