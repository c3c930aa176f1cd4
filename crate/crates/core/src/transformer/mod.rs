//! Decoder-only transformer over daily feature windows.
//!
//! A window of `seq_len` days by `n_channels` inputs is projected to
//! `d_model`, offset by learned position embeddings, and passed through
//! `n_blocks` blocks. Each block computes causal self-attention with an output
//! projection and a residual connection, then dropout, ReLU and layer
//! normalization. The representation at the last day feeds a linear head with
//! one output (regression) or two logits (classification).

mod params;

use rand::Rng;

use crate::ndgrad::{Float, GradError, Mode, Tape, Tensor, Var};

pub use params::{BlockVars, BoundParams, ModelParams, ParamGroup, Parameter, Trainable, INIT_STD};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Regression,
    Classification,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Regression => 1,
            HeadKind::Classification => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Regression => "regression",
            HeadKind::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(HeadKind::Regression),
            "classification" => Some(HeadKind::Classification),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub n_channels: usize,
    pub dropout_p: f64,
    pub head_kind: HeadKind,
    /// Residual connection around the attention sublayer.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            d_model: 64,
            n_heads: 1,
            seq_len: 10,
            n_channels: 6,
            dropout_p: 0.1,
            head_kind: HeadKind::Regression,
            residual: true,
        }
    }
}

impl ModelConfig {
    /// Full-width configuration (`d_model = 2048`).
    pub fn full_width() -> Self {
        Self {
            d_model: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_blocks == 0 {
            return fail("n_blocks must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.seq_len < 2 {
            return fail(format!("seq_len {} must be at least 2", self.seq_len));
        }
        if self.n_channels == 0 {
            return fail("n_channels must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("model has a {found} head but the task needs {expected}")]
    HeadMismatch { expected: &'static str, found: &'static str },
    #[error("window batch shape {found:?} does not match [batch, {seq_len}, {n_channels}]")]
    WindowShape {
        found: Vec<usize>,
        seq_len: usize,
        n_channels: usize,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
}

fn linear<T: Float>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var, GradError> {
    let h = tape.matmul(x, w)?;
    tape.add_broadcast(h, b)
}

/// Projects `[batch, seq_len, n_channels]` windows row by row and adds the
/// position embeddings: `out[t] = window[t] W_in + b_in + pos[t]`.
pub fn embed<T: Float>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &ModelConfig,
    windows: Var,
) -> Result<Var, ModelError> {
    let shape = tape.value(windows).shape().to_vec();
    if shape.len() != 3 || shape[1] != config.seq_len || shape[2] != config.n_channels {
        return Err(ModelError::WindowShape {
            found: shape,
            seq_len: config.seq_len,
            n_channels: config.n_channels,
        });
    }
    let batch = shape[0];
    let flat = tape.reshape(windows, &[batch * config.seq_len, config.n_channels])?;
    let h = linear(tape, flat, bound.input_projection())?;
    let h = tape.reshape(h, &[batch, config.seq_len, config.d_model])?;
    Ok(tape.add_broadcast(h, bound.position_embeddings())?)
}

/// `softmax(Q K^T / sqrt(d_k)) V` over `[groups, seq, d_k]` inputs; with
/// `causal`, position `i` only attends to positions `j <= i`.
pub fn attention<T: Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var, GradError> {
    let d_k = *tape.value(q).shape().last().ok_or(GradError::InvalidShape(vec![]))?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::from_f64(1.0 / (d_k as f64).sqrt()))?;
    let weights = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax(scores, 2)?
    };
    tape.batch_matmul(weights, v, false)
}

/// One block: `LayerNorm(ReLU(dropout(x + W_O attention(x W_Q, x W_K, x W_V))))`.
pub fn block_forward<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    block: &BlockVars,
    config: &ModelConfig,
    x: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, GradError> {
    let shape = tape.value(x).shape().to_vec();
    let (batch, seq) = (shape[0], shape[1]);
    let heads = config.n_heads;
    let flat = tape.reshape(x, &[batch * seq, config.d_model])?;
    let q = linear(tape, flat, block.query)?;
    let k = linear(tape, flat, block.key)?;
    let v = linear(tape, flat, block.value)?;
    let q = tape.split_heads(q, batch, seq, heads)?;
    let k = tape.split_heads(k, batch, seq, heads)?;
    let v = tape.split_heads(v, batch, seq, heads)?;
    let context = attention(tape, q, k, v, true)?;
    let context = tape.merge_heads(context, batch, heads)?;
    let mut h = linear(tape, context, block.output)?;
    if config.residual {
        h = tape.add(flat, h)?;
    }
    let h = tape.dropout(h, config.dropout_p, mode, rng)?;
    let h = tape.relu(h)?;
    let h = tape.layer_norm(h, block.gamma, block.beta, LAYER_NORM_EPS)?;
    tape.reshape(h, &[batch, seq, config.d_model])
}

/// Backbone output at the last position, `[batch, d_model]`.
pub fn encode<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &ModelConfig,
    windows: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let mut h = embed(tape, bound, config, windows)?;
    for b in 0..bound.n_blocks() {
        h = block_forward(tape, &bound.block(b), config, h, mode, rng)?;
    }
    Ok(tape.select_position(h, config.seq_len - 1)?)
}

/// Full model: `[batch]` predictions for a regression head, `[batch, 2]`
/// logits for a classification head.
pub fn forward<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &ModelConfig,
    windows: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let rep = encode(tape, bound, config, windows, mode, rng)?;
    let out = linear(tape, rep, bound.head())?;
    match config.head_kind {
        HeadKind::Regression => {
            let batch = tape.value(out).shape()[0];
            Ok(tape.reshape(out, &[batch])?)
        }
        HeadKind::Classification => Ok(out),
    }
}

/// Checks that `params` carries the head a task needs.
pub fn expect_head<T: Float>(params: &ModelParams<T>, expected: HeadKind) -> Result<(), ModelError> {
    let found = params.config().head_kind;
    if found != expected {
        return Err(ModelError::HeadMismatch {
            expected: expected.as_str(),
            found: found.as_str(),
        });
    }
    Ok(())
}

/// Evaluation-mode outputs without recording gradients.
pub fn predict<T: Float>(params: &ModelParams<T>, windows: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, Trainable::Nothing)?;
    let input = tape.constant(windows.clone())?;
    // Eval mode never draws from the generator.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = forward(&mut tape, &bound, params.config(), input, Mode::Eval, &mut rng)?;
    Ok(tape.value(out).clone())
}

/// Positive-class probabilities from `[batch, 2]` logits.
pub fn positive_probabilities<T: Float>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .chunks_exact(2)
        .map(|row| {
            let (a, b) = (row[0].as_f64(), row[1].as_f64());
            let max = a.max(b);
            let (ea, eb) = ((a - max).exp(), (b - max).exp());
            eb / (ea + eb)
        })
        .collect()
}
