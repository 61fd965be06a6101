//! The transformer encoder, MLM head, and five survival heads.
//!
//! Pre-norm blocks: `x + attn(ln(x))`, `x + ffn(ln(x))`, with a final layer
//! norm after the stack. Type embeddings distinguish the demographic header
//! (type 0) from event frames (type 1). The MLM projection is untied from
//! the input embeddings. Each survival head is
//! `Linear -> ReLU -> Dropout -> BatchNorm`, twice, then `Linear -> scalar`.

use crate::phenomap::SEP_ID;
use crate::rng;
use crate::seqbuild::TokenSequence;
use crate::tensor::{batch_norm_eval_value, Element, NodeId, Tape, Tensor, TensorError};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const N_OUTCOME_HEADS: usize = 5;
pub const TYPE_COUNT: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("train-mode batch norm needs at least 2 rows, got {0}")]
    BatchTooSmallForTrainNorm(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    /// Widths of the two hidden survival-head layers.
    pub head_dims: (usize, usize),
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::table1(10_442)
    }
}

impl ModelConfig {
    /// The paper-scale profile.
    pub fn table1(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            intermediate: 3072,
            max_len: 2048,
            dropout_p: 0.1,
            head_dims: (256, 128),
            head_dropout: 0.2,
        }
    }

    /// CPU-friendly profile for end-to-end runs.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 4,
            intermediate: 128,
            max_len: 256,
            dropout_p: 0.1,
            head_dims: (64, 32),
            head_dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len == 0 || self.intermediate == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(0.0..1.0).contains(&self.head_dropout) {
            return Err(ModelError::InvalidConfig("dropout outside [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Exact trainable-parameter count (batch-norm running statistics are
/// buffers, not parameters).
pub fn count_parameters(config: &ModelConfig) -> u64 {
    let v = config.vocab_size as u64;
    let h = config.hidden as u64;
    let i = config.intermediate as u64;
    let (d1, d2) = (config.head_dims.0 as u64, config.head_dims.1 as u64);

    let embeddings = v * h + config.max_len as u64 * h + TYPE_COUNT as u64 * h;
    let per_layer = 2 * (2 * h)          // two layer norms
        + 4 * (h * h + h)                // q, k, v, output projections
        + (h * i + i) + (i * h + h); // feed-forward
    let final_norm = 2 * h;
    let mlm = h * v + v;
    let head = (h * d1 + d1) + 2 * d1 + (d1 * d2 + d2) + 2 * d2 + (d2 + 1);
    embeddings + config.layers as u64 * per_layer + final_norm + mlm
        + N_OUTCOME_HEADS as u64 * head
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub norm1: NormParams<T>,
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub o: LinearParams<T>,
    pub norm2: NormParams<T>,
    pub ffn1: LinearParams<T>,
    pub ffn2: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalHeadParams<T> {
    pub fc1: LinearParams<T>,
    pub bn1: BatchNormParams<T>,
    pub fc2: LinearParams<T>,
    pub bn2: BatchNormParams<T>,
    pub fc3: LinearParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub type_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: NormParams<T>,
    pub mlm_head: LinearParams<T>,
    pub heads: Vec<SurvivalHeadParams<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Visit every trainable parameter in canonical order.
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f("token_emb", &self.token_emb);
        f("pos_emb", &self.pos_emb);
        f("type_emb", &self.type_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |suffix: &str| format!("layer{i}.{suffix}");
            f(&p("norm1.gain"), &l.norm1.gain);
            f(&p("norm1.bias"), &l.norm1.bias);
            for (name, lin) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                f(&p(&format!("{name}.w")), &lin.w);
                f(&p(&format!("{name}.b")), &lin.b);
            }
            f(&p("norm2.gain"), &l.norm2.gain);
            f(&p("norm2.bias"), &l.norm2.bias);
            f(&p("ffn1.w"), &l.ffn1.w);
            f(&p("ffn1.b"), &l.ffn1.b);
            f(&p("ffn2.w"), &l.ffn2.w);
            f(&p("ffn2.b"), &l.ffn2.b);
        }
        f("final_norm.gain", &self.final_norm.gain);
        f("final_norm.bias", &self.final_norm.bias);
        f("mlm_head.w", &self.mlm_head.w);
        f("mlm_head.b", &self.mlm_head.b);
        for (i, h) in self.heads.iter().enumerate() {
            let p = |suffix: &str| format!("head{i}.{suffix}");
            f(&p("fc1.w"), &h.fc1.w);
            f(&p("fc1.b"), &h.fc1.b);
            f(&p("bn1.gain"), &h.bn1.gain);
            f(&p("bn1.bias"), &h.bn1.bias);
            f(&p("fc2.w"), &h.fc2.w);
            f(&p("fc2.b"), &h.fc2.b);
            f(&p("bn2.gain"), &h.bn2.gain);
            f(&p("bn2.bias"), &h.bn2.bias);
            f(&p("fc3.w"), &h.fc3.w);
            f(&p("fc3.b"), &h.fc3.b);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f("token_emb", &mut self.token_emb);
        f("pos_emb", &mut self.pos_emb);
        f("type_emb", &mut self.type_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{i}");
            f(&format!("{prefix}.norm1.gain"), &mut l.norm1.gain);
            f(&format!("{prefix}.norm1.bias"), &mut l.norm1.bias);
            for (name, lin) in
                [("q", &mut l.q), ("k", &mut l.k), ("v", &mut l.v), ("o", &mut l.o)]
            {
                f(&format!("{prefix}.{name}.w"), &mut lin.w);
                f(&format!("{prefix}.{name}.b"), &mut lin.b);
            }
            f(&format!("{prefix}.norm2.gain"), &mut l.norm2.gain);
            f(&format!("{prefix}.norm2.bias"), &mut l.norm2.bias);
            f(&format!("{prefix}.ffn1.w"), &mut l.ffn1.w);
            f(&format!("{prefix}.ffn1.b"), &mut l.ffn1.b);
            f(&format!("{prefix}.ffn2.w"), &mut l.ffn2.w);
            f(&format!("{prefix}.ffn2.b"), &mut l.ffn2.b);
        }
        f("final_norm.gain", &mut self.final_norm.gain);
        f("final_norm.bias", &mut self.final_norm.bias);
        f("mlm_head.w", &mut self.mlm_head.w);
        f("mlm_head.b", &mut self.mlm_head.b);
        for (i, h) in self.heads.iter_mut().enumerate() {
            let prefix = format!("head{i}");
            f(&format!("{prefix}.fc1.w"), &mut h.fc1.w);
            f(&format!("{prefix}.fc1.b"), &mut h.fc1.b);
            f(&format!("{prefix}.bn1.gain"), &mut h.bn1.gain);
            f(&format!("{prefix}.bn1.bias"), &mut h.bn1.bias);
            f(&format!("{prefix}.fc2.w"), &mut h.fc2.w);
            f(&format!("{prefix}.fc2.b"), &mut h.fc2.b);
            f(&format!("{prefix}.bn2.gain"), &mut h.bn2.gain);
            f(&format!("{prefix}.bn2.bias"), &mut h.bn2.bias);
            f(&format!("{prefix}.fc3.w"), &mut h.fc3.w);
            f(&format!("{prefix}.fc3.b"), &mut h.fc3.b);
        }
    }

    /// Visit the non-trainable buffers (batch-norm running statistics).
    pub fn for_each_buffer(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        for (i, h) in self.heads.iter().enumerate() {
            f(&format!("head{i}.bn1.running_mean"), &h.bn1.running_mean);
            f(&format!("head{i}.bn1.running_var"), &h.bn1.running_var);
            f(&format!("head{i}.bn2.running_mean"), &h.bn2.running_mean);
            f(&format!("head{i}.bn2.running_var"), &h.bn2.running_var);
        }
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head{i}.bn1.running_mean"), &mut h.bn1.running_mean);
            f(&format!("head{i}.bn1.running_var"), &mut h.bn1.running_var);
            f(&format!("head{i}.bn2.running_mean"), &mut h.bn2.running_mean);
            f(&format!("head{i}.bn2.running_var"), &mut h.bn2.running_var);
        }
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let lin = |l: &LinearParams<T>| LinearParams { w: l.w.cast(), b: l.b.cast() };
        let norm = |n: &NormParams<T>| NormParams { gain: n.gain.cast(), bias: n.bias.cast() };
        let bn = |b: &BatchNormParams<T>| BatchNormParams {
            gain: b.gain.cast(),
            bias: b.bias.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            token_emb: self.token_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            type_emb: self.type_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1: norm(&l.norm1),
                    q: lin(&l.q),
                    k: lin(&l.k),
                    v: lin(&l.v),
                    o: lin(&l.o),
                    norm2: norm(&l.norm2),
                    ffn1: lin(&l.ffn1),
                    ffn2: lin(&l.ffn2),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            mlm_head: lin(&self.mlm_head),
            heads: self
                .heads
                .iter()
                .map(|h| SurvivalHeadParams {
                    fc1: lin(&h.fc1),
                    bn1: bn(&h.bn1),
                    fc2: lin(&h.fc2),
                    bn2: bn(&h.bn2),
                    fc3: lin(&h.fc3),
                })
                .collect(),
        }
    }
}

/// Initialize parameters: truncated normal (std 0.02) for weight matrices
/// and embeddings, zeros for biases, ones for norm gains. Each tensor draws
/// from a stream derived from its name, so the result is independent of
/// visit order.
pub fn init_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let h = config.hidden;
    let lin = |inp: usize, out: usize| LinearParams {
        w: Tensor::zeros(&[inp, out]),
        b: Tensor::zeros(&[out]),
    };
    let norm = || NormParams { gain: Tensor::filled(&[h], T::ONE), bias: Tensor::zeros(&[h]) };
    let bn = |dim: usize| BatchNormParams {
        gain: Tensor::filled(&[dim], T::ONE),
        bias: Tensor::zeros(&[dim]),
        running_mean: Tensor::zeros(&[dim]),
        running_var: Tensor::filled(&[dim], T::ONE),
    };
    let (d1, d2) = config.head_dims;
    let mut params = ModelParams {
        config: config.clone(),
        token_emb: Tensor::zeros(&[config.vocab_size, h]),
        pos_emb: Tensor::zeros(&[config.max_len, h]),
        type_emb: Tensor::zeros(&[TYPE_COUNT, h]),
        layers: (0..config.layers)
            .map(|_| LayerParams {
                norm1: norm(),
                q: lin(h, h),
                k: lin(h, h),
                v: lin(h, h),
                o: lin(h, h),
                norm2: norm(),
                ffn1: lin(h, config.intermediate),
                ffn2: lin(config.intermediate, h),
            })
            .collect(),
        final_norm: norm(),
        mlm_head: lin(h, config.vocab_size),
        heads: (0..N_OUTCOME_HEADS)
            .map(|_| SurvivalHeadParams {
                fc1: lin(h, d1),
                bn1: bn(d1),
                fc2: lin(d1, d2),
                bn2: bn(d2),
                fc3: lin(d2, 1),
            })
            .collect(),
    };
    params.for_each_param_mut(&mut |name, tensor| {
        let is_weight =
            name.ends_with(".w") || matches!(name, "token_emb" | "pos_emb" | "type_emb");
        if is_weight {
            let mut r = rng::derive(seed, "model.init", name);
            tensor.fill_trunc_normal(&mut r, INIT_STD);
        }
    });
    Ok(params)
}

/// A batch of sequences padded to a common length, plus the derived type ids
/// (0 through the header's [SEP], 1 afterwards).
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub types: Vec<u32>,
}

pub fn pad_batch(seqs: &[&TokenSequence], max_len: usize) -> Result<PaddedBatch, ModelError> {
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if longest > max_len {
        return Err(ModelError::SequenceTooLong { len: longest, max: max_len });
    }
    let b = seqs.len();
    let l = longest.max(1);
    let mut ids = vec![crate::phenomap::PAD_ID; b * l];
    let mut mask = vec![false; b * l];
    let mut types = vec![0u32; b * l];
    for (row, seq) in seqs.iter().enumerate() {
        let mut seen_sep = false;
        for (col, &id) in seq.ids.iter().enumerate() {
            ids[row * l + col] = id;
            mask[row * l + col] = seq.attention_mask.get(col).copied().unwrap_or(true);
            types[row * l + col] = if seen_sep { 1 } else { 0 };
            if id == SEP_ID && !seen_sep {
                seen_sep = true;
            }
        }
    }
    Ok(PaddedBatch { batch: b, len: l, ids, mask, types })
}

// ---------------------------------------------------------------------------
// Tape bindings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundNorm {
    pub gain: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundBatchNorm {
    pub gain: NodeId,
    pub bias: NodeId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub norm1: BoundNorm,
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub o: BoundLinear,
    pub norm2: BoundNorm,
    pub ffn1: BoundLinear,
    pub ffn2: BoundLinear,
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    pub fc1: BoundLinear,
    pub bn1: BoundBatchNorm,
    pub fc2: BoundLinear,
    pub bn2: BoundBatchNorm,
    pub fc3: BoundLinear,
}

/// Model parameters registered as tape leaves for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub token_emb: NodeId,
    pub pos_emb: NodeId,
    pub type_emb: NodeId,
    pub layers: Vec<BoundLayer>,
    pub final_norm: BoundNorm,
    pub mlm_head: BoundLinear,
    pub heads: Vec<BoundHead>,
}

/// Register every parameter on the tape; `trainable` decides which leaves
/// accumulate gradients (frozen layers still run forward).
pub fn bind_model<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: &dyn Fn(&str) -> bool,
) -> BoundModel {
    bind_impl(tape, params, &mut |tape, name, t| tape.leaf(t.clone(), trainable(name)))
}

/// Like [`bind_model`] but parameters may resolve to pre-existing tape nodes
/// (the gradient checker binds its own leaves this way).
pub fn bind_model_with<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    existing: &dyn Fn(&str) -> Option<NodeId>,
) -> BoundModel {
    bind_impl(tape, params, &mut |tape, name, t| {
        existing(name).unwrap_or_else(|| tape.leaf(t.clone(), false))
    })
}

fn bind_linear<T: Element>(
    tape: &mut Tape<T>,
    prefix: &str,
    p: &LinearParams<T>,
    resolve: &mut dyn FnMut(&mut Tape<T>, &str, &Tensor<T>) -> NodeId,
) -> BoundLinear {
    BoundLinear {
        w: resolve(tape, &format!("{prefix}.w"), &p.w),
        b: resolve(tape, &format!("{prefix}.b"), &p.b),
    }
}

fn bind_impl<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    resolve: &mut dyn FnMut(&mut Tape<T>, &str, &Tensor<T>) -> NodeId,
) -> BoundModel {
    let stats = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64()).collect::<Vec<f64>>();

    let token_emb = resolve(tape, "token_emb", &params.token_emb);
    let pos_emb = resolve(tape, "pos_emb", &params.pos_emb);
    let type_emb = resolve(tape, "type_emb", &params.type_emb);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        layers.push(BoundLayer {
            norm1: BoundNorm {
                gain: resolve(tape, &format!("layer{i}.norm1.gain"), &l.norm1.gain),
                bias: resolve(tape, &format!("layer{i}.norm1.bias"), &l.norm1.bias),
            },
            q: bind_linear(tape, &format!("layer{i}.q"), &l.q, resolve),
            k: bind_linear(tape, &format!("layer{i}.k"), &l.k, resolve),
            v: bind_linear(tape, &format!("layer{i}.v"), &l.v, resolve),
            o: bind_linear(tape, &format!("layer{i}.o"), &l.o, resolve),
            norm2: BoundNorm {
                gain: resolve(tape, &format!("layer{i}.norm2.gain"), &l.norm2.gain),
                bias: resolve(tape, &format!("layer{i}.norm2.bias"), &l.norm2.bias),
            },
            ffn1: bind_linear(tape, &format!("layer{i}.ffn1"), &l.ffn1, resolve),
            ffn2: bind_linear(tape, &format!("layer{i}.ffn2"), &l.ffn2, resolve),
        });
    }
    let final_norm = BoundNorm {
        gain: resolve(tape, "final_norm.gain", &params.final_norm.gain),
        bias: resolve(tape, "final_norm.bias", &params.final_norm.bias),
    };
    let mlm_head = bind_linear(tape, "mlm_head", &params.mlm_head, resolve);
    let mut heads = Vec::with_capacity(params.heads.len());
    for (i, h) in params.heads.iter().enumerate() {
        heads.push(BoundHead {
            fc1: bind_linear(tape, &format!("head{i}.fc1"), &h.fc1, resolve),
            bn1: BoundBatchNorm {
                gain: resolve(tape, &format!("head{i}.bn1.gain"), &h.bn1.gain),
                bias: resolve(tape, &format!("head{i}.bn1.bias"), &h.bn1.bias),
                running_mean: stats(&h.bn1.running_mean),
                running_var: stats(&h.bn1.running_var),
            },
            fc2: bind_linear(tape, &format!("head{i}.fc2"), &h.fc2, resolve),
            bn2: BoundBatchNorm {
                gain: resolve(tape, &format!("head{i}.bn2.gain"), &h.bn2.gain),
                bias: resolve(tape, &format!("head{i}.bn2.bias"), &h.bn2.bias),
                running_mean: stats(&h.bn2.running_mean),
                running_var: stats(&h.bn2.running_var),
            },
            fc3: bind_linear(tape, &format!("head{i}.fc3"), &h.fc3, resolve),
        });
    }
    BoundModel { token_emb, pos_emb, type_emb, layers, final_norm, mlm_head, heads }
}

fn maybe_dropout<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    p: f64,
    mode: Mode,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> NodeId {
    match (mode, rng.as_deref_mut()) {
        (Mode::Train, Some(r)) if p > 0.0 => tape.dropout(x, p, r),
        _ => x,
    }
}

/// Run the encoder stack over a padded batch; returns `[batch, len, hidden]`
/// hidden states. Train mode needs an rng for dropout.
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    config: &ModelConfig,
    batch: &PaddedBatch,
    mode: Mode,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<NodeId, ModelError> {
    let (b, l) = (batch.batch, batch.len);
    let positions: Vec<u32> = (0..b).flat_map(|_| 0..l as u32).collect();
    let tok = tape.embed_lookup(bound.token_emb, &batch.ids, &[b, l])?;
    let pos = tape.embed_lookup(bound.pos_emb, &positions, &[b, l])?;
    let typ = tape.embed_lookup(bound.type_emb, &batch.types, &[b, l])?;
    let sum = tape.add(tok, pos)?;
    let mut x = tape.add(sum, typ)?;
    x = maybe_dropout(tape, x, config.dropout_p, mode, &mut rng);

    let scale = T::from_f64(1.0 / (config.head_dim() as f64).sqrt());
    for layer in &bound.layers {
        let h1 = tape.layer_norm(x, layer.norm1.gain, layer.norm1.bias, LAYER_NORM_EPS)?;
        let q = tape.linear(h1, layer.q.w, Some(layer.q.b))?;
        let k = tape.linear(h1, layer.k.w, Some(layer.k.b))?;
        let v = tape.linear(h1, layer.v.w, Some(layer.v.b))?;
        let qh = tape.split_heads(q, config.heads)?;
        let kh = tape.split_heads(k, config.heads)?;
        let vh = tape.split_heads(v, config.heads)?;
        let scores = tape.scaled_dot(qh, kh, scale)?;
        let mut probs = tape.masked_softmax_rows(scores, &batch.mask)?;
        probs = maybe_dropout(tape, probs, config.dropout_p, mode, &mut rng);
        let ctx = tape.attn_context(probs, vh)?;
        let merged = tape.merge_heads(ctx)?;
        let mut attn_out = tape.linear(merged, layer.o.w, Some(layer.o.b))?;
        attn_out = maybe_dropout(tape, attn_out, config.dropout_p, mode, &mut rng);
        x = tape.add(x, attn_out)?;

        let h2 = tape.layer_norm(x, layer.norm2.gain, layer.norm2.bias, LAYER_NORM_EPS)?;
        let f1 = tape.linear(h2, layer.ffn1.w, Some(layer.ffn1.b))?;
        let act = tape.gelu(f1);
        let mut f2 = tape.linear(act, layer.ffn2.w, Some(layer.ffn2.b))?;
        f2 = maybe_dropout(tape, f2, config.dropout_p, mode, &mut rng);
        x = tape.add(x, f2)?;
    }
    Ok(tape.layer_norm(x, bound.final_norm.gain, bound.final_norm.bias, LAYER_NORM_EPS)?)
}

/// Mean over real (unpadded) positions: `[b, l, h] -> [b, h]`.
pub fn mean_pool<T: Element>(
    tape: &mut Tape<T>,
    hidden: NodeId,
    batch: &PaddedBatch,
) -> Result<NodeId, ModelError> {
    Ok(tape.mean_pool_mask(hidden, &batch.mask)?)
}

/// Full-vocabulary MLM logits `[b, l, vocab]` (untied output projection).
pub fn mlm_logits<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    hidden: NodeId,
) -> Result<NodeId, ModelError> {
    Ok(tape.linear(hidden, bound.mlm_head.w, Some(bound.mlm_head.b))?)
}

/// Batch statistics recorded in train mode, to fold into running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct SurvivalOutput {
    /// One `[batch]` score node per outcome head.
    pub per_head: Vec<NodeId>,
    /// The same scores stacked as `[batch, 5]`.
    pub stacked: NodeId,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Run the five survival heads over pooled representations. In train mode
/// batch-norm uses batch statistics (batch >= 2 required) and the returned
/// stats update the running buffers; in eval mode it uses running statistics
/// and a single-row batch is fine.
pub fn survival_scores<T: Element>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    pooled: NodeId,
    head_dropout: f64,
    mode: Mode,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<SurvivalOutput, ModelError> {
    let batch = tape.value(pooled).shape()[0];
    if mode == Mode::Train && batch < 2 {
        return Err(ModelError::BatchTooSmallForTrainNorm(batch));
    }
    let mut per_head = Vec::with_capacity(bound.heads.len());
    let mut bn_stats = Vec::new();
    for (i, head) in bound.heads.iter().enumerate() {
        let mut x = pooled;
        for (stage, (lin, bn)) in
            [(&head.fc1, &head.bn1), (&head.fc2, &head.bn2)].iter().enumerate()
        {
            let z = tape.linear(x, lin.w, Some(lin.b))?;
            let a = tape.relu(z);
            let d = maybe_dropout(tape, a, head_dropout, mode, &mut rng);
            x = match mode {
                Mode::Train => {
                    let (mean, var) = tape.batch_stats(d);
                    let out =
                        tape.batch_norm(d, bn.gain, bn.bias, &mean, &var, BATCH_NORM_EPS, true)?;
                    bn_stats.push(BnBatchStats {
                        name: format!("head{i}.bn{}", stage + 1),
                        mean,
                        var,
                    });
                    out
                }
                Mode::Eval => tape.batch_norm(
                    d,
                    bn.gain,
                    bn.bias,
                    &bn.running_mean,
                    &bn.running_var,
                    BATCH_NORM_EPS,
                    false,
                )?,
            };
        }
        let score = tape.linear(x, head.fc3.w, Some(head.fc3.b))?;
        let flat = tape.reshape(score, &[batch])?;
        per_head.push(flat);
    }
    let stacked = tape.stack_cols(&per_head)?;
    Ok(SurvivalOutput { per_head, stacked, bn_stats })
}

/// Fold recorded batch statistics into the running buffers
/// (`running = (1 - momentum) * running + momentum * batch`).
pub fn apply_bn_updates<T: Element>(params: &mut ModelParams<T>, stats: &[BnBatchStats]) {
    let m = BATCH_NORM_MOMENTUM;
    for s in stats {
        let (head_idx, which) = parse_bn_name(&s.name);
        let head = &mut params.heads[head_idx];
        let bn = if which == 1 { &mut head.bn1 } else { &mut head.bn2 };
        for (i, (&bm, &bv)) in s.mean.iter().zip(&s.var).enumerate() {
            let rm = bn.running_mean.data()[i].to_f64();
            let rv = bn.running_var.data()[i].to_f64();
            bn.running_mean.data_mut()[i] = T::from_f64((1.0 - m) * rm + m * bm);
            bn.running_var.data_mut()[i] = T::from_f64((1.0 - m) * rv + m * bv);
        }
    }
}

fn parse_bn_name(name: &str) -> (usize, usize) {
    // "head{i}.bn{1|2}"
    let head_idx: usize = name[4..name.find('.').expect("dot")].parse().expect("head index");
    let which: usize = name[name.len() - 1..].parse().expect("bn index");
    (head_idx, which)
}

/// Convenience eval path: encode, pool, and score a batch of sequences
/// without gradient bookkeeping. Returns the `[batch, 5]` score matrix.
pub fn score_sequences(
    params: &ModelParams<f32>,
    seqs: &[&TokenSequence],
) -> Result<Tensor<f32>, ModelError> {
    let batch = pad_batch(seqs, params.config.max_len)?;
    let mut tape = Tape::<f32>::new();
    let bound = bind_model(&mut tape, params, &|_| false);
    let hidden = encode(&mut tape, &bound, &params.config, &batch, Mode::Eval, None)?;
    let pooled = mean_pool(&mut tape, hidden, &batch)?;
    let out = survival_scores(&mut tape, &bound, pooled, 0.0, Mode::Eval, None)?;
    Ok(tape.value(out.stacked).clone())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub rng_seed: u64,
    /// Optimizer step counter; diverges from `step` only when batches were
    /// skipped for having no maskable positions.
    #[serde(default)]
    pub opt_t: u64,
    pub params: Vec<ManifestEntry>,
}

/// Optimizer moments and any other named tensors stored beside parameters.
pub type NamedTensors = BTreeMap<String, Tensor<f32>>;

pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub step: u64,
    pub rng_seed: u64,
    pub opt_t: u64,
    pub opt_m: NamedTensors,
    pub opt_v: NamedTensors,
}

fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn tensor_from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Tensor<f32>, ModelError> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(ModelError::Checkpoint(format!(
            "blob holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            n * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape.to_vec(), data).expect("checked length"))
}

/// Write a checkpoint directory: `manifest.json` plus one raw little-endian
/// f32 blob per tensor. The directory is staged and renamed, so a partial
/// write never shadows a good checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    step: u64,
    rng_seed: u64,
    opt_t: u64,
    opt_m: &NamedTensors,
    opt_v: &NamedTensors,
) -> Result<(), ModelError> {
    let staging = dir.with_extension("staging");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
    let mut add = |name: &str, kind: &str, t: &Tensor<f32>| {
        let file = format!("t{:04}.bin", entries.len());
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file: file.clone(),
            kind: kind.to_string(),
        });
        blobs.push((file, tensor_to_bytes(t)));
    };
    params.for_each_param(&mut |name, t| add(name, "param", t));
    params.for_each_buffer(&mut |name, t| add(name, "buffer", t));
    for (name, t) in opt_m {
        add(name, "opt_m", t);
    }
    for (name, t) in opt_v {
        add(name, "opt_v", t);
    }

    let manifest = CheckpointManifest {
        format_version: 1,
        config: params.config.clone(),
        step,
        rng_seed,
        opt_t,
        params: entries,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest_bytes.push(b'\n');
    std::fs::write(staging.join("manifest.json"), manifest_bytes)?;
    for (file, bytes) in blobs {
        std::fs::write(staging.join(file), bytes)?;
    }

    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&staging, dir)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(ModelError::Checkpoint(format!("no manifest at {}", dir.display())));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(&manifest_path)?)
            .map_err(|e| ModelError::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != 1 {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut by_kind: BTreeMap<(String, String), Tensor<f32>> = BTreeMap::new();
    for entry in &manifest.params {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let tensor = tensor_from_bytes(&entry.shape, &bytes)?;
        by_kind.insert((entry.kind.clone(), entry.name.clone()), tensor);
    }

    let mut params: ModelParams<f32> = init_model(&manifest.config, 0)?;
    let mut missing: Vec<String> = Vec::new();
    params.for_each_param_mut(&mut |name, t| {
        match by_kind.remove(&("param".to_string(), name.to_string())) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    params.for_each_buffer_mut(&mut |name, t| {
        match by_kind.remove(&("buffer".to_string(), name.to_string())) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(ModelError::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    let mut opt_m = NamedTensors::new();
    let mut opt_v = NamedTensors::new();
    for ((kind, name), tensor) in by_kind {
        match kind.as_str() {
            "opt_m" => {
                opt_m.insert(name, tensor);
            }
            "opt_v" => {
                opt_v.insert(name, tensor);
            }
            _ => {}
        }
    }
    Ok(Checkpoint {
        params,
        step: manifest.step,
        rng_seed: manifest.rng_seed,
        opt_t: manifest.opt_t,
        opt_m,
        opt_v,
    })
}

/// Pull the running-stat eval transform out for scoring paths that build the
/// head entirely from values (used in tests to cross-check the tape path).
pub fn head_scores_eval_value(
    params: &ModelParams<f32>,
    head_idx: usize,
    pooled: &Tensor<f32>,
) -> Tensor<f32> {
    let head = &params.heads[head_idx];
    let mut x = pooled.clone();
    for (lin, bn) in [(&head.fc1, &head.bn1), (&head.fc2, &head.bn2)] {
        let rows = x.leading();
        let k = x.last_dim();
        let n = lin.w.shape()[1];
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(lin.b.data());
        }
        crate::tensor::matmul_into(rows, k, n, x.data(), lin.w.data(), &mut data);
        for v in &mut data {
            *v = v.max(0.0);
        }
        let z = Tensor::new(vec![rows, n], data).expect("shape");
        x = batch_norm_eval_value(&z, &bn.gain, &bn.bias, &bn.running_mean, &bn.running_var, BATCH_NORM_EPS);
    }
    let rows = x.leading();
    let k = x.last_dim();
    let mut data = Vec::with_capacity(rows);
    for _ in 0..rows {
        data.extend_from_slice(head.fc3.b.data());
    }
    crate::tensor::matmul_into(rows, k, 1, x.data(), head.fc3.w.data(), &mut data);
    Tensor::new(vec![rows], data).expect("shape")
}
