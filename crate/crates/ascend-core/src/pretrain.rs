//! Masked-token pretraining: masking policy, AdamW with linear warmup and
//! linear decay, global-norm clipping, and the step loop.
//!
//! Every random draw derives from `(seed, domain, step-or-epoch)`, so a run
//! resumed from a checkpoint replays bit-identically, and validation masks
//! are fixed across steps so the numbers are comparable over time.

use crate::model::{
    self, bind_model, load_checkpoint, save_checkpoint, Checkpoint, Mode, ModelConfig,
    ModelError, ModelParams, NamedTensors,
};
use crate::phenomap::{Vocabulary, MASK_ID};
use crate::rng;
use crate::seqbuild::TokenSequence;
use crate::tensor::{Tape, Tensor, TensorError};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Label value marking unmasked (ignored) positions.
pub const IGNORE_LABEL: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("sequence has no maskable positions")]
    NoMaskablePositions,
    #[error("no labeled positions in batch")]
    NoLabeledPositions,
    #[error("non-finite gradient at step {step} in {name}")]
    NonFiniteGradient { step: u64, name: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub mask_rate: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { mask_rate: 0.15, p_mask: 0.8, p_random: 0.1, p_keep: 0.1 }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(PretrainError::InvalidConfig("mask_rate outside [0,1]".into()));
        }
        let sum = self.p_mask + self.p_random + self.p_keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PretrainError::InvalidConfig(format!(
                "replacement probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub total_steps: u64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_peak: 1e-4,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            total_steps: 50_000,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.warmup_steps > self.total_steps {
            return Err(PretrainError::InvalidConfig(
                "warmup_steps exceeds total_steps".into(),
            ));
        }
        if self.lr_peak <= 0.0 || self.batch_size == 0 {
            return Err(PretrainError::InvalidConfig("non-positive optimizer setting".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak` at `warmup_steps`, then linear decay to zero
/// at `total_steps`. Continuous and piecewise linear.
pub fn lr_at(step: u64, config: &OptimizerConfig) -> f64 {
    let s = step.min(config.total_steps) as f64;
    let warmup = config.warmup_steps as f64;
    let total = config.total_steps as f64;
    if s < warmup {
        config.lr_peak * s / warmup.max(1.0)
    } else if total > warmup {
        config.lr_peak * (total - s) / (total - warmup)
    } else {
        0.0
    }
}

/// One sequence after masking: model inputs plus aligned labels carrying the
/// original ids at selected positions and [`IGNORE_LABEL`] elsewhere.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    pub labels: Vec<u32>,
}

/// Apply the masking policy to one sequence: `k = max(1, round(rate * m))`
/// positions are drawn without replacement from the `m` maskable ones; each
/// becomes [MASK] with `p_mask`, a random non-special id with `p_random`, or
/// stays unchanged with `p_keep`.
pub fn mask_sequence(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    rng: &mut ChaCha20Rng,
    policy: &MaskPolicy,
) -> Result<MaskedSequence, PretrainError> {
    let maskable: Vec<usize> =
        seq.maskable.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if maskable.is_empty() {
        return Err(PretrainError::NoMaskablePositions);
    }
    let m = maskable.len();
    let k = ((policy.mask_rate * m as f64).round() as usize).clamp(1, m);

    // partial Fisher-Yates: the first k entries are the selection
    let mut pool = maskable;
    for i in 0..k {
        let j = i + rng::below(rng, (m - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut chosen: Vec<usize> = pool[..k].to_vec();
    chosen.sort_unstable();

    let mut ids = seq.ids.clone();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    let non_special = vocab.len() as u64 - 5;
    for &pos in &chosen {
        labels[pos] = ids[pos];
        let u = rng::unit_f64(rng);
        if u < policy.p_mask {
            ids[pos] = MASK_ID;
        } else if u < policy.p_mask + policy.p_random {
            ids[pos] = 5 + rng::below(rng, non_special) as u32;
        }
    }
    Ok(MaskedSequence { ids, labels })
}

/// Mask a batch; sequences without maskable positions are skipped and
/// reported in `skipped`.
pub struct MaskedBatch {
    pub sequences: Vec<TokenSequence>,
    pub labels: Vec<Vec<u32>>,
    pub skipped: usize,
}

pub fn mask_batch(
    seqs: &[&TokenSequence],
    vocab: &Vocabulary,
    rng: &mut ChaCha20Rng,
    policy: &MaskPolicy,
) -> MaskedBatch {
    let mut out = MaskedBatch { sequences: Vec::new(), labels: Vec::new(), skipped: 0 };
    for seq in seqs {
        match mask_sequence(seq, vocab, rng, policy) {
            Ok(masked) => {
                let mut clone = (*seq).clone();
                clone.ids = masked.ids;
                out.sequences.push(clone);
                out.labels.push(masked.labels);
            }
            Err(PretrainError::NoMaskablePositions) => out.skipped += 1,
            Err(_) => unreachable!("mask_sequence only fails on empty maskable set"),
        }
    }
    out
}

/// Mean cross-entropy and top-1/top-5 accuracy over labeled rows.
///
/// `logits` is `[rows, vocab]` with one label per row; rows labeled
/// [`IGNORE_LABEL`] are excluded. Ties in logits resolve in the label's
/// favor only when fewer than k logits are strictly greater.
pub fn mlm_loss_and_accuracy(
    logits: &Tensor<f32>,
    labels: &[u32],
) -> Result<(f64, f64, f64), PretrainError> {
    let v = logits.last_dim();
    if logits.leading() != labels.len() {
        return Err(PretrainError::InvalidConfig(format!(
            "{} logit rows vs {} labels",
            logits.leading(),
            labels.len()
        )));
    }
    let mut n = 0usize;
    let mut loss = 0.0f64;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &label) in logits.data().chunks(v).zip(labels) {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        n += 1;
        let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let sum: f64 = row.iter().map(|&x| ((x as f64) - mx).exp()).sum();
        loss += mx + sum.ln() - row[label] as f64;
        let target = row[label];
        let greater = row.iter().filter(|&&x| x > target).count();
        if greater == 0 {
            top1 += 1;
        }
        if greater < 5 {
            top5 += 1;
        }
    }
    if n == 0 {
        return Err(PretrainError::NoLabeledPositions);
    }
    Ok((loss / n as f64, top1 as f64 / n as f64, top5 as f64 / n as f64))
}

/// First/second-moment state for AdamW, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

/// Weight decay applies to weight matrices and embeddings but never to
/// biases or norm gains.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".gain"))
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    for g in grads.values() {
        for &x in g.data() {
            sum_sq += (x as f64) * (x as f64);
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Decoupled-weight-decay Adam update with bias correction. Gradients must
/// be finite; parameter entries without a gradient are left untouched.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<(), PretrainError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(PretrainError::NonFiniteGradient { step: state.t, name: name.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = config.beta1 as f32;
    let b2 = config.beta2 as f32;
    let bc1 = 1.0 - (config.beta1).powi(t);
    let bc2 = 1.0 - (config.beta2).powi(t);
    let eps = config.epsilon as f32;
    let lr32 = lr as f32;

    params.for_each_param_mut(&mut |name, tensor| {
        let Some(g) = grads.get(name) else { return };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(tensor.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(tensor.shape()));
        let wd = if decays(name) { (config.weight_decay * lr) as f32 } else { 0.0 };
        for i in 0..tensor.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1 as f32;
            let v_hat = vi / bc2 as f32;
            let p = tensor.data()[i];
            tensor.data_mut()[i] = p - lr32 * m_hat / (v_hat.sqrt() + eps) - wd * p;
        }
    });
    Ok(())
}

/// Everything one optimization step needs to know about itself.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub masked_positions: usize,
    pub grad_norm: f64,
}

/// Run one masked-LM training step over the given sequences. Masking and
/// dropout streams derive from `(seed, step)`.
pub fn mlm_train_step(
    params: &mut ModelParams<f32>,
    seqs: &[&TokenSequence],
    vocab: &Vocabulary,
    policy: &MaskPolicy,
    opt: &OptimizerConfig,
    state: &mut AdamState,
    trainable: &dyn Fn(&str) -> bool,
    step: u64,
    seed: u64,
) -> Result<Option<StepStats>, PretrainError> {
    let mut mask_rng = rng::derive_n(seed, "pretrain.mask", step);
    let masked = mask_batch(seqs, vocab, &mut mask_rng, policy);
    if masked.sequences.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&TokenSequence> = masked.sequences.iter().collect();
    let batch = model::pad_batch(&refs, params.config.max_len)?;

    // flat (row-major) positions with labels, in the padded grid
    let l = batch.len;
    let mut rows: Vec<usize> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (r, seq_labels) in masked.labels.iter().enumerate() {
        for (c, &label) in seq_labels.iter().enumerate() {
            if label != IGNORE_LABEL {
                rows.push(r * l + c);
                labels.push(label as usize);
            }
        }
    }
    if rows.is_empty() {
        return Err(PretrainError::NoLabeledPositions);
    }

    let mut tape = Tape::<f32>::new();
    let bound = bind_model(&mut tape, params, trainable);
    let mut dropout_rng = rng::derive_n(seed, "pretrain.dropout", step);
    let hidden = model::encode(
        &mut tape,
        &bound,
        &params.config,
        &batch,
        Mode::Train,
        Some(&mut dropout_rng),
    )?;
    let flat = tape.reshape(hidden, &[batch.batch * l, params.config.hidden])?;
    let picked = tape.gather_rows(flat, &rows)?;
    let logits = tape.linear(picked, bound.mlm_head.w, Some(bound.mlm_head.b))?;
    let loss_node = tape.cross_entropy_rows(logits, &labels)?;
    let loss = tape.value(loss_node).item() as f64;
    if !loss.is_finite() {
        return Err(PretrainError::NonFiniteLoss { step });
    }

    let mut grads_by_id = tape.backward(loss_node)?;
    let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut collect = |name: &str, id: crate::tensor::NodeId| {
        if let Some(g) = grads_by_id.take(id) {
            grads.insert(name.to_string(), g);
        }
    };
    collect("token_emb", bound.token_emb);
    collect("pos_emb", bound.pos_emb);
    collect("type_emb", bound.type_emb);
    for (i, layer) in bound.layers.iter().enumerate() {
        collect(&format!("layer{i}.norm1.gain"), layer.norm1.gain);
        collect(&format!("layer{i}.norm1.bias"), layer.norm1.bias);
        for (n, lin) in [("q", &layer.q), ("k", &layer.k), ("v", &layer.v), ("o", &layer.o)] {
            collect(&format!("layer{i}.{n}.w"), lin.w);
            collect(&format!("layer{i}.{n}.b"), lin.b);
        }
        collect(&format!("layer{i}.norm2.gain"), layer.norm2.gain);
        collect(&format!("layer{i}.norm2.bias"), layer.norm2.bias);
        collect(&format!("layer{i}.ffn1.w"), layer.ffn1.w);
        collect(&format!("layer{i}.ffn1.b"), layer.ffn1.b);
        collect(&format!("layer{i}.ffn2.w"), layer.ffn2.w);
        collect(&format!("layer{i}.ffn2.b"), layer.ffn2.b);
    }
    collect("final_norm.gain", bound.final_norm.gain);
    collect("final_norm.bias", bound.final_norm.bias);
    collect("mlm_head.w", bound.mlm_head.w);
    collect("mlm_head.b", bound.mlm_head.b);

    let grad_norm = clip_global_norm(&mut grads, opt.clip_norm);
    let lr = lr_at(step, opt);
    adamw_step(params, &grads, state, opt, lr)?;
    Ok(Some(StepStats { loss, masked_positions: rows.len(), grad_norm }))
}

/// Deterministically masked evaluation over a sequence set: mean loss,
/// top-1, top-5. Masks derive from `(seed, domain, sequence index)`, so the
/// same positions are measured on every call.
pub fn mlm_evaluate(
    params: &ModelParams<f32>,
    seqs: &[TokenSequence],
    vocab: &Vocabulary,
    policy: &MaskPolicy,
    seed: u64,
    domain: &str,
    batch_size: usize,
    max_batches: usize,
) -> Result<(f64, f64, f64), PretrainError> {
    let mut total_loss = 0.0;
    let mut total_top1 = 0.0;
    let mut total_top5 = 0.0;
    let mut total_n = 0usize;
    for (bi, chunk) in seqs.chunks(batch_size).take(max_batches).enumerate() {
        let mut mask_rng = rng::derive(seed, domain, &bi.to_string());
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let masked = mask_batch(&refs, vocab, &mut mask_rng, policy);
        if masked.sequences.is_empty() {
            continue;
        }
        let mrefs: Vec<&TokenSequence> = masked.sequences.iter().collect();
        let batch = model::pad_batch(&mrefs, params.config.max_len)?;
        let l = batch.len;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (r, seq_labels) in masked.labels.iter().enumerate() {
            for (c, &label) in seq_labels.iter().enumerate() {
                if label != IGNORE_LABEL {
                    rows.push(r * l + c);
                    labels.push(label);
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let mut tape = Tape::<f32>::new();
        let bound = bind_model(&mut tape, params, &|_| false);
        let hidden =
            model::encode(&mut tape, &bound, &params.config, &batch, Mode::Eval, None)?;
        let flat = tape.reshape(hidden, &[batch.batch * l, params.config.hidden])?;
        let picked = tape.gather_rows(flat, &rows)?;
        let logits = tape.linear(picked, bound.mlm_head.w, Some(bound.mlm_head.b))?;
        let (loss, top1, top5) = mlm_loss_and_accuracy(tape.value(logits), &labels)?;
        let n = labels.len();
        total_loss += loss * n as f64;
        total_top1 += top1 * n as f64;
        total_top5 += top5 * n as f64;
        total_n += n;
    }
    if total_n == 0 {
        return Err(PretrainError::NoLabeledPositions);
    }
    Ok((
        total_loss / total_n as f64,
        total_top1 / total_n as f64,
        total_top5 / total_n as f64,
    ))
}

/// One metrics-log row; optional fields fill only on validation steps.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub seed: u64,
    pub log_every: u64,
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub max_val_batches: usize,
    /// Stop early once the fixed train probe reaches this top-1 accuracy.
    pub target_train_top1: Option<f64>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            seed: 42,
            log_every: 50,
            val_every: 500,
            checkpoint_every: 1000,
            max_val_batches: 8,
            target_train_top1: None,
        }
    }
}

pub struct PretrainResult {
    pub params: ModelParams<f32>,
    pub state: AdamState,
    pub metrics: Vec<MetricsRow>,
    pub final_step: u64,
    /// Top-1 accuracy of the fixed train probe at the last evaluation.
    pub train_top1: Option<f64>,
}

/// The pretraining loop: shuffled epochs, per-step masking, forward,
/// backward, clip, AdamW, periodic validation and checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loop(
    train: &[TokenSequence],
    val: &[TokenSequence],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    opt: &OptimizerConfig,
    policy: &MaskPolicy,
    options: &PretrainOptions,
    checkpoint_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<PretrainResult, PretrainError> {
    opt.validate()?;
    policy.validate()?;
    if train.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    let (mut params, mut state, start_step) = match resume {
        Some(ckpt) => {
            let state = AdamState { t: ckpt.opt_t, m: ckpt.opt_m, v: ckpt.opt_v };
            (ckpt.params, state, ckpt.step)
        }
        None => (init_fresh(model_config, options.seed)?, AdamState::default(), 0),
    };

    let steps_per_epoch = train.len().div_ceil(opt.batch_size) as u64;
    let trainable = |name: &str| !name.starts_with("head");
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut loss_accum = 0.0;
    let mut loss_count = 0u64;
    let mut train_top1 = None;

    let mut step = start_step;
    while step < opt.total_steps {
        let epoch = step / steps_per_epoch;
        let within = (step % steps_per_epoch) as usize;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::derive_n(options.seed, "pretrain.shuffle", epoch);
        rng::shuffle(&mut shuffle_rng, &mut order);
        let lo = within * opt.batch_size;
        let hi = (lo + opt.batch_size).min(train.len());
        let batch_refs: Vec<&TokenSequence> = order[lo..hi].iter().map(|&i| &train[i]).collect();

        let stats = mlm_train_step(
            &mut params,
            &batch_refs,
            vocab,
            policy,
            opt,
            &mut state,
            &trainable,
            step,
            options.seed,
        )?;
        step += 1;
        if let Some(s) = stats {
            loss_accum += s.loss;
            loss_count += 1;
        }

        let should_log = step % options.log_every == 0 || step == opt.total_steps;
        let should_val = step % options.val_every == 0 || step == opt.total_steps;
        if should_log || should_val {
            let train_loss =
                if loss_count > 0 { loss_accum / loss_count as f64 } else { f64::NAN };
            let mut row = MetricsRow {
                step,
                lr: lr_at(step, opt),
                train_loss,
                val_loss: None,
                top1: None,
                top5: None,
            };
            if should_val && !val.is_empty() {
                let (vl, t1, t5) = mlm_evaluate(
                    &params,
                    val,
                    vocab,
                    policy,
                    options.seed,
                    "pretrain.valmask",
                    opt.batch_size,
                    options.max_val_batches,
                )?;
                row.val_loss = Some(vl);
                row.top1 = Some(t1);
                row.top5 = Some(t5);
            }
            if should_val {
                if let Some(target) = options.target_train_top1 {
                    let (_, t1, _) = mlm_evaluate(
                        &params,
                        train,
                        vocab,
                        policy,
                        options.seed,
                        "pretrain.probemask",
                        opt.batch_size,
                        options.max_val_batches,
                    )?;
                    train_top1 = Some(t1);
                    if t1 >= target {
                        metrics.push(row);
                        break;
                    }
                }
            }
            metrics.push(row);
            loss_accum = 0.0;
            loss_count = 0;
        }
        if let Some(dir) = checkpoint_dir {
            if step % options.checkpoint_every == 0 && step < opt.total_steps {
                save_checkpoint(
                    &dir.join(format!("step_{step}")),
                    &params,
                    step,
                    options.seed,
                    state.t,
                    &state.m,
                    &state.v,
                )?;
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("final"), &params, step, options.seed, state.t, &state.m, &state.v)?;
    }
    Ok(PretrainResult { params, state, metrics, final_step: step, train_top1 })
}

fn init_fresh(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, PretrainError> {
    Ok(model::init_model(config, seed)?)
}

/// Reload a checkpoint for resumption.
pub fn resume_from(dir: &Path) -> Result<Checkpoint, PretrainError> {
    Ok(load_checkpoint(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phenomap::{build_vocabulary, parse_mapping, CorpusScan};

    fn tiny_vocab() -> Vocabulary {
        let table = parse_mapping(
            "icd_code\ticd_system\tccs_category\tphenotype\n\
             I10\tICD10\tCCS_1\tPHENO_A\n\
             E11\tICD10\tCCS_2\tPHENO_B\n",
        )
        .unwrap();
        build_vocabulary(&table, &CorpusScan::default()).unwrap()
    }

    fn seq_with_maskable(n_maskable: usize) -> TokenSequence {
        let vocab = tiny_vocab();
        let pheno_id = vocab.id_of("PHENO_A");
        let mut ids = vec![crate::phenomap::CLS_ID, vocab.id_of("GENDER_MALE"), 3];
        let mut maskable = vec![false, false, false];
        for _ in 0..n_maskable {
            ids.extend_from_slice(&[10_135, pheno_id, 10_128, 128, 7, 3]);
            maskable.extend_from_slice(&[false, true, false, false, false, false]);
        }
        let n = ids.len();
        TokenSequence { patient_id: "P".into(), ids, maskable, attention_mask: vec![true; n] }
    }

    #[test]
    fn twenty_maskable_tokens_select_exactly_three() {
        let vocab = tiny_vocab();
        let seq = seq_with_maskable(20);
        let policy = MaskPolicy::default();
        for trial in 0..50 {
            let mut rng = rng::derive_n(1, "test.mask", trial);
            let masked = mask_sequence(&seq, &vocab, &mut rng, &policy).unwrap();
            let n_selected = masked.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
            assert_eq!(n_selected, 3);
        }
    }

    #[test]
    fn structural_only_sequence_is_rejected() {
        let vocab = tiny_vocab();
        let seq = TokenSequence {
            patient_id: "P".into(),
            ids: vec![2, 5, 3],
            maskable: vec![false, false, false],
            attention_mask: vec![true; 3],
        };
        let mut rng = rng::derive(1, "test.mask", "x");
        assert!(matches!(
            mask_sequence(&seq, &vocab, &mut rng, &MaskPolicy::default()),
            Err(PretrainError::NoMaskablePositions)
        ));
    }

    #[test]
    fn replacement_mix_approaches_policy_over_many_draws() {
        let vocab = tiny_vocab();
        let seq = seq_with_maskable(40);
        let policy = MaskPolicy::default();
        let (mut masked_ct, mut random_ct, mut keep_ct, mut total) = (0u64, 0u64, 0u64, 0u64);
        let mut trial = 0u64;
        while total < 120_000 {
            let mut rng = rng::derive_n(3, "test.maskstats", trial);
            trial += 1;
            let masked = mask_sequence(&seq, &vocab, &mut rng, &policy).unwrap();
            for (pos, &label) in masked.labels.iter().enumerate() {
                if label == IGNORE_LABEL {
                    continue;
                }
                total += 1;
                if masked.ids[pos] == MASK_ID {
                    masked_ct += 1;
                } else if masked.ids[pos] == label {
                    keep_ct += 1;
                } else {
                    random_ct += 1;
                }
            }
        }
        let frac = |c: u64| c as f64 / total as f64;
        assert!((frac(masked_ct) - 0.8).abs() < 0.02, "mask {}", frac(masked_ct));
        // the random draw can land on the original id, so "random" runs a
        // hair under 0.1 and "keep" a hair over
        assert!((frac(random_ct) - 0.1).abs() < 0.02, "random {}", frac(random_ct));
        assert!((frac(keep_ct) - 0.1).abs() < 0.02, "keep {}", frac(keep_ct));
    }

    #[test]
    fn labels_only_appear_at_maskable_positions() {
        let vocab = tiny_vocab();
        let seq = seq_with_maskable(10);
        let mut rng = rng::derive(5, "test.mask", "labels");
        let masked = mask_sequence(&seq, &vocab, &mut rng, &MaskPolicy::default()).unwrap();
        for (pos, &label) in masked.labels.iter().enumerate() {
            if label != IGNORE_LABEL {
                assert!(seq.maskable[pos], "label at non-maskable {pos}");
            }
        }
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let v = 11;
        let logits = Tensor::<f32>::filled(&[3, v], 0.7);
        let labels = vec![0u32, 5, 10];
        let (loss, _, _) = mlm_loss_and_accuracy(&logits, &labels).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn one_hot_logits_are_perfect() {
        let mut logits = Tensor::<f32>::zeros(&[2, 6]);
        logits.data_mut()[3] = 10.0;
        logits.data_mut()[6 + 1] = 10.0;
        let (_, top1, top5) = mlm_loss_and_accuracy(&logits, &[3, 1]).unwrap();
        assert_eq!(top1, 1.0);
        assert_eq!(top5, 1.0);
    }

    #[test]
    fn hand_computed_cross_entropy_case() {
        // rows [1,2,3] label 2 and [0,0,0] label 0:
        // loss1 = logsumexp(1,2,3) - 3 = 0.40760596...
        // loss2 = ln 3 = 1.09861229...
        let logits = Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss, top1, _) = mlm_loss_and_accuracy(&logits, &[2, 0]).unwrap();
        let expected = (0.407_605_964 + 1.098_612_289) / 2.0;
        assert!((loss - expected).abs() < 1e-6, "loss {loss}");
        assert_eq!(top1, 1.0); // label 2 is the max; row 2 ties resolve to the label
    }

    #[test]
    fn ignored_rows_are_excluded_and_empty_errors() {
        let logits = Tensor::<f32>::zeros(&[2, 4]);
        let (loss, _, _) = mlm_loss_and_accuracy(&logits, &[1, IGNORE_LABEL]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-6);
        assert!(matches!(
            mlm_loss_and_accuracy(&logits, &[IGNORE_LABEL, IGNORE_LABEL]),
            Err(PretrainError::NoLabeledPositions)
        ));
    }

    #[test]
    fn schedule_hits_documented_points() {
        let cfg = OptimizerConfig { total_steps: 10_000, ..OptimizerConfig::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(4000, &cfg) - 1e-4).abs() < 1e-12);
        assert_eq!(lr_at(10_000, &cfg), 0.0);
        assert!((lr_at(2000, &cfg) - 0.5e-4).abs() < 1e-12);
        assert!((lr_at(7000, &cfg) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_and_peaks_at_warmup() {
        let cfg = OptimizerConfig {
            total_steps: 2000,
            warmup_steps: 300,
            ..OptimizerConfig::default()
        };
        let mut max_lr = 0.0;
        let mut argmax = 0;
        let mut prev = 0.0;
        for s in 0..=2000u64 {
            let lr = lr_at(s, &cfg);
            let max_slope = cfg.lr_peak / 300.0 + 1e-15;
            assert!((lr - prev).abs() <= max_slope, "jump at {s}");
            if lr > max_lr {
                max_lr = lr;
                argmax = s;
            }
            prev = lr;
        }
        assert_eq!(argmax, 300);
    }

    #[test]
    fn zero_gradients_and_zero_decay_are_a_fixed_point() {
        let config = ModelConfig {
            vocab_size: 20,
            hidden: 4,
            layers: 1,
            heads: 2,
            intermediate: 8,
            max_len: 8,
            dropout_p: 0.0,
            head_dims: (4, 2),
            head_dropout: 0.0,
        };
        let mut params: ModelParams<f32> = model::init_model(&config, 1).unwrap();
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("token_emb".to_string(), Tensor::zeros(&[20, 4]));
        let mut state = AdamState::default();
        let opt = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        adamw_step(&mut params, &grads, &mut state, &opt, 1e-3).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn single_scalar_first_step_moves_by_lr() {
        let config = ModelConfig {
            vocab_size: 20,
            hidden: 4,
            layers: 1,
            heads: 2,
            intermediate: 8,
            max_len: 8,
            dropout_p: 0.0,
            head_dims: (4, 2),
            head_dropout: 0.0,
        };
        let mut params: ModelParams<f32> = model::init_model(&config, 2).unwrap();
        let p0 = params.token_emb.data()[0];
        let mut g = Tensor::<f32>::zeros(&[20, 4]);
        g.data_mut()[0] = 1.0;
        let mut grads = BTreeMap::new();
        grads.insert("token_emb".to_string(), g);
        let mut state = AdamState::default();
        let opt = OptimizerConfig { weight_decay: 0.0, epsilon: 1e-8, ..OptimizerConfig::default() };
        let lr = 1e-3;
        adamw_step(&mut params, &grads, &mut state, &opt, lr).unwrap();
        // bias-corrected m_hat = v_hat = 1 after one unit-gradient step
        let moved = p0 - params.token_emb.data()[0];
        assert!((moved as f64 - lr).abs() < 2e-8, "moved {moved}");
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let config = ModelConfig {
            vocab_size: 20,
            hidden: 4,
            layers: 1,
            heads: 2,
            intermediate: 8,
            max_len: 8,
            dropout_p: 0.0,
            head_dims: (4, 2),
            head_dropout: 0.0,
        };
        let mut params: ModelParams<f32> = model::init_model(&config, 3).unwrap();
        let mut g = Tensor::<f32>::zeros(&[20, 4]);
        g.data_mut()[0] = f32::NAN;
        let mut grads = BTreeMap::new();
        grads.insert("token_emb".to_string(), g);
        let mut state = AdamState::default();
        let err =
            adamw_step(&mut params, &grads, &mut state, &OptimizerConfig::default(), 1e-3)
                .unwrap_err();
        assert!(matches!(err, PretrainError::NonFiniteGradient { .. }));
    }

    #[test]
    fn clip_norm_behaves_at_and_above_threshold() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f32>::new(vec![2], vec![0.3, 0.4]).unwrap());
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 0.5).abs() < 1e-7);
        assert_eq!(grads["a"].data(), &[0.3, 0.4]);

        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f32>::new(vec![2], vec![3.0, 4.0]).unwrap());
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let clipped = grads["a"].data();
        assert!((clipped[0] - 0.6).abs() < 1e-6 && (clipped[1] - 0.8).abs() < 1e-6);
        let post: f64 = clipped.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decay_exemptions_cover_biases_and_gains() {
        assert!(decays("token_emb"));
        assert!(decays("layer0.q.w"));
        assert!(!decays("layer0.q.b"));
        assert!(!decays("layer0.norm1.gain"));
        assert!(!decays("layer0.norm1.bias"));
        assert!(!decays("head0.bn1.gain"));
    }
}
