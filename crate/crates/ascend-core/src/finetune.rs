//! Survival fine-tuning: Cox partial-likelihood loss over the five outcome
//! heads, encoder freezing, and early stopping on the mean validation
//! C-index.
//!
//! Risk sets form within each batch (full-dataset risk sets are infeasible
//! per step); shuffled batching varies their composition across epochs. The
//! per-batch loss is the unweighted sum of the five per-outcome Cox losses.

use crate::metrics::{c_index, MetricsError, TieHandling};
use crate::model::{
    self, apply_bn_updates, bind_model, Mode, ModelError, ModelParams,
};
use crate::pretrain::{adamw_step, clip_global_norm, lr_at, AdamState, OptimizerConfig, PretrainError};
use crate::rng;
use crate::seqbuild::{IndexRecord, TokenSequence};
use crate::tensor::{logsumexp, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("frozen layer count {n} exceeds model layers {layers}")]
    NOutOfRange { n: usize, layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] PretrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no usable training samples")]
    EmptyTrainingSet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub frozen_layers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 5e-6,
            warmup_steps: 2000,
            frozen_layers: 10,
            batch_size: 8,
            epochs: 20,
            dropout: 0.2,
            early_stop_patience: 3,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Scores, observed times, and event flags for one outcome within a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskBatch {
    pub scores: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl RiskBatch {
    pub fn new(scores: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> RiskBatch {
        debug_assert_eq!(scores.len(), times.len());
        debug_assert_eq!(scores.len(), events.len());
        RiskBatch { scores, times, events }
    }
}

/// Negative Cox partial log-likelihood, mean-reduced over events:
/// `L = -(1/|D|) sum_{i in D} (theta_i - log sum_{T_j >= T_i} exp(theta_j))`.
/// Ties share the risk set (Breslow); zero events score zero. This is the
/// value-route twin of the differentiable tape op.
pub fn cox_loss(batch: &RiskBatch) -> f64 {
    let n = batch.scores.len();
    let mut total = 0.0;
    let mut events = 0usize;
    for i in 0..n {
        if !batch.events[i] {
            continue;
        }
        events += 1;
        let lse = logsumexp(
            (0..n).filter(|&j| batch.times[j] >= batch.times[i]).map(|j| batch.scores[j]),
        );
        total += lse - batch.scores[i];
    }
    if events == 0 {
        0.0
    } else {
        total / events as f64
    }
}

/// Trainability predicate for fine-tuning: with `n` frozen layers, the
/// embeddings and encoder layers `0..n` are excluded from updates; upper
/// layers, the final norm, and the survival heads train. The MLM head is
/// outside the fine-tuning graph entirely.
pub struct FreezeSelector {
    n: usize,
}

pub fn freeze_layers(config: &model::ModelConfig, n: usize) -> Result<FreezeSelector, FinetuneError> {
    if n > config.layers {
        return Err(FinetuneError::NOutOfRange { n, layers: config.layers });
    }
    Ok(FreezeSelector { n })
}

impl FreezeSelector {
    pub fn trainable(&self, name: &str) -> bool {
        if name.starts_with("mlm_head") {
            return false;
        }
        if matches!(name, "token_emb" | "pos_emb" | "type_emb") {
            return self.n == 0;
        }
        if let Some(rest) = name.strip_prefix("layer") {
            if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                return idx >= self.n;
            }
        }
        true
    }
}

/// One tokenized index sample with its five outcome labels, in head order.
#[derive(Debug, Clone)]
pub struct FitSample {
    pub seq: TokenSequence,
    pub times: [f64; 5],
    pub events: [bool; 5],
}

impl FitSample {
    pub fn from_record(record: &IndexRecord) -> Option<FitSample> {
        let mut times = [0.0; 5];
        let mut events = [false; 5];
        for (k, outcome) in crate::events::OUTCOMES.iter().enumerate() {
            let label = record.label(*outcome)?;
            times[k] = label.time_days as f64;
            events[k] = label.event;
        }
        Some(FitSample { seq: record.sequence(), times, events })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Per-outcome validation C-index in head order; None when unavailable.
    pub val_c_index: Vec<Option<f64>>,
    pub mean_c_index: Option<f64>,
}

pub struct FinetuneResult {
    pub params: ModelParams<f32>,
    pub metrics: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub best_mean_c: Option<f64>,
}

/// Run one fine-tuning step over a batch; returns the summed Cox loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    params: &mut ModelParams<f32>,
    batch_samples: &[&FitSample],
    selector: &FreezeSelector,
    opt: &OptimizerConfig,
    state: &mut AdamState,
    head_dropout: f64,
    step: u64,
    seed: u64,
) -> Result<f64, FinetuneError> {
    let refs: Vec<&TokenSequence> = batch_samples.iter().map(|s| &s.seq).collect();
    let batch = model::pad_batch(&refs, params.config.max_len)?;
    let mut tape = Tape::<f32>::new();
    let bound = bind_model(&mut tape, params, &|name| selector.trainable(name));
    let mut dropout_rng = rng::derive_n(seed, "finetune.dropout", step);
    let hidden = model::encode(
        &mut tape,
        &bound,
        &params.config,
        &batch,
        Mode::Train,
        Some(&mut dropout_rng),
    )?;
    let pooled = model::mean_pool(&mut tape, hidden, &batch)?;
    let out = model::survival_scores(
        &mut tape,
        &bound,
        pooled,
        head_dropout,
        Mode::Train,
        Some(&mut dropout_rng),
    )?;

    let mut losses = Vec::with_capacity(5);
    for (k, &head_node) in out.per_head.iter().enumerate() {
        let times: Vec<f64> = batch_samples.iter().map(|s| s.times[k]).collect();
        let events: Vec<bool> = batch_samples.iter().map(|s| s.events[k]).collect();
        losses.push(tape.cox_loss(head_node, &times, &events)?);
    }
    let total = tape.sum_scalars(&losses)?;
    let loss_value = tape.value(total).item() as f64;
    if !loss_value.is_finite() {
        return Err(FinetuneError::Train(PretrainError::NonFiniteLoss { step }));
    }

    let mut grads_by_id = tape.backward(total)?;
    let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut names: Vec<(String, crate::tensor::NodeId)> = Vec::new();
    collect_bound_ids(&bound, &mut names);
    for (name, id) in names {
        if selector.trainable(&name) {
            if let Some(g) = grads_by_id.take(id) {
                grads.insert(name, g);
            }
        }
    }
    clip_global_norm(&mut grads, opt.clip_norm);
    let lr = lr_at(step, opt);
    adamw_step(params, &grads, state, opt, lr)?;
    apply_bn_updates(params, &out.bn_stats);
    Ok(loss_value)
}

fn collect_bound_ids(bound: &model::BoundModel, out: &mut Vec<(String, crate::tensor::NodeId)>) {
    out.push(("token_emb".into(), bound.token_emb));
    out.push(("pos_emb".into(), bound.pos_emb));
    out.push(("type_emb".into(), bound.type_emb));
    for (i, layer) in bound.layers.iter().enumerate() {
        out.push((format!("layer{i}.norm1.gain"), layer.norm1.gain));
        out.push((format!("layer{i}.norm1.bias"), layer.norm1.bias));
        for (n, lin) in [("q", &layer.q), ("k", &layer.k), ("v", &layer.v), ("o", &layer.o)] {
            out.push((format!("layer{i}.{n}.w"), lin.w));
            out.push((format!("layer{i}.{n}.b"), lin.b));
        }
        out.push((format!("layer{i}.norm2.gain"), layer.norm2.gain));
        out.push((format!("layer{i}.norm2.bias"), layer.norm2.bias));
        out.push((format!("layer{i}.ffn1.w"), layer.ffn1.w));
        out.push((format!("layer{i}.ffn1.b"), layer.ffn1.b));
        out.push((format!("layer{i}.ffn2.w"), layer.ffn2.w));
        out.push((format!("layer{i}.ffn2.b"), layer.ffn2.b));
    }
    out.push(("final_norm.gain".into(), bound.final_norm.gain));
    out.push(("final_norm.bias".into(), bound.final_norm.bias));
    out.push(("mlm_head.w".into(), bound.mlm_head.w));
    out.push(("mlm_head.b".into(), bound.mlm_head.b));
    for (i, head) in bound.heads.iter().enumerate() {
        out.push((format!("head{i}.fc1.w"), head.fc1.w));
        out.push((format!("head{i}.fc1.b"), head.fc1.b));
        out.push((format!("head{i}.bn1.gain"), head.bn1.gain));
        out.push((format!("head{i}.bn1.bias"), head.bn1.bias));
        out.push((format!("head{i}.fc2.w"), head.fc2.w));
        out.push((format!("head{i}.fc2.b"), head.fc2.b));
        out.push((format!("head{i}.bn2.gain"), head.bn2.gain));
        out.push((format!("head{i}.bn2.bias"), head.bn2.bias));
        out.push((format!("head{i}.fc3.w"), head.fc3.w));
        out.push((format!("head{i}.fc3.b"), head.fc3.b));
    }
}

/// Validation C-indices per outcome (literal tie handling) from eval-mode
/// scores.
pub fn validation_c_indices(
    params: &ModelParams<f32>,
    val: &[FitSample],
) -> Result<Vec<Option<f64>>, FinetuneError> {
    let scores = crate::metrics::score_all(params, val)?;
    let mut out = Vec::with_capacity(5);
    for k in 0..5 {
        let times: Vec<f64> = val.iter().map(|s| s.times[k]).collect();
        let events: Vec<bool> = val.iter().map(|s| s.events[k]).collect();
        let col: Vec<f64> = scores.iter().map(|row| row[k]).collect();
        match c_index(&times, &events, &col, TieHandling::Literal) {
            Ok(c) => out.push(Some(c)),
            Err(MetricsError::NoComparablePairs) => out.push(None),
            Err(other) => return Err(other.into()),
        }
    }
    Ok(out)
}

/// Fine-tune from a pretrained encoder. The survival heads are freshly
/// initialized from the fine-tuning seed; early stopping tracks the
/// unweighted mean of the five validation C-indices and the best epoch's
/// parameters are returned.
pub fn finetune_loop(
    train: &[FitSample],
    val: &[FitSample],
    pretrained: &ModelParams<f32>,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult, FinetuneError> {
    if config.batch_size < 2 {
        return Err(FinetuneError::InvalidConfig("batch_size must be at least 2".into()));
    }
    let selector = freeze_layers(&pretrained.config, config.frozen_layers)?;
    let mut params = pretrained.clone();
    let fresh: ModelParams<f32> = model::init_model(&params.config, seed)?;
    params.heads = fresh.heads;

    if config.epochs == 0 {
        return Ok(FinetuneResult {
            params,
            metrics: Vec::new(),
            best_epoch: None,
            best_mean_c: None,
        });
    }
    if train.len() < 2 {
        return Err(FinetuneError::EmptyTrainingSet);
    }

    // full batches only: train-mode batch norm needs at least two rows
    let steps_per_epoch = (train.len() / config.batch_size).max(1) as u64;
    let opt = OptimizerConfig {
        lr_peak: config.lr,
        warmup_steps: config.warmup_steps.min(config.epochs as u64 * steps_per_epoch),
        weight_decay: config.weight_decay,
        clip_norm: config.clip_norm,
        total_steps: (config.epochs as u64 * steps_per_epoch).max(1),
        batch_size: config.batch_size,
        ..OptimizerConfig::default()
    };
    let mut state = AdamState::default();
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    let mut since_best = 0usize;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::derive_n(seed, "finetune.shuffle", epoch as u64);
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch_samples: Vec<&FitSample> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += finetune_step(
                &mut params,
                &batch_samples,
                &selector,
                &opt,
                &mut state,
                config.dropout,
                step,
                seed,
            )?;
            step += 1;
            batches += 1;
        }
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };

        let val_c = if val.is_empty() {
            vec![None; 5]
        } else {
            validation_c_indices(&params, val)?
        };
        let available: Vec<f64> = val_c.iter().flatten().copied().collect();
        let mean_c = if available.is_empty() {
            None
        } else {
            Some(available.iter().sum::<f64>() / available.len() as f64)
        };
        metrics.push(EpochRow { epoch, train_loss, val_c_index: val_c, mean_c_index: mean_c });

        let improved = match (mean_c, &best) {
            (Some(c), Some((_, best_c, _))) => c > *best_c,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((epoch, mean_c.expect("improved implies some"), params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience && best.is_some() {
                break;
            }
        }
    }

    match best {
        Some((epoch, c, best_params)) => Ok(FinetuneResult {
            params: best_params,
            metrics,
            best_epoch: Some(epoch),
            best_mean_c: Some(c),
        }),
        None => Ok(FinetuneResult { params, metrics, best_epoch: None, best_mean_c: None }),
    }
}
