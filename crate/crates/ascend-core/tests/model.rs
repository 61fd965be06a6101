//! Encoder, head, and checkpoint behavior, including the end-to-end
//! gradient check through the Cox loss.

use ascend_core::model::{
    apply_bn_updates, bind_model, count_parameters, encode, head_scores_eval_value, init_model,
    load_checkpoint, mean_pool, mlm_logits, pad_batch, save_checkpoint, score_sequences, Mode,
    ModelConfig, ModelError, ModelParams, NamedTensors,
};
use ascend_core::seqbuild::TokenSequence;
use ascend_core::tensor::check::{finite_difference_check, DEFAULT_EPS};
use ascend_core::tensor::{Tape, Tensor};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 60,
        hidden: 8,
        layers: 1,
        heads: 2,
        intermediate: 16,
        max_len: 16,
        dropout_p: 0.0,
        head_dims: (4, 2),
        head_dropout: 0.0,
    }
}

fn toy_sequence(pid: &str, ids: Vec<u32>) -> TokenSequence {
    let n = ids.len();
    TokenSequence {
        patient_id: pid.into(),
        ids,
        maskable: vec![false; n],
        attention_mask: vec![true; n],
    }
}

fn toy_batch_ids() -> Vec<TokenSequence> {
    vec![
        toy_sequence("a", vec![2, 5, 3, 10, 20, 30, 3]),
        toy_sequence("b", vec![2, 6, 3, 11, 21, 3]),
        toy_sequence("c", vec![2, 5, 3, 12, 22, 32, 42, 3]),
        toy_sequence("d", vec![2, 6, 3, 13, 3]),
    ]
}

#[test]
fn init_is_deterministic_and_validated() {
    let config = tiny_config();
    let a: ModelParams<f32> = init_model(&config, 7).unwrap();
    let b: ModelParams<f32> = init_model(&config, 7).unwrap();
    assert_eq!(a, b);
    let c: ModelParams<f32> = init_model(&config, 8).unwrap();
    assert_ne!(a.token_emb, c.token_emb);

    let bad = ModelConfig { hidden: 33, heads: 12, ..tiny_config() };
    assert!(matches!(init_model::<f32>(&bad, 1), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn parameter_count_matches_paper_within_one_percent() {
    let config = ModelConfig::table1(10_442);
    let count = count_parameters(&config) as f64;
    let target = 103.3e6;
    let rel = (count - target).abs() / target;
    assert!(rel < 0.01, "count {count} deviates {rel} from 103.3M");
}

#[test]
fn parameter_count_matches_hand_sum_for_tiny_config() {
    // vocab 100, hidden 8, 1 layer, 2 heads, intermediate 16, max_len 16,
    // head dims (4, 2): summed by hand.
    let config = ModelConfig {
        vocab_size: 100,
        hidden: 8,
        layers: 1,
        heads: 2,
        intermediate: 16,
        max_len: 16,
        dropout_p: 0.1,
        head_dims: (4, 2),
        head_dropout: 0.2,
    };
    let embeddings = 800 + 128 + 16;
    let layer = 16 + 4 * 72 + 16 + 144 + 136;
    let tail = 16 + 900;
    let heads = 5 * (36 + 8 + 10 + 4 + 3);
    assert_eq!(count_parameters(&config), embeddings + layer + tail + heads);
    assert_eq!(count_parameters(&config), 2765);
}

#[test]
fn parameter_count_agrees_with_instantiated_tensors() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 3).unwrap();
    let mut total = 0u64;
    params.for_each_param(&mut |_, t| total += t.len() as u64);
    assert_eq!(total, count_parameters(&config));
}

#[test]
fn layer_count_scales_linearly() {
    let one = count_parameters(&tiny_config());
    let two = count_parameters(&ModelConfig { layers: 2, ..tiny_config() });
    let three = count_parameters(&ModelConfig { layers: 3, ..tiny_config() });
    assert_eq!(three - two, two - one);
}

#[test]
fn encode_produces_expected_shape() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 1).unwrap();
    let seqs = toy_batch_ids();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = pad_batch(&refs, config.max_len).unwrap();
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params, &|_| false);
    let hidden = encode(&mut tape, &bound, &config, &batch, Mode::Eval, None).unwrap();
    assert_eq!(tape.value(hidden).shape(), &[4, 8, config.hidden]);
}

#[test]
fn over_long_sequences_are_rejected() {
    let config = tiny_config();
    let long = toy_sequence("x", vec![2; 17]);
    let err = pad_batch(&[&long], config.max_len).unwrap_err();
    assert!(matches!(err, ModelError::SequenceTooLong { len: 17, max: 16 }));
}

#[test]
fn sequences_do_not_interact_across_the_batch() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 2).unwrap();
    let seqs = toy_batch_ids();

    let all: Vec<&TokenSequence> = seqs.iter().collect();
    let scores_all = score_sequences(&params, &all).unwrap();

    let permuted: Vec<&TokenSequence> = vec![&seqs[2], &seqs[0], &seqs[3], &seqs[1]];
    let scores_perm = score_sequences(&params, &permuted).unwrap();

    for (orig_row, perm_row) in [(2usize, 0usize), (0, 1), (3, 2), (1, 3)] {
        for h in 0..5 {
            let a = scores_all.data()[orig_row * 5 + h];
            let b = scores_perm.data()[perm_row * 5 + h];
            assert!(
                (a - b).abs() < 1e-5,
                "row {orig_row} head {h}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn padding_leaves_eval_outputs_unchanged() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 4).unwrap();
    let short = toy_sequence("s", vec![2, 5, 3, 10, 20, 3]);
    let longer = toy_sequence("l", vec![2, 6, 3, 10, 21, 30, 41, 50, 3]);

    let alone = score_sequences(&params, &[&short]).unwrap();
    let padded = score_sequences(&params, &[&short, &longer]).unwrap();
    for h in 0..5 {
        let a = alone.data()[h];
        let b = padded.data()[h];
        assert!((a - b).abs() < 1e-5, "head {h}: {a} vs {b}");
    }
}

#[test]
fn mean_pool_matches_hand_computation() {
    let config = tiny_config();
    let mut tape = Tape::<f64>::new();
    // [2, 3, 2] with mask hiding the middle position of row 0 and the last
    // two of row 1
    let x = Tensor::new(
        vec![2, 3, 2],
        vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
    )
    .unwrap();
    let xid = tape.leaf(x, false);
    let mask = vec![true, false, true, true, false, false];
    let pooled = tape.mean_pool_mask(xid, &mask).unwrap();
    assert_eq!(tape.value(pooled).data(), &[2.0, 3.0, 5.0, 6.0]);
    let _ = config;

    // singleton mean: one real position returns that vector
    let mut tape2 = Tape::<f64>::new();
    let y = Tensor::new(vec![1, 2, 2], vec![4.0, 5.0, 99.0, 98.0]).unwrap();
    let yid = tape2.leaf(y, false);
    let pooled2 = tape2.mean_pool_mask(yid, &[true, false]).unwrap();
    assert_eq!(tape2.value(pooled2).data(), &[4.0, 5.0]);

    // identical vectors pool to themselves
    let mut tape3 = Tape::<f64>::new();
    let z = Tensor::new(vec![1, 3, 2], vec![7.0, -1.0, 7.0, -1.0, 7.0, -1.0]).unwrap();
    let zid = tape3.leaf(z, false);
    let pooled3 = tape3.mean_pool_mask(zid, &[true, true, true]).unwrap();
    for (got, want) in tape3.value(pooled3).data().iter().zip(&[7.0, -1.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn mlm_logits_reduce_to_bias_for_zero_inputs() {
    let config = tiny_config();
    let mut params: ModelParams<f32> = init_model(&config, 5).unwrap();
    for v in params.mlm_head.w.data_mut() {
        *v = 0.0;
    }
    for (i, v) in params.mlm_head.b.data_mut().iter_mut().enumerate() {
        *v = i as f32 * 0.5;
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params, &|_| false);
    let zero_hidden = tape.leaf(Tensor::zeros(&[2, 3, config.hidden]), false);
    let logits = mlm_logits(&mut tape, &bound, zero_hidden).unwrap();
    assert_eq!(tape.value(logits).shape(), &[2, 3, config.vocab_size]);
    for row in tape.value(logits).data().chunks(config.vocab_size) {
        for (i, &v) in row.iter().enumerate() {
            assert_eq!(v, i as f32 * 0.5);
        }
    }
}

#[test]
fn survival_eval_handles_batch_of_one_and_train_rejects_it() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 6).unwrap();
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params, &|_| false);
    let pooled = tape.leaf(Tensor::filled(&[1, config.hidden], 0.3f32), false);
    let out =
        ascend_core::model::survival_scores(&mut tape, &bound, pooled, 0.0, Mode::Eval, None)
            .unwrap();
    assert_eq!(tape.value(out.stacked).shape(), &[1, 5]);

    let mut rng = ascend_core::rng::derive(1, "test", "drop");
    let err = ascend_core::model::survival_scores(
        &mut tape,
        &bound,
        pooled,
        0.2,
        Mode::Train,
        Some(&mut rng),
    )
    .unwrap_err();
    assert!(matches!(err, ModelError::BatchTooSmallForTrainNorm(1)));
}

#[test]
fn identical_pooled_rows_get_identical_scores() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 7).unwrap();
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params, &|_| false);
    let row: Vec<f32> = (0..config.hidden).map(|i| (i as f32) * 0.1 - 0.3).collect();
    let mut data = row.clone();
    data.extend_from_slice(&row);
    let pooled = tape.leaf(Tensor::new(vec![2, config.hidden], data).unwrap(), false);
    let out =
        ascend_core::model::survival_scores(&mut tape, &bound, pooled, 0.0, Mode::Eval, None)
            .unwrap();
    let scores = tape.value(out.stacked);
    for h in 0..5 {
        assert_eq!(scores.data()[h], scores.data()[5 + h]);
    }
}

#[test]
fn tape_eval_path_matches_value_path() {
    let config = tiny_config();
    let mut params: ModelParams<f32> = init_model(&config, 8).unwrap();
    // make running stats non-trivial so the check is meaningful
    for head in &mut params.heads {
        for (i, v) in head.bn1.running_mean.data_mut().iter_mut().enumerate() {
            *v = 0.05 * i as f32;
        }
        for (i, v) in head.bn1.running_var.data_mut().iter_mut().enumerate() {
            *v = 1.0 + 0.1 * i as f32;
        }
    }
    let pooled = Tensor::new(
        vec![2, config.hidden],
        (0..2 * config.hidden).map(|i| (i as f32) * 0.07 - 0.4).collect(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params, &|_| false);
    let pid = tape.leaf(pooled.clone(), false);
    let out =
        ascend_core::model::survival_scores(&mut tape, &bound, pid, 0.0, Mode::Eval, None)
            .unwrap();
    for h in 0..5 {
        let direct = head_scores_eval_value(&params, h, &pooled);
        for b in 0..2 {
            let tape_v = tape.value(out.per_head[h]).data()[b];
            assert!(
                (tape_v - direct.data()[b]).abs() < 1e-6,
                "head {h} row {b}: {tape_v} vs {}",
                direct.data()[b]
            );
        }
    }
}

#[test]
fn bn_updates_move_running_statistics() {
    let config = tiny_config();
    let mut params: ModelParams<f32> = init_model(&config, 9).unwrap();
    let stats = vec![ascend_core::model::BnBatchStats {
        name: "head0.bn1".into(),
        mean: vec![1.0; config.head_dims.0],
        var: vec![2.0; config.head_dims.0],
    }];
    apply_bn_updates(&mut params, &stats);
    let m = params.heads[0].bn1.running_mean.data()[0];
    let v = params.heads[0].bn1.running_var.data()[0];
    assert!((m - 0.1).abs() < 1e-6);
    assert!((v - 1.1).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let config = tiny_config();
    let params: ModelParams<f32> = init_model(&config, 10).unwrap();
    let mut opt_m = NamedTensors::new();
    let mut opt_v = NamedTensors::new();
    opt_m.insert("token_emb".into(), Tensor::filled(&[60, 8], 0.25f32));
    opt_v.insert("token_emb".into(), Tensor::filled(&[60, 8], 0.125f32));

    let dir = tempfile::tempdir().unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    save_checkpoint(&ckpt_dir, &params, 123, 42, 123, &opt_m, &opt_v).unwrap();
    let loaded = load_checkpoint(&ckpt_dir).unwrap();
    assert_eq!(loaded.params, params);
    assert_eq!(loaded.step, 123);
    assert_eq!(loaded.rng_seed, 42);
    assert_eq!(loaded.opt_t, 123);
    assert_eq!(loaded.opt_m["token_emb"], opt_m["token_emb"]);
    assert_eq!(loaded.opt_v["token_emb"], opt_v["token_emb"]);

    // saving again over the same directory must be byte-stable
    let manifest_a = std::fs::read(ckpt_dir.join("manifest.json")).unwrap();
    save_checkpoint(&ckpt_dir, &params, 123, 42, 123, &opt_m, &opt_v).unwrap();
    let manifest_b = std::fs::read(ckpt_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b);
}

#[test]
fn end_to_end_cox_gradient_passes_finite_differences() {
    let config = tiny_config();
    let mut params64: ModelParams<f64> = init_model(&config, 11).unwrap();
    // Zero-initialized head biases park ReLU pre-activations on the kink,
    // where central differences see half-gradients; nudge them off it so the
    // check measures the gradient, not the kink.
    params64.for_each_param_mut(&mut |name, t| {
        if name.contains("fc") && name.ends_with(".b") {
            for v in t.data_mut() {
                *v += 0.05;
            }
        }
    });
    let seqs = toy_batch_ids();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = pad_batch(&refs, config.max_len).unwrap();
    let times = vec![3.0, 1.0, 4.0, 2.0];
    let events = vec![true, true, false, true];

    // flatten parameters into the checker's leaf list
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<Tensor<f64>> = Vec::new();
    params64.for_each_param(&mut |name, t| {
        names.push(name.to_string());
        tensors.push(t.clone());
    });

    let cfg = config.clone();
    let err = finite_difference_check(&tensors, DEFAULT_EPS, move |tape, ids| {
        let mut rebuilt = params64.clone();
        let mut idx = 0usize;
        rebuilt.for_each_param_mut(&mut |_, t| {
            *t = tape.value(ids[idx]).clone();
            idx += 1;
        });
        // bind the *leaf nodes* directly so gradients flow to the checker's
        // parameters: reuse the visit order to map names to ids
        let mut id_iter = ids.iter();
        let mut bound_ids = std::collections::BTreeMap::new();
        rebuilt.for_each_param(&mut |name, _| {
            bound_ids.insert(name.to_string(), *id_iter.next().expect("id per param"));
        });

        let bound = ascend_core::model::bind_model_with(tape, &rebuilt, &|name| {
            bound_ids.get(name).copied()
        });
        let hidden = encode(tape, &bound, &cfg, &batch, Mode::Train, None)
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => ascend_core::tensor::TensorError::Invalid(other.to_string()),
            })?;
        let pooled = mean_pool(tape, hidden, &batch).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => ascend_core::tensor::TensorError::Invalid(other.to_string()),
        })?;
        let out = ascend_core::model::survival_scores(tape, &bound, pooled, 0.0, Mode::Train, None)
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => ascend_core::tensor::TensorError::Invalid(other.to_string()),
            })?;
        let mut losses = Vec::new();
        for &head in out.per_head.iter() {
            losses.push(tape.cox_loss(head, &times, &events)?);
        }
        tape.sum_scalars(&losses)
    })
    .unwrap();
    assert!(err < 1e-4, "end-to-end gradient error {err}");
}
