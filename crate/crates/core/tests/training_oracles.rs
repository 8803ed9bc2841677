//! Oracle tests for the training strategies: the adversarial gradient
//! identity, the cross-gradient decomposition, degenerate-case equalities,
//! optimizer arithmetic, and end-to-end determinism.

use ser_core::autodiff::Tape;
use ser_core::data::{generate_synthetic, make_batches, split_by_speaker, Dataset, SpeakerSpace, SyntheticSpec};
use ser_core::layers::SequenceBatch;
use ser_core::model::{
    features_leaf, forward, is_embedding_param, load_checkpoint, save_checkpoint, ForwardMode,
    ModelConfig, ModelParameters,
};
use ser_core::training::{
    cgt_perturb, collect_grads, loss_dat, sgd_nesterov_update, train, train_step, train_step_cgt,
    GradSet, LambdaSchedule, OptimizerState, Strategy, TrainConfig, TrainHistory,
};
use std::collections::HashMap;

const STEP_SEED: u64 = 20_24;

fn tiny_dataset(speakers: usize, per_speaker: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        num_speakers: speakers,
        utterances_per_speaker: per_speaker,
        feature_dim: 5,
        num_emotions: 2,
        length_range: (12, 18),
        noise_sigma: 0.4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// One batch covering a 2-speaker dataset, with speaker targets.
fn tiny_batch(seed: u64) -> (ModelConfig, SequenceBatch) {
    let config = ModelConfig::tiny();
    let dataset = tiny_dataset(2, 3, seed);
    let refs: Vec<&ser_core::data::Utterance> = dataset.utterances.iter().collect();
    let space = SpeakerSpace::new(refs.iter().map(|u| u.speaker));
    let batch = make_batches(&refs, 5, 2, Some(&space), 8, 0, 0)
        .unwrap()
        .remove(0);
    (config, batch)
}

fn grads_named(grads: GradSet) -> HashMap<String, Vec<f64>> {
    grads
        .into_iter()
        .map(|(name, g)| {
            let g = g.unwrap_or_default();
            (name, g)
        })
        .collect()
}

/// Gradients of a single loss (emotion or speaker) under a fixed network
/// realization.
fn single_loss_grads(
    params: &ModelParameters,
    batch: &SequenceBatch,
    grl: Option<f64>,
    emotion: bool,
) -> HashMap<String, Vec<f64>> {
    let mut p = params.clone();
    let mut tape = Tape::new();
    let ids = p.register(&mut tape);
    let x = features_leaf(&mut tape, batch, false);
    let out = forward(
        &mut tape,
        &mut p,
        &ids,
        x,
        batch,
        &ForwardMode::train_frozen(STEP_SEED),
        grl,
    )
    .unwrap();
    let loss = if emotion {
        tape.cross_entropy(out.emotion_logits, &batch.emotion_targets).unwrap()
    } else {
        tape.cross_entropy(out.speaker_logits, batch.speaker_targets.as_ref().unwrap())
            .unwrap()
    };
    tape.backward(loss).unwrap();
    grads_named(collect_grads(&tape, &ids))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn trainable_bits(params: &ModelParameters) -> Vec<u64> {
    params
        .trainable()
        .into_iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

// ----- DAT oracle -----------------------------------------------------------

#[test]
fn dat_embedding_gradient_equals_two_pass_decomposition() {
    let (config, batch) = tiny_batch(61);
    let params = ModelParameters::init(&config, 17).unwrap();
    for lambda in [0.5, 1.0, 2.0] {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = features_leaf(&mut tape, &batch, false);
        let out = forward(
            &mut tape,
            &mut p,
            &ids,
            x,
            &batch,
            &ForwardMode::train_frozen(STEP_SEED),
            Some(lambda),
        )
        .unwrap();
        let loss = loss_dat(&mut tape, &out, &batch).unwrap();
        tape.backward(loss.total).unwrap();
        let dat = grads_named(collect_grads(&tape, &ids));

        let g_emotion = single_loss_grads(&params, &batch, None, true);
        let g_speaker = single_loss_grads(&params, &batch, None, false);

        for (name, g_dat) in &dat {
            if !is_embedding_param(name) {
                continue;
            }
            let expected: Vec<f64> = g_emotion[name]
                .iter()
                .zip(&g_speaker[name])
                .map(|(e, s)| e - lambda * s)
                .collect();
            let diff = max_abs_diff(g_dat, &expected);
            assert!(diff < 1e-10, "lambda {}: {} differs by {:e}", lambda, name, diff);
        }
    }
}

#[test]
fn dat_lambda_zero_matches_ser_only_embedding_gradients_bitwise() {
    let (config, batch) = tiny_batch(67);
    let params = ModelParameters::init(&config, 19).unwrap();

    let mut p = params.clone();
    let mut tape = Tape::new();
    let ids = p.register(&mut tape);
    let x = features_leaf(&mut tape, &batch, false);
    let out = forward(
        &mut tape,
        &mut p,
        &ids,
        x,
        &batch,
        &ForwardMode::train_frozen(STEP_SEED),
        Some(0.0),
    )
    .unwrap();
    let loss = loss_dat(&mut tape, &out, &batch).unwrap();
    tape.backward(loss.total).unwrap();
    let dat = grads_named(collect_grads(&tape, &ids));

    let ser = single_loss_grads(&params, &batch, None, true);
    for (name, g) in &dat {
        if !is_embedding_param(name) {
            continue;
        }
        for (a, b) in g.iter().zip(&ser[name]) {
            assert!(a == b, "{}: {} vs {}", name, a, b);
        }
    }
}

#[test]
fn speaker_head_gradients_do_not_depend_on_lambda() {
    let (config, batch) = tiny_batch(71);
    let params = ModelParameters::init(&config, 23).unwrap();
    let grads_at = |lambda: f64| -> HashMap<String, Vec<f64>> {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = features_leaf(&mut tape, &batch, false);
        let out = forward(
            &mut tape,
            &mut p,
            &ids,
            x,
            &batch,
            &ForwardMode::train_frozen(STEP_SEED),
            Some(lambda),
        )
        .unwrap();
        let loss = loss_dat(&mut tape, &out, &batch).unwrap();
        tape.backward(loss.total).unwrap();
        grads_named(collect_grads(&tape, &ids))
    };
    let one = grads_at(1.0);
    let two = grads_at(2.0);
    for (name, g1) in &one {
        if name.starts_with("speaker_head.") {
            let g2 = &two[name];
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(g1), bits(g2), "{}", name);
        }
    }
}

#[test]
fn loss_dat_requires_a_grl_forward() {
    let (config, batch) = tiny_batch(73);
    let mut p = ModelParameters::init(&config, 29).unwrap();
    let mut tape = Tape::new();
    let ids = p.register(&mut tape);
    let x = features_leaf(&mut tape, &batch, false);
    let out = forward(
        &mut tape,
        &mut p,
        &ids,
        x,
        &batch,
        &ForwardMode::train_frozen(STEP_SEED),
        None,
    )
    .unwrap();
    assert!(matches!(
        loss_dat(&mut tape, &out, &batch),
        Err(ser_core::Error::Contract(_))
    ));
}

// ----- CGT oracle -----------------------------------------------------------

#[test]
fn cgt_perturbations_zero_epsilon_and_padding() {
    let (config, batch) = tiny_batch(79);
    let mut params = ModelParameters::init(&config, 31).unwrap();

    let (x_s, x_y) = cgt_perturb(&mut params, &batch, 0.0, STEP_SEED).unwrap();
    let bits = |t: &ser_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x_s), bits(&batch.features));
    assert_eq!(bits(&x_y), bits(&batch.features));

    let (x_s, x_y) = cgt_perturb(&mut params, &batch, 2.5, STEP_SEED).unwrap();
    let feat = 5;
    let max_len = batch.max_len();
    for (b, &vl) in batch.valid_lengths.iter().enumerate() {
        for c in 0..feat {
            for t in vl..max_len {
                let i = (b * feat + c) * max_len + t;
                assert_eq!(x_s.data()[i].to_bits(), batch.features.data()[i].to_bits());
                assert_eq!(x_y.data()[i].to_bits(), batch.features.data()[i].to_bits());
            }
        }
    }
    // and the valid region did change
    assert!(x_s
        .data()
        .iter()
        .zip(batch.features.data())
        .any(|(a, b)| a != b));
}

#[test]
fn cgt_input_gradient_matches_finite_differences() {
    let (config, batch) = tiny_batch(83);
    let params = ModelParameters::init(&config, 37).unwrap();

    // analytic input gradient of the speaker loss
    let mut p = params.clone();
    let mut tape = Tape::new();
    let ids = p.register(&mut tape);
    let x = features_leaf(&mut tape, &batch, true);
    let out = forward(
        &mut tape,
        &mut p,
        &ids,
        x,
        &batch,
        &ForwardMode::train_frozen(STEP_SEED),
        None,
    )
    .unwrap();
    let ce_spk = tape
        .cross_entropy(out.speaker_logits, batch.speaker_targets.as_ref().unwrap())
        .unwrap();
    tape.backward(ce_spk).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();

    let spk_value = |b: &SequenceBatch| -> f64 {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = features_leaf(&mut tape, b, false);
        let out = forward(&mut tape, &mut p, &ids, x, b, &ForwardMode::train_frozen(STEP_SEED), None)
            .unwrap();
        let ce = tape
            .cross_entropy(out.speaker_logits, b.speaker_targets.as_ref().unwrap())
            .unwrap();
        tape.value(ce).scalar_value()
    };

    // a handful of valid cells spread over batch/channel/time
    let feat = 5;
    let max_len = batch.max_len();
    let h = 1e-5;
    let mut checked = 0;
    for b in 0..batch.len() {
        for (c, t) in [(0usize, 0usize), (2, 3), (4, 7)] {
            if t >= batch.valid_lengths[b] {
                continue;
            }
            let idx = (b * feat + c) * max_len + t;
            let mut plus = batch.clone();
            plus.features.data_mut()[idx] += h;
            let mut minus = batch.clone();
            minus.features.data_mut()[idx] -= h;
            let numeric = (spk_value(&plus) - spk_value(&minus)) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[idx] - numeric).abs() / denom;
            assert!(
                rel < 1e-3,
                "cell ({}, {}, {}): analytic {} vs numeric {} (rel {:e})",
                b,
                c,
                t,
                analytic[idx],
                numeric,
                rel
            );
            checked += 1;
        }
    }
    assert!(checked >= 6, "only {} cells checked", checked);
}

#[test]
fn cgt_update_matches_term_by_term_assembly() {
    let (config, batch) = tiny_batch(89);
    let params = ModelParameters::init(&config, 41).unwrap();
    let cfg = TrainConfig {
        strategy: Strategy::Cgt,
        cgt_alpha: 0.5,
        cgt_epsilon: 1.0,
        clip_norm: None,
        ..Default::default()
    };

    // the implementation's single-backward step
    let mut params_impl = params.clone();
    let mut opt_impl = OptimizerState::new(&params_impl);
    train_step_cgt(&mut params_impl, &mut opt_impl, &batch, &cfg, STEP_SEED).unwrap();

    // term-by-term: four separate backward passes at the same realization
    let (x_s, x_y) = {
        let mut p = params.clone();
        cgt_perturb(&mut p, &batch, cfg.cgt_epsilon, STEP_SEED).unwrap()
    };
    let perturbed_batch = |features: &ser_core::Tensor| -> SequenceBatch {
        let mut b = batch.clone();
        b.features = features.clone();
        b
    };
    let g1 = single_loss_grads(&params, &batch, None, true);
    let g2 = single_loss_grads(&params, &batch, None, false);
    let g3 = single_loss_grads(&params, &perturbed_batch(&x_s), None, true);
    let g4 = single_loss_grads(&params, &perturbed_batch(&x_y), None, false);

    let alpha = cfg.cgt_alpha;
    // a loss that never touches a head leaves its gradient empty; that is a zero
    let at = |m: &HashMap<String, Vec<f64>>, name: &str, i: usize| -> f64 {
        m.get(name).map_or(0.0, |v| if v.is_empty() { 0.0 } else { v[i] })
    };
    let expected: GradSet = params
        .trainable()
        .iter()
        .map(|(name, t)| {
            let combine = |i: usize| -> f64 {
                (1.0 - alpha) * (at(&g1, name, i) + at(&g2, name, i))
                    + alpha * (at(&g3, name, i) + at(&g4, name, i))
            };
            (name.clone(), Some((0..t.numel()).map(combine).collect()))
        })
        .collect();

    let mut params_manual = params.clone();
    let mut opt_manual = OptimizerState::new(&params_manual);
    sgd_nesterov_update(
        &mut params_manual,
        &expected,
        &mut opt_manual,
        cfg.learning_rate,
        cfg.momentum,
        cfg.clip_norm,
    )
    .unwrap();

    for ((name_a, a), (_, b)) in params_impl.trainable().iter().zip(params_manual.trainable().iter()) {
        let diff = max_abs_diff(a.data(), b.data());
        assert!(diff < 1e-10, "{} differs by {:e}", name_a, diff);
    }
}

#[test]
fn cgt_degenerate_cases_are_bitwise_mtl() {
    let (config, batch) = tiny_batch(97);
    let params = ModelParameters::init(&config, 43).unwrap();

    for (alpha, epsilon) in [(0.0, 1.0), (1.0, 0.0), (0.5, 0.0)] {
        let mtl_cfg = TrainConfig {
            strategy: Strategy::Mtl,
            ..Default::default()
        };
        let cgt_cfg = TrainConfig {
            strategy: Strategy::Cgt,
            cgt_alpha: alpha,
            cgt_epsilon: epsilon,
            ..Default::default()
        };
        let mut params_mtl = params.clone();
        let mut opt_mtl = OptimizerState::new(&params_mtl);
        train_step(&mut params_mtl, &mut opt_mtl, &batch, &mtl_cfg, 0, STEP_SEED).unwrap();

        let mut params_cgt = params.clone();
        let mut opt_cgt = OptimizerState::new(&params_cgt);
        train_step(&mut params_cgt, &mut opt_cgt, &batch, &cgt_cfg, 0, STEP_SEED).unwrap();

        assert_eq!(
            trainable_bits(&params_mtl),
            trainable_bits(&params_cgt),
            "alpha {} epsilon {}",
            alpha,
            epsilon
        );
    }
}

// ----- optimizer arithmetic ---------------------------------------------------

fn craft_grads(params: &ModelParameters, first: Vec<f64>) -> GradSet {
    params
        .trainable()
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            if i == 0 {
                let mut g = vec![0.0; t.numel()];
                g[..first.len()].copy_from_slice(&first);
                (name.clone(), Some(g))
            } else {
                (name.clone(), None)
            }
        })
        .collect()
}

fn first_tensor_data(params: &ModelParameters) -> Vec<f64> {
    params.trainable()[0].1.data().to_vec()
}

#[test]
fn sgd_momentum_free_step() {
    let config = ModelConfig::tiny();
    let mut params = ModelParameters::init(&config, 47).unwrap();
    let before = first_tensor_data(&params);
    let grads = craft_grads(&params, vec![2.0, -4.0]);
    let mut opt = OptimizerState::new(&params);
    sgd_nesterov_update(&mut params, &grads, &mut opt, 0.1, 0.0, None).unwrap();
    let after = first_tensor_data(&params);
    assert_eq!(after[0], before[0] - 0.1 * 2.0);
    assert_eq!(after[1], before[1] - 0.1 * -4.0);
    assert_eq!(after[2], before[2]);
}

#[test]
fn sgd_first_nesterov_step_scales_by_one_plus_momentum() {
    let config = ModelConfig::tiny();
    let mut params = ModelParameters::init(&config, 53).unwrap();
    let before = first_tensor_data(&params);
    let grads = craft_grads(&params, vec![1.0]);
    let mut opt = OptimizerState::new(&params);
    sgd_nesterov_update(&mut params, &grads, &mut opt, 0.01, 0.9, None).unwrap();
    let after = first_tensor_data(&params);
    // v = g; p -= lr * (g + mu*v) = lr * 1.9 * g
    assert!((after[0] - (before[0] - 0.01 * 1.9)).abs() < 1e-15);
}

#[test]
fn sgd_clips_by_global_norm() {
    let config = ModelConfig::tiny();
    let mut params = ModelParameters::init(&config, 59).unwrap();
    let before = first_tensor_data(&params);
    let grads = craft_grads(&params, vec![6.0, 8.0]); // global norm 10
    let mut opt = OptimizerState::new(&params);
    sgd_nesterov_update(&mut params, &grads, &mut opt, 1.0, 0.0, Some(5.0)).unwrap();
    let after = first_tensor_data(&params);
    assert!((after[0] - (before[0] - 3.0)).abs() < 1e-12); // 6 * 0.5
    assert!((after[1] - (before[1] - 4.0)).abs() < 1e-12); // 8 * 0.5
}

#[test]
fn sgd_rejects_non_finite_gradients() {
    let config = ModelConfig::tiny();
    let mut params = ModelParameters::init(&config, 61).unwrap();
    let grads = craft_grads(&params, vec![f64::NAN]);
    let mut opt = OptimizerState::new(&params);
    let err = sgd_nesterov_update(&mut params, &grads, &mut opt, 0.1, 0.9, None).unwrap_err();
    match err {
        ser_core::Error::NonFinite { context } => {
            assert!(context.contains("tdnn1.kernels"), "{}", context)
        }
        other => panic!("expected non-finite error, got {:?}", other),
    }
}

// ----- training loop ------------------------------------------------------------

fn small_training_setup(seed: u64) -> (Dataset, ser_core::data::SplitManifest, ModelConfig) {
    let dataset = tiny_dataset(4, 12, seed);
    let manifest = split_by_speaker(&dataset, (0.5, 0.25, 0.25), 7).unwrap();
    (dataset, manifest, ModelConfig::tiny())
}

#[test]
fn training_is_bit_deterministic() {
    let (dataset, manifest, config) = small_training_setup(101);
    let cfg = TrainConfig {
        strategy: Strategy::Dat,
        epochs: 3,
        batch_size: 8,
        seed: 5,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let outcome = train(&dataset, &manifest, &config, &cfg, None).unwrap();
        let path = dir.path().join(format!("run{}.serm", run));
        save_checkpoint(&outcome.best, &path).unwrap();
        outputs.push((outcome.history.to_csv(), std::fs::read(&path).unwrap()));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "history CSVs differ");
    assert_eq!(outputs[0].1, outputs[1].1, "checkpoint bytes differ");
}

#[test]
fn ser_only_keeps_speaker_head_at_initialization() {
    let (dataset, manifest, config) = small_training_setup(103);
    let cfg = TrainConfig {
        strategy: Strategy::SerOnly,
        epochs: 2,
        batch_size: 8,
        seed: 11,
        ..Default::default()
    };
    let outcome = train(&dataset, &manifest, &config, &cfg, None).unwrap();
    let init = ModelParameters::init(&config, cfg.seed).unwrap();
    let head_bits = |p: &ModelParameters| -> Vec<u64> {
        p.trainable()
            .into_iter()
            .filter(|(name, _)| name.starts_with("speaker_head."))
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(head_bits(&outcome.last), head_bits(&init));
    // while the embedding network did move
    let emb_bits = |p: &ModelParameters| -> Vec<u64> {
        p.trainable()
            .into_iter()
            .filter(|(name, _)| is_embedding_param(name))
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_ne!(emb_bits(&outcome.last), emb_bits(&init));
}

#[test]
fn dat_with_zero_lambda_tracks_ser_only_embedding_trajectory() {
    let (dataset, manifest, config) = small_training_setup(107);
    let base = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 13,
        clip_norm: None,
        grl_lambda: 0.0,
        ..Default::default()
    };
    let ser = train(
        &dataset,
        &manifest,
        &config,
        &TrainConfig {
            strategy: Strategy::SerOnly,
            ..base.clone()
        },
        None,
    )
    .unwrap();
    let dat = train(
        &dataset,
        &manifest,
        &config,
        &TrainConfig {
            strategy: Strategy::Dat,
            ..base
        },
        None,
    )
    .unwrap();
    for ((name, a), (_, b)) in ser.last.trainable().iter().zip(dat.last.trainable().iter()) {
        if is_embedding_param(name) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(x == y, "{}: {} vs {}", name, x, y);
            }
        }
    }
}

#[test]
fn train_rejects_overlapping_splits() {
    let (dataset, mut manifest, config) = small_training_setup(109);
    // move one validation utterance into train to create an overlap
    let stolen = manifest.validation[0].clone();
    manifest.train.push(stolen);
    let rebuilt = ser_core::data::SplitManifest::from_id_lists(
        manifest.train.clone(),
        manifest.validation.clone(),
        manifest.test.clone(),
        &dataset,
    )
    .unwrap();
    let err = train(&dataset, &rebuilt, &config, &TrainConfig::default(), None).unwrap_err();
    match err {
        ser_core::Error::SplitOverlap { speakers } => assert!(!speakers.is_empty()),
        other => panic!("expected split overlap, got {:?}", other),
    }
}

#[test]
fn best_epoch_is_argmax_with_earliest_tie() {
    let mut history = TrainHistory::default();
    for (i, acc) in [0.3, 0.7, 0.7, 0.5].iter().enumerate() {
        history.epochs.push(ser_core::training::EpochStats {
            epoch: i,
            train_emotion_loss: 0.0,
            train_speaker_loss: 0.0,
            val_emotion_accuracy: *acc,
            speaker_head_accuracy: 0.0,
            wall_clock_s: 0.0,
        });
    }
    assert_eq!(history.best_epoch(), Some(1));
}

#[test]
fn best_checkpoint_has_the_best_recorded_accuracy() {
    let (dataset, manifest, config) = small_training_setup(113);
    let cfg = TrainConfig {
        strategy: Strategy::Mtl,
        epochs: 4,
        batch_size: 8,
        seed: 17,
        ..Default::default()
    };
    let outcome = train(&dataset, &manifest, &config, &cfg, None).unwrap();
    let best = outcome
        .history
        .epochs
        .iter()
        .map(|e| e.val_emotion_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(
        outcome.history.epochs[outcome.best_epoch].val_emotion_accuracy,
        best
    );
    assert_eq!(outcome.history.best_epoch(), Some(outcome.best_epoch));
}

#[test]
fn lambda_ramp_rises_over_first_half() {
    let cfg = TrainConfig {
        grl_lambda: 2.0,
        lambda_schedule: LambdaSchedule::Ramp,
        epochs: 10,
        ..Default::default()
    };
    assert_eq!(cfg.lambda_at(0), 0.0);
    assert_eq!(cfg.lambda_at(5), 2.0);
    assert_eq!(cfg.lambda_at(9), 2.0);
    assert!((cfg.lambda_at(2) - 0.8).abs() < 1e-12);
}

#[test]
fn checkpoint_rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.serm");
    std::fs::write(&path, b"SERX\x01\x00\x00\x00").unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(ser_core::Error::Format(_))
    ));
}
