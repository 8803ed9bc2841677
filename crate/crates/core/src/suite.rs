//! The full gradient-verification suite: every primitive op, every layer,
//! and every composite training loss checked against central finite
//! differences on a small model. Used by the `gradcheck` CLI command and the
//! acceptance tests.

use crate::autodiff::gradcheck::{
    check_gradients, fd_error, weighted_readout, GradCheckReport, FD_STEP,
};
use crate::autodiff::{BnMode, Tape};
use crate::data::{generate_synthetic, make_batches, SpeakerSpace, SyntheticSpec};
use crate::error::Result;
use crate::layers::SequenceBatch;
use crate::model::{
    features_leaf, forward, is_embedding_param, ForwardMode, ModelConfig, ModelParameters,
};
use crate::rng::rng_from;
use crate::training::{cgt_perturb, collect_grads, loss_dat};

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.max_rel_error < self.tolerance)
    }
}

/// Runs every check. Individual op tolerances in the unit tests are tighter;
/// the suite gate is the shared 1e-4 bound.
pub fn run_gradcheck_suite() -> Result<SuiteReport> {
    let mut reports = Vec::new();
    reports.extend(primitive_checks());
    reports.extend(layer_checks());
    reports.extend(composite_checks()?);
    Ok(SuiteReport {
        reports,
        tolerance: SUITE_TOLERANCE,
    })
}

fn primitive_checks() -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    out.push(check_gradients("matmul", &[vec![3, 4], vec![4, 2]], 101, |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        weighted_readout(t, y, 101)
    }));
    out.push(check_gradients("linear", &[vec![3, 5], vec![4, 5], vec![4]], 103, |t, ids| {
        let y = t.linear(ids[0], ids[1], ids[2]);
        weighted_readout(t, y, 103)
    }));
    out.push(check_gradients("add_mul_scale", &[vec![2, 3], vec![2, 3]], 107, |t, ids| {
        let a = t.scale(ids[0], -1.3);
        let b = t.mul(a, ids[1]);
        let c = t.add(b, ids[0]);
        weighted_readout(t, c, 107)
    }));
    out.push(check_gradients("relu", &[vec![3, 3]], 109, |t, ids| {
        let y = t.relu(ids[0]);
        weighted_readout(t, y, 109)
    }));
    out.push(check_gradients("sigmoid", &[vec![3, 3]], 113, |t, ids| {
        let y = t.sigmoid(ids[0]);
        weighted_readout(t, y, 113)
    }));
    out.push(check_gradients("tanh", &[vec![3, 3]], 127, |t, ids| {
        let y = t.tanh(ids[0]);
        weighted_readout(t, y, 127)
    }));
    out.push(check_gradients("cross_entropy", &[vec![3, 4]], 131, |t, ids| {
        let targets = crate::tensor::Tensor::new(
            vec![3, 4],
            vec![
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        t.cross_entropy(ids[0], &targets).unwrap()
    }));
    out.push(grad_reverse_check());
    out
}

/// grad_reverse deliberately disagrees with the finite differences of its
/// identity forward by a factor of -lambda, so it gets a bespoke check.
fn grad_reverse_check() -> GradCheckReport {
    use rand::Rng as _;
    let lambda = 1.0;
    let mut rng = rng_from(137);
    let base: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval = |data: &[f64], with_grad: bool| {
        let mut tape = Tape::new();
        let mut t = crate::tensor::Tensor::new(vec![2, 3], data.to_vec()).unwrap();
        t.set_requires_grad(with_grad);
        let x = tape.leaf(t);
        let y = tape.grad_reverse(x, lambda);
        let loss = weighted_readout(&mut tape, y, 137);
        (tape, x, loss)
    };
    let (mut tape, x, loss) = eval(&base, true);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();
    let mut worst = 0.0f64;
    for e in 0..base.len() {
        let mut plus = base.clone();
        plus[e] += FD_STEP;
        let (tp, _, lp) = eval(&plus, false);
        let mut minus = base.clone();
        minus[e] -= FD_STEP;
        let (tm, _, lm) = eval(&minus, false);
        let numeric =
            (tp.value(lp).scalar_value() - tm.value(lm).scalar_value()) / (2.0 * FD_STEP);
        worst = worst.max(fd_error(analytic[e], -lambda * numeric));
    }
    GradCheckReport {
        op_name: "grad_reverse".into(),
        max_rel_error: worst,
        per_input_errors: vec![worst],
    }
}

fn layer_checks() -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    out.push(check_gradients(
        "conv1d_dilated",
        &[vec![2, 3, 11], vec![4, 3, 3], vec![4]],
        139,
        |t, ids| {
            let y = t.conv1d(ids[0], ids[1], ids[2], 2).unwrap();
            weighted_readout(t, y, 139)
        },
    ));
    let (feat, hidden, len) = (2usize, 3usize, 4usize);
    let h4 = 4 * hidden;
    out.push(check_gradients(
        "bilstm",
        &[
            vec![2, feat, len],
            vec![h4, feat],
            vec![h4, hidden],
            vec![h4],
            vec![h4, feat],
            vec![h4, hidden],
            vec![h4],
        ],
        149,
        move |t, ids| {
            let y = t
                .bilstm(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], &[len, len - 1])
                .unwrap();
            weighted_readout(t, y, 149)
        },
    ));
    out.push(check_gradients("stats_pool", &[vec![2, 3, 6]], 151, |t, ids| {
        let y = t.stats_pool(ids[0], &[6, 4], 1e-5).unwrap();
        weighted_readout(t, y, 151)
    }));
    out.push(check_gradients(
        "batchnorm_train",
        &[vec![4, 3], vec![3], vec![3]],
        157,
        |t, ids| {
            let (y, _) = t
                .batch_norm(ids[0], ids[1], ids[2], &BnMode::Train { valid: None }, 1e-5)
                .unwrap();
            weighted_readout(t, y, 157)
        },
    ));
    out.push(check_gradients(
        "batchnorm_train_masked",
        &[vec![2, 3, 5], vec![3], vec![3]],
        163,
        |t, ids| {
            let mode = BnMode::Train {
                valid: Some(vec![5, 3]),
            };
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], &mode, 1e-5).unwrap();
            weighted_readout(t, y, 163)
        },
    ));
    out.push(check_gradients(
        "batchnorm_eval",
        &[vec![3, 2], vec![2], vec![2]],
        167,
        |t, ids| {
            let mode = BnMode::Eval {
                running_mean: vec![0.2, -0.4],
                running_var: vec![1.1, 0.6],
                valid: None,
            };
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], &mode, 1e-5).unwrap();
            weighted_readout(t, y, 167)
        },
    ));
    out.push(check_gradients("dropout", &[vec![3, 5]], 173, |t, ids| {
        let mut rng = rng_from(4242);
        let y = t.dropout(ids[0], 0.5, &mut rng);
        weighted_readout(t, y, 173)
    }));
    out
}

// ----- composite losses over the small model -------------------------------

/// Fixed small batch for model-level checks.
pub fn suite_batch() -> (ModelConfig, SequenceBatch) {
    let config = ModelConfig::tiny();
    let dataset = generate_synthetic(&SyntheticSpec {
        num_speakers: 2,
        utterances_per_speaker: 2,
        feature_dim: config.feature_dim,
        num_emotions: config.emotion_head.classes,
        length_range: (10, 12),
        noise_sigma: 0.4,
        seed: 4711,
        ..Default::default()
    })
    .expect("suite dataset");
    let refs: Vec<&crate::data::Utterance> = dataset.utterances.iter().collect();
    let space = SpeakerSpace::new(refs.iter().map(|u| u.speaker));
    let batch = make_batches(&refs, config.feature_dim, config.emotion_head.classes, Some(&space), 4, 0, 0)
        .expect("suite batch")
        .remove(0);
    (config, batch)
}

/// Loss values under a fixed network realization (`train_frozen` keeps
/// dropout masks pinned to `step_seed` and leaves running statistics alone).
fn loss_values(
    params: &ModelParameters,
    batch: &SequenceBatch,
    step_seed: u64,
    grl_lambda: Option<f64>,
) -> (f64, f64) {
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
        &ForwardMode::train_frozen(step_seed),
        grl_lambda,
    )
    .expect("suite forward");
    let ce_emotion = tape
        .cross_entropy(out.emotion_logits, &batch.emotion_targets)
        .unwrap();
    let ce_speaker = tape
        .cross_entropy(out.speaker_logits, batch.speaker_targets.as_ref().unwrap())
        .unwrap();
    (
        tape.value(ce_emotion).scalar_value(),
        tape.value(ce_speaker).scalar_value(),
    )
}

fn perturbed(params: &ModelParameters, tensor_index: usize, element: usize, delta: f64) -> ModelParameters {
    let mut p = params.clone();
    let mut i = 0usize;
    p.for_each_tensor_mut(&mut |_, t| {
        if t.requires_grad() {
            if i == tensor_index {
                t.data_mut()[element] += delta;
            }
            i += 1;
        }
    });
    p
}

/// Compares analytic per-parameter gradients against central differences of
/// `objective(params) -> f64`, where the expected analytic gradient of
/// parameter group `name` is `signed(name)` times the objective pieces —
/// callers fold that into the objective itself.
fn fd_check(
    op_name: &str,
    params: &ModelParameters,
    analytic: &[(String, Option<Vec<f64>>)],
    objective: &dyn Fn(&ModelParameters, &str) -> f64,
) -> GradCheckReport {
    let mut per_input_errors = Vec::with_capacity(analytic.len());
    for (tensor_index, (name, grad)) in analytic.iter().enumerate() {
        let grad = grad.clone().unwrap_or_default();
        let mut worst = 0.0f64;
        for (element, &a) in grad.iter().enumerate() {
            let plus = perturbed(params, tensor_index, element, FD_STEP);
            let minus = perturbed(params, tensor_index, element, -FD_STEP);
            let numeric = (objective(&plus, name) - objective(&minus, name)) / (2.0 * FD_STEP);
            worst = worst.max(fd_error(a, numeric));
        }
        per_input_errors.push(worst);
    }
    GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: per_input_errors.iter().cloned().fold(0.0, f64::max),
        per_input_errors,
    }
}

/// Picks a parameter draw whose ReLU pre-activations sit clear of the kink,
/// so finite differences stay on one side.
fn pick_clean_params(config: &ModelConfig, batch: &SequenceBatch, step_seed: u64) -> ModelParameters {
    for attempt in 0..32u64 {
        let params = ModelParameters::init(config, 9000 + attempt).expect("init");
        let mut p = params.clone();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = features_leaf(&mut tape, batch, false);
        forward(
            &mut tape,
            &mut p,
            &ids,
            x,
            batch,
            &ForwardMode::train_frozen(step_seed),
            Some(1.0),
        )
        .expect("forward");
        if !tape.has_relu_near_kink(1e-3) {
            return params;
        }
    }
    panic!("no parameter draw clear of ReLU kinks");
}

fn composite_checks() -> Result<Vec<GradCheckReport>> {
    let (config, batch) = suite_batch();
    let step_seed = 7777;
    let params = pick_clean_params(&config, &batch, step_seed);
    let mut out = Vec::new();

    // MTL: gradient of L_emo + L_spk
    {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = features_leaf(&mut tape, &batch, false);
        let fwd = forward(&mut tape, &mut p, &ids, x, &batch, &ForwardMode::train_frozen(step_seed), None)?;
        let ce_e = tape.cross_entropy(fwd.emotion_logits, &batch.emotion_targets)?;
        let ce_s = tape.cross_entropy(fwd.speaker_logits, batch.speaker_targets.as_ref().unwrap())?;
        let total = tape.add(ce_e, ce_s);
        tape.backward(total)?;
        let analytic = collect_grads(&tape, &ids);
        out.push(fd_check("loss_mtl", &params, &analytic, &|p, _| {
            let (e, s) = loss_values(p, &batch, step_seed, None);
            e + s
        }));
    }

    // DAT: embedding parameters follow L_emo - lambda * L_spk, both heads
    // follow L_emo + L_spk
    for lambda in [0.0, 0.5, 1.0] {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = features_leaf(&mut tape, &batch, false);
        let fwd = forward(
            &mut tape,
            &mut p,
            &ids,
            x,
            &batch,
            &ForwardMode::train_frozen(step_seed),
            Some(lambda),
        )?;
        let loss = loss_dat(&mut tape, &fwd, &batch)?;
        tape.backward(loss.total)?;
        let analytic = collect_grads(&tape, &ids);
        let batch_ref = &batch;
        out.push(fd_check(
            &format!("loss_dat_lambda_{}", lambda),
            &params,
            &analytic,
            &move |p, name| {
                let (e, s) = loss_values(p, batch_ref, step_seed, Some(lambda));
                if is_embedding_param(name) {
                    e - lambda * s
                } else {
                    e + s
                }
            },
        ));
    }

    // CGT: perturbed inputs are constants; the objective under check keeps
    // them frozen at the base parameters, matching the implementation.
    for alpha in [0.0, 0.5, 1.0] {
        for epsilon in [0.0, 1.0] {
            let mut base = params.clone();
            let (x_s, x_y) = cgt_perturb(&mut base, &batch, epsilon, step_seed)?;

            let cgt_value = {
                let batch = &batch;
                let x_s = x_s.clone();
                let x_y = x_y.clone();
                move |p: &ModelParameters| -> f64 {
                    let mut p = p.clone();
                    let mut tape = Tape::new();
                    let ids = p.register(&mut tape);
                    let mode = ForwardMode::train_frozen(step_seed);
                    let x = features_leaf(&mut tape, batch, false);
                    let f = forward(&mut tape, &mut p, &ids, x, batch, &mode, None).unwrap();
                    let e = tape.cross_entropy(f.emotion_logits, &batch.emotion_targets).unwrap();
                    let s = tape
                        .cross_entropy(f.speaker_logits, batch.speaker_targets.as_ref().unwrap())
                        .unwrap();
                    let xs = tape.leaf(x_s.clone());
                    let fs = forward(&mut tape, &mut p, &ids, xs, batch, &mode, None).unwrap();
                    let es = tape.cross_entropy(fs.emotion_logits, &batch.emotion_targets).unwrap();
                    let xy = tape.leaf(x_y.clone());
                    let fy = forward(&mut tape, &mut p, &ids, xy, batch, &mode, None).unwrap();
                    let sy = tape
                        .cross_entropy(fy.speaker_logits, batch.speaker_targets.as_ref().unwrap())
                        .unwrap();
                    (1.0 - alpha)
                        * (tape.value(e).scalar_value() + tape.value(s).scalar_value())
                        + alpha
                            * (tape.value(es).scalar_value() + tape.value(sy).scalar_value())
                }
            };

            let analytic = {
                let mut p = params.clone();
                let mut tape = Tape::new();
                let ids = p.register(&mut tape);
                let mode = ForwardMode::train_frozen(step_seed);
                let x = features_leaf(&mut tape, &batch, false);
                let f = forward(&mut tape, &mut p, &ids, x, &batch, &mode, None)?;
                let e = tape.cross_entropy(f.emotion_logits, &batch.emotion_targets)?;
                let s = tape.cross_entropy(f.speaker_logits, batch.speaker_targets.as_ref().unwrap())?;
                let xs = tape.leaf(x_s.clone());
                let fs = forward(&mut tape, &mut p, &ids, xs, &batch, &mode, None)?;
                let es = tape.cross_entropy(fs.emotion_logits, &batch.emotion_targets)?;
                let xy = tape.leaf(x_y.clone());
                let fy = forward(&mut tape, &mut p, &ids, xy, &batch, &mode, None)?;
                let sy = tape.cross_entropy(fy.speaker_logits, batch.speaker_targets.as_ref().unwrap())?;
                let clean = tape.add(e, s);
                let pert = tape.add(es, sy);
                let a = tape.scale(clean, 1.0 - alpha);
                let b = tape.scale(pert, alpha);
                let total = tape.add(a, b);
                tape.backward(total)?;
                collect_grads(&tape, &ids)
            };

            out.push(fd_check(
                &format!("loss_cgt_alpha_{}_eps_{}", alpha, epsilon),
                &params,
                &analytic,
                &move |p, _| cgt_value(p),
            ));
        }
    }

    Ok(out)
}
