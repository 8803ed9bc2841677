//! The four training strategies and the epoch loop.
//!
//! * `SER_ONLY` — emotion loss only; the speaker head stays at its
//!   initialization.
//! * `MTL` — emotion + speaker loss, no adversarial mechanism.
//! * `DAT` — the speaker branch sits behind a gradient reversal layer, so
//!   one backward pass trains the speaker head to classify speakers while
//!   pushing the embedding sub-network toward `grad(L_emo - lambda * L_spk)`.
//! * `CGT` — inputs are perturbed along the input-gradients of the speaker
//!   and emotion losses, and one step optimizes
//!   `(1-a)(L_emo(X) + L_spk(X)) + a(L_emo(X_s) + L_spk(X_y))` with the
//!   perturbations treated as constants.
//!
//! Optimization is SGD with Nesterov momentum and optional global-norm
//! clipping. Every reported number is a pure function of (seed, config,
//! data): batch order, dropout masks, and initialization all derive from
//! named sub-streams of the run seed.

use crate::autodiff::{Tape, TensorId};
use crate::data::{make_batches, Dataset, SpeakerSpace, SplitManifest, Utterance};
use crate::error::{Error, Result};
use crate::eval;
use crate::layers::SequenceBatch;
use crate::model::{
    features_leaf, forward, ForwardMode, ForwardOutput, ModelConfig, ModelParameters, ParamIds,
};
use crate::rng::{indexed, substream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    SerOnly,
    Mtl,
    Dat,
    Cgt,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::SerOnly, Strategy::Mtl, Strategy::Dat, Strategy::Cgt];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SerOnly => "SER_ONLY",
            Strategy::Mtl => "MTL",
            Strategy::Dat => "DAT",
            Strategy::Cgt => "CGT",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SER_ONLY" => Ok(Strategy::SerOnly),
            "MTL" => Ok(Strategy::Mtl),
            "DAT" => Ok(Strategy::Dat),
            "CGT" => Ok(Strategy::Cgt),
            other => Err(Error::Config(format!("unknown strategy '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant,
    /// 0 at epoch 0, rising linearly to `grl_lambda` over the first half of
    /// training, constant afterwards.
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grl_lambda: f64,
    pub lambda_schedule: LambdaSchedule,
    pub cgt_epsilon: f64,
    pub cgt_alpha: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::SerOnly,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            grl_lambda: 1.0,
            lambda_schedule: LambdaSchedule::Constant,
            cgt_epsilon: 1.0,
            cgt_alpha: 0.5,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.grl_lambda < 0.0 {
            return Err(Error::Config("grl_lambda must be >= 0".into()));
        }
        if self.cgt_epsilon < 0.0 {
            return Err(Error::Config("cgt_epsilon must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.cgt_alpha) {
            return Err(Error::Config("cgt_alpha must be in [0, 1]".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip_norm must be > 0 when set".into()));
            }
        }
        Ok(())
    }

    /// Effective gradient-reversal coefficient at `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.grl_lambda,
            LambdaSchedule::Ramp => {
                let half = (self.epochs / 2).max(1);
                self.grl_lambda * (epoch as f64 / half as f64).min(1.0)
            }
        }
    }
}

// ----- optimizer ---------------------------------------------------------------

/// One velocity buffer per trainable tensor, in declaration order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        let velocity = params
            .trainable()
            .into_iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        OptimizerState { velocity }
    }
}

/// Gradients per trainable tensor, aligned with
/// [`ModelParameters::trainable`] order. `None` means no gradient flowed to
/// that tensor this step (treated as zero).
pub type GradSet = Vec<(String, Option<Vec<f64>>)>;

pub fn collect_grads(tape: &Tape, ids: &ParamIds) -> GradSet {
    ids.trainable()
        .into_iter()
        .map(|(name, id)| (name, tape.grad(id).map(|g| g.to_vec())))
        .collect()
}

/// Nesterov-momentum SGD step (deep-learning approximation): optional
/// global-norm clipping, then `v <- mu*v + g; p <- p - lr*(g + mu*v)`.
pub fn sgd_nesterov_update(
    params: &mut ModelParameters,
    grads: &GradSet,
    state: &mut OptimizerState,
    learning_rate: f64,
    momentum: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "gradient set has {} tensors, optimizer state has {}",
            grads.len(),
            state.velocity.len()
        )));
    }
    for (name, grad) in grads {
        if let Some(g) = grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", name),
                });
            }
        }
    }
    let mut scale = 1.0;
    if let Some(clip) = clip_norm {
        let sq: f64 = grads
            .iter()
            .filter_map(|(_, g)| g.as_ref())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }

    let mut index = 0usize;
    let mut failure: Option<Error> = None;
    params.for_each_tensor_mut(&mut |name, tensor| {
        if !tensor.requires_grad() || failure.is_some() {
            return;
        }
        let (grad_name, grad) = &grads[index];
        if grad_name != &name {
            failure = Some(Error::Contract(format!(
                "gradient order mismatch: {} vs {}",
                grad_name, name
            )));
            return;
        }
        let velocity = &mut state.velocity[index];
        index += 1;
        match grad {
            Some(g) => {
                for ((p, v), &gi) in tensor.data_mut().iter_mut().zip(velocity.iter_mut()).zip(g) {
                    let gs = gi * scale;
                    *v = momentum * *v + gs;
                    *p -= learning_rate * (gs + momentum * *v);
                }
            }
            None => {
                for (p, v) in tensor.data_mut().iter_mut().zip(velocity.iter_mut()) {
                    *v *= momentum;
                    *p -= learning_rate * (momentum * *v);
                }
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ----- losses and steps -----------------------------------------------------------

/// The adversarial loss and its two addends.
#[derive(Debug, Clone, Copy)]
pub struct DatLoss {
    pub total: TensorId,
    pub emotion: TensorId,
    pub speaker: TensorId,
}

/// Emotion + speaker cross-entropy on a forward pass whose speaker branch
/// went through the gradient reversal layer. The returned scalar is the sum
/// of both losses; by GRL construction a single backward pass sends
/// `grad(L_emo - lambda * L_spk)` into the embedding sub-network while the
/// speaker head itself is trained to minimize its loss.
pub fn loss_dat(tape: &mut Tape, output: &ForwardOutput, batch: &SequenceBatch) -> Result<DatLoss> {
    if output.grl_lambda.is_none() {
        return Err(Error::Contract(
            "DAT loss requires a forward pass with grad_reverse on the speaker branch".into(),
        ));
    }
    let speaker_targets = batch
        .speaker_targets
        .as_ref()
        .ok_or_else(|| Error::Contract("batch has no speaker targets".into()))?;
    let emotion = tape.cross_entropy(output.emotion_logits, &batch.emotion_targets)?;
    let speaker = tape.cross_entropy(output.speaker_logits, speaker_targets)?;
    Ok(DatLoss {
        total: tape.add(emotion, speaker),
        emotion,
        speaker,
    })
}

/// Input perturbations along the speaker- and emotion-loss gradients:
/// `X_s = X + eps * grad_X L_spk` and `X_y = X + eps * grad_X L_emo`, both
/// taken at the current parameters with both heads attached and no gradient
/// reversal. Padded frames receive zero perturbation.
pub fn cgt_perturb(
    params: &mut ModelParameters,
    batch: &SequenceBatch,
    epsilon: f64,
    step_seed: u64,
) -> Result<(Tensor, Tensor)> {
    if epsilon < 0.0 {
        return Err(Error::Contract("cgt_perturb: epsilon must be >= 0".into()));
    }
    if epsilon == 0.0 {
        return Ok((batch.features.clone(), batch.features.clone()));
    }
    let speaker_targets = batch
        .speaker_targets
        .as_ref()
        .ok_or_else(|| Error::Contract("batch has no speaker targets".into()))?;

    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x = features_leaf(&mut tape, batch, true);
    let out = forward(
        &mut tape,
        params,
        &ids,
        x,
        batch,
        &ForwardMode::train_frozen(step_seed),
        None,
    )?;
    let ce_speaker = tape.cross_entropy(out.speaker_logits, speaker_targets)?;
    let ce_emotion = tape.cross_entropy(out.emotion_logits, &batch.emotion_targets)?;

    tape.backward(ce_speaker)?;
    let grad_speaker = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; batch.features.numel()]);
    tape.zero_grads();
    tape.backward(ce_emotion)?;
    let grad_emotion = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; batch.features.numel()]);

    let perturbed = |grad: &[f64]| -> Tensor {
        let mut t = batch.features.clone();
        let feat = t.shape()[1];
        let max_len = t.shape()[2];
        let data = t.data_mut();
        for (b, &vl) in batch.valid_lengths.iter().enumerate() {
            for c in 0..feat {
                let base = (b * feat + c) * max_len;
                for off in base..base + vl {
                    data[off] += epsilon * grad[off];
                }
                // frames past the valid length stay untouched
            }
        }
        t
    };
    Ok((perturbed(&grad_speaker), perturbed(&grad_emotion)))
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub emotion_loss: f64,
    pub speaker_loss: f64,
}

fn step_ser_only(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x = features_leaf(&mut tape, batch, false);
    let out = forward(
        &mut tape,
        params,
        &ids,
        x,
        batch,
        &ForwardMode::train(step_seed),
        None,
    )?;
    let ce_emotion = tape.cross_entropy(out.emotion_logits, &batch.emotion_targets)?;
    // speaker loss is reported for the history but takes no part in training
    let speaker_loss = match &batch.speaker_targets {
        Some(targets) => {
            let ce = tape.cross_entropy(out.speaker_logits, targets)?;
            tape.value(ce).scalar_value()
        }
        None => f64::NAN,
    };
    let emotion_loss = tape.value(ce_emotion).scalar_value();
    tape.backward(ce_emotion)?;
    let grads = collect_grads(&tape, &ids);
    sgd_nesterov_update(params, &grads, opt, cfg.learning_rate, cfg.momentum, cfg.clip_norm)?;
    Ok(StepOutcome {
        emotion_loss,
        speaker_loss,
    })
}

fn step_mtl(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepOutcome> {
    let speaker_targets = batch
        .speaker_targets
        .clone()
        .ok_or_else(|| Error::Contract("batch has no speaker targets".into()))?;
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x = features_leaf(&mut tape, batch, false);
    let out = forward(
        &mut tape,
        params,
        &ids,
        x,
        batch,
        &ForwardMode::train(step_seed),
        None,
    )?;
    let ce_emotion = tape.cross_entropy(out.emotion_logits, &batch.emotion_targets)?;
    let ce_speaker = tape.cross_entropy(out.speaker_logits, &speaker_targets)?;
    let loss = tape.add(ce_emotion, ce_speaker);
    let outcome = StepOutcome {
        emotion_loss: tape.value(ce_emotion).scalar_value(),
        speaker_loss: tape.value(ce_speaker).scalar_value(),
    };
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &ids);
    sgd_nesterov_update(params, &grads, opt, cfg.learning_rate, cfg.momentum, cfg.clip_norm)?;
    Ok(outcome)
}

fn step_dat(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    lambda: f64,
    step_seed: u64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x = features_leaf(&mut tape, batch, false);
    let out = forward(
        &mut tape,
        params,
        &ids,
        x,
        batch,
        &ForwardMode::train(step_seed),
        Some(lambda),
    )?;
    let loss = loss_dat(&mut tape, &out, batch)?;
    let outcome = StepOutcome {
        emotion_loss: tape.value(loss.emotion).scalar_value(),
        speaker_loss: tape.value(loss.speaker).scalar_value(),
    };
    tape.backward(loss.total)?;
    let grads = collect_grads(&tape, &ids);
    sgd_nesterov_update(params, &grads, opt, cfg.learning_rate, cfg.momentum, cfg.clip_norm)?;
    Ok(outcome)
}

/// One cross-gradient training step: perturb, then optimize
/// `(1-a)(L_emo(X) + L_spk(X)) + a(L_emo(X_s) + L_spk(X_y))` in a single
/// backward pass, with the perturbed inputs as constants. With `a == 0` or
/// `eps == 0` the objective is mathematically the MTL objective, and the
/// step runs the MTL path so the updates are bit-identical as well.
pub fn train_step_cgt(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepOutcome> {
    let alpha = cfg.cgt_alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract("cgt_alpha must be in [0, 1]".into()));
    }
    if alpha == 0.0 || cfg.cgt_epsilon == 0.0 {
        return step_mtl(params, opt, batch, cfg, step_seed);
    }
    let speaker_targets = batch
        .speaker_targets
        .clone()
        .ok_or_else(|| Error::Contract("batch has no speaker targets".into()))?;

    let (x_s, x_y) = cgt_perturb(params, batch, cfg.cgt_epsilon, step_seed)?;

    let mut tape = Tape::new();
    let ids = params.register(&mut tape);

    let x = features_leaf(&mut tape, batch, false);
    let out = forward(
        &mut tape,
        params,
        &ids,
        x,
        batch,
        &ForwardMode::train(step_seed),
        None,
    )?;
    let ce_emotion = tape.cross_entropy(out.emotion_logits, &batch.emotion_targets)?;
    let ce_speaker = tape.cross_entropy(out.speaker_logits, &speaker_targets)?;

    let xs_leaf = tape.leaf(x_s);
    let out_s = forward(
        &mut tape,
        params,
        &ids,
        xs_leaf,
        batch,
        &ForwardMode::train_frozen(step_seed),
        None,
    )?;
    let ce_emotion_s = tape.cross_entropy(out_s.emotion_logits, &batch.emotion_targets)?;

    let xy_leaf = tape.leaf(x_y);
    let out_y = forward(
        &mut tape,
        params,
        &ids,
        xy_leaf,
        batch,
        &ForwardMode::train_frozen(step_seed),
        None,
    )?;
    let ce_speaker_y = tape.cross_entropy(out_y.speaker_logits, &speaker_targets)?;

    let clean = tape.add(ce_emotion, ce_speaker);
    let perturbed = tape.add(ce_emotion_s, ce_speaker_y);
    let clean_scaled = tape.scale(clean, 1.0 - alpha);
    let perturbed_scaled = tape.scale(perturbed, alpha);
    let total = tape.add(clean_scaled, perturbed_scaled);

    let outcome = StepOutcome {
        emotion_loss: tape.value(ce_emotion).scalar_value(),
        speaker_loss: tape.value(ce_speaker).scalar_value(),
    };
    tape.backward(total)?;
    let grads = collect_grads(&tape, &ids);
    sgd_nesterov_update(params, &grads, opt, cfg.learning_rate, cfg.momentum, cfg.clip_norm)?;
    Ok(outcome)
}

/// Dispatches one optimization step for the configured strategy.
pub fn train_step(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    epoch: usize,
    step_seed: u64,
) -> Result<StepOutcome> {
    match cfg.strategy {
        Strategy::SerOnly => step_ser_only(params, opt, batch, cfg, step_seed),
        Strategy::Mtl => step_mtl(params, opt, batch, cfg, step_seed),
        Strategy::Dat => step_dat(params, opt, batch, cfg, cfg.lambda_at(epoch), step_seed),
        Strategy::Cgt => train_step_cgt(params, opt, batch, cfg, step_seed),
    }
}

// ----- history ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_emotion_loss: f64,
    pub train_speaker_loss: f64,
    pub val_emotion_accuracy: f64,
    /// Eval-mode accuracy of the speaker head on (a sample of) the training
    /// split — the adversary's own task. Speakers outside the training split
    /// are not in the head's class space, so this is the meaningful place to
    /// measure it.
    pub speaker_head_accuracy: f64,
    /// Not included in the CSV export, which must be bit-reproducible.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV with one row per epoch. Wall-clock time is deliberately omitted
    /// so identical (config, seed, data) runs produce identical bytes.
    pub const CSV_HEADER: &'static str =
        "epoch,train_emotion_loss,train_speaker_loss,val_emotion_accuracy,speaker_head_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_emotion_loss,
                e.train_speaker_loss,
                e.val_emotion_accuracy,
                e.speaker_head_accuracy
            ));
        }
        out
    }

    /// Index of the highest validation accuracy, earliest epoch on ties.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, e) in self.epochs.iter().enumerate() {
            match best {
                None => best = Some(i),
                Some(b) if e.val_emotion_accuracy > self.epochs[b].val_emotion_accuracy => {
                    best = Some(i)
                }
                _ => {}
            }
        }
        best
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation emotion accuracy.
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub history: TrainHistory,
    /// Parameters after the final epoch (not the checkpoint selection).
    pub last: ModelParameters,
}

/// Trains on `manifest.train`, selects the best epoch on
/// `manifest.validation`, and verifies speaker disjointness before touching
/// anything.
pub fn train(
    dataset: &Dataset,
    manifest: &SplitManifest,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    manifest.check_disjoint()?;

    let train_utts = dataset.by_ids(&manifest.train)?;
    let val_utts = dataset.by_ids(&manifest.validation)?;
    if train_utts.is_empty() || val_utts.is_empty() {
        return Err(Error::Config(
            "train and validation splits must be non-empty".into(),
        ));
    }
    if dataset.num_emotions() != model_config.emotion_head.classes {
        return Err(Error::Config(format!(
            "dataset has {} emotions but the emotion head expects {}",
            dataset.num_emotions(),
            model_config.emotion_head.classes
        )));
    }
    let speaker_space = SpeakerSpace::new(train_utts.iter().map(|u| u.speaker));
    if speaker_space.len() != model_config.speaker_head.classes {
        return Err(Error::Config(format!(
            "training split has {} speakers but the speaker head expects {}",
            speaker_space.len(),
            model_config.speaker_head.classes
        )));
    }
    let required = model_config.receptive_min();
    for utt in train_utts.iter().chain(&val_utts) {
        if utt.frames < required {
            return Err(Error::TooShortUtterance {
                id: utt.id.clone(),
                length: utt.frames,
                required,
            });
        }
    }

    let mut params = ModelParameters::init(model_config, cfg.seed)?;
    let mut opt = OptimizerState::new(&params);
    let shuffle_stream = substream(cfg.seed, "shuffle");
    let step_stream = substream(cfg.seed, "dropout");

    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, ModelParameters)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches = make_batches(
            &train_utts,
            model_config.feature_dim,
            model_config.emotion_head.classes,
            Some(&speaker_space),
            cfg.batch_size,
            shuffle_stream,
            epoch as u64,
        )?;
        let mut emotion_sum = 0.0;
        let mut speaker_sum = 0.0;
        let mut count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let step_seed = indexed(indexed(step_stream, epoch as u64), bi as u64);
            let outcome = train_step(&mut params, &mut opt, batch, cfg, epoch, step_seed)
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("{} (epoch {}, batch {})", context, epoch, bi),
                    },
                    other => other,
                })?;
            if !outcome.emotion_loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("emotion loss (epoch {}, batch {})", epoch, bi),
                });
            }
            emotion_sum += outcome.emotion_loss * batch.len() as f64;
            speaker_sum += outcome.speaker_loss * batch.len() as f64;
            count += batch.len();
        }

        let val_metrics = eval::evaluate(&mut params, &val_utts, cfg.batch_size)?;
        let speaker_head_accuracy =
            speaker_head_accuracy(&mut params, &train_utts, &speaker_space, cfg.batch_size)?;
        let stats = EpochStats {
            epoch,
            train_emotion_loss: emotion_sum / count as f64,
            train_speaker_loss: speaker_sum / count as f64,
            val_emotion_accuracy: val_metrics.accuracy,
            speaker_head_accuracy,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        let improved = match &best {
            None => true,
            Some((_, acc, _)) => stats.val_emotion_accuracy > *acc,
        };
        if improved {
            best = Some((epoch, stats.val_emotion_accuracy, params.clone()));
        }
        if let Some(cb) = progress.as_deref_mut() {
            cb(&stats);
        }
        history.epochs.push(stats);
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        history,
        last: params,
    })
}

/// Eval-mode accuracy of the speaker head over (up to) the first 256
/// training utterances in split order.
fn speaker_head_accuracy(
    params: &mut ModelParameters,
    train_utts: &[&Utterance],
    space: &SpeakerSpace,
    batch_size: usize,
) -> Result<f64> {
    let sample: Vec<&Utterance> = train_utts.iter().take(256).cloned().collect();
    let batches = crate::data::make_eval_batches(
        &sample,
        params.config.feature_dim,
        params.config.emotion_head.classes,
        Some(space),
        batch_size.max(1),
    )?;
    let classes = params.config.speaker_head.classes;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let x = features_leaf(&mut tape, batch, false);
        let out = forward(&mut tape, params, &ids, x, batch, &ForwardMode::eval(), None)?;
        let logits = tape.value(out.speaker_logits).data();
        for (b, &speaker) in batch.speaker_labels.iter().enumerate() {
            if let Some(class) = space.class_of(speaker) {
                if eval::argmax(&logits[b * classes..(b + 1) * classes]) == class {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}
