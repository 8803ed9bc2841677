//! The full network: a TDNN x2 -> BiLSTM -> frame-wise FC -> statistics
//! pooling embedding sub-network feeding an emotion classification head and
//! a speaker classification head. The speaker head optionally sits behind a
//! gradient reversal layer, which is how the adversarial strategy reverses
//! speaker gradients into the embedding sub-network.

use crate::autodiff::{Tape, TensorId};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_forward, BatchNorm1d, BiLstmIds, BiLstmLayer, BnIds, DenseIds, DenseLayer,
    SequenceBatch, TdnnIds, TdnnLayer, STATS_POOL_EPS,
};
use crate::rng::{rng_from, substream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

// ----- configuration ---------------------------------------------------------

/// `channels-kernel-dilation` triple of one TDNN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdnnSpec {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

/// Hidden sizes and output classes of one classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

/// Where batch normalization and dropout are applied. The default reading:
/// BN after each TDNN layer and each hidden FC layer (affine -> BN -> ReLU),
/// dropout on the BiLSTM output frames and on hidden FC activations, never
/// on output layers. The flags make other readings expressible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub batchnorm: bool,
    pub dropout_lstm_output: bool,
    pub dropout_hidden_fc: bool,
    pub dropout_tdnn: bool,
    pub keep_prob: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            batchnorm: true,
            dropout_lstm_output: true,
            dropout_hidden_fc: true,
            dropout_tdnn: false,
            keep_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub tdnn1: TdnnSpec,
    pub tdnn2: TdnnSpec,
    pub lstm_hidden: usize,
    /// Frame-wise FC width; the pooled embedding is twice this (mean ++ std).
    pub fc_embed_dim: usize,
    pub emotion_head: HeadSpec,
    pub speaker_head: HeadSpec,
    #[serde(default)]
    pub regularization: RegularizationConfig,
}

impl ModelConfig {
    /// TDNN 128-5-2, TDNN 64-3-4, Bi-LSTM 64, FC 256, heads 512-64-64-4 and
    /// 512-64-64-8, for 39-dim features.
    pub fn iemocap() -> Self {
        ModelConfig {
            feature_dim: 39,
            tdnn1: TdnnSpec { channels: 128, kernel: 5, dilation: 2 },
            tdnn2: TdnnSpec { channels: 64, kernel: 3, dilation: 4 },
            lstm_hidden: 64,
            fc_embed_dim: 256,
            emotion_head: HeadSpec { hidden1: 64, hidden2: 64, classes: 4 },
            speaker_head: HeadSpec { hidden1: 64, hidden2: 64, classes: 8 },
            regularization: RegularizationConfig::default(),
        }
    }

    /// TDNN 128-5-2, TDNN 128-3-4, Bi-LSTM 128, FC 512, heads
    /// 1024-128-128-4 and 1024-128-128-200.
    pub fn mandarin() -> Self {
        ModelConfig {
            feature_dim: 39,
            tdnn1: TdnnSpec { channels: 128, kernel: 5, dilation: 2 },
            tdnn2: TdnnSpec { channels: 128, kernel: 3, dilation: 4 },
            lstm_hidden: 128,
            fc_embed_dim: 512,
            emotion_head: HeadSpec { hidden1: 128, hidden2: 128, classes: 4 },
            speaker_head: HeadSpec { hidden1: 128, hidden2: 128, classes: 200 },
            regularization: RegularizationConfig::default(),
        }
    }

    /// Small configuration for gradient checks and oracle tests: TDNN 4-3-1
    /// twice, LSTM 3, FC 8 (16-dim embedding), heads 16-4-4-2.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 5,
            tdnn1: TdnnSpec { channels: 4, kernel: 3, dilation: 1 },
            tdnn2: TdnnSpec { channels: 4, kernel: 3, dilation: 1 },
            lstm_hidden: 3,
            fc_embed_dim: 8,
            emotion_head: HeadSpec { hidden1: 4, hidden2: 4, classes: 2 },
            speaker_head: HeadSpec { hidden1: 4, hidden2: 4, classes: 2 },
            regularization: RegularizationConfig::default(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.fc_embed_dim
    }

    /// Shortest sequence for which both convolutions still produce a frame:
    /// `1 + D1*(K1-1) + D2*(K2-1)`.
    pub fn receptive_min(&self) -> usize {
        1 + self.tdnn1.dilation * (self.tdnn1.kernel - 1)
            + self.tdnn2.dilation * (self.tdnn2.kernel - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.feature_dim,
            self.tdnn1.channels,
            self.tdnn1.kernel,
            self.tdnn1.dilation,
            self.tdnn2.channels,
            self.tdnn2.kernel,
            self.tdnn2.dilation,
            self.lstm_hidden,
            self.fc_embed_dim,
            self.emotion_head.hidden1,
            self.emotion_head.hidden2,
            self.speaker_head.hidden1,
            self.speaker_head.hidden2,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.emotion_head.classes < 2 || self.speaker_head.classes < 2 {
            return Err(Error::Config("classifier heads need at least 2 classes".into()));
        }
        let keep = self.regularization.keep_prob;
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!("keep_prob {} not in (0, 1]", keep)));
        }
        Ok(())
    }
}

// ----- parameters --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub fc1: DenseLayer,
    pub bn1: Option<BatchNorm1d>,
    pub fc2: DenseLayer,
    pub bn2: Option<BatchNorm1d>,
    pub out: DenseLayer,
}

impl ClassifierHead {
    fn init(input: usize, spec: &HeadSpec, batchnorm: bool, rng: &mut crate::rng::Rng) -> Self {
        ClassifierHead {
            fc1: DenseLayer::init(input, spec.hidden1, rng),
            bn1: batchnorm.then(|| BatchNorm1d::new(spec.hidden1)),
            fc2: DenseLayer::init(spec.hidden1, spec.hidden2, rng),
            bn2: batchnorm.then(|| BatchNorm1d::new(spec.hidden2)),
            out: DenseLayer::init(spec.hidden2, spec.classes, rng),
        }
    }
}

/// All weights of the three sub-networks, plus batch-norm running state.
/// Tensor traversal order (`for_each_tensor`) is the declaration order used
/// by checkpoint serialization and optimizer state; it must not change.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub tdnn1: TdnnLayer,
    pub bn1: Option<BatchNorm1d>,
    pub tdnn2: TdnnLayer,
    pub bn2: Option<BatchNorm1d>,
    pub lstm: BiLstmLayer,
    pub frame_fc: DenseLayer,
    pub bn_fc: Option<BatchNorm1d>,
    pub emotion_head: ClassifierHead,
    pub speaker_head: ClassifierHead,
}

impl ModelParameters {
    /// Deterministic initialization: same `(config, seed)` gives bit-identical
    /// parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(substream(seed, "init"));
        let bn = config.regularization.batchnorm;
        let tdnn1 = TdnnLayer::init(
            config.feature_dim,
            config.tdnn1.channels,
            config.tdnn1.kernel,
            config.tdnn1.dilation,
            &mut rng,
        );
        let tdnn2 = TdnnLayer::init(
            config.tdnn1.channels,
            config.tdnn2.channels,
            config.tdnn2.kernel,
            config.tdnn2.dilation,
            &mut rng,
        );
        let lstm = BiLstmLayer::init(config.tdnn2.channels, config.lstm_hidden, &mut rng);
        let frame_fc = DenseLayer::init(2 * config.lstm_hidden, config.fc_embed_dim, &mut rng);
        let embedding = config.embedding_dim();
        let emotion_head = ClassifierHead::init(embedding, &config.emotion_head, bn, &mut rng);
        let speaker_head = ClassifierHead::init(embedding, &config.speaker_head, bn, &mut rng);
        Ok(ModelParameters {
            bn1: bn.then(|| BatchNorm1d::new(config.tdnn1.channels)),
            bn2: bn.then(|| BatchNorm1d::new(config.tdnn2.channels)),
            bn_fc: bn.then(|| BatchNorm1d::new(config.fc_embed_dim)),
            config: config.clone(),
            tdnn1,
            tdnn2,
            lstm,
            frame_fc,
            emotion_head,
            speaker_head,
        })
    }

    pub fn for_each_tensor(&self, f: &mut dyn FnMut(String, &Tensor)) {
        let bn = |name: &str, layer: &Option<BatchNorm1d>, f: &mut dyn FnMut(String, &Tensor)| {
            if let Some(b) = layer {
                f(format!("{}.gamma", name), &b.gamma);
                f(format!("{}.beta", name), &b.beta);
                f(format!("{}.running_mean", name), &b.running_mean);
                f(format!("{}.running_var", name), &b.running_var);
            }
        };
        let head = |name: &str, h: &ClassifierHead, f: &mut dyn FnMut(String, &Tensor)| {
            f(format!("{}.fc1.weights", name), &h.fc1.weights);
            f(format!("{}.fc1.bias", name), &h.fc1.bias);
            bn(&format!("{}.bn1", name), &h.bn1, f);
            f(format!("{}.fc2.weights", name), &h.fc2.weights);
            f(format!("{}.fc2.bias", name), &h.fc2.bias);
            bn(&format!("{}.bn2", name), &h.bn2, f);
            f(format!("{}.out.weights", name), &h.out.weights);
            f(format!("{}.out.bias", name), &h.out.bias);
        };
        f("tdnn1.kernels".into(), &self.tdnn1.kernels);
        f("tdnn1.bias".into(), &self.tdnn1.bias);
        bn("bn1", &self.bn1, f);
        f("tdnn2.kernels".into(), &self.tdnn2.kernels);
        f("tdnn2.bias".into(), &self.tdnn2.bias);
        bn("bn2", &self.bn2, f);
        f("lstm.wx_f".into(), &self.lstm.wx_f);
        f("lstm.wh_f".into(), &self.lstm.wh_f);
        f("lstm.b_f".into(), &self.lstm.b_f);
        f("lstm.wx_b".into(), &self.lstm.wx_b);
        f("lstm.wh_b".into(), &self.lstm.wh_b);
        f("lstm.b_b".into(), &self.lstm.b_b);
        f("frame_fc.weights".into(), &self.frame_fc.weights);
        f("frame_fc.bias".into(), &self.frame_fc.bias);
        bn("bn_fc", &self.bn_fc, f);
        head("emotion_head", &self.emotion_head, f);
        head("speaker_head", &self.speaker_head, f);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        let bn =
            |name: &str, layer: &mut Option<BatchNorm1d>, f: &mut dyn FnMut(String, &mut Tensor)| {
                if let Some(b) = layer {
                    f(format!("{}.gamma", name), &mut b.gamma);
                    f(format!("{}.beta", name), &mut b.beta);
                    f(format!("{}.running_mean", name), &mut b.running_mean);
                    f(format!("{}.running_var", name), &mut b.running_var);
                }
            };
        let head =
            |name: &str, h: &mut ClassifierHead, f: &mut dyn FnMut(String, &mut Tensor)| {
                f(format!("{}.fc1.weights", name), &mut h.fc1.weights);
                f(format!("{}.fc1.bias", name), &mut h.fc1.bias);
                bn(&format!("{}.bn1", name), &mut h.bn1, f);
                f(format!("{}.fc2.weights", name), &mut h.fc2.weights);
                f(format!("{}.fc2.bias", name), &mut h.fc2.bias);
                bn(&format!("{}.bn2", name), &mut h.bn2, f);
                f(format!("{}.out.weights", name), &mut h.out.weights);
                f(format!("{}.out.bias", name), &mut h.out.bias);
            };
        f("tdnn1.kernels".into(), &mut self.tdnn1.kernels);
        f("tdnn1.bias".into(), &mut self.tdnn1.bias);
        bn("bn1", &mut self.bn1, f);
        f("tdnn2.kernels".into(), &mut self.tdnn2.kernels);
        f("tdnn2.bias".into(), &mut self.tdnn2.bias);
        bn("bn2", &mut self.bn2, f);
        f("lstm.wx_f".into(), &mut self.lstm.wx_f);
        f("lstm.wh_f".into(), &mut self.lstm.wh_f);
        f("lstm.b_f".into(), &mut self.lstm.b_f);
        f("lstm.wx_b".into(), &mut self.lstm.wx_b);
        f("lstm.wh_b".into(), &mut self.lstm.wh_b);
        f("lstm.b_b".into(), &mut self.lstm.b_b);
        f("frame_fc.weights".into(), &mut self.frame_fc.weights);
        f("frame_fc.bias".into(), &mut self.frame_fc.bias);
        bn("bn_fc", &mut self.bn_fc, f);
        head("emotion_head", &mut self.emotion_head, f);
        head("speaker_head", &mut self.speaker_head, f);
    }

    /// (name, tensor) pairs for the trainable subset, in declaration order.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, t| {
            if t.requires_grad() {
                out.push((name, t.clone()));
            }
        });
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, t| {
            if t.requires_grad() {
                out.push(name);
            }
        });
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every trainable tensor as a tape leaf and returns the ids.
    pub fn register(&self, tape: &mut Tape) -> ParamIds {
        let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(t.clone());
        let bn_ids = |tape: &mut Tape, layer: &Option<BatchNorm1d>| {
            layer.as_ref().map(|b| BnIds {
                gamma: leaf(tape, &b.gamma),
                beta: leaf(tape, &b.beta),
            })
        };
        let dense_ids = |tape: &mut Tape, d: &DenseLayer| DenseIds {
            weights: leaf(tape, &d.weights),
            bias: leaf(tape, &d.bias),
        };
        let head_ids = |tape: &mut Tape, h: &ClassifierHead| HeadIds {
            fc1: dense_ids(tape, &h.fc1),
            bn1: bn_ids(tape, &h.bn1),
            fc2: dense_ids(tape, &h.fc2),
            bn2: bn_ids(tape, &h.bn2),
            out: dense_ids(tape, &h.out),
        };
        let tdnn_ids = |tape: &mut Tape, t: &TdnnLayer| TdnnIds {
            kernels: leaf(tape, &t.kernels),
            bias: leaf(tape, &t.bias),
            dilation: t.dilation,
        };
        // frame-wise FC runs as a kernel-size-1 convolution; the weight
        // matrix reshapes to Dout x Din x 1 without moving data
        let frame_fc_kernel = {
            let w = &self.frame_fc.weights;
            let mut t = Tensor::new(
                vec![w.shape()[0], w.shape()[1], 1],
                w.data().to_vec(),
            )
            .expect("reshape");
            t.set_requires_grad(true);
            t
        };
        ParamIds {
            tdnn1: tdnn_ids(tape, &self.tdnn1),
            bn1: bn_ids(tape, &self.bn1),
            tdnn2: tdnn_ids(tape, &self.tdnn2),
            bn2: bn_ids(tape, &self.bn2),
            lstm: BiLstmIds {
                wx_f: leaf(tape, &self.lstm.wx_f),
                wh_f: leaf(tape, &self.lstm.wh_f),
                b_f: leaf(tape, &self.lstm.b_f),
                wx_b: leaf(tape, &self.lstm.wx_b),
                wh_b: leaf(tape, &self.lstm.wh_b),
                b_b: leaf(tape, &self.lstm.b_b),
            },
            frame_fc: TdnnIds {
                kernels: tape.leaf(frame_fc_kernel),
                bias: leaf(tape, &self.frame_fc.bias),
                dilation: 1,
            },
            bn_fc: bn_ids(tape, &self.bn_fc),
            emotion: head_ids(tape, &self.emotion_head),
            speaker: head_ids(tape, &self.speaker_head),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub fc1: DenseIds,
    pub bn1: Option<BnIds>,
    pub fc2: DenseIds,
    pub bn2: Option<BnIds>,
    pub out: DenseIds,
}

/// Tape ids of the registered trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub tdnn1: TdnnIds,
    pub bn1: Option<BnIds>,
    pub tdnn2: TdnnIds,
    pub bn2: Option<BnIds>,
    pub lstm: BiLstmIds,
    pub frame_fc: TdnnIds,
    pub bn_fc: Option<BnIds>,
    pub emotion: HeadIds,
    pub speaker: HeadIds,
}

impl ParamIds {
    /// (name, id) pairs in the same order as
    /// [`ModelParameters::trainable`]. The names double as group labels:
    /// everything not under `emotion_head.` / `speaker_head.` belongs to the
    /// embedding sub-network.
    pub fn trainable(&self) -> Vec<(String, TensorId)> {
        let mut out: Vec<(String, TensorId)> = Vec::new();
        let bn = |name: &str, ids: &Option<BnIds>, out: &mut Vec<(String, TensorId)>| {
            if let Some(b) = ids {
                out.push((format!("{}.gamma", name), b.gamma));
                out.push((format!("{}.beta", name), b.beta));
            }
        };
        out.push(("tdnn1.kernels".into(), self.tdnn1.kernels));
        out.push(("tdnn1.bias".into(), self.tdnn1.bias));
        bn("bn1", &self.bn1, &mut out);
        out.push(("tdnn2.kernels".into(), self.tdnn2.kernels));
        out.push(("tdnn2.bias".into(), self.tdnn2.bias));
        bn("bn2", &self.bn2, &mut out);
        out.push(("lstm.wx_f".into(), self.lstm.wx_f));
        out.push(("lstm.wh_f".into(), self.lstm.wh_f));
        out.push(("lstm.b_f".into(), self.lstm.b_f));
        out.push(("lstm.wx_b".into(), self.lstm.wx_b));
        out.push(("lstm.wh_b".into(), self.lstm.wh_b));
        out.push(("lstm.b_b".into(), self.lstm.b_b));
        out.push(("frame_fc.weights".into(), self.frame_fc.kernels));
        out.push(("frame_fc.bias".into(), self.frame_fc.bias));
        bn("bn_fc", &self.bn_fc, &mut out);
        for (name, head) in [("emotion_head", &self.emotion), ("speaker_head", &self.speaker)] {
            out.push((format!("{}.fc1.weights", name), head.fc1.weights));
            out.push((format!("{}.fc1.bias", name), head.fc1.bias));
            bn(&format!("{}.bn1", name), &head.bn1, &mut out);
            out.push((format!("{}.fc2.weights", name), head.fc2.weights));
            out.push((format!("{}.fc2.bias", name), head.fc2.bias));
            bn(&format!("{}.bn2", name), &head.bn2, &mut out);
            out.push((format!("{}.out.weights", name), head.out.weights));
            out.push((format!("{}.out.bias", name), head.out.bias));
        }
        out
    }
}

/// True for parameters of the shared embedding sub-network (as opposed to
/// either classifier head).
pub fn is_embedding_param(name: &str) -> bool {
    !name.starts_with("emotion_head.") && !name.starts_with("speaker_head.")
}

// ----- forward -----------------------------------------------------------------

/// Forward-pass mode. `step_seed` drives dropout masks: every forward call
/// with the same seed draws identical masks, which is what lets the
/// cross-gradient strategy evaluate clean and perturbed inputs through the
/// same network realization. `update_running` gates batch-norm running
/// statistic updates so auxiliary passes leave eval state untouched.
#[derive(Debug, Clone, Copy)]
pub struct ForwardMode {
    pub training: bool,
    pub step_seed: u64,
    pub update_running: bool,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            training: false,
            step_seed: 0,
            update_running: false,
        }
    }

    pub fn train(step_seed: u64) -> Self {
        ForwardMode {
            training: true,
            step_seed,
            update_running: true,
        }
    }

    /// Training-mode computation without touching running statistics.
    pub fn train_frozen(step_seed: u64) -> Self {
        ForwardMode {
            training: true,
            step_seed,
            update_running: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `B x 2*fc_embed_dim`, consumed by both heads.
    pub embedding: TensorId,
    /// `B x num_emotions`, pre-softmax.
    pub emotion_logits: TensorId,
    /// `B x num_speakers`, pre-softmax.
    pub speaker_logits: TensorId,
    /// The gradient-reversal coefficient the speaker branch was built with.
    pub grl_lambda: Option<f64>,
}

/// Creates the feature leaf for a batch. `requires_grad` is set when input
/// gradients are needed (cross-gradient perturbations).
pub fn features_leaf(tape: &mut Tape, batch: &SequenceBatch, requires_grad: bool) -> TensorId {
    let mut t = batch.features.clone();
    t.set_requires_grad(requires_grad);
    tape.leaf(t)
}

/// Runs the full pipeline. The emotion head always consumes the embedding
/// directly; the speaker head consumes `grad_reverse(embedding, lambda)`
/// when `grl_lambda` is given, else the embedding itself.
pub fn forward(
    tape: &mut Tape,
    params: &mut ModelParameters,
    ids: &ParamIds,
    features: TensorId,
    batch: &SequenceBatch,
    mode: &ForwardMode,
    grl_lambda: Option<f64>,
) -> Result<ForwardOutput> {
    let required = params.config.receptive_min();
    for (id, &len) in batch.ids.iter().zip(&batch.valid_lengths) {
        if len < required {
            return Err(Error::TooShortUtterance {
                id: id.clone(),
                length: len,
                required,
            });
        }
    }

    let reg = params.config.regularization.clone();
    let training = mode.training;
    let mut rng = rng_from(mode.step_seed);
    let keep = reg.keep_prob;

    // TDNN block 1
    let mut valid = batch.valid_lengths.clone();
    let mut h = ids.tdnn1.forward(tape, features)?;
    for v in &mut valid {
        *v -= params.tdnn1.shrinkage();
    }
    if let (Some(layer), Some(bn_ids)) = (&mut params.bn1, &ids.bn1) {
        h = batchnorm_forward(
            tape,
            layer,
            bn_ids,
            h,
            training,
            mode.update_running,
            Some(valid.clone()),
        )?;
    }
    h = tape.relu(h);
    if reg.dropout_tdnn && training {
        h = tape.dropout(h, keep, &mut rng);
    }

    // TDNN block 2
    h = ids.tdnn2.forward(tape, h)?;
    for v in &mut valid {
        *v -= params.tdnn2.shrinkage();
    }
    if let (Some(layer), Some(bn_ids)) = (&mut params.bn2, &ids.bn2) {
        h = batchnorm_forward(
            tape,
            layer,
            bn_ids,
            h,
            training,
            mode.update_running,
            Some(valid.clone()),
        )?;
    }
    h = tape.relu(h);
    if reg.dropout_tdnn && training {
        h = tape.dropout(h, keep, &mut rng);
    }

    // recurrent block
    h = ids.lstm.forward(tape, h, &valid)?;
    if reg.dropout_lstm_output && training {
        h = tape.dropout(h, keep, &mut rng);
    }

    // frame-wise FC, then pooling
    h = ids.frame_fc.forward(tape, h)?;
    if let (Some(layer), Some(bn_ids)) = (&mut params.bn_fc, &ids.bn_fc) {
        h = batchnorm_forward(
            tape,
            layer,
            bn_ids,
            h,
            training,
            mode.update_running,
            Some(valid.clone()),
        )?;
    }
    h = tape.relu(h);
    if reg.dropout_hidden_fc && training {
        h = tape.dropout(h, keep, &mut rng);
    }
    let embedding = tape.stats_pool(h, &valid, STATS_POOL_EPS)?;

    // heads: emotion first so its dropout draws are independent of whether
    // the speaker branch runs, then speaker (optionally through the GRL)
    let emotion_logits = head_forward(
        tape,
        &mut params.emotion_head,
        &ids.emotion,
        embedding,
        training,
        mode.update_running,
        &reg,
        &mut rng,
    )?;
    let speaker_input = match grl_lambda {
        Some(lambda) => tape.grad_reverse(embedding, lambda),
        None => embedding,
    };
    let speaker_logits = head_forward(
        tape,
        &mut params.speaker_head,
        &ids.speaker,
        speaker_input,
        training,
        mode.update_running,
        &reg,
        &mut rng,
    )?;

    Ok(ForwardOutput {
        embedding,
        emotion_logits,
        speaker_logits,
        grl_lambda,
    })
}

#[allow(clippy::too_many_arguments)]
fn head_forward(
    tape: &mut Tape,
    head: &mut ClassifierHead,
    ids: &HeadIds,
    x: TensorId,
    training: bool,
    update_running: bool,
    reg: &RegularizationConfig,
    rng: &mut crate::rng::Rng,
) -> Result<TensorId> {
    let mut h = ids.fc1.forward(tape, x);
    if let (Some(layer), Some(bn_ids)) = (&mut head.bn1, &ids.bn1) {
        h = batchnorm_forward(tape, layer, bn_ids, h, training, update_running, None)?;
    }
    h = tape.relu(h);
    if reg.dropout_hidden_fc && training {
        h = tape.dropout(h, reg.keep_prob, rng);
    }
    h = ids.fc2.forward(tape, h);
    if let (Some(layer), Some(bn_ids)) = (&mut head.bn2, &ids.bn2) {
        h = batchnorm_forward(tape, layer, bn_ids, h, training, update_running, None)?;
    }
    h = tape.relu(h);
    if reg.dropout_hidden_fc && training {
        h = tape.dropout(h, reg.keep_prob, rng);
    }
    Ok(ids.out.forward(tape, h))
}

// ----- embeddings -----------------------------------------------------------------

/// A fixed-length utterance embedding with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub emotion: usize,
    pub speaker: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub records: Vec<EmbeddingRecord>,
    /// Ids of utterances shorter than the receptive-field minimum, skipped
    /// with a warning record instead of failing the whole run.
    pub skipped: Vec<String>,
}

/// Eval-mode embeddings for a list of utterances, preserving input order.
pub fn embed(
    params: &mut ModelParameters,
    utterances: &[&Utterance],
    batch_size: usize,
) -> Result<EmbedOutput> {
    let required = params.config.receptive_min();
    let mut kept: Vec<&Utterance> = Vec::with_capacity(utterances.len());
    let mut skipped = Vec::new();
    for utt in utterances {
        if utt.frames < required {
            skipped.push(utt.id.clone());
        } else {
            kept.push(utt);
        }
    }
    let batches = crate::data::make_eval_batches(
        &kept,
        params.config.feature_dim,
        params.config.emotion_head.classes,
        None,
        batch_size.max(1),
    )?;
    let dim = params.config.embedding_dim();
    let mut records = Vec::with_capacity(kept.len());
    for batch in &batches {
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let features = features_leaf(&mut tape, &batch, false);
        let out = forward(
            &mut tape,
            params,
            &ids,
            features,
            &batch,
            &ForwardMode::eval(),
            None,
        )?;
        let emb = tape.value(out.embedding).data();
        for (b, id) in batch.ids.iter().enumerate() {
            records.push(EmbeddingRecord {
                id: id.clone(),
                emotion: batch.emotion_labels[b],
                speaker: batch.speaker_labels[b],
                embedding: emb[b * dim..(b + 1) * dim].to_vec(),
            });
        }
    }
    Ok(EmbedOutput { records, skipped })
}

// ----- checkpoints -----------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SERM";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian checkpoint: magic "SERM", u32 version, u32 JSON length +
/// JSON-encoded [`ModelConfig`], then every tensor in declaration order as
/// u64 element count + raw f64 values. Round trips are bit-exact.
pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&params.config)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    let mut err = None;
    params.for_each_tensor(&mut |_, t| {
        if err.is_some() {
            return;
        }
        if let Err(e) = write_tensor(&mut w, t) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    w.flush()?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.numel() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("checkpoint magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected \"SERM\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncated("checkpoint version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Truncated("config length".into()))?;
    let len = u32::from_le_bytes(u32buf) as usize;
    let mut config_raw = vec![0u8; len];
    r.read_exact(&mut config_raw)
        .map_err(|_| Error::Truncated("config JSON".into()))?;
    let config: ModelConfig = serde_json::from_slice(&config_raw)?;

    let mut params = ModelParameters::init(&config, 0)?;
    let mut err = None;
    params.for_each_tensor_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        if let Err(e) = read_tensor(&mut r, &name, t) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

fn read_tensor<R: Read>(r: &mut R, name: &str, t: &mut Tensor) -> Result<()> {
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| Error::Truncated(format!("element count of {}", name)))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    if count != t.numel() {
        return Err(Error::Format(format!(
            "tensor {} has {} elements, expected {}",
            name,
            count,
            t.numel()
        )));
    }
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Truncated(format!("values of {}", name)))?;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f64::from_le_bytes(raw[i * 8..(i + 1) * 8].try_into().unwrap());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::data::{make_eval_batches, Dataset};

    fn tiny_dataset(lengths: (usize, usize), seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_speakers: 2,
            utterances_per_speaker: 4,
            feature_dim: 5,
            num_emotions: 2,
            length_range: lengths,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn eval_forward(
        params: &mut ModelParameters,
        batch: &SequenceBatch,
        grl: Option<f64>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let x = features_leaf(&mut tape, batch, false);
        let out = forward(&mut tape, params, &ids, x, batch, &ForwardMode::eval(), grl).unwrap();
        (
            tape.value(out.embedding).data().to_vec(),
            tape.value(out.emotion_logits).data().to_vec(),
            tape.value(out.speaker_logits).data().to_vec(),
        )
    }

    #[test]
    fn preset_arithmetic() {
        let cfg = ModelConfig::iemocap();
        assert_eq!(cfg.receptive_min(), 17); // 1 + 2*4 + 4*2
        assert_eq!(cfg.embedding_dim(), 512); // 256 mean + 256 std
        let cfg = ModelConfig::mandarin();
        assert_eq!(cfg.embedding_dim(), 1024);
        assert_eq!(cfg.speaker_head.classes, 200);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = ModelParameters::init(&cfg, 42).unwrap();
        let b = ModelParameters::init(&cfg, 42).unwrap();
        let mut flat_a = Vec::new();
        a.for_each_tensor(&mut |_, t| flat_a.extend(t.data().iter().map(|v| v.to_bits())));
        let mut flat_b = Vec::new();
        b.for_each_tensor(&mut |_, t| flat_b.extend(t.data().iter().map(|v| v.to_bits())));
        assert_eq!(flat_a, flat_b);
    }

    #[test]
    fn registered_ids_align_with_trainable_tensors() {
        let cfg = ModelConfig::tiny();
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let listed = ids.trainable();
        let trainable = params.trainable();
        assert_eq!(listed.len(), trainable.len());
        for ((name_id, id), (name_t, t)) in listed.iter().zip(&trainable) {
            assert_eq!(name_id, name_t);
            assert_eq!(tape.value(*id).numel(), t.numel(), "{}", name_id);
        }
    }

    #[test]
    fn iemocap_forward_shapes() {
        let cfg = ModelConfig::iemocap();
        let mut params = ModelParameters::init(&cfg, 3).unwrap();
        let ds = generate_synthetic(&SyntheticSpec {
            num_speakers: 3,
            utterances_per_speaker: 1,
            feature_dim: 39,
            length_range: (20, 24),
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let batch = &make_eval_batches(&refs, 39, 4, None, 3).unwrap()[0];
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let x = features_leaf(&mut tape, batch, false);
        let out =
            forward(&mut tape, &mut params, &ids, x, batch, &ForwardMode::eval(), None).unwrap();
        assert_eq!(tape.value(out.embedding).shape(), &[3, 512]);
        assert_eq!(tape.value(out.emotion_logits).shape(), &[3, 4]);
        assert_eq!(tape.value(out.speaker_logits).shape(), &[3, 8]);
    }

    #[test]
    fn grl_does_not_change_forward_values() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParameters::init(&cfg, 7).unwrap();
        let ds = tiny_dataset((12, 16), 11);
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let batch = &make_eval_batches(&refs, 5, 2, None, 4).unwrap()[0];
        let (emb_a, emo_a, _) = eval_forward(&mut params, batch, None);
        let (emb_b, emo_b, spk_b) = eval_forward(&mut params, batch, Some(1.0));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&emb_a), bits(&emb_b));
        assert_eq!(bits(&emo_a), bits(&emo_b));
        // speaker logits are also value-identical (GRL is forward identity)
        let (_, _, spk_a) = eval_forward(&mut params, batch, None);
        assert_eq!(bits(&spk_a), bits(&spk_b));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParameters::init(&cfg, 13).unwrap();
        let ds = tiny_dataset((12, 14), 17);
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let batch = &make_eval_batches(&refs, 5, 2, None, 8).unwrap()[0];
        let a = eval_forward(&mut params, batch, None);
        let b = eval_forward(&mut params, batch, None);
        assert_eq!(a, b);
    }

    #[test]
    fn padded_frames_do_not_leak_into_outputs() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParameters::init(&cfg, 19).unwrap();
        let ds = tiny_dataset((8, 14), 23); // mixed lengths force padding
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let batch = make_eval_batches(&refs, 5, 2, None, 8).unwrap()[0].clone();
        let clean = eval_forward(&mut params, &batch, None);

        let mut poisoned = batch.clone();
        let max_len = poisoned.max_len();
        let feat = 5;
        let lens = poisoned.valid_lengths.clone();
        let data = poisoned.features.data_mut();
        for (b, &vl) in lens.iter().enumerate() {
            for c in 0..feat {
                for t in vl..max_len {
                    data[(b * feat + c) * max_len + t] = 1e6;
                }
            }
        }
        let dirty = eval_forward(&mut params, &poisoned, None);
        assert_eq!(clean, dirty);
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let mut params = ModelParameters::init(&cfg, 29).unwrap();
        // push running stats away from init so they participate in the test
        let ds = tiny_dataset((12, 16), 31);
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let batch = &make_eval_batches(&refs, 5, 2, None, 8).unwrap()[0];
        {
            let mut tape = Tape::new();
            let ids = params.register(&mut tape);
            let x = features_leaf(&mut tape, batch, false);
            forward(&mut tape, &mut params, &ids, x, batch, &ForwardMode::train(9), None).unwrap();
        }
        let path = dir.path().join("model.serm");
        save_checkpoint(&params, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        let a = eval_forward(&mut params, batch, None);
        let b = eval_forward(&mut loaded, batch, None);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(bits(&a.1), bits(&b.1));
        assert_eq!(bits(&a.2), bits(&b.2));
    }

    #[test]
    fn embed_preserves_order_and_skips_short_utterances() {
        let cfg = ModelConfig::tiny(); // receptive_min = 5
        let mut params = ModelParameters::init(&cfg, 37).unwrap();
        let mut ds = tiny_dataset((5, 9), 41);
        // shrink one utterance below the minimum
        ds.utterances[1].frames = 4;
        ds.utterances[1].features.truncate(5 * 4);
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let out = embed(&mut params, &refs, 3).unwrap();
        assert_eq!(out.skipped, vec![ds.utterances[1].id.clone()]);
        assert_eq!(out.records.len(), refs.len() - 1);
        let expected: Vec<&str> = refs
            .iter()
            .filter(|u| u.frames >= 5)
            .map(|u| u.id.as_str())
            .collect();
        let got: Vec<&str> = out.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(got, expected);
        assert!(out.records.iter().all(|r| r.embedding.len() == 16));
    }

    #[test]
    fn too_short_utterance_error_names_the_utterance() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParameters::init(&cfg, 43).unwrap();
        let mut ds = tiny_dataset((5, 7), 47);
        ds.utterances[0].frames = 4; // one frame below the minimum of 5
        ds.utterances[0].features.truncate(5 * 4);
        let refs: Vec<&crate::data::Utterance> = ds.utterances.iter().collect();
        let batch = &make_eval_batches(&refs, 5, 2, None, 8).unwrap()[0];
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let x = features_leaf(&mut tape, batch, false);
        let err = forward(&mut tape, &mut params, &ids, x, batch, &ForwardMode::eval(), None)
            .unwrap_err();
        match err {
            Error::TooShortUtterance { id, length, required } => {
                assert_eq!(id, ds.utterances[0].id);
                assert_eq!(length, 4);
                assert_eq!(required, 5);
            }
            other => panic!("unexpected error {:?}", other),
        }
    }
}
