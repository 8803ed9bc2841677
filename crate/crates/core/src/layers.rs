//! Neural building blocks: dilated 1-d convolution (TDNN), bidirectional
//! LSTM, fully connected layers, batch normalization, and the batched
//! sequence container they all consume.
//!
//! Layer structs own their parameters as plain [`Tensor`]s. To run them,
//! parameters are registered as leaves on a [`Tape`] (see
//! [`crate::model::ModelParameters::register`]) and the returned ids drive
//! the tape ops; the structs here handle initialization and the running
//! state that is not differentiated (batch-norm running statistics).

use crate::autodiff::{BnMode, Tape, TensorId};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const STATS_POOL_EPS: f64 = 1e-5;

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Glorot-style uniform bound for a layer with the given fan-in/out.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

// ----- TDNN (dilated 1-d convolution) -------------------------------------

#[derive(Debug, Clone)]
pub struct TdnnLayer {
    /// `C_out x C_in x K`.
    pub kernels: Tensor,
    /// `C_out`.
    pub bias: Tensor,
    pub dilation: usize,
}

impl TdnnLayer {
    pub fn init(c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut Rng) -> Self {
        let bound = glorot_bound(c_in * kernel, c_out * kernel);
        let kernels = Tensor::new(
            vec![c_out, c_in, kernel],
            uniform(rng, c_out * c_in * kernel, bound),
        )
        .unwrap()
        .with_grad();
        let bias = Tensor::zeros(vec![c_out]).with_grad();
        TdnnLayer {
            kernels,
            bias,
            dilation,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// Frames lost by a valid convolution: `dilation * (K - 1)`.
    pub fn shrinkage(&self) -> usize {
        self.dilation * (self.kernel_size() - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TdnnIds {
    pub kernels: TensorId,
    pub bias: TensorId,
    pub dilation: usize,
}

impl TdnnIds {
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        tape.conv1d(x, self.kernels, self.bias, self.dilation)
    }
}

// ----- bidirectional LSTM ---------------------------------------------------

/// Gate order inside the stacked `4H` rows is (input, forget, candidate,
/// output). Forward and backward directions have independent parameters.
#[derive(Debug, Clone)]
pub struct BiLstmLayer {
    pub wx_f: Tensor,
    pub wh_f: Tensor,
    pub b_f: Tensor,
    pub wx_b: Tensor,
    pub wh_b: Tensor,
    pub b_b: Tensor,
    pub hidden: usize,
}

impl BiLstmLayer {
    /// All parameters from `uniform(-1/sqrt(H), +1/sqrt(H))`, except the
    /// forget-gate bias which starts at 1.0.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let h4 = 4 * hidden;
        let dir = |rng: &mut Rng| {
            let wx = Tensor::new(vec![h4, input_dim], uniform(rng, h4 * input_dim, bound))
                .unwrap()
                .with_grad();
            let wh = Tensor::new(vec![h4, hidden], uniform(rng, h4 * hidden, bound))
                .unwrap()
                .with_grad();
            let mut bias_data = uniform(rng, h4, bound);
            bias_data[hidden..2 * hidden].fill(1.0);
            let bias = Tensor::new(vec![h4], bias_data).unwrap().with_grad();
            (wx, wh, bias)
        };
        let (wx_f, wh_f, b_f) = dir(rng);
        let (wx_b, wh_b, b_b) = dir(rng);
        BiLstmLayer {
            wx_f,
            wh_f,
            b_f,
            wx_b,
            wh_b,
            b_b,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmIds {
    pub wx_f: TensorId,
    pub wh_f: TensorId,
    pub b_f: TensorId,
    pub wx_b: TensorId,
    pub wh_b: TensorId,
    pub b_b: TensorId,
}

impl BiLstmIds {
    pub fn forward(&self, tape: &mut Tape, x: TensorId, valid: &[usize]) -> Result<TensorId> {
        tape.bilstm(
            x, self.wx_f, self.wh_f, self.b_f, self.wx_b, self.wh_b, self.b_b, valid,
        )
    }
}

// ----- fully connected -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `D_out x D_in`.
    pub weights: Tensor,
    /// `D_out`.
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = glorot_bound(d_in, d_out);
        let weights = Tensor::new(vec![d_out, d_in], uniform(rng, d_out * d_in, bound))
            .unwrap()
            .with_grad();
        let bias = Tensor::zeros(vec![d_out]).with_grad();
        DenseLayer { weights, bias }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseIds {
    pub weights: TensorId,
    pub bias: TensorId,
}

impl DenseIds {
    /// `x[B x Din] -> B x Dout`.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> TensorId {
        tape.linear(x, self.weights, self.bias)
    }
}

// ----- batch normalization ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Running statistics used in eval mode; not differentiated.
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::new(vec![channels], vec![1.0; channels])
                .unwrap()
                .with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::new(vec![channels], vec![1.0; channels]).unwrap(),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Batch-norm forward. Training mode normalizes with batch statistics over
/// the valid elements and, when `update_running` is set, folds them into the
/// layer's running statistics with momentum; eval mode normalizes with the
/// running statistics.
pub fn batchnorm_forward(
    tape: &mut Tape,
    layer: &mut BatchNorm1d,
    ids: &BnIds,
    x: TensorId,
    training: bool,
    update_running: bool,
    valid: Option<Vec<usize>>,
) -> Result<TensorId> {
    let mode = if training {
        BnMode::Train { valid }
    } else {
        BnMode::Eval {
            running_mean: layer.running_mean.data().to_vec(),
            running_var: layer.running_var.data().to_vec(),
            valid,
        }
    };
    let (y, stats) = tape.batch_norm(x, ids.gamma, ids.beta, &mode, layer.eps)?;
    if let Some((mean, var)) = stats {
        if update_running {
            layer.update_running(&mean, &var);
        }
    }
    Ok(y)
}

// ----- batched sequences --------------------------------------------------------

/// A padded batch of feature sequences with one-hot targets.
///
/// `features` is `B x F x L_max`; frames at index >= `valid_lengths[i]` are
/// zero padding and are excluded from every statistic downstream.
/// `speaker_targets` is present only when every utterance's speaker maps
/// into the model's speaker-class space.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub valid_lengths: Vec<usize>,
    /// Dataset-level label indices (not one-hot), for metrics.
    pub emotion_labels: Vec<usize>,
    pub speaker_labels: Vec<usize>,
    /// `B x E` one-hot.
    pub emotion_targets: Tensor,
    /// `B x S_model` one-hot in the model's speaker-class space.
    pub speaker_targets: Option<Tensor>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.valid_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.shape()[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn initialization_is_deterministic() {
        let mut r1 = rng_from(5);
        let mut r2 = rng_from(5);
        let a = TdnnLayer::init(3, 4, 5, 2, &mut r1);
        let b = TdnnLayer::init(3, 4, 5, 2, &mut r2);
        assert_eq!(a.kernels.data(), b.kernels.data());
    }

    #[test]
    fn lstm_forget_bias_is_one() {
        let mut rng = rng_from(9);
        let layer = BiLstmLayer::init(4, 3, &mut rng);
        assert_eq!(&layer.b_f.data()[3..6], &[1.0, 1.0, 1.0]);
        assert_eq!(&layer.b_b.data()[3..6], &[1.0, 1.0, 1.0]);
        // other gates stay within the uniform bound
        let bound = 1.0 / 3.0f64.sqrt();
        assert!(layer.b_f.data()[..3].iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn running_stats_use_exponential_momentum() {
        let mut bn = BatchNorm1d::new(2);
        bn.update_running(&[1.0, 2.0], &[4.0, 9.0]);
        assert_eq!(bn.running_mean.data(), &[0.1, 0.2]);
        assert_eq!(bn.running_var.data(), &[0.9 + 0.4, 0.9 + 0.9]);
    }
}
