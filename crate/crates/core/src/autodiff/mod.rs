//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! op kind, the ids of its inputs, and the output [`Tensor`]. Nodes are
//! appended in execution order, so the tape is already topologically sorted;
//! [`Tape::backward`] walks it once in reverse, accumulating vector-Jacobian
//! products. Gradient contributions from multiple consumers are summed, never
//! overwritten. The tape is rebuilt for every forward pass and dropped after
//! the step.
//!
//! Besides the usual primitives this tape knows the two pieces needed by the
//! adversarial training strategies: [`Tape::grad_reverse`] (identity forward,
//! `-lambda` scaled backward) and input gradients (leaves may be created with
//! `requires_grad`, so `d loss / d features` comes out of the same machinery
//! as parameter gradients).

pub mod gradcheck;
mod matops;
mod seq;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use seq::BnMode;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use seq::{BnCache, LstmCache, PoolCache};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Primitive operations the backward pass knows how to differentiate.
#[derive(Debug)]
pub(crate) enum OpKind {
    Leaf,
    /// Elementwise a + b (same shape).
    Add,
    /// Elementwise a * b (same shape).
    Mul,
    /// x * factor.
    Scale(f64),
    /// a[m x k] @ b[k x n].
    Matmul,
    /// x[B x Din] @ w[Dout x Din]^T + bias[Dout].
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    /// Sum of all elements -> scalar.
    SumAll,
    /// Identity forward; upstream gradient times `-lambda` backward.
    GradReverse(f64),
    /// Mean softmax cross-entropy over the batch; targets are a one-hot
    /// B x C matrix captured at creation.
    CrossEntropyMean { targets: Vec<f64>, classes: usize },
    /// Valid (unpadded) dilated 1-d convolution over [x, w, b].
    Conv1d { dilation: usize },
    /// Bidirectional LSTM over [x, wx_f, wh_f, b_f, wx_b, wh_b, b_b].
    BiLstm(Box<LstmCache>),
    /// Per-channel mean and stddev over the valid frames of each sequence.
    StatsPool(Box<PoolCache>),
    /// Batch normalization over [x, gamma, beta].
    BatchNorm(Box<BnCache>),
    /// Elementwise multiply by a saved 0-or-1/keep mask.
    Dropout { mask: Vec<f64> },
}

pub(crate) struct TapeNode {
    pub(crate) op: OpKind,
    pub(crate) inputs: Vec<TensorId>,
    pub(crate) value: Tensor,
}

/// Backward tape: a DAG of [`TapeNode`]s in execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients flow to it only if
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(OpKind::Leaf, vec![], tensor)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, op: OpKind, inputs: Vec<TensorId>, mut value: Tensor) -> TensorId {
        let requires = match &op {
            OpKind::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].value.requires_grad()),
        };
        value.set_requires_grad(requires);
        let id = TensorId(self.nodes.len());
        debug_assert!(inputs.iter().all(|i| i.0 < id.0));
        self.nodes.push(TapeNode { op, inputs, value });
        id
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // ----- primitives -------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(OpKind::Add, vec![a, b], value)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(OpKind::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(OpKind::Scale(factor), vec![x], value)
    }

    /// a[m x k] @ b[k x n] -> [m x n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-d tensors");
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions differ");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matops::mm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push(OpKind::Matmul, vec![a, b], value)
    }

    /// x[B x Din] @ w[Dout x Din]^T + bias[Dout] -> [B x Dout]
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> TensorId {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        assert!(sx.len() == 2 && sw.len() == 2 && sb.len() == 1);
        assert_eq!(sx[1], sw[1], "linear: input dim mismatch");
        assert_eq!(sw[0], sb[0], "linear: bias dim mismatch");
        let (batch, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; batch * dout];
        matops::mm_nt(self.data(x), self.data(w), &mut out, batch, din, dout);
        let b = self.data(bias);
        for row in out.chunks_exact_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(vec![batch, dout], out);
        self.push(OpKind::Linear, vec![x, w, bias], value)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(OpKind::Relu, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(OpKind::Sigmoid, vec![x], value)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(OpKind::Tanh, vec![x], value)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.push(OpKind::SumAll, vec![x], Tensor::scalar(s))
    }

    /// Identity in the forward pass; multiplies the upstream gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, x: TensorId, lambda: f64) -> TensorId {
        assert!(lambda >= 0.0, "grad_reverse: lambda must be >= 0");
        let value = Tensor::from_parts(self.shape(x).to_vec(), self.data(x).to_vec());
        self.push(OpKind::GradReverse(lambda), vec![x], value)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, stabilized by
    /// max-subtraction. `targets` must be one-hot rows matching `logits`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &Tensor) -> Result<TensorId> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[1] < 2 {
            return Err(Error::Contract(format!(
                "cross_entropy: logits must be B x C with C >= 2, got {:?}",
                sl
            )));
        }
        let (batch, classes) = (sl[0], sl[1]);
        if targets.shape() != sl {
            return Err(Error::Contract(format!(
                "cross_entropy: targets shape {:?} differs from logits {:?}",
                targets.shape(),
                sl
            )));
        }
        for (row_idx, row) in targets.data().chunks_exact(classes).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != classes {
                return Err(Error::Contract(format!(
                    "cross_entropy: target row {} is not one-hot",
                    row_idx
                )));
            }
        }
        let mut total = 0.0;
        for (lrow, trow) in self
            .data(logits)
            .chunks_exact(classes)
            .zip(targets.data().chunks_exact(classes))
        {
            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let target_logit: f64 = lrow.iter().zip(trow).map(|(l, t)| l * t).sum();
            total += lse - target_logit;
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(
            OpKind::CrossEntropyMean {
                targets: targets.data().to_vec(),
                classes,
            },
            vec![logits],
            value,
        ))
    }

    /// Valid dilated convolution: x[B x Cin x L], w[Cout x Cin x K], b[Cout]
    /// -> [B x Cout x (L - dilation*(K-1))].
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        dilation: usize,
    ) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert!(sx.len() == 3 && sw.len() == 3, "conv1d expects 3-d x and w");
        assert_eq!(sx[1], sw[1], "conv1d: channel mismatch");
        assert_eq!(self.shape(bias), &[sw[0]], "conv1d: bias mismatch");
        assert!(dilation >= 1 && sw[2] >= 1);
        let len = sx[2];
        let span = dilation * (sw[2] - 1);
        if len <= span {
            return Err(Error::Contract(format!(
                "conv1d: sequence of {} frames is shorter than the receptive field; needs at least {}",
                len,
                span + 1
            )));
        }
        let value = seq::conv1d_forward(
            self.data(x),
            self.data(w),
            self.data(bias),
            sx,
            sw,
            dilation,
        );
        Ok(self.push(OpKind::Conv1d { dilation }, vec![x, w, bias], value))
    }

    /// Bidirectional LSTM: x[B x F x L] -> [B x 2H x L]. Frames at or past
    /// each sequence's valid length produce zeros and carry no state.
    #[allow(clippy::too_many_arguments)]
    pub fn bilstm(
        &mut self,
        x: TensorId,
        wx_f: TensorId,
        wh_f: TensorId,
        b_f: TensorId,
        wx_b: TensorId,
        wh_b: TensorId,
        b_b: TensorId,
        valid: &[usize],
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "bilstm expects B x F x L input");
        let hidden4 = self.shape(wx_f)[0];
        assert_eq!(hidden4 % 4, 0);
        let hidden = hidden4 / 4;
        for (name, wid, rows, cols) in [
            ("wx_f", wx_f, 4 * hidden, sx[1]),
            ("wh_f", wh_f, 4 * hidden, hidden),
            ("wx_b", wx_b, 4 * hidden, sx[1]),
            ("wh_b", wh_b, 4 * hidden, hidden),
        ] {
            assert_eq!(self.shape(wid), &[rows, cols], "bilstm: bad {} shape", name);
        }
        assert_eq!(self.shape(b_f), &[4 * hidden]);
        assert_eq!(self.shape(b_b), &[4 * hidden]);
        if valid.len() != sx[0] {
            return Err(Error::Contract(format!(
                "bilstm: {} valid lengths for batch of {}",
                valid.len(),
                sx[0]
            )));
        }
        if valid.iter().any(|&v| v == 0 || v > sx[2]) {
            return Err(Error::Contract(
                "bilstm: valid lengths must be in 1..=L".into(),
            ));
        }
        let (value, cache) = seq::bilstm_forward(
            self.data(x),
            &sx,
            hidden,
            valid,
            self.data(wx_f),
            self.data(wh_f),
            self.data(b_f),
            self.data(wx_b),
            self.data(wh_b),
            self.data(b_b),
        );
        Ok(self.push(
            OpKind::BiLstm(Box::new(cache)),
            vec![x, wx_f, wh_f, b_f, wx_b, wh_b, b_b],
            value,
        ))
    }

    /// Concatenated per-channel mean and stddev over each sequence's valid
    /// frames: x[B x C x L] -> [B x 2C]. Stddev is sqrt(population variance
    /// + eps).
    pub fn stats_pool(&mut self, x: TensorId, valid: &[usize], eps: f64) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "stats_pool expects B x C x L input");
        if valid.len() != sx[0] {
            return Err(Error::Contract(format!(
                "stats_pool: {} valid lengths for batch of {}",
                valid.len(),
                sx[0]
            )));
        }
        if valid.iter().any(|&v| v == 0) {
            return Err(Error::Contract(
                "stats_pool: valid length must be >= 1".into(),
            ));
        }
        if valid.iter().any(|&v| v > sx[2]) {
            return Err(Error::Contract(
                "stats_pool: valid length exceeds sequence length".into(),
            ));
        }
        let (value, cache) = seq::stats_pool_forward(self.data(x), &sx, valid, eps);
        Ok(self.push(OpKind::StatsPool(Box::new(cache)), vec![x], value))
    }

    /// Batch normalization of x[B x C] or x[B x C x L] with gamma/beta[C].
    ///
    /// In training mode, statistics are computed per channel over the batch
    /// (and valid frames, for sequences); the computed (mean, population
    /// variance) pair is returned so the caller can update running
    /// statistics. In eval mode the supplied running statistics are used and
    /// `None` is returned. Padded frames produce zeros.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: &BnMode,
        eps: f64,
    ) -> Result<(TensorId, Option<(Vec<f64>, Vec<f64>)>)> {
        let sx = self.shape(x).to_vec();
        assert!(
            sx.len() == 2 || sx.len() == 3,
            "batch_norm expects B x C or B x C x L input"
        );
        let channels = sx[1];
        assert_eq!(self.shape(gamma), &[channels]);
        assert_eq!(self.shape(beta), &[channels]);
        let (value, cache, stats) = seq::batch_norm_forward(
            self.data(x),
            &sx,
            self.data(gamma),
            self.data(beta),
            mode,
            eps,
        )?;
        let id = self.push(OpKind::BatchNorm(Box::new(cache)), vec![x, gamma, beta], value);
        Ok((id, stats))
    }

    /// Inverted dropout: keeps each element with probability `keep_prob`,
    /// scaling kept elements by `1/keep_prob`. `keep_prob == 1` is the
    /// identity and draws nothing.
    pub fn dropout(&mut self, x: TensorId, keep_prob: f64, rng: &mut Rng) -> TensorId {
        assert!(
            keep_prob > 0.0 && keep_prob <= 1.0,
            "dropout: keep_prob must be in (0, 1]"
        );
        if keep_prob == 1.0 {
            return x;
        }
        use rand::Rng as _;
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(OpKind::Dropout { mask }, vec![x], value)
    }

    // ----- backward ----------------------------------------------------

    /// Runs reverse-mode differentiation from the scalar `loss`, accumulating
    /// `d loss / d node` into the grad buffer of every `requires_grad`
    /// ancestor. Calling backward again without [`Tape::zero_grads`] adds the
    /// new gradients onto the existing ones.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|inp| inp.0 >= i) {
                return Err(Error::Graph(format!(
                    "node {} consumes a node recorded after it",
                    i
                )));
            }
        }

        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(d_out) = pending[i].take() else {
                continue;
            };
            if self.nodes[i].value.requires_grad() {
                self.step_backward(i, &d_out, &mut pending);
            }
            pending[i] = Some(d_out);
        }

        for (node, grad) in self.nodes.iter_mut().zip(pending) {
            if let Some(g) = grad {
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn step_backward(&self, i: usize, d_out: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |id: TensorId| self.nodes[id.0].value.requires_grad();
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    accumulate(pending, a, d_out.to_vec());
                }
                if needs(b) {
                    accumulate(pending, b, d_out.to_vec());
                }
            }
            OpKind::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    let g = d_out.iter().zip(self.data(b)).map(|(d, v)| d * v).collect();
                    accumulate(pending, a, g);
                }
                if needs(b) {
                    let g = d_out.iter().zip(self.data(a)).map(|(d, v)| d * v).collect();
                    accumulate(pending, b, g);
                }
            }
            OpKind::Scale(factor) => {
                let x = node.inputs[0];
                if needs(x) {
                    accumulate(pending, x, d_out.iter().map(|d| d * factor).collect());
                }
            }
            OpKind::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if needs(a) {
                    // d_a = d_out @ b^T
                    let mut g = vec![0.0; m * k];
                    matops::mm_nt(d_out, self.data(b), &mut g, m, n, k);
                    accumulate(pending, a, g);
                }
                if needs(b) {
                    // d_b = a^T @ d_out
                    let mut g = vec![0.0; k * n];
                    matops::mm_tn(self.data(a), d_out, &mut g, m, k, n);
                    accumulate(pending, b, g);
                }
            }
            OpKind::Linear => {
                let (x, w, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (batch, din) = (self.shape(x)[0], self.shape(x)[1]);
                let dout = self.shape(w)[0];
                if needs(x) {
                    // d_x = d_out @ w
                    let mut g = vec![0.0; batch * din];
                    matops::mm_nn(d_out, self.data(w), &mut g, batch, dout, din);
                    accumulate(pending, x, g);
                }
                if needs(w) {
                    // d_w = d_out^T @ x
                    let mut g = vec![0.0; dout * din];
                    matops::mm_tn(d_out, self.data(x), &mut g, batch, dout, din);
                    accumulate(pending, w, g);
                }
                if needs(bias) {
                    let mut g = vec![0.0; dout];
                    for row in d_out.chunks_exact(dout) {
                        for (gi, &d) in g.iter_mut().zip(row) {
                            *gi += d;
                        }
                    }
                    accumulate(pending, bias, g);
                }
            }
            OpKind::Relu => {
                let x = node.inputs[0];
                if needs(x) {
                    let g = d_out
                        .iter()
                        .zip(self.data(x))
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(pending, x, g);
                }
            }
            OpKind::Sigmoid => {
                let x = node.inputs[0];
                if needs(x) {
                    let g = d_out
                        .iter()
                        .zip(node.value.data())
                        .map(|(d, &y)| d * y * (1.0 - y))
                        .collect();
                    accumulate(pending, x, g);
                }
            }
            OpKind::Tanh => {
                let x = node.inputs[0];
                if needs(x) {
                    let g = d_out
                        .iter()
                        .zip(node.value.data())
                        .map(|(d, &y)| d * (1.0 - y * y))
                        .collect();
                    accumulate(pending, x, g);
                }
            }
            OpKind::SumAll => {
                let x = node.inputs[0];
                if needs(x) {
                    accumulate(pending, x, vec![d_out[0]; self.data(x).len()]);
                }
            }
            OpKind::GradReverse(lambda) => {
                let x = node.inputs[0];
                if needs(x) {
                    accumulate(pending, x, d_out.iter().map(|d| -lambda * d).collect());
                }
            }
            OpKind::CrossEntropyMean { targets, classes } => {
                let logits = node.inputs[0];
                if needs(logits) {
                    let c = *classes;
                    let batch = self.shape(logits)[0];
                    let scale = d_out[0] / batch as f64;
                    let mut g = vec![0.0; batch * c];
                    for ((grow, lrow), trow) in g
                        .chunks_exact_mut(c)
                        .zip(self.data(logits).chunks_exact(c))
                        .zip(targets.chunks_exact(c))
                    {
                        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for (gi, &l) in grow.iter_mut().zip(lrow) {
                            *gi = (l - max).exp();
                            denom += *gi;
                        }
                        for (gi, &t) in grow.iter_mut().zip(trow) {
                            *gi = (*gi / denom - t) * scale;
                        }
                    }
                    accumulate(pending, logits, g);
                }
            }
            OpKind::Conv1d { dilation } => {
                let (x, w, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (gx, gw, gb) = seq::conv1d_backward(
                    self.data(x),
                    self.data(w),
                    self.shape(x),
                    self.shape(w),
                    *dilation,
                    d_out,
                    (needs(x), needs(w), needs(bias)),
                );
                if let Some(g) = gx {
                    accumulate(pending, x, g);
                }
                if let Some(g) = gw {
                    accumulate(pending, w, g);
                }
                if let Some(g) = gb {
                    accumulate(pending, bias, g);
                }
            }
            OpKind::BiLstm(cache) => {
                let ids: Vec<TensorId> = node.inputs.clone();
                let weights: Vec<&[f64]> = ids.iter().map(|&id| self.data(id)).collect();
                let grads = seq::bilstm_backward(
                    self.data(ids[0]),
                    self.shape(ids[0]),
                    cache,
                    &weights[1..],
                    d_out,
                    needs(ids[0]),
                );
                for (id, g) in ids.iter().zip(grads) {
                    if let Some(g) = g {
                        accumulate(pending, *id, g);
                    }
                }
            }
            OpKind::StatsPool(cache) => {
                let x = node.inputs[0];
                if needs(x) {
                    let g = seq::stats_pool_backward(self.data(x), self.shape(x), cache, d_out);
                    accumulate(pending, x, g);
                }
            }
            OpKind::BatchNorm(cache) => {
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (gx, gg, gb) = seq::batch_norm_backward(
                    self.data(x),
                    self.shape(x),
                    self.data(gamma),
                    cache,
                    d_out,
                    (needs(x), needs(gamma), needs(beta)),
                );
                if let Some(g) = gx {
                    accumulate(pending, x, g);
                }
                if let Some(g) = gg {
                    accumulate(pending, gamma, g);
                }
                if let Some(g) = gb {
                    accumulate(pending, beta, g);
                }
            }
            OpKind::Dropout { mask } => {
                let x = node.inputs[0];
                if needs(x) {
                    let g = d_out.iter().zip(mask).map(|(d, m)| d * m).collect();
                    accumulate(pending, x, g);
                }
            }
        }
    }

    /// True if any ReLU node saw an input within `tol` of the kink. Used by
    /// the gradient checker to resample non-differentiable draws. Exact
    /// zeros are skipped: they come from structurally masked (padded)
    /// positions whose gradients are identically zero, not from unlucky
    /// draws.
    pub fn has_relu_near_kink(&self, tol: f64) -> bool {
        self.nodes.iter().any(|node| {
            matches!(node.op, OpKind::Relu)
                && self.nodes[node.inputs[0].0]
                    .value
                    .data()
                    .iter()
                    .any(|&v| v != 0.0 && v.abs() < tol)
        })
    }
}

fn accumulate(pending: &mut [Option<Vec<f64>>], id: TensorId, contribution: Vec<f64>) {
    match &mut pending[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
