//! Forward/backward math for the sequence-level tape ops: dilated 1-d
//! convolution, bidirectional LSTM, masked statistics pooling, and batch
//! normalization.
//!
//! Inputs are `B x C x L` row-major. Frames at index >= the per-sequence
//! valid length are padding: they produce zero outputs, are excluded from
//! every statistic, and receive no gradient.

use super::matops::{mm_nn, mm_nt, mm_tn};
use super::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ----- dilated convolution ----------------------------------------------

pub(super) fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    sx: &[usize],
    sw: &[usize],
    dilation: usize,
) -> Tensor {
    let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
    let (c_out, kernel) = (sw[0], sw[2]);
    let out_len = len - dilation * (kernel - 1);
    let mut out = vec![0.0; batch * c_out * out_len];
    for b in 0..batch {
        for o in 0..c_out {
            let out_row = &mut out[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
            out_row.fill(bias[o]);
            for i in 0..c_in {
                let x_row = &x[(b * c_in + i) * len..(b * c_in + i + 1) * len];
                for k in 0..kernel {
                    let wv = w[(o * c_in + i) * kernel + k];
                    if wv == 0.0 {
                        continue;
                    }
                    let shifted = &x_row[k * dilation..k * dilation + out_len];
                    for (ov, &xv) in out_row.iter_mut().zip(shifted) {
                        *ov += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, c_out, out_len], out)
}

pub(super) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    sx: &[usize],
    sw: &[usize],
    dilation: usize,
    d_out: &[f64],
    needs: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
    let (c_out, kernel) = (sw[0], sw[2]);
    let out_len = len - dilation * (kernel - 1);

    let mut d_x = needs.0.then(|| vec![0.0; batch * c_in * len]);
    let mut d_w = needs.1.then(|| vec![0.0; w.len()]);
    let mut d_b = needs.2.then(|| vec![0.0; c_out]);

    for b in 0..batch {
        for o in 0..c_out {
            let d_row = &d_out[(b * c_out + o) * out_len..(b * c_out + o + 1) * out_len];
            if let Some(db) = &mut d_b {
                db[o] += d_row.iter().sum::<f64>();
            }
            for i in 0..c_in {
                let x_row = &x[(b * c_in + i) * len..(b * c_in + i + 1) * len];
                for k in 0..kernel {
                    let off = k * dilation;
                    if let Some(dw) = &mut d_w {
                        let mut acc = 0.0;
                        for (dv, &xv) in d_row.iter().zip(&x_row[off..off + out_len]) {
                            acc += dv * xv;
                        }
                        dw[(o * c_in + i) * kernel + k] += acc;
                    }
                    if let Some(dx) = &mut d_x {
                        let wv = w[(o * c_in + i) * kernel + k];
                        if wv != 0.0 {
                            let dst =
                                &mut dx[(b * c_in + i) * len + off..(b * c_in + i) * len + off + out_len];
                            for (dxv, &dv) in dst.iter_mut().zip(d_row) {
                                *dxv += wv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    (d_x, d_w, d_b)
}

// ----- bidirectional LSTM -----------------------------------------------

/// Per-direction forward activations saved for backpropagation through time.
#[derive(Debug)]
pub(crate) struct DirCache {
    /// Post-activation gates per frame, `L x B x 4H`, gate order (i, f, g, o).
    gates: Vec<f64>,
    /// Cell states `L x B x H`.
    cell: Vec<f64>,
    /// Hidden states `L x B x H`.
    hidden_state: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct LstmCache {
    pub(super) hidden: usize,
    pub(super) valid: Vec<usize>,
    fwd: DirCache,
    bwd: DirCache,
}

fn gather_frame(x: &[f64], batch: usize, feat: usize, len: usize, t: usize, out: &mut [f64]) {
    for b in 0..batch {
        for c in 0..feat {
            out[b * feat + c] = x[(b * feat + c) * len + t];
        }
    }
}

/// One LSTM direction. Frame order is 0..L for `reverse = false` and L-1..0
/// for `reverse = true`; state is reset to zero on padded frames, so the
/// reverse direction effectively starts at each sequence's last valid frame.
#[allow(clippy::too_many_arguments)]
fn lstm_dir_forward(
    x: &[f64],
    batch: usize,
    feat: usize,
    len: usize,
    hidden: usize,
    valid: &[usize],
    wx: &[f64],
    wh: &[f64],
    bias: &[f64],
    reverse: bool,
) -> DirCache {
    let h4 = 4 * hidden;
    let mut cache = DirCache {
        gates: vec![0.0; len * batch * h4],
        cell: vec![0.0; len * batch * hidden],
        hidden_state: vec![0.0; len * batch * hidden],
    };
    let mut xt = vec![0.0; batch * feat];
    let mut h_prev = vec![0.0; batch * hidden];
    let mut c_prev = vec![0.0; batch * hidden];
    let mut pre = vec![0.0; batch * h4];

    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        gather_frame(x, batch, feat, len, t, &mut xt);

        pre.fill(0.0);
        mm_nt(&xt, wx, &mut pre, batch, feat, h4);
        mm_nt(&h_prev, wh, &mut pre, batch, hidden, h4);
        for row in pre.chunks_exact_mut(h4) {
            for (p, &bv) in row.iter_mut().zip(bias) {
                *p += bv;
            }
        }

        for b in 0..batch {
            let g_out = &mut cache.gates[(t * batch + b) * h4..(t * batch + b + 1) * h4];
            let c_out = &mut cache.cell[(t * batch + b) * hidden..(t * batch + b + 1) * hidden];
            let h_out =
                &mut cache.hidden_state[(t * batch + b) * hidden..(t * batch + b + 1) * hidden];
            if t < valid[b] {
                let row = &pre[b * h4..(b + 1) * h4];
                for j in 0..hidden {
                    let gi = sigmoid(row[j]);
                    let gf = sigmoid(row[hidden + j]);
                    let gg = row[2 * hidden + j].tanh();
                    let go = sigmoid(row[3 * hidden + j]);
                    let c = gf * c_prev[b * hidden + j] + gi * gg;
                    g_out[j] = gi;
                    g_out[hidden + j] = gf;
                    g_out[2 * hidden + j] = gg;
                    g_out[3 * hidden + j] = go;
                    c_out[j] = c;
                    h_out[j] = go * c.tanh();
                }
            }
            // padded frame: cache rows stay zero, which also resets the state
            h_prev[b * hidden..(b + 1) * hidden].copy_from_slice(h_out);
            c_prev[b * hidden..(b + 1) * hidden].copy_from_slice(c_out);
        }
    }
    cache
}

#[allow(clippy::too_many_arguments)]
pub(super) fn bilstm_forward(
    x: &[f64],
    sx: &[usize],
    hidden: usize,
    valid: &[usize],
    wx_f: &[f64],
    wh_f: &[f64],
    b_f: &[f64],
    wx_b: &[f64],
    wh_b: &[f64],
    b_b: &[f64],
) -> (Tensor, LstmCache) {
    let (batch, feat, len) = (sx[0], sx[1], sx[2]);
    let fwd = lstm_dir_forward(x, batch, feat, len, hidden, valid, wx_f, wh_f, b_f, false);
    let bwd = lstm_dir_forward(x, batch, feat, len, hidden, valid, wx_b, wh_b, b_b, true);

    let mut out = vec![0.0; batch * 2 * hidden * len];
    for t in 0..len {
        for b in 0..batch {
            for j in 0..hidden {
                out[(b * 2 * hidden + j) * len + t] = fwd.hidden_state[(t * batch + b) * hidden + j];
                out[(b * 2 * hidden + hidden + j) * len + t] =
                    bwd.hidden_state[(t * batch + b) * hidden + j];
            }
        }
    }
    let value = Tensor::from_parts(vec![batch, 2 * hidden, len], out);
    let cache = LstmCache {
        hidden,
        valid: valid.to_vec(),
        fwd,
        bwd,
    };
    (value, cache)
}

struct DirGrads {
    d_x: Option<Vec<f64>>,
    d_wx: Vec<f64>,
    d_wh: Vec<f64>,
    d_bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn lstm_dir_backward(
    x: &[f64],
    batch: usize,
    feat: usize,
    len: usize,
    hidden: usize,
    valid: &[usize],
    wx: &[f64],
    wh: &[f64],
    cache: &DirCache,
    d_out: &[f64],
    out_offset: usize,
    reverse: bool,
    need_x: bool,
) -> DirGrads {
    let h4 = 4 * hidden;
    let mut grads = DirGrads {
        d_x: need_x.then(|| vec![0.0; batch * feat * len]),
        d_wx: vec![0.0; h4 * feat],
        d_wh: vec![0.0; h4 * hidden],
        d_bias: vec![0.0; h4],
    };
    let mut xt = vec![0.0; batch * feat];
    let mut d_pre = vec![0.0; batch * h4];
    let mut d_xt = vec![0.0; batch * feat];
    let mut carry_h = vec![0.0; batch * hidden];
    let mut carry_c = vec![0.0; batch * hidden];
    let two_h = 2 * hidden;

    // walk frames in reverse of the forward order
    for step in (0..len).rev() {
        let t = if reverse { len - 1 - step } else { step };
        let prev_t = if step > 0 {
            Some(if reverse { len - step } else { step - 1 })
        } else {
            None
        };

        d_pre.fill(0.0);
        let mut any_valid = false;
        for b in 0..batch {
            if t >= valid[b] {
                carry_h[b * hidden..(b + 1) * hidden].fill(0.0);
                carry_c[b * hidden..(b + 1) * hidden].fill(0.0);
                continue;
            }
            any_valid = true;
            let gates = &cache.gates[(t * batch + b) * h4..(t * batch + b + 1) * h4];
            let cell = &cache.cell[(t * batch + b) * hidden..(t * batch + b + 1) * hidden];
            let d_pre_row = &mut d_pre[b * h4..(b + 1) * h4];
            for j in 0..hidden {
                let d_h = d_out[(b * two_h + out_offset + j) * len + t] + carry_h[b * hidden + j];
                let (gi, gf, gg, go) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let tanh_c = cell[j].tanh();
                let c_prev = match prev_t {
                    Some(pt) => cache.cell[(pt * batch + b) * hidden + j],
                    None => 0.0,
                };
                let d_o = d_h * tanh_c;
                let d_c = d_h * go * (1.0 - tanh_c * tanh_c) + carry_c[b * hidden + j];
                let d_f = d_c * c_prev;
                let d_i = d_c * gg;
                let d_g = d_c * gi;
                d_pre_row[j] = d_i * gi * (1.0 - gi);
                d_pre_row[hidden + j] = d_f * gf * (1.0 - gf);
                d_pre_row[2 * hidden + j] = d_g * (1.0 - gg * gg);
                d_pre_row[3 * hidden + j] = d_o * go * (1.0 - go);
                carry_c[b * hidden + j] = d_c * gf;
            }
        }
        if !any_valid {
            continue;
        }

        gather_frame(x, batch, feat, len, t, &mut xt);
        mm_tn(&d_pre, &xt, &mut grads.d_wx, batch, h4, feat);
        for row in d_pre.chunks_exact(h4) {
            for (gb, &d) in grads.d_bias.iter_mut().zip(row) {
                *gb += d;
            }
        }
        if let Some(pt) = prev_t {
            let h_prev = &cache.hidden_state[pt * batch * hidden..(pt + 1) * batch * hidden];
            mm_tn(&d_pre, h_prev, &mut grads.d_wh, batch, h4, hidden);
        }
        if let Some(dx) = &mut grads.d_x {
            d_xt.fill(0.0);
            mm_nn(&d_pre, wx, &mut d_xt, batch, h4, feat);
            for b in 0..batch {
                if t >= valid[b] {
                    continue;
                }
                for c in 0..feat {
                    dx[(b * feat + c) * len + t] += d_xt[b * feat + c];
                }
            }
        }
        carry_h.fill(0.0);
        mm_nn(&d_pre, wh, &mut carry_h, batch, h4, hidden);
    }
    grads
}

/// Gradients aligned with the op inputs [x, wx_f, wh_f, b_f, wx_b, wh_b, b_b].
pub(super) fn bilstm_backward(
    x: &[f64],
    sx: &[usize],
    cache: &LstmCache,
    weights: &[&[f64]],
    d_out: &[f64],
    need_x: bool,
) -> Vec<Option<Vec<f64>>> {
    let (batch, feat, len) = (sx[0], sx[1], sx[2]);
    let hidden = cache.hidden;
    let fwd = lstm_dir_backward(
        x, batch, feat, len, hidden, &cache.valid, weights[0], weights[1], &cache.fwd, d_out, 0,
        false, need_x,
    );
    let bwd = lstm_dir_backward(
        x, batch, feat, len, hidden, &cache.valid, weights[3], weights[4], &cache.bwd, d_out,
        hidden, true, need_x,
    );
    let d_x = match (fwd.d_x, bwd.d_x) {
        (Some(mut a), Some(b)) => {
            for (av, bv) in a.iter_mut().zip(b) {
                *av += bv;
            }
            Some(a)
        }
        _ => None,
    };
    vec![
        d_x,
        Some(fwd.d_wx),
        Some(fwd.d_wh),
        Some(fwd.d_bias),
        Some(bwd.d_wx),
        Some(bwd.d_wh),
        Some(bwd.d_bias),
    ]
}

// ----- statistics pooling -------------------------------------------------

#[derive(Debug)]
pub(crate) struct PoolCache {
    pub(super) valid: Vec<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

pub(super) fn stats_pool_forward(
    x: &[f64],
    sx: &[usize],
    valid: &[usize],
    eps: f64,
) -> (Tensor, PoolCache) {
    let (batch, channels, len) = (sx[0], sx[1], sx[2]);
    let mut out = vec![0.0; batch * 2 * channels];
    let mut mean = vec![0.0; batch * channels];
    let mut std = vec![0.0; batch * channels];
    for b in 0..batch {
        let n = valid[b];
        for c in 0..channels {
            let row = &x[(b * channels + c) * len..(b * channels + c) * len + n];
            let m = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let s = (var + eps).sqrt();
            mean[b * channels + c] = m;
            std[b * channels + c] = s;
            out[b * 2 * channels + c] = m;
            out[b * 2 * channels + channels + c] = s;
        }
    }
    let value = Tensor::from_parts(vec![batch, 2 * channels], out);
    let cache = PoolCache {
        valid: valid.to_vec(),
        mean,
        std,
    };
    (value, cache)
}

pub(super) fn stats_pool_backward(
    x: &[f64],
    sx: &[usize],
    cache: &PoolCache,
    d_out: &[f64],
) -> Vec<f64> {
    let (batch, channels, len) = (sx[0], sx[1], sx[2]);
    let mut d_x = vec![0.0; x.len()];
    for b in 0..batch {
        let n = cache.valid[b];
        let n_f = n as f64;
        for c in 0..channels {
            let d_mean = d_out[b * 2 * channels + c];
            let d_std = d_out[b * 2 * channels + channels + c];
            let m = cache.mean[b * channels + c];
            let s = cache.std[b * channels + c];
            let row = &x[(b * channels + c) * len..(b * channels + c) * len + n];
            let dst = &mut d_x[(b * channels + c) * len..(b * channels + c) * len + n];
            for (d, &xv) in dst.iter_mut().zip(row) {
                *d = d_mean / n_f + d_std * (xv - m) / (n_f * s);
            }
        }
    }
    d_x
}

// ----- batch normalization -------------------------------------------------

/// How batch statistics are obtained. For `B x C x L` inputs, `valid` masks
/// padded frames out of the statistics; it must be `None` for `B x C` inputs.
pub enum BnMode {
    Train { valid: Option<Vec<usize>> },
    Eval {
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        valid: Option<Vec<usize>>,
    },
}

#[derive(Debug)]
pub(crate) struct BnCache {
    training: bool,
    valid: Option<Vec<usize>>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    count: f64,
}

fn bn_valid_len(valid: &Option<Vec<usize>>, b: usize, len: usize) -> usize {
    match valid {
        Some(v) => v[b],
        None => len,
    }
}

pub(super) fn batch_norm_forward(
    x: &[f64],
    sx: &[usize],
    gamma: &[f64],
    beta: &[f64],
    mode: &BnMode,
    eps: f64,
) -> Result<(Tensor, BnCache, Option<(Vec<f64>, Vec<f64>)>)> {
    let (batch, channels) = (sx[0], sx[1]);
    let len = if sx.len() == 3 { sx[2] } else { 1 };
    let valid_of = |mode_valid: &Option<Vec<usize>>| -> Result<Option<Vec<usize>>> {
        match mode_valid {
            Some(v) => {
                if sx.len() != 3 {
                    return Err(Error::Contract(
                        "batch_norm: valid lengths only apply to B x C x L input".into(),
                    ));
                }
                if v.len() != batch || v.iter().any(|&n| n > len) {
                    return Err(Error::Contract("batch_norm: bad valid lengths".into()));
                }
                Ok(Some(v.clone()))
            }
            None => Ok(None),
        }
    };

    let (training, valid, mean, var): (bool, Option<Vec<usize>>, Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train { valid } => {
            let valid = valid_of(valid)?;
            let count: usize = (0..batch).map(|b| bn_valid_len(&valid, b, len)).sum();
            if count < 2 {
                return Err(Error::Contract(format!(
                    "batch_norm: training needs at least 2 samples per channel, got {}",
                    count
                )));
            }
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut sum = 0.0;
                for b in 0..batch {
                    let n = bn_valid_len(&valid, b, len);
                    let row = &x[(b * channels + c) * len..(b * channels + c) * len + n];
                    sum += row.iter().sum::<f64>();
                }
                let m = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..batch {
                    let n = bn_valid_len(&valid, b, len);
                    let row = &x[(b * channels + c) * len..(b * channels + c) * len + n];
                    sq += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = sq / count as f64;
            }
            (true, valid, mean, var)
        }
        BnMode::Eval {
            running_mean,
            running_var,
            valid,
        } => {
            if running_mean.len() != channels || running_var.len() != channels {
                return Err(Error::Contract(
                    "batch_norm: running statistics have wrong channel count".into(),
                ));
            }
            (false, valid_of(valid)?, running_mean.clone(), running_var.clone())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let n = bn_valid_len(&valid, b, len);
        for c in 0..channels {
            let base = (b * channels + c) * len;
            for t in 0..n {
                let xhat = (x[base + t] - mean[c]) * inv_std[c];
                out[base + t] = gamma[c] * xhat + beta[c];
            }
        }
    }
    let count: usize = (0..batch).map(|b| bn_valid_len(&valid, b, len)).sum();
    let stats = training.then(|| (mean.clone(), var));
    let cache = BnCache {
        training,
        valid,
        mean,
        inv_std,
        count: count as f64,
    };
    Ok((Tensor::from_parts(sx.to_vec(), out), cache, stats))
}

pub(super) fn batch_norm_backward(
    x: &[f64],
    sx: &[usize],
    gamma: &[f64],
    cache: &BnCache,
    d_out: &[f64],
    needs: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (batch, channels) = (sx[0], sx[1]);
    let len = if sx.len() == 3 { sx[2] } else { 1 };

    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for b in 0..batch {
        let n = bn_valid_len(&cache.valid, b, len);
        for c in 0..channels {
            let base = (b * channels + c) * len;
            for t in 0..n {
                let xhat = (x[base + t] - cache.mean[c]) * cache.inv_std[c];
                sum_dy[c] += d_out[base + t];
                sum_dy_xhat[c] += d_out[base + t] * xhat;
            }
        }
    }

    let d_x = needs.0.then(|| {
        let mut d_x = vec![0.0; x.len()];
        for b in 0..batch {
            let n = bn_valid_len(&cache.valid, b, len);
            for c in 0..channels {
                let base = (b * channels + c) * len;
                let g_istd = gamma[c] * cache.inv_std[c];
                for t in 0..n {
                    d_x[base + t] = if cache.training {
                        let xhat = (x[base + t] - cache.mean[c]) * cache.inv_std[c];
                        g_istd
                            * (d_out[base + t]
                                - sum_dy[c] / cache.count
                                - xhat * sum_dy_xhat[c] / cache.count)
                    } else {
                        g_istd * d_out[base + t]
                    };
                }
            }
        }
        d_x
    });
    let d_gamma = needs.1.then(|| sum_dy_xhat.clone());
    let d_beta = needs.2.then(|| sum_dy.clone());
    (d_x, d_gamma, d_beta)
}
