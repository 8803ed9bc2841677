//! Finite-difference verification of backward passes.
//!
//! Central differences with `h = 1e-5` against the analytic gradients of a
//! scalar loss built by a caller-supplied closure. The closure must be
//! deterministic: any internal randomness has to be derived from a fixed
//! seed so the two perturbed evaluations see the same graph.

use super::{Tape, TensorId};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// Differences below this are indistinguishable from central-difference
/// round-off: for a loss of order 1, the numeric estimate carries noise of
/// about `|f| * eps / h ≈ 1e-11`. Parameters whose true gradient is exactly
/// zero (a bias feeding batch norm, say) would otherwise report that noise
/// as error.
pub const FD_ABS_TOL: f64 = 1e-9;

/// Relative error with an absolute guard for the FD noise floor.
pub fn fd_error(analytic: f64, numeric: f64) -> f64 {
    if (analytic - numeric).abs() < FD_ABS_TOL {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Worst relative error per checked input, in input order.
    pub per_input_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the backward pass of whatever graph `build` records.
///
/// Inputs are sampled uniformly from `(-1, 1)` using `seed`; if the sampled
/// point leaves any ReLU input within `1e-3` of its kink the draw is
/// rejected and resampled, since the loss is not differentiable there.
/// `build` receives leaves in the order of `input_shapes` and must return a
/// scalar loss node.
pub fn check_gradients<F>(
    op_name: &str,
    input_shapes: &[Vec<usize>],
    seed: u64,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let evaluate = |values: &[Vec<f64>], with_grad: bool| -> (Tape, Vec<TensorId>, TensorId) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = input_shapes
            .iter()
            .zip(values)
            .map(|(shape, data)| {
                let mut t = Tensor::new(shape.clone(), data.clone()).unwrap();
                t.set_requires_grad(with_grad);
                tape.leaf(t)
            })
            .collect();
        let loss = build(&mut tape, &ids);
        assert!(
            tape.value(loss).is_scalar(),
            "gradcheck '{}': build must return a scalar loss",
            op_name
        );
        (tape, ids, loss)
    };

    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for attempt in 0..32u64 {
        let mut rng = rng_from(seed.wrapping_add(attempt.wrapping_mul(0x9e3779b97f4a7c15)));
        values = input_shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            })
            .collect();
        let (mut tape, ids, loss) = evaluate(&values, true);
        if tape.has_relu_near_kink(1e-3) {
            assert!(attempt < 31, "gradcheck '{}': could not sample away from ReLU kinks", op_name);
            continue;
        }
        tape.backward(loss).expect("gradcheck backward failed");
        analytic = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect();
        break;
    }

    let mut per_input_errors = Vec::with_capacity(input_shapes.len());
    for (i, base) in values.iter().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..base.len() {
            let mut plus = values.clone();
            plus[i][e] += FD_STEP;
            let (tape_p, _, loss_p) = evaluate(&plus, false);
            let lp = tape_p.value(loss_p).scalar_value();

            let mut minus = values.clone();
            minus[i][e] -= FD_STEP;
            let (tape_m, _, loss_m) = evaluate(&minus, false);
            let lm = tape_m.value(loss_m).scalar_value();

            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(fd_error(analytic[i][e], numeric));
        }
        per_input_errors.push(worst);
    }

    GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: per_input_errors.iter().cloned().fold(0.0, f64::max),
        per_input_errors,
    }
}

/// Contracts a non-scalar tensor to a scalar through a fixed pseudo-random
/// weighting, so any output element error shows up in the loss. The weights
/// depend only on `seed` and the output size, making rebuilds identical.
pub fn weighted_readout(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).numel();
    let mut rng = rng_from(seed ^ 0x00c0_ffee);
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.5..1.5)
        })
        .collect();
    let w = tape.leaf(Tensor::new(shape, weights).unwrap());
    let prod = tape.mul(out, w);
    tape.sum_all(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BnMode;

    #[test]
    fn matmul_gradient() {
        let report = check_gradients(
            "matmul",
            &[vec![3, 4], vec![4, 2]],
            7,
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1]);
                weighted_readout(tape, y, 7)
            },
        );
        assert!(report.passes(1e-6), "{:?}", report);
    }

    #[test]
    fn grad_reverse_matches_negated_finite_differences() {
        // grad_reverse is not the gradient of its own (identity) forward: the
        // analytic backward must equal -lambda times the finite difference.
        let mut rng = rng_from(11);
        let base: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |data: &[f64], with_grad: bool| -> (Tape, TensorId, TensorId) {
            let mut tape = Tape::new();
            let mut t = Tensor::new(vec![2, 3], data.to_vec()).unwrap();
            t.set_requires_grad(with_grad);
            let x = tape.leaf(t);
            let y = tape.grad_reverse(x, 1.0);
            let loss = weighted_readout(&mut tape, y, 11);
            (tape, x, loss)
        };
        let (mut tape, x, loss) = eval(&base, true);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus[e] += FD_STEP;
            let (tp, _, lp) = eval(&plus, false);
            let mut minus = base.clone();
            minus[e] -= FD_STEP;
            let (tm, _, lm) = eval(&minus, false);
            let numeric =
                (tp.value(lp).scalar_value() - tm.value(lm).scalar_value()) / (2.0 * FD_STEP);
            assert!(
                relative_error(analytic[e], -numeric) < 1e-10,
                "element {}: analytic {} vs -numeric {}",
                e,
                analytic[e],
                -numeric
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        for (name, f) in [
            ("relu", 0usize),
            ("sigmoid", 1),
            ("tanh", 2),
            ("mul", 3),
            ("add_scale", 4),
        ] {
            let shapes: Vec<Vec<usize>> = if f >= 3 {
                vec![vec![2, 3], vec![2, 3]]
            } else {
                vec![vec![2, 3]]
            };
            let report = check_gradients(name, &shapes, 13, move |tape, ids| {
                let y = match f {
                    0 => tape.relu(ids[0]),
                    1 => tape.sigmoid(ids[0]),
                    2 => tape.tanh(ids[0]),
                    3 => tape.mul(ids[0], ids[1]),
                    _ => {
                        let a = tape.scale(ids[0], 1.7);
                        tape.add(a, ids[1])
                    }
                };
                weighted_readout(tape, y, 13)
            });
            assert!(report.passes(1e-6), "{}: {:?}", name, report);
        }
    }

    #[test]
    fn linear_gradient() {
        let report = check_gradients(
            "linear",
            &[vec![3, 4], vec![2, 4], vec![2]],
            17,
            |tape, ids| {
                let y = tape.linear(ids[0], ids[1], ids[2]);
                weighted_readout(tape, y, 17)
            },
        );
        assert!(report.passes(1e-6), "{:?}", report);
    }

    #[test]
    fn cross_entropy_gradient() {
        let targets = Tensor::new(
            vec![3, 4],
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let report = check_gradients("cross_entropy", &[vec![3, 4]], 19, move |tape, ids| {
            tape.cross_entropy(ids[0], &targets).unwrap()
        });
        assert!(report.passes(1e-6), "{:?}", report);
    }

    #[test]
    fn conv1d_gradient() {
        let report = check_gradients(
            "conv1d",
            &[vec![2, 3, 9], vec![4, 3, 3], vec![4]],
            23,
            |tape, ids| {
                let y = tape.conv1d(ids[0], ids[1], ids[2], 2).unwrap();
                weighted_readout(tape, y, 23)
            },
        );
        assert!(report.passes(1e-6), "{:?}", report);
    }

    #[test]
    fn bilstm_gradient() {
        let (feat, hidden, len) = (2usize, 3usize, 4usize);
        let h4 = 4 * hidden;
        let report = check_gradients(
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
            29,
            move |tape, ids| {
                let y = tape
                    .bilstm(
                        ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6],
                        &[len, len - 1],
                    )
                    .unwrap();
                weighted_readout(tape, y, 29)
            },
        );
        assert!(report.passes(1e-4), "{:?}", report);
    }

    #[test]
    fn stats_pool_gradient() {
        let report = check_gradients("stats_pool", &[vec![2, 3, 5]], 31, |tape, ids| {
            let y = tape.stats_pool(ids[0], &[5, 3], 1e-5).unwrap();
            weighted_readout(tape, y, 31)
        });
        assert!(report.passes(1e-4), "{:?}", report);
    }

    #[test]
    fn batch_norm_gradients() {
        let report = check_gradients(
            "batch_norm_2d",
            &[vec![4, 3], vec![3], vec![3]],
            37,
            |tape, ids| {
                let (y, _) = tape
                    .batch_norm(ids[0], ids[1], ids[2], &BnMode::Train { valid: None }, 1e-5)
                    .unwrap();
                weighted_readout(tape, y, 37)
            },
        );
        assert!(report.passes(1e-4), "{:?}", report);

        let report = check_gradients(
            "batch_norm_3d_masked",
            &[vec![2, 3, 4], vec![3], vec![3]],
            41,
            |tape, ids| {
                let mode = BnMode::Train {
                    valid: Some(vec![4, 2]),
                };
                let (y, _) = tape.batch_norm(ids[0], ids[1], ids[2], &mode, 1e-5).unwrap();
                weighted_readout(tape, y, 41)
            },
        );
        assert!(report.passes(1e-4), "{:?}", report);

        let report = check_gradients(
            "batch_norm_eval",
            &[vec![2, 3], vec![3], vec![3]],
            43,
            |tape, ids| {
                let mode = BnMode::Eval {
                    running_mean: vec![0.1, -0.2, 0.3],
                    running_var: vec![1.5, 0.7, 1.0],
                    valid: None,
                };
                let (y, _) = tape.batch_norm(ids[0], ids[1], ids[2], &mode, 1e-5).unwrap();
                weighted_readout(tape, y, 43)
            },
        );
        assert!(report.passes(1e-6), "{:?}", report);
    }

    #[test]
    fn dropout_gradient_with_fixed_mask() {
        let report = check_gradients("dropout", &[vec![3, 4]], 47, |tape, ids| {
            let mut rng = rng_from(99);
            let y = tape.dropout(ids[0], 0.5, &mut rng);
            weighted_readout(tape, y, 47)
        });
        assert!(report.passes(1e-6), "{:?}", report);
    }
}
