//! Single-step diagnostics.
//!
//! Given a network at `theta_0` and the exact update `delta W` of one
//! optimizer step, these probes split the induced representation update into
//! its layer / passthrough / interaction parts, measure the criteria
//! quantities behind the width-scaling predictions, extract the polynomial
//! expansion of the model in the step direction (linear nets are degree-L
//! polynomials in the step size, so interpolation recovers the gradient and
//! curvature terms exactly), and report how much a completed step magnifies
//! backpropagated gradients.

use thiserror::Error;

use crate::network::{
    backprop_da_vectors, backward_with_weights, forward_with_weights, BackwardTrace, ForwardTrace,
    Network,
};
use crate::numkit::{dot, matvec, transpose_matvec, Matrix, Vector};
use crate::parameterization::Activation;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("mismatched traces: {0}")]
    MismatchedTraces(String),
    #[error("probe requires linear activation")]
    RequiresLinearActivation,
    #[error("delta record has wrong shape at layer {0}")]
    BadDeltaShape(usize),
}

/// One layer of the representation-update split
/// `delta h_l = g dW h_{l-1} + g W dh_{l-1} + g dW dh_{l-1}`.
/// Ratios are signed projections onto the total, normalized so the three
/// ratios sum to 1 when the total is nonzero.
#[derive(Debug, Clone)]
pub struct LayerDecomposition {
    pub layer_term: Vector,
    pub passthrough_term: Vector,
    pub interaction_term: Vector,
    /// The decomposed update: the representation update for linear layers,
    /// the preactivation update for relu hidden layers.
    pub total: Vector,
    /// Actual representation update `h_l(after) - h_l(before)`.
    pub rep_update: Vector,
    pub layer_ratio: f64,
    pub passthrough_ratio: f64,
    pub interaction_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct StepDecomposition {
    /// Index 0 holds layer 1.
    pub layers: Vec<LayerDecomposition>,
    /// True for relu networks, where the split is exact on preactivations
    /// but only approximates the post-activation representation update.
    pub approximate: bool,
}

/// Split the one-step representation update of every layer. `net_before`
/// must still hold the pre-step weights; compute the after-trace with
/// `Network::forward_with_delta(delta, 1.0, x)` to avoid mutating it.
pub fn decompose_update(
    net_before: &Network,
    delta_w: &[Matrix],
    before: &ForwardTrace,
    after: &ForwardTrace,
) -> Result<StepDecomposition, ProbeError> {
    let depth = net_before.depth();
    check_traces(net_before, delta_w, before, after)?;

    let relu = net_before.spec.activation == Activation::Relu;
    let mut layers = Vec::with_capacity(depth);
    for l in 1..=depth {
        let g = net_before.scales.g[l - 1];
        let h_prev = &before.reps[l - 1];
        let rep_update = after.reps[l].sub(&before.reps[l]);

        let mut layer_term = matvec(&delta_w[l - 1], h_prev);
        layer_term.scale(g);

        let (passthrough_term, interaction_term) = if l == 1 {
            // the input is fixed, so nothing passes through
            (Vector::zeros(layer_term.dim()), Vector::zeros(layer_term.dim()))
        } else {
            let dh_prev = after.reps[l - 1].sub(&before.reps[l - 1]);
            let mut pass = matvec(&net_before.weights[l - 1], &dh_prev);
            pass.scale(g);
            let mut inter = matvec(&delta_w[l - 1], &dh_prev);
            inter.scale(g);
            (pass, inter)
        };

        let total = if relu && l < depth {
            after.preacts[l - 1].sub(&before.preacts[l - 1])
        } else {
            rep_update.clone()
        };

        let denom = dot(&total.data, &total.data);
        let ratio = |term: &Vector| {
            if denom > 0.0 {
                dot(&term.data, &total.data) / denom
            } else {
                0.0
            }
        };
        layers.push(LayerDecomposition {
            layer_ratio: ratio(&layer_term),
            passthrough_ratio: ratio(&passthrough_term),
            interaction_ratio: ratio(&interaction_term),
            layer_term,
            passthrough_term,
            interaction_term,
            total,
            rep_update,
        });
    }
    Ok(StepDecomposition {
        layers,
        approximate: relu,
    })
}

fn check_traces(
    net: &Network,
    delta_w: &[Matrix],
    before: &ForwardTrace,
    after: &ForwardTrace,
) -> Result<(), ProbeError> {
    let depth = net.depth();
    if before.reps.len() != depth + 1 || after.reps.len() != depth + 1 {
        return Err(ProbeError::MismatchedTraces(format!(
            "expected {} representations, got {}/{}",
            depth + 1,
            before.reps.len(),
            after.reps.len()
        )));
    }
    if before.reps[0] != after.reps[0] {
        return Err(ProbeError::MismatchedTraces(
            "traces were computed on different inputs".into(),
        ));
    }
    if delta_w.len() != depth {
        return Err(ProbeError::BadDeltaShape(delta_w.len()));
    }
    for (l, (d, w)) in delta_w.iter().zip(&net.weights).enumerate() {
        if (d.rows(), d.cols()) != (w.rows(), w.cols()) {
            return Err(ProbeError::BadDeltaShape(l + 1));
        }
    }
    Ok(())
}

/// Scalar criteria measurements for one layer; no thresholds are applied
/// here, the scaling module fits exponents over width sweeps.
#[derive(Debug, Clone)]
pub struct CriteriaLayer {
    /// `||delta h_l||`
    pub rep_update_norm: f64,
    /// `|<dL/dh_l, delta h_l>|`
    pub uuc_value: f64,
    /// `||g_l dW_l h_{l-1}||`
    pub layer_contrib_norm: f64,
    /// `||h_l||` before the step
    pub rep_norm: f64,
    /// `||dL/dh_l||`
    pub rep_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CriteriaReport {
    pub layers: Vec<CriteriaLayer>,
}

pub fn measure_criteria(
    bt: &BackwardTrace,
    dec: &StepDecomposition,
    ft: &ForwardTrace,
) -> CriteriaReport {
    let layers = dec
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| CriteriaLayer {
            rep_update_norm: layer.rep_update.norm(),
            uuc_value: bt.rep_grads[i].dot(&layer.rep_update).abs(),
            layer_contrib_norm: layer.layer_term.norm(),
            rep_norm: ft.reps[i + 1].norm(),
            rep_grad_norm: bt.rep_grads[i].norm(),
        })
        .collect();
    CriteriaReport { layers }
}

/// Polynomial expansion of `eps -> f(x; theta_0 + eps * delta)` plus the
/// change of the flattened model gradient across the step.
#[derive(Debug, Clone)]
pub struct LinearizationReport {
    /// `c_0..c_L`, one vector of length `n_L` per degree.
    pub poly_coeffs: Vec<Vector>,
    /// `||c_1||`: the first-order (gradient) term at step size 1.
    pub gradient_term: f64,
    /// `2 ||c_2||`: the second-order (curvature) term at step size 1.
    pub curvature_term: f64,
    /// `||grad f(theta_1) - grad f(theta_0)||` over all outputs and weights.
    pub grad_change_abs: f64,
    /// Same, relative to `||grad f(theta_0)||`.
    pub grad_change_rel: f64,
    pub grad_norm_init: f64,
}

/// Chebyshev nodes in [-1, 1]; well-conditioned for low-degree Vandermonde
/// interpolation.
fn chebyshev_nodes(count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * count) as f64).cos())
        .collect()
}

/// Exact polynomial coefficients of the linear model along `delta`,
/// recovered by interpolation at `L+1` Chebyshev nodes.
pub fn interpolation_coefficients(
    net: &Network,
    delta: &[Matrix],
    x: &Vector,
) -> Result<Vec<Vector>, ProbeError> {
    if net.spec.activation != Activation::Linear {
        return Err(ProbeError::RequiresLinearActivation);
    }
    let depth = net.depth();
    let nodes = chebyshev_nodes(depth + 1);
    let outputs: Vec<Vector> = nodes
        .iter()
        .map(|&eps| net.forward_with_delta(delta, eps, x).output().clone())
        .collect();

    // Vandermonde system: sum_j c_j eps_k^j = f(eps_k), one RHS per output
    // coordinate, solved by Gaussian elimination with partial pivoting.
    let m = depth + 1;
    let n_out = net.spec.output_dim;
    let mut aug = vec![vec![0.0; m + n_out]; m];
    for (k, &eps) in nodes.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..m {
            aug[k][j] = p;
            p *= eps;
        }
        for i in 0..n_out {
            aug[k][m + i] = outputs[k][i];
        }
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
            .expect("nonempty pivot range");
        aug.swap(col, pivot);
        let p = aug[col][col];
        for row in col + 1..m {
            let factor = aug[row][col] / p;
            for j in col..m + n_out {
                let v = aug[col][j];
                aug[row][j] -= factor * v;
            }
        }
    }
    let mut coeffs = vec![Vector::zeros(n_out); m];
    for rhs in 0..n_out {
        for row in (0..m).rev() {
            let mut acc = aug[row][m + rhs];
            for j in row + 1..m {
                acc -= aug[row][j] * coeffs[j][rhs];
            }
            coeffs[row][rhs] = acc / aug[row][row];
        }
    }
    Ok(coeffs)
}

/// Full linearization probe: polynomial coefficients plus the gradient
/// change, the latter computed by materializing the flattened per-output
/// weight gradients at `theta_0` and `theta_1 = theta_0 + delta`.
pub fn linearization_probe(
    net: &Network,
    delta: &[Matrix],
    x: &Vector,
) -> Result<LinearizationReport, ProbeError> {
    let poly_coeffs = interpolation_coefficients(net, delta, x)?;
    let after_weights = net.weights_plus(delta, 1.0);
    let trace0 = net.forward(x);
    let trace1 = forward_with_weights(&net.spec, &net.scales, &after_weights, x);

    let mut sq_diff = 0.0;
    let mut sq_base = 0.0;
    for i in 0..net.spec.output_dim {
        let mut seed = Vector::zeros(net.spec.output_dim);
        seed[i] = 1.0;
        let bt0 = backward_with_weights(&net.spec, &net.scales, &net.weights, &trace0, &seed);
        let bt1 = backward_with_weights(&net.spec, &net.scales, &after_weights, &trace1, &seed);
        for (g0, g1) in bt0.weight_grads.iter().zip(&bt1.weight_grads) {
            sq_base += dot(g0.data(), g0.data());
            for (a, b) in g1.data().iter().zip(g0.data()) {
                let d = a - b;
                sq_diff += d * d;
            }
        }
    }
    let grad_norm_init = sq_base.sqrt();
    let grad_change_abs = sq_diff.sqrt();
    let grad_change_rel = if grad_norm_init > 0.0 {
        grad_change_abs / grad_norm_init
    } else {
        0.0
    };

    let gradient_term = poly_coeffs[1].norm();
    let curvature_term = 2.0 * poly_coeffs[2].norm();
    Ok(LinearizationReport {
        poly_coeffs,
        gradient_term,
        curvature_term,
        grad_change_abs,
        grad_change_rel,
        grad_norm_init,
    })
}

/// Gradient-change norms via the rank-1 structure of per-output weight
/// gradients (`g_l u (x) v` per layer): returns
/// `(grad_change_abs, grad_change_rel, grad_norm_init)` identical to the
/// materializing path up to rounding, in O(width) memory.
pub fn grad_change_fast(
    net: &Network,
    delta: &[Matrix],
    x: &Vector,
) -> Result<(f64, f64, f64), ProbeError> {
    if net.spec.activation != Activation::Linear {
        return Err(ProbeError::RequiresLinearActivation);
    }
    let after_weights = net.weights_plus(delta, 1.0);
    let trace0 = net.forward(x);
    let trace1 = forward_with_weights(&net.spec, &net.scales, &after_weights, x);

    let mut sq_diff = 0.0;
    let mut sq_base = 0.0;
    for i in 0..net.spec.output_dim {
        let mut seed = Vector::zeros(net.spec.output_dim);
        seed[i] = 1.0;
        let das0 = backprop_da_vectors(&net.spec, &net.scales, &net.weights, &trace0, &seed);
        let das1 = backprop_da_vectors(&net.spec, &net.scales, &after_weights, &trace1, &seed);
        for l in 0..net.depth() {
            let g2 = net.scales.g[l] * net.scales.g[l];
            let (u0, u1) = (&das0[l], &das1[l]);
            let (v0, v1) = (&trace0.reps[l], &trace1.reps[l]);
            let u0u0 = dot(&u0.data, &u0.data);
            let u1u1 = dot(&u1.data, &u1.data);
            let u0u1 = dot(&u0.data, &u1.data);
            let v0v0 = dot(&v0.data, &v0.data);
            let v1v1 = dot(&v1.data, &v1.data);
            let v0v1 = dot(&v0.data, &v1.data);
            sq_base += g2 * u0u0 * v0v0;
            sq_diff += g2 * (u1u1 * v1v1 - 2.0 * u0u1 * v0v1 + u0u0 * v0v0);
        }
    }
    let base = sq_base.sqrt();
    let abs = sq_diff.max(0.0).sqrt();
    let rel = if base > 0.0 { abs / base } else { 0.0 };
    Ok((abs, rel, base))
}

/// Per-layer gradient magnification `||(W + dW)^T v|| / ||W^T v||` with
/// `v = dL/dh_l` taken from a backward pass after the step.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    /// `None` marks a degenerate layer (zero denominator).
    pub ratios: Vec<Option<f64>>,
}

pub fn alignment_magnification(
    net_before: &Network,
    net_after: &Network,
    bt_new: &BackwardTrace,
) -> AlignmentReport {
    alignment_from_weights(&net_before.weights, &net_after.weights, bt_new)
}

pub fn alignment_from_weights(
    weights_before: &[Matrix],
    weights_after: &[Matrix],
    bt_new: &BackwardTrace,
) -> AlignmentReport {
    let ratios = weights_before
        .iter()
        .zip(weights_after)
        .zip(&bt_new.rep_grads)
        .map(|((w0, w1), v)| {
            let denom = transpose_matvec(w0, v).norm();
            if denom > 0.0 {
                Some(transpose_matvec(w1, v).norm() / denom)
            } else {
                None
            }
        })
        .collect();
    AlignmentReport { ratios }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        backward, gaussian_dataset, init_network, loss_and_grad, sgd_step, step_delta,
        MomentumState, OptimizerConfig,
    };
    use crate::numkit::RngState;
    use crate::parameterization::{layer_scales, Gauge, NetSpec, Richness};

    fn make_net(depth: usize, d: usize, n: usize, out: usize, r: f64, seed: u64) -> Network {
        let spec = NetSpec::new(depth, d, n, out, Activation::Linear).unwrap();
        let scales = layer_scales(Gauge::MuP, &Richness::off_scale(r), &spec);
        init_network(&spec, &scales, &mut RngState::new(seed, 0))
    }

    fn probe_step(net: &Network, seed: u64) -> (Vector, ForwardTrace, BackwardTrace, Vec<Matrix>) {
        let data = gaussian_dataset(&net.spec, 1, &mut RngState::new(seed, 1));
        let trace = net.forward(&data[0].x);
        let (_, dl) = loss_and_grad(&data[0].y, trace.output());
        let bt = backward(net, &trace, &dl);
        let opt = OptimizerConfig {
            global_eta: 1.0,
            beta: 0.0,
            batch_size: 1,
        };
        let delta = step_delta(net, &bt.weight_grads, &opt, &mut MomentumState::new());
        (data[0].x.clone(), trace, bt, delta)
    }

    #[test]
    fn zero_delta_gives_zero_terms() {
        let net = make_net(3, 4, 8, 2, 0.25, 1);
        let x = gaussian_dataset(&net.spec, 1, &mut RngState::new(2, 1))[0].x.clone();
        let trace = net.forward(&x);
        let zero: Vec<Matrix> = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let after = net.forward_with_delta(&zero, 1.0, &x);
        let dec = decompose_update(&net, &zero, &trace, &after).unwrap();
        for layer in &dec.layers {
            assert_eq!(layer.layer_term.norm(), 0.0);
            assert_eq!(layer.passthrough_term.norm(), 0.0);
            assert_eq!(layer.interaction_term.norm(), 0.0);
            assert!(layer.total.norm() <= 1e-18);
            assert_eq!(layer.layer_ratio, 0.0);
        }
    }

    #[test]
    fn first_layer_has_no_passthrough_or_interaction() {
        let net = make_net(3, 4, 8, 2, 0.5, 3);
        let (x, trace, _bt, delta) = probe_step(&net, 4);
        let after = net.forward_with_delta(&delta, 1.0, &x);
        let dec = decompose_update(&net, &delta, &trace, &after).unwrap();
        assert!(dec.layers[0].passthrough_term.data.iter().all(|&v| v == 0.0));
        assert!(dec.layers[0].interaction_term.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terms_sum_to_measured_update() {
        for (r, seed) in [(0.0, 5), (0.25, 6), (0.5, 7)] {
            let net = make_net(3, 2, 2, 2, r, seed);
            let (x, trace, _bt, delta) = probe_step(&net, seed + 10);
            let after = net.forward_with_delta(&delta, 1.0, &x);
            let dec = decompose_update(&net, &delta, &trace, &after).unwrap();
            for layer in &dec.layers {
                let mut sum = layer.layer_term.clone();
                sum.add_scaled(&layer.passthrough_term, 1.0);
                sum.add_scaled(&layer.interaction_term, 1.0);
                let resid = sum.sub(&layer.total).norm();
                assert!(
                    resid <= 1e-12 * layer.total.norm().max(1e-300),
                    "residual {resid} at r={r}"
                );
            }
        }
    }

    #[test]
    fn ratios_sum_to_one() {
        let net = make_net(3, 4, 16, 3, 0.5, 11);
        let (x, trace, _bt, delta) = probe_step(&net, 12);
        let after = net.forward_with_delta(&delta, 1.0, &x);
        let dec = decompose_update(&net, &delta, &trace, &after).unwrap();
        for layer in &dec.layers {
            let sum = layer.layer_ratio + layer.passthrough_ratio + layer.interaction_ratio;
            assert!((sum - 1.0).abs() < 1e-9, "ratio sum {sum}");
        }
    }

    #[test]
    fn mismatched_traces_are_rejected() {
        let net = make_net(3, 4, 8, 2, 0.25, 1);
        let data = gaussian_dataset(&net.spec, 2, &mut RngState::new(2, 1));
        let t1 = net.forward(&data[0].x);
        let t2 = net.forward(&data[1].x);
        let zero: Vec<Matrix> = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        assert!(matches!(
            decompose_update(&net, &zero, &t1, &t2),
            Err(ProbeError::MismatchedTraces(_))
        ));
    }

    #[test]
    fn uuc_value_matches_direct_dot() {
        let net = make_net(3, 4, 12, 2, 0.5, 8);
        let (x, trace, bt, delta) = probe_step(&net, 9);
        let after = net.forward_with_delta(&delta, 1.0, &x);
        let dec = decompose_update(&net, &delta, &trace, &after).unwrap();
        let report = measure_criteria(&bt, &dec, &trace);
        for l in 0..3 {
            let direct = dot(&bt.rep_grads[l].data, &dec.layers[l].rep_update.data).abs();
            assert_eq!(report.layers[l].uuc_value, direct);
        }
    }

    #[test]
    fn zero_step_criteria_are_zero() {
        let net = make_net(3, 4, 8, 2, 0.25, 1);
        let x = gaussian_dataset(&net.spec, 1, &mut RngState::new(2, 1))[0].x.clone();
        let trace = net.forward(&x);
        let zero: Vec<Matrix> = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let after = net.forward_with_delta(&zero, 1.0, &x);
        let dec = decompose_update(&net, &zero, &trace, &after).unwrap();
        let bt = backward(&net, &trace, &Vector::zeros(2));
        let report = measure_criteria(&bt, &dec, &trace);
        for layer in &report.layers {
            assert_eq!(layer.rep_update_norm, 0.0);
            assert_eq!(layer.uuc_value, 0.0);
            assert_eq!(layer.layer_contrib_norm, 0.0);
        }
    }

    #[test]
    fn coefficients_match_symbolic_expansion() {
        // depth-3 width-2 net: expand (W3 + e D3)(W2 + e D2)(W1 + e D1) x
        // symbolically (with the gradient multipliers folded in).
        let net = make_net(3, 2, 2, 1, 0.25, 21);
        let (x, _trace, _bt, delta) = probe_step(&net, 22);
        let coeffs = interpolation_coefficients(&net, &delta, &x).unwrap();

        let scaled = |m: &Matrix, g: f64| {
            let mut out = m.clone();
            out.scale(g);
            out
        };
        let w: Vec<Matrix> = (0..3).map(|l| scaled(&net.weights[l], net.scales.g[l])).collect();
        let d: Vec<Matrix> = (0..3).map(|l| scaled(&delta[l], net.scales.g[l])).collect();
        let term = |a: &Matrix, b: &Matrix, c: &Matrix| {
            matvec(&crate::numkit::matmat(c, &crate::numkit::matmat(b, a)), &x)
        };
        let c0 = term(&w[0], &w[1], &w[2]);
        let mut c1 = term(&d[0], &w[1], &w[2]);
        c1.add_scaled(&term(&w[0], &d[1], &w[2]), 1.0);
        c1.add_scaled(&term(&w[0], &w[1], &d[2]), 1.0);
        let mut c2 = term(&d[0], &d[1], &w[2]);
        c2.add_scaled(&term(&d[0], &w[1], &d[2]), 1.0);
        c2.add_scaled(&term(&w[0], &d[1], &d[2]), 1.0);
        let c3 = term(&d[0], &d[1], &d[2]);

        let expected = [c0, c1, c2, c3];
        for (k, exp) in expected.iter().enumerate() {
            let err = coeffs[k].sub(exp).norm();
            assert!(
                err <= 1e-12 * exp.norm().max(1e-6),
                "coefficient {k}: error {err}"
            );
        }
    }

    #[test]
    fn single_layer_perturbation_is_affine() {
        let net = make_net(3, 4, 8, 1, 0.25, 31);
        let (x, _trace, _bt, mut delta) = probe_step(&net, 32);
        delta[0].fill(0.0);
        delta[2].fill(0.0); // only layer 2 perturbed
        let coeffs = interpolation_coefficients(&net, &delta, &x).unwrap();
        for k in 2..coeffs.len() {
            assert!(
                coeffs[k].norm() <= 1e-10 * coeffs[0].norm().max(1.0),
                "degree-{k} coefficient should vanish"
            );
        }
    }

    #[test]
    fn zero_delta_probe_is_flat() {
        let net = make_net(3, 4, 8, 2, 0.25, 41);
        let x = gaussian_dataset(&net.spec, 1, &mut RngState::new(42, 1))[0].x.clone();
        let zero: Vec<Matrix> = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let report = linearization_probe(&net, &zero, &x).unwrap();
        assert_eq!(report.grad_change_rel, 0.0);
        for k in 1..report.poly_coeffs.len() {
            assert!(report.poly_coeffs[k].norm() <= 1e-12 * report.poly_coeffs[0].norm());
        }
    }

    #[test]
    fn probe_rejects_relu() {
        let spec = NetSpec::new(3, 4, 8, 2, Activation::Relu).unwrap();
        let scales = layer_scales(Gauge::MuP, &Richness::on_scale(0.25).unwrap(), &spec);
        let net = init_network(&spec, &scales, &mut RngState::new(1, 0));
        let x = gaussian_dataset(&spec, 1, &mut RngState::new(2, 1))[0].x.clone();
        let zero: Vec<Matrix> = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        assert_eq!(
            linearization_probe(&net, &zero, &x).unwrap_err(),
            ProbeError::RequiresLinearActivation
        );
    }

    #[test]
    fn coefficient_sum_matches_full_step_evaluation() {
        let net = make_net(3, 4, 16, 3, 0.5, 51);
        let (x, _trace, _bt, delta) = probe_step(&net, 52);
        let coeffs = interpolation_coefficients(&net, &delta, &x).unwrap();
        let mut sum = Vector::zeros(3);
        for c in &coeffs {
            sum.add_scaled(c, 1.0);
        }
        let direct = net.forward_with_delta(&delta, 1.0, &x);
        let err = sum.sub(direct.output()).norm();
        assert!(err <= 1e-10 * direct.output().norm().max(1e-300), "err {err}");
        // c_0 equals the unperturbed forward
        let base = net.forward(&x);
        let err0 = coeffs[0].sub(base.output()).norm();
        assert!(err0 <= 1e-12 * base.output().norm().max(1e-300));
    }

    #[test]
    fn fast_grad_change_matches_materialized() {
        let net = make_net(3, 6, 24, 4, 0.5, 61);
        let (x, _trace, _bt, delta) = probe_step(&net, 62);
        let report = linearization_probe(&net, &delta, &x).unwrap();
        let (abs, rel, base) = grad_change_fast(&net, &delta, &x).unwrap();
        assert!((abs - report.grad_change_abs).abs() <= 1e-10 * report.grad_change_abs.max(1e-300));
        assert!((rel - report.grad_change_rel).abs() <= 1e-10 * report.grad_change_rel.max(1e-300));
        assert!((base - report.grad_norm_init).abs() <= 1e-10 * report.grad_norm_init);
    }

    #[test]
    fn alignment_ratio_is_one_for_zero_delta() {
        let net = make_net(3, 4, 8, 2, 0.25, 71);
        let (x, trace, _bt, _delta) = probe_step(&net, 72);
        let (_, dl) = loss_and_grad(
            &gaussian_dataset(&net.spec, 1, &mut RngState::new(72, 1))[0].y,
            trace.output(),
        );
        let bt = backward(&net, &trace, &dl);
        let report = alignment_magnification(&net, &net, &bt);
        for ratio in &report.ratios {
            assert_eq!(ratio.unwrap(), 1.0);
        }
    }

    #[test]
    fn alignment_flags_zero_denominator() {
        let net = make_net(3, 4, 8, 2, 0.25, 81);
        let bt = BackwardTrace {
            rep_grads: (1..=3).map(|l| Vector::zeros(net.spec.layer_dim(l))).collect(),
            weight_grads: Vec::new(),
        };
        let report = alignment_magnification(&net, &net, &bt);
        assert!(report.ratios.iter().all(|r| r.is_none()));
    }

    #[test]
    fn one_applied_step_matches_functional_probe() {
        // applying sgd_step then re-forwarding agrees with forward_with_delta
        let net0 = make_net(3, 4, 8, 2, 0.25, 91);
        let (x, trace, bt, delta) = probe_step(&net0, 92);
        let after_functional = net0.forward_with_delta(&delta, 1.0, &x);

        let mut net1 = net0.clone();
        let opt = OptimizerConfig {
            global_eta: 1.0,
            beta: 0.0,
            batch_size: 1,
        };
        let applied = sgd_step(&mut net1, &bt.weight_grads, &opt, &mut MomentumState::new());
        let after_applied = net1.forward(&x);
        for (a, b) in applied.iter().zip(&delta) {
            assert_eq!(a.data(), b.data());
        }
        let err = after_functional
            .output()
            .sub(after_applied.output())
            .norm();
        assert!(err <= 1e-12 * after_applied.output().norm().max(1e-300));
        let _ = trace;
    }
}
