//! Finite-difference and SVD oracles for the backward pass and the
//! linearization probe, on nets small enough to brute-force.

use richlab_core::*;

fn build(activation: Activation, r: f64, seed: u64, dims: (usize, usize, usize)) -> (Network, Sample) {
    let (d, n, out) = dims;
    let spec = NetSpec::new(3, d, n, out, activation).unwrap();
    let scales = layer_scales(Gauge::MuP, &Richness::on_scale(r).unwrap(), &spec);
    let net = init_network(&spec, &scales, &mut RngState::new(seed, 0));
    let sample = gaussian_dataset(&spec, 1, &mut RngState::new(seed, 1))
        .into_iter()
        .next()
        .unwrap();
    (net, sample)
}

fn loss_of(net: &Network, sample: &Sample) -> f64 {
    let trace = net.forward(&sample.x);
    loss_and_grad(&sample.y, trace.output()).0
}

/// Central finite difference of the loss with respect to every weight entry.
fn fd_weight_grads(net: &Network, sample: &Sample) -> Vec<Matrix> {
    let mut net = net.clone();
    let mut grads = Vec::new();
    for l in 0..net.depth() {
        let rows = net.weights[l].rows();
        let cols = net.weights[l].cols();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let w0 = net.weights[l][(i, j)];
                let h = 1e-6 * w0.abs().max(1.0);
                net.weights[l][(i, j)] = w0 + h;
                let lp = loss_of(&net, sample);
                net.weights[l][(i, j)] = w0 - h;
                let lm = loss_of(&net, sample);
                net.weights[l][(i, j)] = w0;
                g[(i, j)] = (lp - lm) / (2.0 * h);
            }
        }
        grads.push(g);
    }
    grads
}

/// Loss as a function of the layer-l representation, holding later layers
/// fixed: re-runs the network tail from the given post-activation vector.
fn tail_loss(net: &Network, l: usize, h_l: &Vector, y: &Vector) -> f64 {
    let mut h = h_l.clone();
    for m in (l + 1)..=net.depth() {
        let mut a = numkit::matvec(&net.weights[m - 1], &h);
        a.scale(net.scales.g[m - 1]);
        if net.spec.activation == Activation::Relu && m < net.depth() {
            for v in a.data.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = a;
    }
    loss_and_grad(y, &h).0
}

#[test]
fn weight_gradients_match_central_differences() {
    for (activation, seed) in [(Activation::Linear, 3u64), (Activation::Relu, 4u64)] {
        for (r, seed_off) in [(0.0, 0), (0.25, 10), (0.5, 20)] {
            let (net, sample) = build(activation, r, seed + seed_off, (5, 8, 3));
            let trace = net.forward(&sample.x);
            let (_, dl) = loss_and_grad(&sample.y, trace.output());
            let bt = backward(&net, &trace, &dl);
            let fd = fd_weight_grads(&net, &sample);
            for l in 0..3 {
                // 1e-7 relative at the gradient's scale; entries far below
                // that scale sit at the finite-difference roundoff floor
                let scale = bt.weight_grads[l].frob_norm().max(1e-8);
                for (a, b) in bt.weight_grads[l].data().iter().zip(fd[l].data()) {
                    assert!(
                        (a - b).abs() <= 1e-7 * a.abs().max(b.abs()).max(scale),
                        "layer {} ({:?}, r={r}): analytic {a} vs fd {b}",
                        l + 1,
                        activation
                    );
                }
            }
        }
    }
}

#[test]
fn representation_gradients_match_central_differences() {
    for activation in [Activation::Linear, Activation::Relu] {
        let (net, sample) = build(activation, 0.25, 9, (5, 8, 3));
        let trace = net.forward(&sample.x);
        let (_, dl) = loss_and_grad(&sample.y, trace.output());
        let bt = backward(&net, &trace, &dl);
        for l in 1..=3 {
            let h = &trace.reps[l];
            for i in 0..h.dim() {
                let mut hp = h.clone();
                let step = 1e-6 * h[i].abs().max(1.0);
                hp[i] = h[i] + step;
                let lp = tail_loss(&net, l, &hp, &sample.y);
                hp[i] = h[i] - step;
                let lm = tail_loss(&net, l, &hp, &sample.y);
                let fd = (lp - lm) / (2.0 * step);
                let a = bt.rep_grads[l - 1][i];
                assert!(
                    (a - fd).abs() <= 1e-7 * a.abs().max(fd.abs()).max(1e-4),
                    "layer {l} coord {i} ({activation:?}): analytic {a} vs fd {fd}"
                );
            }
        }
    }
}

#[test]
fn single_sample_weight_gradients_are_rank_one() {
    // second singular value at most 1e-10 of the first, linear activation
    let (net, sample) = build(Activation::Linear, 0.5, 17, (6, 12, 4));
    let trace = net.forward(&sample.x);
    let (_, dl) = loss_and_grad(&sample.y, trace.output());
    let bt = backward(&net, &trace, &dl);
    for g in &bt.weight_grads {
        let m = nalgebra::DMatrix::from_row_slice(g.rows(), g.cols(), g.data());
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[0] > 0.0);
        assert!(
            sv[1] <= 1e-10 * sv[0],
            "sigma_2/sigma_1 = {}",
            sv[1] / sv[0]
        );
    }
}

/// Flattened per-output weight gradients of the model (not the loss).
fn model_jacobian(net: &Network, x: &Vector) -> Vec<f64> {
    let trace = net.forward(x);
    let mut flat = Vec::new();
    for i in 0..net.spec.output_dim {
        let mut seed = Vector::zeros(net.spec.output_dim);
        seed[i] = 1.0;
        let bt = backward(net, &trace, &seed);
        for g in &bt.weight_grads {
            flat.extend_from_slice(g.data());
        }
    }
    flat
}

#[test]
fn grad_change_matches_directional_second_derivative() {
    // The probe's ||grad f(theta_1) - grad f(theta_0)|| should agree with the
    // finite-difference estimate ||(grad f(theta_0 + h u) - grad f(theta_0))/h||
    // * ||delta|| (u = unit step direction), Richardson-extrapolated h -> 0,
    // within 5% on a width-16 net. The identity holds up to third-order
    // terms in the step, so the realized update uses a moderate step size.
    let (net, sample) = build(Activation::Linear, 0.25, 23, (6, 16, 1));
    let trace = net.forward(&sample.x);
    let (_, dl) = loss_and_grad(&sample.y, trace.output());
    let bt = backward(&net, &trace, &dl);
    let opt = OptimizerConfig {
        global_eta: 0.1,
        beta: 0.0,
        batch_size: 1,
    };
    let delta = step_delta(&net, &bt.weight_grads, &opt, &mut MomentumState::new());
    let report = linearization_probe(&net, &delta, &sample.x).unwrap();

    let delta_norm = delta.iter().map(|d| {
        let f = d.frob_norm();
        f * f
    }).sum::<f64>().sqrt();
    let j0 = model_jacobian(&net, &sample.x);
    let j0_norm = numkit::euclidean_norm(&j0);

    let directional = |h: f64| -> f64 {
        let eps = h / delta_norm; // unit direction scaled by h
        let perturbed = net.weights_plus(&delta, eps);
        let mut shifted = net.clone();
        shifted.weights = perturbed;
        let jp = model_jacobian(&shifted, &sample.x);
        let diff: f64 = jp
            .iter()
            .zip(&j0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / h
    };
    let h = 1e-4;
    let d_ext = 2.0 * directional(h / 2.0) - directional(h);
    let fd_estimate = d_ext * delta_norm / j0_norm;
    let rel_err = (report.grad_change_rel - fd_estimate).abs() / fd_estimate;
    assert!(
        rel_err < 0.05,
        "probe {} vs fd {} (rel err {rel_err})",
        report.grad_change_rel,
        fd_estimate
    );
}
