//! The trainable model: a deep linear/ReLU MLP with per-layer gradient
//! multipliers, init scales, and learning rates, trained by minibatch SGD
//! with optional momentum. Forward/backward passes capture full traces so
//! the probes can dissect single steps.
//!
//! Layer `l` computes `a_l = g_l * W_l * h_{l-1}`; hidden layers apply the
//! activation (`relu` derivative at exactly 0 is 0), the output layer is
//! always linear. Initialization draws unit-Gaussian base matrices `Z_l`
//! that depend only on (rng, shapes) and sets `W_l = sigma_l * Z_l`, so two
//! gauges at the same seed share base draws.

use serde::{Deserialize, Serialize};

use crate::numkit::{
    accumulate_outer_batch, dot, gaussian_matrix, gaussian_vector, matvec, outer_product,
    transpose_matmat, transpose_matvec, Matrix, RngState, Vector,
};
use crate::parameterization::{Activation, LayerScales, NetSpec};

/// Global optimizer settings; the effective step on layer `l` is
/// `global_eta * eta_l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub global_eta: f64,
    /// Momentum coefficient in `[0, 1)`.
    pub beta: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            global_eta: 0.1,
            beta: 0.9,
            batch_size: 1,
        }
    }
}

/// One training pair. For the synthetic task both sides are i.i.d. unit
/// Gaussians, so `||x||^2 ~ n0`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Vector,
    pub y: Vector,
}

/// Synthetic Gaussian dataset; draws `x` then `y` for each sample in order.
pub fn gaussian_dataset(spec: &NetSpec, count: usize, rng: &mut RngState) -> Vec<Sample> {
    (0..count)
        .map(|_| Sample {
            x: gaussian_vector(spec.input_dim, 1.0, rng),
            y: gaussian_vector(spec.output_dim, 1.0, rng),
        })
        .collect()
}

/// Weights plus the unit-Gaussian draws they were scaled from.
/// `weights[l] == sigma_l * base_draws[l]` holds at initialization only.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub scales: LayerScales,
    pub weights: Vec<Matrix>,
    pub base_draws: Vec<Matrix>,
    pub diverged: bool,
}

/// Draw base matrices in layer order (each row-major) and scale them.
pub fn init_network(spec: &NetSpec, scales: &LayerScales, rng: &mut RngState) -> Network {
    assert_eq!(scales.depth(), spec.depth, "scales/spec depth mismatch");
    let mut base_draws = Vec::with_capacity(spec.depth);
    for l in 1..=spec.depth {
        base_draws.push(gaussian_matrix(spec.layer_dim(l), spec.fanin(l), 1.0, rng));
    }
    let weights = base_draws
        .iter()
        .zip(&scales.sigma)
        .map(|(z, &sigma)| {
            let mut w = Matrix::zeros(z.rows(), z.cols());
            w.assign_scaled(z, sigma);
            w
        })
        .collect();
    Network {
        spec: *spec,
        scales: scales.clone(),
        weights,
        base_draws,
        diverged: false,
    }
}

impl Network {
    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    /// Restore `W_l = sigma_l * Z_l` bit-exactly.
    pub fn reset_to_init(&mut self) {
        for (w, (z, &sigma)) in self
            .weights
            .iter_mut()
            .zip(self.base_draws.iter().zip(&self.scales.sigma))
        {
            w.assign_scaled(z, sigma);
        }
        self.diverged = false;
    }

    pub fn forward(&self, x: &Vector) -> ForwardTrace {
        forward_with_weights(&self.spec, &self.scales, &self.weights, x)
    }

    /// Forward pass of the perturbed model `W_l + eps * delta_l`, evaluated
    /// as `g*(W h + eps*(delta h))` without materializing the sum.
    pub fn forward_with_delta(&self, delta: &[Matrix], eps: f64, x: &Vector) -> ForwardTrace {
        let spec = &self.spec;
        let mut reps = Vec::with_capacity(spec.depth + 1);
        let mut preacts = Vec::new();
        let mut diverged = false;
        reps.push(x.clone());
        for l in 1..=spec.depth {
            let mut a = matvec(&self.weights[l - 1], &reps[l - 1]);
            a.add_scaled(&matvec(&delta[l - 1], &reps[l - 1]), eps);
            a.scale(self.scales.g[l - 1]);
            diverged |= !a.is_finite();
            reps.push(apply_activation(spec, l, &mut preacts, a));
        }
        ForwardTrace {
            reps,
            preacts,
            diverged,
        }
    }

    /// `W_l + eps * delta_l` materialized; used for second backward passes.
    pub fn weights_plus(&self, delta: &[Matrix], eps: f64) -> Vec<Matrix> {
        self.weights
            .iter()
            .zip(delta)
            .map(|(w, d)| {
                let mut out = w.clone();
                out.add_scaled(d, eps);
                out
            })
            .collect()
    }
}

/// Representations `h_0..h_L` (and hidden-layer preactivations for relu).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub reps: Vec<Vector>,
    /// Preactivations of hidden layers 1..L-1 (empty for linear nets).
    pub preacts: Vec<Vector>,
    pub diverged: bool,
}

impl ForwardTrace {
    pub fn output(&self) -> &Vector {
        self.reps.last().expect("trace always holds h_0..h_L")
    }
}

fn apply_activation(spec: &NetSpec, l: usize, preacts: &mut Vec<Vector>, a: Vector) -> Vector {
    if spec.activation == Activation::Relu && l < spec.depth {
        let h = Vector::from(a.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect::<Vec<_>>());
        preacts.push(a);
        h
    } else {
        a
    }
}

pub(crate) fn forward_with_weights(
    spec: &NetSpec,
    scales: &LayerScales,
    weights: &[Matrix],
    x: &Vector,
) -> ForwardTrace {
    assert_eq!(x.dim(), spec.input_dim, "input dim mismatch");
    let mut reps = Vec::with_capacity(spec.depth + 1);
    let mut preacts = Vec::new();
    let mut diverged = false;
    reps.push(x.clone());
    for l in 1..=spec.depth {
        let mut a = matvec(&weights[l - 1], &reps[l - 1]);
        a.scale(scales.g[l - 1]);
        diverged |= !a.is_finite();
        reps.push(apply_activation(spec, l, &mut preacts, a));
    }
    ForwardTrace {
        reps,
        preacts,
        diverged,
    }
}

/// Mean-squared-error loss `||h - y||^2 / 2` and its gradient `h - y`.
pub fn loss_and_grad(y: &Vector, h_out: &Vector) -> (f64, Vector) {
    let grad = h_out.sub(y);
    let loss = 0.5 * dot(&grad.data, &grad.data);
    (loss, grad)
}

/// Gradients of the loss with respect to representations (`rep_grads[l-1] =
/// dL/dh_l`) and weights. For a single sample and linear activation every
/// weight gradient is the rank-1 matrix `g_l * (dL/dh_l) (x) h_{l-1}`.
#[derive(Debug, Clone)]
pub struct BackwardTrace {
    pub rep_grads: Vec<Vector>,
    pub weight_grads: Vec<Matrix>,
}

pub fn backward(net: &Network, trace: &ForwardTrace, dl_dh_out: &Vector) -> BackwardTrace {
    backward_with_weights(&net.spec, &net.scales, &net.weights, trace, dl_dh_out)
}

pub(crate) fn backward_with_weights(
    spec: &NetSpec,
    scales: &LayerScales,
    weights: &[Matrix],
    trace: &ForwardTrace,
    dl_dh_out: &Vector,
) -> BackwardTrace {
    let depth = spec.depth;
    assert_eq!(dl_dh_out.dim(), spec.output_dim);
    let mut rep_grads = vec![Vector::zeros(0); depth];
    let mut weight_grads: Vec<Matrix> = (1..=depth)
        .map(|l| Matrix::zeros(spec.layer_dim(l), spec.fanin(l)))
        .collect();

    let mut dh = dl_dh_out.clone();
    for l in (1..=depth).rev() {
        rep_grads[l - 1] = dh.clone();
        let da = mask_grad(spec, trace, l, &dh);
        weight_grads[l - 1] = outer_product(&da.scaled(scales.g[l - 1]), &trace.reps[l - 1]);
        if l > 1 {
            let mut prev = transpose_matvec(&weights[l - 1], &da);
            prev.scale(scales.g[l - 1]);
            dh = prev;
        }
    }
    BackwardTrace {
        rep_grads,
        weight_grads,
    }
}

/// Per-layer `dL/da_l` vectors only (no weight-gradient materialization);
/// the rank-1 structure of the weight gradients makes these sufficient for
/// gradient-norm bookkeeping.
pub(crate) fn backprop_da_vectors(
    spec: &NetSpec,
    scales: &LayerScales,
    weights: &[Matrix],
    trace: &ForwardTrace,
    dl_dh_out: &Vector,
) -> Vec<Vector> {
    let depth = spec.depth;
    let mut das = vec![Vector::zeros(0); depth];
    let mut dh = dl_dh_out.clone();
    for l in (1..=depth).rev() {
        let da = mask_grad(spec, trace, l, &dh);
        if l > 1 {
            let mut prev = transpose_matvec(&weights[l - 1], &da);
            prev.scale(scales.g[l - 1]);
            dh = prev;
        }
        das[l - 1] = da;
    }
    das
}

fn mask_grad(spec: &NetSpec, trace: &ForwardTrace, l: usize, dh: &Vector) -> Vector {
    if spec.activation == Activation::Relu && l < spec.depth {
        let a = &trace.preacts[l - 1];
        Vector::from(
            dh.data
                .iter()
                .zip(&a.data)
                .map(|(&g, &av)| if av > 0.0 { g } else { 0.0 })
                .collect::<Vec<_>>(),
        )
    } else {
        dh.clone()
    }
}

/// Momentum velocities, created lazily on the first step with `beta > 0`.
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    pub velocity: Option<Vec<Matrix>>,
}

impl MomentumState {
    pub fn new() -> Self {
        MomentumState::default()
    }
}

/// Compute the exact update the optimizer would apply, advancing the
/// momentum state: `v <- beta v + grad`, `delta = -global_eta * eta_l * v`.
pub fn step_delta(
    net: &Network,
    grads: &[Matrix],
    opt: &OptimizerConfig,
    state: &mut MomentumState,
) -> Vec<Matrix> {
    let mut deltas = Vec::with_capacity(net.depth());
    if opt.beta > 0.0 {
        let velocity = state.velocity.get_or_insert_with(|| {
            grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect()
        });
        for (l, (v, g)) in velocity.iter_mut().zip(grads).enumerate() {
            v.scale(opt.beta);
            v.add_scaled(g, 1.0);
            let mut d = Matrix::zeros(v.rows(), v.cols());
            d.assign_scaled(v, -opt.global_eta * net.scales.eta[l]);
            deltas.push(d);
        }
    } else {
        for (l, g) in grads.iter().enumerate() {
            let mut d = Matrix::zeros(g.rows(), g.cols());
            d.assign_scaled(g, -opt.global_eta * net.scales.eta[l]);
            deltas.push(d);
        }
    }
    deltas
}

/// Apply one SGD(+momentum) step and return the exact `delta W` applied.
/// A non-finite update marks the network diverged.
pub fn sgd_step(
    net: &mut Network,
    grads: &[Matrix],
    opt: &OptimizerConfig,
    state: &mut MomentumState,
) -> Vec<Matrix> {
    let deltas = step_delta(net, grads, opt, state);
    for (w, d) in net.weights.iter_mut().zip(&deltas) {
        w.add_scaled(d, 1.0);
        if !w.is_finite() {
            net.diverged = true;
        }
    }
    deltas
}

/// Training-loop settings beyond the raw optimizer: duration, output
/// rescaling (the model trained is `h_L / output_divisor`), divergence
/// threshold, and what to record.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub opt: OptimizerConfig,
    pub steps: usize,
    /// Model output is `h_L / output_divisor`; 1.0 trains the raw network.
    pub output_divisor: f64,
    /// Loss above this (or any non-finite value) marks the run diverged.
    pub divergence_loss: f64,
    /// Evaluate the recorded loss on the first `eval_subset` dataset entries
    /// (all of them when `None`).
    pub eval_subset: Option<usize>,
    /// Stop once the evaluated loss halves from its initial value.
    pub stop_when_halved: bool,
    /// Record per-step model outputs on the eval subset.
    pub record_outputs: bool,
    /// Record full forward traces on this input at the listed steps.
    pub trace_input: Option<Vector>,
    pub trace_steps: Vec<usize>,
}

impl TrainConfig {
    pub fn new(opt: OptimizerConfig, steps: usize) -> Self {
        TrainConfig {
            opt,
            steps,
            output_divisor: 1.0,
            divergence_loss: 1e12,
            eval_subset: None,
            stop_when_halved: false,
            record_outputs: false,
            trace_input: None,
            trace_steps: Vec::new(),
        }
    }
}

/// Loss history plus optional recorded outputs/traces. `records[0]` is the
/// pre-training loss; entry `t` the loss after step `t`. Losses are averaged
/// over the eval subset.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<(usize, f64)>,
    pub diverged_at: Option<usize>,
    pub outputs: Vec<(usize, Vec<Vector>)>,
    pub traces: Vec<(usize, ForwardTrace)>,
}

/// Minibatch SGD over a fixed dataset with with-replacement uniform batch
/// sampling from `batch_rng`. Deterministic given the rng state.
pub fn train(
    net: &mut Network,
    data: &[Sample],
    cfg: &TrainConfig,
    batch_rng: &mut RngState,
) -> TrainHistory {
    let mut state = MomentumState::new();
    train_with_state(net, data, cfg, batch_rng, &mut state)
}

/// As `train`, but continuing an existing momentum state (used when a probe
/// step follows background training steps).
pub fn train_with_state(
    net: &mut Network,
    data: &[Sample],
    cfg: &TrainConfig,
    batch_rng: &mut RngState,
    state: &mut MomentumState,
) -> TrainHistory {
    assert!(!data.is_empty(), "train: dataset must be nonempty");
    let mut history = TrainHistory::default();
    if cfg.steps == 0 {
        return history;
    }

    let eval_count = cfg.eval_subset.unwrap_or(data.len()).min(data.len());
    let (eval_x, eval_y) = pack_batch(data, &(0..eval_count).collect::<Vec<_>>());

    let mut grads: Vec<Matrix> = (1..=net.depth())
        .map(|l| Matrix::zeros(net.spec.layer_dim(l), net.spec.fanin(l)))
        .collect();

    let (loss0, outputs0) = eval_loss(net, &eval_x, &eval_y, cfg);
    history.records.push((0, loss0));
    if cfg.record_outputs {
        history.outputs.push((0, outputs0));
    }
    if let (Some(input), true) = (&cfg.trace_input, cfg.trace_steps.contains(&0)) {
        history.traces.push((0, net.forward(input)));
    }
    let baseline = loss0;

    for step in 1..=cfg.steps {
        let indices: Vec<usize> = (0..cfg.opt.batch_size)
            .map(|_| batch_rng.uniform_index(data.len()))
            .collect();
        let (bx, by) = pack_batch(data, &indices);
        batch_gradients(net, &bx, &by, cfg, &mut grads);

        // same arithmetic as sgd_step, without materializing delta W
        if cfg.opt.beta > 0.0 {
            let velocity = state.velocity.get_or_insert_with(|| {
                grads
                    .iter()
                    .map(|g| Matrix::zeros(g.rows(), g.cols()))
                    .collect()
            });
            for (l, (v, g)) in velocity.iter_mut().zip(&grads).enumerate() {
                v.scale(cfg.opt.beta);
                v.add_scaled(g, 1.0);
                net.weights[l].add_scaled(v, -cfg.opt.global_eta * net.scales.eta[l]);
            }
        } else {
            for (l, g) in grads.iter().enumerate() {
                net.weights[l].add_scaled(g, -cfg.opt.global_eta * net.scales.eta[l]);
            }
        }

        let (loss, outputs) = eval_loss(net, &eval_x, &eval_y, cfg);
        history.records.push((step, loss));
        if cfg.record_outputs {
            history.outputs.push((step, outputs));
        }
        if let (Some(input), true) = (&cfg.trace_input, cfg.trace_steps.contains(&step)) {
            history.traces.push((step, net.forward(input)));
        }

        if !loss.is_finite() || loss > cfg.divergence_loss {
            history.diverged_at = Some(step);
            net.diverged = true;
            break;
        }
        if cfg.stop_when_halved && loss <= 0.5 * baseline {
            break;
        }
    }
    history
}

/// Gather dataset columns into `(n0 x B, nL x B)` matrices.
fn pack_batch(data: &[Sample], indices: &[usize]) -> (Matrix, Matrix) {
    let b = indices.len();
    let n0 = data[0].x.dim();
    let nl = data[0].y.dim();
    let mut x = Matrix::zeros(n0, b);
    let mut y = Matrix::zeros(nl, b);
    for (col, &idx) in indices.iter().enumerate() {
        for row in 0..n0 {
            x[(row, col)] = data[idx].x[row];
        }
        for row in 0..nl {
            y[(row, col)] = data[idx].y[row];
        }
    }
    (x, y)
}

struct BatchTrace {
    /// `h_0..h_L`, each `dim x B`.
    h: Vec<Matrix>,
    /// Hidden-layer preactivations for relu (empty for linear).
    a: Vec<Matrix>,
}

fn forward_batch(net: &Network, x: &Matrix) -> BatchTrace {
    let spec = &net.spec;
    let mut h: Vec<Matrix> = Vec::with_capacity(spec.depth + 1);
    let mut a_list = Vec::new();
    h.push(x.clone());
    for l in 1..=spec.depth {
        let mut a = crate::numkit::matmat(&net.weights[l - 1], &h[l - 1]);
        a.scale(net.scales.g[l - 1]);
        if spec.activation == Activation::Relu && l < spec.depth {
            let mut post = a.clone();
            for v in post.data_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            a_list.push(a);
            h.push(post);
        } else {
            h.push(a);
        }
    }
    BatchTrace { h, a: a_list }
}

/// Batch loss (averaged) of the rescaled model `h_L / divisor`, plus
/// per-sample outputs when requested by the caller.
fn eval_loss(net: &Network, x: &Matrix, y: &Matrix, cfg: &TrainConfig) -> (f64, Vec<Vector>) {
    let trace = forward_batch(net, x);
    let out = trace.h.last().expect("batch trace holds h_0..h_L");
    let b = x.cols();
    let inv_div = 1.0 / cfg.output_divisor;
    let mut loss = 0.0;
    let mut outputs = Vec::new();
    if cfg.record_outputs {
        outputs = (0..b)
            .map(|col| {
                Vector::from(
                    (0..out.rows())
                        .map(|row| out[(row, col)] * inv_div)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
    }
    for col in 0..b {
        for row in 0..out.rows() {
            let diff = out[(row, col)] * inv_div - y[(row, col)];
            loss += diff * diff;
        }
    }
    (0.5 * loss / b as f64, outputs)
}

/// Accumulate weight gradients of the batch-averaged loss into `grads`.
fn batch_gradients(net: &Network, x: &Matrix, y: &Matrix, cfg: &TrainConfig, grads: &mut [Matrix]) {
    let spec = &net.spec;
    let trace = forward_batch(net, x);
    let b = x.cols();
    let inv_div = 1.0 / cfg.output_divisor;

    // dL/da_L for the averaged loss on the rescaled model
    let out = trace.h.last().expect("batch trace holds h_0..h_L");
    let mut d = Matrix::zeros(spec.output_dim, b);
    let scale = inv_div / b as f64;
    for col in 0..b {
        for row in 0..spec.output_dim {
            d[(row, col)] = (out[(row, col)] * inv_div - y[(row, col)]) * scale;
        }
    }

    for l in (1..=spec.depth).rev() {
        grads[l - 1].fill(0.0);
        accumulate_outer_batch(&mut grads[l - 1], &d, &trace.h[l - 1], net.scales.g[l - 1]);
        if l > 1 {
            let mut prev = transpose_matmat(&net.weights[l - 1], &d);
            prev.scale(net.scales.g[l - 1]);
            if spec.activation == Activation::Relu {
                let a = &trace.a[l - 2];
                for (dv, &av) in prev.data_mut().iter_mut().zip(a.data()) {
                    if av <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            d = prev;
        }
    }
}
