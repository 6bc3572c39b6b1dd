//! Width/richness sweep harness: runs experiment cells in parallel, collects
//! scalar measurement records, fits scaling exponents on per-width geometric
//! means, and classifies training stability.
//!
//! Every cell is a deterministic function of `(config, seed index)`: all
//! randomness fans out from the config's root seed through fixed streams
//! (0 = init draws, 1 = dataset, 2 = batch order), and the final record list
//! is sorted on a total key, so results are byte-identical regardless of the
//! parallel schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    backward, gaussian_dataset, init_network, loss_and_grad, step_delta, train, train_with_state,
    MomentumState, Network, OptimizerConfig, Sample, TrainConfig, TrainHistory,
};
use crate::numkit::{derive_seed, loglog_fit, FitError, RngState, ScalingFit};
use crate::parameterization::{layer_scales, Activation, Gauge, NetSpec, Richness, ScaleError};
use crate::probes::{
    alignment_from_weights, decompose_update, grad_change_fast, interpolation_coefficients,
    measure_criteria, ProbeError,
};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_BATCH: u64 = 2;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown quantity name: {0}")]
    UnknownQuantity(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Synthetic learning tasks: the depth-L MLP on Gaussian data, linear or
/// relu activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GaussianLinear,
    GaussianRelu,
}

impl Task {
    pub fn activation(&self) -> Activation {
        match self {
            Task::GaussianLinear => Activation::Linear,
            Task::GaussianRelu => Activation::Relu,
        }
    }
}

/// Measurable scalar quantities. Per-layer quantities carry the layer in the
/// record's `layer` field; network-level quantities use layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// `||h_l||` before the probe step (recorded at the pre-step index).
    RepNorm,
    /// `||delta h_l||` across the probe step.
    RepUpdateNorm,
    /// Order parameter `||delta h_l|| / ||h_l||`.
    RepUpdateRatio,
    /// `|<dL/dh_l, delta h_l>|`.
    Uuc,
    /// `||g_l dW_l h_{l-1}||`.
    LayerContribNorm,
    /// `||dL/dh_l||`.
    RepGradNorm,
    /// Signed projection of the layer term onto the total update.
    LayerRatio,
    /// Signed projection of the passthrough term onto the total update.
    PassthroughRatio,
    /// Signed projection of the interaction term onto the total update.
    InteractionRatio,
    /// `||h_L||` at step 0 (emitted when probing the first step).
    InitOutputNorm,
    /// `||grad f(theta_1) - grad f(theta_0)|| / ||grad f(theta_0)||`.
    GradChangeRel,
    /// Absolute gradient change (reported alongside the relative one).
    GradChangeAbs,
    /// `||c_1||` of the step-direction polynomial.
    GradientTerm,
    /// `2 ||c_2||` of the step-direction polynomial.
    CurvatureTerm,
    /// `curvature_term / gradient_term`.
    CurvatureRatio,
    /// `||(W_l + dW_l)^T v|| / ||W_l^T v||` with `v = dL/dh_l` after the step.
    AlignmentRatio,
    /// Evaluated loss (pre-step for probes, per-step for stability runs).
    Loss,
    /// 1 if the run diverged (stability runs).
    Diverged,
    /// First step at which the loss halved (stability runs).
    TimeToHalve,
}

impl Quantity {
    pub fn name(&self) -> &'static str {
        match self {
            Quantity::RepNorm => "rep_norm",
            Quantity::RepUpdateNorm => "rep_update_norm",
            Quantity::RepUpdateRatio => "rep_update_ratio",
            Quantity::Uuc => "uuc",
            Quantity::LayerContribNorm => "layer_contrib_norm",
            Quantity::RepGradNorm => "rep_grad_norm",
            Quantity::LayerRatio => "layer_ratio",
            Quantity::PassthroughRatio => "passthrough_ratio",
            Quantity::InteractionRatio => "interaction_ratio",
            Quantity::InitOutputNorm => "init_output_norm",
            Quantity::GradChangeRel => "grad_change_rel",
            Quantity::GradChangeAbs => "grad_change_abs",
            Quantity::GradientTerm => "gradient_term",
            Quantity::CurvatureTerm => "curvature_term",
            Quantity::CurvatureRatio => "curvature_ratio",
            Quantity::AlignmentRatio => "alignment_ratio",
            Quantity::Loss => "loss",
            Quantity::Diverged => "diverged",
            Quantity::TimeToHalve => "time_to_halve",
        }
    }

    pub fn parse(s: &str) -> Option<Quantity> {
        ALL_QUANTITIES.iter().copied().find(|q| q.name() == s)
    }

    /// Quantities defined per layer (the rest are network-level).
    pub fn per_layer(&self) -> bool {
        !matches!(
            self,
            Quantity::GradChangeRel
                | Quantity::GradChangeAbs
                | Quantity::GradientTerm
                | Quantity::CurvatureTerm
                | Quantity::CurvatureRatio
                | Quantity::Loss
                | Quantity::Diverged
                | Quantity::TimeToHalve
        )
    }

    /// The polynomial probe only exists for linear activation.
    pub fn requires_linear(&self) -> bool {
        matches!(
            self,
            Quantity::GradChangeRel
                | Quantity::GradChangeAbs
                | Quantity::GradientTerm
                | Quantity::CurvatureTerm
                | Quantity::CurvatureRatio
        )
    }
}

pub const ALL_QUANTITIES: [Quantity; 19] = [
    Quantity::RepNorm,
    Quantity::RepUpdateNorm,
    Quantity::RepUpdateRatio,
    Quantity::Uuc,
    Quantity::LayerContribNorm,
    Quantity::RepGradNorm,
    Quantity::LayerRatio,
    Quantity::PassthroughRatio,
    Quantity::InteractionRatio,
    Quantity::InitOutputNorm,
    Quantity::GradChangeRel,
    Quantity::GradChangeAbs,
    Quantity::GradientTerm,
    Quantity::CurvatureTerm,
    Quantity::CurvatureRatio,
    Quantity::AlignmentRatio,
    Quantity::Loss,
    Quantity::Diverged,
    Quantity::TimeToHalve,
];

/// One scalar observation from one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub run_id: String,
    pub gauge: Gauge,
    pub r: f64,
    pub width: usize,
    pub seed: usize,
    pub step: usize,
    pub quantity: Quantity,
    pub layer: usize,
    pub value: f64,
    pub diverged: bool,
}

fn sort_records(records: &mut [MeasurementRecord]) {
    // stable sort: records within one (cell, step, quantity, layer) keep
    // their deterministic per-sample emission order
    records.sort_by(|a, b| {
        a.r.total_cmp(&b.r)
            .then(a.width.cmp(&b.width))
            .then(a.seed.cmp(&b.seed))
            .then(a.step.cmp(&b.step))
            .then(a.quantity.name().cmp(b.quantity.name()))
            .then(a.layer.cmp(&b.layer))
    });
}

/// Configuration of a probe sweep over (richness, width, seed) cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub run_label: String,
    pub gauge: Gauge,
    pub richnesses: Vec<f64>,
    pub off_scale_allowed: bool,
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub samples_per_seed: usize,
    pub task: Task,
    pub depth: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub optimizer: OptimizerConfig,
    /// Step indices to probe; probing step `t` runs `t-1` background
    /// minibatch steps and then one single-sample probe step.
    pub probe_steps: Vec<usize>,
    pub quantities: Vec<Quantity>,
    pub root_seed: u64,
    /// Restrict fits to medium/large widths by dropping the smallest 25%.
    pub drop_small_widths: bool,
}

impl SweepConfig {
    pub fn validate(&self, require_fit_widths: bool) -> Result<(), SweepError> {
        let fail = |msg: String| Err(SweepError::InvalidConfig(msg));
        if self.widths.is_empty() {
            return fail("no widths given".into());
        }
        if !self.widths.windows(2).all(|w| w[0] < w[1]) {
            return fail("widths must be strictly increasing".into());
        }
        if require_fit_widths && self.widths.len() < 4 {
            return fail(format!(
                "need >= 4 widths for fits, got {}",
                self.widths.len()
            ));
        }
        if self.seeds == 0 || self.samples_per_seed == 0 {
            return fail("seeds and samples_per_seed must be >= 1".into());
        }
        if self.depth < 2 {
            return fail(format!("depth {} < 2", self.depth));
        }
        if self.input_dim < 1 || self.output_dim < 1 {
            return fail("dims must be >= 1".into());
        }
        if self.probe_steps.iter().any(|&t| t == 0) {
            return fail("probe steps are 1-based".into());
        }
        if self.optimizer.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.beta) {
            return fail(format!("momentum beta {} outside [0, 1)", self.optimizer.beta));
        }
        for &r in &self.richnesses {
            if !self.off_scale_allowed && !(0.0..=0.5).contains(&r) {
                return Err(SweepError::Scale(ScaleError::RichnessOutOfRange(r)));
            }
        }
        if self.task == Task::GaussianRelu {
            if let Some(q) = self.quantities.iter().find(|q| q.requires_linear()) {
                return fail(format!(
                    "quantity {} requires the linear task",
                    q.name()
                ));
            }
        }
        Ok(())
    }

    fn net_spec(&self, width: usize) -> Result<NetSpec, ScaleError> {
        NetSpec::new(
            self.depth,
            self.input_dim,
            width,
            self.output_dim,
            self.task.activation(),
        )
    }
}

/// Run every (richness, width, seed) cell and return the sorted records.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<MeasurementRecord>, SweepError> {
    cfg.validate(false)?;
    let mut cells = Vec::new();
    for &r in &cfg.richnesses {
        for &width in &cfg.widths {
            for seed in 0..cfg.seeds {
                cells.push((r, width, seed));
            }
        }
    }
    let results: Vec<Result<Vec<MeasurementRecord>, SweepError>> = cells
        .par_iter()
        .map(|&(r, width, seed)| run_probe_cell(cfg, r, width, seed))
        .collect();
    let mut records = Vec::new();
    for cell in results {
        records.extend(cell?);
    }
    sort_records(&mut records);
    Ok(records)
}

fn run_probe_cell(
    cfg: &SweepConfig,
    r: f64,
    width: usize,
    seed: usize,
) -> Result<Vec<MeasurementRecord>, SweepError> {
    let spec = cfg.net_spec(width)?;
    let richness = Richness::new(r, cfg.off_scale_allowed)?;
    let scales = layer_scales(cfg.gauge, &richness, &spec);
    let instance_seed = derive_seed(cfg.root_seed, seed as u64);
    let mut net = init_network(
        &spec,
        &scales,
        &mut RngState::new(instance_seed, STREAM_INIT),
    );
    let data = gaussian_dataset(
        &spec,
        cfg.samples_per_seed,
        &mut RngState::new(instance_seed, STREAM_DATA),
    );

    let mut records = Vec::new();
    let mut emit = |quantity: Quantity, layer: usize, step: usize, value: f64, diverged: bool| {
        records.push(MeasurementRecord {
            run_id: cfg.run_label.clone(),
            gauge: cfg.gauge,
            r,
            width,
            seed,
            step,
            quantity,
            layer,
            value,
            diverged,
        });
    };

    for &t in &cfg.probe_steps {
        for s in 0..cfg.samples_per_seed {
            net.reset_to_init();
            let mut state = MomentumState::new();
            if t > 1 {
                let mut train_cfg = TrainConfig::new(cfg.optimizer, t - 1);
                train_cfg.eval_subset = Some(1);
                let history = train_with_state(
                    &mut net,
                    &data,
                    &train_cfg,
                    &mut RngState::new(instance_seed, STREAM_BATCH),
                    &mut state,
                );
                if history.diverged_at.is_some() {
                    emit(Quantity::Diverged, 0, t, 1.0, true);
                    continue;
                }
            }
            probe_one_sample(cfg, &net, &data[s], t, &mut state, &mut emit)?;
        }
    }
    Ok(records)
}

/// One probe step on one sample, from the network's current state.
fn probe_one_sample(
    cfg: &SweepConfig,
    net: &Network,
    sample: &Sample,
    t: usize,
    state: &mut MomentumState,
    emit: &mut dyn FnMut(Quantity, usize, usize, f64, bool),
) -> Result<(), SweepError> {
    let depth = net.depth();
    let trace0 = net.forward(&sample.x);
    let (loss0, dl) = loss_and_grad(&sample.y, trace0.output());
    if trace0.diverged || !loss0.is_finite() {
        emit(Quantity::Diverged, 0, t, 1.0, true);
        return Ok(());
    }
    let bt = backward(net, &trace0, &dl);
    let delta = step_delta(net, &bt.weight_grads, &cfg.optimizer, state);
    let trace1 = net.forward_with_delta(&delta, 1.0, &sample.x);
    if trace1.diverged {
        emit(Quantity::Diverged, 0, t, 1.0, true);
        return Ok(());
    }
    let dec = decompose_update(net, &delta, &trace0, &trace1)?;
    let crit = measure_criteria(&bt, &dec, &trace0);

    let wants = |q: Quantity| cfg.quantities.contains(&q);
    for l in 1..=depth {
        let cl = &crit.layers[l - 1];
        let dl = &dec.layers[l - 1];
        if wants(Quantity::RepNorm) {
            emit(Quantity::RepNorm, l, t - 1, cl.rep_norm, false);
        }
        if wants(Quantity::RepUpdateNorm) {
            emit(Quantity::RepUpdateNorm, l, t, cl.rep_update_norm, false);
        }
        if wants(Quantity::RepUpdateRatio) && cl.rep_norm > 0.0 {
            emit(Quantity::RepUpdateRatio, l, t, cl.rep_update_norm / cl.rep_norm, false);
        }
        if wants(Quantity::Uuc) {
            emit(Quantity::Uuc, l, t, cl.uuc_value, false);
        }
        if wants(Quantity::LayerContribNorm) {
            emit(Quantity::LayerContribNorm, l, t, cl.layer_contrib_norm, false);
        }
        if wants(Quantity::RepGradNorm) {
            emit(Quantity::RepGradNorm, l, t, cl.rep_grad_norm, false);
        }
        if wants(Quantity::LayerRatio) {
            emit(Quantity::LayerRatio, l, t, dl.layer_ratio, false);
        }
        if wants(Quantity::PassthroughRatio) {
            emit(Quantity::PassthroughRatio, l, t, dl.passthrough_ratio, false);
        }
        if wants(Quantity::InteractionRatio) {
            emit(Quantity::InteractionRatio, l, t, dl.interaction_ratio, false);
        }
    }
    if wants(Quantity::InitOutputNorm) && t == 1 {
        emit(Quantity::InitOutputNorm, depth, 0, trace0.reps[depth].norm(), false);
    }
    if wants(Quantity::Loss) {
        emit(Quantity::Loss, 0, t - 1, loss0, false);
    }

    if wants(Quantity::GradChangeRel) || wants(Quantity::GradChangeAbs) {
        let (abs, rel, _) = grad_change_fast(net, &delta, &sample.x)?;
        if wants(Quantity::GradChangeRel) {
            emit(Quantity::GradChangeRel, 0, t, rel, false);
        }
        if wants(Quantity::GradChangeAbs) {
            emit(Quantity::GradChangeAbs, 0, t, abs, false);
        }
    }
    if wants(Quantity::GradientTerm) || wants(Quantity::CurvatureTerm) || wants(Quantity::CurvatureRatio)
    {
        let coeffs = interpolation_coefficients(net, &delta, &sample.x)?;
        let gradient = coeffs[1].norm();
        let curvature = 2.0 * coeffs[2].norm();
        if wants(Quantity::GradientTerm) {
            emit(Quantity::GradientTerm, 0, t, gradient, false);
        }
        if wants(Quantity::CurvatureTerm) {
            emit(Quantity::CurvatureTerm, 0, t, curvature, false);
        }
        if wants(Quantity::CurvatureRatio) && gradient > 0.0 {
            emit(Quantity::CurvatureRatio, 0, t, curvature / gradient, false);
        }
    }
    if wants(Quantity::AlignmentRatio) {
        let after_weights = net.weights_plus(&delta, 1.0);
        let (_, dl1) = loss_and_grad(&sample.y, trace1.output());
        let bt1 = crate::network::backward_with_weights(
            &net.spec,
            &net.scales,
            &after_weights,
            &trace1,
            &dl1,
        );
        let report = alignment_from_weights(&net.weights, &after_weights, &bt1);
        for (l, ratio) in report.ratios.iter().enumerate() {
            if let Some(v) = ratio {
                emit(Quantity::AlignmentRatio, l + 1, t, *v, false);
            }
        }
    }
    Ok(())
}

/// Fit the scaling exponent of one quantity at one richness: geometric mean
/// of |value| per width over all seeds/samples, then OLS in log-log space.
/// `step` restricts the fit when a sweep probed several step indices
/// (`None` pools all steps). With `drop_small_widths` the smallest 25% of
/// widths are excluded.
pub fn fit_exponents(
    records: &[MeasurementRecord],
    quantity: Quantity,
    layer: usize,
    r: f64,
    step: Option<usize>,
    drop_small_widths: bool,
) -> Result<ScalingFit, SweepError> {
    let mut by_width: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for rec in records {
        if rec.quantity == quantity
            && rec.layer == layer
            && rec.r.total_cmp(&r).is_eq()
            && step.is_none_or(|s| rec.step == s)
            && !rec.diverged
            && rec.value.is_finite()
        {
            let v = rec.value.abs();
            if v == 0.0 {
                return Err(SweepError::Fit(FitError::NonpositiveValue(0.0)));
            }
            let entry = by_width.entry(rec.width).or_insert((0.0, 0));
            entry.0 += v.ln();
            entry.1 += 1;
        }
    }
    if by_width.len() < 3 {
        return Err(SweepError::InsufficientData(format!(
            "{}.l{layer} at r={r}: {} distinct widths with finite values (need >= 3)",
            quantity.name(),
            by_width.len()
        )));
    }
    let mut means: Vec<(usize, f64)> = by_width
        .into_iter()
        .map(|(w, (sum, n))| (w, (sum / n as f64).exp()))
        .collect();
    if drop_small_widths {
        let drop = (means.len() as f64 * 0.25).ceil() as usize;
        let drop = drop.min(means.len() - 2);
        means.drain(..drop);
    }
    Ok(loglog_fit(&means)?)
}

/// Distinct `(quantity, layer, r, step)` combinations present in a record
/// set; the fit targets for a full exponent table.
pub fn fit_targets(records: &[MeasurementRecord]) -> Vec<(Quantity, usize, f64, usize)> {
    let mut targets: Vec<(Quantity, usize, f64, usize)> = Vec::new();
    for rec in records {
        if !targets.iter().any(|t| {
            t.0 == rec.quantity
                && t.1 == rec.layer
                && t.2.total_cmp(&rec.r).is_eq()
                && t.3 == rec.step
        }) {
            targets.push((rec.quantity, rec.layer, rec.r, rec.step));
        }
    }
    targets.sort_by(|a, b| {
        a.0.name()
            .cmp(b.0.name())
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    targets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityKind {
    Converging,
    Stalled,
    Diverging,
}

impl StabilityKind {
    pub fn name(&self) -> &'static str {
        match self {
            StabilityKind::Converging => "converging",
            StabilityKind::Stalled => "stalled",
            StabilityKind::Diverging => "diverging",
        }
    }
}

/// Outcome of one training run: diverging if the divergence flag was raised,
/// converging once the evaluated loss halves (with the step at which it
/// did), stalled otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict {
    pub kind: StabilityKind,
    pub time_to_halve: Option<usize>,
}

pub fn classify_stability(history: &TrainHistory) -> StabilityVerdict {
    assert!(!history.records.is_empty(), "history must be nonempty");
    if history.diverged_at.is_some() {
        return StabilityVerdict {
            kind: StabilityKind::Diverging,
            time_to_halve: None,
        };
    }
    let baseline = history.records[0].1;
    let halved = history
        .records
        .iter()
        .find(|&&(step, loss)| step > 0 && loss <= 0.5 * baseline);
    match halved {
        Some(&(step, _)) => StabilityVerdict {
            kind: StabilityKind::Converging,
            time_to_halve: Some(step),
        },
        None => StabilityVerdict {
            kind: StabilityKind::Stalled,
            time_to_halve: None,
        },
    }
}

/// Configuration of a stability map (multi-step training runs over the
/// richness/width grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub run_label: String,
    pub gauge: Gauge,
    pub richnesses: Vec<f64>,
    pub off_scale_allowed: bool,
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub dataset_size: usize,
    /// Loss is evaluated on this many dataset entries every step.
    pub eval_subset: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub task: Task,
    pub depth: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub root_seed: u64,
    /// Stop a run once its loss halves (the verdict is already settled).
    pub stop_when_halved: bool,
    /// Emit per-step loss records (off saves memory on large grids).
    pub record_loss_curves: bool,
}

/// Per-run stability outcome, alongside the emitted records.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityOutcome {
    pub gauge: Gauge,
    pub r: f64,
    pub width: usize,
    pub seed: usize,
    pub verdict: StabilityVerdict,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub init_output_norm: f64,
}

pub fn run_stability(
    cfg: &StabilityConfig,
) -> Result<(Vec<MeasurementRecord>, Vec<StabilityOutcome>), SweepError> {
    validate_stability(cfg)?;
    let mut cells = Vec::new();
    for &r in &cfg.richnesses {
        for &width in &cfg.widths {
            for seed in 0..cfg.seeds {
                cells.push((r, width, seed));
            }
        }
    }
    let results: Vec<Result<(Vec<MeasurementRecord>, StabilityOutcome), SweepError>> = cells
        .par_iter()
        .map(|&(r, width, seed)| run_stability_cell(cfg, r, width, seed))
        .collect();
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for res in results {
        let (recs, outcome) = res?;
        records.extend(recs);
        outcomes.push(outcome);
    }
    sort_records(&mut records);
    outcomes.sort_by(|a, b| {
        a.r.total_cmp(&b.r)
            .then(a.width.cmp(&b.width))
            .then(a.seed.cmp(&b.seed))
    });
    Ok((records, outcomes))
}

fn validate_stability(cfg: &StabilityConfig) -> Result<(), SweepError> {
    let fail = |msg: String| Err(SweepError::InvalidConfig(msg));
    if cfg.widths.is_empty() || !cfg.widths.windows(2).all(|w| w[0] < w[1]) {
        return fail("widths must be nonempty and strictly increasing".into());
    }
    if cfg.seeds == 0 || cfg.steps == 0 || cfg.dataset_size == 0 || cfg.eval_subset == 0 {
        return fail("seeds, steps, dataset_size, eval_subset must be >= 1".into());
    }
    if cfg.depth < 2 {
        return fail(format!("depth {} < 2", cfg.depth));
    }
    for &r in &cfg.richnesses {
        if !cfg.off_scale_allowed && !(0.0..=0.5).contains(&r) {
            return Err(SweepError::Scale(ScaleError::RichnessOutOfRange(r)));
        }
    }
    Ok(())
}

fn run_stability_cell(
    cfg: &StabilityConfig,
    r: f64,
    width: usize,
    seed: usize,
) -> Result<(Vec<MeasurementRecord>, StabilityOutcome), SweepError> {
    let spec = NetSpec::new(
        cfg.depth,
        cfg.input_dim,
        width,
        cfg.output_dim,
        cfg.task.activation(),
    )?;
    let richness = Richness::new(r, cfg.off_scale_allowed)?;
    let scales = layer_scales(cfg.gauge, &richness, &spec);
    let instance_seed = derive_seed(cfg.root_seed, seed as u64);
    let mut net = init_network(
        &spec,
        &scales,
        &mut RngState::new(instance_seed, STREAM_INIT),
    );
    let data = gaussian_dataset(
        &spec,
        cfg.dataset_size,
        &mut RngState::new(instance_seed, STREAM_DATA),
    );

    let eval_count = cfg.eval_subset.min(data.len());
    let init_output_norm = {
        let mut log_sum = 0.0;
        for sample in data.iter().take(eval_count) {
            let norm = net.forward(&sample.x).output().norm();
            log_sum += norm.max(f64::MIN_POSITIVE).ln();
        }
        (log_sum / eval_count as f64).exp()
    };

    let mut train_cfg = TrainConfig::new(cfg.optimizer, cfg.steps);
    train_cfg.eval_subset = Some(eval_count);
    train_cfg.stop_when_halved = cfg.stop_when_halved;
    let history = train(
        &mut net,
        &data,
        &train_cfg,
        &mut RngState::new(instance_seed, STREAM_BATCH),
    );
    let verdict = classify_stability(&history);

    let mut records = Vec::new();
    let mut emit = |quantity: Quantity, layer: usize, step: usize, value: f64, diverged: bool| {
        records.push(MeasurementRecord {
            run_id: cfg.run_label.clone(),
            gauge: cfg.gauge,
            r,
            width,
            seed,
            step,
            quantity,
            layer,
            value,
            diverged,
        });
    };
    emit(Quantity::InitOutputNorm, cfg.depth, 0, init_output_norm, false);
    if cfg.record_loss_curves {
        for &(step, loss) in &history.records {
            emit(Quantity::Loss, 0, step, loss, !loss.is_finite());
        }
    }
    let last_step = history.records.last().map(|&(s, _)| s).unwrap_or(0);
    emit(
        Quantity::Diverged,
        0,
        last_step,
        if verdict.kind == StabilityKind::Diverging { 1.0 } else { 0.0 },
        verdict.kind == StabilityKind::Diverging,
    );
    if let Some(t) = verdict.time_to_halve {
        emit(Quantity::TimeToHalve, 0, t, t as f64, false);
    }

    let (initial_loss, final_loss) = (
        history.records.first().map(|&(_, l)| l).unwrap_or(f64::NAN),
        history.records.last().map(|&(_, l)| l).unwrap_or(f64::NAN),
    );
    Ok((
        records,
        StabilityOutcome {
            gauge: cfg.gauge,
            r,
            width,
            seed,
            verdict,
            initial_loss,
            final_loss,
            init_output_norm,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> SweepConfig {
        SweepConfig {
            run_label: "test".into(),
            gauge: Gauge::MuP,
            richnesses: vec![0.5],
            off_scale_allowed: false,
            widths: vec![32, 64, 128, 256],
            seeds: 3,
            samples_per_seed: 4,
            task: Task::GaussianLinear,
            depth: 3,
            input_dim: 10,
            output_dim: 10,
            optimizer: OptimizerConfig {
                global_eta: 1.0,
                beta: 0.0,
                batch_size: 1,
            },
            probe_steps: vec![1],
            quantities: vec![Quantity::RepNorm, Quantity::RepUpdateNorm],
            root_seed: 7,
            drop_small_widths: false,
        }
    }

    #[test]
    fn empty_quantity_list_gives_empty_records() {
        let mut cfg = base_config();
        cfg.quantities.clear();
        let records = run_sweep(&cfg).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn rep_norm_tracks_sqrt_width() {
        // ||h_1|| ~ sqrt(width); per-sample values fluctuate with ||x||, so
        // compare the geometric mean over seeds and samples.
        let mut cfg = base_config();
        cfg.quantities = vec![Quantity::RepNorm];
        cfg.widths = vec![256];
        cfg.seeds = 8;
        cfg.samples_per_seed = 8;
        let records = run_sweep(&cfg).unwrap();
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.quantity == Quantity::RepNorm && r.layer == 1)
            .map(|r| r.value)
            .collect();
        assert!(!values.is_empty());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(
            (mean - 16.0).abs() < 1.6,
            "mean ||h_1|| = {mean}, expected ~sqrt(256)"
        );
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = base_config();
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_catches_bad_widths() {
        let mut cfg = base_config();
        cfg.widths = vec![64, 64];
        assert!(matches!(
            run_sweep(&cfg),
            Err(SweepError::InvalidConfig(_))
        ));
        let mut cfg = base_config();
        cfg.widths = vec![64];
        assert!(cfg.validate(true).is_err());
        assert!(cfg.validate(false).is_ok());
    }

    #[test]
    fn relu_task_rejects_polynomial_quantities() {
        let mut cfg = base_config();
        cfg.task = Task::GaussianRelu;
        cfg.quantities = vec![Quantity::CurvatureRatio];
        assert!(matches!(
            cfg.validate(false),
            Err(SweepError::InvalidConfig(_))
        ));
    }

    #[test]
    fn fit_recovers_synthetic_power_law() {
        let mut records = Vec::new();
        for &w in &[64usize, 128, 256, 512] {
            for seed in 0..5 {
                records.push(MeasurementRecord {
                    run_id: String::new(),
                    gauge: Gauge::MuP,
                    r: 0.25,
                    width: w,
                    seed,
                    step: 1,
                    quantity: Quantity::RepUpdateNorm,
                    layer: 2,
                    value: (w as f64).powf(0.5),
                    diverged: false,
                });
            }
        }
        let fit = fit_exponents(&records, Quantity::RepUpdateNorm, 2, 0.25, None, false).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-10);
    }

    #[test]
    fn fit_excludes_diverged_and_requires_three_widths() {
        let mut records = Vec::new();
        for &w in &[64usize, 128] {
            records.push(MeasurementRecord {
                run_id: String::new(),
                gauge: Gauge::MuP,
                r: 0.0,
                width: w,
                seed: 0,
                step: 1,
                quantity: Quantity::Uuc,
                layer: 1,
                value: 1.0,
                diverged: false,
            });
        }
        assert!(matches!(
            fit_exponents(&records, Quantity::Uuc, 1, 0.0, None, false),
            Err(SweepError::InsufficientData(_))
        ));
    }

    #[test]
    fn drop_small_widths_removes_a_quarter() {
        let mut records = Vec::new();
        // slope 0.5 on large widths, corrupted smallest width
        for &w in &[8usize, 64, 128, 256, 512, 1024] {
            let value = if w == 8 { 1e6 } else { (w as f64).sqrt() };
            records.push(MeasurementRecord {
                run_id: String::new(),
                gauge: Gauge::MuP,
                r: 0.0,
                width: w,
                seed: 0,
                step: 1,
                quantity: Quantity::RepNorm,
                layer: 1,
                value,
                diverged: false,
            });
        }
        let with_drop = fit_exponents(&records, Quantity::RepNorm, 1, 0.0, None, true).unwrap();
        assert!((with_drop.slope - 0.5).abs() < 1e-10, "slope {}", with_drop.slope);
        let without = fit_exponents(&records, Quantity::RepNorm, 1, 0.0, None, false).unwrap();
        assert!((without.slope - 0.5).abs() > 0.1);
    }

    #[test]
    fn classify_examples() {
        let history = TrainHistory {
            records: vec![(0, 1.0), (1, 0.4), (2, 0.2)],
            ..Default::default()
        };
        let verdict = classify_stability(&history);
        assert_eq!(verdict.kind, StabilityKind::Converging);
        assert_eq!(verdict.time_to_halve, Some(1));

        let diverged = TrainHistory {
            records: vec![(0, 1.0), (1, f64::INFINITY)],
            diverged_at: Some(1),
            ..Default::default()
        };
        assert_eq!(classify_stability(&diverged).kind, StabilityKind::Diverging);

        let stalled = TrainHistory {
            records: vec![(0, 1.0), (1, 0.995), (2, 0.99)],
            ..Default::default()
        };
        assert_eq!(classify_stability(&stalled).kind, StabilityKind::Stalled);
    }

    #[test]
    fn quantity_names_round_trip() {
        for q in ALL_QUANTITIES {
            assert_eq!(Quantity::parse(q.name()), Some(q));
        }
        assert_eq!(Quantity::parse("not_a_quantity"), None);
    }
}
