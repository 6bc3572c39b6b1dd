//! richlab: a numerical laboratory for the width-scaling behavior of wide
//! MLP parameterizations.
//!
//! The lab implements the one-parameter richness scale of wide-network
//! hyperparameters: per-layer learning rates, init scales, and gradient
//! multipliers chosen so that training stays stable and nontrivial as the
//! hidden width `n` grows, with a single exponent `r` (0 = lazy/kernel,
//! 1/2 = maximal feature learning) controlling how fast hidden
//! representations move, `||delta h|| ~ n^r`. Three equivalent gauges
//! realize each richness; single-step probes, width sweeps, and log-log
//! exponent fits verify the predicted scalings empirically, and stability
//! maps show what happens off the scale.
//!
//! Modules
//! - [`numkit`]: dense matrix/vector ops, seeded Gaussian draws, log-log fits
//! - [`parameterization`]: gauge tables, gauge transforms, rescaling emulation
//! - [`network`]: the MLP, SGD(+momentum) training, trace capture
//! - [`probes`]: update decomposition, criteria, linearization, alignment
//! - [`scaling`]: sweep harness, exponent fitting, stability classification

pub mod network;
pub mod numkit;
pub mod parameterization;
pub mod probes;
pub mod scaling;

pub use network::{
    backward, gaussian_dataset, init_network, loss_and_grad, sgd_step, step_delta, train,
    train_with_state, BackwardTrace, ForwardTrace, MomentumState, Network, OptimizerConfig,
    Sample, TrainConfig, TrainHistory,
};
pub use numkit::{loglog_fit, Matrix, RngState, ScalingFit, Vector};
pub use parameterization::{
    gauge_transform, layer_scales, rescaled_emulation, standard_scale_mismatch, width_power,
    Activation, Gauge, LayerScales, NetSpec, Richness, ScaleError,
};
pub use probes::{
    alignment_magnification, decompose_update, linearization_probe, measure_criteria,
    AlignmentReport, CriteriaReport, LinearizationReport, ProbeError, StepDecomposition,
};
pub use scaling::{
    classify_stability, fit_exponents, fit_targets, run_stability, run_sweep, MeasurementRecord,
    Quantity, StabilityConfig, StabilityKind, StabilityOutcome, StabilityVerdict, SweepConfig,
    SweepError, Task, ALL_QUANTITIES,
};
