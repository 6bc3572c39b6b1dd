//! Flat TOML experiment configs. One schema serves both sweeps and
//! stability maps; every key has a default, unknown keys are rejected.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use richlab_core::{
    Gauge, OptimizerConfig, Quantity, StabilityConfig, SweepConfig, Task,
};

/// On-disk schema. Keys mirror the sweep/stability config fields; optimizer
/// settings are flattened to `global_eta`, `momentum`, `batch_size`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub gauge: Option<String>,
    pub richnesses: Option<Vec<f64>>,
    pub off_scale_allowed: Option<bool>,
    pub widths: Option<Vec<usize>>,
    pub seeds: Option<usize>,
    pub samples_per_seed: Option<usize>,
    pub task: Option<String>,
    pub depth: Option<usize>,
    pub input_dim: Option<usize>,
    pub output_dim: Option<usize>,
    pub global_eta: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub probe_steps: Option<Vec<usize>>,
    pub quantities: Option<Vec<String>>,
    pub root_seed: Option<u64>,
    pub drop_small_widths: Option<bool>,
    // stability-only keys
    pub steps: Option<usize>,
    pub dataset_size: Option<usize>,
    pub eval_subset: Option<usize>,
    pub stop_when_halved: Option<bool>,
    pub record_loss_curves: Option<bool>,
}

/// Raw bytes plus parsed config; the hash is over the raw bytes.
pub struct LoadedConfig {
    pub file: FileConfig,
    pub sha256: String,
    pub run_id: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let file: FileConfig = toml::from_str(
        std::str::from_utf8(&bytes).context("config file is not valid UTF-8")?,
    )
    .with_context(|| format!("cannot parse config file {}", path.display()))?;
    let sha256 = hex_digest(&bytes);
    let run_id = sha256[..12].to_string();
    Ok(LoadedConfig {
        file,
        sha256,
        run_id,
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_gauge(s: &str) -> Result<Gauge> {
    Gauge::parse(s).ok_or_else(|| {
        anyhow!("unknown gauge {s:?}: expected one of mup, rescaling, stp, standard")
    })
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "gaussian_linear" => Ok(Task::GaussianLinear),
        "gaussian_relu" => Ok(Task::GaussianRelu),
        other => Err(anyhow!(
            "unknown task {other:?}: expected gaussian_linear or gaussian_relu"
        )),
    }
}

pub fn parse_quantity(s: &str) -> Result<Quantity> {
    Quantity::parse(s).ok_or_else(|| anyhow!("unknown quantity name: {s}"))
}

/// Default quantity set for probe sweeps (everything the linear task can
/// measure at step 1).
fn default_quantities() -> Vec<Quantity> {
    vec![
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
    ]
}

impl FileConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            global_eta: self.global_eta.unwrap_or(1.0),
            beta: self.momentum.unwrap_or(0.0),
            batch_size: self.batch_size.unwrap_or(1),
        }
    }

    pub fn to_sweep_config(&self, run_id: &str) -> Result<SweepConfig> {
        let quantities = match &self.quantities {
            Some(names) => names
                .iter()
                .map(|s| parse_quantity(s))
                .collect::<Result<Vec<_>>>()?,
            None => default_quantities(),
        };
        Ok(SweepConfig {
            run_label: run_id.to_string(),
            gauge: parse_gauge(self.gauge.as_deref().unwrap_or("mup"))?,
            richnesses: self.richnesses.clone().unwrap_or(vec![0.0, 0.25, 0.5]),
            off_scale_allowed: self.off_scale_allowed.unwrap_or(false),
            widths: self
                .widths
                .clone()
                .unwrap_or(vec![64, 128, 256, 512, 1024, 2048]),
            seeds: self.seeds.unwrap_or(20),
            samples_per_seed: self.samples_per_seed.unwrap_or(50),
            task: parse_task(self.task.as_deref().unwrap_or("gaussian_linear"))?,
            depth: self.depth.unwrap_or(3),
            input_dim: self.input_dim.unwrap_or(10),
            output_dim: self.output_dim.unwrap_or(10),
            optimizer: self.optimizer(),
            probe_steps: self.probe_steps.clone().unwrap_or(vec![1]),
            quantities,
            root_seed: self.root_seed.unwrap_or(17),
            drop_small_widths: self.drop_small_widths.unwrap_or(true),
        })
    }

    pub fn to_stability_config(&self, run_id: &str) -> Result<StabilityConfig> {
        Ok(StabilityConfig {
            run_label: run_id.to_string(),
            gauge: parse_gauge(self.gauge.as_deref().unwrap_or("mup"))?,
            richnesses: self.richnesses.clone().unwrap_or(vec![0.0, 0.25, 0.5]),
            off_scale_allowed: self.off_scale_allowed.unwrap_or(true),
            widths: self
                .widths
                .clone()
                .unwrap_or(vec![64, 256, 1024, 2048]),
            seeds: self.seeds.unwrap_or(20),
            dataset_size: self.dataset_size.unwrap_or(64),
            eval_subset: self.eval_subset.unwrap_or(16),
            steps: self.steps.unwrap_or(50),
            optimizer: OptimizerConfig {
                global_eta: self.global_eta.unwrap_or(0.1),
                beta: self.momentum.unwrap_or(0.9),
                batch_size: self.batch_size.unwrap_or(8),
            },
            task: parse_task(self.task.as_deref().unwrap_or("gaussian_linear"))?,
            depth: self.depth.unwrap_or(3),
            input_dim: self.input_dim.unwrap_or(10),
            output_dim: self.output_dim.unwrap_or(10),
            root_seed: self.root_seed.unwrap_or(17),
            stop_when_halved: self.stop_when_halved.unwrap_or(true),
            record_loss_curves: self.record_loss_curves.unwrap_or(true),
        })
    }
}
