//! CSV persistence. Records are written with 17 significant digits so the
//! round trip through text is lossless; a `#` hash line above the header
//! ties the file to its run manifest.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use richlab_core::{Gauge, MeasurementRecord, Quantity, ScalingFit};

pub const RECORD_HEADER: &str = "run_id,gauge,r,width,seed,step,quantity,layer,value,diverged";

pub fn write_records(
    path: &Path,
    run_id: &str,
    config_sha256: &str,
    records: &[MeasurementRecord],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# run_id={run_id} config_sha256={config_sha256}\n"
    ));
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for rec in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.16e},{}\n",
            rec.run_id,
            rec.gauge.name(),
            rec.r,
            rec.width,
            rec.seed,
            rec.step,
            rec.quantity.name(),
            rec.layer,
            rec.value,
            if rec.diverged { 1 } else { 0 },
        ));
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

/// Parse a records file back; `#` comment lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<MeasurementRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read records file {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| anyhow!("records file is empty"))?;
    if header != RECORD_HEADER {
        return Err(anyhow!("unexpected records header: {header}"));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(anyhow!("row {}: expected 10 columns", idx + 1));
        }
        records.push(MeasurementRecord {
            run_id: fields[0].to_string(),
            gauge: Gauge::parse(fields[1]).ok_or_else(|| anyhow!("row {}: bad gauge", idx + 1))?,
            r: fields[2].parse().context("bad r")?,
            width: fields[3].parse().context("bad width")?,
            seed: fields[4].parse().context("bad seed")?,
            step: fields[5].parse().context("bad step")?,
            quantity: Quantity::parse(fields[6])
                .ok_or_else(|| anyhow!("row {}: unknown quantity {}", idx + 1, fields[6]))?,
            layer: fields[7].parse().context("bad layer")?,
            value: fields[8].parse().context("bad value")?,
            diverged: fields[9] == "1",
        });
    }
    Ok(records)
}

pub struct ExponentRow {
    pub quantity: Quantity,
    pub layer: usize,
    pub r: f64,
    pub step: usize,
    pub fit: ScalingFit,
}

pub fn write_exponents(path: &Path, run_id: &str, rows: &[ExponentRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str("run_id,quantity,layer,r,step,slope,slope_stderr,intercept,n_points\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            run_id,
            row.quantity.name(),
            row.layer,
            row.r,
            row.step,
            row.fit.slope,
            row.fit.slope_stderr,
            row.fit.intercept,
            row.fit.n_points,
        ));
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}
