//! Log-log power-law regression: the measurement primitive behind every
//! scaling-exponent estimate in the lab.

use thiserror::Error;

/// A fitted log-log slope with its ordinary-least-squares standard error.
/// Logs are natural; the slope is base-invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    /// The measured scaling exponent.
    pub slope: f64,
    /// Intercept in natural-log space.
    pub intercept: f64,
    /// Standard regression error of the slope (0 when the fit is exact or
    /// has no residual degrees of freedom).
    pub slope_stderr: f64,
    pub n_points: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("insufficient points: need at least 2 distinct widths")]
    InsufficientPoints,
    #[error("nonpositive value {0} cannot be log-scaled")]
    NonpositiveValue(f64),
}

/// Ordinary least squares on `(ln width, ln value)`.
pub fn loglog_fit(points: &[(usize, f64)]) -> Result<ScalingFit, FitError> {
    for &(_, v) in points {
        if !(v > 0.0) {
            return Err(FitError::NonpositiveValue(v));
        }
    }
    let mut widths: Vec<usize> = points.iter().map(|&(w, _)| w).collect();
    widths.sort_unstable();
    widths.dedup();
    if widths.len() < 2 {
        return Err(FitError::InsufficientPoints);
    }

    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(w, _)| (w as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;

    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;

    let mut ssr = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let resid = y - (intercept + slope * x);
        ssr += resid * resid;
    }
    let slope_stderr = if points.len() > 2 {
        (ssr.max(0.0) / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };

    Ok(ScalingFit {
        slope,
        intercept,
        slope_stderr,
        n_points: points.len(),
    })
}
