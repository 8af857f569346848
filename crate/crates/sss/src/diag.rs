//! Energy against log proposal probability.
//!
//! Exact samples lie on the line `log q = -beta E - log Z`. The distance of
//! a sample cloud from that line, and the least-squares line through it,
//! show how far the proposal is from equilibrium.

use std::fmt::Write as _;

use sss_core::montecarlo::estimate_logz;
use sss_core::IsingModel;

use crate::error::CliError;
use crate::output::SamplesFile;

/// Where the intercept of the reference line came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogZSource {
    Given,
    Exact,
    /// Importance-sampling estimate from the same samples.
    Estimate,
}

impl LogZSource {
    pub fn name(self) -> &'static str {
        match self {
            LogZSource::Given => "given",
            LogZSource::Exact => "exact",
            LogZSource::Estimate => "is-estimate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoltzmannFit {
    pub beta: f64,
    pub log_z: f64,
    pub source: LogZSource,
    /// Least-squares line; `None` with fewer than two distinct energies.
    pub fitted: Option<(f64, f64)>,
    pub residual_rms: f64,
    pub residual_sd: f64,
}

impl BoltzmannFit {
    pub fn slope(&self) -> f64 {
        -self.beta
    }

    pub fn intercept(&self) -> f64 {
        -self.log_z
    }
}

/// Ordinary least squares `y = a x + b`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Residuals `log q + beta E + log Z`. Both statistics are 0 for an empty
/// input; the standard deviation uses the `n` denominator.
pub fn fit(energies: &[f64], log_q: &[f64], beta: f64, log_z: f64, source: LogZSource) -> BoltzmannFit {
    let r: Vec<f64> = energies.iter().zip(log_q).map(|(e, q)| q + beta * e + log_z).collect();
    let n = r.len().max(1) as f64;
    let mean = r.iter().sum::<f64>() / n;
    let residual_rms = (r.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let residual_sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    BoltzmannFit {
        beta,
        log_z,
        source,
        fitted: least_squares(energies, log_q),
        residual_rms,
        residual_sd,
    }
}

/// `log Z` by the cheapest exact method: closed form for chains and
/// uncoupled models, enumeration otherwise (refused above 24 spins).
pub fn exact_logz(model: &IsingModel, beta: f64) -> Result<f64, CliError> {
    if model.chain_bonds().is_some() {
        return Ok(model.exact_logz_chain(beta)?);
    }
    Ok(model.enumerate(beta)?.log_z)
}

/// Fits a samples file against a reference line. Without `log_z` the
/// intercept is the importance-sampling estimate from the file itself.
pub fn diagnose(samples: &SamplesFile, log_z: Option<(f64, LogZSource)>) -> Result<BoltzmannFit, CliError> {
    let beta = samples.beta()?;
    let (log_z, source) = match log_z {
        Some(v) => v,
        None => {
            let est = estimate_logz(&samples.weighted()?)?;
            (est.log_z, LogZSource::Estimate)
        }
    };
    let energies: Vec<f64> = samples.rows.iter().map(|r| r.energy).collect();
    let log_q: Vec<f64> = samples.rows.iter().map(|r| r.log_q).collect();
    Ok(fit(&energies, &log_q, beta, log_z, source))
}

/// Scatter table: one `energy,log_q,line,residual` row per sample, the
/// line parameters in the header and the fit in a trailing summary.
pub fn format_scatter(samples: &SamplesFile, fit: &BoltzmannFit) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# format=sss-scatter beta={} slope={} intercept={} log_z={} log_z_source={}",
        fit.beta,
        fit.slope(),
        fit.intercept(),
        fit.log_z,
        fit.source.name()
    );
    if fit.source == LogZSource::Estimate {
        out.push_str("# note=intercept_from_importance_sampling_estimate_of_the_same_samples\n");
    }
    out.push_str("energy,log_q,line,residual\n");
    for r in &samples.rows {
        let line = -fit.beta * r.energy - fit.log_z;
        let _ = writeln!(out, "{},{},{},{}", r.energy, r.log_q, line, r.log_q - line);
    }
    out.push_str("# summary");
    match fit.fitted {
        Some((a, b)) => {
            let _ = write!(out, " fitted_slope={a} fitted_intercept={b}");
        }
        None => out.push_str(" fitted_slope=none fitted_intercept=none"),
    }
    let _ = writeln!(out, " residual_rms={} residual_sd={}", fit.residual_rms, fit.residual_sd);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_points_have_zero_residual() {
        let e = [-3.0, -1.0, 0.5, 2.0];
        let q: Vec<f64> = e.iter().map(|e| -1.6 * e - 4.0).collect();
        let f = fit(&e, &q, 1.6, 4.0, LogZSource::Given);
        assert!(f.residual_sd < 1e-12 && f.residual_rms < 1e-12);
        let (a, b) = f.fitted.unwrap();
        assert!((a + 1.6).abs() < 1e-12 && (b + 4.0).abs() < 1e-12);
    }

    #[test]
    fn offset_shows_in_rms_not_sd() {
        let e = [0.0, 1.0, 2.0];
        let q = [-1.0, -2.0, -3.0];
        let f = fit(&e, &q, 1.0, 0.0, LogZSource::Given);
        assert!((f.residual_rms - 1.0).abs() < 1e-12);
        assert!(f.residual_sd < 1e-12);
    }

    #[test]
    fn degenerate_energies_have_no_fitted_line() {
        assert_eq!(least_squares(&[1.0, 1.0], &[0.0, 2.0]), None);
        assert_eq!(least_squares(&[1.0], &[0.0]), None);
    }
}
