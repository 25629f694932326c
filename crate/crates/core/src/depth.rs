//! Sensor depth from the proton NMR feature.
//!
//! A uniform proton half-space above a sensor at depth `d` produces a
//! fluctuating field with
//!
//! ```text
//! B_rms^2 = rho (mu0 hbar gamma_H / 4 pi)^2 (5 pi / 96) / d^3
//! ```
//!
//! precessing at the proton Larmor frequency. The reconstructed spectrum shows
//! it as a bump whose area over positive frequencies is `gamma_e^2 B_rms^2 / 2`
//! (half the two-sided variance).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bath::nmr_signal_amplitude;
use crate::decomposition::SpectrumEstimate;
use crate::error::{Error, Result};
use crate::nls::{nls_fit, NlsOptions, NlsProblem};
use crate::units::{GAMMA_ELECTRON_RAD_PER_US_T, GAMMA_PROTON_MHZ_PER_GAUSS};

/// Relative uncertainty assumed for the proton density.
pub const DENSITY_REL_UNCERTAINTY: f64 = 0.10;

/// Proton Larmor frequency in MHz for a field in gauss.
pub fn proton_larmor(field_gauss: f64) -> Result<f64> {
    if !(field_gauss >= 0.0 && field_gauss.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "field must be finite and >= 0, got {field_gauss}"
        )));
    }
    Ok(GAMMA_PROTON_MHZ_PER_GAUSS * field_gauss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmrFeature {
    pub center_mhz: f64,
    pub center_err_mhz: f64,
    /// RMS proton field, tesla.
    pub b_rms_t: f64,
    pub b_rms_err_t: f64,
    /// Gaussian standard deviation of the bump, MHz.
    pub width_mhz: f64,
    /// Bump amplitude over its 1-sigma error.
    pub significance: f64,
    pub reduced_chi2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmrOptions {
    /// Half-width of the search window relative to the Larmor frequency.
    pub window: f64,
    /// Minimum amplitude significance in sigma.
    pub min_significance: f64,
}

impl Default for NmrOptions {
    fn default() -> Self {
        Self {
            window: 0.15,
            min_significance: 2.0,
        }
    }
}

/// Fit `b0 + b1 (omega - omega_H) + a exp(-(omega - c)^2 / 2 w^2)` inside the
/// search window and convert the bump area into `B_rms`.
pub fn detect_nmr_feature(
    est: &SpectrumEstimate,
    field_gauss: f64,
    opts: &NmrOptions,
) -> Result<NmrFeature> {
    let larmor = 2.0 * PI * proton_larmor(field_gauss)?;
    let (lo, hi) = (larmor * (1.0 - opts.window), larmor * (1.0 + opts.window));
    let omegas = est.omegas();
    let (min, max) = match (omegas.first(), omegas.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::WindowUncovered("empty spectrum".into())),
    };
    // Allow half a grid step of slack at each edge.
    let step = omegas
        .windows(2)
        .filter(|w| w[0] >= lo && w[1] <= hi)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    if min > lo + 0.5 * step + 1e-9 * larmor || max < hi - 0.5 * step - 1e-9 * larmor {
        return Err(Error::WindowUncovered(format!(
            "spectrum covers [{:.4}, {:.4}] MHz, search window is [{:.4}, {:.4}] MHz",
            min / (2.0 * PI),
            max / (2.0 * PI),
            lo / (2.0 * PI),
            hi / (2.0 * PI)
        )));
    }
    let pts: Vec<_> = est
        .points
        .iter()
        .filter(|p| p.omega >= lo && p.omega <= hi)
        .collect();
    if pts.len() < 7 {
        return Err(Error::NmrNotFound(format!(
            "{} points inside the search window",
            pts.len()
        )));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.omega).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.s).collect();
    let sigma: Vec<f64> = pts.iter().map(|p| p.sigma).collect();
    let spacing = x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let span = hi - lo;

    let median = {
        let mut v = y.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let xpeak = x[y.iter().position(|&v| v == ymax).unwrap_or(0)];
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    let xs = x.clone();
    let problem = NlsProblem {
        names: vec![
            "baseline".into(),
            "slope".into(),
            "amplitude".into(),
            "center".into(),
            "width".into(),
        ],
        y: &y,
        sigma: &sigma,
        lower: vec![-10.0 * scale, -10.0 * scale / span, 0.0, lo, 0.25 * spacing],
        upper: vec![10.0 * scale, 10.0 * scale / span, 100.0 * scale, hi, 0.5 * span],
        model: move |p: &[f64]| {
            xs.iter()
                .map(|&o| {
                    let z = (o - p[3]) / p[4];
                    p[0] + p[1] * (o - larmor) + p[2] * (-0.5 * z * z).exp()
                })
                .collect::<Vec<_>>()
        },
    };
    let amp0 = (ymax - median).max(0.0);
    let mut starts = Vec::new();
    for c in [xpeak, larmor] {
        for w in [spacing, 2.0 * spacing, 0.05 * span] {
            starts.push(vec![median, 0.0, amp0, c, w.max(0.25 * spacing)]);
        }
    }
    let opts_nls = NlsOptions {
        cond_limit: f64::INFINITY,
        ..Default::default()
    };
    let r = nls_fit(&problem, &starts, &opts_nls).map_err(|e| Error::NmrNotFound(e.to_string()))?;
    let (amp, amp_err) = (r.params[2], r.errors[2]);
    let significance = if amp_err > 0.0 { amp / amp_err } else { 0.0 };
    if !(amp > 0.0 && significance >= opts.min_significance) {
        return Err(Error::NmrNotFound(format!(
            "bump amplitude {amp:.3e} at {significance:.2} sigma"
        )));
    }
    let width = r.params[4];
    let area = amp * width * (2.0 * PI).sqrt();
    let cov = &r.covariance;
    // d area / d(amp, width)
    let (ga, gw) = (width * (2.0 * PI).sqrt(), amp * (2.0 * PI).sqrt());
    let area_var = ga * ga * cov[2][2] + 2.0 * ga * gw * cov[2][4] + gw * gw * cov[4][4];
    let b_rms = (2.0 * area).sqrt() / GAMMA_ELECTRON_RAD_PER_US_T;
    let b_rms_err = 0.5 * b_rms * area_var.max(0.0).sqrt() / area;
    Ok(NmrFeature {
        center_mhz: r.params[3] / (2.0 * PI),
        center_err_mhz: r.errors[3] / (2.0 * PI),
        b_rms_t: b_rms,
        b_rms_err_t: b_rms_err,
        width_mhz: width / (2.0 * PI),
        significance,
        reduced_chi2: r.reduced_chi2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEstimate {
    pub depth_nm: f64,
    pub depth_err_nm: f64,
    pub proton_density_m3: f64,
}

/// Invert the half-space formula; `d ~ B_rms^(-2/3) rho^(1/3)`.
pub fn depth_from_brms(feature: &NmrFeature, proton_density: f64) -> Result<DepthEstimate> {
    if !(feature.b_rms_t > 0.0) {
        return Err(Error::InvalidParameter("B_rms must be > 0".into()));
    }
    if !(proton_density > 0.0) {
        return Err(Error::InvalidParameter("proton density must be > 0".into()));
    }
    // B_rms at 1 nm fixes the constant.
    let b1 = nmr_signal_amplitude(1.0, proton_density)?;
    let depth = (b1 / feature.b_rms_t).powf(2.0 / 3.0);
    let rel_b = feature.b_rms_err_t / feature.b_rms_t;
    let rel = ((2.0 / 3.0 * rel_b).powi(2) + (DENSITY_REL_UNCERTAINTY / 3.0).powi(2)).sqrt();
    Ok(DepthEstimate {
        depth_nm: depth,
        depth_err_nm: depth * rel,
        proton_density_m3: proton_density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::SpectrumPoint;
    use approx::assert_relative_eq;

    fn feature(b: f64) -> NmrFeature {
        NmrFeature {
            center_mhz: 1.933,
            center_err_mhz: 0.0,
            b_rms_t: b,
            b_rms_err_t: 0.0,
            width_mhz: 0.02,
            significance: 10.0,
            reduced_chi2: 1.0,
        }
    }

    #[test]
    fn larmor_values() {
        assert_eq!(proton_larmor(0.0).unwrap(), 0.0);
        assert!((proton_larmor(454.0).unwrap() - 1.9330).abs() < 1e-4);
        assert!((proton_larmor(1000.0).unwrap() - 4.2577).abs() < 1e-4);
    }

    #[test]
    fn inverse_of_forward() {
        let b = nmr_signal_amplitude(3.0, 6e28).unwrap();
        let d = depth_from_brms(&feature(b), 6e28).unwrap();
        assert_relative_eq!(d.depth_nm, 3.0, max_relative = 1e-6);
        let b8 = (b * b / 8.0).sqrt();
        let d8 = depth_from_brms(&feature(b8), 6e28).unwrap();
        assert_relative_eq!(d8.depth_nm, 6.0, max_relative = 1e-9);
    }

    #[test]
    fn flat_spectrum_has_no_feature() {
        let larmor = 2.0 * PI * 1.933;
        let est = SpectrumEstimate {
            points: (0..41)
                .map(|i| SpectrumPoint {
                    omega: larmor * (0.8 + 0.01 * i as f64),
                    s: 0.01 * if i % 2 == 0 { 1.0 } else { 0.99 },
                    sigma: 0.001,
                    provenance: vec![],
                })
                .collect(),
        };
        assert_eq!(
            detect_nmr_feature(&est, 454.0, &Default::default())
                .unwrap_err()
                .tag(),
            "nmr-not-found"
        );
        let narrow = SpectrumEstimate {
            points: est.points[10..30].to_vec(),
        };
        assert_eq!(
            detect_nmr_feature(&narrow, 454.0, &Default::default())
                .unwrap_err()
                .tag(),
            "window-uncovered"
        );
    }
}
