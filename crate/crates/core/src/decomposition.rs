//! Inverse pipeline: stretched-exponential decay fits, `T2(N)` scaling,
//! spectral decomposition of coherence into `S(omega)` samples, T1 fits and
//! saturation diagnostics.
//!
//! Reconstruction keeps only the first passband of each filter:
//! `chi ~ (8t/pi) S(pi N / t)`, hence
//!
//! ```text
//! S(omega_0) = -(pi / 8t) ln(C / A_N),   sigma_S = (pi / 8t) sigma_C / C.
//! ```
//!
//! The odd harmonics `k omega_0` add `(8t / pi k^2) S(k omega_0)`; for a flat
//! spectrum this inflates the estimate by `pi^2/8`. The harmonic-corrected
//! mode subtracts them using a model of the spectrum. The filter-corrected
//! mode goes further and removes everything outside the first passband,
//! `(pi/8t) chi_model - S_model(omega_0)`, which also covers the finite width
//! of the passband and the low-frequency leakage of short sequences.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::{CoherenceCurve, T1Curve};
use crate::error::{Error, Result};
use crate::filter::{chi_exact_with, ChiOptions};
use crate::nls::{lattice, nls_fit, NlsOptions, NlsProblem};
use crate::noise_model::NoiseSpectrumModel;
use crate::units::{psd_from_mhz, psd_to_mhz};

pub const P_BOUNDS: (f64, f64) = (0.5, 3.5);
pub const AMPLITUDE_BOUNDS: (f64, f64) = (0.8, 1.05);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub n_pulses: u32,
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub t2_us: f64,
    pub t2_err_us: f64,
    pub p: f64,
    pub p_err: f64,
    /// Row-major over (A, T2, p).
    pub covariance: Vec<Vec<f64>>,
    pub reduced_chi2: f64,
    pub dof: usize,
    pub at_bound: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayBounds {
    pub amplitude: (f64, f64),
    pub p: (f64, f64),
}

impl Default for DecayBounds {
    fn default() -> Self {
        Self {
            amplitude: AMPLITUDE_BOUNDS,
            p: P_BOUNDS,
        }
    }
}

/// `C(t) = A exp(-(t/T2)^p)`, weighted by the per-point sigma.
pub fn fit_decay(curve: &CoherenceCurve) -> Result<DecayFit> {
    fit_decay_with(curve, &DecayBounds::default())
}

pub fn fit_decay_with(curve: &CoherenceCurve, bounds: &DecayBounds) -> Result<DecayFit> {
    if !(bounds.amplitude.0 < bounds.amplitude.1 && bounds.p.0 > 0.0 && bounds.p.0 < bounds.p.1) {
        return Err(Error::InvalidParameter(format!("bad decay bounds {bounds:?}")));
    }
    curve.validate()?;
    let t = &curve.times_us;
    let c = &curve.coherence;
    let t_max = t[t.len() - 1];

    // Undecayed: every point within noise of full coherence.
    if c.iter()
        .zip(&curve.sigma)
        .all(|(ci, si)| *ci > 1.0 - (3.0 * si).max(0.02))
    {
        let eps = curve
            .sigma
            .iter()
            .map(|s| (3.0 * s).max(0.02))
            .fold(0.0, f64::max);
        // Sharpest allowed decay gives the most conservative bound.
        let bound = t_max / (-(1.0 - eps).ln()).powf(1.0 / bounds.p.1);
        return Err(Error::Undecayed {
            t2_lower_bound: bound,
        });
    }

    // T2 guess: first 1/e crossing, else extrapolated from the last point.
    let guess = t
        .iter()
        .zip(c)
        .find(|(_, ci)| **ci < (-1f64).exp())
        .map(|(ti, _)| *ti)
        .unwrap_or_else(|| {
            let last = c[c.len() - 1].clamp(0.05, 0.99);
            t_max / (-last.ln()).sqrt()
        });
    let starts = lattice(&[
        vec![1.0f64.clamp(bounds.amplitude.0, bounds.amplitude.1)],
        vec![0.5 * guess, guess, 2.0 * guess],
        [1.0, 2.0, 3.0].map(|p: f64| p.clamp(bounds.p.0, bounds.p.1)).to_vec(),
    ]);
    let times = t.clone();
    let problem = NlsProblem {
        names: vec!["amplitude".into(), "t2".into(), "p".into()],
        y: c,
        sigma: &curve.sigma,
        lower: vec![bounds.amplitude.0, t[0] * 1e-2, bounds.p.0],
        upper: vec![bounds.amplitude.1, t_max * 1e3, bounds.p.1],
        model: move |p: &[f64]| {
            times
                .iter()
                .map(|ti| p[0] * (-(ti / p[1]).powf(p[2])).exp())
                .collect::<Vec<_>>()
        },
    };
    let r = nls_fit(&problem, &starts, &NlsOptions::default())
        .map_err(|e| Error::DecayFitFailed(e.to_string()))?;
    if !r.converged {
        return Err(Error::DecayFitFailed(format!(
            "{} N={}: no convergence after multi-start",
            curve.sequence, curve.n_pulses
        )));
    }
    Ok(DecayFit {
        n_pulses: curve.n_pulses,
        amplitude: r.params[0],
        amplitude_err: r.errors[0],
        t2_us: r.params[1],
        t2_err_us: r.errors[1],
        p: r.params[2],
        p_err: r.errors[2],
        covariance: r.covariance,
        reduced_chi2: r.reduced_chi2,
        dof: r.dof,
        at_bound: r.at_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub t2_1_us: f64,
    pub t2_1_err_us: f64,
    pub k: f64,
    pub k_err: f64,
    /// `None` when the fit prefers no saturation (T2sat infinite).
    pub t2_sat_us: Option<f64>,
    pub t2_sat_err_us: Option<f64>,
    /// `T2(1) / T2sat`, in [0, 1].
    pub rho: f64,
    pub rho_err: f64,
    pub covariance: Vec<Vec<f64>>,
    pub reduced_chi2: f64,
    pub dof: usize,
}

impl ScalingFit {
    /// Model coherence time for `n` pulses.
    pub fn t2_at(&self, n: f64) -> f64 {
        1.0 / (1.0 / (self.t2_1_us * n.powf(self.k)) + self.rho / self.t2_1_us)
    }

    /// One-sigma lower bound on T2sat (meaningful when it is infinite).
    pub fn t2_sat_lower_bound_us(&self) -> f64 {
        self.t2_1_us / (self.rho + self.rho_err).max(f64::MIN_POSITIVE)
    }
}

/// Fit `1/T2(N) = 1/(T2(1) N^k) + 1/T2sat` in log space, with
/// `rho = T2(1)/T2sat` in [0, 1] so that `T2sat >= T2(1)`.
pub fn extract_scaling(fits: &[(u32, DecayFit)]) -> Result<ScalingFit> {
    let mut ns: Vec<u32> = fits.iter().map(|(n, _)| *n).filter(|&n| n > 0).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 || ns[0] != 1 {
        return Err(Error::ScalingUnderdetermined(format!(
            "need >= 4 distinct pulse counts including N = 1, got {ns:?}"
        )));
    }
    let pts: Vec<(f64, f64, f64)> = fits
        .iter()
        .filter(|(n, _)| *n > 0)
        .map(|(n, f)| {
            let rel = (f.t2_err_us / f.t2_us).max(1e-4);
            (*n as f64, f.t2_us.ln(), rel)
        })
        .collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let sigma: Vec<f64> = pts.iter().map(|p| p.2).collect();
    let n_vals: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let t2_1 = pts
        .iter()
        .filter(|p| p.0 == 1.0)
        .map(|p| p.1.exp())
        .next()
        .unwrap_or(1.0);
    let t_min = y.iter().cloned().fold(f64::INFINITY, f64::min).exp();
    let t_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
    let starts = lattice(&[
        vec![t2_1],
        vec![0.3, 0.6, 0.9],
        vec![0.0, 0.05, 0.3],
    ]);
    let problem = NlsProblem {
        names: vec!["t2_1".into(), "k".into(), "rho".into()],
        y: &y,
        sigma: &sigma,
        lower: vec![t_min * 0.01, 0.0, 0.0],
        upper: vec![t_max * 100.0, 1.0, 1.0],
        model: move |p: &[f64]| {
            n_vals
                .iter()
                .map(|n| -((1.0 / n.powf(p[1]) + p[2]) / p[0]).ln())
                .collect::<Vec<_>>()
        },
    };
    let r = nls_fit(&problem, &starts, &NlsOptions::default())
        .map_err(|e| Error::ScalingUnderdetermined(e.to_string()))?;
    let (t21, k, rho) = (r.params[0], r.params[1], r.params[2]);
    let (e_t, e_rho) = (r.errors[0], r.errors[2]);
    let cov_tr = r.covariance[0][2];
    let no_saturation = rho <= 1e-9 || (rho < 0.5 && r.at_bound.iter().any(|b| b == "rho"));
    let (t2_sat, t2_sat_err) = if !no_saturation {
        let sat = t21 / rho;
        let rel2 = (e_t / t21).powi(2) + (e_rho / rho).powi(2) - 2.0 * cov_tr / (t21 * rho);
        (Some(sat), Some(sat * rel2.max(0.0).sqrt()))
    } else {
        (None, None)
    };
    Ok(ScalingFit {
        t2_1_us: t21,
        t2_1_err_us: e_t,
        k,
        k_err: r.errors[1],
        t2_sat_us: t2_sat,
        t2_sat_err_us: t2_sat_err,
        rho,
        rho_err: e_rho,
        covariance: r.covariance,
        reduced_chi2: r.reduced_chi2,
        dof: r.dof,
    })
}

/// A measurement that contributed to a spectrum point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub n_pulses: u32,
    pub t_us: f64,
}

/// One spectral sample; serialised in MHz (`S` as `psd / 2 pi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PointRecord", from = "PointRecord")]
pub struct SpectrumPoint {
    /// rad/us
    pub omega: f64,
    /// rad^2/us
    pub s: f64,
    pub sigma: f64,
    pub provenance: Vec<Probe>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PointRecord {
    frequency_mhz: f64,
    psd_mhz: f64,
    sigma_mhz: f64,
    provenance: Vec<Probe>,
}

impl From<SpectrumPoint> for PointRecord {
    fn from(p: SpectrumPoint) -> Self {
        Self {
            frequency_mhz: p.omega / (2.0 * PI),
            psd_mhz: psd_to_mhz(p.s),
            sigma_mhz: psd_to_mhz(p.sigma),
            provenance: p.provenance,
        }
    }
}

impl From<PointRecord> for SpectrumPoint {
    fn from(r: PointRecord) -> Self {
        Self {
            omega: r.frequency_mhz * 2.0 * PI,
            s: psd_from_mhz(r.psd_mhz),
            sigma: psd_from_mhz(r.sigma_mhz),
            provenance: r.provenance,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub points: Vec<SpectrumPoint>,
}

impl SpectrumEstimate {
    pub fn omegas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.omega).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.s).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma).collect()
    }

    /// Points outside `[lo, hi]` (rad/us).
    pub fn excluding(&self, lo: f64, hi: f64) -> SpectrumEstimate {
        SpectrumEstimate {
            points: self
                .points
                .iter()
                .filter(|p| p.omega < lo || p.omega > hi)
                .cloned()
                .collect(),
        }
    }
}

/// Correction applied to first-passband estimates using a model iterate.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Correction {
    #[default]
    None,
    /// Subtract odd harmonics `3..=max_harmonic`.
    Harmonics(NoiseSpectrumModel),
    /// Subtract the model's full out-of-passband contribution.
    Filter(NoiseSpectrumModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructOptions {
    pub c_min: f64,
    pub c_max: f64,
    /// Minimum number of distinct pulse counts.
    pub min_pulse_counts: usize,
    pub correction: Correction,
    /// Highest harmonic subtracted.
    pub max_harmonic: u32,
    /// Merge points whose frequencies agree to this relative tolerance.
    pub merge_rel_tol: f64,
    /// Quadrature settings for the filter correction.
    pub chi: ChiOptions,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            c_min: 0.05,
            c_max: 0.95,
            min_pulse_counts: 4,
            correction: Correction::None,
            max_harmonic: 199,
            merge_rel_tol: 1e-9,
            chi: ChiOptions::default(),
        }
    }
}

/// A curve with the amplitude `A_N` used to normalise it.
#[derive(Debug, Clone, Copy)]
pub struct NormalizedCurve<'a> {
    pub curve: &'a CoherenceCurve,
    pub amplitude: f64,
}

/// Turn every usable `(N, t, C)` into a sample of `S(pi N / t)`.
pub fn reconstruct_spectrum(
    curves: &[NormalizedCurve<'_>],
    opts: &ReconstructOptions,
) -> Result<SpectrumEstimate> {
    let mut ns: Vec<u32> = curves
        .iter()
        .map(|c| c.curve.n_pulses)
        .filter(|&n| n > 0)
        .collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < opts.min_pulse_counts {
        return Err(Error::SpectrumUnderdetermined(format!(
            "need >= {} distinct pulse counts, got {}",
            opts.min_pulse_counts,
            ns.len()
        )));
    }
    let mut raw: Vec<SpectrumPoint> = Vec::new();
    for nc in curves {
        let n = nc.curve.n_pulses;
        if n == 0 {
            continue;
        }
        for ((&t, &c), &sc) in nc
            .curve
            .times_us
            .iter()
            .zip(&nc.curve.coherence)
            .zip(&nc.curve.sigma)
        {
            if !(c >= opts.c_min && c <= opts.c_max) {
                continue;
            }
            let omega = PI * n as f64 / t;
            let w = PI / (8.0 * t);
            let mut s = -w * (c / nc.amplitude).ln();
            match &opts.correction {
                Correction::None => {}
                Correction::Harmonics(model) => {
                    s -= (3..=opts.max_harmonic)
                        .step_by(2)
                        .map(|k| model.density(k as f64 * omega) / (k * k) as f64)
                        .sum::<f64>();
                }
                Correction::Filter(model) => {
                    let seq = nc.curve.pulse_sequence(t)?;
                    s -= w * chi_exact_with(model, &seq, &opts.chi)?.value - model.density(omega);
                }
            }
            raw.push(SpectrumPoint {
                omega,
                s,
                sigma: w * sc / c,
                provenance: vec![Probe { n_pulses: n, t_us: t }],
            });
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptySpectrum);
    }
    raw.sort_by(|a, b| {
        a.omega
            .total_cmp(&b.omega)
            .then_with(|| a.provenance[0].n_pulses.cmp(&b.provenance[0].n_pulses))
    });
    // Inverse-variance merge of coincident frequencies.
    let mut merged: Vec<SpectrumPoint> = Vec::with_capacity(raw.len());
    for p in raw {
        match merged.last_mut() {
            Some(last) if (p.omega - last.omega).abs() <= opts.merge_rel_tol * last.omega => {
                let (w1, w2) = (1.0 / last.sigma.powi(2), 1.0 / p.sigma.powi(2));
                last.s = (w1 * last.s + w2 * p.s) / (w1 + w2);
                last.sigma = (w1 + w2).sqrt().recip();
                last.provenance.extend(p.provenance);
            }
            _ => merged.push(p),
        }
    }
    Ok(SpectrumEstimate { points: merged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1Fit {
    pub t1_us: f64,
    pub t1_err_us: f64,
    pub p0: f64,
    pub p_inf: f64,
    pub reduced_chi2: f64,
}

/// `P(t) = P_inf + (P_0 - P_inf) exp(-t/T1)`.
pub fn fit_t1(curve: &T1Curve) -> Result<T1Fit> {
    curve.validate()?;
    let t = &curve.times_us;
    let p = &curve.population;
    let t_max = t[t.len() - 1];
    let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sig = curve.sigma.clone();
    sig.sort_by(f64::total_cmp);
    let median_sigma = sig[sig.len() / 2];
    if hi - lo <= 4.0 * median_sigma {
        return Err(Error::Undecayed {
            t2_lower_bound: t_max,
        });
    }
    let starts = lattice(&[
        vec![p[0]],
        vec![p[p.len() - 1]],
        vec![0.1 * t_max, 0.3 * t_max, t_max],
    ]);
    let span = (hi - lo).max(1e-6);
    let times = t.clone();
    let problem = NlsProblem {
        names: vec!["p0".into(), "p_inf".into(), "t1".into()],
        y: p,
        sigma: &curve.sigma,
        lower: vec![lo - span, lo - span, t[0] * 1e-2],
        upper: vec![hi + span, hi + span, t_max * 1e3],
        model: move |q: &[f64]| {
            times
                .iter()
                .map(|ti| q[1] + (q[0] - q[1]) * (-ti / q[2]).exp())
                .collect::<Vec<_>>()
        },
    };
    let r = nls_fit(&problem, &starts, &NlsOptions::default())
        .map_err(|e| Error::T1FitFailed(e.to_string()))?;
    if !r.converged {
        return Err(Error::T1FitFailed("no convergence".into()));
    }
    Ok(T1Fit {
        t1_us: r.params[2],
        t1_err_us: r.errors[2],
        p0: r.params[0],
        p_inf: r.params[1],
        reduced_chi2: r.reduced_chi2,
    })
}

/// Heuristic thresholds on `T2sat / T1`.
pub const BULK_LIKE_MIN: f64 = 0.3;
pub const SURFACE_LIKE_MAX: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationDiagnostics {
    /// `None` when T2sat is infinite.
    pub ratio: Option<f64>,
    pub ratio_err: Option<f64>,
    /// Set when only a lower bound is available.
    pub ratio_lower_bound: Option<f64>,
    /// `"bulk-like"`, `"surface-like"`, `"intermediate"` or `"undetermined"`.
    pub class: String,
}

fn classify(r: f64) -> &'static str {
    if r >= BULK_LIKE_MIN {
        "bulk-like"
    } else if r <= SURFACE_LIKE_MAX {
        "surface-like"
    } else {
        "intermediate"
    }
}

/// Ratio `T2sat / T1` with propagated uncertainty.
pub fn saturation_diagnostics(
    scaling: &ScalingFit,
    t1_us: f64,
    t1_err_us: f64,
) -> Result<SaturationDiagnostics> {
    if !(t1_us > 0.0) {
        return Err(Error::InvalidParameter("T1 must be > 0".into()));
    }
    Ok(match scaling.t2_sat_us {
        Some(sat) => {
            let ratio = sat / t1_us;
            let rel = ((scaling.t2_sat_err_us.unwrap_or(0.0) / sat).powi(2)
                + (t1_err_us / t1_us).powi(2))
            .sqrt();
            SaturationDiagnostics {
                ratio: Some(ratio),
                ratio_err: Some(ratio * rel),
                ratio_lower_bound: None,
                class: classify(ratio).into(),
            }
        }
        None => {
            let lb = scaling.t2_sat_lower_bound_us() / (t1_us + t1_err_us);
            SaturationDiagnostics {
                ratio: None,
                ratio_err: None,
                ratio_lower_bound: Some(lb),
                class: if lb >= BULK_LIKE_MIN {
                    "bulk-like".into()
                } else {
                    "undetermined".into()
                },
            }
        }
    })
}
